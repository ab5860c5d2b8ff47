//! On-disk corpus layout.
//!
//! A corpus directory holds `manifest.tsv` and one raw file per image
//! (1024 little-endian f32 values, row-major). The manifest starts with
//! `#`-prefixed `key = value` lines recording the generator settings,
//! then a header row and one tab-separated record per image:
//!
//! ```text
//! path  identity  masked  split  role  session  sample
//! images/train/0003_017_m.f32  3  1  train  train  0  17
//! images/test/test_0027_probe_m_s2_01.f32  27  1  test  probe  2  1
//! ```
//!
//! `masked` is 0 or 1. `role` is `train`, `reference` or `probe`. `session`
//! is 0 for training images, 1 for references and 2 or 3 for probes.
//! `sample` is the per-identity index of a training sample (and of an
//! evaluation image within its group).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{
    EvalImage, EvalSet, Image, Role, Split, SplitConfig, Splits, TrainSample, TrainSet, PIXELS,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const HEADER: &str = "path\tidentity\tmasked\tsplit\trole\tsession\tsample";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub identity: u64,
    pub masked: bool,
    pub split: Split,
    pub role: Role,
    pub session: u8,
    pub sample: usize,
}

impl ManifestRecord {
    fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.path,
            self.identity,
            u8::from(self.masked),
            self.split.as_str(),
            self.role.as_str(),
            self.session,
            self.sample
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let bad = |what: &str| Error::Corpus(format!("manifest line {lineno}: {what}: `{line}`"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 tab-separated fields"));
        }
        Ok(ManifestRecord {
            path: f[0].to_string(),
            identity: f[1].parse().map_err(|_| bad("bad identity"))?,
            masked: match f[2] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("bad mask flag")),
            },
            split: match f[3] {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                _ => return Err(bad("bad split")),
            },
            role: match f[4] {
                "train" => Role::Train,
                "reference" => Role::Reference,
                "probe" => Role::Probe,
                _ => return Err(bad("bad role")),
            },
            session: f[5].parse().map_err(|_| bad("bad session"))?,
            sample: f[6].parse().map_err(|_| bad("bad sample index"))?,
        })
    }
}

fn config_lines(splits: &Splits) -> Vec<(&'static str, String)> {
    let c = &splits.config;
    vec![
        ("dataset_seed", splits.dataset_seed.to_string()),
        ("train_identities", c.train_identities.to_string()),
        ("samples_per_identity", c.samples_per_identity.to_string()),
        ("val_identities", c.val_identities.to_string()),
        ("test_identities", c.test_identities.to_string()),
        ("refs_unmasked", c.refs_unmasked.to_string()),
        ("refs_masked", c.refs_masked.to_string()),
        ("probes_unmasked", c.probes_unmasked.to_string()),
        ("probes_masked", c.probes_masked.to_string()),
        (
            "coverage",
            c.fixed_coverage.map_or("random".to_string(), |v| v.to_string()),
        ),
    ]
}

fn image_bytes(image: &Image) -> Vec<u8> {
    image.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes every image and the manifest. Returns the manifest records.
pub fn write_corpus(splits: &Splits, dir: &Path) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::new();
    let mut files: Vec<(String, &Image)> = Vec::new();
    for s in &splits.train.samples {
        for (masked, image) in [(false, &s.unmasked), (true, &s.masked)] {
            let path = format!(
                "images/train/{:04}_{:03}_{}.f32",
                s.identity_id,
                s.sample,
                if masked { 'm' } else { 'u' }
            );
            records.push(ManifestRecord {
                path: path.clone(),
                identity: s.identity_id,
                masked,
                split: Split::Train,
                role: Role::Train,
                session: 0,
                sample: s.sample,
            });
            files.push((path, image));
        }
    }
    for set in [&splits.val, &splits.test] {
        let mut group_index: BTreeMap<(u64, Role, bool), usize> = BTreeMap::new();
        for im in &set.images {
            let idx = group_index.entry((im.identity_id, im.role, im.masked)).or_insert(0);
            let path = format!("images/{}/{}.f32", set.split.as_str(), im.name);
            records.push(ManifestRecord {
                path: path.clone(),
                identity: im.identity_id,
                masked: im.masked,
                split: set.split,
                role: im.role,
                session: im.session,
                sample: *idx,
            });
            *idx += 1;
            files.push((path, &im.image));
        }
    }

    for split in ["train", "val", "test"] {
        fs::create_dir_all(dir.join("images").join(split))?;
    }
    for (path, image) in &files {
        fs::write(dir.join(path), image_bytes(image))?;
    }
    let mut text = String::from("# focusface synthetic corpus\n");
    for (k, v) in config_lines(splits) {
        let _ = writeln!(text, "# {k} = {v}");
    }
    text.push_str(HEADER);
    text.push('\n');
    for r in &records {
        text.push_str(&r.line());
        text.push('\n');
    }
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(records)
}

fn read_image(dir: &Path, path: &str) -> Result<Image> {
    let bytes = fs::read(dir.join(path)).map_err(|e| Error::Corpus(format!("{path}: {e}")))?;
    if bytes.len() != 4 * PIXELS {
        return Err(Error::Corpus(format!(
            "{path}: expected {} bytes, found {}",
            4 * PIXELS,
            bytes.len()
        )));
    }
    let image: Image = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if image.iter().any(|v| !(v.abs() <= 1.0)) {
        return Err(Error::Corpus(format!("{path}: pixel outside [-1, 1]")));
    }
    Ok(image)
}

fn header_value<T: std::str::FromStr>(cfg: &BTreeMap<String, String>, key: &str) -> Result<T> {
    cfg.get(key)
        .ok_or_else(|| Error::Corpus(format!("manifest missing `{key}`")))?
        .parse()
        .map_err(|_| Error::Corpus(format!("manifest has a bad `{key}` value")))
}

/// Reads a corpus written by [`write_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Splits> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Corpus(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let mut cfg = BTreeMap::new();
    let mut records = Vec::new();
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                cfg.insert(k.trim().to_string(), v.trim().to_string());
            }
        } else if !seen_header {
            if line != HEADER {
                return Err(Error::Corpus(format!("unexpected manifest header `{line}`")));
            }
            seen_header = true;
        } else if !line.is_empty() {
            records.push(ManifestRecord::parse(line, i + 1)?);
        }
    }
    let coverage: String = header_value(&cfg, "coverage")?;
    let config = SplitConfig {
        train_identities: header_value(&cfg, "train_identities")?,
        samples_per_identity: header_value(&cfg, "samples_per_identity")?,
        val_identities: header_value(&cfg, "val_identities")?,
        test_identities: header_value(&cfg, "test_identities")?,
        refs_unmasked: header_value(&cfg, "refs_unmasked")?,
        refs_masked: header_value(&cfg, "refs_masked")?,
        probes_unmasked: header_value(&cfg, "probes_unmasked")?,
        probes_masked: header_value(&cfg, "probes_masked")?,
        fixed_coverage: match coverage.as_str() {
            "random" => None,
            v => Some(v.parse().map_err(|_| Error::Corpus("manifest has a bad `coverage` value".into()))?),
        },
    };
    config.validate()?;
    let dataset_seed: u64 = header_value(&cfg, "dataset_seed")?;

    let spp = config.samples_per_identity;
    let mut train: Vec<Option<(Option<Image>, Option<Image>)>> = vec![None; config.train_identities * spp];
    let mut val = Vec::new();
    let mut test = Vec::new();
    for r in &records {
        let image = read_image(dir, &r.path)?;
        match r.split {
            Split::Train => {
                let label = r.identity as usize;
                if label >= config.train_identities || r.sample >= spp {
                    return Err(Error::Corpus(format!("{}: out-of-range training record", r.path)));
                }
                let slot = train[label * spp + r.sample].get_or_insert((None, None));
                let target = if r.masked { &mut slot.1 } else { &mut slot.0 };
                if target.replace(image).is_some() {
                    return Err(Error::Corpus(format!("{}: duplicate training record", r.path)));
                }
            }
            split => {
                let name = Path::new(&r.path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| r.path.clone());
                let im = EvalImage {
                    name,
                    identity_id: r.identity,
                    masked: r.masked,
                    role: r.role,
                    session: r.session,
                    image,
                };
                if split == Split::Val {
                    val.push(im)
                } else {
                    test.push(im)
                }
            }
        }
    }
    let samples = train
        .into_iter()
        .enumerate()
        .map(|(i, slot)| match slot {
            Some((Some(unmasked), Some(masked))) => Ok(TrainSample {
                label: i / spp,
                identity_id: (i / spp) as u64,
                sample: i % spp,
                unmasked,
                masked,
            }),
            _ => Err(Error::Corpus(format!(
                "training sample {} of identity {} is incomplete",
                i % spp,
                i / spp
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Splits {
        dataset_seed,
        config: config.clone(),
        train: TrainSet {
            num_classes: config.train_identities,
            samples_per_identity: spp,
            samples,
        },
        val: EvalSet {
            split: Split::Val,
            images: val,
        },
        test: EvalSet {
            split: Split::Test,
            images: test,
        },
    })
}
