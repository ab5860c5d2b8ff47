//! Seed-addressed synthetic identity corpus with mask occlusion.
//!
//! Every image is a pure function of the dataset seed and the image's
//! coordinates (identity, sample slot). No RNG state is shared between
//! images, so generation order and thread count do not matter.

mod corpus;

pub use corpus::{load_corpus, write_corpus, ManifestRecord, MANIFEST_FILE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SIDE: usize = 32;
pub const PIXELS: usize = SIDE * SIDE;
pub const NUM_BLOBS: usize = 6;
pub const NOISE_STD: f64 = 0.05;
pub const MAX_SHIFT: i64 = 2;
pub const MIN_COVERAGE: f64 = 0.40;
pub const MAX_COVERAGE: f64 = 0.55;

/// A 32×32 single-channel image, row-major, values in [−1, 1].
pub type Image = Vec<f32>;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from a parent seed and a list of coordinates.
pub fn derive_seed(parent: u64, coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(splitmix64(parent), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

const STREAM_IDENTITY: u64 = 1;
const STREAM_VARIATION: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_PARTNER: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Blob {
    x: f64,
    y: f64,
    width: f64,
    amplitude: f64,
}

/// One synthetic subject: a fixed mixture of Gaussian intensity blobs.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub identity_id: u64,
    pub base_seed: u64,
    blobs: [Blob; NUM_BLOBS],
}

impl IdentitySpec {
    pub fn new(identity_id: u64, dataset_seed: u64) -> Self {
        let base_seed = derive_seed(dataset_seed, &[STREAM_IDENTITY, identity_id]);
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        let blobs = std::array::from_fn(|_| {
            let magnitude = rng.random_range(0.4..1.0);
            Blob {
                x: rng.random_range(3.0..29.0),
                y: rng.random_range(3.0..29.0),
                width: rng.random_range(2.0..5.0),
                amplitude: if rng.random_bool(0.5) { magnitude } else { -magnitude },
            }
        });
        IdentitySpec {
            identity_id,
            base_seed,
            blobs,
        }
    }

    /// Noise-free pattern shifted by `(dx, dy)` pixels.
    pub fn pattern(&self, dx: i64, dy: i64) -> Vec<f64> {
        let mut out = vec![0.0; PIXELS];
        for b in &self.blobs {
            let inv = 1.0 / (2.0 * b.width * b.width);
            let (cx, cy) = (b.x + dx as f64, b.y + dy as f64);
            for r in 0..SIDE {
                let ry = r as f64 - cy;
                for c in 0..SIDE {
                    let rx = c as f64 - cx;
                    out[r * SIDE + c] += b.amplitude * (-(rx * rx + ry * ry) * inv).exp();
                }
            }
        }
        out
    }
}

/// Base pattern plus per-sample jitter: an integer translation in {−2..2}²
/// and additive Gaussian noise (σ = 0.05), clipped to [−1, 1].
pub fn render_sample(identity: &IdentitySpec, variation_seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(identity.base_seed, &[STREAM_VARIATION, variation_seed]));
    let dx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
    let dy = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
    let noise = Normal::new(0.0, NOISE_STD).expect("positive std");
    identity
        .pattern(dx, dy)
        .into_iter()
        .map(|v| (v + noise.sample(&mut rng)).clamp(-1.0, 1.0) as f32)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskType {
    /// Full-width rectangle with horizontal pleats.
    Surgical,
    /// Plain trapezoid.
    N95,
    /// Trapezoid with a vertical centre ridge.
    Kn95,
    /// Rectangle with a woven texture.
    Cloth,
}

impl MaskType {
    pub const ALL: [MaskType; 4] = [MaskType::Surgical, MaskType::N95, MaskType::Kn95, MaskType::Cloth];
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub mask_type: MaskType,
    pub color_intensity: f64,
    /// Fraction of the image height covered, measured from the bottom.
    pub coverage: f64,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_COVERAGE..=MAX_COVERAGE).contains(&self.coverage) {
            return Err(Error::config(
                "coverage",
                format!("{} outside [{MIN_COVERAGE}, {MAX_COVERAGE}]", self.coverage),
            ));
        }
        if !(-1.0..=1.0).contains(&self.color_intensity) {
            return Err(Error::config(
                "color_intensity",
                format!("{} outside [-1, 1]", self.color_intensity),
            ));
        }
        Ok(())
    }

    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_MASK]));
        MaskSpec {
            mask_type: MaskType::ALL[rng.random_range(0..4)],
            color_intensity: rng.random_range(-1.0..=1.0),
            coverage: rng.random_range(MIN_COVERAGE..=MAX_COVERAGE),
        }
    }

    pub fn occluded_rows(&self) -> usize {
        ((self.coverage * SIDE as f64).round() as usize).min(SIDE)
    }

    fn pixel(&self, row_in_mask: usize, rows: usize, col: usize) -> f64 {
        let color = self.color_intensity;
        // Pixels beside the trapezoid are the darker strap/shadow tone.
        let shade = 0.5 * color - 0.5;
        let inside_trapezoid = || {
            let t = if rows > 1 { row_in_mask as f64 / (rows - 1) as f64 } else { 1.0 };
            let half = SIDE as f64 * (0.3 + 0.2 * t);
            (col as f64 + 0.5 - SIDE as f64 / 2.0).abs() <= half
        };
        // The top edge of every occluder is a contrasting rim.
        if row_in_mask == 0 {
            return if color < 0.0 { color + 0.6 } else { color - 0.6 };
        }
        let v = match self.mask_type {
            MaskType::Surgical => {
                if row_in_mask.is_multiple_of(4) {
                    color + if color < 0.0 { 0.3 } else { -0.3 }
                } else {
                    color
                }
            }
            MaskType::N95 => {
                if inside_trapezoid() {
                    color
                } else {
                    shade
                }
            }
            MaskType::Kn95 => {
                if !inside_trapezoid() {
                    shade
                } else if col == SIDE / 2 - 1 || col == SIDE / 2 {
                    color + 0.4
                } else {
                    color
                }
            }
            MaskType::Cloth => {
                let weave = if (row_in_mask / 2 + col / 2).is_multiple_of(2) { 0.2 } else { -0.2 };
                color + weave
            }
        };
        v.clamp(-1.0, 1.0)
    }
}

/// Overwrites the bottom `round(coverage·32)` rows with the occluder pattern.
pub fn apply_mask(image: &[f32], spec: &MaskSpec) -> Image {
    let mut out = image.to_vec();
    let rows = spec.occluded_rows();
    let first = SIDE - rows;
    for r in first..SIDE {
        for c in 0..SIDE {
            out[r * SIDE + c] = spec.pixel(r - first, rows, c) as f32;
        }
    }
    out
}

pub fn flip_horizontal(image: &[f32]) -> Image {
    image
        .chunks_exact(SIDE)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Selection {
    /// The masked member is the masked version of the unmasked image.
    #[default]
    Original,
    /// The masked member is another masked image of the same subject.
    Random,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Selection::Original => "original",
            Selection::Random => "random",
        }
    }
}

impl std::str::FromStr for Selection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Selection::Original),
            "random" => Ok(Selection::Random),
            _ => Err(Error::config("selection", format!("expected original|random, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub unmasked: Image,
    pub masked: Image,
    pub flipped: bool,
}

/// Masked image of a sample, using the sample's own mask draw.
pub fn masked_sample(identity: &IdentitySpec, sample_seed: u64) -> Image {
    apply_mask(&render_sample(identity, sample_seed), &mask_for(identity, sample_seed, None))
}

/// Builds one training pair. In random mode the masked member comes from an
/// independently seeded sample of the same identity, never the anchor.
pub fn make_pair(identity: &IdentitySpec, sample_seed: u64, selection: Selection, flip: bool) -> Pair {
    let unmasked = render_sample(identity, sample_seed);
    let masked = match selection {
        Selection::Original => masked_sample(identity, sample_seed),
        Selection::Random => {
            let mut partner = derive_seed(sample_seed, &[STREAM_PARTNER]);
            if partner == sample_seed {
                partner = partner.wrapping_add(1);
            }
            masked_sample(identity, partner)
        }
    };
    if flip {
        Pair {
            unmasked: flip_horizontal(&unmasked),
            masked: flip_horizontal(&masked),
            flipped: true,
        }
    } else {
        Pair {
            unmasked,
            masked,
            flipped: false,
        }
    }
}

/// Aligned image pairs for one training iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch<T> {
    /// `[B, 1, 32, 32]`.
    pub unmasked: Tensor<T>,
    pub masked: Tensor<T>,
    pub identity_labels: Vec<usize>,
    /// Mask-classifier targets of the unmasked run (all 0).
    pub unmasked_mask_labels: Vec<usize>,
    /// Mask-classifier targets of the masked run (all 1).
    pub masked_mask_labels: Vec<usize>,
    pub flip_flags: Vec<bool>,
}

impl<T: Real> PairBatch<T> {
    pub fn from_pairs(pairs: &[Pair], labels: &[usize]) -> Result<Self> {
        if pairs.is_empty() || pairs.len() != labels.len() {
            return Err(Error::invalid(
                "pair_batch",
                format!("{} pairs with {} labels", pairs.len(), labels.len()),
            ));
        }
        let stack = |pick: fn(&Pair) -> &Image| {
            let data = pairs
                .iter()
                .flat_map(|p| pick(p).iter().map(|&v| T::of(v as f64)))
                .collect();
            Tensor::new(vec![pairs.len(), 1, SIDE, SIDE], data)
        };
        Ok(PairBatch {
            unmasked: stack(|p| &p.unmasked)?,
            masked: stack(|p| &p.masked)?,
            identity_labels: labels.to_vec(),
            unmasked_mask_labels: vec![0; pairs.len()],
            masked_mask_labels: vec![1; pairs.len()],
            flip_flags: pairs.iter().map(|p| p.flipped).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.identity_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity_labels.is_empty()
    }
}

/// Stacks images into a `[N, 1, 32, 32]` tensor.
pub fn image_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let data = images.iter().flat_map(|im| im.iter().map(|&v| T::of(v as f64))).collect();
    Tensor::new(vec![images.len(), 1, SIDE, SIDE], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Train,
    Reference,
    Probe,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Reference => "reference",
            Role::Probe => "probe",
        }
    }
}

/// Corpus dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub train_identities: usize,
    pub samples_per_identity: usize,
    pub val_identities: usize,
    pub test_identities: usize,
    pub refs_unmasked: usize,
    pub refs_masked: usize,
    pub probes_unmasked: usize,
    pub probes_masked: usize,
    /// When set, every mask uses this coverage instead of a random draw.
    pub fixed_coverage: Option<f64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_identities: 20,
            samples_per_identity: 64,
            val_identities: 5,
            test_identities: 8,
            refs_unmasked: 2,
            refs_masked: 4,
            probes_unmasked: 4,
            probes_masked: 8,
            fixed_coverage: None,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, n) in [
            ("train_identities", self.train_identities),
            ("val_identities", self.val_identities),
            ("test_identities", self.test_identities),
        ] {
            if n < 2 {
                return Err(Error::config(key, format!("need at least 2 identities, got {n}")));
            }
        }
        for (key, n) in [("val_identities", self.val_identities), ("test_identities", self.test_identities)] {
            if n > self.train_identities {
                return Err(Error::config(
                    key,
                    format!("{n} exceeds train_identities ({})", self.train_identities),
                ));
            }
        }
        if self.samples_per_identity < 2 {
            return Err(Error::config("samples_per_identity", "need at least 2 samples"));
        }
        for (key, n) in [
            ("refs_unmasked", self.refs_unmasked),
            ("refs_masked", self.refs_masked),
            ("probes_unmasked", self.probes_unmasked),
            ("probes_masked", self.probes_masked),
        ] {
            if n == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if let Some(c) = self.fixed_coverage {
            if !(MIN_COVERAGE..=MAX_COVERAGE).contains(&c) {
                return Err(Error::config(
                    "coverage",
                    format!("{c} outside [{MIN_COVERAGE}, {MAX_COVERAGE}]"),
                ));
            }
        }
        Ok(())
    }

    pub fn total_identities(&self) -> usize {
        self.train_identities + self.val_identities + self.test_identities
    }
}

/// One training sample: the unmasked image and its fixed masked version.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub label: usize,
    pub identity_id: u64,
    pub sample: usize,
    pub unmasked: Image,
    pub masked: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet {
    pub num_classes: usize,
    pub samples_per_identity: usize,
    /// Ordered by `(label, sample)`.
    pub samples: Vec<TrainSample>,
}

impl TrainSet {
    fn index(&self, label: usize, sample: usize) -> usize {
        label * self.samples_per_identity + sample
    }

    /// Pair anchored at sample `index`. `partner` picks among the other
    /// samples of the identity in random mode and is ignored otherwise.
    pub fn pair(&self, index: usize, selection: Selection, partner: usize, flip: bool) -> Pair {
        let anchor = &self.samples[index];
        let masked = match selection {
            Selection::Original => &anchor.masked,
            Selection::Random => {
                let others = self.samples_per_identity - 1;
                let mut k = partner % others;
                if k >= anchor.sample {
                    k += 1;
                }
                &self.samples[self.index(anchor.label, k)].masked
            }
        };
        if flip {
            Pair {
                unmasked: flip_horizontal(&anchor.unmasked),
                masked: flip_horizontal(masked),
                flipped: true,
            }
        } else {
            Pair {
                unmasked: anchor.unmasked.clone(),
                masked: masked.clone(),
                flipped: false,
            }
        }
    }
}

/// One image of a verification split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalImage {
    pub name: String,
    pub identity_id: u64,
    pub masked: bool,
    pub role: Role,
    /// 1 for references, 2 or 3 for probes.
    pub session: u8,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub split: Split,
    pub images: Vec<EvalImage>,
}

impl EvalSet {
    pub fn count(&self, role: Role, masked: bool) -> usize {
        self.images.iter().filter(|i| i.role == role && i.masked == masked).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub dataset_seed: u64,
    pub config: SplitConfig,
    pub train: TrainSet,
    pub val: EvalSet,
    pub test: EvalSet,
}

fn mask_for(identity: &IdentitySpec, seed: u64, fixed: Option<f64>) -> MaskSpec {
    let mut spec = MaskSpec::sample(derive_seed(identity.base_seed, &[seed]));
    if let Some(c) = fixed {
        spec.coverage = c;
    }
    spec
}

fn eval_identity(cfg: &SplitConfig, identity: &IdentitySpec, split: Split) -> Vec<EvalImage> {
    let mut out = Vec::new();
    let groups = [
        (Role::Reference, false, cfg.refs_unmasked),
        (Role::Reference, true, cfg.refs_masked),
        (Role::Probe, false, cfg.probes_unmasked),
        (Role::Probe, true, cfg.probes_masked),
    ];
    // Slots sit far above the training range, one block per split, so
    // variation seeds never repeat for an identity.
    let mut slot = match split {
        Split::Test => 2_000_000u64,
        _ => 1_000_000u64,
    };
    for (role, masked, n) in groups {
        for i in 0..n {
            let session = match role {
                Role::Reference => 1,
                _ => 2 + (2 * i / n) as u8,
            };
            let seed = slot;
            slot += 1;
            let plain = render_sample(identity, seed);
            let image = if masked {
                apply_mask(&plain, &mask_for(identity, seed, cfg.fixed_coverage))
            } else {
                plain
            };
            out.push(EvalImage {
                name: format!(
                    "{}_{:04}_{}{}_s{}_{:02}",
                    split.as_str(),
                    identity.identity_id,
                    if role == Role::Reference { "ref" } else { "probe" },
                    if masked { "_m" } else { "_u" },
                    session,
                    i
                ),
                identity_id: identity.identity_id,
                masked,
                role,
                session,
                image,
            });
        }
    }
    out
}

/// Generates the train/val/test corpus. Validation uses the first
/// `val_identities` training identities and test the last
/// `test_identities`; the splits share identities but never variation
/// seeds.
pub fn build_splits(cfg: &SplitConfig, dataset_seed: u64) -> Result<Splits> {
    cfg.validate()?;
    let n_train = cfg.train_identities;
    let spp = cfg.samples_per_identity;
    let samples = (0..n_train * spp)
        .into_par_iter()
        .map(|i| {
            let (label, sample) = (i / spp, i % spp);
            let identity = IdentitySpec::new(label as u64, dataset_seed);
            let unmasked = render_sample(&identity, sample as u64);
            let masked = apply_mask(&unmasked, &mask_for(&identity, sample as u64, cfg.fixed_coverage));
            TrainSample {
                label,
                identity_id: label as u64,
                sample,
                unmasked,
                masked,
            }
        })
        .collect();

    let eval = |split: Split, first: usize, n: usize| EvalSet {
        split,
        images: (first..first + n)
            .into_par_iter()
            .flat_map_iter(|id| eval_identity(cfg, &IdentitySpec::new(id as u64, dataset_seed), split))
            .collect(),
    };
    Ok(Splits {
        dataset_seed,
        config: cfg.clone(),
        train: TrainSet {
            num_classes: n_train,
            samples_per_identity: spp,
            samples,
        },
        val: eval(Split::Val, 0, cfg.val_identities),
        test: eval(Split::Test, n_train - cfg.test_identities, cfg.test_identities),
    })
}

#[cfg(test)]
mod tests;
