//! Checkpoint file format.
//!
//! ```text
//! FOCUSFACE-CKPT 1
//! seed 7
//! input_size 32
//! input_channels 1
//! stages 8/2 16/2 32/2
//! recognition_dim 64
//! mask_dim 8
//! num_classes 20
//! param conv1.weight 8,1,3,3
//! ...
//! end
//! ```
//!
//! The header is followed by every parameter as little-endian f32, in the
//! order of the `param` lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ConvStage, DualHeadNet, ToyBackboneConfig};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &str = "FOCUSFACE-CKPT 1";

pub fn write_checkpoint<T: Real, W: Write>(model: &DualHeadNet<T>, mut w: W) -> Result<()> {
    let c = model.config();
    let stages: Vec<String> = c
        .stages
        .iter()
        .map(|s| format!("{}/{}", s.out_channels, s.stride))
        .collect();
    let mut header = format!(
        "{CHECKPOINT_MAGIC}\nseed {}\ninput_size {}\ninput_channels {}\nstages {}\nrecognition_dim {}\nmask_dim {}\nnum_classes {}\n",
        model.seed(),
        c.input_size,
        c.input_channels,
        stages.join(" "),
        c.recognition_dim,
        c.mask_dim,
        model.num_classes()
    );
    for p in model.params().iter() {
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("param {} {}\n", p.name, dims.join(",")));
    }
    header.push_str("end\n");
    w.write_all(header.as_bytes())?;
    for p in model.params().iter() {
        let mut bytes = Vec::with_capacity(4 * p.value.numel());
        for v in p.value.data() {
            bytes.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint<T: Real>(model: &DualHeadNet<T>, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' ').or(if rest.is_empty() { Some("") } else { None }))
        .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
}

fn number<N: std::str::FromStr>(line: &str, key: &str) -> Result<N> {
    field(line, key)?
        .trim()
        .parse()
        .map_err(|_| bad(format!("bad value in `{line}`")))
}

/// Rebuilds the model described by the header and fills in its parameters.
pub fn read_checkpoint<T: Real, R: Read>(r: R) -> Result<DualHeadNet<T>> {
    let mut r = BufReader::new(r);
    let mut lines = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("truncated header"));
        }
        let line = line.trim_end_matches('\n').to_string();
        if line == "end" {
            break;
        }
        lines.push(line);
        if lines.len() > 10_000 {
            return Err(bad("header too long"));
        }
    }
    if lines.first().map(String::as_str) != Some(CHECKPOINT_MAGIC) {
        return Err(bad("not a checkpoint file (bad magic line)"));
    }
    if lines.len() < 8 {
        return Err(bad("incomplete header"));
    }
    let seed: u64 = number(&lines[1], "seed")?;
    let stages = field(&lines[4], "stages")?
        .split_whitespace()
        .map(|s| {
            let (c, st) = s.split_once('/').ok_or_else(|| bad(format!("bad stage `{s}`")))?;
            Ok(ConvStage {
                out_channels: c.parse().map_err(|_| bad(format!("bad stage `{s}`")))?,
                stride: st.parse().map_err(|_| bad(format!("bad stage `{s}`")))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let config = ToyBackboneConfig {
        input_size: number(&lines[2], "input_size")?,
        input_channels: number(&lines[3], "input_channels")?,
        stages,
        recognition_dim: number(&lines[5], "recognition_dim")?,
        mask_dim: number(&lines[6], "mask_dim")?,
    };
    let num_classes: usize = number(&lines[7], "num_classes")?;
    let mut model = DualHeadNet::<T>::new(config, num_classes, seed)?;

    let declared = &lines[8..];
    if declared.len() != model.params().len() {
        return Err(bad(format!(
            "header lists {} parameters, model has {}",
            declared.len(),
            model.params().len()
        )));
    }
    let mut values = Vec::with_capacity(declared.len());
    for (line, p) in declared.iter().zip(model.params().iter()) {
        let rest = field(line, "param")?;
        let (name, dims) = rest.split_once(' ').ok_or_else(|| bad(format!("bad line `{line}`")))?;
        let shape: Vec<usize> = dims
            .split(',')
            .map(|d| d.parse().map_err(|_| bad(format!("bad shape in `{line}`"))))
            .collect::<Result<_>>()?;
        if name != p.name || shape != p.value.shape() {
            return Err(bad(format!(
                "parameter `{name}` {shape:?} does not match expected `{}` {:?}",
                p.name,
                p.value.shape()
            )));
        }
        let mut bytes = vec![0u8; 4 * p.value.numel()];
        r.read_exact(&mut bytes)
            .map_err(|_| bad(format!("truncated data for `{name}`")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        values.push(Tensor::new(shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after parameter data"));
    }
    model.load_values(values)?;
    Ok(model)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<DualHeadNet<T>> {
    let file = File::open(path)
        .map_err(|e| bad(format!("cannot open {}: {e}", path.display())))?;
    read_checkpoint(file)
}
