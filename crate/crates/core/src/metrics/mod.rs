//! Verification protocols, similarity scoring and error-rate metrics.
//!
//! A pair matches when its score is at or above the threshold.

use std::collections::HashMap;

use serde_json::json;

use crate::data::{image_tensor, EvalSet, Image, Role};
use crate::error::{Error, Result};
use crate::model::DualHeadNet;
use crate::tensor::Real;

/// Cosine of the angle between two embeddings, clamped to [−1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        return Err(Error::invalid("cosine_similarity", "zero-norm embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolMode {
    /// Unmasked references, masked probes.
    UnmaskedMasked,
    /// Masked references, masked probes.
    MaskedMasked,
}

impl ProtocolMode {
    pub fn label(self) -> &'static str {
        match self {
            ProtocolMode::UnmaskedMasked => "U-M",
            ProtocolMode::MaskedMasked => "M-M",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolEntry {
    pub name: String,
    pub identity: u64,
}

/// Every reference is compared against every probe.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerificationProtocol {
    pub mode: ProtocolMode,
    pub references: Vec<ProtocolEntry>,
    pub probes: Vec<ProtocolEntry>,
}

impl VerificationProtocol {
    pub fn build(set: &EvalSet, mode: ProtocolMode) -> Self {
        let ref_masked = mode == ProtocolMode::MaskedMasked;
        let pick = |role: Role, masked: bool| {
            set.images
                .iter()
                .filter(|i| i.role == role && i.masked == masked)
                .map(|i| ProtocolEntry {
                    name: i.name.clone(),
                    identity: i.identity_id,
                })
                .collect()
        };
        VerificationProtocol {
            mode,
            references: pick(Role::Reference, ref_masked),
            probes: pick(Role::Probe, true),
        }
    }

    pub fn pair_count(&self) -> usize {
        self.references.len() * self.probes.len()
    }

    pub fn genuine_count(&self) -> usize {
        self.references
            .iter()
            .map(|r| self.probes.iter().filter(|p| p.identity == r.identity).count())
            .sum()
    }
}

/// Genuine and impostor similarity scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

pub type EmbeddingStore = HashMap<String, Vec<f64>>;

/// Scores every reference×probe pair of the protocol.
pub fn score_protocol(store: &EmbeddingStore, protocol: &VerificationProtocol) -> Result<ScoreSet> {
    let get = |e: &ProtocolEntry| {
        store
            .get(&e.name)
            .ok_or_else(|| Error::MissingEmbedding(e.name.clone()))
    };
    let mut scores = ScoreSet::default();
    for r in &protocol.references {
        let er = get(r)?;
        for p in &protocol.probes {
            let s = cosine_similarity(er, get(p)?)?;
            if r.identity == p.identity {
                scores.genuine.push(s);
            } else {
                scores.impostor.push(s);
            }
        }
    }
    Ok(scores)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub eer: f64,
    pub auc: f64,
    pub fmr100: f64,
    pub fmr10: f64,
    pub gmean: f64,
    pub imean: f64,
    pub threshold_at_eer: f64,
}

/// One operating point. The final point of a curve has threshold +∞.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub fmr: f64,
    pub fnmr: f64,
    pub threshold: f64,
}

fn check_nonempty(scores: &ScoreSet) -> Result<()> {
    if scores.genuine.is_empty() || scores.impostor.is_empty() {
        return Err(Error::Metrics(format!(
            "need genuine and impostor scores, got {} and {}",
            scores.genuine.len(),
            scores.impostor.len()
        )));
    }
    if scores.genuine.iter().chain(&scores.impostor).any(|s| s.is_nan()) {
        return Err(Error::Metrics("NaN score".into()));
    }
    Ok(())
}

/// Operating points at every distinct score, ascending, then at +∞.
pub fn roc_points(scores: &ScoreSet) -> Result<Vec<RocPoint>> {
    check_nonempty(scores)?;
    let mut g = scores.genuine.clone();
    let mut i = scores.impostor.clone();
    g.sort_by(f64::total_cmp);
    i.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = g.iter().chain(&i).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (ng, ni) = (g.len() as f64, i.len() as f64);
    // Pointers count the scores strictly below the current threshold.
    let (mut gb, mut ib) = (0, 0);
    let mut out = Vec::with_capacity(thresholds.len() + 1);
    for &t in &thresholds {
        while gb < g.len() && g[gb] < t {
            gb += 1;
        }
        while ib < i.len() && i[ib] < t {
            ib += 1;
        }
        out.push(RocPoint {
            fmr: (i.len() - ib) as f64 / ni,
            fnmr: gb as f64 / ng,
            threshold: t,
        });
    }
    out.push(RocPoint {
        fmr: 0.0,
        fnmr: 1.0,
        threshold: f64::INFINITY,
    });
    Ok(out)
}

/// Trapezoidal area under (FMR, 1 − FNMR).
pub fn roc_auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[0].fmr - w[1].fmr) * ((1.0 - w[0].fnmr) + (1.0 - w[1].fnmr)) / 2.0)
        .sum()
}

/// Lowest FNMR among points with FMR at or below `max_fmr`.
pub fn fnmr_at(points: &[RocPoint], max_fmr: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.fmr <= max_fmr)
        .map(|p| p.fnmr)
        .fold(1.0, f64::min)
}

/// Equal error rate and its threshold, interpolated linearly between the
/// last point with FNMR < FMR and the first with FNMR ≥ FMR.
pub fn eer(points: &[RocPoint]) -> (f64, f64) {
    let k = points
        .iter()
        .position(|p| p.fnmr >= p.fmr)
        .expect("the +inf point has FNMR 1 > FMR 0");
    if k == 0 {
        return (points[0].fmr, points[0].threshold);
    }
    let (a, b) = (points[k - 1], points[k]);
    let (da, db) = (a.fmr - a.fnmr, b.fmr - b.fnmr);
    let w = da / (da - db);
    let rate = a.fmr + w * (b.fmr - a.fmr);
    let threshold = if b.threshold.is_finite() {
        a.threshold + w * (b.threshold - a.threshold)
    } else {
        a.threshold
    };
    (rate, threshold)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn compute_metrics(scores: &ScoreSet) -> Result<MetricsReport> {
    let points = roc_points(scores)?;
    let (eer, threshold_at_eer) = eer(&points);
    Ok(MetricsReport {
        eer,
        auc: roc_auc(&points),
        fmr100: fnmr_at(&points, 0.01),
        fmr10: fnmr_at(&points, 0.10),
        gmean: mean(&scores.genuine),
        imean: mean(&scores.impostor),
        threshold_at_eer,
    })
}

/// Formats like C's `%.9g`.
pub fn format_g9(x: f64) -> String {
    const DIGITS: i32 = 9;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-4..DIGITS).contains(&exp) {
        trim(format!("{:.*}", (DIGITS - 1 - exp) as usize, x))
    } else {
        format!(
            "{}e{}{:02}",
            trim(mantissa.to_string()),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    }
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fmr,fnmr\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            format_g9(p.threshold),
            format_g9(p.fmr),
            format_g9(p.fnmr)
        ));
    }
    out
}

/// Flat JSON document with the metric fields and protocol metadata.
pub fn report_json(report: &MetricsReport, protocol: &str, scores: &ScoreSet, extra: &[(&str, String)]) -> String {
    let mut doc = json!({
        "protocol": protocol,
        "genuine_pairs": scores.genuine.len(),
        "impostor_pairs": scores.impostor.len(),
        "eer": report.eer,
        "auc": report.auc,
        "fmr100": report.fmr100,
        "fmr10": report.fmr10,
        "gmean": report.gmean,
        "imean": report.imean,
        "threshold_at_eer": report.threshold_at_eer,
    });
    for (k, v) in extra {
        doc[*k] = json!(v);
    }
    serde_json::to_string_pretty(&doc).expect("plain values serialize") + "\n"
}

/// Recognition embeddings of every image in the set, keyed by name.
pub fn embed_set<T: Real>(model: &DualHeadNet<T>, set: &EvalSet) -> Result<EmbeddingStore> {
    let images: Vec<&Image> = set.images.iter().map(|i| &i.image).collect();
    let out = model.forward(&image_tensor::<T>(&images)?)?;
    Ok(set
        .images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let row = out.recognition.row(i).iter().map(|v| v.f64()).collect();
            (im.name.clone(), row)
        })
        .collect())
}

/// Builds the protocol, scores it with the model and computes metrics.
pub fn evaluate<T: Real>(
    model: &DualHeadNet<T>,
    set: &EvalSet,
    mode: ProtocolMode,
) -> Result<(ScoreSet, MetricsReport)> {
    let store = embed_set(model, set)?;
    let scores = score_protocol(&store, &VerificationProtocol::build(set, mode))?;
    let report = compute_metrics(&scores)?;
    Ok((scores, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskRoc {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC of mask detection from classifier logits `[unmasked, masked]`.
/// Masked images play the genuine role. The score is the logit margin
/// `l_masked − l_unmasked`, which ranks like P(masked) but does not saturate.
pub fn mask_roc_from_logits(logits: &[[f64; 2]], masked: &[bool]) -> Result<MaskRoc> {
    if logits.len() != masked.len() {
        return Err(Error::shape("mask_detection_roc", &[logits.len()], &[masked.len()]));
    }
    let mut scores = ScoreSet::default();
    for (l, &m) in logits.iter().zip(masked) {
        let p = l[1] - l[0];
        if m {
            scores.genuine.push(p);
        } else {
            scores.impostor.push(p);
        }
    }
    if scores.genuine.is_empty() || scores.impostor.is_empty() {
        return Err(Error::Metrics(
            "mask detection needs both masked and unmasked images".into(),
        ));
    }
    let points = roc_points(&scores)?;
    Ok(MaskRoc {
        auc: roc_auc(&points),
        points,
    })
}

pub fn mask_detection_roc<T: Real>(model: &DualHeadNet<T>, images: &[&Image], masked: &[bool]) -> Result<MaskRoc> {
    if images.is_empty() {
        return Err(Error::Metrics("empty image set".into()));
    }
    let out = model.forward(&image_tensor::<T>(images)?)?;
    let logits: Vec<[f64; 2]> = (0..images.len())
        .map(|i| {
            let r = out.mask_logits.row(i);
            [r[0].f64(), r[1].f64()]
        })
        .collect();
    mask_roc_from_logits(&logits, masked)
}

#[cfg(test)]
mod tests;
