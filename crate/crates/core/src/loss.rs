//! Loss constructions for multi-task contrastive training.
//!
//! Every loss here records onto a [`Tape`] and returns a scalar node, so the
//! full objective of one iteration is differentiated by a single backward pass.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// How the contrastive term and the two branch losses are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CombMode {
    /// `α·L_mse + β·(L_masked + L_unmasked)`
    #[default]
    Additive,
    /// `α·L_mse · β·(L_masked + L_unmasked)`
    Multiplicative,
}

impl CombMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CombMode::Additive => "additive",
            CombMode::Multiplicative => "multiplicative",
        }
    }
}

impl std::str::FromStr for CombMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "additive" => Ok(CombMode::Additive),
            "multiplicative" => Ok(CombMode::Multiplicative),
            other => Err(format!("expected additive|multiplicative, got `{other}`")),
        }
    }
}

/// Loss hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// ArcFace scale.
    pub s: f64,
    /// ArcFace additive angular margin, radians.
    pub m: f64,
    /// Weight of the mask-detection cross-entropy inside each branch.
    pub lambda: f64,
    /// Weight of the contrastive term.
    pub alpha: f64,
    /// Weight of the summed branch losses.
    pub beta: f64,
    pub comb_mode: CombMode,
    /// Compare l2-normalized recognition embeddings in the contrastive term
    /// instead of the raw ones.
    pub mse_on_normalized: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            s: 64.0,
            m: 0.5,
            lambda: 0.1,
            alpha: 1.0 / 3.0,
            beta: 0.5,
            comb_mode: CombMode::Additive,
            mse_on_normalized: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s.is_finite() && self.s > 0.0) {
            return Err(Error::config("s", format!("must be > 0, got {}", self.s)));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.m) {
            return Err(Error::config("m", format!("must be in [0, π/2), got {}", self.m)));
        }
        for (key, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, format!("must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `−(1/N) Σ log softmax(logits)[target]` over `[N, n]` logits.
pub fn cross_entropy<T: Real>(
    tape: &mut Tape<T>,
    logits: NodeId,
    targets: &[usize],
) -> Result<NodeId> {
    tape.cross_entropy(logits, targets)
}

/// ArcFace loss of `[N, D]` features against class weights `[D, C]`.
pub fn arcface_loss<T: Real>(
    tape: &mut Tape<T>,
    features: NodeId,
    weights: NodeId,
    targets: &[usize],
    s: f64,
    m: f64,
) -> Result<NodeId> {
    let logits = tape.arc_margin_logits(features, weights, targets, s, m)?;
    tape.cross_entropy(logits, targets)
}

/// Mean squared difference between paired unmasked and masked embeddings,
/// averaged over both the batch and the feature axis.
pub fn contrastive_mse<T: Real>(
    tape: &mut Tape<T>,
    unmasked: NodeId,
    masked: NodeId,
) -> Result<NodeId> {
    if tape.shape(unmasked) != tape.shape(masked) {
        return Err(Error::shape(
            "contrastive_mse",
            tape.shape(unmasked),
            tape.shape(masked),
        ));
    }
    let count = tape.value(unmasked).numel() as f64;
    let diff = tape.sub(unmasked, masked)?;
    let sq = tape.dot(diff, diff)?;
    Ok(tape.scale(sq, 1.0 / count))
}

/// `L_arc + λ·L_ce`
pub fn branch_loss<T: Real>(
    tape: &mut Tape<T>,
    l_arc: NodeId,
    l_ce: NodeId,
    lambda: f64,
) -> Result<NodeId> {
    let weighted = tape.scale(l_ce, lambda);
    tape.add(l_arc, weighted)
}

/// Combine the contrastive term with both branch losses.
pub fn combined_loss<T: Real>(
    tape: &mut Tape<T>,
    l_mse: NodeId,
    l_masked: NodeId,
    l_unmasked: NodeId,
    alpha: f64,
    beta: f64,
    mode: CombMode,
) -> Result<NodeId> {
    let contrastive = tape.scale(l_mse, alpha);
    let branches = tape.add(l_masked, l_unmasked)?;
    let branches = tape.scale(branches, beta);
    match mode {
        CombMode::Additive => tape.add(contrastive, branches),
        CombMode::Multiplicative => tape.mul(contrastive, branches),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_input(tape: &mut Tape<f64>, v: f64) -> NodeId {
        tape.input(Tensor::scalar(v))
    }

    fn ce_of(logits: &[f64], n: usize, targets: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::from_f64(vec![logits.len() / n, n], logits).unwrap());
        let l = cross_entropy(&mut tape, z, targets).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn cross_entropy_uniform_cases() {
        assert!((ce_of(&[0.0, 0.0], 2, &[0]) - 2f64.ln()).abs() < 1e-12);
        assert!((ce_of(&[3.0; 4], 4, &[2]) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let l = ce_of(&[1000.0, 0.0], 2, &[0]);
        assert!(l.is_finite() && l.abs() < 1e-12, "{l}");
        let l = ce_of(&[1000.0, 0.0], 2, &[1]);
        assert!((l - 1000.0).abs() < 1e-9, "{l}");
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        let mut tape = Tape::<f64>::new();
        let z = tape.input(Tensor::zeros(vec![2, 3]));
        let err = cross_entropy(&mut tape, z, &[0, 3]).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
        let z1 = tape.input(Tensor::zeros(vec![2, 1]));
        assert!(cross_entropy(&mut tape, z1, &[0, 0]).is_err());
    }

    fn arc_of(x: &[f64], w: &[f64], dim: usize, targets: &[usize], s: f64, m: f64) -> f64 {
        let mut tape = Tape::new();
        let classes = w.len() / dim;
        let xf = tape.input(Tensor::from_f64(vec![x.len() / dim, dim], x).unwrap());
        let wf = tape.input(Tensor::from_f64(vec![dim, classes], w).unwrap());
        let l = arcface_loss(&mut tape, xf, wf, targets, s, m).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn arcface_orthogonal_geometry() {
        // x̂ = Ŵ_0, Ŵ_1 ⊥ Ŵ_0; columns of the 2×2 identity.
        let w = [1.0, 0.0, 0.0, 1.0];
        let l = arc_of(&[2.5, 0.0], &w, 2, &[0], 1.0, 0.0);
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.313262).abs() < 1e-6);

        // s=64, m=0.5, by hand: cosθ = 1 clamps to 1 − 1e-7, target logit
        // 64·(c·cos m − √(1−c²)·sin m) ≈ 56.15, other logit 0.
        let l = arc_of(&[2.5, 0.0], &w, 2, &[0], 64.0, 0.5);
        let c: f64 = 1.0 - 1e-7;
        let target = 64.0 * (c * 0.5f64.cos() - (1.0 - c * c).sqrt() * 0.5f64.sin());
        let oracle = (-target).exp().ln_1p();
        assert!(l <= 1e-20, "{l}");
        assert!((l - oracle).abs() <= 1e-9 * oracle, "{l} vs {oracle}");
    }

    #[test]
    fn arcface_rejects_zero_features() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(vec![1, 2]));
        let w = tape.input(Tensor::ones(vec![2, 2]));
        let err = arcface_loss(&mut tape, x, w, &[0], 64.0, 0.5).unwrap_err();
        assert!(err.to_string().contains("zero norm"));
    }

    fn random_arc_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
        let (n, d, c) = (3, 5, 4);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..d * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        (x, w, t)
    }

    #[test]
    fn arcface_margin_free_reduces_to_scaled_cosine_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (x, w, t) = random_arc_instance(&mut rng);
            let (d, c) = (5, 4);
            let s = rng.random_range(0.5..64.0);
            let arc = arc_of(&x, &w, d, &t, s, 0.0);
            // Independent scalar computation of cosine logits.
            let mut logits = Vec::new();
            for i in 0..3 {
                let xi = &x[i * d..(i + 1) * d];
                let xn = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
                for j in 0..c {
                    let col: Vec<f64> = (0..d).map(|k| w[k * c + j]).collect();
                    let wn = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = xi.iter().zip(&col).map(|(a, b)| a * b).sum();
                    logits.push(s * dot / (xn * wn));
                }
            }
            let ce = ce_of(&logits, c, &t);
            assert!((arc - ce).abs() <= 1e-12, "{arc} vs {ce}");
        }
    }

    #[test]
    fn arcface_is_invariant_to_positive_feature_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (x, w, t) = random_arc_instance(&mut rng);
            let c = rng.random_range(1e-3..1e3);
            let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
            let a = arc_of(&x, &w, 5, &t, 64.0, 0.5);
            let b = arc_of(&xs, &w, 5, &t, 64.0, 0.5);
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn arcface_loss_grows_with_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tested = 0;
        while tested < 100 {
            let (x, w, t) = random_arc_instance(&mut rng);
            let m1 = rng.random_range(0.0..0.7);
            let m2 = m1 + rng.random_range(0.01..0.7);
            // Stay out of the fallback region: θ_t + m2 < π for every target.
            let mut tape = Tape::new();
            let xf = tape.input(Tensor::from_f64(vec![3, 5], &x).unwrap());
            let wf = tape.input(Tensor::from_f64(vec![5, 4], &w).unwrap());
            let z = tape.arc_margin_logits(xf, wf, &t, 1.0, 0.0).unwrap();
            let cos: Vec<f64> = (0..3).map(|i| tape.value(z).row(i)[t[i]]).collect();
            if cos.iter().any(|&c| c.acos() + m2 >= std::f64::consts::PI) {
                continue;
            }
            let l1 = arc_of(&x, &w, 5, &t, 16.0, m1);
            let l2 = arc_of(&x, &w, 5, &t, 16.0, m2);
            assert!(l2 >= l1, "m {m1} -> {m2}: {l1} > {l2}");
            tested += 1;
        }
    }

    fn mse_of(a: &[f64], b: &[f64], shape: Vec<usize>) -> Result<f64> {
        let mut tape = Tape::new();
        let u = tape.input(Tensor::from_f64(shape.clone(), a)?);
        let m = tape.input(Tensor::from_f64(shape, b)?);
        let l = contrastive_mse(&mut tape, u, m)?;
        Ok(tape.value(l).item())
    }

    #[test]
    fn contrastive_mse_examples() {
        let a: Vec<f64> = (0..64).map(|i| i as f64 * 0.1).collect();
        assert_eq!(mse_of(&a, &a, vec![1, 64]).unwrap(), 0.0);
        let mut b = a.clone();
        b[3] += 1.0;
        b[40] -= 1.0;
        assert!((mse_of(&a, &b, vec![1, 64]).unwrap() - 0.03125).abs() < 1e-12);
    }

    #[test]
    fn contrastive_mse_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, f) = (4, 9);
        let a: Vec<f64> = (0..n * f).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..n * f).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..f {
                let d = a[i * f + j] - b[i * f + j];
                acc += d * d;
            }
        }
        let oracle = acc / n as f64 / f as f64;
        assert!((mse_of(&a, &b, vec![n, f]).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn contrastive_mse_rejects_shape_mismatch() {
        let err = mse_of(&[0.0; 6], &[0.0; 6], vec![2, 3]).map(|_| ());
        assert!(err.is_ok());
        let mut tape = Tape::<f64>::new();
        let u = tape.input(Tensor::zeros(vec![2, 3]));
        let m = tape.input(Tensor::zeros(vec![3, 2]));
        let err = contrastive_mse(&mut tape, u, m).unwrap_err();
        assert!(err.to_string().contains("contrastive_mse"));
    }

    #[test]
    fn branch_loss_examples() {
        let mut tape = Tape::new();
        let a = scalar_input(&mut tape, 2.0);
        let c = scalar_input(&mut tape, 0.5);
        let l = branch_loss(&mut tape, a, c, 0.1).unwrap();
        assert!((tape.value(l).item() - 2.05).abs() < 1e-12);
        let l0 = branch_loss(&mut tape, a, c, 0.0).unwrap();
        assert_eq!(tape.value(l0).item(), 2.0);
    }

    #[test]
    fn branch_loss_gradient_is_weighted_sum() {
        // Shared features x feed both an ArcFace head and a 2-way mask classifier.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let inputs = vec![
            Tensor::from_f64(vec![3, 4], &x).unwrap(),
            Tensor::from_f64(vec![4, 3], &w).unwrap(),
            Tensor::from_f64(vec![4, 2], &v).unwrap(),
        ];
        let parts = |tape: &mut Tape<f64>, ids: &[NodeId]| -> Result<(NodeId, NodeId)> {
            let arc = arcface_loss(tape, ids[0], ids[1], &[0, 2, 1], 8.0, 0.3)?;
            let z = tape.matmul(ids[0], ids[2])?;
            let ce = cross_entropy(tape, z, &[1, 1, 0])?;
            Ok((arc, ce))
        };
        let grads_of = |which: u8| {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| tape.param(i, t.clone()))
                .collect();
            let (arc, ce) = parts(&mut tape, &ids).unwrap();
            let loss = match which {
                0 => arc,
                1 => ce,
                _ => branch_loss(&mut tape, arc, ce, 0.1).unwrap(),
            };
            tape.backward(loss).unwrap()
        };
        let (ga, gc, gb) = (grads_of(0), grads_of(1), grads_of(2));
        for key in 0..3 {
            let b = gb.get(key).unwrap();
            let zero = Tensor::zeros(b.shape().to_vec());
            let a = ga.get(key).unwrap_or(&zero);
            let c = gc.get(key).unwrap_or(&zero);
            for e in 0..b.numel() {
                let want = a.data()[e] + 0.1 * c.data()[e];
                assert!((b.data()[e] - want).abs() < 1e-12);
            }
        }
        // And the combined gradient agrees with central differences.
        let report = grad_check(
            |tape, ids| {
                let (arc, ce) = parts(tape, ids)?;
                branch_loss(tape, arc, ce, 0.1)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    fn combined_of(vals: (f64, f64, f64), alpha: f64, beta: f64, mode: CombMode) -> f64 {
        let mut tape = Tape::new();
        let a = scalar_input(&mut tape, vals.0);
        let b = scalar_input(&mut tape, vals.1);
        let c = scalar_input(&mut tape, vals.2);
        let l = combined_loss(&mut tape, a, b, c, alpha, beta, mode).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn combined_loss_examples() {
        let v = (0.3, 2.0, 1.0);
        let add = combined_of(v, 1.0 / 3.0, 0.5, CombMode::Additive);
        assert!((add - 1.6).abs() < 1e-12, "{add}");
        let mul = combined_of(v, 1.0 / 3.0, 0.5, CombMode::Multiplicative);
        assert!((mul - 0.15).abs() < 1e-12, "{mul}");
        assert_eq!(combined_of(v, 0.0, 0.5, CombMode::Additive), 0.5 * (2.0 + 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            m: 2.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            s: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            alpha: -1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
