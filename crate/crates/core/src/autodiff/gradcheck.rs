use super::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn eval<F>(build: &F, inputs: &[Tensor<f64>]) -> Result<(Tape<f64>, NodeId)>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(i, t.clone()))
        .collect();
    let loss = build(&mut tape, &ids)?;
    Ok((tape, loss))
}

/// Max relative error between analytic gradients and central differences.
///
/// `build` receives one trainable node per input and must return a scalar.
/// Every input is differentiated. The relative error of one element is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
///
/// Fails with [`Error::NonSmoothPoint`] when the unperturbed forward pass lands
/// within an op's exclusion radius of a kink.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let (tape, loss) = eval(&build, inputs)?;
    if let Some(k) = tape.kinks().iter().find(|k| k.distance < k.threshold) {
        return Err(Error::NonSmoothPoint(format!(
            "{} evaluated {:.3e} from a non-differentiable point (needs > {:.0e})",
            k.op, k.distance, k.threshold
        )));
    }
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + h;
            let (tp, lp) = eval(&build, &probe)?;
            probe[i].data_mut()[e] = orig - h;
            let (tm, lm) = eval(&build, &probe)?;
            probe[i].data_mut()[e] = orig;

            let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
            let analytic = grads.get(i).map_or(0.0, |g| g.data()[e]);
            let denom = analytic.abs().max(numeric.abs()).max(1e-12);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, e));
            }
        }
    }
    Ok(report)
}
