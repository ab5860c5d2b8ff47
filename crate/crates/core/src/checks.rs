//! Seeded gradient-check suite over every tape op and every loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{grad_check, NodeId, Tape};
use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::loss::{arcface_loss, branch_loss, combined_loss, contrastive_mse, cross_entropy, CombMode};
use crate::tensor::Tensor;

pub const GRADCHECK_H: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const POINTS_PER_CHECK: usize = 20;
/// ArcFace scale used by the loss checks.
pub const CHECK_SCALE: f64 = 4.0;
/// Redraws allowed per point when a draw lands near a kink.
const MAX_REDRAWS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub points: usize,
    /// Draws discarded for sitting too close to a non-smooth point.
    pub redraws: usize,
    pub max_rel_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.points == POINTS_PER_CHECK && self.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>>;

struct Case {
    name: &'static str,
    sample: fn(&mut ChaCha8Rng, usize) -> (Vec<Tensor<f64>>, Build),
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Reduces an op output to a scalar through a fixed random projection so
/// every output element gets a distinct cotangent.
fn project(tape: &mut Tape<f64>, out: NodeId, r: &Tensor<f64>) -> Result<NodeId> {
    let r = tape.input(r.clone());
    tape.dot(out, r)
}

fn binary(
    rng: &mut ChaCha8Rng,
    a: &[usize],
    b: &[usize],
    out: &[usize],
    op: fn(&mut Tape<f64>, NodeId, NodeId) -> Result<NodeId>,
) -> (Vec<Tensor<f64>>, Build) {
    let inputs = vec![randn(rng, a), randn(rng, b)];
    let r = randn(rng, out);
    let build: Build = Box::new(move |t, ids| {
        let y = op(t, ids[0], ids[1])?;
        project(t, y, &r)
    });
    (inputs, build)
}

fn unary(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    out: &[usize],
    op: fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
) -> (Vec<Tensor<f64>>, Build) {
    let inputs = vec![randn(rng, shape)];
    let r = randn(rng, out);
    let build: Build = Box::new(move |t, ids| {
        let y = op(t, ids[0])?;
        project(t, y, &r)
    });
    (inputs, build)
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            // Alternates between same-shape and row-broadcast addition.
            sample: |rng, k| {
                let b: &[usize] = if k % 2 == 0 { &[3, 4] } else { &[4] };
                binary(rng, &[3, 4], b, &[3, 4], |t, a, b| t.add(a, b))
            },
        },
        Case {
            name: "sub",
            sample: |rng, _| binary(rng, &[3, 4], &[3, 4], &[3, 4], |t, a, b| t.sub(a, b)),
        },
        Case {
            name: "mul",
            sample: |rng, _| binary(rng, &[3, 4], &[3, 4], &[3, 4], |t, a, b| t.mul(a, b)),
        },
        Case {
            name: "matmul",
            sample: |rng, _| binary(rng, &[3, 5], &[5, 2], &[3, 2], |t, a, b| t.matmul(a, b)),
        },
        Case {
            name: "conv2d",
            sample: |rng, k| {
                if k % 2 == 0 {
                    binary(rng, &[2, 2, 5, 5], &[3, 2, 3, 3], &[2, 3, 3, 3], |t, x, w| t.conv2d(x, w, 2, 1))
                } else {
                    binary(rng, &[1, 2, 4, 4], &[2, 2, 3, 3], &[1, 2, 2, 2], |t, x, w| t.conv2d(x, w, 1, 0))
                }
            },
        },
        Case {
            name: "prelu",
            sample: |rng, _| {
                let mut inputs = vec![randn(rng, &[3, 4]), randn(rng, &[1])];
                inputs[1].data_mut()[0] = rng.random_range(0.05..0.5);
                let r = randn(rng, &[3, 4]);
                let build: Build = Box::new(move |t, ids| {
                    let y = t.prelu(ids[0], ids[1])?;
                    project(t, y, &r)
                });
                (inputs, build)
            },
        },
        Case {
            name: "flatten",
            sample: |rng, _| unary(rng, &[2, 3, 2, 2], &[2, 12], |t, x| t.flatten(x)),
        },
        Case {
            name: "l2_normalize",
            sample: |rng, _| unary(rng, &[3, 5], &[3, 5], |t, x| t.l2_normalize(x)),
        },
        Case {
            name: "dot",
            sample: |rng, _| {
                let inputs = vec![randn(rng, &[2, 3]), randn(rng, &[2, 3])];
                let build: Build = Box::new(|t, ids| t.dot(ids[0], ids[1]));
                (inputs, build)
            },
        },
        Case {
            name: "sum",
            sample: |rng, _| {
                // sum feeds a product so the check sees a non-constant gradient.
                let inputs = vec![randn(rng, &[3, 4])];
                let build: Build = Box::new(|t, ids| {
                    let s = t.sum(ids[0]);
                    t.mul(s, s)
                });
                (inputs, build)
            },
        },
        Case {
            name: "scale",
            sample: |rng, _| unary(rng, &[3, 4], &[3, 4], |t, x| Ok(t.scale(x, -1.7))),
        },
        Case {
            name: "cross_entropy",
            sample: |rng, _| {
                let inputs = vec![randn(rng, &[5, 3])];
                let y = labels(rng, 5, 3);
                let build: Build = Box::new(move |t, ids| cross_entropy(t, ids[0], &y));
                (inputs, build)
            },
        },
        Case {
            name: "arcface_loss",
            // Alternates m = 0.5 and m = 0. The scale is kept small: at s = 64
            // the softmax saturates, many true gradients drop below 1e-10 and
            // central differences return roundoff instead of a derivative.
            sample: |rng, k| {
                let inputs = vec![randn(rng, &[4, 6]), randn(rng, &[6, 5])];
                let y = labels(rng, 4, 5);
                let (s, m) = if k % 2 == 0 { (CHECK_SCALE, 0.5) } else { (2.0, 0.0) };
                let build: Build = Box::new(move |t, ids| arcface_loss(t, ids[0], ids[1], &y, s, m));
                (inputs, build)
            },
        },
        Case {
            name: "contrastive_mse",
            sample: |rng, _| {
                let inputs = vec![randn(rng, &[3, 6]), randn(rng, &[3, 6])];
                let build: Build = Box::new(|t, ids| contrastive_mse(t, ids[0], ids[1]));
                (inputs, build)
            },
        },
        Case {
            name: "branch_loss",
            // Full branch: ArcFace on features plus λ-weighted mask CE.
            sample: |rng, _| {
                let inputs = vec![randn(rng, &[4, 6]), randn(rng, &[6, 5]), randn(rng, &[4, 2])];
                let y = labels(rng, 4, 5);
                let mask = labels(rng, 4, 2);
                let build: Build = Box::new(move |t, ids| {
                    let arc = arcface_loss(t, ids[0], ids[1], &y, CHECK_SCALE, 0.5)?;
                    let ce = cross_entropy(t, ids[2], &mask)?;
                    branch_loss(t, arc, ce, 0.1)
                });
                (inputs, build)
            },
        },
        Case {
            name: "combined_loss",
            // Alternates additive and multiplicative combination.
            sample: |rng, k| {
                let inputs = vec![
                    randn(rng, &[3, 4]),
                    randn(rng, &[3, 4]),
                    randn(rng, &[4, 5]),
                    randn(rng, &[3, 2]),
                    randn(rng, &[3, 2]),
                ];
                let y = labels(rng, 3, 5);
                let mode = if k % 2 == 0 { CombMode::Additive } else { CombMode::Multiplicative };
                let build: Build = Box::new(move |t, ids| {
                    let (eu, em, w) = (ids[0], ids[1], ids[2]);
                    let arc_u = arcface_loss(t, eu, w, &y, CHECK_SCALE, 0.5)?;
                    let arc_m = arcface_loss(t, em, w, &y, CHECK_SCALE, 0.5)?;
                    let ce_u = cross_entropy(t, ids[3], &[0, 0, 0])?;
                    let ce_m = cross_entropy(t, ids[4], &[1, 1, 1])?;
                    let lu = branch_loss(t, arc_u, ce_u, 0.1)?;
                    let lm = branch_loss(t, arc_m, ce_m, 0.1)?;
                    let mse = contrastive_mse(t, eu, em)?;
                    combined_loss(t, mse, lm, lu, 1.0 / 3.0, 0.5, mode)
                });
                (inputs, build)
            },
        },
    ]
}

/// Names of every check, in run order.
pub fn check_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every check at [`POINTS_PER_CHECK`] smooth points drawn from `seed`.
/// A draw that lands near a kink is replaced by a fresh draw.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(c, case)| {
            let mut out = CheckOutcome {
                name: case.name,
                points: 0,
                redraws: 0,
                max_rel_error: 0.0,
            };
            for point in 0..POINTS_PER_CHECK {
                for attempt in 0.. {
                    if attempt == MAX_REDRAWS {
                        return Err(Error::NonSmoothPoint(format!(
                            "{}: no smooth point found after {MAX_REDRAWS} draws",
                            case.name
                        )));
                    }
                    let coords = [c as u64, point as u64, attempt as u64];
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &coords));
                    let (inputs, build) = (case.sample)(&mut rng, point);
                    match grad_check(build, &inputs, GRADCHECK_H) {
                        Ok(report) => {
                            out.points += 1;
                            out.max_rel_error = out.max_rel_error.max(report.max_rel_error);
                            break;
                        }
                        Err(Error::NonSmoothPoint(_)) => out.redraws += 1,
                        Err(e) => return Err(e),
                    }
                }
            }
            Ok(out)
        })
        .collect()
}
