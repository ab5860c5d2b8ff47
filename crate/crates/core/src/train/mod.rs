//! Dual-pass training loop with SGD and validation-based model selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, ParamKey, Tape};
use crate::data::{derive_seed, PairBatch, Selection, Splits};
use crate::error::{Error, Result};
use crate::loss::{arcface_loss, branch_loss, combined_loss, contrastive_mse, cross_entropy, CombMode, LossConfig};
use crate::metrics::{evaluate, format_g9, MetricsReport, ProtocolMode};
use crate::model::{DualHeadNet, Frozen, ToyBackboneConfig};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Iterations at which the learning rate drops tenfold.
    pub milestones: Vec<usize>,
    pub max_iterations: usize,
    pub eval_interval: usize,
    pub selection: Selection,
    pub flip_prob: f64,
    /// Per-tensor gradient norm cap applied before the SGD step. `None`
    /// disables clipping.
    pub max_grad_norm: Option<f64>,
    pub freeze_backbone: bool,
    /// Single unmasked branch trained with ArcFace only.
    pub baseline: bool,
    pub loss: LossConfig,
    pub model: ToyBackboneConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            milestones: vec![600, 960],
            max_iterations: 1200,
            eval_interval: 100,
            selection: Selection::Original,
            flip_prob: 0.5,
            max_grad_norm: Some(0.3),
            freeze_backbone: false,
            baseline: false,
            loss: LossConfig::default(),
            model: ToyBackboneConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// ArcFace-only single-branch settings.
    pub fn into_baseline(mut self) -> Self {
        self.baseline = true;
        self.loss.lambda = 0.0;
        self.loss.alpha = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be positive"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("milestones", "must be strictly increasing"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob", "must be in [0, 1]"));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("max_grad_norm", "must be > 0"));
            }
        }
        if self.baseline && (self.loss.lambda != 0.0 || self.loss.alpha != 0.0) {
            return Err(Error::config("baseline", "baseline mode requires lambda = alpha = 0"));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// `lr₀ · 10^(−#{milestones ≤ iteration})`
pub fn lr_at(iteration: usize, lr0: f64, milestones: &[usize]) -> f64 {
    let drops = milestones.iter().filter(|&&m| m <= iteration).count();
    lr0 * 10f64.powi(-(drops as i32))
}

/// `g' = g + wd·p; v = μ·v + g'; p = p − lr·v`, elementwise.
pub fn sgd_update<T: Real>(p: &mut [T], v: &mut [T], g: &[T], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        let g = g + wd * *p;
        *v = mu * *v + g;
        *p = *p - lr * *v;
    }
}

/// Model plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub model: DualHeadNet<T>,
    /// One buffer per trainable parameter.
    pub momentum: BTreeMap<ParamKey, Tensor<T>>,
    pub iteration: usize,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: DualHeadNet<T>) -> Self {
        let momentum = model
            .trainable_keys()
            .into_iter()
            .map(|k| (k, Tensor::zeros(model.params().get(k).value.shape().to_vec())))
            .collect();
        TrainState {
            model,
            momentum,
            iteration: 0,
        }
    }
}

/// Applies one SGD step to every trainable parameter. Parameters without a
/// gradient are treated as having a zero gradient.
pub fn sgd_step<T: Real>(
    state: &mut TrainState<T>,
    grads: &Gradients<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (key, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                iteration: state.iteration as u64,
                param: state.model.params().get(key).name.clone(),
                norm: g.norm(),
            });
        }
        if !state.momentum.contains_key(&key) {
            return Err(Error::invalid(
                "sgd_step",
                format!("gradient for frozen parameter {}", state.model.params().get(key).name),
            ));
        }
    }
    let keys: Vec<ParamKey> = state.momentum.keys().copied().collect();
    for key in keys {
        let v = state.momentum.get_mut(&key).expect("key from map");
        let p = state.model.params_mut().value_mut(key);
        match grads.get(key) {
            Some(g) => sgd_update(p.data_mut(), v.data_mut(), g.data(), lr, momentum, weight_decay),
            None => {
                let zeros = vec![T::zero(); p.numel()];
                sgd_update(p.data_mut(), v.data_mut(), &zeros, lr, momentum, weight_decay)
            }
        }
    }
    state.iteration += 1;
    Ok(())
}

/// Scalar losses of one iteration. Components that the run does not compute
/// (the masked branch in baseline mode) are NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub comb: f64,
    pub arc_unmasked: f64,
    pub arc_masked: f64,
    pub ce_unmasked: f64,
    pub ce_masked: f64,
    pub mse: f64,
}

impl LossBreakdown {
    /// Recomputes the combined loss from the components.
    pub fn recombine(&self, loss: &LossConfig, baseline: bool) -> f64 {
        let lu = self.arc_unmasked + loss.lambda * self.ce_unmasked;
        if baseline {
            return lu;
        }
        let lm = self.arc_masked + loss.lambda * self.ce_masked;
        match loss.comb_mode {
            CombMode::Additive => loss.alpha * self.mse + loss.beta * (lm + lu),
            CombMode::Multiplicative => (loss.alpha * self.mse) * (loss.beta * (lm + lu)),
        }
    }
}

/// Records both forward passes on one tape and returns the gradients of the
/// combined loss.
pub fn compute_gradients<T: Real>(
    model: &DualHeadNet<T>,
    batch: &PairBatch<T>,
    cfg: &TrainConfig,
) -> Result<(Gradients<T>, LossBreakdown)> {
    let l = &cfg.loss;
    let mut tape = Tape::new();
    let reg = model.register(&mut tape);
    let w = reg.node(model.heads().arcface);
    let labels = &batch.identity_labels;

    let xu = tape.input(batch.unmasked.clone());
    let ou = model.forward_nodes(&mut tape, &reg, xu)?;
    let arc_u = arcface_loss(&mut tape, ou.recognition, w, labels, l.s, l.m)?;
    let ce_u = cross_entropy(&mut tape, ou.mask_logits, &batch.unmasked_mask_labels)?;
    let lu = branch_loss(&mut tape, arc_u, ce_u, l.lambda)?;
    let item = |tape: &Tape<T>, id| tape.value(id).item().f64();

    if cfg.baseline {
        let grads = tape.backward(lu)?;
        let breakdown = LossBreakdown {
            comb: item(&tape, lu),
            arc_unmasked: item(&tape, arc_u),
            arc_masked: f64::NAN,
            ce_unmasked: item(&tape, ce_u),
            ce_masked: f64::NAN,
            mse: f64::NAN,
        };
        return Ok((grads, breakdown));
    }

    let xm = tape.input(batch.masked.clone());
    let om = model.forward_nodes(&mut tape, &reg, xm)?;
    let arc_m = arcface_loss(&mut tape, om.recognition, w, labels, l.s, l.m)?;
    let ce_m = cross_entropy(&mut tape, om.mask_logits, &batch.masked_mask_labels)?;
    let lm = branch_loss(&mut tape, arc_m, ce_m, l.lambda)?;
    let (eu, em) = if l.mse_on_normalized {
        (tape.l2_normalize(ou.recognition)?, tape.l2_normalize(om.recognition)?)
    } else {
        (ou.recognition, om.recognition)
    };
    let mse = contrastive_mse(&mut tape, eu, em)?;
    let comb = combined_loss(&mut tape, mse, lm, lu, l.alpha, l.beta, l.comb_mode)?;
    let grads = tape.backward(comb)?;
    let breakdown = LossBreakdown {
        comb: item(&tape, comb),
        arc_unmasked: item(&tape, arc_u),
        arc_masked: item(&tape, arc_m),
        ce_unmasked: item(&tape, ce_u),
        ce_masked: item(&tape, ce_m),
        mse: item(&tape, mse),
    };
    Ok((grads, breakdown))
}

/// One forward/backward/update cycle.
pub fn train_iteration<T: Real>(
    state: &mut TrainState<T>,
    batch: &PairBatch<T>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (mut grads, breakdown) = compute_gradients(&state.model, batch, cfg)?;
    if let Some(c) = cfg.max_grad_norm {
        grads = grads.clip_each(c);
    }
    let lr = lr_at(state.iteration, cfg.lr, &cfg.milestones);
    sgd_step(state, &grads, lr, cfg.momentum, cfg.weight_decay)?;
    Ok(breakdown)
}

/// Draws the batch of one iteration. The draw depends only on the run seed
/// and the iteration number.
pub fn sample_batch<T: Real>(splits: &Splits, cfg: &TrainConfig, iteration: usize) -> Result<PairBatch<T>> {
    let train = &splits.train;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xBA7C4, iteration as u64]));
    let mut pairs = Vec::with_capacity(cfg.batch_size);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let index = rng.random_range(0..train.samples.len());
        let partner = rng.random_range(0..train.samples_per_identity - 1);
        let flip = rng.random_bool(cfg.flip_prob);
        pairs.push(train.pair(index, cfg.selection, partner, flip));
        labels.push(train.samples[index].label);
    }
    PairBatch::from_pairs(&pairs, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based count of completed updates.
    pub iteration: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub iteration: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// Line-oriented text. `step` records carry the learning rate and loss
    /// breakdown; `eval` records carry validation U-M metrics.
    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "# step\titeration\tlr\tL_comb\tL_arc_u\tL_arc_m\tL_ce_u\tL_ce_m\tL_mse\n# eval\titeration\teer\tfmr100\tfmr10\tauc\n",
        );
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            let l = &s.losses;
            let _ = writeln!(
                out,
                "step\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.iteration,
                format_g9(s.lr),
                format_g9(l.comb),
                format_g9(l.arc_unmasked),
                format_g9(l.arc_masked),
                format_g9(l.ce_unmasked),
                format_g9(l.ce_masked),
                format_g9(l.mse)
            );
            while let Some(e) = evals.next_if(|e| e.iteration == s.iteration) {
                let m = &e.metrics;
                let _ = writeln!(
                    out,
                    "eval\t{}\t{}\t{}\t{}\t{}",
                    e.iteration,
                    format_g9(m.eer),
                    format_g9(m.fmr100),
                    format_g9(m.fmr10),
                    format_g9(m.auc)
                );
            }
        }
        out
    }

    /// Mean contrastive loss over the first and the last `fraction` of steps.
    pub fn mse_trend(&self, fraction: f64) -> (f64, f64) {
        let n = ((self.steps.len() as f64 * fraction).round() as usize).max(1);
        let mean = |s: &[StepRecord]| s.iter().map(|r| r.losses.mse).sum::<f64>() / s.len() as f64;
        (mean(&self.steps[..n]), mean(&self.steps[self.steps.len() - n..]))
    }
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    /// Parameters at the evaluation with the lowest validation U-M FMR100.
    pub best: DualHeadNet<T>,
    pub best_iteration: usize,
    pub best_fmr100: f64,
    pub last: DualHeadNet<T>,
    pub log: TrainLog,
}

/// Runs `max_iterations` updates, evaluating every `eval_interval` updates
/// and after the last one. Ties in FMR100 keep the earlier checkpoint.
pub fn fit<T: Real>(cfg: &TrainConfig, splits: &Splits, init: Option<DualHeadNet<T>>) -> Result<FitResult<T>> {
    cfg.validate()?;
    let mut model = match init {
        Some(m) => m,
        None => {
            if cfg.freeze_backbone {
                return Err(Error::config(
                    "freeze_backbone",
                    "frozen-backbone training needs an initial checkpoint",
                ));
            }
            DualHeadNet::new(cfg.model.clone(), splits.train.num_classes, cfg.seed)?
        }
    };
    if model.num_classes() != splits.train.num_classes {
        return Err(Error::config(
            "init_checkpoint",
            format!(
                "checkpoint has {} classes, corpus has {}",
                model.num_classes(),
                splits.train.num_classes
            ),
        ));
    }
    model.set_frozen(if cfg.freeze_backbone { Frozen::Backbone } else { Frozen::None });

    let mut state = TrainState::new(model);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, DualHeadNet<T>)> = None;
    for it in 0..cfg.max_iterations {
        let batch = sample_batch(splits, cfg, it)?;
        let lr = lr_at(it, cfg.lr, &cfg.milestones);
        let losses = train_iteration(&mut state, &batch, cfg)?;
        log.steps.push(StepRecord {
            iteration: it + 1,
            lr,
            losses,
        });
        let done = it + 1;
        if done % cfg.eval_interval == 0 || done == cfg.max_iterations {
            let (_, metrics) = evaluate(&state.model, &splits.val, ProtocolMode::UnmaskedMasked)?;
            log.evals.push(EvalRecord {
                iteration: done,
                metrics,
            });
            if best.as_ref().is_none_or(|(f, _, _)| metrics.fmr100 < *f) {
                best = Some((metrics.fmr100, done, state.model.clone()));
            }
        }
    }
    let (best_fmr100, best_iteration, best_model) = match best {
        Some(b) => b,
        None => {
            let (_, m) = evaluate(&state.model, &splits.val, ProtocolMode::UnmaskedMasked)?;
            (m.fmr100, 0, state.model.clone())
        }
    };
    Ok(FitResult {
        best: best_model,
        best_iteration,
        best_fmr100,
        last: state.model,
        log,
    })
}
