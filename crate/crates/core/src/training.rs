//! Training protocol: uniform initialisation, SGD with a staged learning-rate
//! decay, global-norm clipping, dropout and the epoch loop with state
//! carried across windows.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::BatchStream;
use crate::error::{Error, Result};
use crate::model::{
    backward_sequence, forward_sequence, loss, no_masks, perplexity, Gradients, LMModel,
};
use crate::numerics::{global_norm, Matrix};
use crate::pc_layer::MaskSet;

/// Which connections dropout is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DropoutTarget {
    /// Layer inputs and the final layer's output (non-recurrent connections).
    Input,
    /// The previous hidden state entering each cell's transform.
    #[default]
    Recurrent,
    Both,
}

impl DropoutTarget {
    pub fn name(self) -> &'static str {
        match self {
            DropoutTarget::Input => "input",
            DropoutTarget::Recurrent => "recurrent",
            DropoutTarget::Both => "both",
        }
    }

    fn input(self) -> bool {
        matches!(self, DropoutTarget::Input | DropoutTarget::Both)
    }

    fn recurrent(self) -> bool {
        matches!(self, DropoutTarget::Recurrent | DropoutTarget::Both)
    }
}

impl std::str::FromStr for DropoutTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(DropoutTarget::Input),
            "recurrent" => Ok(DropoutTarget::Recurrent),
            "both" => Ok(DropoutTarget::Both),
            other => Err(Error::Config(format!(
                "unknown dropout target `{other}` (expected input|recurrent|both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub init_range: f64,
    pub base_lr: f64,
    pub warm_epochs: usize,
    pub decay_factor: f64,
    pub total_epochs: usize,
    pub clip_threshold: f64,
    pub dropout_rate: f64,
    pub dropout_target: DropoutTarget,
    pub batch: usize,
    pub unroll: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            init_range: 0.04,
            base_lr: 1.0,
            warm_epochs: 14,
            decay_factor: 1.0 / 1.15,
            total_epochs: 55,
            clip_threshold: 5.0,
            dropout_rate: 0.65,
            dropout_target: DropoutTarget::Recurrent,
            batch: 20,
            unroll: 35,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "`dropout_rate` must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.init_range.is_nan() || self.init_range <= 0.0 {
            return Err(Error::Config("`init_range` must be positive".into()));
        }
        if self.clip_threshold.is_nan() || self.clip_threshold <= 0.0 {
            return Err(Error::Config("`clip_threshold` must be positive".into()));
        }
        if self.base_lr.is_nan()
            || self.base_lr < 0.0
            || self.decay_factor.is_nan()
            || self.decay_factor <= 0.0
        {
            return Err(Error::Config(
                "learning rate settings must be non-negative".into(),
            ));
        }
        if self.warm_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "`warm_epochs` ({}) exceeds `total_epochs` ({})",
                self.warm_epochs, self.total_epochs
            )));
        }
        if self.batch == 0 || self.unroll == 0 {
            return Err(Error::Config(
                "`batch` and `unroll` must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Source of fresh inverted-dropout masks for one training step.
pub struct DropoutPlan<'a> {
    rate: f64,
    target: DropoutTarget,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> DropoutPlan<'a> {
    pub fn new(rate: f64, target: DropoutTarget, rng: &'a mut ChaCha8Rng) -> Self {
        DropoutPlan { rate, target, rng }
    }

    /// Bernoulli(1 - rate) entries scaled by `1 / (1 - rate)`.
    pub fn sample(&mut self, rows: usize, cols: usize) -> Matrix {
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mut m = Matrix::zeros(rows, cols);
        for v in m.as_mut_slice() {
            if self.rng.random::<f64>() < keep {
                *v = scale;
            }
        }
        m
    }

    pub(crate) fn input_mask(&mut self, rows: usize, cols: usize) -> Option<Matrix> {
        (self.rate > 0.0 && self.target.input()).then(|| self.sample(rows, cols))
    }

    pub(crate) fn recurrent_mask(&mut self, rows: usize, cols: usize) -> Option<Matrix> {
        (self.rate > 0.0 && self.target.recurrent()).then(|| self.sample(rows, cols))
    }
}

/// Sets every parameter to an independent draw from `U[-r, r]`, in tensor
/// declaration order.
pub fn init_params(model: &mut LMModel, r: f64, rng: &mut ChaCha8Rng) {
    for t in model.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-r..=r);
        }
    }
}

/// Learning rate for a 1-based epoch: `base_lr` through `warm_epochs`, then
/// multiplied by `decay_factor` once per further epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch <= cfg.warm_epochs {
        cfg.base_lr
    } else {
        cfg.base_lr * cfg.decay_factor.powi((epoch - cfg.warm_epochs) as i32)
    }
}

/// Rescales all tensors jointly so their global L2 norm is at most
/// `threshold`. Returns the norm before clipping.
pub fn clip_gradients(tensors: &mut [&mut [f64]], threshold: f64) -> f64 {
    let norm = global_norm(tensors.iter().map(|t| &**t));
    if norm > threshold {
        let scale = threshold / norm;
        for t in tensors.iter_mut() {
            t.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

impl Gradients {
    pub fn clip(&mut self, threshold: f64) -> f64 {
        clip_gradients(&mut self.0.tensors_mut(), threshold)
    }
}

/// `p <- p - lr * g` for every parameter.
pub fn sgd_step(model: &mut LMModel, grads: &Gradients, lr: f64) {
    let gs = grads.0.tensors();
    for (p, g) in model.tensors_mut().into_iter().zip(gs) {
        for (pv, gv) in p.iter_mut().zip(g.data) {
            *pv -= lr * gv;
        }
    }
}

/// Summed negative log-likelihood over a pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub nll_sum: f64,
    pub count: usize,
}

impl EvalSummary {
    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.count as f64
    }

    pub fn perplexity(&self) -> f64 {
        perplexity(self.mean_nll())
    }
}

/// Deterministic, dropout-free evaluation over a stream, starting from zero
/// state and carrying it across windows. `observe(target, nll)` sees every
/// position in window order.
pub fn evaluate_with(
    model: &LMModel,
    stream: &BatchStream,
    masks: &[MaskSet],
    mut observe: impl FnMut(usize, f64),
) -> Result<EvalSummary> {
    let mut state = model.zero_state(stream.batch());
    let mut sum = 0.0;
    let mut count = 0;
    for w in stream.windows() {
        let (logits, next, _) = forward_sequence(model, &w.inputs, &state, masks, None)?;
        state = next;
        let nll = crate::model::position_nll(&logits, &w.targets)?;
        for (b, row) in nll.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                observe(w.targets[b][t], *v);
                sum += v;
                count += 1;
            }
        }
    }
    Ok(EvalSummary {
        nll_sum: sum,
        count,
    })
}

pub fn evaluate(model: &LMModel, stream: &BatchStream, masks: &[MaskSet]) -> Result<EvalSummary> {
    evaluate_with(model, stream, masks, |_, _| {})
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_ppl: f64,
    /// `NaN` when no validation stream was given.
    pub valid_ppl: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_ppl,valid_ppl";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.epoch, self.lr, self.train_ppl, self.valid_ppl
        )
    }
}

pub struct TrainOutcome {
    pub model: LMModel,
    /// Epoch and parameters with the lowest validation perplexity.
    pub best: Option<(usize, LMModel)>,
    pub metrics: Vec<EpochMetrics>,
}

/// Runs `cfg.total_epochs` epochs of truncated-BPTT SGD. States start at zero
/// each epoch and are carried between consecutive windows. `progress` is
/// called after every epoch.
pub fn train(
    mut model: LMModel,
    train_stream: &BatchStream,
    valid_stream: Option<&BatchStream>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let masks = no_masks(model.layers.len());
    let mut metrics = Vec::with_capacity(cfg.total_epochs);
    let mut best: Option<(usize, f64, LMModel)> = None;
    for epoch in 1..=cfg.total_epochs {
        let lr = lr_at(epoch, cfg);
        let mut state = model.zero_state(train_stream.batch());
        let mut nll_sum = 0.0;
        let mut count = 0usize;
        for w in train_stream.windows() {
            let mut plan = DropoutPlan::new(cfg.dropout_rate, cfg.dropout_target, rng);
            let dropout = (cfg.dropout_rate > 0.0).then_some(&mut plan);
            let (logits, next, tape) =
                forward_sequence(&model, &w.inputs, &state, &masks, dropout)?;
            let l = loss(&logits, &w.targets)?;
            let n = w.len() * w.inputs.len();
            nll_sum += l * n as f64;
            count += n;
            let mut grads = backward_sequence(&model, &tape, &w.targets)?;
            grads.clip(cfg.clip_threshold);
            sgd_step(&mut model, &grads, lr);
            state = next;
        }
        let valid_ppl = match valid_stream {
            Some(v) => evaluate(&model, v, &masks)?.perplexity(),
            None => f64::NAN,
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train_ppl: perplexity(nll_sum / count as f64),
            valid_ppl,
        };
        if valid_stream.is_some() && best.as_ref().is_none_or(|(_, p, _)| valid_ppl < *p) {
            best = Some((epoch, valid_ppl, model.clone()));
        }
        progress(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome {
        model,
        best: best.map(|(e, _, m)| (e, m)),
        metrics,
    })
}
