//! Word/byte-level language model: embedding, stacked parallel-cell layers
//! and a softmax projection, with truncated backpropagation through time.

use std::collections::BTreeMap;

use crate::cells::{CellKind, CellState};
use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::numerics::{gemm_nn, gemm_nt, gemm_tn, global_norm, Matrix, Vector};
use crate::pc_layer::{
    build_layer, count_params, pc_backward_accumulate, pc_forward_dropout, LayerTape, MaskSet,
    ParallelLayer, Routing,
};
use crate::training::DropoutPlan;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    /// Total hidden units per layer (`m`).
    pub hidden: usize,
    /// Parallel cells per layer (`n`).
    pub wide: usize,
    pub cell: CellKind,
    pub routing: Routing,
    pub unroll: usize,
    pub batch: usize,
    /// How the corpus was tokenised; members of an ensemble must agree.
    pub tokenizer: Tokenizer,
}

impl ModelConfig {
    /// Configuration with the embedding size equal to the hidden size.
    pub fn new(vocab_size: usize, hidden: usize, wide: usize, layers: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: hidden,
            layers,
            hidden,
            wide,
            cell: CellKind::Lstm,
            routing: Routing::Split,
            unroll: 35,
            batch: 20,
            tokenizer: Tokenizer::Byte,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("wide", self.wide),
            ("unroll", self.unroll),
            ("batch", self.batch),
        ];
        if let Some((k, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if !self.hidden.is_multiple_of(self.wide) {
            return Err(Error::Config(format!(
                "`hidden` ({}) must be divisible by `wide` ({})",
                self.hidden, self.wide
            )));
        }
        Ok(())
    }

    /// Serialises to ordered `key=value` pairs.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("layers", self.layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("wide", self.wide.to_string()),
            ("cell", self.cell.name()),
            ("routing", self.routing.name().to_string()),
            ("unroll", self.unroll.to_string()),
            ("batch", self.batch.to_string()),
            ("tokenizer", self.tokenizer.name()),
        ]
    }

    pub fn to_kv_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value", n + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |key: &str| {
            map.remove(key)
                .ok_or_else(|| Error::Config(format!("missing model key `{key}`")))
        };
        let num = |key: &str, v: String| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("`{key}`: `{v}` is not a positive integer")))
        };
        let cfg = ModelConfig {
            vocab_size: num("vocab_size", take("vocab_size")?)?,
            embed_dim: num("embed_dim", take("embed_dim")?)?,
            layers: num("layers", take("layers")?)?,
            hidden: num("hidden", take("hidden")?)?,
            wide: num("wide", take("wide")?)?,
            cell: take("cell")?.parse()?,
            routing: take("routing")?.parse()?,
            unroll: num("unroll", take("unroll")?)?,
            batch: num("batch", take("batch")?)?,
            tokenizer: take("tokenizer")?.parse()?,
        };
        if let Some(k) = map.keys().next() {
            return Err(Error::Config(format!("unknown model key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LMModel {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<ParallelLayer>,
    pub out_w: Matrix,
    pub out_b: Vector,
}

/// Gradients share the parameter layout of the model they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub LMModel);

impl Gradients {
    pub fn zeros_for(model: &LMModel) -> Self {
        Gradients(model.zeros_like())
    }

    pub fn global_norm(&self) -> f64 {
        global_norm(self.0.tensors().into_iter().map(|t| t.data))
    }
}

/// A named view of one parameter tensor.
#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [f64],
}

impl LMModel {
    /// All-zero model with the given architecture.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let input = if l == 0 {
                config.embed_dim
            } else {
                config.hidden
            };
            layers.push(build_layer(
                config.cell,
                input,
                config.hidden,
                config.wide,
                config.routing,
            )?);
        }
        Ok(LMModel {
            embedding: Matrix::zeros(config.vocab_size, config.embed_dim),
            out_w: Matrix::zeros(config.vocab_size, config.hidden),
            out_b: Vector::zeros(config.vocab_size),
            layers,
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        LMModel {
            config: self.config.clone(),
            embedding: Matrix::zeros(self.embedding.rows(), self.embedding.cols()),
            layers: self.layers.iter().map(ParallelLayer::zeros_like).collect(),
            out_w: Matrix::zeros(self.out_w.rows(), self.out_w.cols()),
            out_b: Vector::zeros(self.out_b.len()),
        }
    }

    /// Parameter tensors in declaration order (the checkpoint order).
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![TensorRef {
            name: "embedding".into(),
            dims: vec![self.embedding.rows(), self.embedding.cols()],
            data: self.embedding.as_slice(),
        }];
        for (l, layer) in self.layers.iter().enumerate() {
            for (i, cell) in layer.cells.iter().enumerate() {
                out.push(TensorRef {
                    name: format!("layer{l}.cell{i}.w"),
                    dims: vec![cell.w.rows(), cell.w.cols()],
                    data: cell.w.as_slice(),
                });
                out.push(TensorRef {
                    name: format!("layer{l}.cell{i}.b"),
                    dims: vec![cell.b.len()],
                    data: cell.b.as_slice(),
                });
            }
        }
        out.push(TensorRef {
            name: "out_proj.w".into(),
            dims: vec![self.out_w.rows(), self.out_w.cols()],
            data: self.out_w.as_slice(),
        });
        out.push(TensorRef {
            name: "out_proj.b".into(),
            dims: vec![self.out_b.len()],
            data: self.out_b.as_slice(),
        });
        out
    }

    /// Mutable parameter slices, same order as [`LMModel::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.embedding.as_mut_slice()];
        for layer in &mut self.layers {
            for cell in &mut layer.cells {
                out.push(cell.w.as_mut_slice());
                out.push(cell.b.as_mut_slice());
            }
        }
        out.push(self.out_w.as_mut_slice());
        out.push(self.out_b.as_mut_slice());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Parameters held by the recurrent layers only.
    pub fn recurrent_param_count(&self) -> usize {
        self.layers.iter().map(count_params).sum()
    }

    pub fn zero_state(&self, batch: usize) -> ModelState {
        ModelState {
            layers: self.layers.iter().map(|l| l.zero_state(batch)).collect(),
        }
    }
}

/// Carried recurrent state: `layers[l][i]` is cell `i` of layer `l`, each with
/// one row per batch stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub layers: Vec<Vec<CellState>>,
}

impl ModelState {
    pub fn batch(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.first())
            .map_or(0, |s| s.h.rows())
    }
}

struct StepTape {
    input_keep: Vec<Option<Matrix>>,
    layers: Vec<LayerTape>,
    output_keep: Option<Matrix>,
    /// Top-layer output after any output dropout: the projection input.
    top: Matrix,
}

/// Everything [`backward_sequence`] needs from a forward pass.
pub struct SequenceTape {
    tokens: Vec<Vec<usize>>,
    steps: Vec<StepTape>,
    logits: Vec<Matrix>,
    layers: usize,
    vocab: usize,
}

impl SequenceTape {
    pub fn logits(&self) -> &[Matrix] {
        &self.logits
    }
}

/// Per-layer masks; a missing entry means no masking for that layer.
pub fn no_masks(layers: usize) -> Vec<MaskSet> {
    vec![MaskSet::empty(); layers]
}

/// Runs the model over a `B x T` token window. Returns one `B x V` logit
/// matrix per time step, the state after the last step and the tape.
pub fn forward_sequence(
    model: &LMModel,
    tokens: &[Vec<usize>],
    state: &ModelState,
    masks: &[MaskSet],
    mut dropout: Option<&mut DropoutPlan<'_>>,
) -> Result<(Vec<Matrix>, ModelState, SequenceTape)> {
    let cfg = &model.config;
    let batch = tokens.len();
    let steps = tokens.first().map_or(0, Vec::len);
    if batch == 0 || steps == 0 {
        return Err(Error::Data("empty token window".into()));
    }
    if tokens.iter().any(|r| r.len() != steps) {
        return Err(Error::Data("ragged token window".into()));
    }
    if let Some(&bad) = tokens.iter().flatten().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    if masks.len() != model.layers.len() {
        return Err(Error::Usage(format!(
            "{} mask sets given for {} layers",
            masks.len(),
            model.layers.len()
        )));
    }
    if state.layers.len() != model.layers.len() || state.batch() != batch {
        return Err(Error::shape(
            "forward_sequence",
            format!("{} layers x batch {batch}", model.layers.len()),
            format!(
                "state {} layers x batch {}",
                state.layers.len(),
                state.batch()
            ),
        ));
    }

    let mut cur = state.clone();
    let mut tapes = Vec::with_capacity(steps);
    let mut logits = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut x = Matrix::zeros(batch, cfg.embed_dim);
        for (b, row) in tokens.iter().enumerate() {
            x.row_mut(b).copy_from_slice(model.embedding.row(row[t]));
        }
        let mut input_keep = Vec::with_capacity(model.layers.len());
        let mut layer_tapes = Vec::with_capacity(model.layers.len());
        for (l, layer) in model.layers.iter().enumerate() {
            let mut in_keep = None;
            let mut rec_keep = None;
            if let Some(plan) = dropout.as_deref_mut() {
                in_keep = plan.input_mask(batch, layer.input_dim);
                rec_keep = plan.recurrent_mask(batch, layer.total_hidden);
            }
            if let Some(k) = &in_keep {
                hadamard_assign(&mut x, k);
            }
            let (next, h, tape) =
                pc_forward_dropout(layer, &x, &cur.layers[l], &masks[l], rec_keep.as_ref())?;
            cur.layers[l] = next;
            input_keep.push(in_keep);
            layer_tapes.push(tape);
            x = h;
        }
        let output_keep = dropout
            .as_deref_mut()
            .and_then(|plan| plan.input_mask(batch, cfg.hidden));
        if let Some(k) = &output_keep {
            hadamard_assign(&mut x, k);
        }
        let mut step_logits = Matrix::zeros(batch, cfg.vocab_size);
        gemm_nt(&x, &model.out_w, &mut step_logits, false);
        step_logits.add_row_vector(model.out_b.as_slice());
        logits.push(step_logits);
        tapes.push(StepTape {
            input_keep,
            layers: layer_tapes,
            output_keep,
            top: x,
        });
    }
    let tape = SequenceTape {
        tokens: tokens.to_vec(),
        steps: tapes,
        logits: logits.clone(),
        layers: model.layers.len(),
        vocab: cfg.vocab_size,
    };
    Ok((logits, cur, tape))
}

fn hadamard_assign(x: &mut Matrix, keep: &Matrix) {
    for (v, k) in x.as_mut_slice().iter_mut().zip(keep.as_slice()) {
        *v *= k;
    }
}

/// Natural-log softmax of one row, max-subtracted.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - max - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

fn check_targets(logits: &[Matrix], targets: &[Vec<usize>]) -> Result<()> {
    let steps = logits.len();
    if targets.iter().any(|r| r.len() != steps) || logits.iter().any(|l| l.rows() != targets.len())
    {
        return Err(Error::shape(
            "loss",
            format!("logits {} steps", steps),
            format!("targets {} rows", targets.len()),
        ));
    }
    let vocab = logits.first().map_or(0, Matrix::cols);
    if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
        return Err(Error::Data(format!(
            "target id {bad} out of range for vocabulary of {vocab}"
        )));
    }
    Ok(())
}

/// Negative log-likelihood of every position, indexed `[b][t]`.
pub fn position_nll(logits: &[Matrix], targets: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    check_targets(logits, targets)?;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(b, row)| {
            row.iter()
                .enumerate()
                .map(|(t, &y)| -log_softmax(logits[t].row(b))[y])
                .collect()
        })
        .collect())
}

/// Mean cross-entropy over all `B x T` positions.
pub fn loss(logits: &[Matrix], targets: &[Vec<usize>]) -> Result<f64> {
    let nll = position_nll(logits, targets)?;
    let count = nll.iter().map(Vec::len).sum::<usize>();
    let total: f64 = nll.iter().flatten().sum();
    Ok(total / count as f64)
}

pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

/// Gradient of the mean loss with respect to every parameter, truncated at
/// the window start.
pub fn backward_sequence(
    model: &LMModel,
    tape: &SequenceTape,
    targets: &[Vec<usize>],
) -> Result<Gradients> {
    let mut grads = Gradients::zeros_for(model);
    backward_sequence_into(model, tape, targets, &mut grads)?;
    Ok(grads)
}

/// Like [`backward_sequence`] but adds into existing gradients.
pub fn backward_sequence_into(
    model: &LMModel,
    tape: &SequenceTape,
    targets: &[Vec<usize>],
    grads: &mut Gradients,
) -> Result<()> {
    if tape.layers != model.layers.len() || tape.vocab != model.config.vocab_size {
        return Err(Error::Usage(
            "sequence tape does not belong to this model".into(),
        ));
    }
    check_targets(&tape.logits, targets)?;
    if targets.len() != tape.tokens.len() {
        return Err(Error::shape(
            "backward_sequence",
            tape.tokens.len(),
            targets.len(),
        ));
    }
    let g = &mut grads.0;
    let batch = tape.tokens.len();
    let steps = tape.steps.len();
    let scale = 1.0 / (batch * steps) as f64;
    let mut carry: Vec<Option<Vec<CellState>>> = vec![None; model.layers.len()];

    for t in (0..steps).rev() {
        let step = &tape.steps[t];
        let mut dlogits = Matrix::zeros(batch, model.config.vocab_size);
        for b in 0..batch {
            let probs = softmax(tape.logits[t].row(b));
            let row = dlogits.row_mut(b);
            for (d, p) in row.iter_mut().zip(probs) {
                *d = p * scale;
            }
            row[targets[b][t]] -= scale;
        }
        gemm_tn(&dlogits, &step.top, &mut g.out_w, true);
        dlogits.sum_rows_into(g.out_b.as_mut_slice());
        let mut dh = Matrix::zeros(batch, model.config.hidden);
        gemm_nn(&dlogits, &model.out_w, &mut dh, false);
        if let Some(k) = &step.output_keep {
            hadamard_assign(&mut dh, k);
        }
        for l in (0..model.layers.len()).rev() {
            let (mut dx, dprev) = pc_backward_accumulate(
                &model.layers[l],
                &step.layers[l],
                &dh,
                carry[l].as_deref(),
                &mut g.layers[l],
            )?;
            carry[l] = Some(dprev);
            if let Some(k) = &step.input_keep[l] {
                hadamard_assign(&mut dx, k);
            }
            dh = dx;
        }
        for (b, row) in tape.tokens.iter().enumerate() {
            for (e, d) in g.embedding.row_mut(row[t]).iter_mut().zip(dh.row(b)) {
                *e += d;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_kv_round_trip() {
        let mut cfg = ModelConfig::new(50, 12, 3, 2);
        cfg.routing = Routing::Full;
        cfg.cell = "rnn-tanh".parse().unwrap();
        let back = ModelConfig::from_kv_text(&cfg.to_kv_text()).unwrap();
        assert_eq!(back, cfg);
        let bad = cfg.to_kv_text() + "extra=1\n";
        assert!(ModelConfig::from_kv_text(&bad)
            .unwrap_err()
            .to_string()
            .contains("extra"));
    }

    #[test]
    fn uniform_loss_is_log_vocab() {
        let logits = vec![Matrix::zeros(2, 10); 3];
        let targets = vec![vec![0, 3, 9], vec![1, 1, 2]];
        let l = loss(&logits, &targets).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn spike_on_target_drives_loss_to_zero() {
        let mut m = Matrix::zeros(1, 4);
        m.set(0, 2, 1e4);
        assert!(loss(&[m], &[vec![2]]).unwrap() < 1e-12);
    }

    #[test]
    fn toy_loss_matches_oracle() {
        let a = Matrix::from_rows(&[&[1.0, 2.0, 0.5]]).unwrap();
        let b = Matrix::from_rows(&[&[-1.0, 0.0, 3.0]]).unwrap();
        let l = loss(&[a, b], &[vec![1, 0]]).unwrap();
        assert!((l - 2.265126343932687).abs() < 1e-13);
        assert!((perplexity(l) - 9.632341512141632).abs() < 1e-12);
    }

    #[test]
    fn perplexity_examples() {
        assert!((perplexity(10000f64.ln()) - 10000.0).abs() < 1e-8);
        assert_eq!(perplexity(0.0), 1.0);
    }

    #[test]
    fn target_out_of_range() {
        let logits = vec![Matrix::zeros(1, 3)];
        assert!(matches!(loss(&logits, &[vec![3]]), Err(Error::Data(_))));
    }

    #[test]
    fn token_out_of_range() {
        let model = LMModel::zeros(ModelConfig::new(4, 2, 1, 1)).unwrap();
        let err = forward_sequence(&model, &[vec![4]], &model.zero_state(1), &no_masks(1), None);
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn zero_model_predicts_uniform() {
        let model = LMModel::zeros(ModelConfig::new(7, 4, 2, 2)).unwrap();
        let tokens = vec![vec![1, 2, 3], vec![6, 0, 5]];
        let (logits, _, _) =
            forward_sequence(&model, &tokens, &model.zero_state(2), &no_masks(2), None).unwrap();
        assert!(logits
            .iter()
            .all(|l| l.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn scalar_pipeline_matches_oracle() {
        let mut cfg = ModelConfig::new(3, 1, 1, 1);
        cfg.unroll = 1;
        cfg.batch = 1;
        let mut model = LMModel::zeros(cfg).unwrap();
        model.embedding = Matrix::from_vec(3, 1, vec![0.3, -0.6, 0.9]).unwrap();
        let cell = &mut model.layers[0].cells[0];
        cell.w = Matrix::from_vec(4, 2, vec![0.5, -0.3, 0.8, 0.1, -0.4, 0.6, 1.2, -0.7]).unwrap();
        cell.b = Vector::from(vec![0.1, 0.2, -0.1, 0.05]);
        model.out_w = Matrix::from_vec(3, 1, vec![0.7, -1.1, 0.25]).unwrap();
        model.out_b = Vector::from(vec![0.05, -0.02, 0.3]);
        let (logits, _, _) =
            forward_sequence(&model, &[vec![2]], &model.zero_state(1), &no_masks(1), None).unwrap();
        let want = [
            0.17820842889143318,
            -0.22147038825796644,
            0.3457887246040833,
        ];
        for (got, want) in logits[0].row(0).iter().zip(want) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn single_class_vocab_has_zero_gradient() {
        let mut model = LMModel::zeros(ModelConfig::new(1, 2, 1, 1)).unwrap();
        for t in model.tensors_mut() {
            t.iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = 0.1 * i as f64 - 0.2);
        }
        let tokens = vec![vec![0, 0, 0]];
        let (logits, _, tape) =
            forward_sequence(&model, &tokens, &model.zero_state(1), &no_masks(1), None).unwrap();
        assert_eq!(loss(&logits, &tokens).unwrap(), 0.0);
        let g = backward_sequence(&model, &tape, &tokens).unwrap();
        assert_eq!(g.global_norm(), 0.0);
    }
}
