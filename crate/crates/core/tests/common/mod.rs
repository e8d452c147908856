//! Oracles shared by the property tests and the acceptance suite.

#![allow(dead_code)]

use std::collections::BTreeSet;

use parallel_cells::cells::{
    cell_backward, cell_forward, CellKind, CellParams, CellState, RnnInput,
};
use parallel_cells::model::{
    backward_sequence, forward_sequence, loss, LMModel, ModelConfig, ModelState,
};
use parallel_cells::numerics::{concat, Activation, Matrix, Vector};
use parallel_cells::pc_layer::{
    build_layer, pc_backward, pc_forward, MaskSet, ParallelLayer, Routing,
};
use parallel_cells::training::{init_params, DropoutPlan, DropoutTarget};
use parallel_cells::{rng_from_seed, Rng};
use rand::Rng as _;

pub const FD_EPS: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;
/// Gradient magnitudes below this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

pub fn rand_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

pub fn randomize(p: &mut CellParams, rng: &mut Rng) {
    p.w.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-0.5..0.5));
    p.b.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-0.5..0.5));
}

pub fn random_layer(
    rng: &mut Rng,
    kind: CellKind,
    input: usize,
    m: usize,
    n: usize,
    routing: Routing,
) -> ParallelLayer {
    let mut layer = build_layer(kind, input, m, n, routing).unwrap();
    layer.cells.iter_mut().for_each(|c| randomize(c, rng));
    layer
}

pub fn random_states(rng: &mut Rng, layer: &ParallelLayer, batch: usize) -> Vec<CellState> {
    layer
        .cells
        .iter()
        .map(|c| CellState {
            h: rand_matrix(rng, batch, c.hidden_dim),
            c: c.kind
                .is_lstm()
                .then(|| rand_matrix(rng, batch, c.hidden_dim)),
        })
        .collect()
}

pub fn layer_kinds() -> [CellKind; 3] {
    [
        CellKind::Lstm,
        "rnn-tanh".parse().unwrap(),
        "rnn-relu".parse().unwrap(),
    ]
}

pub fn random_kind(rng: &mut Rng, lstm: bool) -> CellKind {
    if lstm {
        return CellKind::Lstm;
    }
    let activation =
        [Activation::Tanh, Activation::Sigmoid, Activation::Relu][rng.random_range(0..3)];
    let input = if rng.random_bool(0.5) {
        RnnInput::Identity
    } else {
        RnnInput::Projected
    };
    CellKind::Rnn { activation, input }
}

/// A small model, one token window and everything that fixes its loss.
pub struct GradCase {
    pub model: LMModel,
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub state: ModelState,
    pub masks: Vec<MaskSet>,
    pub dropout: Option<(f64, DropoutTarget, u64)>,
}

impl GradCase {
    /// Case `index` cycles through wide 1..=3, both cell families and both
    /// routings; everything else is drawn from `rng`.
    pub fn random(rng: &mut Rng, index: usize) -> GradCase {
        let wide = 1 + index % 3;
        let lstm = (index / 3).is_multiple_of(2);
        let routing = if (index / 6).is_multiple_of(2) {
            Routing::Split
        } else {
            Routing::Full
        };
        let cell = random_kind(rng, lstm);
        let per_cell = rng.random_range(1..=8 / wide);
        let hidden = wide * per_cell;
        let identity = matches!(
            cell,
            CellKind::Rnn {
                input: RnnInput::Identity,
                ..
            }
        );
        let embed_dim = match (identity, routing) {
            (true, Routing::Split) => hidden,
            (true, Routing::Full) => per_cell,
            (false, Routing::Split) => wide * rng.random_range(1..=3),
            (false, Routing::Full) => rng.random_range(1..=6),
        };
        let vocab = rng.random_range(2..=6);
        let layers = if identity && routing == Routing::Full {
            1
        } else {
            rng.random_range(1..=2)
        };
        let mut cfg = ModelConfig::new(vocab, hidden, wide, layers);
        cfg.embed_dim = embed_dim;
        cfg.cell = cell;
        cfg.routing = routing;
        let mut model = LMModel::zeros(cfg).unwrap();
        init_params(&mut model, 0.8, rng);

        let batch = rng.random_range(1..=3);
        let steps = rng.random_range(1..=4);
        let tokens = |rng: &mut Rng| -> Vec<Vec<usize>> {
            (0..batch)
                .map(|_| (0..steps).map(|_| rng.random_range(0..vocab)).collect())
                .collect()
        };
        let inputs = tokens(rng);
        let targets = tokens(rng);

        let mut state = model.zero_state(batch);
        for s in state.layers.iter_mut().flatten() {
            s.h.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
            if let Some(c) = &mut s.c {
                c.as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        let masks = (0..layers)
            .map(|_| {
                if wide > 1 && rng.random_bool(0.25) {
                    MaskSet::single(rng.random_range(0..wide))
                } else {
                    MaskSet::empty()
                }
            })
            .collect();
        let dropout = rng.random_bool(0.3).then(|| {
            let target = [
                DropoutTarget::Input,
                DropoutTarget::Recurrent,
                DropoutTarget::Both,
            ][rng.random_range(0..3)];
            (0.3, target, rng.random::<u64>())
        });
        GradCase {
            model,
            inputs,
            targets,
            state,
            masks,
            dropout,
        }
    }

    fn run(&self, model: &LMModel) -> (Vec<Matrix>, parallel_cells::model::SequenceTape) {
        let mut rng;
        let mut plan;
        let dropout = match self.dropout {
            Some((rate, target, seed)) => {
                rng = rng_from_seed(seed);
                plan = DropoutPlan::new(rate, target, &mut rng);
                Some(&mut plan)
            }
            None => None,
        };
        let (logits, _, tape) =
            forward_sequence(model, &self.inputs, &self.state, &self.masks, dropout).unwrap();
        (logits, tape)
    }

    pub fn loss_of(&self, model: &LMModel) -> f64 {
        loss(&self.run(model).0, &self.targets).unwrap()
    }

    pub fn analytic(&self) -> LMModel {
        let (_, tape) = self.run(&self.model);
        backward_sequence(&self.model, &tape, &self.targets)
            .unwrap()
            .0
    }
}

#[derive(Debug)]
pub struct GradReport {
    pub configs: usize,
    pub entries: usize,
    pub max_rel: f64,
    /// Distinct (wide, is_lstm, routing) combinations exercised.
    pub combos: usize,
}

/// Checks every parameter partial of `configs` random models against central
/// differences.
pub fn check_model_gradients(seed: u64, configs: usize) -> Result<GradReport, String> {
    let mut rng = rng_from_seed(seed);
    let mut entries = 0usize;
    let mut max_rel = 0.0f64;
    let mut combos = BTreeSet::new();
    for index in 0..configs {
        let case = GradCase::random(&mut rng, index);
        let cfg = &case.model.config;
        combos.insert((cfg.wide, cfg.cell.is_lstm(), cfg.routing.name()));
        let grads = case.analytic();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.to_vec()).collect();
        let names: Vec<String> = case
            .model
            .tensors()
            .iter()
            .map(|t| t.name.clone())
            .collect();
        let mut probe = case.model.clone();
        for (ti, name) in names.iter().enumerate() {
            for (k, &a) in analytic[ti].iter().enumerate() {
                let orig = probe.tensors_mut()[ti][k];
                probe.tensors_mut()[ti][k] = orig + FD_EPS;
                let up = case.loss_of(&probe);
                probe.tensors_mut()[ti][k] = orig - FD_EPS;
                let down = case.loss_of(&probe);
                probe.tensors_mut()[ti][k] = orig;
                let numeric = (up - down) / (2.0 * FD_EPS);
                let err = rel_err(a, numeric);
                max_rel = max_rel.max(err);
                if err >= FD_TOL {
                    return Err(format!(
                        "config {index} ({}, wide={}, {}): {name}[{k}] analytic {a} numeric {numeric}",
                        cfg.cell.name(),
                        cfg.wide,
                        cfg.routing.name(),
                    ));
                }
                entries += 1;
            }
        }
    }
    Ok(GradReport {
        configs,
        entries,
        max_rel,
        combos: combos.len(),
    })
}

/// `pc_forward` against per-cell `cell_forward` + `concat`, and slice
/// isolation under perturbation of a single cell.
pub fn check_independence(seed: u64, wides: &[usize]) -> Result<usize, String> {
    let mut rng = rng_from_seed(seed);
    let mut layers = 0;
    for &wide in wides {
        for kind in layer_kinds() {
            for routing in [Routing::Split, Routing::Full] {
                let (in_per, h_per, batch) = (3, 4, 3);
                let layer =
                    random_layer(&mut rng, kind, wide * in_per, wide * h_per, wide, routing);
                let x = rand_matrix(&mut rng, batch, wide * in_per);
                let states = random_states(&mut rng, &layer, batch);
                let (next, h, _) = pc_forward(&layer, &x, &states, &MaskSet::empty())
                    .map_err(|e| e.to_string())?;

                let mut manual = Vec::new();
                for (i, (cell, s)) in layer.cells.iter().zip(&states).enumerate() {
                    let xi = match routing {
                        Routing::Full => x.clone(),
                        Routing::Split => x.col_block(i * in_per, in_per),
                    };
                    let (n, _) = cell_forward(cell, &xi, s).map_err(|e| e.to_string())?;
                    if n != next[i] {
                        return Err(format!(
                            "wide={wide} {}: state of cell {i} differs",
                            kind.name()
                        ));
                    }
                    manual.push(n.h);
                }
                for b in 0..batch {
                    let parts: Vec<Vector> =
                        manual.iter().map(|m| Vector::from(m.row(b))).collect();
                    let (row, _) = concat(&parts).map_err(|e| e.to_string())?;
                    if row.as_slice() != h.row(b) {
                        return Err(format!(
                            "wide={wide} {} {routing:?}: output row {b} differs",
                            kind.name()
                        ));
                    }
                }
                for j in 0..wide {
                    let mut edited = layer.clone();
                    randomize(&mut edited.cells[j], &mut rng);
                    let (_, h2, _) = pc_forward(&edited, &x, &states, &MaskSet::empty())
                        .map_err(|e| e.to_string())?;
                    for i in (0..wide).filter(|&i| i != j) {
                        if h.col_block(i * h_per, h_per) != h2.col_block(i * h_per, h_per) {
                            return Err(format!(
                                "wide={wide}: perturbing cell {j} changed slice {i}"
                            ));
                        }
                    }
                }
                layers += 1;
            }
        }
    }
    Ok(layers)
}

/// A wide=1 layer against its bare cell: one forward/backward step, then
/// five SGD steps on a four-step sequence objective. Everything must agree
/// bit for bit.
pub fn check_wide_one(seed: u64) -> Result<usize, String> {
    let mut rng = rng_from_seed(seed);
    let mut cases = 0;
    for kind in layer_kinds() {
        for routing in [Routing::Split, Routing::Full] {
            let layer = random_layer(&mut rng, kind, 5, 4, 1, routing);
            let cell = layer.cells[0].clone();
            let x = rand_matrix(&mut rng, 3, 5);
            let states = random_states(&mut rng, &layer, 3);
            let (next, h, tape) = pc_forward(&layer, &x, &states, &MaskSet::empty()).unwrap();
            let (cn, ctape) = cell_forward(&cell, &x, &states[0]).unwrap();
            if next[0] != cn || h != cn.h {
                return Err(format!("{} {routing:?}: forward differs", kind.name()));
            }
            let gh = rand_matrix(&mut rng, 3, 4);
            let gc = kind.is_lstm().then(|| rand_matrix(&mut rng, 3, 4));
            let carry = vec![CellState {
                h: Matrix::zeros(3, 4),
                c: gc.clone(),
            }];
            let lg = pc_backward(&layer, &tape, &gh, Some(&carry)).unwrap();
            let cg = cell_backward(&cell, &ctape, &gh, gc.as_ref()).unwrap();
            if lg.layer.cells[0] != cg.params || lg.x != cg.x || lg.states[0] != cg.state {
                return Err(format!("{} {routing:?}: backward differs", kind.name()));
            }
            cases += 1;
        }

        let mut layer = random_layer(&mut rng, kind, 3, 4, 1, Routing::Split);
        let mut cell = layer.cells[0].clone();
        let xs: Vec<Matrix> = (0..4).map(|_| rand_matrix(&mut rng, 2, 3)).collect();
        let ghs: Vec<Matrix> = (0..4).map(|_| rand_matrix(&mut rng, 2, 4)).collect();
        for step in 0..5 {
            let mut ls = layer.zero_state(2);
            let mut cs = cell.zero_state(2);
            let (mut ltapes, mut ctapes) = (Vec::new(), Vec::new());
            for x in &xs {
                let (n, _, t) = pc_forward(&layer, x, &ls, &MaskSet::empty()).unwrap();
                ls = n;
                ltapes.push(t);
                let (n, t) = cell_forward(&cell, x, &cs).unwrap();
                cs = n;
                ctapes.push(t);
            }
            let mut lgrad = layer.zeros_like();
            let mut cgrad = cell.zeros_like();
            let mut lcarry: Option<Vec<CellState>> = None;
            let mut ccarry: Option<CellState> = None;
            for t in (0..xs.len()).rev() {
                let g = pc_backward(&layer, &ltapes[t], &ghs[t], lcarry.as_deref()).unwrap();
                lgrad.cells[0].add_assign(&g.layer.cells[0]);
                lcarry = Some(g.states);

                let mut gh = ghs[t].clone();
                if let Some(c) = &ccarry {
                    gh.add_assign(&c.h);
                }
                let zero_c = kind.is_lstm().then(|| Matrix::zeros(2, 4));
                let gc = ccarry.as_ref().and_then(|c| c.c.clone()).or(zero_c);
                let g = cell_backward(&cell, &ctapes[t], &gh, gc.as_ref()).unwrap();
                cgrad.add_assign(&g.params);
                ccarry = Some(g.state);
            }
            for (p, g) in [(&mut layer.cells[0], &lgrad.cells[0]), (&mut cell, &cgrad)] {
                for (w, d) in p.w.as_mut_slice().iter_mut().zip(g.w.as_slice()) {
                    *w -= 0.1 * d;
                }
                for (w, d) in p.b.as_mut_slice().iter_mut().zip(g.b.as_slice()) {
                    *w -= 0.1 * d;
                }
            }
            if layer.cells[0] != cell {
                return Err(format!(
                    "{}: parameters differ after training step {}",
                    kind.name(),
                    step + 1
                ));
            }
        }
        cases += 1;
    }
    Ok(cases)
}
