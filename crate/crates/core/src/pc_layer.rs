//! Parallel cells: a recurrent layer built from `wide` small independent
//! cells whose outputs are concatenated.
//!
//! A layer with `total_hidden = m` and `wide = n` holds `n` cells of `m / n`
//! units each. Cell `i` owns output columns `[i·m/n, (i+1)·m/n)`. Cells never
//! read each other's state, so their forward and backward passes run
//! concurrently on the rayon pool; the only cross-cell reduction (the input
//! gradient under [`Routing::Full`]) is summed in cell order, which keeps the
//! result independent of the thread count.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::cells::{
    cell_backward_accumulate, cell_forward, CellKind, CellParams, CellState, CellTape,
};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// How the layer input is distributed over the cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Routing {
    /// Every cell reads the whole input.
    Full,
    /// Cell `i` reads the `i`-th equal slice of the input.
    #[default]
    Split,
}

impl Routing {
    pub fn name(self) -> &'static str {
        match self {
            Routing::Full => "full",
            Routing::Split => "split",
        }
    }
}

impl std::str::FromStr for Routing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Routing::Full),
            "split" => Ok(Routing::Split),
            other => Err(Error::Config(format!(
                "unknown routing `{other}` (expected full|split)"
            ))),
        }
    }
}

/// Set of cell indices whose output and state are forced to zero.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct MaskSet(BTreeSet<usize>);

impl MaskSet {
    pub fn empty() -> Self {
        MaskSet::default()
    }

    pub fn all(wide: usize) -> Self {
        MaskSet((0..wide).collect())
    }

    pub fn single(cell: usize) -> Self {
        MaskSet([cell].into_iter().collect())
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        MaskSet(indices.into_iter().collect())
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.0.contains(&cell)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn union(&self, other: &MaskSet) -> MaskSet {
        MaskSet(self.0.union(&other.0).copied().collect())
    }

    pub fn validate(&self, wide: usize) -> Result<()> {
        match self.0.iter().find(|&&i| i >= wide) {
            Some(i) => Err(Error::Usage(format!(
                "mask index {i} out of range for a layer with wide={wide}"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelLayer {
    pub kind: CellKind,
    pub input_dim: usize,
    pub total_hidden: usize,
    pub wide: usize,
    pub routing: Routing,
    pub cells: Vec<CellParams>,
}

/// Builds a layer of `wide` zero-initialised cells of `total_hidden / wide`
/// units each.
pub fn build_layer(
    kind: CellKind,
    input_dim: usize,
    total_hidden: usize,
    wide: usize,
    routing: Routing,
) -> Result<ParallelLayer> {
    if wide == 0 {
        return Err(Error::Config("wide must be at least 1".into()));
    }
    if !total_hidden.is_multiple_of(wide) {
        return Err(Error::Config(format!(
            "total hidden size {total_hidden} is not divisible by wide={wide}"
        )));
    }
    if routing == Routing::Split && !input_dim.is_multiple_of(wide) {
        return Err(Error::Config(format!(
            "input_dim {input_dim} is not divisible by wide={wide} (required by split routing)"
        )));
    }
    let hidden = total_hidden / wide;
    let cell_input = match routing {
        Routing::Full => input_dim,
        Routing::Split => input_dim / wide,
    };
    let cells = (0..wide)
        .map(|_| CellParams::zeros(kind, cell_input, hidden))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParallelLayer {
        kind,
        input_dim,
        total_hidden,
        wide,
        routing,
        cells,
    })
}

impl ParallelLayer {
    pub fn cell_hidden(&self) -> usize {
        self.total_hidden / self.wide
    }

    pub fn cell_input(&self) -> usize {
        self.cells[0].input_dim
    }

    pub fn zero_state(&self, batch: usize) -> Vec<CellState> {
        self.cells.iter().map(|c| c.zero_state(batch)).collect()
    }

    pub fn zeros_like(&self) -> ParallelLayer {
        ParallelLayer {
            cells: self.cells.iter().map(CellParams::zeros_like).collect(),
            ..self.clone()
        }
    }

    fn routed_input(&self, x: &Matrix, cell: usize) -> Matrix {
        match self.routing {
            Routing::Full => x.clone(),
            Routing::Split => {
                let w = self.cell_input();
                x.col_block(cell * w, w)
            }
        }
    }
}

/// Exact number of weight and bias entries in the layer.
pub fn count_params(layer: &ParallelLayer) -> usize {
    layer.cells.iter().map(CellParams::param_count).sum()
}

/// How hidden units are divided over the cells when counting parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Division {
    /// `m / n` units per cell; `n` must divide `m`.
    #[default]
    Equal,
    /// Sizes differ by at most one unit (the first `m mod n` cells are one
    /// larger). Only used for parameter accounting; layers are always built
    /// with equal division.
    Balanced,
}

/// `total` split into `parts` sizes differing by at most one.
pub fn balanced_sizes(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|k| total / parts + usize::from(k < total % parts))
        .collect()
}

/// Exact parameter count of a layer configuration, counted from the
/// concrete cells it would contain.
pub fn count_params_for(
    kind: CellKind,
    input_dim: usize,
    total_hidden: usize,
    wide: usize,
    routing: Routing,
    division: Division,
) -> Result<usize> {
    match division {
        Division::Equal => Ok(count_params(&build_layer(
            kind,
            input_dim,
            total_hidden,
            wide,
            routing,
        )?)),
        Division::Balanced => {
            if wide == 0 || wide > total_hidden || (routing == Routing::Split && wide > input_dim) {
                return Err(Error::Config(format!(
                    "cannot divide {total_hidden} units (input {input_dim}) over wide={wide} cells"
                )));
            }
            let hidden = balanced_sizes(total_hidden, wide);
            let inputs = match routing {
                Routing::Full => vec![input_dim; wide],
                Routing::Split => balanced_sizes(input_dim, wide),
            };
            hidden
                .iter()
                .zip(&inputs)
                .map(|(&h, &i)| CellParams::zeros(kind, i, h).map(|c| c.param_count()))
                .sum()
        }
    }
}

/// `8m²/n + 4m`: LSTM layer parameters for split routing with input size `m`
/// (integer division of `8m²` by `n`, exact whenever `n | m`).
pub fn closed_form_lstm(m: usize, n: usize) -> usize {
    8 * m * m / n + 4 * m
}

/// `m²/n + m`: identity-input RNN layer parameters for split routing.
pub fn closed_form_rnn(m: usize, n: usize) -> usize {
    m * m / n + m
}

/// Per-step cache of a layer forward pass.
#[derive(Debug, Clone)]
pub struct LayerTape {
    batch: usize,
    input_dim: usize,
    /// `None` for masked cells.
    cells: Vec<Option<CellTape>>,
    recurrent_keep: Option<Matrix>,
}

/// Forward step of the whole layer. Output is `B x total_hidden`.
pub fn pc_forward(
    layer: &ParallelLayer,
    x: &Matrix,
    states: &[CellState],
    mask: &MaskSet,
) -> Result<(Vec<CellState>, Matrix, LayerTape)> {
    pc_forward_dropout(layer, x, states, mask, None)
}

/// Forward step with an optional multiplicative mask (`B x total_hidden`) on
/// the previous hidden state as it enters each cell's transform. The carried
/// state itself is not altered.
pub fn pc_forward_dropout(
    layer: &ParallelLayer,
    x: &Matrix,
    states: &[CellState],
    mask: &MaskSet,
    recurrent_keep: Option<&Matrix>,
) -> Result<(Vec<CellState>, Matrix, LayerTape)> {
    mask.validate(layer.wide)?;
    if states.len() != layer.wide {
        return Err(Error::shape(
            "pc_forward",
            format!("wide={}", layer.wide),
            format!("{} states", states.len()),
        ));
    }
    if x.cols() != layer.input_dim {
        return Err(Error::shape(
            "pc_forward",
            format!("input_dim={}", layer.input_dim),
            format!("x.cols={}", x.cols()),
        ));
    }
    let batch = x.rows();
    if let Some(k) = recurrent_keep {
        if k.shape() != (batch, layer.total_hidden) {
            return Err(Error::shape(
                "pc_forward",
                "recurrent dropout mask",
                "layer state",
            ));
        }
    }
    let hd = layer.cell_hidden();
    let results = layer
        .cells
        .par_iter()
        .zip(states.par_iter())
        .enumerate()
        .map(
            |(i, (cell, state))| -> Result<(CellState, Option<CellTape>)> {
                if mask.contains(i) {
                    return Ok((cell.zero_state(batch), None));
                }
                let xi = layer.routed_input(x, i);
                let (next, tape) = match recurrent_keep {
                    Some(keep) => {
                        let mut dropped = state.clone();
                        let k = keep.col_block(i * hd, hd);
                        for (h, m) in dropped.h.as_mut_slice().iter_mut().zip(k.as_slice()) {
                            *h *= m;
                        }
                        cell_forward(cell, &xi, &dropped)?
                    }
                    None => cell_forward(cell, &xi, state)?,
                };
                Ok((next, Some(tape)))
            },
        )
        .collect::<Result<Vec<_>>>()?;

    let mut h = Matrix::zeros(batch, layer.total_hidden);
    let mut next_states = Vec::with_capacity(layer.wide);
    let mut tapes = Vec::with_capacity(layer.wide);
    for (i, (s, tape)) in results.into_iter().enumerate() {
        if tape.is_some() {
            h.set_col_block(i * hd, &s.h);
        }
        next_states.push(s);
        tapes.push(tape);
    }
    Ok((
        next_states,
        h,
        LayerTape {
            batch,
            input_dim: layer.input_dim,
            cells: tapes,
            recurrent_keep: recurrent_keep.cloned(),
        },
    ))
}

/// Gradients of one layer step.
#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub layer: ParallelLayer,
    pub x: Matrix,
    pub states: Vec<CellState>,
}

/// Backward step returning fresh parameter gradients. `grad_h` is the
/// gradient on the layer output; `grad_states` carries the gradient on this
/// step's output state from the next time step (`None` means zero).
pub fn pc_backward(
    layer: &ParallelLayer,
    tape: &LayerTape,
    grad_h: &Matrix,
    grad_states: Option<&[CellState]>,
) -> Result<LayerGradients> {
    let mut acc = layer.zeros_like();
    let (x, states) = pc_backward_accumulate(layer, tape, grad_h, grad_states, &mut acc)?;
    Ok(LayerGradients {
        layer: acc,
        x,
        states,
    })
}

/// Backward step adding parameter gradients into `acc`. Returns the input
/// gradient and the gradient on the previous states.
pub fn pc_backward_accumulate(
    layer: &ParallelLayer,
    tape: &LayerTape,
    grad_h: &Matrix,
    grad_states: Option<&[CellState]>,
    acc: &mut ParallelLayer,
) -> Result<(Matrix, Vec<CellState>)> {
    if tape.cells.len() != layer.wide || tape.input_dim != layer.input_dim {
        return Err(Error::Usage(format!(
            "layer tape ({} cells, input {}) does not match layer ({} cells, input {})",
            tape.cells.len(),
            tape.input_dim,
            layer.wide,
            layer.input_dim
        )));
    }
    let batch = tape.batch;
    if grad_h.shape() != (batch, layer.total_hidden) {
        return Err(Error::shape(
            "pc_backward",
            format!("grad_h {}x{}", batch, layer.total_hidden),
            format!("{}x{}", grad_h.rows(), grad_h.cols()),
        ));
    }
    if let Some(gs) = grad_states {
        if gs.len() != layer.wide {
            return Err(Error::shape("pc_backward", layer.wide, gs.len()));
        }
    }
    let hd = layer.cell_hidden();
    let per_cell = layer
        .cells
        .par_iter()
        .zip(acc.cells.par_iter_mut())
        .zip(tape.cells.par_iter())
        .enumerate()
        .map(
            |(i, ((cell, acc_cell), cell_tape))| -> Result<Option<(Matrix, CellState)>> {
                let Some(cell_tape) = cell_tape else {
                    return Ok(None);
                };
                let mut gh = grad_h.col_block(i * hd, hd);
                let gc = match grad_states {
                    Some(gs) => {
                        gh.add_assign(&gs[i].h);
                        gs[i].c.clone()
                    }
                    None => None,
                };
                let gc = match (cell.kind.is_lstm(), gc) {
                    (true, Some(c)) => Some(c),
                    (true, None) => Some(Matrix::zeros(batch, hd)),
                    (false, _) => None,
                };
                let (gx, mut gs) =
                    cell_backward_accumulate(cell, cell_tape, &gh, gc.as_ref(), acc_cell)?;
                if let Some(keep) = &tape.recurrent_keep {
                    let k = keep.col_block(i * hd, hd);
                    for (g, m) in gs.h.as_mut_slice().iter_mut().zip(k.as_slice()) {
                        *g *= m;
                    }
                }
                Ok(Some((gx, gs)))
            },
        )
        .collect::<Result<Vec<_>>>()?;

    let mut grad_x = Matrix::zeros(batch, layer.input_dim);
    let cell_in = layer.cell_input();
    let mut grad_prev = Vec::with_capacity(layer.wide);
    for (i, item) in per_cell.into_iter().enumerate() {
        match item {
            Some((gx, gs)) => {
                match layer.routing {
                    Routing::Full => grad_x.add_assign(&gx),
                    Routing::Split => grad_x.set_col_block(i * cell_in, &gx),
                }
                grad_prev.push(gs);
            }
            None => grad_prev.push(layer.cells[i].zero_state(batch)),
        }
    }
    Ok((grad_x, grad_prev))
}
