//! Single recurrent cells: the naive RNN and the LSTM.
//!
//! Cells operate on minibatches: every row of the input matrix, and of the
//! matching state matrices, is an independent sequence.

use crate::error::{Error, Result};
use crate::numerics::{gemm_nn, gemm_nt, gemm_tn, sigmoid, Activation, Matrix, Vector};

/// How a naive RNN cell consumes its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RnnInput {
    /// `h' = f(W_x x + W_h h + b)` with one fused weight over `[x; h]`.
    Projected,
    /// `h' = f(W_h h + x + b)`: the input is added unprojected, which needs
    /// `input_dim == hidden_dim`.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Rnn {
        activation: Activation,
        input: RnnInput,
    },
    Lstm,
}

impl CellKind {
    pub fn is_lstm(self) -> bool {
        matches!(self, CellKind::Lstm)
    }

    /// Rows of the fused weight matrix per hidden unit.
    fn gate_rows(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Rnn { .. } => 1,
        }
    }

    /// Canonical textual name, also used in config files.
    pub fn name(self) -> String {
        match self {
            CellKind::Lstm => "lstm".to_string(),
            CellKind::Rnn {
                activation,
                input: RnnInput::Projected,
            } => format!("rnn-{}", activation.name()),
            CellKind::Rnn {
                activation,
                input: RnnInput::Identity,
            } => format!("rnn-{}-identity", activation.name()),
        }
    }

    pub fn weight_shape(self, input_dim: usize, hidden_dim: usize) -> (usize, usize) {
        match self {
            CellKind::Rnn {
                input: RnnInput::Identity,
                ..
            } => (hidden_dim, hidden_dim),
            _ => (self.gate_rows() * hidden_dim, input_dim + hidden_dim),
        }
    }

    pub fn bias_len(self, hidden_dim: usize) -> usize {
        self.gate_rows() * hidden_dim
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    /// Accepts `lstm`, `rnn-<act>` and `rnn-<act>-identity`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "lstm" {
            return Ok(CellKind::Lstm);
        }
        let rest = s
            .strip_prefix("rnn-")
            .ok_or_else(|| Error::Config(format!("unknown cell kind `{s}`")))?;
        let (act, input) = match rest.strip_suffix("-identity") {
            Some(a) => (a, RnnInput::Identity),
            None => (rest, RnnInput::Projected),
        };
        Ok(CellKind::Rnn {
            activation: act.parse()?,
            input,
        })
    }
}

/// Weights of one cell. For the LSTM the rows of `w` and `b` are four blocks
/// of `hidden_dim` in gate order (i, f, o, g); columns are `[x; h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    pub kind: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w: Matrix,
    pub b: Vector,
}

impl CellParams {
    pub fn zeros(kind: CellKind, input_dim: usize, hidden_dim: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config(format!(
                "cell dimensions must be positive (input_dim={input_dim}, hidden_dim={hidden_dim})"
            )));
        }
        if let CellKind::Rnn {
            input: RnnInput::Identity,
            ..
        } = kind
        {
            if input_dim != hidden_dim {
                return Err(Error::Config(format!(
                    "identity-input RNN needs input_dim == hidden_dim (got {input_dim} and {hidden_dim})"
                )));
            }
        }
        let (r, c) = kind.weight_shape(input_dim, hidden_dim);
        Ok(CellParams {
            kind,
            input_dim,
            hidden_dim,
            w: Matrix::zeros(r, c),
            b: Vector::zeros(kind.bias_len(hidden_dim)),
        })
    }

    pub fn zeros_like(&self) -> Self {
        CellParams {
            kind: self.kind,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
            b: Vector::zeros(self.b.len()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.as_slice().len() + self.b.len()
    }

    pub fn zero_state(&self, batch: usize) -> CellState {
        CellState::zeros(self.kind, batch, self.hidden_dim)
    }

    pub fn add_assign(&mut self, other: &CellParams) {
        self.w.add_assign(&other.w);
        for (a, b) in self.b.as_mut_slice().iter_mut().zip(other.b.as_slice()) {
            *a += b;
        }
    }

    fn check_inputs(&self, x: &Matrix, s: &CellState) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::shape(
                "cell_forward",
                format!("input_dim={}", self.input_dim),
                format!("x.cols={}", x.cols()),
            ));
        }
        if s.h.cols() != self.hidden_dim || s.h.rows() != x.rows() {
            return Err(Error::shape(
                "cell_forward",
                format!("state {}x{}", x.rows(), self.hidden_dim),
                format!("h {}x{}", s.h.rows(), s.h.cols()),
            ));
        }
        match (&s.c, self.kind.is_lstm()) {
            (Some(c), true) if c.shape() == s.h.shape() => Ok(()),
            (None, false) => Ok(()),
            _ => Err(Error::shape(
                "cell_forward",
                format!("{} state", self.kind.name()),
                "memory vector presence/shape",
            )),
        }
    }
}

/// Recurrent state of one cell for a batch; `c` is present iff LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Matrix,
    pub c: Option<Matrix>,
}

impl CellState {
    pub fn zeros(kind: CellKind, batch: usize, hidden_dim: usize) -> Self {
        CellState {
            h: Matrix::zeros(batch, hidden_dim),
            c: kind.is_lstm().then(|| Matrix::zeros(batch, hidden_dim)),
        }
    }

    pub fn zero_like(&self) -> Self {
        CellState {
            h: Matrix::zeros(self.h.rows(), self.h.cols()),
            c: self.c.as_ref().map(|c| Matrix::zeros(c.rows(), c.cols())),
        }
    }

    pub fn set_zero(&mut self) {
        self.h.fill(0.0);
        if let Some(c) = &mut self.c {
            c.fill(0.0);
        }
    }

    /// Builds a single-sequence state from vectors.
    pub fn from_vectors(h: &Vector, c: Option<&Vector>) -> Self {
        CellState {
            h: h.to_row(),
            c: c.map(Vector::to_row),
        }
    }
}

/// Values cached by one forward step for the matching backward step.
#[derive(Debug, Clone)]
pub struct CellTape {
    kind: CellKind,
    input_dim: usize,
    hidden_dim: usize,
    /// `[x | h_prev]` for fused cells; for identity-input RNNs only `h_prev`.
    z: Matrix,
    /// Post-activation gates (LSTM, `B x 4h`) or the new hidden state (RNN).
    act: Matrix,
    c_prev: Option<Matrix>,
    tanh_c: Option<Matrix>,
}

impl CellTape {
    pub fn batch(&self) -> usize {
        self.z.rows()
    }

    /// LSTM gate activations `(i, f, o, g)` for batch row `r`.
    pub fn gates(&self, r: usize) -> Option<[&[f64]; 4]> {
        if !self.kind.is_lstm() {
            return None;
        }
        let h = self.hidden_dim;
        let row = self.act.row(r);
        Some([&row[..h], &row[h..2 * h], &row[2 * h..3 * h], &row[3 * h..]])
    }
}

/// One forward step. Returns the new state (whose `h` is the cell output) and
/// the tape for [`cell_backward`].
pub fn cell_forward(p: &CellParams, x: &Matrix, s: &CellState) -> Result<(CellState, CellTape)> {
    p.check_inputs(x, s)?;
    let batch = x.rows();
    let hd = p.hidden_dim;
    match p.kind {
        CellKind::Lstm => {
            let z = Matrix::hcat(x, &s.h);
            let mut act = Matrix::zeros(batch, 4 * hd);
            gemm_nt(&z, &p.w, &mut act, false);
            act.add_row_vector(p.b.as_slice());
            let c_prev = s.c.as_ref().expect("checked").clone();
            let mut c = Matrix::zeros(batch, hd);
            let mut tanh_c = Matrix::zeros(batch, hd);
            let mut h = Matrix::zeros(batch, hd);
            for r in 0..batch {
                let gates = act.row_mut(r);
                let (sig, g) = gates.split_at_mut(3 * hd);
                sig.iter_mut().for_each(|v| *v = sigmoid(*v));
                g.iter_mut().for_each(|v| *v = v.tanh());
                let gates = act.row(r);
                let cp = c_prev.row(r);
                let (c_row, tc_row) = (c.row_mut(r), tanh_c.row_mut(r));
                for j in 0..hd {
                    let (i, f, g) = (gates[j], gates[hd + j], gates[3 * hd + j]);
                    c_row[j] = f * cp[j] + i * g;
                    tc_row[j] = c_row[j].tanh();
                }
                let h_row = h.row_mut(r);
                for j in 0..hd {
                    h_row[j] = gates[2 * hd + j] * tanh_c.get(r, j);
                }
            }
            let tape = CellTape {
                kind: p.kind,
                input_dim: p.input_dim,
                hidden_dim: hd,
                z,
                act,
                c_prev: Some(c_prev),
                tanh_c: Some(tanh_c),
            };
            Ok((CellState { h, c: Some(c) }, tape))
        }
        CellKind::Rnn { activation, input } => {
            let mut pre = Matrix::zeros(batch, hd);
            let z = match input {
                RnnInput::Projected => {
                    let z = Matrix::hcat(x, &s.h);
                    gemm_nt(&z, &p.w, &mut pre, false);
                    z
                }
                RnnInput::Identity => {
                    pre.as_mut_slice().copy_from_slice(x.as_slice());
                    gemm_nt(&s.h, &p.w, &mut pre, true);
                    s.h.clone()
                }
            };
            pre.add_row_vector(p.b.as_slice());
            pre.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = activation.apply(*v));
            let tape = CellTape {
                kind: p.kind,
                input_dim: p.input_dim,
                hidden_dim: hd,
                z,
                act: pre.clone(),
                c_prev: None,
                tanh_c: None,
            };
            Ok((CellState { h: pre, c: None }, tape))
        }
    }
}

/// Gradients produced by [`cell_backward`].
#[derive(Debug, Clone)]
pub struct CellGradients {
    pub params: CellParams,
    pub x: Matrix,
    pub state: CellState,
}

/// Backward step returning fresh parameter gradients.
pub fn cell_backward(
    p: &CellParams,
    tape: &CellTape,
    grad_h: &Matrix,
    grad_c: Option<&Matrix>,
) -> Result<CellGradients> {
    let mut params = p.zeros_like();
    let (x, state) = cell_backward_accumulate(p, tape, grad_h, grad_c, &mut params)?;
    Ok(CellGradients { params, x, state })
}

/// Backward step that adds parameter gradients into `acc` and returns the
/// gradients with respect to the input and the previous state.
pub fn cell_backward_accumulate(
    p: &CellParams,
    tape: &CellTape,
    grad_h: &Matrix,
    grad_c: Option<&Matrix>,
    acc: &mut CellParams,
) -> Result<(Matrix, CellState)> {
    if tape.kind != p.kind || tape.input_dim != p.input_dim || tape.hidden_dim != p.hidden_dim {
        return Err(Error::Usage(format!(
            "tape from a {} cell ({}->{}) used with a {} cell ({}->{})",
            tape.kind.name(),
            tape.input_dim,
            tape.hidden_dim,
            p.kind.name(),
            p.input_dim,
            p.hidden_dim
        )));
    }
    let batch = tape.batch();
    let hd = p.hidden_dim;
    if grad_h.shape() != (batch, hd) {
        return Err(Error::shape(
            "cell_backward",
            format!("grad_h {batch}x{hd}"),
            format!("{}x{}", grad_h.rows(), grad_h.cols()),
        ));
    }
    if grad_c.is_some() != p.kind.is_lstm() {
        return Err(Error::Usage(
            "grad_c must be given exactly when the cell is an LSTM".into(),
        ));
    }
    match p.kind {
        CellKind::Lstm => {
            let grad_c = grad_c.expect("checked");
            if grad_c.shape() != grad_h.shape() {
                return Err(Error::shape("cell_backward", "grad_c", "grad_h"));
            }
            let c_prev = tape.c_prev.as_ref().expect("lstm tape");
            let tanh_c = tape.tanh_c.as_ref().expect("lstm tape");
            let mut dpre = Matrix::zeros(batch, 4 * hd);
            let mut dc_prev = Matrix::zeros(batch, hd);
            for r in 0..batch {
                let gates = tape.act.row(r);
                let (gh, gc, cp, tc) = (grad_h.row(r), grad_c.row(r), c_prev.row(r), tanh_c.row(r));
                let mut dcp = vec![0.0; hd];
                let d = dpre.row_mut(r);
                for j in 0..hd {
                    let (i, f, o, g) = (
                        gates[j],
                        gates[hd + j],
                        gates[2 * hd + j],
                        gates[3 * hd + j],
                    );
                    let dc = gc[j] + gh[j] * o * (1.0 - tc[j] * tc[j]);
                    let d_o = gh[j] * tc[j];
                    let d_i = dc * g;
                    let d_g = dc * i;
                    let d_f = dc * cp[j];
                    dcp[j] = dc * f;
                    d[j] = d_i * i * (1.0 - i);
                    d[hd + j] = d_f * f * (1.0 - f);
                    d[2 * hd + j] = d_o * o * (1.0 - o);
                    d[3 * hd + j] = d_g * (1.0 - g * g);
                }
                dc_prev.row_mut(r).copy_from_slice(&dcp);
            }
            let (dx, dh) = fused_backward(p, &tape.z, &dpre, acc);
            Ok((
                dx,
                CellState {
                    h: dh,
                    c: Some(dc_prev),
                },
            ))
        }
        CellKind::Rnn { activation, input } => {
            let mut dpre = grad_h.clone();
            for (d, y) in dpre.as_mut_slice().iter_mut().zip(tape.act.as_slice()) {
                *d *= activation.derivative_from_output(*y);
            }
            match input {
                RnnInput::Projected => {
                    let (dx, dh) = fused_backward(p, &tape.z, &dpre, acc);
                    Ok((dx, CellState { h: dh, c: None }))
                }
                RnnInput::Identity => {
                    gemm_tn(&dpre, &tape.z, &mut acc.w, true);
                    dpre.sum_rows_into(acc.b.as_mut_slice());
                    let mut dh = Matrix::zeros(batch, hd);
                    gemm_nn(&dpre, &p.w, &mut dh, false);
                    Ok((dpre, CellState { h: dh, c: None }))
                }
            }
        }
    }
}

// Shared tail for cells whose pre-activation is `W [x; h] + b`.
fn fused_backward(
    p: &CellParams,
    z: &Matrix,
    dpre: &Matrix,
    acc: &mut CellParams,
) -> (Matrix, Matrix) {
    gemm_tn(dpre, z, &mut acc.w, true);
    dpre.sum_rows_into(acc.b.as_mut_slice());
    let mut dz = Matrix::zeros(z.rows(), z.cols());
    gemm_nn(dpre, &p.w, &mut dz, false);
    (
        dz.col_block(0, p.input_dim),
        dz.col_block(p.input_dim, p.hidden_dim),
    )
}
