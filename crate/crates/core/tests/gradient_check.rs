//! Central finite differences against the analytic backward pass.

mod common;

use common::{rand_matrix, random_kind, rel_err, FD_EPS, FD_TOL};
use parallel_cells::cells::{
    cell_backward, cell_forward, CellKind, CellParams, CellState, RnnInput,
};
use parallel_cells::numerics::Matrix;
use parallel_cells::rng_from_seed;
use rand::Rng as _;

#[test]
fn model_gradients_match_finite_differences() {
    let report = common::check_model_gradients(2024, 120).unwrap_or_else(|e| panic!("{e}"));
    assert_eq!(
        report.combos, 12,
        "every wide/kind/routing combination is covered"
    );
    assert!(report.entries > 10_000, "{report:?}");
}

#[test]
fn cell_gradients_match_finite_differences() {
    let mut rng = rng_from_seed(7);
    for index in 0..40 {
        let kind = random_kind(&mut rng, index % 2 == 0);
        let hidden = rng.random_range(1..=6);
        let input = if matches!(
            kind,
            CellKind::Rnn {
                input: RnnInput::Identity,
                ..
            }
        ) {
            hidden
        } else {
            rng.random_range(1..=5)
        };
        let batch = 2;
        let mut p = CellParams::zeros(kind, input, hidden).unwrap();
        p.w.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        p.b.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        let x = rand_matrix(&mut rng, batch, input);
        let s = CellState {
            h: rand_matrix(&mut rng, batch, hidden),
            c: kind.is_lstm().then(|| rand_matrix(&mut rng, batch, hidden)),
        };
        // Scalar objective: <gh, h'> + <gc, c'>.
        let gh = rand_matrix(&mut rng, batch, hidden);
        let gc = kind.is_lstm().then(|| rand_matrix(&mut rng, batch, hidden));
        let objective = |p: &CellParams, x: &Matrix, s: &CellState| {
            let (n, _) = cell_forward(p, x, s).unwrap();
            let mut v: f64 =
                n.h.as_slice()
                    .iter()
                    .zip(gh.as_slice())
                    .map(|(a, b)| a * b)
                    .sum();
            if let (Some(c), Some(g)) = (&n.c, &gc) {
                v += c
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            v
        };
        let (_, tape) = cell_forward(&p, &x, &s).unwrap();
        let g = cell_backward(&p, &tape, &gh, gc.as_ref()).unwrap();

        let fd = |f: &dyn Fn(f64) -> f64| (f(FD_EPS) - f(-FD_EPS)) / (2.0 * FD_EPS);
        for k in 0..p.w.as_slice().len() {
            let n = fd(&|d| {
                let mut q = p.clone();
                q.w.as_mut_slice()[k] += d;
                objective(&q, &x, &s)
            });
            assert!(
                rel_err(g.params.w.as_slice()[k], n) < FD_TOL,
                "{} W[{k}]",
                kind.name()
            );
        }
        for k in 0..p.b.len() {
            let n = fd(&|d| {
                let mut q = p.clone();
                q.b.as_mut_slice()[k] += d;
                objective(&q, &x, &s)
            });
            assert!(
                rel_err(g.params.b.as_slice()[k], n) < FD_TOL,
                "{} b[{k}]",
                kind.name()
            );
        }
        for k in 0..x.as_slice().len() {
            let n = fd(&|d| {
                let mut y = x.clone();
                y.as_mut_slice()[k] += d;
                objective(&p, &y, &s)
            });
            assert!(
                rel_err(g.x.as_slice()[k], n) < FD_TOL,
                "{} x[{k}]",
                kind.name()
            );
        }
        for k in 0..s.h.as_slice().len() {
            let n = fd(&|d| {
                let mut t = s.clone();
                t.h.as_mut_slice()[k] += d;
                objective(&p, &x, &t)
            });
            assert!(
                rel_err(g.state.h.as_slice()[k], n) < FD_TOL,
                "{} h[{k}]",
                kind.name()
            );
            if let Some(c) = &g.state.c {
                let n = fd(&|d| {
                    let mut t = s.clone();
                    t.c.as_mut().unwrap().as_mut_slice()[k] += d;
                    objective(&p, &x, &t)
                });
                assert!(
                    rel_err(c.as_slice()[k], n) < FD_TOL,
                    "{} c[{k}]",
                    kind.name()
                );
            }
        }
    }
}
