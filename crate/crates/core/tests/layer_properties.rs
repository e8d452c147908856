mod common;

use common::{layer_kinds as kinds, rand_matrix, random_layer, random_states};
use parallel_cells::cells::{cell_forward, CellKind};
use parallel_cells::pc_layer::{
    build_layer, count_params, pc_backward, pc_forward, MaskSet, Routing,
};
use parallel_cells::rng_from_seed;
use proptest::prelude::*;

#[test]
fn backward_is_linear_in_upstream_gradient() {
    let mut rng = rng_from_seed(15);
    for kind in kinds() {
        for wide in [1, 2, 3] {
            let layer = random_layer(&mut rng, kind, wide * 2, wide * 3, wide, Routing::Split);
            let x = rand_matrix(&mut rng, 2, wide * 2);
            let states = random_states(&mut rng, &layer, 2);
            let (_, _, tape) = pc_forward(&layer, &x, &states, &MaskSet::empty()).unwrap();
            let g1 = rand_matrix(&mut rng, 2, wide * 3);
            let g2 = rand_matrix(&mut rng, 2, wide * 3);
            let (a, b) = (0.7, -1.3);
            let mut mix = g1.clone();
            mix.scale(a);
            let mut g2b = g2.clone();
            g2b.scale(b);
            mix.add_assign(&g2b);
            let r1 = pc_backward(&layer, &tape, &g1, None).unwrap();
            let r2 = pc_backward(&layer, &tape, &g2, None).unwrap();
            let rm = pc_backward(&layer, &tape, &mix, None).unwrap();
            let close = |m: &[f64], u: &[f64], v: &[f64]| {
                for ((x, y), z) in m.iter().zip(u).zip(v) {
                    let expect = a * y + b * z;
                    assert!(
                        (x - expect).abs() <= 1e-10 * expect.abs().max(1.0),
                        "{x} vs {expect}"
                    );
                }
            };
            close(rm.x.as_slice(), r1.x.as_slice(), r2.x.as_slice());
            for i in 0..wide {
                let (cm, c1, c2) = (&rm.layer.cells[i], &r1.layer.cells[i], &r2.layer.cells[i]);
                close(cm.w.as_slice(), c1.w.as_slice(), c2.w.as_slice());
                close(cm.b.as_slice(), c1.b.as_slice(), c2.b.as_slice());
                close(
                    rm.states[i].h.as_slice(),
                    r1.states[i].h.as_slice(),
                    r2.states[i].h.as_slice(),
                );
            }
        }
    }
}

#[test]
fn masking_is_idempotent_and_empty_mask_is_identity() {
    let mut rng = rng_from_seed(16);
    let layer = random_layer(&mut rng, CellKind::Lstm, 6, 6, 3, Routing::Split);
    let x = rand_matrix(&mut rng, 2, 6);
    let states = random_states(&mut rng, &layer, 2);
    let mask = MaskSet::from_indices([0, 2]);
    let once = pc_forward(&layer, &x, &states, &mask).unwrap();
    let twice = pc_forward(&layer, &x, &states, &mask.union(&mask)).unwrap();
    assert_eq!(once.0, twice.0);
    assert_eq!(once.1, twice.1);
    // Feeding the masked output state back through the same mask changes nothing.
    let again = pc_forward(&layer, &x, &once.0, &mask).unwrap();
    for i in [0, 2] {
        assert!(again.0[i].h.as_slice().iter().all(|&v| v == 0.0));
        assert!(again
            .1
            .col_block(i * 2, 2)
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
    }
    assert_eq!(
        again.1.col_block(2, 2),
        pc_forward(&layer, &x, &once.0, &MaskSet::empty())
            .unwrap()
            .1
            .col_block(2, 2)
    );

    let plain = pc_forward(&layer, &x, &states, &MaskSet::empty()).unwrap();
    let mut manual = Vec::new();
    for (i, (cell, s)) in layer.cells.iter().zip(&states).enumerate() {
        manual.push(cell_forward(cell, &x.col_block(i * 2, 2), s).unwrap().0);
    }
    assert_eq!(plain.0, manual);
    assert!(pc_forward(&layer, &x, &states, &MaskSet::single(3)).is_err());
}

#[test]
fn masked_cells_receive_no_gradient() {
    let mut rng = rng_from_seed(17);
    let layer = random_layer(&mut rng, CellKind::Lstm, 6, 6, 3, Routing::Full);
    let x = rand_matrix(&mut rng, 2, 6);
    let states = random_states(&mut rng, &layer, 2);
    let (_, _, tape) = pc_forward(&layer, &x, &states, &MaskSet::single(1)).unwrap();
    let g = pc_backward(&layer, &tape, &rand_matrix(&mut rng, 2, 6), None).unwrap();
    assert!(g.layer.cells[1].w.as_slice().iter().all(|&v| v == 0.0));
    assert!(g.states[1].h.as_slice().iter().all(|&v| v == 0.0));
    assert!(g.layer.cells[0].w.as_slice().iter().any(|&v| v != 0.0));
}

#[test]
fn thread_count_does_not_change_results() {
    let mut rng = rng_from_seed(18);
    let layer = random_layer(&mut rng, CellKind::Lstm, 12, 12, 4, Routing::Full);
    let x = rand_matrix(&mut rng, 3, 12);
    let states = random_states(&mut rng, &layer, 3);
    let gh = rand_matrix(&mut rng, 3, 12);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let (n, h, tape) = pc_forward(&layer, &x, &states, &MaskSet::empty()).unwrap();
            let g = pc_backward(&layer, &tape, &gh, None).unwrap();
            (n, h, g.layer, g.x, g.states)
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn forward_equals_per_cell_composition_and_cells_are_isolated() {
    let layers = common::check_independence(11, &[2, 3, 5]).unwrap_or_else(|e| panic!("{e}"));
    assert_eq!(layers, 18);
}

#[test]
fn wide_one_layer_matches_bare_cell() {
    common::check_wide_one(13).unwrap_or_else(|e| panic!("{e}"));
}

proptest! {
    #[test]
    fn split_lstm_count_matches_closed_form(per in 1usize..12, n in 1usize..6) {
        let m = per * n;
        let layer = build_layer(CellKind::Lstm, m, m, n, Routing::Split).unwrap();
        prop_assert_eq!(count_params(&layer), parallel_cells::pc_layer::closed_form_lstm(m, n));
    }

    #[test]
    fn split_count_strictly_decreases_in_wide(m in 2usize..60) {
        let divisors: Vec<usize> = (1..=m).filter(|d| m % d == 0).collect();
        let counts: Vec<usize> = divisors
            .iter()
            .map(|&n| count_params(&build_layer(CellKind::Lstm, m, m, n, Routing::Split).unwrap()))
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[1] < w[0]));
    }
}
