use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::grad_check;
use crate::nets::{ActionSpace, NetConfig};

/// Closed-form unit-square-to-quadrilateral map composed with the scaling
/// of the fixed rectangle; shares no code with the 8×8 solve.
pub(crate) fn square_to_quad_oracle(offsets: &[f64; 8], rows: usize, cols: usize) -> [f64; 9] {
    let c = corners(rows, cols);
    let x: Vec<f64> = (0..4).map(|k| c[k].0 + offsets[2 * k]).collect();
    let y: Vec<f64> = (0..4).map(|k| c[k].1 + offsets[2 * k + 1]).collect();
    let sx = x[0] - x[1] + x[2] - x[3];
    let sy = y[0] - y[1] + y[2] - y[3];
    let (dx1, dx2, dy1, dy2) = (x[1] - x[2], x[3] - x[2], y[1] - y[2], y[3] - y[2]);
    let den = dx1 * dy2 - dx2 * dy1;
    let g = (sx * dy2 - dx2 * sy) / den;
    let h = (dx1 * sy - sx * dy1) / den;
    let q = [
        x[1] - x[0] + g * x[1],
        x[3] - x[0] + h * x[3],
        x[0],
        y[1] - y[0] + g * y[1],
        y[3] - y[0] + h * y[3],
        y[0],
        g,
        h,
        1.0,
    ];
    let (sr, sc) = (1.0 / (rows - 1) as f64, 1.0 / (cols - 1) as f64);
    let mut m = [0.0; 9];
    for r in 0..3 {
        m[r * 3] = q[r * 3] * sr;
        m[r * 3 + 1] = q[r * 3 + 1] * sc;
        m[r * 3 + 2] = q[r * 3 + 2];
    }
    m
}

fn random_quad(rng: &mut ChaCha8Rng, scale: f64) -> [f64; 8] {
    let mut o = [0.0; 8];
    o.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    o
}

fn random_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> PatchGrid {
    PatchGrid::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn shift_reference(g: &PatchGrid, du: i64, dv: i64) -> PatchGrid {
    let mut out = PatchGrid::filled(g.rows(), g.cols(), VACANT);
    for i in 0..g.rows() as i64 {
        for j in 0..g.cols() as i64 {
            let (si, sj) = (i - du, j - dv);
            if si >= 0 && sj >= 0 && si < g.rows() as i64 && sj < g.cols() as i64 {
                out.set(i as usize, j as usize, g.get(si as usize, sj as usize));
            }
        }
    }
    out
}

#[test]
fn zero_offsets_are_exact_identity() {
    let h = solve_homography(&[0.0; 8], 16, 16).unwrap();
    assert_eq!(h, Homography::IDENTITY);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = random_grid(&mut rng, 16, 16);
    assert_eq!(warp(&g, &h).unwrap(), g);
}

#[test]
fn uniform_offsets_translate_along_their_own_axis() {
    let h = solve_homography(&[2.0, 0.0, 2.0, 0.0, 2.0, 0.0, 2.0, 0.0], 16, 16).unwrap();
    assert_eq!((h.0[2], h.0[5]), (2.0, 0.0));
    let h = solve_homography(&[0.0, 2.0, 0.0, 2.0, 0.0, 2.0, 0.0, 2.0], 16, 16).unwrap();
    assert_eq!((h.0[2], h.0[5]), (0.0, 2.0));
    for (k, &(u, v)) in corners(16, 16).iter().enumerate() {
        let (up, vp) = h.apply(u, v).unwrap();
        assert_eq!((up, vp), (u, v + 2.0), "corner {k}");
    }
}

#[test]
fn solve_matches_the_closed_form_oracle() {
    let off = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let h = solve_homography(&off, 16, 16).unwrap();
    let o = square_to_quad_oracle(&off, 16, 16);
    for k in 0..9 {
        assert!((h.0[k] - o[k]).abs() < 1e-8, "{k}: {} vs {}", h.0[k], o[k]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let off = random_quad(&mut rng, 3.0);
        let h = solve_homography(&off, 16, 16).unwrap();
        let o = square_to_quad_oracle(&off, 16, 16);
        for k in 0..9 {
            assert!((h.0[k] - o[k]).abs() < 1e-8);
        }
        for (k, &(u, v)) in corners(16, 16).iter().enumerate() {
            let (up, vp) = h.apply(u, v).unwrap();
            assert!((up - u - off[2 * k]).abs() < 1e-6 && (vp - v - off[2 * k + 1]).abs() < 1e-6);
        }
        assert!(h.det().abs() > 1e-9);
    }
}

#[test]
fn degenerate_quadrilateral_is_rejected_with_condition() {
    // Collapse every corner onto the origin.
    let c = corners(5, 5);
    let mut off = [0.0; 8];
    for k in 0..4 {
        off[2 * k] = -c[k].0;
        off[2 * k + 1] = -c[k].1 + if k == 1 { 1e-3 } else { 0.0 };
    }
    match solve_homography(&off, 5, 5) {
        Err(HomographyError::Singular { condition }) => assert!(condition > 1e12),
        other => panic!("{other:?}"),
    }
    assert!(solve_homography(&[f64::NAN; 8], 5, 5).is_err());
}

#[test]
fn integer_translations_match_index_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = random_grid(&mut rng, 5, 5);
    for du in -2i64..=2 {
        for dv in -2i64..=2 {
            let off = [du as f64, dv as f64].repeat(4);
            let h = solve_homography(off.as_slice().try_into().unwrap(), 5, 5).unwrap();
            assert_eq!(warp(&g, &h).unwrap(), shift_reference(&g, du, dv), "({du},{dv})");
        }
    }
    let h = Homography::translation(6.0, 0.0);
    assert!(warp(&g, &h).unwrap().data().iter().all(|&v| v == VACANT));
}

#[test]
fn sub_cell_shift_fades_the_edge_toward_the_fill() {
    let g = PatchGrid::new(2, 3, vec![1.0, 0.0, 0.2, 0.4, 0.6, 0.8]).unwrap();
    let out = warp(&g, &Homography::translation(0.25, 0.0)).unwrap();
    let want = [
        0.25 * VACANT + 0.75 * 1.0,
        0.25 * VACANT,
        0.25 * VACANT + 0.75 * 0.2,
        0.25 * 1.0 + 0.75 * 0.4,
        0.25 * 0.0 + 0.75 * 0.6,
        0.25 * 0.2 + 0.75 * 0.8,
    ];
    for (a, b) in out.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{:?}", out.data());
    }
}

#[test]
fn composition_is_consistent_in_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Smooth content; a binary mask's step edges resample with errors of
    // about 0.05 per in-bounds cell on a 16×16 grid.
    let field: Vec<f64> = (0..256)
        .map(|k| {
            let (i, j) = ((k / 16) as f64, (k % 16) as f64);
            0.5 + 0.5 * (i / 4.0).sin() * (j / 5.0).cos()
        })
        .collect();
    let g = PatchGrid::new(16, 16, field).unwrap();
    for _ in 0..20 {
        let ht = solve_homography(&random_quad(&mut rng, 0.8), 16, 16).unwrap();
        let hs = solve_homography(&random_quad(&mut rng, 0.8), 16, 16).unwrap();
        let twice = warp(&warp(&g, &ht).unwrap(), &hs).unwrap();
        let once = warp(&g, &hs.compose(&ht)).unwrap();
        let mut err = 0.0;
        let mut n = 0;
        for (a, b) in twice.data().iter().zip(once.data()) {
            if *a != VACANT && *b != VACANT {
                err += (a - b).abs();
                n += 1;
            }
        }
        assert!(n > 0 && err / (n as f64) < 0.02, "{}", err / n as f64);
    }
}

#[test]
fn jaccard_examples() {
    let truth = PatchGrid::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    assert_eq!(jaccard_loss(&truth, &truth).unwrap(), 0.0);
    let inv = PatchGrid::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    assert_eq!(jaccard_loss(&inv, &truth).unwrap(), 1.0);
    let mut t = vec![0.0; 256];
    t[..64].iter_mut().for_each(|v| *v = 1.0);
    let half = PatchGrid::filled(16, 16, 0.5);
    let l = jaccard_loss(&half, &PatchGrid::new(16, 16, t).unwrap()).unwrap();
    assert!((l - 0.8).abs() < 1e-12);
    let z = PatchGrid::filled(3, 3, 0.0);
    assert_eq!(jaccard_loss(&z, &z).unwrap(), 0.0);
    assert!(jaccard_loss(&z, &truth).is_err());
}

fn chain(t: &mut Tape, off: Var, src: &[f64], truth: &[f64], mode: SolveGrad) -> Result<Var, AutogradError> {
    let h = solve_on_tape(t, off, 5, 5, mode).map_err(|_| AutogradError::NonFinite { op: "solve" })?;
    let s = t.constant(Tensor::row(src.to_vec()))?;
    let w = warp_on_tape(t, s, h, 5, 5).map_err(|_| AutogradError::NonFinite { op: "warp" })?;
    jaccard_on_tape(t, w, truth)
}

#[test]
fn jaccard_warp_solve_chain_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    while checked < 20 {
        let src: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
        let truth: Vec<f64> = (0..25).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
        let off = Tensor::row(random_quad(&mut rng, 0.7).to_vec());
        for mode in [SolveGrad::Analytic, SolveGrad::FiniteDifference] {
            let err = grad_check(|t, o| chain(t, o, &src, &truth, mode), &off, 1e-6).unwrap();
            let bound = if mode == SolveGrad::Analytic { 1e-3 } else { 1e-2 };
            assert!(err < bound, "{mode:?}: {err}");
        }
        checked += 1;
    }
}

#[test]
fn warp_gradient_with_respect_to_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = solve_homography(&random_quad(&mut rng, 0.6), 5, 5).unwrap();
    let hm = Tensor::new(3, 3, h.0.to_vec()).unwrap();
    let truth: Vec<f64> = (0..25).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let src = Tensor::row((0..25).map(|_| rng.random_range(0.1..0.9)).collect());
    let err = grad_check(
        |t, g| {
            let hv = t.constant(hm.clone())?;
            let w = warp_on_tape(t, g, hv, 5, 5).map_err(|_| AutogradError::NonFinite { op: "warp" })?;
            jaccard_on_tape(t, w, &truth)
        },
        &src,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn tiny_nets(seed: u64) -> CadeNetworks {
    let cfg = NetConfig {
        hidden: 8,
        head: vec![16, 16],
        sdm_out_gain: 0.3,
        ..NetConfig::default()
    };
    CadeNetworks::new(&mut ChaCha8Rng::seed_from_u64(seed), 25, ActionSpace::discrete(5), &cfg)
}

#[test]
fn zero_weight_sdm_predicts_the_current_grid() {
    let mut n = tiny_nets(0);
    n.sdm.zero();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = random_grid(&mut rng, 5, 5);
    assert_eq!(sdm_predict(&g, &[2], &n).unwrap(), g);
    let roll = sdm_rollout(&g, &[vec![1], vec![3]], &n).unwrap();
    assert!(roll.iter().all(|p| p == &g));
}

#[test]
fn sdm_parameter_gradient_matches_finite_differences() {
    let n = tiny_nets(3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs: Vec<Vec<f64>> = (0..3).map(|_| (0..25).map(|_| rng.random_bool(0.5) as u8 as f64).collect()).collect();
    let next: Vec<Vec<f64>> = (0..3).map(|_| (0..25).map(|_| rng.random_bool(0.5) as u8 as f64).collect()).collect();
    let acts = [vec![0usize], vec![2], vec![4]];
    let batch: Vec<(&[f64], &[usize], &[f64])> =
        (0..3).map(|k| (obs[k].as_slice(), acts[k].as_slice(), next[k].as_slice())).collect();
    let last = n.sdm.layers.len() - 1;
    let w0 = n.sdm.layers[last].w.value.clone();
    let err = grad_check(
        |t, w| {
            let mut m = n.clone();
            m.sdm.layers[last].w.value = t.value(w).clone();
            // Route the output layer weight through the checked variable.
            let width = 25 + 5;
            let mut x = Vec::new();
            for (o, a, _) in &batch {
                x.extend_from_slice(o);
                x.extend(m.space.one_hot(Some(a)));
            }
            let mut h = t.constant(Tensor::new(3, width, x)?)?;
            for (i, l) in m.sdm.layers.iter().enumerate() {
                if i == last {
                    let b = t.param(&l.b);
                    h = t.matmul(h, w)?;
                    h = t.add(h, b)?;
                } else {
                    h = l.forward(t, h)?;
                    h = t.tanh(h)?;
                }
            }
            let mut ls = Vec::new();
            for (k, (o, _, nx)) in batch.iter().enumerate() {
                let off = t.slice(h, 0, k, 1)?;
                let src = t.constant(Tensor::row(o.to_vec()))?;
                let hh = solve_on_tape(t, off, 5, 5, SolveGrad::Analytic).map_err(|_| AutogradError::NonFinite { op: "s" })?;
                let p = warp_on_tape(t, src, hh, 5, 5).map_err(|_| AutogradError::NonFinite { op: "w" })?;
                ls.push(jaccard_on_tape(t, p, nx)?);
            }
            let all = t.concat(&ls, 0)?;
            t.mean(all)
        },
        &w0,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");

    // The library batch loss gives the same value as the hand-built graph.
    let mut t = Tape::new();
    let l = sdm_batch_loss(&mut t, &n, &batch, 5, 5, SolveGrad::Analytic).unwrap().unwrap();
    assert!(t.value(l).item().is_finite());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn jaccard_stays_in_unit_interval(p in prop::collection::vec(0.0f64..=1.0, 9), g in prop::collection::vec(0.0f64..=1.0, 9)) {
            let l = jaccard_loss(&PatchGrid::new(3, 3, p).unwrap(), &PatchGrid::new(3, 3, g).unwrap()).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&l));
        }

        #[test]
        fn warp_output_stays_in_unit_interval(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_grid(&mut rng, 6, 6);
            if let Ok(h) = solve_homography(&random_quad(&mut rng, 2.0), 6, 6) {
                let w = warp(&g, &h).unwrap();
                prop_assert!(w.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
