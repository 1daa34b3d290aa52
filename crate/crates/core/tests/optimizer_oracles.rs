// Oracles index explicitly to stay close to the textbook definitions.
#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sketchhash_core::data::{generate_synthetic, SyntheticSpec};
use sketchhash_core::hash::{Activation, HashModelParams, ModelDims};
use sketchhash_core::numerics::DenseMatrix;
use sketchhash_core::optimizer::{
    fit, side_objective, state_objective, update_codes, update_dictionary, BitUpdateWorkspace,
    CodeProblem, CodeState, Dictionary, Step,
};
use sketchhash_core::{CodeMatrix, OptimizerConfig, SemanticEmbedding, SgdConfig, Side};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn pm_one(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(
        rows,
        cols,
        |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 },
    )
}

struct Instance {
    state: CodeState,
    problem: CodeProblem,
    lambda: f64,
    gamma: f64,
}

fn instance(m: usize, d: usize, n1: usize, n2: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = CodeState {
        image_codes: CodeMatrix::random(m, n1, &mut rng),
        sketch_codes: CodeMatrix::random(m, n2, &mut rng),
        dict: Dictionary {
            d_mat: gaussian(d, m, &mut rng),
        },
        f_image: gaussian(m, n1, &mut rng),
        f_sketch: gaussian(m, n2, &mut rng),
    };
    let problem = CodeProblem {
        w: pm_one(n1, n2, &mut rng),
        phi_image: gaussian(d, n1, &mut rng),
        phi_sketch: gaussian(d, n2, &mut rng),
    };
    Instance {
        state,
        problem,
        lambda: rng.random_range(0.01..2.0),
        gamma: rng.random_range(1e-5..0.5),
    }
}

fn total(inst: &Instance) -> f64 {
    state_objective(&inst.state, &inst.problem, inst.lambda, inst.gamma)
        .unwrap()
        .total
}

fn drop_index(v: usize, n: usize) -> Vec<usize> {
    (0..n).filter(|&i| i != v).collect()
}

// Sign argument of row k written with explicit excluded-row matrices and
// plain loops, independently of the workspace's Gram caches.
fn naive_row_argument(side: Side, inst: &Instance, own: &CodeMatrix, k: usize) -> Vec<f64> {
    let st = &inst.state;
    let p = &inst.problem;
    let (opp, phi, f) = match side {
        Side::Image => (&st.sketch_codes, &p.phi_image, &st.f_image),
        Side::Sketch => (&st.image_codes, &p.phi_sketch, &st.f_sketch),
    };
    let m = own.bits();
    let n = own.samples();
    let n_opp = opp.samples();
    let d = &st.dict.d_mat;
    let rest = drop_index(k, m);

    let w_at = |i: usize, j: usize| match side {
        Side::Image => p.w[(i, j)],
        Side::Sketch => p.w[(j, i)],
    };
    (0..n)
        .map(|i| {
            // R = m·B_opp·W' + λ·Dᵀφ + γ·F at (k, i)
            let mut r = 0.0;
            for j in 0..n_opp {
                r += m as f64 * opp.get(k, j) as f64 * w_at(i, j);
            }
            for a in 0..d.rows() {
                r += inst.lambda * d[(a, k)] * phi[(a, i)];
            }
            r += inst.gamma * f[(k, i)];

            // b_opp_k · B̂_oppᵀ · B̂_own[:, i]
            let mut pair = 0.0;
            for &l in &rest {
                let mut g = 0.0;
                for j in 0..n_opp {
                    g += opp.get(k, j) as f64 * opp.get(l, j) as f64;
                }
                pair += g * own.get(l, i) as f64;
            }
            // d_kᵀ · D̂ · B̂_own[:, i]
            let mut sem = 0.0;
            for &l in &rest {
                let mut g = 0.0;
                for a in 0..d.rows() {
                    g += d[(a, k)] * d[(a, l)];
                }
                sem += g * own.get(l, i) as f64;
            }
            r - pair - inst.lambda * sem
        })
        .collect()
}

fn naive_sweep(side: Side, inst: &Instance) -> CodeMatrix {
    let mut own = match side {
        Side::Image => inst.state.image_codes.clone(),
        Side::Sketch => inst.state.sketch_codes.clone(),
    };
    for k in 0..own.bits() {
        let arg = naive_row_argument(side, inst, &own, k);
        for (i, a) in arg.into_iter().enumerate() {
            if a > 0.0 {
                own.set(k, i, 1);
            } else if a < 0.0 {
                own.set(k, i, -1);
            }
        }
    }
    own
}

// Per-entry choice by direct objective evaluation: the objective is linear in
// a row, so each entry is optimal on its own given the other rows.
fn brute_force_sweep(side: Side, inst: &mut Instance) -> CodeMatrix {
    let m = inst.state.image_codes.bits();
    for k in 0..m {
        let n = match side {
            Side::Image => inst.state.image_codes.samples(),
            Side::Sketch => inst.state.sketch_codes.samples(),
        };
        let mut choices = Vec::with_capacity(n);
        for i in 0..n {
            let value = |b: i8, inst: &mut Instance| {
                let own = match side {
                    Side::Image => &mut inst.state.image_codes,
                    Side::Sketch => &mut inst.state.sketch_codes,
                };
                let old = own.get(k, i);
                own.set(k, i, b);
                let v = total(inst);
                let own = match side {
                    Side::Image => &mut inst.state.image_codes,
                    Side::Sketch => &mut inst.state.sketch_codes,
                };
                own.set(k, i, old);
                v
            };
            let plus = value(1, inst);
            let minus = value(-1, inst);
            choices.push(if plus < minus { 1 } else { -1 });
        }
        let own = match side {
            Side::Image => &mut inst.state.image_codes,
            Side::Sketch => &mut inst.state.sketch_codes,
        };
        for (i, c) in choices.into_iter().enumerate() {
            own.set(k, i, c);
        }
    }
    match side {
        Side::Image => inst.state.image_codes.clone(),
        Side::Sketch => inst.state.sketch_codes.clone(),
    }
}

#[test]
fn sweep_matches_excluded_row_formula() {
    for seed in 0..30 {
        for side in [Side::Image, Side::Sketch] {
            let inst = instance(6, 5, 9, 7, seed);
            let expected = naive_sweep(side, &inst);
            let ws = BitUpdateWorkspace::build(
                side,
                &inst.state,
                &inst.problem,
                inst.lambda,
                inst.gamma,
            )
            .unwrap();
            let mut own = match side {
                Side::Image => inst.state.image_codes.clone(),
                Side::Sketch => inst.state.sketch_codes.clone(),
            };
            ws.sweep(&mut own);
            assert_eq!(own, expected, "seed {seed} side {side:?}");
        }
    }
}

#[test]
fn sweep_matches_brute_force_objective() {
    for seed in 100..120 {
        for side in [Side::Image, Side::Sketch] {
            let mut inst = instance(5, 4, 7, 6, seed);
            let mut fast = inst.state.clone();
            update_codes(side, &mut fast, &inst.problem, inst.lambda, inst.gamma, 1).unwrap();
            let slow = brute_force_sweep(side, &mut inst);
            let got = match side {
                Side::Image => fast.image_codes,
                Side::Sketch => fast.sketch_codes,
            };
            assert_eq!(got, slow, "seed {seed} side {side:?}");
        }
    }
}

#[test]
fn sweeps_never_increase_the_objective() {
    for seed in 0..100 {
        let mut inst = instance(8, 6, 16, 16, 1000 + seed);
        let mut prev = total(&inst);
        for round in 0..4 {
            for side in [Side::Image, Side::Sketch] {
                let before_side =
                    side_objective(side, &inst.state, &inst.problem, inst.lambda, inst.gamma)
                        .unwrap();
                update_codes(
                    side,
                    &mut inst.state,
                    &inst.problem,
                    inst.lambda,
                    inst.gamma,
                    1,
                )
                .unwrap();
                let after_side =
                    side_objective(side, &inst.state, &inst.problem, inst.lambda, inst.gamma)
                        .unwrap();
                let now = total(&inst);
                let tol = 1e-9 * prev.abs().max(1.0);
                assert!(
                    now <= prev + tol,
                    "seed {seed} round {round}: {prev} -> {now}"
                );
                assert!(after_side <= before_side + tol);
                prev = now;
            }
        }
    }
}

fn run_to_fixed_point(inst: &mut Instance) {
    for _ in 0..200 {
        let (dict, _) = update_dictionary(
            &inst.state.image_codes,
            &inst.state.sketch_codes,
            &inst.problem.phi_image,
            &inst.problem.phi_sketch,
        )
        .unwrap();
        inst.state.dict = dict;
        let a = update_codes(
            Side::Image,
            &mut inst.state,
            &inst.problem,
            inst.lambda,
            inst.gamma,
            50,
        )
        .unwrap();
        let b = update_codes(
            Side::Sketch,
            &mut inst.state,
            &inst.problem,
            inst.lambda,
            inst.gamma,
            50,
        )
        .unwrap();
        if a + b == 0 {
            return;
        }
    }
    panic!("no fixed point within 200 rounds");
}

#[test]
fn fixed_point_admits_no_improving_single_flip() {
    for seed in 0..25 {
        let mut inst = instance(4, 3, 6, 6, 5000 + seed);
        run_to_fixed_point(&mut inst);
        let base = total(&inst);
        for side in [Side::Image, Side::Sketch] {
            for k in 0..4 {
                for i in 0..6 {
                    let mut flipped = inst.state.clone();
                    match side {
                        Side::Image => flipped.image_codes.flip(k, i),
                        Side::Sketch => flipped.sketch_codes.flip(k, i),
                    }
                    let v = state_objective(&flipped, &inst.problem, inst.lambda, inst.gamma)
                        .unwrap()
                        .total;
                    assert!(
                        v >= base - 1e-12 * base.abs().max(1.0),
                        "seed {seed} {side:?} ({k},{i}): {v} < {base}"
                    );
                }
            }
        }
    }
}

#[test]
fn image_and_sketch_updates_are_mirror_images() {
    // Swapping the modalities and transposing W must swap the two updates.
    for seed in 0..20 {
        let inst = instance(6, 4, 8, 5, 7000 + seed);
        let swapped = Instance {
            state: CodeState {
                image_codes: inst.state.sketch_codes.clone(),
                sketch_codes: inst.state.image_codes.clone(),
                dict: inst.state.dict.clone(),
                f_image: inst.state.f_sketch.clone(),
                f_sketch: inst.state.f_image.clone(),
            },
            problem: CodeProblem {
                w: inst.problem.w.transpose(),
                phi_image: inst.problem.phi_sketch.clone(),
                phi_sketch: inst.problem.phi_image.clone(),
            },
            lambda: inst.lambda,
            gamma: inst.gamma,
        };
        let mut a = inst.state.clone();
        update_codes(
            Side::Image,
            &mut a,
            &inst.problem,
            inst.lambda,
            inst.gamma,
            1,
        )
        .unwrap();
        let mut b = swapped.state.clone();
        update_codes(
            Side::Sketch,
            &mut b,
            &swapped.problem,
            swapped.lambda,
            swapped.gamma,
            1,
        )
        .unwrap();
        assert_eq!(a.image_codes, b.sketch_codes);
    }
}

// Gaussian elimination with partial pivoting on X·G = N, solved row by row
// through the transposed system Gᵀ·xᵀ = nᵀ.
fn normal_equations_oracle(gram: &DenseMatrix, numer: &DenseMatrix) -> DenseMatrix {
    let m = gram.rows();
    let mut out = DenseMatrix::zeros(numer.rows(), m);
    for r in 0..numer.rows() {
        let mut a: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..m).map(|j| gram[(j, i)]).collect())
            .collect();
        let mut b: Vec<f64> = numer.row(r).to_vec();
        for col in 0..m {
            let piv = (col..m)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..m {
                let f = a[row][col] / a[col][col];
                for c in col..m {
                    a[row][c] -= f * a[col][c];
                }
                b[row] -= f * b[col];
            }
        }
        for col in (0..m).rev() {
            let mut s = b[col];
            for c in col + 1..m {
                s -= a[col][c] * out[(r, c)];
            }
            out.row_mut(r)[col] = s / a[col][col];
        }
    }
    out
}

fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let num: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let den: f64 = b.as_slice().iter().map(|y| y * y).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

fn naive_nt(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), b.rows(), |i, j| {
        (0..a.cols()).map(|t| a[(i, t)] * b[(j, t)]).sum()
    })
}

#[test]
fn dictionary_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (m, d, n) = (8, 16, 32);
        let bi = CodeMatrix::random(m, n, &mut rng);
        let bs = CodeMatrix::random(m, n, &mut rng);
        let phi_i = gaussian(d, n, &mut rng);
        let phi_s = gaussian(d, n, &mut rng);
        let (dict, ridge) = update_dictionary(&bi, &bs, &phi_i, &phi_s).unwrap();
        assert_eq!(ridge, 0.0);
        let (bid, bsd) = (bi.to_dense(), bs.to_dense());
        let gram = naive_nt(&bid, &bid).add(&naive_nt(&bsd, &bsd)).unwrap();
        let numer = naive_nt(&phi_i, &bid).add(&naive_nt(&phi_s, &bsd)).unwrap();
        let oracle = normal_equations_oracle(&gram, &numer);
        let e = rel_err(&dict.d_mat, &oracle);
        assert!(e <= 1e-8, "{e}");
    }
}

#[test]
fn dictionary_is_a_least_squares_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let semantic = |d: &DenseMatrix,
                    bi: &DenseMatrix,
                    bs: &DenseMatrix,
                    pi: &DenseMatrix,
                    ps: &DenseMatrix| {
        let r1 = pi
            .sub(&sketchhash_core::numerics::matmul(d, bi).unwrap())
            .unwrap();
        let r2 = ps
            .sub(&sketchhash_core::numerics::matmul(d, bs).unwrap())
            .unwrap();
        sketchhash_core::numerics::frob_sq(&r1) + sketchhash_core::numerics::frob_sq(&r2)
    };
    for _ in 0..20 {
        let bi = CodeMatrix::random(6, 20, &mut rng);
        let bs = CodeMatrix::random(6, 15, &mut rng);
        let pi = gaussian(10, 20, &mut rng);
        let ps = gaussian(10, 15, &mut rng);
        let (dict, _) = update_dictionary(&bi, &bs, &pi, &ps).unwrap();
        let (bid, bsd) = (bi.to_dense(), bs.to_dense());
        let best = semantic(&dict.d_mat, &bid, &bsd, &pi, &ps);
        for _ in 0..10 {
            let e = gaussian(10, 6, &mut rng).scale(1e-3);
            let moved = dict.d_mat.add(&e).unwrap();
            assert!(semantic(&moved, &bid, &bsd, &pi, &ps) >= best);
        }
    }
}

fn small_fit(seed: u64) -> sketchhash_core::FitOutput {
    let data = generate_synthetic(&SyntheticSpec {
        n_images: 60,
        n_sketches: 30,
        image_dim: 12,
        sketch_dim: 10,
        classes: 3,
        seed,
        ..Default::default()
    })
    .unwrap();
    let emb = SemanticEmbedding::synthetic(8, 3, seed).unwrap();
    let cfg = OptimizerConfig {
        bits: 8,
        epochs: 4,
        seed,
        convergence_tol: 0.0,
        ..Default::default()
    };
    let params =
        HashModelParams::init(ModelDims::new(12, 10, 16, 8), Activation::Tanh, seed).unwrap();
    fit(
        &data,
        &emb,
        params,
        &cfg,
        &SgdConfig {
            seed,
            ..Default::default()
        },
    )
    .unwrap()
}

#[test]
fn fit_is_deterministic() {
    let a = small_fit(4);
    let b = small_fit(4);
    assert_eq!(a.image_codes, b.image_codes);
    assert_eq!(a.sketch_codes, b.sketch_codes);
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    let c = small_fit(5);
    assert_ne!(a.image_codes, c.image_codes);
}

#[test]
fn fit_trace_decreases_over_code_and_dictionary_steps() {
    let out = small_fit(11);
    assert_eq!(out.trace.len(), 1 + 4 * 4);
    assert_eq!(out.trace[0].step, Step::Init);
    for w in out.trace.windows(2) {
        if w[1].step != Step::HashFunctions {
            let tol = 1e-9 * w[0].objective.total.abs().max(1.0);
            assert!(
                w[1].objective.total <= w[0].objective.total + tol,
                "{:?} -> {:?}",
                w[0],
                w[1]
            );
        }
    }
}
