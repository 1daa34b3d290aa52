//! Alternating optimization of the joint binary codes.
//!
//! The objective over codes `BI` (`m x n1`), `BS` (`m x n2`), dictionary `D`
//! (`d x m`) and encoder outputs `F1`, `F2` is
//!
//! ```text
//! ||W*m - BIᵀBS||² + λ(||φI - D·BI||² + ||φS - D·BS||²) + γ(||F1 - BI||² + ||F2 - BS||²)
//! ```
//!
//! Each epoch solves `D` in closed form, sweeps the rows of `BI` then `BS` with
//! exact per-row sign updates, and finally fits the encoders to the new codes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{build_similarity, FeatureDataset, SemanticEmbedding};
use crate::error::{Error, Result};
use crate::hash::{HashModelParams, HashTrainer, SgdConfig};
use crate::numerics::{
    frob_sq, matmul, matmul_nt, matmul_tn, shape_str, solve_spsd_with_fallback, DenseMatrix,
};
use crate::rng::{stream_rng, Stream};

pub use crate::codes::CodeMatrix;

/// Which code matrix an update targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Image,
    Sketch,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Image => "image",
            Side::Sketch => "sketch",
        }
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Side::Image),
            "sketch" => Ok(Side::Sketch),
            other => Err(Error::invalid(format!(
                "side must be image or sketch, got {other:?}"
            ))),
        }
    }
}

/// Shared basis `D` (`d x m`) of the semantic factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub d_mat: DenseMatrix,
}

/// Objective value split into its terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub pairwise: f64,
    /// Both views.
    pub semantic: f64,
    /// Both encoder terms.
    pub quantization: f64,
    pub total: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl ObjectiveBreakdown {
    /// `pairwise + λ·semantic`, the part the D and code steps minimize regardless of `F`.
    pub fn code_terms(&self) -> f64 {
        self.pairwise + self.lambda * self.semantic
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub bits: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub dcc_sweeps: usize,
    pub seed: u64,
    /// Stop when the relative change of the total objective over an epoch drops below this.
    pub convergence_tol: f64,
    /// Disable to keep the encoders frozen (their outputs still enter the objective).
    pub train_hash: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            bits: 32,
            lambda: 0.01,
            gamma: 1e-5,
            epochs: 15,
            dcc_sweeps: 1,
            seed: 0,
            convergence_tol: 1e-6,
            train_hash: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 {
            return Err(Error::invalid("code length must be >= 1 bit"));
        }
        if self.lambda.is_nan() || self.lambda <= 0.0 || self.gamma.is_nan() || self.gamma <= 0.0 {
            return Err(Error::invalid(format!(
                "lambda and gamma must be > 0 (got {}, {})",
                self.lambda, self.gamma
            )));
        }
        if self.epochs == 0 || self.dcc_sweeps == 0 {
            return Err(Error::invalid("epochs and dcc_sweeps must be >= 1"));
        }
        if self.convergence_tol.is_nan() || self.convergence_tol < 0.0 {
            return Err(Error::invalid("convergence_tol must be >= 0"));
        }
        Ok(())
    }
}

/// Fixed inputs of the code problem.
#[derive(Debug, Clone)]
pub struct CodeProblem {
    /// `n1 x n2`, entries `±1`.
    pub w: DenseMatrix,
    /// `d x n1`
    pub phi_image: DenseMatrix,
    /// `d x n2`
    pub phi_sketch: DenseMatrix,
}

/// Mutable variables of the code problem.
#[derive(Debug, Clone)]
pub struct CodeState {
    pub image_codes: CodeMatrix,
    pub sketch_codes: CodeMatrix,
    pub dict: Dictionary,
    /// `F1` outputs, `m x n1`
    pub f_image: DenseMatrix,
    /// `F2` outputs, `m x n2`
    pub f_sketch: DenseMatrix,
}

type Shape = (usize, usize);

impl CodeState {
    fn check(&self, p: &CodeProblem) -> Result<()> {
        let m = self.image_codes.bits();
        let (n1, n2) = (self.image_codes.samples(), self.sketch_codes.samples());
        let d = p.phi_image.rows();
        let checks: [(&str, Shape, Shape); 6] = [
            ("sketch codes", (self.sketch_codes.bits(), n2), (m, n2)),
            ("W", p.w.shape(), (n1, n2)),
            ("phi_image", p.phi_image.shape(), (d, n1)),
            ("phi_sketch", p.phi_sketch.shape(), (d, n2)),
            ("D", self.dict.d_mat.shape(), (d, m)),
            (
                "F outputs",
                (
                    self.f_image.rows() + self.f_sketch.rows(),
                    self.f_image.cols() + self.f_sketch.cols(),
                ),
                (2 * m, n1 + n2),
            ),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Err(Error::shape(
                    what,
                    format!("expected {}x{}", want.0, want.1),
                    format!("got {}x{}", got.0, got.1),
                ));
            }
        }
        Ok(())
    }

    fn codes(&self, side: Side) -> (&CodeMatrix, &CodeMatrix) {
        match side {
            Side::Image => (&self.image_codes, &self.sketch_codes),
            Side::Sketch => (&self.sketch_codes, &self.image_codes),
        }
    }
}

/// Full objective with its terms.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    bi: &CodeMatrix,
    bs: &CodeMatrix,
    dict: &Dictionary,
    phi_image: &DenseMatrix,
    phi_sketch: &DenseMatrix,
    w: &DenseMatrix,
    f_image: &DenseMatrix,
    f_sketch: &DenseMatrix,
    lambda: f64,
    gamma: f64,
) -> Result<ObjectiveBreakdown> {
    let bi_d = bi.to_dense();
    let bs_d = bs.to_dense();
    if bi.bits() != bs.bits() {
        return Err(Error::shape(
            "objective codes",
            shape_str(&bi_d),
            shape_str(&bs_d),
        ));
    }
    let pairwise = pairwise_term(&bi_d, &bs_d, w)?;
    let semantic = frob_sq(&phi_image.sub(&matmul(&dict.d_mat, &bi_d)?)?)
        + frob_sq(&phi_sketch.sub(&matmul(&dict.d_mat, &bs_d)?)?);
    let quantization = frob_sq(&f_image.sub(&bi_d)?) + frob_sq(&f_sketch.sub(&bs_d)?);
    Ok(ObjectiveBreakdown {
        pairwise,
        semantic,
        quantization,
        total: pairwise + lambda * semantic + gamma * quantization,
        lambda,
        gamma,
    })
}

fn pairwise_term(bi: &DenseMatrix, bs: &DenseMatrix, w: &DenseMatrix) -> Result<f64> {
    let m = bi.rows() as f64;
    let inner = matmul_tn(bi, bs)?;
    if inner.shape() != w.shape() {
        return Err(Error::shape("objective W", shape_str(w), shape_str(&inner)));
    }
    Ok(inner
        .as_slice()
        .iter()
        .zip(w.as_slice())
        .map(|(&g, &wij)| (wij * m - g).powi(2))
        .sum())
}

pub fn state_objective(
    state: &CodeState,
    p: &CodeProblem,
    lambda: f64,
    gamma: f64,
) -> Result<ObjectiveBreakdown> {
    objective(
        &state.image_codes,
        &state.sketch_codes,
        &state.dict,
        &p.phi_image,
        &p.phi_sketch,
        &p.w,
        &state.f_image,
        &state.f_sketch,
        lambda,
        gamma,
    )
}

/// Objective restricted to the terms that depend on one side's codes:
/// `pairwise + λ·semantic(side) + γ·quantization(side)`.
///
/// The constant `||B||² = m·n` dropped by the trace form is kept here.
pub fn side_objective(
    side: Side,
    state: &CodeState,
    p: &CodeProblem,
    lambda: f64,
    gamma: f64,
) -> Result<f64> {
    let bi_d = state.image_codes.to_dense();
    let bs_d = state.sketch_codes.to_dense();
    let pairwise = pairwise_term(&bi_d, &bs_d, &p.w)?;
    let (own, phi, f) = match side {
        Side::Image => (&bi_d, &p.phi_image, &state.f_image),
        Side::Sketch => (&bs_d, &p.phi_sketch, &state.f_sketch),
    };
    let semantic = frob_sq(&phi.sub(&matmul(&state.dict.d_mat, own)?)?);
    let quant = frob_sq(&f.sub(own)?);
    Ok(pairwise + lambda * semantic + gamma * quant)
}

/// Closed-form least-squares dictionary:
/// `D = (φI·BIᵀ + φS·BSᵀ)(BI·BIᵀ + BS·BSᵀ)⁻¹`.
///
/// Falls back to a small ridge when the code Gram matrix is singular; the
/// applied ridge is returned alongside.
pub fn update_dictionary(
    bi: &CodeMatrix,
    bs: &CodeMatrix,
    phi_image: &DenseMatrix,
    phi_sketch: &DenseMatrix,
) -> Result<(Dictionary, f64)> {
    let bi_d = bi.to_dense();
    let bs_d = bs.to_dense();
    let numer = matmul_nt(phi_image, &bi_d)?.add(&matmul_nt(phi_sketch, &bs_d)?)?;
    let gram = matmul_nt(&bi_d, &bi_d)?.add(&matmul_nt(&bs_d, &bs_d)?)?;
    let (d_mat, ridge) = solve_spsd_with_fallback(&gram, &numer)?;
    Ok((Dictionary { d_mat }, ridge))
}

/// Per-call state of a bit-wise sweep over one code matrix.
///
/// `r_mat` is `R = B_opp·(W' * m) + λ·Dᵀφ + γ·F` for the side being updated,
/// with `W' = Wᵀ` for images and `W` for sketches. The two Gram matrices hold
/// the inner products needed for the excluded-row terms: row `k` of the
/// opposite codes against every other row, and likewise for the columns of `D`.
#[derive(Debug, Clone)]
pub struct BitUpdateWorkspace {
    pub side: Side,
    pub r_mat: DenseMatrix,
    pub opp_gram: DenseMatrix,
    pub dict_gram: DenseMatrix,
    pub lambda: f64,
}

impl BitUpdateWorkspace {
    pub fn build(
        side: Side,
        state: &CodeState,
        p: &CodeProblem,
        lambda: f64,
        gamma: f64,
    ) -> Result<Self> {
        state.check(p)?;
        let (own, opp) = state.codes(side);
        let m = own.bits() as f64;
        let opp_d = opp.to_dense();
        let (cross, phi, f) = match side {
            Side::Image => (matmul_nt(&opp_d, &p.w)?, &p.phi_image, &state.f_image),
            Side::Sketch => (matmul(&opp_d, &p.w)?, &p.phi_sketch, &state.f_sketch),
        };
        let mut r_mat = cross.scale(m);
        r_mat.axpy(lambda, &matmul_tn(&state.dict.d_mat, phi)?)?;
        r_mat.axpy(gamma, f)?;
        Ok(Self {
            side,
            r_mat,
            opp_gram: matmul_nt(&opp_d, &opp_d)?,
            dict_gram: matmul_tn(&state.dict.d_mat, &state.dict.d_mat)?,
            lambda,
        })
    }

    /// Sign argument for row `k` given the current rows of `own`.
    pub fn row_argument(&self, own: &CodeMatrix, k: usize, out: &mut Vec<f64>) {
        let n = own.samples();
        out.clear();
        out.extend_from_slice(self.r_mat.row(k));
        for l in 0..own.bits() {
            if l == k {
                continue;
            }
            let coef = self.opp_gram[(k, l)] + self.lambda * self.dict_gram[(k, l)];
            if coef == 0.0 {
                continue;
            }
            for (o, &b) in out.iter_mut().zip(own.row(l)) {
                *o -= coef * b as f64;
            }
        }
        debug_assert_eq!(out.len(), n);
    }

    /// One ascending sweep over all rows; returns the number of flipped bits.
    ///
    /// A zero argument keeps the previous bit.
    pub fn sweep(&self, own: &mut CodeMatrix) -> usize {
        let mut arg = Vec::with_capacity(own.samples());
        let mut flips = 0;
        for k in 0..own.bits() {
            self.row_argument(own, k, &mut arg);
            for (b, &a) in own.row_mut(k).iter_mut().zip(&arg) {
                let next = if a > 0.0 {
                    1
                } else if a < 0.0 {
                    -1
                } else {
                    *b
                };
                if next != *b {
                    *b = next;
                    flips += 1;
                }
            }
        }
        flips
    }
}

/// Runs `sweeps` bit-wise sweeps over one side's codes in place.
///
/// `R` is rebuilt once per call; the opposite codes, `D` and `F` stay fixed.
/// Returns the total number of flipped bits.
pub fn update_codes(
    side: Side,
    state: &mut CodeState,
    p: &CodeProblem,
    lambda: f64,
    gamma: f64,
    sweeps: usize,
) -> Result<usize> {
    let ws = BitUpdateWorkspace::build(side, state, p, lambda, gamma)?;
    let own = match side {
        Side::Image => &mut state.image_codes,
        Side::Sketch => &mut state.sketch_codes,
    };
    let mut flips = 0;
    for _ in 0..sweeps {
        let changed = ws.sweep(own);
        flips += changed;
        if changed == 0 {
            break;
        }
    }
    Ok(flips)
}

/// Sub-step after which a trace entry was recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Init,
    Dictionary,
    ImageCodes,
    SketchCodes,
    HashFunctions,
}

impl Step {
    pub fn as_str(self) -> &'static str {
        match self {
            Step::Init => "init",
            Step::Dictionary => "dictionary",
            Step::ImageCodes => "image_codes",
            Step::SketchCodes => "sketch_codes",
            Step::HashFunctions => "hash_functions",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub epoch: usize,
    pub step: Step,
    pub objective: ObjectiveBreakdown,
}

/// Objective trace as CSV: `epoch,step,pairwise,semantic,quantization,total`.
pub fn trace_to_csv(trace: &[TraceEntry]) -> String {
    let mut s = String::from("epoch,step,pairwise,semantic,quantization,total\n");
    for e in trace {
        let o = &e.objective;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.epoch,
            e.step.as_str(),
            o.pairwise,
            o.semantic,
            o.quantization,
            o.total
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub image_codes: CodeMatrix,
    pub sketch_codes: CodeMatrix,
    pub dict: Dictionary,
    pub params: HashModelParams,
    pub trace: Vec<TraceEntry>,
    pub epochs_run: usize,
    /// Largest ridge the dictionary solve needed (0 when never).
    pub max_ridge: f64,
}

/// Builds the fixed problem inputs from a dataset and class embedding.
pub fn build_problem(data: &FeatureDataset, embedding: &SemanticEmbedding) -> Result<CodeProblem> {
    data.validate()?;
    if embedding.num_classes() != data.num_classes {
        return Err(Error::invalid(format!(
            "embedding has {} classes, dataset has {}",
            embedding.num_classes(),
            data.num_classes
        )));
    }
    Ok(CodeProblem {
        w: build_similarity(&data.image_labels, &data.sketch_labels)?.w,
        phi_image: embedding.embed_labels(&data.image_labels)?,
        phi_sketch: embedding.embed_labels(&data.sketch_labels)?,
    })
}

/// Alternating optimization: per epoch `D -> BI -> BS -> encoders`.
///
/// Codes start as seeded Rademacher matrices and `D` as zero. Encoder inputs are
/// standardized with training statistics first. The objective is recorded
/// after every sub-step.
pub fn fit(
    data: &FeatureDataset,
    embedding: &SemanticEmbedding,
    mut params: HashModelParams,
    cfg: &OptimizerConfig,
    sgd: &SgdConfig,
) -> Result<FitOutput> {
    cfg.validate()?;
    if params.bits() != cfg.bits {
        return Err(Error::invalid(format!(
            "model produces {} bits, optimizer configured for {}",
            params.bits(),
            cfg.bits
        )));
    }
    let problem = build_problem(data, embedding)?;
    params.fit_input_scaling(data)?;
    let mut trainer = HashTrainer::new(sgd.clone())?;
    let (lambda, gamma) = (cfg.lambda, cfg.gamma);

    let mut rng = stream_rng(cfg.seed, Stream::CodeInit);
    let image_codes = CodeMatrix::random(cfg.bits, data.n_images(), &mut rng);
    let sketch_codes = CodeMatrix::random(cfg.bits, data.n_sketches(), &mut rng);
    let mut state = CodeState {
        image_codes,
        sketch_codes,
        dict: Dictionary {
            d_mat: DenseMatrix::zeros(embedding.dim(), cfg.bits),
        },
        f_image: params.forward_image(&data.image_features, &data.token_features)?,
        f_sketch: params.forward_sketch(&data.sketch_features)?,
    };

    let mut trace = Vec::with_capacity(1 + 5 * cfg.epochs);
    let mut record = |epoch, step, state: &CodeState| -> Result<ObjectiveBreakdown> {
        let objective = state_objective(state, &problem, lambda, gamma)?;
        trace.push(TraceEntry {
            epoch,
            step,
            objective,
        });
        Ok(objective)
    };
    let mut last_total = record(0, Step::Init, &state)?.total;
    let mut max_ridge: f64 = 0.0;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        let (dict, ridge) = update_dictionary(
            &state.image_codes,
            &state.sketch_codes,
            &problem.phi_image,
            &problem.phi_sketch,
        )?;
        state.dict = dict;
        max_ridge = max_ridge.max(ridge);
        record(epoch, Step::Dictionary, &state)?;

        update_codes(
            Side::Image,
            &mut state,
            &problem,
            lambda,
            gamma,
            cfg.dcc_sweeps,
        )?;
        record(epoch, Step::ImageCodes, &state)?;
        update_codes(
            Side::Sketch,
            &mut state,
            &problem,
            lambda,
            gamma,
            cfg.dcc_sweeps,
        )?;
        let mut end = record(epoch, Step::SketchCodes, &state)?;

        if cfg.train_hash {
            trainer.train_epoch(&mut params, data, &state.image_codes, &state.sketch_codes)?;
            state.f_image = params.forward_image(&data.image_features, &data.token_features)?;
            state.f_sketch = params.forward_sketch(&data.sketch_features)?;
            end = record(epoch, Step::HashFunctions, &state)?;
        }

        let rel = (last_total - end.total).abs() / last_total.abs().max(f64::MIN_POSITIVE);
        last_total = end.total;
        if rel < cfg.convergence_tol {
            break;
        }
    }

    Ok(FitOutput {
        image_codes: state.image_codes,
        sketch_codes: state.sketch_codes,
        dict: state.dict,
        params,
        trace,
        epochs_run,
        max_ridge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn codes(rows: &[&[i8]]) -> CodeMatrix {
        CodeMatrix::from_rows(rows).unwrap()
    }

    fn zero_state(bi: CodeMatrix, bs: CodeMatrix, d: usize) -> CodeState {
        let m = bi.bits();
        CodeState {
            f_image: DenseMatrix::zeros(m, bi.samples()),
            f_sketch: DenseMatrix::zeros(m, bs.samples()),
            image_codes: bi,
            sketch_codes: bs,
            dict: Dictionary {
                d_mat: DenseMatrix::zeros(d, m),
            },
        }
    }

    #[test]
    fn pairwise_hand_examples() {
        let bi = codes(&[&[1, 1]]);
        let bs = codes(&[&[1, -1]]);
        let w = DenseMatrix::from_rows(&[&[1.0, -1.0], &[-1.0, 1.0]]);
        let st = zero_state(bi.clone(), bs.clone(), 1);
        let p = CodeProblem {
            w: w.clone(),
            phi_image: DenseMatrix::zeros(1, 2),
            phi_sketch: DenseMatrix::zeros(1, 2),
        };
        // BIᵀBS = [[1,-1],[1,-1]]: (1-1)² + (-1+1)² + (-1-1)² + (1+1)²
        let o = state_objective(&st, &p, 0.01, 1e-5).unwrap();
        assert_eq!(o.pairwise, 8.0);

        // Aligned with its own similarity pattern the loss vanishes.
        let w_match = DenseMatrix::from_rows(&[&[1.0, -1.0], &[1.0, -1.0]]);
        let p2 = CodeProblem {
            w: w_match,
            ..p.clone()
        };
        assert_eq!(state_objective(&st, &p2, 0.01, 1e-5).unwrap().pairwise, 0.0);
        let mut w_flip = p2.w.clone();
        w_flip[(0, 1)] = 1.0;
        let p3 = CodeProblem { w: w_flip, ..p };
        assert_eq!(state_objective(&st, &p3, 0.01, 1e-5).unwrap().pairwise, 4.0);
    }

    #[test]
    fn identical_single_codes_have_zero_pairwise_and_quantization() {
        let b = codes(&[&[1], &[-1], &[1]]);
        let mut st = zero_state(b.clone(), b.clone(), 2);
        st.f_image = b.to_dense();
        st.f_sketch = b.to_dense();
        let p = CodeProblem {
            w: DenseMatrix::from_rows(&[&[1.0]]),
            phi_image: DenseMatrix::zeros(2, 1),
            phi_sketch: DenseMatrix::zeros(2, 1),
        };
        let o = state_objective(&st, &p, 0.5, 0.25).unwrap();
        assert_eq!(o.pairwise, 0.0);
        assert_eq!(o.quantization, 0.0);
        assert_eq!(
            o.total,
            o.pairwise + 0.5 * o.semantic + 0.25 * o.quantization
        );
    }

    #[test]
    fn dictionary_scalar_example() {
        let (d, ridge) = update_dictionary(
            &codes(&[&[1, 1]]),
            &codes(&[&[1, -1]]),
            &DenseMatrix::from_rows(&[&[2.0, 4.0]]),
            &DenseMatrix::from_rows(&[&[1.0, 3.0]]),
        )
        .unwrap();
        assert_eq!(ridge, 0.0);
        assert!((d.d_mat[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dictionary_recovers_exact_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bi = CodeMatrix::random(4, 12, &mut rng);
        let bs = CodeMatrix::random(4, 9, &mut rng);
        let d0 = DenseMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let phi_i = matmul(&d0, &bi.to_dense()).unwrap();
        let phi_s = matmul(&d0, &bs.to_dense()).unwrap();
        let (d, _) = update_dictionary(&bi, &bs, &phi_i, &phi_s).unwrap();
        let err = frob_sq(&d.d_mat.sub(&d0).unwrap()).sqrt();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn dictionary_on_rank_deficient_codes_uses_ridge() {
        let bi = codes(&[&[1, -1], &[1, -1]]);
        let bs = codes(&[&[1, 1], &[1, 1]]);
        let (d, ridge) = update_dictionary(
            &bi,
            &bs,
            &DenseMatrix::from_rows(&[&[1.0, 2.0]]),
            &DenseMatrix::from_rows(&[&[0.5, 0.5]]),
        )
        .unwrap();
        assert!(ridge > 0.0);
        assert!(d.d_mat.is_finite());
    }

    #[test]
    fn single_bit_update_hand_example() {
        // m = 1: the excluded-row terms are empty, so the update is sign(R).
        let mut st = zero_state(codes(&[&[-1, 1]]), codes(&[&[1, -1]]), 1);
        let p = CodeProblem {
            w: DenseMatrix::from_rows(&[&[1.0, -1.0], &[-1.0, 1.0]]),
            phi_image: DenseMatrix::zeros(1, 2),
            phi_sketch: DenseMatrix::zeros(1, 2),
        };
        update_codes(Side::Image, &mut st, &p, 0.0, 0.0, 1).unwrap();
        assert_eq!(st.image_codes, codes(&[&[1, -1]]));
    }

    #[test]
    fn zero_argument_keeps_previous_bit() {
        // W all -1 against BS = [1, -1] gives R = 0 for every image.
        for start in [1i8, -1] {
            let mut st = zero_state(codes(&[&[start, start]]), codes(&[&[1, -1]]), 1);
            let p = CodeProblem {
                w: DenseMatrix::from_rows(&[&[-1.0, -1.0], &[-1.0, -1.0]]),
                phi_image: DenseMatrix::zeros(1, 2),
                phi_sketch: DenseMatrix::zeros(1, 2),
            };
            let flips = update_codes(Side::Image, &mut st, &p, 0.0, 0.0, 1).unwrap();
            assert_eq!(flips, 0);
            assert_eq!(st.image_codes.row(0), &[start, start]);
        }
    }

    #[test]
    fn update_rejects_shape_mismatch() {
        let mut st = zero_state(codes(&[&[1, 1]]), codes(&[&[1, -1]]), 1);
        let p = CodeProblem {
            w: DenseMatrix::zeros(3, 2),
            phi_image: DenseMatrix::zeros(1, 2),
            phi_sketch: DenseMatrix::zeros(1, 2),
        };
        assert!(matches!(
            update_codes(Side::Image, &mut st, &p, 0.01, 1e-5, 1),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        for bad in [
            OptimizerConfig {
                lambda: 0.0,
                ..Default::default()
            },
            OptimizerConfig {
                gamma: -1.0,
                ..Default::default()
            },
            OptimizerConfig {
                bits: 0,
                ..Default::default()
            },
            OptimizerConfig {
                epochs: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn trace_csv_header() {
        let o = ObjectiveBreakdown {
            pairwise: 1.0,
            semantic: 2.0,
            quantization: 3.0,
            total: 1.5,
            lambda: 0.1,
            gamma: 0.1,
        };
        let csv = trace_to_csv(&[TraceEntry {
            epoch: 2,
            step: Step::ImageCodes,
            objective: o,
        }]);
        assert_eq!(
            csv,
            "epoch,step,pairwise,semantic,quantization,total\n2,image_codes,1,2,3,1.5\n"
        );
    }
}
