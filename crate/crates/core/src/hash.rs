//! Coupled hash encoders on precomputed feature vectors.
//!
//! `F1(image, token)` runs an image encoder and the shared encoder side by side,
//! concatenates both embeddings and maps them through one affine code head.
//! `F2(sketch)` runs the same shared encoder followed by its own head. The shared
//! encoder is a single field of [`HashModelParams`], so both paths read and
//! train one set of weights.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codes::CodeMatrix;
use crate::data::FeatureDataset;
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic, ByteReader};
use crate::numerics::{frob_sq, matmul, matmul_nt, matmul_tn, shape_str, DenseMatrix};
use crate::rng::{stream_rng, Stream};

const CHECKPOINT_MAGIC: &[u8; 4] = b"XMHM";
const CHECKPOINT_VERSION: u32 = 1;

/// Hidden-layer nonlinearity. Output layers are always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Affine map `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
    fn glorot(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            weight: DenseMatrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-a..=a)),
            bias: (0..out_dim).map(|_| rng.random_range(-a..=a)).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn len(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let mut y = matmul(&self.weight, x)?;
        for (r, &b) in self.bias.iter().enumerate() {
            for v in y.row_mut(r) {
                *v += b;
            }
        }
        Ok(y)
    }

    fn param_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weight.rows() * self.weight.cols();
        if i < nw {
            &mut self.weight.as_mut_slice()[i]
        } else {
            &mut self.bias[i - nw]
        }
    }
}

/// Fixed per-feature standardization `(x - mean) * scale` applied before an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct InputScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and inverse standard deviation per row over all columns of `parts`.
    /// Constant features keep scale 1.
    pub fn fit(parts: &[&DenseMatrix]) -> Result<Self> {
        let dim = parts.first().map_or(0, |m| m.rows());
        if parts.iter().any(|m| m.rows() != dim) {
            return Err(Error::invalid("feature blocks disagree on dimension"));
        }
        let n: usize = parts.iter().map(|m| m.cols()).sum();
        if n == 0 {
            return Err(Error::invalid("cannot fit input scaling on zero samples"));
        }
        let mut mean = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        for r in 0..dim {
            let mu = parts.iter().flat_map(|m| m.row(r)).sum::<f64>() / n as f64;
            let var = parts
                .iter()
                .flat_map(|m| m.row(r))
                .map(|v| (v - mu).powi(2))
                .sum::<f64>()
                / n as f64;
            mean[r] = mu;
            if var.sqrt() > 1e-12 {
                scale[r] = 1.0 / var.sqrt();
            }
        }
        Ok(Self { mean, scale })
    }

    pub fn is_identity(&self) -> bool {
        self.mean.iter().all(|&v| v == 0.0) && self.scale.iter().all(|&v| v == 1.0)
    }

    fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut y = x.clone();
        for r in 0..y.rows() {
            let (mu, s) = (self.mean[r], self.scale[r]);
            for v in y.row_mut(r) {
                *v = (*v - mu) * s;
            }
        }
        y
    }
}

/// Parameters of both encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct HashModelParams {
    pub image_encoder: Vec<Layer>,
    /// Used by the token branch of `F1` and by all of `F2`.
    pub shared_encoder: Vec<Layer>,
    /// `2h -> m`, input is `[image embedding; token embedding]`.
    pub fusion_head: Layer,
    /// `h -> m`
    pub sketch_head: Layer,
    pub activation: Activation,
    /// Not trained; set from training features by [`HashModelParams::fit_input_scaling`].
    pub image_scaling: InputScaling,
    /// Shared by tokens and sketches, like the encoder behind it.
    pub shared_scaling: InputScaling,
}

/// Layer sizes of a [`HashModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub image_dim: usize,
    pub sketch_dim: usize,
    pub hidden: usize,
    pub bits: usize,
    pub depth: usize,
}

impl ModelDims {
    pub fn new(image_dim: usize, sketch_dim: usize, hidden: usize, bits: usize) -> Self {
        Self {
            image_dim,
            sketch_dim,
            hidden,
            bits,
            depth: 2,
        }
    }
}

impl HashModelParams {
    pub fn init(dims: ModelDims, activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::ParamInit);
        Self::build(dims, activation, |i, o| Layer::glorot(i, o, &mut rng))
    }

    pub fn zeros(dims: ModelDims, activation: Activation) -> Result<Self> {
        Self::build(dims, activation, Layer::zeros)
    }

    fn build(
        dims: ModelDims,
        activation: Activation,
        mut make: impl FnMut(usize, usize) -> Layer,
    ) -> Result<Self> {
        let ModelDims {
            image_dim,
            sketch_dim,
            hidden,
            bits,
            depth,
        } = dims;
        if image_dim == 0 || sketch_dim == 0 || hidden == 0 || bits == 0 || depth == 0 {
            return Err(Error::invalid(format!(
                "all model dimensions must be >= 1: {dims:?}"
            )));
        }
        let encoder = |input: usize, make: &mut dyn FnMut(usize, usize) -> Layer| {
            (0..depth)
                .map(|i| make(if i == 0 { input } else { hidden }, hidden))
                .collect::<Vec<_>>()
        };
        let image_encoder = encoder(image_dim, &mut make);
        let shared_encoder = encoder(sketch_dim, &mut make);
        let fusion_head = make(2 * hidden, bits);
        let sketch_head = make(hidden, bits);
        Ok(Self {
            image_encoder,
            shared_encoder,
            fusion_head,
            sketch_head,
            activation,
            image_scaling: InputScaling::identity(image_dim),
            shared_scaling: InputScaling::identity(sketch_dim),
        })
    }

    /// Standardizes encoder inputs with statistics of the training features.
    /// Tokens and sketches are pooled for the shared encoder.
    pub fn fit_input_scaling(&mut self, data: &FeatureDataset) -> Result<()> {
        let dims = self.dims();
        if data.image_dim() != dims.image_dim || data.sketch_dim() != dims.sketch_dim {
            return Err(Error::shape(
                "fit_input_scaling",
                format!("model inputs {}/{}", dims.image_dim, dims.sketch_dim),
                format!("data features {}/{}", data.image_dim(), data.sketch_dim()),
            ));
        }
        self.image_scaling = InputScaling::fit(&[&data.image_features])?;
        self.shared_scaling = InputScaling::fit(&[&data.token_features, &data.sketch_features])?;
        Ok(())
    }

    fn scaled<'a>(
        &self,
        scaling: &InputScaling,
        x: &'a DenseMatrix,
    ) -> std::borrow::Cow<'a, DenseMatrix> {
        if scaling.is_identity() {
            std::borrow::Cow::Borrowed(x)
        } else {
            std::borrow::Cow::Owned(scaling.apply(x))
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            image_dim: self.image_encoder[0].in_dim(),
            sketch_dim: self.shared_encoder[0].in_dim(),
            hidden: self.sketch_head.in_dim(),
            bits: self.sketch_head.out_dim(),
            depth: self.shared_encoder.len(),
        }
    }

    pub fn bits(&self) -> usize {
        self.sketch_head.out_dim()
    }

    /// Layers in checkpoint order: image encoder, shared encoder, fusion head, sketch head.
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.image_encoder
            .iter()
            .chain(&self.shared_encoder)
            .chain([&self.fusion_head, &self.sketch_head])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.image_encoder
            .iter_mut()
            .chain(self.shared_encoder.iter_mut())
            .chain([&mut self.fusion_head, &mut self.sketch_head])
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(Layer::len).sum()
    }

    /// All parameters in checkpoint order (each layer: weight row-major, then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in self.layers_mut() {
            if index < l.len() {
                return l.param_mut(index);
            }
            index -= l.len();
        }
        panic!("parameter index out of range");
    }

    fn zip_update(&mut self, other: &Self, f: impl Fn(&mut f64, f64)) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            for (x, &y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                f(x, y);
            }
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                f(x, y);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
            && [&self.image_scaling, &self.shared_scaling]
                .iter()
                .all(|s| s.mean.iter().chain(&s.scale).all(|v| v.is_finite()))
    }

    fn encode_stack(&self, layers: &[Layer], x: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        let mut acts = Vec::with_capacity(layers.len());
        let mut cur = x;
        for layer in layers {
            let mut y = layer.forward(cur)?;
            for v in y.as_mut_slice() {
                *v = self.activation.apply(*v);
            }
            acts.push(y);
            cur = acts.last().unwrap();
        }
        Ok(acts)
    }

    fn check_input(&self, what: &'static str, layers: &[Layer], x: &DenseMatrix) -> Result<()> {
        if x.rows() != layers[0].in_dim() {
            return Err(Error::shape(
                what,
                format!("encoder expects {} features", layers[0].in_dim()),
                format!("input {}", shape_str(x)),
            ));
        }
        Ok(())
    }

    /// Image-side forward pass with intermediate embeddings.
    pub fn forward_image_detailed(
        &self,
        images: &DenseMatrix,
        tokens: &DenseMatrix,
    ) -> Result<ImageForward> {
        self.check_input("forward_image (image branch)", &self.image_encoder, images)?;
        self.check_input("forward_image (token branch)", &self.shared_encoder, tokens)?;
        if images.cols() != tokens.cols() {
            return Err(Error::shape(
                "forward_image pairs",
                format!("{} images", images.cols()),
                format!("{} tokens", tokens.cols()),
            ));
        }
        let image_acts = self.encode_stack(
            &self.image_encoder,
            &self.scaled(&self.image_scaling, images),
        )?;
        let token_acts = self.encode_stack(
            &self.shared_encoder,
            &self.scaled(&self.shared_scaling, tokens),
        )?;
        let fused = concat_rows(image_acts.last().unwrap(), token_acts.last().unwrap());
        let output = self.fusion_head.forward(&fused)?;
        Ok(ImageForward {
            image_acts,
            token_acts,
            fused,
            output,
        })
    }

    /// `F1`: `m x batch` real-valued codes for image/token pairs.
    pub fn forward_image(&self, images: &DenseMatrix, tokens: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward_image_detailed(images, tokens)?.output)
    }

    pub fn forward_sketch_detailed(&self, sketches: &DenseMatrix) -> Result<SketchForward> {
        self.check_input("forward_sketch", &self.shared_encoder, sketches)?;
        let acts = self.encode_stack(
            &self.shared_encoder,
            &self.scaled(&self.shared_scaling, sketches),
        )?;
        let output = self.sketch_head.forward(acts.last().unwrap())?;
        Ok(SketchForward { acts, output })
    }

    /// `F2`: `m x batch` real-valued codes for sketches.
    pub fn forward_sketch(&self, sketches: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward_sketch_detailed(sketches)?.output)
    }

    /// Shared-encoder embedding (`h x batch`) of token or sketch features.
    pub fn shared_embedding(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input("shared_embedding", &self.shared_encoder, x)?;
        Ok(self
            .encode_stack(&self.shared_encoder, &self.scaled(&self.shared_scaling, x))?
            .pop()
            .unwrap())
    }

    pub fn encode_images(&self, images: &DenseMatrix, tokens: &DenseMatrix) -> Result<CodeMatrix> {
        Ok(CodeMatrix::sign_of(&self.forward_image(images, tokens)?))
    }

    pub fn encode_sketches(&self, sketches: &DenseMatrix) -> Result<CodeMatrix> {
        Ok(CodeMatrix::sign_of(&self.forward_sketch(sketches)?))
    }

    /// Gradient of `c_img * ||F1 - t_img||² + c_sk * ||F2 - t_sk||²`, plus the unweighted loss.
    pub fn loss_gradient(
        &self,
        batch: &Batch<'_>,
        img_weight: f64,
        sketch_weight: f64,
    ) -> Result<(f64, HashModelParams)> {
        let mut grad = HashModelParams::zeros(self.dims(), self.activation)?;
        let mut loss = 0.0;

        if batch.images.cols() > 0 {
            let fwd = self.forward_image_detailed(batch.images, batch.tokens)?;
            let resid = fwd.output.sub(batch.image_targets)?;
            loss += frob_sq(&resid);
            let d_out = resid.scale(2.0 * img_weight);
            let d_fused =
                affine_backward(&self.fusion_head, &fwd.fused, &d_out, &mut grad.fusion_head)?;
            let h = self.fusion_head.in_dim() / 2;
            let (d_img, d_tok) = split_rows(&d_fused, h);
            let images = self.scaled(&self.image_scaling, batch.images);
            let tokens = self.scaled(&self.shared_scaling, batch.tokens);
            self.stack_backward(
                &self.image_encoder,
                &images,
                &fwd.image_acts,
                d_img,
                &mut grad.image_encoder,
            )?;
            self.stack_backward(
                &self.shared_encoder,
                &tokens,
                &fwd.token_acts,
                d_tok,
                &mut grad.shared_encoder,
            )?;
        }
        if batch.sketches.cols() > 0 {
            let fwd = self.forward_sketch_detailed(batch.sketches)?;
            let resid = fwd.output.sub(batch.sketch_targets)?;
            loss += frob_sq(&resid);
            let d_out = resid.scale(2.0 * sketch_weight);
            let d_emb = affine_backward(
                &self.sketch_head,
                fwd.acts.last().unwrap(),
                &d_out,
                &mut grad.sketch_head,
            )?;
            // Accumulates on top of the token-branch contribution.
            let sketches = self.scaled(&self.shared_scaling, batch.sketches);
            self.stack_backward(
                &self.shared_encoder,
                &sketches,
                &fwd.acts,
                d_emb,
                &mut grad.shared_encoder,
            )?;
        }
        Ok((loss, grad))
    }

    fn stack_backward(
        &self,
        layers: &[Layer],
        input: &DenseMatrix,
        acts: &[DenseMatrix],
        mut d_act: DenseMatrix,
        grads: &mut [Layer],
    ) -> Result<()> {
        for i in (0..layers.len()).rev() {
            for (d, &y) in d_act.as_mut_slice().iter_mut().zip(acts[i].as_slice()) {
                *d *= self.activation.derivative_from_output(y);
            }
            let x = if i == 0 { input } else { &acts[i - 1] };
            d_act = affine_backward(&layers[i], x, &d_act, &mut grads[i])?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.dims();
        let mut out = Vec::with_capacity(32 + 8 * (self.num_scaling_values() + self.num_params()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            self.activation.code(),
            dims.image_dim as u32,
            dims.sketch_dim as u32,
            dims.hidden as u32,
            dims.bits as u32,
            dims.depth as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let scaling = [&self.image_scaling, &self.shared_scaling];
        for v in scaling.iter().flat_map(|s| s.mean.iter().chain(&s.scale)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in self.flatten() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    fn num_scaling_values(&self) -> usize {
        2 * (self.image_scaling.mean.len() + self.shared_scaling.mean.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let mut r = ByteReader::new(path, &bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        r.expect_version(CHECKPOINT_VERSION)?;
        let act_code = r.u32()?;
        let activation = Activation::from_code(act_code)
            .ok_or_else(|| r.format_err(format!("unknown activation {act_code}")))?;
        let dims = ModelDims {
            image_dim: r.u32()? as usize,
            sketch_dim: r.u32()? as usize,
            hidden: r.u32()? as usize,
            bits: r.u32()? as usize,
            depth: r.u32()? as usize,
        };
        let mut params = Self::zeros(dims, activation).map_err(|e| r.format_err(e.to_string()))?;
        let expected = 32 + 8 * (params.num_scaling_values() + params.num_params());
        if bytes.len() != expected {
            return Err(r.format_err(format!(
                "expected {expected} bytes for {dims:?}, found {}",
                bytes.len()
            )));
        }
        for s in [&mut params.image_scaling, &mut params.shared_scaling] {
            for v in s.mean.iter_mut().chain(s.scale.iter_mut()) {
                *v = r.f64()?;
            }
        }
        for i in 0..params.num_params() {
            *params.param_mut(i) = r.f64()?;
        }
        r.finish()?;
        if !params.is_finite() {
            return Err(r.format_err("non-finite parameter"));
        }
        Ok(params)
    }
}

/// Intermediate values of `F1`.
#[derive(Debug, Clone)]
pub struct ImageForward {
    pub image_acts: Vec<DenseMatrix>,
    pub token_acts: Vec<DenseMatrix>,
    pub fused: DenseMatrix,
    pub output: DenseMatrix,
}

/// Intermediate values of `F2`.
#[derive(Debug, Clone)]
pub struct SketchForward {
    pub acts: Vec<DenseMatrix>,
    pub output: DenseMatrix,
}

/// Minibatch of both modalities with their code targets (column-aligned).
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub images: &'a DenseMatrix,
    pub tokens: &'a DenseMatrix,
    pub image_targets: &'a DenseMatrix,
    pub sketches: &'a DenseMatrix,
    pub sketch_targets: &'a DenseMatrix,
}

/// Accumulates the parameter gradient of one affine layer and returns `dL/dx`.
fn affine_backward(
    layer: &Layer,
    x: &DenseMatrix,
    d_out: &DenseMatrix,
    grad: &mut Layer,
) -> Result<DenseMatrix> {
    grad.weight.axpy(1.0, &matmul_nt(d_out, x)?)?;
    for (r, g) in grad.bias.iter_mut().enumerate() {
        *g += d_out.row(r).iter().sum::<f64>();
    }
    matmul_tn(&layer.weight, d_out)
}

fn concat_rows(top: &DenseMatrix, bottom: &DenseMatrix) -> DenseMatrix {
    let mut data = Vec::with_capacity((top.rows() + bottom.rows()) * top.cols());
    data.extend_from_slice(top.as_slice());
    data.extend_from_slice(bottom.as_slice());
    DenseMatrix::from_raw(top.rows() + bottom.rows(), top.cols(), data)
}

fn split_rows(m: &DenseMatrix, at: usize) -> (DenseMatrix, DenseMatrix) {
    let c = m.cols();
    let (a, b) = m.as_slice().split_at(at * c);
    (
        DenseMatrix::from_raw(at, c, a.to_vec()),
        DenseMatrix::from_raw(m.rows() - at, c, b.to_vec()),
    )
}

/// Minibatch SGD settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 64,
            lr_decay: 0.3,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if self.lr_decay.is_nan() || self.lr_decay <= 0.0 {
            return Err(Error::invalid("lr_decay must be > 0"));
        }
        Ok(())
    }
}

/// Momentum SGD state carried across epochs.
#[derive(Debug, Clone)]
pub struct HashTrainer {
    cfg: SgdConfig,
    learning_rate: f64,
    velocity: Option<HashModelParams>,
    rng: ChaCha8Rng,
}

impl HashTrainer {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            learning_rate: cfg.learning_rate,
            rng: stream_rng(cfg.seed, Stream::Shuffle),
            velocity: None,
            cfg,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// One pass over shuffled minibatches of both modalities toward fixed code targets.
    ///
    /// Both index sets are split into the same number of steps; each step takes
    /// the joint gradient of both quantization terms, each averaged over its own
    /// batch. Returns the summed pre-update batch loss divided by `n1 + n2`.
    pub fn train_epoch(
        &mut self,
        params: &mut HashModelParams,
        data: &FeatureDataset,
        image_codes: &CodeMatrix,
        sketch_codes: &CodeMatrix,
    ) -> Result<f64> {
        let (n1, n2) = (data.n_images(), data.n_sketches());
        let m = params.bits();
        if image_codes.bits() != m || sketch_codes.bits() != m {
            return Err(Error::shape(
                "train_epoch targets",
                format!("{m}-bit model"),
                format!("{}/{}-bit codes", image_codes.bits(), sketch_codes.bits()),
            ));
        }
        if image_codes.samples() != n1 || sketch_codes.samples() != n2 {
            return Err(Error::shape(
                "train_epoch targets",
                format!("{n1} images / {n2} sketches"),
                format!(
                    "{} / {} codes",
                    image_codes.samples(),
                    sketch_codes.samples()
                ),
            ));
        }
        let mut perm1: Vec<usize> = (0..n1).collect();
        let mut perm2: Vec<usize> = (0..n2).collect();
        perm1.shuffle(&mut self.rng);
        perm2.shuffle(&mut self.rng);
        let steps = n1.max(n2).div_ceil(self.cfg.batch_size).max(1);
        let chunk = |perm: &[usize], s: usize| {
            let n = perm.len();
            perm[s * n / steps..(s + 1) * n / steps].to_vec()
        };

        let image_targets = image_codes.to_dense();
        let sketch_targets = sketch_codes.to_dense();
        let velocity = self.velocity.get_or_insert_with(|| {
            HashModelParams::zeros(params.dims(), params.activation).expect("valid dims")
        });
        let mut total_loss = 0.0;
        for s in 0..steps {
            let idx1 = chunk(&perm1, s);
            let idx2 = chunk(&perm2, s);
            let images = data.image_features.select_columns(&idx1);
            let tokens = data.token_features.select_columns(&idx1);
            let t1 = image_targets.select_columns(&idx1);
            let sketches = data.sketch_features.select_columns(&idx2);
            let t2 = sketch_targets.select_columns(&idx2);
            let batch = Batch {
                images: &images,
                tokens: &tokens,
                image_targets: &t1,
                sketches: &sketches,
                sketch_targets: &t2,
            };
            let w1 = 1.0 / idx1.len().max(1) as f64;
            let w2 = 1.0 / idx2.len().max(1) as f64;
            let (loss, grad) = params.loss_gradient(&batch, w1, w2)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss at step {s}")));
            }
            total_loss += loss;
            let (lr, mu) = (self.learning_rate, self.cfg.momentum);
            velocity.zip_update(&grad, |v, g| *v = mu * *v - lr * g);
            params.zip_update(velocity, |p, v| *p += v);
        }
        if !params.is_finite() {
            return Err(Error::Diverged("non-finite parameters after update".into()));
        }
        self.learning_rate *= self.cfg.lr_decay;
        Ok(total_loss / (n1 + n2).max(1) as f64)
    }
}

/// Settings for [`gradient_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check a random subset of this many parameters when the model is larger.
    pub max_params: usize,
    pub seed: u64,
    /// Multiplies the analytic gradient. Anything but 1.0 should fail the check.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_params: 2000,
            seed: 0,
            analytic_scale: 1.0,
        }
    }
}

/// Max relative error between the analytic gradient of the unweighted
/// quantization loss and central finite differences.
///
/// Each difference is taken as `sum((F+ - F-) * (F+ + F- - 2T)) / 2h`, which
/// equals `(L+ - L-) / 2h` but avoids cancelling two large loss values.
pub fn gradient_check(
    params: &HashModelParams,
    batch: &Batch<'_>,
    opts: GradCheckOptions,
) -> Result<f64> {
    if batch.images.cols() == 0 && batch.sketches.cols() == 0 {
        return Ok(0.0);
    }
    let (_, grad) = params.loss_gradient(batch, 1.0, 1.0)?;
    let analytic = grad.flatten();
    let n = params.num_params();
    let indices: Vec<usize> = if n <= opts.max_params {
        (0..n).collect()
    } else {
        let mut rng = stream_rng(opts.seed, Stream::Test);
        rand::seq::index::sample(&mut rng, n, opts.max_params.max(200)).into_vec()
    };

    let outputs = |p: &HashModelParams| -> Result<(DenseMatrix, DenseMatrix)> {
        Ok((
            p.forward_image(batch.images, batch.tokens)?,
            p.forward_sketch(batch.sketches)?,
        ))
    };
    let pair_term = |plus: &DenseMatrix, minus: &DenseMatrix, t: &DenseMatrix| -> f64 {
        plus.as_slice()
            .iter()
            .zip(minus.as_slice())
            .zip(t.as_slice())
            .map(|((&a, &b), &t)| (a - b) * (a + b - 2.0 * t))
            .sum()
    };

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for &i in &indices {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + opts.step;
        let (fi_plus, fs_plus) = outputs(&probe)?;
        *probe.param_mut(i) = orig - opts.step;
        let (fi_minus, fs_minus) = outputs(&probe)?;
        *probe.param_mut(i) = orig;
        let numeric = (pair_term(&fi_plus, &fi_minus, batch.image_targets)
            + pair_term(&fs_plus, &fs_minus, batch.sketch_targets))
            / (2.0 * opts.step);
        let a = analytic[i] * opts.analytic_scale;
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Owned tiny batch for gradient checks.
#[derive(Debug, Clone)]
pub struct OwnedBatch {
    pub images: DenseMatrix,
    pub tokens: DenseMatrix,
    pub image_targets: DenseMatrix,
    pub sketches: DenseMatrix,
    pub sketch_targets: DenseMatrix,
}

impl OwnedBatch {
    /// Gaussian-ish features and random `±1` targets, `samples` per modality.
    pub fn random(dims: ModelDims, samples: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Test);
        let mut feats =
            |rows: usize| DenseMatrix::from_fn(rows, samples, |_, _| rng.random_range(-1.0..1.0));
        let images = feats(dims.image_dim);
        let tokens = feats(dims.sketch_dim);
        let sketches = feats(dims.sketch_dim);
        let mut rng = stream_rng(seed.wrapping_add(1), Stream::Test);
        let image_targets = CodeMatrix::random(dims.bits, samples, &mut rng).to_dense();
        let sketch_targets = CodeMatrix::random(dims.bits, samples, &mut rng).to_dense();
        Self {
            images,
            tokens,
            image_targets,
            sketches,
            sketch_targets,
        }
    }

    pub fn as_batch(&self) -> Batch<'_> {
        Batch {
            images: &self.images,
            tokens: &self.tokens,
            image_targets: &self.image_targets,
            sketches: &self.sketches,
            sketch_targets: &self.sketch_targets,
        }
    }
}

/// Model and batch used by the default gradient check.
pub fn tiny_gradcheck_problem(
    activation: Activation,
    seed: u64,
) -> Result<(HashModelParams, OwnedBatch)> {
    let dims = ModelDims::new(6, 5, 7, 4);
    let params = HashModelParams::init(dims, activation, seed)?;
    Ok((params, OwnedBatch::random(dims, 3, seed)))
}
