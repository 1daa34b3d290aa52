use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sketchhash_core::data::{
    generate_synthetic, load_features, load_labels, save_features, save_labels, FeatureDataset,
    SemanticEmbedding,
};
use sketchhash_core::eval::{evaluate, EvalOptions, MetricsReport};
use sketchhash_core::hash::{
    gradient_check, tiny_gradcheck_problem, Activation, GradCheckOptions, HashModelParams,
    ModelDims,
};
use sketchhash_core::io::{create_dir_all, read_string, write_atomic};
use sketchhash_core::numerics::DenseMatrix;
use sketchhash_core::optimizer::{fit, trace_to_csv, ObjectiveBreakdown};
use sketchhash_core::{CodeMatrix, PackedCodeIndex, SearchHit, Side};

use crate::config::{EvalSettings, RunConfig};
use crate::{CliError, CliResult};

pub const IMAGE_FEATURES: &str = "image_features.xmhf";
pub const TOKEN_FEATURES: &str = "token_features.xmhf";
pub const SKETCH_FEATURES: &str = "sketch_features.xmhf";
pub const IMAGE_LABELS: &str = "image_labels.txt";
pub const SKETCH_LABELS: &str = "sketch_labels.txt";
pub const QUERY_FEATURES: &str = "query_sketch_features.xmhf";
pub const QUERY_LABELS: &str = "query_labels.txt";
pub const EMBEDDING: &str = "embedding.xmhe";

pub const MODEL_FILE: &str = "model.xmhm";
pub const IMAGE_CODES: &str = "image_codes.dshc";
pub const SKETCH_CODES: &str = "sketch_codes.dshc";
pub const TRACE_FILE: &str = "trace.csv";

fn class_counts(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut c = vec![0; classes];
    for &l in labels {
        if l < classes {
            c[l] += 1;
        }
    }
    c
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub image_class_counts: Vec<usize>,
    pub sketch_class_counts: Vec<usize>,
    pub query_class_counts: Vec<usize>,
    pub files: Vec<PathBuf>,
}

impl fmt::Display for GenerateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let total = |v: &[usize]| v.iter().sum::<usize>();
        writeln!(f, "classes: {}", self.image_class_counts.len())?;
        writeln!(
            f,
            "images:   {} per class {:?}",
            total(&self.image_class_counts),
            self.image_class_counts
        )?;
        writeln!(
            f,
            "sketches: {} per class {:?}",
            total(&self.sketch_class_counts),
            self.sketch_class_counts
        )?;
        write!(
            f,
            "queries:  {} per class {:?}",
            total(&self.query_class_counts),
            self.query_class_counts
        )
    }
}

/// Writes a synthetic dataset, its held-out query sketches and a class embedding.
pub fn cmd_generate(cfg: &RunConfig) -> CliResult<GenerateSummary> {
    let out = cfg.out_dir()?;
    create_dir_all(out)?;
    let mut spec = cfg.synthetic.clone();
    let keep = spec.n_sketches;
    spec.n_sketches += cfg.holdout;
    let full = generate_synthetic(&spec)?;
    let (data, queries, query_labels) = if cfg.holdout > 0 {
        full.split_sketches(keep)?
    } else {
        let rows = full.sketch_dim();
        (full, DenseMatrix::zeros(rows, 0), Vec::new())
    };
    let embedding = SemanticEmbedding::synthetic(cfg.embedding_dim, spec.classes, cfg.seed)?;

    let mut files = Vec::new();
    let mut put = |name: &str| {
        let p = out.join(name);
        files.push(p.clone());
        p
    };
    save_features(&put(IMAGE_FEATURES), &data.image_features)?;
    save_features(&put(TOKEN_FEATURES), &data.token_features)?;
    save_features(&put(SKETCH_FEATURES), &data.sketch_features)?;
    save_labels(&put(IMAGE_LABELS), &data.image_labels)?;
    save_labels(&put(SKETCH_LABELS), &data.sketch_labels)?;
    if cfg.holdout > 0 {
        save_features(&put(QUERY_FEATURES), &queries)?;
        save_labels(&put(QUERY_LABELS), &query_labels)?;
    }
    embedding.save(&put(EMBEDDING))?;

    Ok(GenerateSummary {
        image_class_counts: class_counts(&data.image_labels, spec.classes),
        sketch_class_counts: class_counts(&data.sketch_labels, spec.classes),
        query_class_counts: class_counts(&query_labels, spec.classes),
        files,
    })
}

/// Loads a dataset directory written by [`cmd_generate`] (or laid out the same way).
/// The class count is taken from `num_classes`, else from the largest label.
pub fn load_dataset(dir: &Path, num_classes: Option<usize>) -> CliResult<FeatureDataset> {
    let image_labels = load_labels(&dir.join(IMAGE_LABELS))?;
    let sketch_labels = load_labels(&dir.join(SKETCH_LABELS))?;
    let max_label = image_labels
        .iter()
        .chain(&sketch_labels)
        .max()
        .copied()
        .unwrap_or(0);
    let classes = num_classes.unwrap_or(max_label + 1);
    Ok(FeatureDataset::new(
        load_features(&dir.join(IMAGE_FEATURES))?,
        load_features(&dir.join(TOKEN_FEATURES))?,
        load_features(&dir.join(SKETCH_FEATURES))?,
        image_labels,
        sketch_labels,
        classes,
    )?)
}

/// Dataset and class embedding for training, from files or the synthetic spec.
pub fn training_inputs(cfg: &RunConfig) -> CliResult<(FeatureDataset, SemanticEmbedding)> {
    match &cfg.data_dir {
        Some(dir) => {
            let emb_path = cfg.embedding_path.clone().or_else(|| {
                let p = dir.join(EMBEDDING);
                p.exists().then_some(p)
            });
            match emb_path {
                Some(p) => {
                    let emb = SemanticEmbedding::load(&p, None, None)?;
                    let data = load_dataset(dir, Some(emb.num_classes()))?;
                    Ok((data, emb))
                }
                None => {
                    let data = load_dataset(dir, None)?;
                    let emb = SemanticEmbedding::synthetic(
                        cfg.embedding_dim,
                        data.num_classes,
                        cfg.seed,
                    )?;
                    Ok((data, emb))
                }
            }
        }
        None => {
            let data = generate_synthetic(&cfg.synthetic)?;
            let emb = match &cfg.embedding_path {
                Some(p) => SemanticEmbedding::load(p, None, Some(data.num_classes))?,
                None => {
                    SemanticEmbedding::synthetic(cfg.embedding_dim, data.num_classes, cfg.seed)?
                }
            };
            Ok((data, emb))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub initial: ObjectiveBreakdown,
    pub last: ObjectiveBreakdown,
    pub max_ridge: f64,
    pub files: Vec<PathBuf>,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "epochs run: {}", self.epochs_run)?;
        writeln!(
            f,
            "objective: {:.6e} -> {:.6e}",
            self.initial.total, self.last.total
        )?;
        write!(
            f,
            "final terms: pairwise {:.6e}, semantic {:.6e}, quantization {:.6e}",
            self.last.pairwise, self.last.semantic, self.last.quantization
        )?;
        if self.max_ridge > 0.0 {
            write!(f, "\ndictionary solve needed ridge {:e}", self.max_ridge)?;
        }
        Ok(())
    }
}

/// Fits codes and encoders; writes the checkpoint, both code files and the trace.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainSummary> {
    let out = cfg.out_dir()?;
    let (data, embedding) = training_inputs(cfg)?;
    let dims = ModelDims::new(
        data.image_dim(),
        data.sketch_dim(),
        cfg.hidden,
        cfg.optimizer.bits,
    );
    let params = HashModelParams::init(dims, cfg.activation, cfg.seed)?;
    let fitted = fit(&data, &embedding, params, &cfg.optimizer, &cfg.sgd)?;

    create_dir_all(out)?;
    let files = vec![
        out.join(MODEL_FILE),
        out.join(IMAGE_CODES),
        out.join(SKETCH_CODES),
        out.join(TRACE_FILE),
    ];
    fitted.params.save(&files[0])?;
    PackedCodeIndex::pack_sequential(&fitted.image_codes)?.save(&files[1])?;
    PackedCodeIndex::pack_sequential(&fitted.sketch_codes)?.save(&files[2])?;
    write_atomic(&files[3], trace_to_csv(&fitted.trace).as_bytes())?;

    Ok(TrainSummary {
        epochs_run: fitted.epochs_run,
        initial: fitted
            .trace
            .first()
            .expect("trace has an init entry")
            .objective,
        last: fitted
            .trace
            .last()
            .expect("trace has an init entry")
            .objective,
        max_ridge: fitted.max_ridge,
        files,
    })
}

/// One id per line.
pub fn load_ids(path: &Path) -> CliResult<Vec<u64>> {
    let text = read_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<u64>().map_err(|e| {
                CliError::Core(sketchhash_core::Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("line {}: {e}", i + 1),
                })
            })
        })
        .collect()
}

fn pack_with_ids(codes: &CodeMatrix, ids: Option<&Path>) -> CliResult<PackedCodeIndex> {
    Ok(match ids {
        Some(p) => PackedCodeIndex::pack(codes, load_ids(p)?)?,
        None => PackedCodeIndex::pack_sequential(codes)?,
    })
}

fn non_empty(path: &Path, m: DenseMatrix) -> CliResult<DenseMatrix> {
    if m.cols() == 0 {
        return Err(CliError::Validation(format!(
            "{} holds no samples",
            path.display()
        )));
    }
    Ok(m)
}

/// Feature files for [`cmd_encode`]; images need their paired tokens.
#[derive(Debug, Clone)]
pub enum EncodeInput {
    Images { images: PathBuf, tokens: PathBuf },
    Sketches { sketches: PathBuf },
}

impl EncodeInput {
    pub fn side(&self) -> Side {
        match self {
            EncodeInput::Images { .. } => Side::Image,
            EncodeInput::Sketches { .. } => Side::Sketch,
        }
    }
}

/// `sign(F(·))` of the given features, written as a DSHC file.
pub fn cmd_encode(
    model: &Path,
    input: &EncodeInput,
    ids: Option<&Path>,
    out_file: &Path,
) -> CliResult<PackedCodeIndex> {
    let params = HashModelParams::load(model)?;
    let codes = match input {
        EncodeInput::Images { images, tokens } => {
            let x = non_empty(images, load_features(images)?)?;
            let z = non_empty(tokens, load_features(tokens)?)?;
            params.encode_images(&x, &z)?
        }
        EncodeInput::Sketches { sketches } => {
            let s = non_empty(sketches, load_features(sketches)?)?;
            params.encode_sketches(&s)?
        }
    };
    let index = pack_with_ids(&codes, ids)?;
    if let Some(dir) = out_file.parent() {
        create_dir_all(dir)?;
    }
    index.save(out_file)?;
    Ok(index)
}

/// Re-packs a code file, optionally attaching gallery ids.
pub fn cmd_index(codes: &Path, ids: Option<&Path>, out_file: &Path) -> CliResult<PackedCodeIndex> {
    let source = PackedCodeIndex::load(codes)?;
    let index = pack_with_ids(&source.unpack(), ids)?;
    if let Some(dir) = out_file.parent() {
        create_dir_all(dir)?;
    }
    index.save(out_file)?;
    Ok(index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    TopK(usize),
    Radius(u32),
}

#[derive(Debug, Clone)]
pub struct SearchOutput {
    pub results: Vec<Vec<SearchHit>>,
    pub median_query_seconds: f64,
}

pub fn cmd_search(
    index: &Path,
    queries: &Path,
    mode: SearchMode,
    threads: usize,
) -> CliResult<SearchOutput> {
    let gallery = PackedCodeIndex::load(index)?;
    let queries = PackedCodeIndex::load(queries)?;
    gallery.check_compatible(&queries)?;
    let start = Instant::now();
    let results = match mode {
        SearchMode::TopK(k) => gallery.search_topk_batch(&queries, k, threads)?,
        SearchMode::Radius(r) => gallery.search_radius_batch(&queries, r, threads)?,
    };
    let elapsed = start.elapsed().as_secs_f64();
    // Per-query times are only separable when the scan runs on one thread.
    let median_query_seconds = if threads <= 1 {
        let mut times: Vec<f64> = (0..queries.len())
            .map(|q| {
                let t = Instant::now();
                let _ = match mode {
                    SearchMode::TopK(k) => gallery.search_topk(queries.code_words(q), k),
                    SearchMode::Radius(r) => gallery.search_radius(queries.code_words(q), r),
                };
                t.elapsed().as_secs_f64()
            })
            .collect();
        times.sort_by(f64::total_cmp);
        times.get(times.len() / 2).copied().unwrap_or(0.0)
    } else {
        elapsed / queries.len().max(1) as f64
    };
    Ok(SearchOutput {
        results,
        median_query_seconds,
    })
}

/// `query,rank,id,distance`, one row per hit.
pub fn results_to_csv(results: &[Vec<SearchHit>]) -> String {
    let mut s = String::from("query,rank,id,distance\n");
    for (q, hits) in results.iter().enumerate() {
        for (rank, h) in hits.iter().enumerate() {
            let _ = writeln!(s, "{q},{},{},{}", rank + 1, h.id, h.distance);
        }
    }
    s
}

/// Parses [`results_to_csv`] output back into per-query `(id, distance)` lists.
pub fn parse_results_csv(text: &str) -> CliResult<Vec<Vec<(u64, u32)>>> {
    let mut out: Vec<Vec<(u64, u32)>> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || CliError::Validation(format!("results line {}: malformed", i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let q: usize = f[0].parse().map_err(|_| bad())?;
        let id: u64 = f[2].parse().map_err(|_| bad())?;
        let d: u32 = f[3].parse().map_err(|_| bad())?;
        if out.len() <= q {
            out.resize(q + 1, Vec::new());
        }
        out[q].push((id, d));
    }
    Ok(out)
}

pub const METRICS_JSON: &str = "metrics.json";
pub const AP_CSV: &str = "ap.csv";
pub const PR_CSV: &str = "pr.csv";

/// Ranks the gallery for every query and writes the JSON and CSV reports.
pub fn cmd_eval(
    index: &Path,
    queries: &Path,
    gallery_labels: &Path,
    query_labels: &Path,
    settings: &EvalSettings,
    threads: usize,
    out: &Path,
) -> CliResult<MetricsReport> {
    let gallery = PackedCodeIndex::load(index)?;
    let queries = PackedCodeIndex::load(queries)?;
    let gl = load_labels(gallery_labels)?;
    let ql = load_labels(query_labels)?;
    let opts = EvalOptions {
        ks: vec![settings.k],
        radius: settings.radius,
        map_cutoff: settings.map_cutoff,
        threads,
    };
    let report = evaluate(&gallery, &gl, &queries, &ql, &opts)?;
    create_dir_all(out)?;
    write_atomic(&out.join(METRICS_JSON), report.to_json().as_bytes())?;
    write_atomic(&out.join(AP_CSV), report.per_query_csv().as_bytes())?;
    write_atomic(&out.join(PR_CSV), report.pr_csv().as_bytes())?;
    Ok(report)
}

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOutcome {
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Finite-difference check of a seeded tiny tanh model. `corrupt` scales the
/// analytic gradient so the check must fail.
pub fn cmd_gradcheck(seed: u64, corrupt: bool) -> CliResult<GradcheckOutcome> {
    let (params, batch) = tiny_gradcheck_problem(Activation::Tanh, seed)?;
    let opts = GradCheckOptions {
        seed,
        analytic_scale: if corrupt { 1.01 } else { 1.0 },
        ..Default::default()
    };
    let err = gradient_check(&params, &batch.as_batch(), opts)?;
    Ok(GradcheckOutcome {
        max_relative_error: err,
        passed: err < GRADCHECK_THRESHOLD,
    })
}
