use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sketchhash_cli::{
    cmd_encode, cmd_eval, cmd_generate, cmd_gradcheck, cmd_index, cmd_search, cmd_train,
    results_to_csv, CliError, CliResult, EncodeInput, Overrides, RunConfig, SearchMode,
};
use sketchhash_core::io::{create_dir_all, write_atomic};
use sketchhash_core::Side;

#[derive(Parser)]
#[command(
    name = "sketchhash",
    version,
    about = "Cross-modal hashing for sketch-based image retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON config with flat dotted keys; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    bits: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    radius: Option<u32>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-modality dataset with held-out query sketches
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Learn codes and encoders
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; omit to train on the synthetic spec
        #[arg(long)]
        data: Option<PathBuf>,
        /// Class embedding file
        #[arg(long)]
        embedding: Option<PathBuf>,
    },
    /// Encode features with a trained model
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        side: Side,
        #[arg(long, required_if_eq("side", "image"))]
        images: Option<PathBuf>,
        #[arg(long, required_if_eq("side", "image"))]
        tokens: Option<PathBuf>,
        #[arg(long, required_if_eq("side", "sketch"))]
        features: Option<PathBuf>,
        #[arg(long)]
        ids: Option<PathBuf>,
        /// File name inside --out
        #[arg(long)]
        name: Option<String>,
    },
    /// Build a searchable index from a code file
    Index {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        ids: Option<PathBuf>,
    },
    /// Hamming search: top-k by default, or a radius ball with --radius
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
    },
    /// Retrieval metrics against class labels
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gallery_labels: PathBuf,
        #[arg(long)]
        query_labels: PathBuf,
        /// Truncate AP at this rank
        #[arg(long)]
        map_cutoff: Option<usize>,
    },
    /// Finite-difference check of the encoder gradients
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn config(
    common: &Common,
    data: Option<PathBuf>,
    embedding: Option<PathBuf>,
) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        bits: common.bits,
        lambda: common.lambda,
        gamma: common.gamma,
        epochs: common.epochs,
        k: common.k,
        radius: common.radius,
        threads: common.threads,
        out: common.out.clone(),
        data,
        embedding,
    });
    cfg.finalize()
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = config(&common, None, None)?;
            println!("{}", cmd_generate(&cfg)?);
        }
        Command::Train {
            common,
            data,
            embedding,
        } => {
            let cfg = config(&common, data, embedding)?;
            println!("{}", cmd_train(&cfg)?);
        }
        Command::Encode {
            common,
            model,
            side,
            images,
            tokens,
            features,
            ids,
            name,
        } => {
            let cfg = config(&common, None, None)?;
            let input = match side {
                Side::Image => EncodeInput::Images {
                    images: images.expect("required by clap"),
                    tokens: tokens.expect("required by clap"),
                },
                Side::Sketch => EncodeInput::Sketches {
                    sketches: features.expect("required by clap"),
                },
            };
            let name = name.unwrap_or_else(|| format!("encoded_{}.dshc", side.as_str()));
            let path = cfg.out_dir()?.join(name);
            let codes = cmd_encode(&model, &input, ids.as_deref(), &path)?;
            println!(
                "wrote {} {}-bit codes to {}",
                codes.len(),
                codes.bits(),
                path.display()
            );
        }
        Command::Index { common, codes, ids } => {
            let cfg = config(&common, None, None)?;
            let path = cfg.out_dir()?.join("index.dshc");
            let index = cmd_index(&codes, ids.as_deref(), &path)?;
            println!(
                "indexed {} codes, payload {} bytes, resident {} bytes",
                index.len(),
                index.code_payload_bytes(),
                index.resident_bytes()
            );
        }
        Command::Search {
            common,
            index,
            queries,
        } => {
            let cfg = config(&common, None, None)?;
            let mode = match common.radius {
                Some(r) => SearchMode::Radius(r),
                None => SearchMode::TopK(cfg.eval.k),
            };
            let out = cmd_search(&index, &queries, mode, cfg.threads)?;
            let csv = results_to_csv(&out.results);
            match &cfg.out_dir {
                Some(dir) => {
                    create_dir_all(dir)?;
                    write_atomic(&dir.join("results.csv"), csv.as_bytes())?;
                }
                None => print!("{csv}"),
            }
            eprintln!(
                "median query time: {:.3} ms",
                out.median_query_seconds * 1e3
            );
        }
        Command::Eval {
            common,
            index,
            queries,
            gallery_labels,
            query_labels,
            map_cutoff,
        } => {
            let mut cfg = config(&common, None, None)?;
            if map_cutoff.is_some() {
                cfg.eval.map_cutoff = map_cutoff;
            }
            let out = cfg.out_dir()?.to_path_buf();
            let r = cmd_eval(
                &index,
                &queries,
                &gallery_labels,
                &query_labels,
                &cfg.eval,
                cfg.threads,
                &out,
            )?;
            println!("MAP: {:.4}", r.map);
            for (k, p) in &r.precision_at_k {
                println!("precision@{k}: {p:.4}");
            }
            println!("HD{} precision: {:.4}", r.hd_radius, r.hd_precision);
            if r.queries_without_relevant > 0 {
                println!(
                    "warning: {} queries have no relevant gallery item",
                    r.queries_without_relevant
                );
            }
        }
        Command::Gradcheck { common, corrupt } => {
            let cfg = config(&common, None, None)?;
            let outcome = cmd_gradcheck(cfg.seed, corrupt)?;
            println!("max relative error: {:e}", outcome.max_relative_error);
            if !outcome.passed {
                return Err(CliError::Validation("gradient check failed".into()));
            }
            println!("gradient check passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
