//! Command-line entry point: dataset generation, training, evaluation and the
//! ablation matrix, all driven by one TOML run configuration.
//!
//! Exit codes: 0 ok, 1 configuration error, 2 data validation error,
//! 3 numerical failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use comir::config::{KernelConfig, ModelConfig, TrainConfig};
use comir::error::{Error, Result};
use comir::eval::{
    alignment_diagnostic, evaluate, format_ablation_table, full_ablation_rows, run_ablation,
    AblationRowSpec, AblationSpec,
};
use comir::synth::{
    build_css_style_dataset, build_fashion_style_dataset, validate_manifest, CssDatasetConfig,
    Dataset, FashionDatasetConfig,
};
use comir::train::{
    build_model, load_checkpoint, prepare_split, save_checkpoint, train, ImageBank, Trainer,
};

/// Environment variable that prefixes relative output directories.
const OUTPUT_ROOT_ENV: &str = "COMIR_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "comir", version, about = "Compositional image retrieval trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write its manifest.
    GenData(GenDataArgs),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Train and evaluate every ablation row.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dataset output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory (holding manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Run output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured iteration count.
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Ranks to report, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 5, 10, 50])]
    ks: Vec<usize>,
    /// Optional output directory for reports/.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also export the embedding-alignment diagnostic with this many samples.
    #[arg(long)]
    diagnostic: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// Run configuration file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DatasetSection {
    /// "css" (grid scenes) or "fashion" (attribute descriptions).
    kind: DatasetKind,
    css: CssDatasetConfig,
    fashion: FashionDatasetConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DatasetKind {
    #[default]
    Css,
    Fashion,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSection {
    ks: Vec<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AblationSection {
    /// Seeds shared by every row; empty means [0, 1, 2].
    seeds: Vec<u64>,
    /// Explicit rows; empty means the full built-in matrix.
    rows: Vec<AblationRowSpec>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfigFile {
    dataset: DatasetSection,
    model: ModelConfig,
    kernel: KernelConfig,
    train: TrainConfig,
    eval: EvalSection,
    ablation: AblationSection,
}

fn load_run_config(path: &Path) -> Result<RunConfigFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| {
        // Keep diagnostics on one line so callers can parse them.
        let msg = e
            .to_string()
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('|') && !l.starts_with('^'))
            .collect::<Vec<_>>()
            .join(" ");
        Error::Config(format!("invalid config: {msg}"))
    })
}

/// Resolve an output directory against the output-root environment variable.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn echo_config(dir: &Path, cfg: &RunConfigFile) -> Result<()> {
    let text =
        toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("config echo: {e}")))?;
    fs::write(dir.join("config.toml"), text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = load_run_config(&args.config)?;
    let out = resolve_out(&args.out);
    fs::create_dir_all(&out)?;
    let manifest = match cfg.dataset.kind {
        DatasetKind::Css => build_css_style_dataset(&out, &cfg.dataset.css)?,
        DatasetKind::Fashion => build_fashion_style_dataset(&out, &cfg.dataset.fashion)?,
    };
    validate_manifest(&out, false)?;
    echo_config(&out, &cfg)?;
    println!(
        "wrote {} dataset ({}px, seed {}) to {}",
        manifest.kind,
        manifest.image_size,
        manifest.seed,
        out.display()
    );
    Ok(())
}

struct LoadedData {
    ds: Dataset,
    bank: ImageBank,
}

fn load_data(dir: &Path) -> Result<LoadedData> {
    validate_manifest(dir, false)?;
    let ds = Dataset::load(dir)?;
    let bank = ImageBank::from_dataset(&ds)?;
    Ok(LoadedData { ds, bank })
}

/// Model geometry bound to a dataset: image size and vocabulary come from the
/// manifest, not the config file.
fn bind_model_cfg(cfg: &RunConfigFile, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        image_size: ds.manifest.image_size,
        vocab_size: ds.vocab.len(),
        ..cfg.model.clone()
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_run_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(iters) = args.iters {
        cfg.train.iterations = iters;
        cfg.train.mu_update_every = cfg.train.mu_update_every.min(iters);
    }
    let data = load_data(&args.data)?;
    let mcfg = bind_model_cfg(&cfg, &data.ds);

    let out = resolve_out(&args.out);
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    fs::create_dir_all(out.join("reports"))?;
    echo_config(&out, &cfg)?;

    let model = build_model(&mcfg, &cfg.kernel, &cfg.train, cfg.train.seed)?;
    let triplets = prepare_split(&data.ds, &data.bank, comir::synth::Split::Train, &mcfg)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;

    let metrics_path = out.join("metrics.ndjson");
    let mut metrics = fs::File::create(&metrics_path)?;
    let rows = train(
        &mut trainer,
        &data.bank,
        &triplets,
        |row| {
            let line = serde_json::to_string(row).expect("metrics row serializes");
            let _ = writeln!(metrics, "{line}");
        },
        |iter, model| save_checkpoint(&ckpt_dir.join(format!("iter{iter:06}.ckpt")), model),
    )?;
    save_checkpoint(&ckpt_dir.join("final.ckpt"), &trainer.model)?;

    let last = rows.last().expect("at least one metrics row");
    println!(
        "trained {} iterations (final L_T {:.4}, mu {:.3e}); checkpoint at {}",
        cfg.train.iterations,
        last.l_t,
        last.mu,
        ckpt_dir.join("final.ckpt").display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let data = load_data(&args.data)?;
    if data.ds.manifest.image_size != model.model_cfg.image_size {
        return Err(Error::Data(format!(
            "checkpoint expects {}px images, dataset is {}px",
            model.model_cfg.image_size, data.ds.manifest.image_size
        )));
    }
    let report = evaluate(&model, &data.ds, &data.bank, &args.ks)?;
    for (k, r) in report.ks.iter().zip(&report.recalls) {
        println!("R@{k}: {r:.4}");
    }
    if let Some(out) = &args.out {
        let out = resolve_out(out);
        let reports = out.join("reports");
        fs::create_dir_all(&reports)?;
        fs::write(reports.join("eval.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        if let Some(n) = args.diagnostic {
            let diag = alignment_diagnostic(&model, &data.ds, &data.bank, n, 0)?;
            println!(
                "alignment: paired cosine distance {:.4}, energy distance {:.4}",
                diag.mean_paired_cosine_distance, diag.energy_distance
            );
            fs::write(
                reports.join("alignment.json"),
                serde_json::to_string(&diag)? + "\n",
            )?;
        }
    } else if let Some(n) = args.diagnostic {
        let diag = alignment_diagnostic(&model, &data.ds, &data.bank, n, 0)?;
        println!(
            "alignment: paired cosine distance {:.4}, energy distance {:.4}",
            diag.mean_paired_cosine_distance, diag.energy_distance
        );
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = load_run_config(&args.config)?;
    let data = load_data(&args.data)?;
    let mcfg = bind_model_cfg(&cfg, &data.ds);
    let out = resolve_out(&args.out);
    let reports = out.join("reports");
    fs::create_dir_all(&reports)?;
    echo_config(&out, &cfg)?;

    let spec = AblationSpec {
        rows: if cfg.ablation.rows.is_empty() {
            full_ablation_rows()
        } else {
            cfg.ablation.rows.clone()
        },
        seeds: if cfg.ablation.seeds.is_empty() {
            vec![0, 1, 2]
        } else {
            cfg.ablation.seeds.clone()
        },
    };
    let metrics_path = out.join("metrics.ndjson");
    let mut metrics = fs::File::create(&metrics_path)?;
    let results = run_ablation(
        &spec,
        &mcfg,
        &cfg.kernel,
        &cfg.train,
        &data.ds,
        &data.bank,
        |row, seed, m| {
            let mut v = serde_json::to_value(m).expect("metrics row serializes");
            v["row"] = row.into();
            v["seed"] = seed.into();
            let _ = writeln!(metrics, "{v}");
        },
    )?;
    let table = format_ablation_table(&results);
    print!("{table}");
    fs::write(reports.join("ablation.json"), serde_json::to_string_pretty(&results)? + "\n")?;
    fs::write(reports.join("ablation.txt"), &table)?;
    Ok(())
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
