use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use misdd_cli::pipeline::{
    eval_run, fewshot_run, grid_run, params_rows, train_run, EvalArgs, FewshotArgs, GridArgs,
    TrainArgs,
};
use misdd_cli::{CliError, Result};
use misdd_data::{generate_dataset, DatasetSpec};
use misdd_metrics::MetricsReport;
use misdd_model::{MissingLevel, MissingType, ModelConfig, TextTemplates, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "misdd",
    about = "Multimodal surface-defect detection that stays usable when RGB or depth goes missing",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a seeded synthetic RGB+depth defect dataset to disk.
    Generate(GenerateCmd),
    /// Warm up encoders, train prompts contrastively, build galleries.
    Train(TrainCmd),
    /// Score a dataset's test split with a trained run directory.
    Eval(EvalCmd),
    /// Sweep (seed × missing type × eta × ablation) cells into one CSV.
    Grid(GridCmd),
    /// Report parameter counts of a run's checkpoint, grouped by role.
    Params(ParamsCmd),
    /// Train and evaluate with only K complete samples per class.
    Fewshot(FewshotCmd),
}

/// Encoder/prompt/text shape overrides; anything not given keeps the
/// built-in default configuration.
#[derive(Args, Debug)]
struct ArchFlags {
    /// Square input resolution the encoders expect.
    #[arg(long)]
    image_size: Option<usize>,
    /// Side length of square, non-overlapping patches.
    #[arg(long)]
    patch_size: Option<usize>,
    /// Residual attention blocks per vision encoder.
    #[arg(long)]
    encoder_depth: Option<usize>,
    /// Embedding width shared by vision and text branches.
    #[arg(long)]
    width: Option<usize>,
    /// Attention heads per block.
    #[arg(long)]
    heads: Option<usize>,
    /// MLP hidden width as a multiple of the embedding width.
    #[arg(long)]
    mlp_ratio: Option<usize>,
    /// Prompts are injected into blocks 0..prompt-depth.
    #[arg(long)]
    prompt_depth: Option<usize>,
    /// Token count used for each of the three prompt kinds.
    #[arg(long)]
    prompt_len: Option<usize>,
    /// 1-indexed blocks whose token features feed the pixel map.
    #[arg(long, value_delimiter = ',')]
    feature_layers: Option<Vec<usize>>,
    /// Learnable suffix tokens on abnormal text prompts.
    #[arg(long)]
    n_ctx: Option<usize>,
    /// Text transformer depth.
    #[arg(long)]
    text_depth: Option<usize>,
}

impl ArchFlags {
    fn resolve(&self) -> ModelConfig {
        let mut cfg = ModelConfig::default();
        if let Some(v) = self.image_size {
            cfg.encoder.image_size = v;
        }
        if let Some(v) = self.patch_size {
            cfg.encoder.patch_size = v;
        }
        if let Some(v) = self.encoder_depth {
            cfg.encoder.depth = v;
        }
        if let Some(v) = self.width {
            cfg.encoder.width = v;
        }
        if let Some(v) = self.heads {
            cfg.encoder.heads = v;
        }
        if let Some(v) = self.mlp_ratio {
            cfg.encoder.mlp_ratio = v;
        }
        if let Some(v) = self.prompt_depth {
            cfg.encoder.prompt_depth = v;
        }
        if let Some(v) = &self.feature_layers {
            cfg.encoder.feature_layers = v.clone();
        }
        if let Some(v) = self.prompt_len {
            cfg.prompts.l_ccp = v;
            cfg.prompts.l_msp = v;
            cfg.prompts.l_map = v;
        }
        if let Some(v) = self.n_ctx {
            cfg.n_ctx = v;
        }
        if let Some(v) = self.text_depth {
            cfg.text_depth = v;
        }
        cfg
    }
}

/// Optimization schedule overrides shared by every training-like command.
#[derive(Args, Debug)]
struct OptimFlags {
    /// Contrastive prompt-training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Peak learning rate of the cosine schedule.
    #[arg(long)]
    lr: Option<f64>,
    /// Self-supervised encoder warmup epochs.
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Drop loss terms of missing branches instead of training on dummies.
    #[arg(long)]
    skip_missing_terms: bool,
}

impl OptimFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.warmup_epochs {
            cfg.warmup_epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        cfg.skip_missing_terms = self.skip_missing_terms;
    }
}

/// Component switch-offs for ablation runs of the train command.
#[derive(Args, Debug)]
struct AblationFlags {
    /// Disable the shared cross-modal consistency prompt.
    #[arg(long)]
    no_ccp: bool,
    /// Disable the input-conditioned modality-specific prompts.
    #[arg(long)]
    no_msp: bool,
    /// Disable the per-layer missing-aware prompts.
    #[arg(long)]
    no_map: bool,
    /// Skip contrastive training; galleries reflect warmup features.
    #[arg(long)]
    no_scl: bool,
}

impl AblationFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        cfg.use_ccp = !self.no_ccp;
        cfg.use_msp = !self.no_msp;
        cfg.use_map = !self.no_map;
        cfg.use_scl = !self.no_scl;
    }
}

#[derive(Args, Debug)]
struct GenerateCmd {
    /// Directory to render the dataset into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// How many of the built-in texture classes to include (1..=4).
    #[arg(long)]
    classes: Option<usize>,
    /// Normal training samples per class.
    #[arg(long)]
    train_normals: Option<usize>,
    /// Normal test samples per class.
    #[arg(long)]
    test_normals: Option<usize>,
    /// Anomalous test samples per class.
    #[arg(long)]
    test_anomalous: Option<usize>,
    /// Square image resolution.
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainCmd {
    /// Dataset directory produced by `generate`.
    #[arg(long)]
    dataset: PathBuf,
    /// Run directory to create (config, loss log, checkpoint, galleries).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Which modality the training schedule drops: rgb|3d|both|none.
    #[arg(long, default_value = "none")]
    missing_type: String,
    /// Fraction of training samples with a missing modality.
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    /// input: zeroed planes through the encoder; feature: encoder skipped.
    #[arg(long, default_value = "input")]
    missing_level: String,
    #[command(flatten)]
    arch: ArchFlags,
    #[command(flatten)]
    optim: OptimFlags,
    #[command(flatten)]
    ablation: AblationFlags,
    /// Keep only K complete training samples per class.
    #[arg(long)]
    k_shot: Option<usize>,
    /// JSON file overriding the built-in text templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Reuse the warmed encoder checkpoint at this path instead of warming up.
    #[arg(long)]
    warmup_from: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalCmd {
    /// Run directory produced by `train` (holds checkpoint/ and galleries/).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset whose test split is scored.
    #[arg(long)]
    dataset: PathBuf,
    /// Where to write metrics.csv/scores.csv (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Test-time missing type override (default: the run's setting).
    #[arg(long)]
    missing_type: Option<String>,
    /// Test-time missing rate override (default: the run's setting).
    #[arg(long)]
    eta: Option<f64>,
    /// Test-time missing level override (default: the run's setting).
    #[arg(long)]
    missing_level: Option<String>,
    /// Seed for the test schedule (default: the run's training seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Fuse the normal-feature memory bank into pixel maps.
    #[arg(long)]
    memory_bank: bool,
    /// Write one heatmap PNG per test sample.
    #[arg(long)]
    export_heatmaps: bool,
}

#[derive(Args, Debug)]
struct GridCmd {
    #[arg(long)]
    dataset: PathBuf,
    /// Directory receiving one run subdirectory per cell plus grid.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed axis (default: the single resolved --seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Missing-type axis.
    #[arg(long, value_delimiter = ',', default_value = "rgb,3d,both")]
    missing_types: Vec<String>,
    /// Missing-rate axis.
    #[arg(long, value_delimiter = ',')]
    etas: Option<Vec<f64>>,
    /// Ablation axis: `full` or `+`-joined no-ccp/no-msp/no-map/no-scl.
    #[arg(long, value_delimiter = ',', default_value = "full")]
    ablations: Vec<String>,
    #[arg(long, default_value = "input")]
    missing_level: String,
    #[command(flatten)]
    arch: ArchFlags,
    #[command(flatten)]
    optim: OptimFlags,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    memory_bank: bool,
}

#[derive(Args, Debug)]
struct ParamsCmd {
    /// Run directory holding the checkpoint to report on.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct FewshotCmd {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// K values to sweep, one training run per value.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    k_shots: Vec<usize>,
    #[command(flatten)]
    arch: ArchFlags,
    #[command(flatten)]
    optim: OptimFlags,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    memory_bank: bool,
}

/// Explicit flag wins; otherwise the MISDD_SEED environment variable;
/// otherwise 0.
fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("MISDD_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage {
            detail: format!("MISDD_SEED must be an unsigned integer, got `{v}`"),
        }),
        Err(_) => Ok(0),
    }
}

fn load_templates(path: &Option<PathBuf>) -> Result<TextTemplates> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(TextTemplates::default()),
    }
}

fn parse_missing_type(s: &str) -> Result<MissingType> {
    MissingType::parse(s).map_err(|e| CliError::Usage {
        detail: e.to_string(),
    })
}

fn parse_missing_level(s: &str) -> Result<MissingLevel> {
    MissingLevel::parse(s).map_err(|e| CliError::Usage {
        detail: e.to_string(),
    })
}

fn print_metric_rows<'a>(rows: impl Iterator<Item = (&'a str, &'a MetricsReport)>) {
    println!(
        "{:<12} {:>8} {:>8} {:>12} {:>15}",
        "class", "i_auroc", "p_auroc", "aupro_paper", "aupro_standard"
    );
    for (class, m) in rows {
        println!(
            "{:<12} {:>8.4} {:>8.4} {:>12.4} {:>15.4}",
            class, m.i_auroc, m.p_auroc, m.aupro_paper, m.aupro_standard
        );
    }
}

fn cmd_generate(cmd: &GenerateCmd) -> Result<()> {
    let mut spec = DatasetSpec {
        seed: resolve_seed(cmd.seed)?,
        ..DatasetSpec::default()
    };
    if let Some(n) = cmd.classes {
        if n == 0 || n > spec.classes.len() {
            return Err(CliError::Usage {
                detail: format!(
                    "--classes must be 1..={} (the generator ships {} texture classes), got {n}",
                    spec.classes.len(),
                    spec.classes.len()
                ),
            });
        }
        spec.classes.truncate(n);
    }
    if let Some(v) = cmd.train_normals {
        spec.n_train_normal = v;
    }
    if let Some(v) = cmd.test_normals {
        spec.n_test_normal = v;
    }
    if let Some(v) = cmd.test_anomalous {
        spec.n_test_anomalous = v;
    }
    if let Some(v) = cmd.image_size {
        spec.image_size = v;
    }
    let ds = generate_dataset(&spec, &cmd.out)?;
    println!(
        "generated {} classes ({}) at {}: {} train / {} test samples per class, {}×{}",
        spec.classes.len(),
        spec.classes.join(", "),
        ds.root().display(),
        spec.n_train_normal,
        spec.n_test_normal + spec.n_test_anomalous,
        spec.image_size,
        spec.image_size
    );
    Ok(())
}

fn cmd_train(cmd: &TrainCmd) -> Result<()> {
    let mut train = TrainConfig::default();
    cmd.optim.apply(&mut train);
    cmd.ablation.apply(&mut train);
    let args = TrainArgs {
        dataset: cmd.dataset.clone(),
        out: cmd.out.clone(),
        seed: resolve_seed(cmd.seed)?,
        missing_type: parse_missing_type(&cmd.missing_type)?,
        eta: cmd.eta,
        missing_level: parse_missing_level(&cmd.missing_level)?,
        arch: cmd.arch.resolve(),
        train,
        k_shot: cmd.k_shot,
        templates: load_templates(&cmd.templates)?,
        warmup_from: cmd.warmup_from.clone(),
    };
    let cfg = train_run(&args)?;
    let s = &cfg.schedule_train;
    println!(
        "trained `{}` ablation into {}: {} samples, {} missing rgb, {} missing 3d",
        cfg.ablation,
        cmd.out.display(),
        s.n,
        s.rgb_missing,
        s.td_missing
    );
    Ok(())
}

fn cmd_eval(cmd: &EvalCmd) -> Result<()> {
    let args = EvalArgs {
        run_dir: cmd.checkpoint.clone(),
        dataset: cmd.dataset.clone(),
        out: cmd.out.clone(),
        missing_type: cmd
            .missing_type
            .as_deref()
            .map(parse_missing_type)
            .transpose()?,
        eta: cmd.eta,
        missing_level: cmd
            .missing_level
            .as_deref()
            .map(parse_missing_level)
            .transpose()?,
        seed: cmd.seed,
        memory_bank: cmd.memory_bank,
        export_heatmaps: cmd.export_heatmaps,
    };
    let summary = eval_run(&args)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    let s = &summary.schedule_test;
    println!(
        "evaluated {} test samples ({} missing rgb, {} missing 3d) into {}",
        s.n,
        s.rgb_missing,
        s.td_missing,
        summary.out_dir.display()
    );
    print_metric_rows(
        summary
            .report
            .per_class
            .iter()
            .map(|(c, m)| (c.as_str(), m))
            .chain(std::iter::once(("mean", &summary.report.mean))),
    );
    Ok(())
}

fn cmd_grid(cmd: &GridCmd) -> Result<()> {
    let mut train = TrainConfig::default();
    cmd.optim.apply(&mut train);
    let seeds = match &cmd.seeds {
        Some(list) => list.clone(),
        None => vec![resolve_seed(cmd.seed)?],
    };
    let args = GridArgs {
        dataset: cmd.dataset.clone(),
        out: cmd.out.clone(),
        seeds,
        missing_types: cmd
            .missing_types
            .iter()
            .map(|s| parse_missing_type(s))
            .collect::<Result<Vec<_>>>()?,
        etas: cmd.etas.clone().unwrap_or_else(|| vec![0.3, 0.5, 0.7]),
        ablations: cmd.ablations.clone(),
        missing_level: parse_missing_level(&cmd.missing_level)?,
        arch: cmd.arch.resolve(),
        train,
        templates: load_templates(&cmd.templates)?,
        memory_bank: cmd.memory_bank,
    };
    let rows = grid_run(&args)?;
    println!(
        "grid finished: {} cells into {}",
        rows.len(),
        cmd.out.display()
    );
    print_metric_rows(rows.iter().map(|(tag, m)| (tag.as_str(), m)));
    Ok(())
}

fn cmd_params(cmd: &ParamsCmd) -> Result<()> {
    let (rows, total) = params_rows(&cmd.checkpoint)?;
    println!("{:<28} {:>10} {:>10}", "group", "entries", "trainable");
    let mut sum = 0;
    let mut trainable_sum = 0;
    for r in &rows {
        println!(
            "{:<28} {:>10} {:>10}",
            r.label, r.entries, r.trainable_entries
        );
        sum += r.entries;
        trainable_sum += r.trainable_entries;
    }
    println!("{:<28} {:>10} {:>10}", "total", total, trainable_sum);
    if sum != total {
        return Err(CliError::Runtime {
            detail: format!("parameter rows sum to {sum} but the checkpoint holds {total}"),
        });
    }
    Ok(())
}

fn cmd_fewshot(cmd: &FewshotCmd) -> Result<()> {
    let mut train = TrainConfig::default();
    cmd.optim.apply(&mut train);
    let args = FewshotArgs {
        dataset: cmd.dataset.clone(),
        out: cmd.out.clone(),
        seed: resolve_seed(cmd.seed)?,
        ks: cmd.k_shots.clone(),
        arch: cmd.arch.resolve(),
        train,
        templates: load_templates(&cmd.templates)?,
        memory_bank: cmd.memory_bank,
    };
    let rows = fewshot_run(&args)?;
    let labels: Vec<String> = rows.iter().map(|(k, _)| format!("K={k}")).collect();
    print_metric_rows(
        labels
            .iter()
            .map(|l| l.as_str())
            .zip(rows.iter().map(|(_, m)| m)),
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(c) => cmd_generate(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Grid(c) => cmd_grid(c),
        Command::Params(c) => cmd_params(c),
        Command::Fewshot(c) => cmd_fewshot(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
