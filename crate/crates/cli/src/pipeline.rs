//! The experiment pipeline behind each subcommand: dataset-driven training
//! runs (warmup → prompt training → galleries), evaluation with missing
//! schedules, grid sweeps, few-shot restriction, and parameter accounting.

use std::fs;
use std::path::{Path, PathBuf};

use misdd_core::derive_seed;
use misdd_data::{load_dataset, Dataset, PairedSample, SampleRecord, Split};
use misdd_metrics::{
    evaluate_run, BinaryMask, MetricsReport, RunReport, ScoredSample, DEFAULT_FPR_LIMIT,
    DEFAULT_IOU_TAU,
};
use misdd_model::{
    apply_input_level, build_galleries, detect, few_shot_included, replicate_depth, run_training,
    run_warmup, sample_schedule, Galleries, MissingLevel, MissingSpec, MissingType, Model,
    ModalityIndicator, ModelConfig, ParamGroupRow, TextTemplates, TrainConfig, TrainContext,
    TrainSample, WarmupSample,
};

use crate::io::{
    ablation_tag, defect_type_name, export_heatmap, fmt_exact, fmt_metric, write_dir_atomic,
    CsvWriter, RunConfig, ScheduleCounts,
};
use crate::{CliError, Result};

pub const METRICS_HEADER: [&str; 8] = [
    "class",
    "missing_type",
    "eta",
    "ablation",
    "i_auroc",
    "p_auroc",
    "aupro_paper",
    "aupro_standard",
];

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub missing_type: MissingType,
    pub eta: f64,
    pub missing_level: MissingLevel,
    pub arch: ModelConfig,
    pub train: TrainConfig,
    pub k_shot: Option<usize>,
    pub templates: TextTemplates,
    /// Reuse an already-warmed checkpoint instead of running warmup.
    pub warmup_from: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub run_dir: PathBuf,
    pub dataset: PathBuf,
    /// Defaults to the run directory.
    pub out: Option<PathBuf>,
    /// Test-time schedule overrides; each defaults to the training setting.
    pub missing_type: Option<MissingType>,
    pub eta: Option<f64>,
    pub missing_level: Option<MissingLevel>,
    pub seed: Option<u64>,
    pub memory_bank: bool,
    pub export_heatmaps: bool,
}

#[derive(Debug)]
pub struct EvalSummary {
    pub report: RunReport,
    pub schedule_test: ScheduleCounts,
    pub out_dir: PathBuf,
    pub warnings: Vec<String>,
}

fn check_image_size(arch: &ModelConfig, ds: &Dataset, what: &str) -> Result<()> {
    let have = ds.spec().image_size;
    let want = arch.encoder.image_size;
    if have != want {
        return Err(CliError::Runtime {
            detail: format!(
                "image size mismatch: {what} expects {want}×{want} but dataset \
                 `{}` holds {have}×{have} images",
                ds.root().display()
            ),
        });
    }
    Ok(())
}

fn counts_of(inds: &[ModalityIndicator]) -> ScheduleCounts {
    ScheduleCounts {
        n: inds.len(),
        rgb_missing: inds.iter().filter(|i| !i.rgb).count(),
        td_missing: inds.iter().filter(|i| !i.td).count(),
    }
}

/// Builds model-facing samples for one split under a missing schedule.
/// Input-level missing zeroes the planes here; feature-level missing is
/// handled downstream by the encoder wrapper.
fn assemble_samples<'d>(
    ds: &'d Dataset,
    split: Split,
    spec: &MissingSpec,
    label: &str,
) -> Result<(Vec<TrainSample>, Vec<&'d SampleRecord>, ScheduleCounts)> {
    let pairs: Vec<(&SampleRecord, &PairedSample)> = ds.iter_split(split).collect();
    let inds = sample_schedule(pairs.len(), spec, label)?;
    let mut samples = Vec::with_capacity(pairs.len());
    let mut records = Vec::with_capacity(pairs.len());
    for ((rec, p), ind) in pairs.into_iter().zip(inds.iter().copied()) {
        let mut rgb = p.rgb.clone();
        let mut td = replicate_depth(&p.depth);
        if spec.level == MissingLevel::Input {
            apply_input_level(&mut rgb, &mut td, ind);
        }
        samples.push(TrainSample {
            id: rec.id.clone(),
            class_name: rec.class_name.clone(),
            rgb,
            td,
            ind,
            included: true,
        });
        records.push(rec);
    }
    Ok((samples, records, counts_of(&inds)))
}

fn warmup_samples(ds: &Dataset) -> Vec<WarmupSample> {
    ds.iter_split(Split::Train)
        .map(|(rec, p)| WarmupSample {
            id: rec.id.clone(),
            rgb: p.rgb.clone(),
            td: replicate_depth(&p.depth),
        })
        .collect()
}

/// Warms up a fresh model on the complete training split and saves the
/// checkpoint (with its warmup loss log) into `out`. Reused by `train`
/// and shared across grid cells.
pub fn warmup_to(
    dataset: &Path,
    out: &Path,
    seed: u64,
    arch: &ModelConfig,
    train: &TrainConfig,
) -> Result<PathBuf> {
    let ds = load_dataset(dataset)?;
    check_image_size(arch, &ds, "the configured encoder")?;
    let mut model = Model::init(arch.clone(), seed)?;
    let losses = run_warmup(&mut model.store, arch, &warmup_samples(&ds), train, seed)?;
    model.freeze_vision();
    fs::create_dir_all(out)?;
    let ckpt = out.join("checkpoint");
    write_dir_atomic(&ckpt, |d| model.save(d).map_err(CliError::from))?;
    let mut csv = CsvWriter::new(&out.join("warmup_loss.csv"), &["epoch", "loss"]);
    for (e, l) in losses.iter().enumerate() {
        csv.row(&[e.to_string(), fmt_exact(*l)]);
    }
    csv.finish()?;
    Ok(ckpt)
}

/// One full training run: warmup (or reuse), schedule, prompt training,
/// galleries, and the run-directory artifacts.
pub fn train_run(args: &TrainArgs) -> Result<RunConfig> {
    args.arch.validate()?;
    args.train.validate()?;
    args.templates.validate()?;
    let ds = load_dataset(&args.dataset)?;
    check_image_size(&args.arch, &ds, "the configured encoder")?;
    fs::create_dir_all(&args.out)?;

    // Stage 1: warmed-up, frozen encoders.
    let mut model = match &args.warmup_from {
        Some(ckpt) => Model::load(ckpt, args.arch.clone())?,
        None => {
            let ckpt = warmup_to(&args.dataset, &args.out, args.seed, &args.arch, &args.train)?;
            Model::load(&ckpt, args.arch.clone())?
        }
    };
    model.prepare_prompt_training();

    // Stage 2: the missing-configured training split.
    let spec = MissingSpec {
        missing_type: args.missing_type,
        eta: args.eta,
        seed: args.seed,
        level: args.missing_level,
    };
    spec.validate()?;
    let (mut samples, _, schedule_train) =
        assemble_samples(&ds, Split::Train, &spec, "schedule.train")?;
    if let Some(k) = args.k_shot {
        let included = few_shot_included(&samples, k, args.seed)?;
        for (s, inc) in samples.iter_mut().zip(included) {
            s.included = inc;
        }
    }

    let ctx = TrainContext {
        arch: args.arch.clone(),
        act: args.train.activation(),
        level: args.missing_level,
        templates: args.templates.clone(),
        skip_missing_terms: args.train.skip_missing_terms,
    };

    // Stage 3: symmetric contrastive prompt training (skipped entirely for
    // the no-scl ablation — galleries then reflect warmup features).
    let losses = if args.train.use_scl {
        run_training(&mut model.store, &ctx, &samples, &args.train, args.seed)?
    } else {
        Vec::new()
    };
    let mut csv = CsvWriter::new(
        &args.out.join("loss.csv"),
        &["epoch", "l_rgb_n", "l_3d_n", "l_rgb_an", "l_3d_an", "total"],
    );
    for (e, b) in losses.iter().enumerate() {
        csv.row(&[
            e.to_string(),
            fmt_exact(b.l_rgb_n),
            fmt_exact(b.l_3d_n),
            fmt_exact(b.l_rgb_an),
            fmt_exact(b.l_3d_an),
            fmt_exact(b.total),
        ]);
    }
    csv.finish()?;

    // Stage 4: galleries from the included, present modalities.
    let galleries = build_galleries(&model.store, &ctx, &samples)?;
    for w in &galleries.warnings {
        eprintln!("warning: {w}");
    }

    write_dir_atomic(&args.out.join("checkpoint"), |d| {
        model.save(d).map_err(CliError::from)
    })?;
    write_dir_atomic(&args.out.join("galleries"), |d| {
        galleries.save(d).map_err(CliError::from)
    })?;

    let config = RunConfig {
        seed: args.seed,
        dataset: args.dataset.display().to_string(),
        arch: args.arch.clone(),
        train: args.train.clone(),
        missing_type: args.missing_type,
        eta: args.eta,
        missing_level: args.missing_level,
        k_shot: args.k_shot,
        ablation: ablation_tag(&args.train),
        templates: args.templates.clone(),
        warmup_from: args.warmup_from.as_ref().map(|p| p.display().to_string()),
        schedule_train,
    };
    config.save(&args.out)?;
    Ok(config)
}

/// Evaluates a trained run directory on a dataset's test split under a
/// missing schedule, writing metrics.csv, scores.csv, and optional
/// heatmaps.
pub fn eval_run(args: &EvalArgs) -> Result<EvalSummary> {
    let cfg = RunConfig::load(&args.run_dir)?;
    let ds = load_dataset(&args.dataset)?;
    check_image_size(&cfg.arch, &ds, "the checkpoint")?;
    if ds.manifest().test_split_degenerate {
        return Err(CliError::Runtime {
            detail: format!(
                "test split of `{}` is degenerate (single image-level label); \
                 ranking metrics are undefined",
                args.dataset.display()
            ),
        });
    }

    let model = Model::load(&args.run_dir.join("checkpoint"), cfg.arch.clone())?;
    let galleries = Galleries::load(&args.run_dir.join("galleries"))?;
    let missing_type = args.missing_type.unwrap_or(cfg.missing_type);
    let eta = args.eta.unwrap_or(cfg.eta);
    let level = args.missing_level.unwrap_or(cfg.missing_level);
    let seed = args.seed.unwrap_or(cfg.seed);
    let spec = MissingSpec {
        missing_type,
        eta,
        seed,
        level,
    };
    spec.validate()?;

    let (samples, records, schedule_test) =
        assemble_samples(&ds, Split::Test, &spec, "schedule.test")?;
    let ctx = TrainContext {
        arch: cfg.arch.clone(),
        act: cfg.train.activation(),
        level,
        templates: cfg.templates.clone(),
        skip_missing_terms: cfg.train.skip_missing_terms,
    };

    let out_dir = args.out.clone().unwrap_or_else(|| args.run_dir.clone());
    fs::create_dir_all(&out_dir)?;
    let mut scored = Vec::with_capacity(samples.len());
    let mut scores_csv = CsvWriter::new(
        &out_dir.join("scores.csv"),
        &["id", "class", "defect_type", "label", "rgb_present", "td_present", "s_im"],
    );
    for (sample, rec) in samples.iter().zip(&records) {
        let pair = detect(&model.store, &ctx, &galleries, sample, args.memory_bank)?;
        let (_, paired) = ds.get(&rec.id).expect("record ids index the dataset");
        let mask = &paired.gt_mask;
        let mut gt = BinaryMask::zeros(mask.height(), mask.width());
        for r in 0..mask.height() {
            for c in 0..mask.width() {
                gt.set(r, c, mask.get(r, c));
            }
        }
        scores_csv.row(&[
            rec.id.clone(),
            rec.class_name.clone(),
            defect_type_name(rec.defect_type).to_string(),
            rec.label.to_string(),
            u8::from(sample.ind.rgb).to_string(),
            u8::from(sample.ind.td).to_string(),
            fmt_exact(pair.s_im),
        ]);
        if args.export_heatmaps {
            export_heatmap(&out_dir.join("heatmaps"), paired, sample.ind.rgb, &pair.s_px)?;
        }
        scored.push(ScoredSample {
            class_name: rec.class_name.clone(),
            label: rec.label,
            image_score: pair.s_im,
            pixel_map: pair.s_px,
            gt_mask: gt,
        });
    }
    scores_csv.finish()?;

    let report = evaluate_run(&scored, DEFAULT_IOU_TAU, DEFAULT_FPR_LIMIT)?;
    let mut metrics_csv = CsvWriter::new(&out_dir.join("metrics.csv"), &METRICS_HEADER);
    let write_row = |csv: &mut CsvWriter, class: &str, m: &MetricsReport| {
        csv.row(&[
            class.to_string(),
            missing_type.as_str().to_string(),
            fmt_exact(eta),
            cfg.ablation.clone(),
            fmt_metric(m.i_auroc),
            fmt_metric(m.p_auroc),
            fmt_metric(m.aupro_paper),
            fmt_metric(m.aupro_standard),
        ]);
    };
    for (class, m) in &report.per_class {
        write_row(&mut metrics_csv, class, m);
    }
    write_row(&mut metrics_csv, "mean", &report.mean);
    metrics_csv.finish()?;

    Ok(EvalSummary {
        report,
        schedule_test,
        out_dir,
        warnings: galleries.warnings.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct GridArgs {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub missing_types: Vec<MissingType>,
    pub etas: Vec<f64>,
    pub ablations: Vec<String>,
    pub missing_level: MissingLevel,
    pub arch: ModelConfig,
    pub train: TrainConfig,
    pub templates: TextTemplates,
    pub memory_bank: bool,
}

/// Runs the full (seed × type × eta × ablation) grid. Warmup happens once
/// per seed — it does not depend on the schedule — and every cell trains
/// and evaluates from that shared frozen encoder under a seed derived
/// from its own coordinates, so cell RNG is independent of cell order.
/// Returns the per-cell mean metrics in execution order.
pub fn grid_run(args: &GridArgs) -> Result<Vec<(String, MetricsReport)>> {
    if args.seeds.is_empty()
        || args.missing_types.is_empty()
        || args.etas.is_empty()
        || args.ablations.is_empty()
    {
        return Err(CliError::Usage {
            detail: "grid axes must be nonempty (seeds, missing types, etas, ablations)".into(),
        });
    }
    if let Some(bad) = args
        .missing_types
        .iter()
        .find(|t| **t == MissingType::None)
    {
        return Err(CliError::Usage {
            detail: format!(
                "grid missing types cover incomplete-modality cells; `{}` is not one \
                 (train a complete model with the train command)",
                bad.as_str()
            ),
        });
    }
    fs::create_dir_all(&args.out)?;
    let multi_seed = args.seeds.len() > 1;
    let mut rows = Vec::new();
    let mut csv = CsvWriter::new(&args.out.join("grid.csv"), &METRICS_HEADER);
    for &seed in &args.seeds {
        let warmup_dir = if multi_seed {
            args.out.join(format!("shared_warmup_seed{seed}"))
        } else {
            args.out.join("shared_warmup")
        };
        let warmup_ckpt = warmup_to(
            &args.dataset,
            &warmup_dir,
            derive_seed(seed, "grid.warmup"),
            &args.arch,
            &args.train,
        )?;
        for missing_type in &args.missing_types {
            for &eta in &args.etas {
                for ablation in &args.ablations {
                    let mut train = args.train.clone();
                    crate::io::apply_ablation(&mut train, ablation)?;
                    let tag =
                        format!("{}_eta{}_{}", missing_type.as_str(), fmt_exact(eta), ablation);
                    let cell_dir = if multi_seed {
                        args.out.join(format!("seed{seed}_{tag}"))
                    } else {
                        args.out.join(&tag)
                    };
                    let cell_seed = derive_seed(seed, &format!("cell.{tag}"));
                    train_run(&TrainArgs {
                        dataset: args.dataset.clone(),
                        out: cell_dir.clone(),
                        seed: cell_seed,
                        missing_type: *missing_type,
                        eta,
                        missing_level: args.missing_level,
                        arch: args.arch.clone(),
                        train,
                        k_shot: None,
                        templates: args.templates.clone(),
                        warmup_from: Some(warmup_ckpt.clone()),
                    })?;
                    let summary = eval_run(&EvalArgs {
                        run_dir: cell_dir,
                        dataset: args.dataset.clone(),
                        out: None,
                        missing_type: None,
                        eta: None,
                        missing_level: None,
                        seed: None,
                        memory_bank: args.memory_bank,
                        export_heatmaps: false,
                    })?;
                    let m = &summary.report.mean;
                    csv.row(&[
                        "mean".to_string(),
                        missing_type.as_str().to_string(),
                        fmt_exact(eta),
                        ablation.clone(),
                        fmt_metric(m.i_auroc),
                        fmt_metric(m.p_auroc),
                        fmt_metric(m.aupro_paper),
                        fmt_metric(m.aupro_standard),
                    ]);
                    rows.push((tag, summary.report.mean.clone()));
                }
            }
        }
    }
    csv.finish()?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct FewshotArgs {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub ks: Vec<usize>,
    pub arch: ModelConfig,
    pub train: TrainConfig,
    pub templates: TextTemplates,
    pub memory_bank: bool,
}

/// K-shot protocol: per K, train on K complete samples per class (all
/// other training samples excluded) and evaluate on the untouched test
/// split. Emits fewshot.csv with a leading `k` column.
pub fn fewshot_run(args: &FewshotArgs) -> Result<Vec<(usize, MetricsReport)>> {
    if args.ks.is_empty() {
        return Err(CliError::Usage {
            detail: "fewshot needs at least one K".into(),
        });
    }
    fs::create_dir_all(&args.out)?;
    let warmup_ckpt = warmup_to(
        &args.dataset,
        &args.out.join("shared_warmup"),
        derive_seed(args.seed, "fewshot.warmup"),
        &args.arch,
        &args.train,
    )?;
    let mut header = vec!["k"];
    header.extend_from_slice(&METRICS_HEADER);
    let mut csv = CsvWriter::new(&args.out.join("fewshot.csv"), &header);
    let mut rows = Vec::new();
    for &k in &args.ks {
        let cell_dir = args.out.join(format!("k{k}"));
        train_run(&TrainArgs {
            dataset: args.dataset.clone(),
            out: cell_dir.clone(),
            seed: derive_seed(args.seed, &format!("fewshot.k{k}")),
            missing_type: MissingType::None,
            eta: 0.0,
            missing_level: MissingLevel::Input,
            arch: args.arch.clone(),
            train: args.train.clone(),
            k_shot: Some(k),
            templates: args.templates.clone(),
            warmup_from: Some(warmup_ckpt.clone()),
        })?;
        let summary = eval_run(&EvalArgs {
            run_dir: cell_dir,
            dataset: args.dataset.clone(),
            out: None,
            missing_type: None,
            eta: None,
            missing_level: None,
            seed: None,
            memory_bank: args.memory_bank,
            export_heatmaps: false,
        })?;
        for (class, m) in summary
            .report
            .per_class
            .iter()
            .map(|(c, m)| (c.as_str(), m))
            .chain(std::iter::once(("mean", &summary.report.mean)))
        {
            csv.row(&[
                k.to_string(),
                class.to_string(),
                "none".to_string(),
                fmt_exact(0.0),
                ablation_tag(&args.train),
                fmt_metric(m.i_auroc),
                fmt_metric(m.p_auroc),
                fmt_metric(m.aupro_paper),
                fmt_metric(m.aupro_standard),
            ]);
        }
        rows.push((k, summary.report.mean.clone()));
    }
    csv.finish()?;
    Ok(rows)
}

/// Parameter-count rows of a run's checkpoint plus the loader's total:
/// the conservation law `Σ rows = total` is asserted by callers/tests.
pub fn params_rows(run_dir: &Path) -> Result<(Vec<ParamGroupRow>, usize)> {
    let cfg = RunConfig::load(run_dir)?;
    let model = Model::load(&run_dir.join("checkpoint"), cfg.arch)?;
    let rows = model.params_report();
    let total = model.store.total_entries();
    Ok((rows, total))
}
