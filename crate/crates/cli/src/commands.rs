use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Subcommand;
use sha2::{Digest, Sha256};

use gfnet_core::budget::{solve_q, BudgetSolution, CostModel};
use gfnet_core::dataio::{self, synth, Dataset, Manifest, Split};
use gfnet_core::engine::{Engine, InferenceConfig, InferenceMode, PolicyMode};
use gfnet_core::model::checkpoint::{
    checkpoint_digest, load_checkpoint, save_checkpoint, CheckpointMeta,
};
use gfnet_core::model::{hex_string, GfModel};
use gfnet_core::profile::{self, count_ops, Provenance};
use gfnet_core::trainer::{
    stage0_pretrain, stage1_train, stage2_train, stage3_finetune, MetricsRecord,
};

use crate::config::RunConfig;
use crate::outdir::{write_jsonl, OutDir};
use crate::CommonArgs;

fn load_split(cfg: &RunConfig, split: &str) -> Result<Dataset> {
    let path = cfg.dataset_dir.join(format!("{split}.gfds"));
    dataio::load_dataset(&path)
        .with_context(|| format!("loading {split} split from {}", path.display()))
}

fn build_engine<'m>(model: &'m GfModel, ds: &Dataset) -> Result<Engine<'m>> {
    let cost = count_ops(&model.config).cost_model()?;
    Ok(Engine::new(
        model,
        &ds.manifest.mean,
        &ds.manifest.std,
        cost,
    )?)
}

fn config_digest(cfg: &RunConfig) -> Result<String> {
    Ok(hex_string(&Sha256::digest(cfg.to_toml()?.as_bytes())))
}

fn parse_policy(policy: &str, policy_seed: u64) -> Result<PolicyMode> {
    Ok(match policy {
        "learned" => PolicyMode::Learned,
        "random" => PolicyMode::Random { seed: policy_seed },
        "centre-corner" => PolicyMode::CentreCorner,
        other => bail!("unknown policy {other} (expected learned|random|centre-corner)"),
    })
}

// ── train ────────────────────────────────────────────────────────────────

pub fn train(common: &CommonArgs, stage: &str) -> Result<()> {
    let cfg = common.resolve()?;
    let out = OutDir::prepare(&cfg)?;
    let stages: Vec<u32> = match stage {
        "all" => vec![0, 1, 2, 3],
        s => vec![s
            .parse()
            .map_err(|_| anyhow!("stage must be 0, 1, 2, 3, or all"))?],
    };
    if stages.iter().any(|s| *s > 3) {
        bail!("stage must be 0, 1, 2, 3, or all");
    }

    let train_ds = load_split(&cfg, "train")?;
    let val_ds = load_split(&cfg, "val")?;

    for &stage in &stages {
        let mut model = if stage == 0 {
            GfModel::init(cfg.model.clone(), cfg.seed)?
        } else {
            let prev = out.checkpoint(stage - 1);
            if !prev.exists() {
                bail!(
                    "stage {} checkpoint required at {} — run --stage {} first",
                    stage - 1,
                    prev.display(),
                    stage - 1
                );
            }
            load_checkpoint(&prev)?.0
        };

        let mut log: Vec<MetricsRecord> = Vec::new();
        match stage {
            0 => stage0_pretrain(&mut model, &train_ds, &cfg.stage0, &mut log)?,
            1 => stage1_train(&mut model, &train_ds, &cfg.stage1, &mut log)?,
            2 => stage2_train(&mut model, &train_ds, &val_ds, &cfg.stage2, &mut log)?,
            3 => stage3_finetune(&mut model, &train_ds, &cfg.stage3, &mut log)?,
            _ => unreachable!(),
        }
        let meta = CheckpointMeta {
            stage,
            seed_cursor: cfg.seed,
        };
        save_checkpoint(&model, &meta, &out.checkpoint(stage))?;
        write_jsonl(&out.metrics_log(stage), &log)?;
        println!(
            "stage {stage} done: checkpoint {} ({} metric lines)",
            out.checkpoint(stage).display(),
            log.len()
        );
    }
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────────

pub struct EvalArgs {
    pub common: CommonArgs,
    pub checkpoint: PathBuf,
    pub mode: String,
    pub t_star: Option<usize>,
    pub budget: Option<f64>,
    pub policy: String,
    pub policy_seed: u64,
    pub split: String,
    pub calibrate_on: Option<String>,
    pub concurrency: Option<usize>,
    pub latency_reps: Option<usize>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let out = OutDir::prepare(&cfg)?;
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let eval_ds = load_split(&cfg, &args.split)?;
    let engine = build_engine(&model, &eval_ds)?;
    let policy = parse_policy(&args.policy, args.policy_seed)?;
    let concurrency = args.concurrency.unwrap_or(cfg.eval.concurrency);

    let mode = match args.mode.as_str() {
        "full" => InferenceMode::Full,
        "anytime" => InferenceMode::Anytime {
            t_star: args
                .t_star
                .ok_or_else(|| anyhow!("--t-star is required with --mode anytime"))?,
        },
        "budgeted" => {
            let budget = args
                .budget
                .ok_or_else(|| anyhow!("--budget is required with --mode budgeted"))?;
            let cal_split = args
                .calibrate_on
                .unwrap_or_else(|| cfg.eval.calibrate_on.clone());
            let cal_ds = load_split(&cfg, &cal_split)?;
            let confidences = engine.confidence_corpus(&cal_ds, policy, concurrency)?;
            let solution = BudgetSolution::solve(budget, &engine.cost, &confidences)
                .map_err(|e| anyhow!("{e} (choose a budget within the printed range)"))?;
            std::fs::write(out.root.join("budget-solution.txt"), solution.to_text())?;
            InferenceMode::Budgeted {
                thresholds: solution.thresholds,
            }
        }
        other => bail!("unknown mode {other} (expected full|anytime|budgeted)"),
    };

    let infer_cfg = InferenceConfig { mode, policy };
    let (traces, summary) = engine.batch_infer(&eval_ds, &infer_cfg, concurrency)?;
    write_jsonl(&out.traces_file("eval-traces.jsonl"), &traces)?;
    std::fs::write(
        out.root.join("logs/eval-summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    println!(
        "split {} n {} accuracy {:.4} avg_cost {:.1}",
        args.split, summary.n, summary.accuracy, summary.avg_cost
    );
    println!("exit histogram: {:?}", summary.exit_counts);

    if let Some(reps) = args.latency_reps {
        let sample = eval_ds.image_f32(0);
        let lat = profile::measure_latency(&engine, &sample, reps)?;
        for (t, ms) in lat.iter().enumerate() {
            println!("latency t={} {:.3} ms", t + 1, ms);
        }
        println!(
            "exit-weighted latency {:.3} ms",
            profile::weighted_latency(&lat, &summary.exit_counts)
        );
    }
    Ok(())
}

// ── sweep ────────────────────────────────────────────────────────────────

pub struct SweepArgs {
    pub common: CommonArgs,
    pub checkpoint: PathBuf,
    pub budgets: String,
    pub points: usize,
    pub split: String,
    pub calibrate_on: Option<String>,
    pub concurrency: Option<usize>,
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let out = OutDir::prepare(&cfg)?;
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let eval_ds = load_split(&cfg, &args.split)?;
    let engine = build_engine(&model, &eval_ds)?;
    let concurrency = args.concurrency.unwrap_or(cfg.eval.concurrency);

    let budgets: Vec<f64> = if args.budgets == "auto" {
        profile::auto_budgets(&engine.cost, args.points)
    } else {
        args.budgets
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| anyhow!("bad budget {t}"))
            })
            .collect::<Result<_>>()?
    };

    let cal_split = args
        .calibrate_on
        .unwrap_or_else(|| cfg.eval.calibrate_on.clone());
    let cal_ds = load_split(&cfg, &cal_split)?;
    let confidences = engine.confidence_corpus(&cal_ds, PolicyMode::Learned, concurrency)?;

    let result = profile::sweep_budgets(&engine, &eval_ds, &confidences, &budgets, concurrency)?;
    for (budget, reason) in &result.skipped {
        eprintln!("notice: budget {budget} skipped: {reason}");
    }

    let prov = Provenance {
        checkpoint_digest: checkpoint_digest(&args.checkpoint)?,
        config_digest: config_digest(&cfg)?,
        seed: cfg.seed,
    };
    let csv_path = out.curves_file("sweep.csv");
    profile::export_csv(&result.points, &prov, &csv_path)?;
    write_jsonl(&out.curves_file("sweep.jsonl"), &result.points)?;
    println!(
        "{} curve points -> {}",
        result.points.len(),
        csv_path.display()
    );
    for p in &result.points {
        println!(
            "budget {:>14.1} accuracy {:.4} realized {:>14.1} q {:.6}",
            p.budget, p.accuracy, p.realized_cost, p.q
        );
    }
    Ok(())
}

// ── trace ────────────────────────────────────────────────────────────────

#[derive(serde::Serialize)]
struct TraceDump {
    trace: gfnet_core::engine::EpisodeTrace,
    /// Patch pixel windows (top, left, h, w) per focus step.
    windows: Vec<(usize, usize, usize, usize)>,
}

pub fn trace(
    common: &CommonArgs,
    checkpoint: &Path,
    ids: &str,
    split: &str,
    policy: &str,
    policy_seed: u64,
) -> Result<()> {
    let cfg = common.resolve()?;
    let out = OutDir::prepare(&cfg)?;
    let (model, _) = load_checkpoint(checkpoint)?;
    let ds = load_split(&cfg, split)?;
    let engine = build_engine(&model, &ds)?;
    let policy = parse_policy(policy, policy_seed)?;

    let ids: Vec<usize> = ids
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| anyhow!("bad id {t}")))
        .collect::<Result<_>>()?;
    for &id in &ids {
        if id >= ds.len() {
            bail!("unknown sample id {id} (split {split} has {} samples)", ds.len());
        }
    }

    let infer_cfg = InferenceConfig {
        mode: InferenceMode::Full,
        policy,
    };
    for &id in &ids {
        let tr = engine.infer(&ds.image_f32(id), Some(ds.label(id)), id, &infer_cfg)?;
        let windows = engine.trace_windows(&tr, ds.h, ds.w);
        let dump = TraceDump { trace: tr, windows };
        let path = out.traces_file(&format!("trace-{id}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
        println!("sample {id} -> {}", path.display());
    }
    Ok(())
}

// ── convert-dataset ──────────────────────────────────────────────────────

#[derive(Debug, Subcommand)]
pub enum ConvertSource {
    /// Generate the procedural striped-glyph corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3000)]
        n_train: usize,
        #[arg(long, default_value_t = 600)]
        n_val: usize,
        #[arg(long, default_value_t = 600)]
        n_test: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Convert packed label+pixel records: each record is one label byte
    /// followed by channels*side*side pixel bytes.
    Packed {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_packed(
    path: &Path,
    channels: usize,
    side: usize,
    classes: usize,
    split: Split,
    manifest: Manifest,
) -> Result<Dataset> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let record = 1 + channels * side * side;
    if bytes.len() % record != 0 {
        bail!(
            "{}: {} bytes is not a multiple of the {}-byte record",
            path.display(),
            bytes.len(),
            record
        );
    }
    let n = bytes.len() / record;
    let mut images = Vec::with_capacity(n * (record - 1));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &bytes[i * record..(i + 1) * record];
        labels.push(rec[0] as u16);
        images.extend_from_slice(&rec[1..]);
    }
    let mut m = manifest;
    m.split = split;
    Ok(Dataset::from_parts(
        (channels, side, side),
        classes,
        images,
        labels,
        m,
    )?)
}

pub fn convert_dataset(source: ConvertSource) -> Result<()> {
    match source {
        ConvertSource::Synth {
            out,
            n_train,
            n_val,
            n_test,
            seed,
        } => {
            std::fs::create_dir_all(&out)?;
            let corpus = synth::generate(synth::SynthSpec {
                n_train,
                n_val,
                n_test,
                seed,
            })?;
            for (name, ds) in [
                ("train", &corpus.train),
                ("val", &corpus.val),
                ("test", &corpus.test),
            ] {
                let path = out.join(format!("{name}.gfds"));
                dataio::save_dataset(ds, &path)?;
                println!("{name}: {} samples -> {}", ds.len(), path.display());
            }
        }
        ConvertSource::Packed {
            train,
            val,
            test,
            channels,
            side,
            classes,
            out,
        } => {
            std::fs::create_dir_all(&out)?;
            let blank = Manifest {
                source: format!("packed:{}", train.display()),
                split: Split::Train,
                mean: vec![0.0; channels],
                std: vec![1.0; channels],
            };
            let mut train_ds =
                parse_packed(&train, channels, side, classes, Split::Train, blank.clone())?;
            let (mean, std) = train_ds.pixel_stats();
            train_ds.manifest.mean = mean.clone();
            train_ds.manifest.std = std.clone();
            dataio::save_dataset(&train_ds, &out.join("train.gfds"))?;
            println!("train: {} samples", train_ds.len());
            for (name, path, split) in
                [("val", &val, Split::Val), ("test", &test, Split::Test)]
            {
                let m = Manifest {
                    source: format!("packed:{}", path.display()),
                    split,
                    mean: mean.clone(),
                    std: std.clone(),
                };
                let ds = parse_packed(path, channels, side, classes, split, m)?;
                dataio::save_dataset(&ds, &out.join(format!("{name}.gfds")))?;
                println!("{name}: {} samples", ds.len());
            }
        }
    }
    Ok(())
}

// ── solve-budget ─────────────────────────────────────────────────────────

pub fn solve_budget(budget: f64, costs: Option<&str>, checkpoint: Option<&Path>) -> Result<()> {
    let cost = match (costs, checkpoint) {
        (Some(text), _) => CostModel::new(
            text.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| anyhow!("bad cost {t}"))
                })
                .collect::<Result<Vec<_>>>()?,
        )?,
        (None, Some(path)) => {
            let (model, _) = load_checkpoint(path)?;
            count_ops(&model.config).cost_model()?
        }
        (None, None) => bail!("pass --costs or --checkpoint"),
    };
    let exit = solve_q(budget, &cost, cost.t_max())?;
    let expected = gfnet_core::budget::expected_cost(&exit, &cost)?;
    println!("budget = {budget}");
    println!("q = {}", exit.q);
    println!("z = {}", exit.z);
    println!(
        "q_t = {}",
        exit.probs
            .iter()
            .map(|p| format!("{p}"))
            .collect::<Vec<_>>()
            .join(",")
    );
    println!(
        "cost = {}",
        cost.per_exit
            .iter()
            .map(|c| format!("{c}"))
            .collect::<Vec<_>>()
            .join(",")
    );
    println!("expected_cost = {expected}");
    Ok(())
}
