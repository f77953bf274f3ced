//! `lpcl`: data generation, training, evaluation and saliency from the
//! command line. Every command reads the same TOML config (see
//! `lpcl print-config`) and writes a resolved copy next to its outputs.
//!
//! Exit codes: 0 ok, 2 config or usage error, 3 artifact mismatch or bad
//! file, 4 numerical failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lpcl::evaluation::{
    auc, confusion_metrics, monotone_fraction, stratify_by_visits, visit_level, THRESHOLD,
};
use lpcl::experiment::{
    check_extent, check_split, experiment_split, fold_sets, joint_config, load_checked,
    pretrain_fold, run_experiment, summary_text, write_predictions, ExperimentConfig, Method,
};
use lpcl::model::{Mode, ModelParams, Variant};
use lpcl::objectives::CohortRole;
use lpcl::parallel::{self, Exec};
use lpcl::saliency::{
    average_map, normalize_subject, saliency_matrix, write_matrices, CellSelector, NormRule,
};
use lpcl::synth::{generate, load_dataset, save_dataset, write_volume, Dataset, Split, Subject};
use lpcl::training::{joint_train, predict, Inputs, TrainLog};
use lpcl::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lpcl",
    version,
    about = "Longitudinal pooling + consistency-regularized CNN/GRU classification"
)]
struct Cli {
    /// Worker threads for folds, subjects and saliency rows (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config; fields left out keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one config field, e.g. `--set train.lambda_cons=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed; also used as the data generation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Test,
    Validation,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset: manifest.toml plus LVOL volumes.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the CNN encoder on the training folds of one fold.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Joint training of one model; pre-trains first unless --pretrained is given.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// cnn, ap, rnn, lp or lp_cl; default follows train.variant and train.consistency.
        #[arg(long)]
        method: Option<String>,
        /// Ablation: drop the consistency term.
        #[arg(long)]
        no_consistency: bool,
        /// Keep the pre-trained conv blocks fixed.
        #[arg(long)]
        freeze_conv: bool,
    },
    /// Cross-validated comparison of methods with all report tables.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of cnn, ap, rnn, lp, lp_cl.
        #[arg(long)]
        variants: Option<String>,
    },
    /// Score a checkpoint on a subset of the dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, value_enum, default_value = "test")]
        subset: Subset,
    },
    /// Saliency matrices of a checkpoint plus cohort-average maps.
    Saliency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Expected method of the checkpoint; a different variant is an error.
        #[arg(long)]
        method: Option<String>,
        /// Subject ids; default is the positive subjects of the test fold.
        #[arg(long = "subject")]
        subjects: Vec<String>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value_t = 10)]
        limit: usize,
        /// Normalize by the 98th percentile instead of 0.98 x max.
        #[arg(long)]
        percentile: bool,
    },
    /// Print the resolved config as TOML.
    PrintConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn config_error(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn set_dotted(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error("--set", format!("{assignment:?} is not KEY=VALUE")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| config_error("--set", "empty key"))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_error(key, format!("{p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn resolve_config(c: &Common) -> Result<ExperimentConfig> {
    let mut table = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_error("--config", format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| config_error("--config", e.message().to_string()))?
        }
        None => toml::Table::new(),
    };
    for s in &c.sets {
        set_dotted(&mut table, s)?;
    }
    let mut cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| config_error("config", e.message().to_string()))?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        cfg.data.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn freeze(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml())
}

/// Loads a dataset and adopts its generator config; the stored fold
/// assignment wins over the one derived from the seed.
fn open_data(cfg: &mut ExperimentConfig, path: &Path) -> Result<(Dataset, Split)> {
    let (manifest, data) = load_dataset(path)?;
    cfg.data = data.config.clone();
    check_extent(&cfg.arch, &data)?;
    let sp = match manifest.split()? {
        Some(sp) => sp,
        None => experiment_split(cfg, &data)?,
    };
    check_split(cfg, &data, &sp)?;
    Ok((data, sp))
}

fn parse_method(s: &str) -> Result<Method> {
    Method::parse(s.trim())
}

fn method_of(variant: Variant, consistency: bool) -> Method {
    match variant {
        Variant::Cnn => Method::Cnn,
        Variant::CnnAp => Method::Ap,
        Variant::CnnRnn => Method::Rnn,
        Variant::CnnRnnLp if consistency => Method::LpCl,
        Variant::CnnRnnLp => Method::Lp,
    }
}

fn metrics_csv(
    subjects: &[lpcl::evaluation::SubjectPrediction],
    max_visits: usize,
) -> Result<String> {
    let (scores, labels) = visit_level(subjects);
    let c = confusion_metrics(&scores, &labels, THRESHOLD)?;
    let mut s = String::from("n_visits,sen,spe,bacc,auc,monotone_fraction\n");
    let mono = monotone_fraction(subjects)
        .map(|v| format!("{v:.6}"))
        .unwrap_or_default();
    writeln!(
        s,
        "{},{:.6},{:.6},{:.6},{:.6},{mono}",
        scores.len(),
        c.sen,
        c.spe,
        c.bacc,
        auc(&scores, &labels)?
    )
    .unwrap();
    s.push_str("\nmin_visits,n_control,n_positive,bacc\n");
    for k in 1..=max_visits {
        let st = stratify_by_visits(subjects, k)?;
        let b = st
            .metrics
            .map(|m| format!("{:.6}", m.bacc))
            .unwrap_or_default();
        writeln!(s, "{k},{},{},{b}", st.n_control, st.n_positive).unwrap();
    }
    Ok(s)
}

fn cmd_gen_data(mut cfg: ExperimentConfig, out: &Path) -> Result<()> {
    create_out(out)?;
    let data = generate(&cfg.data)?;
    cfg.data = data.config.clone();
    let sp = experiment_split(&cfg, &data)?;
    save_dataset(out, &data, Some(&sp))?;
    freeze(out, &cfg)?;
    println!(
        "{} subjects, {} visits -> {}",
        data.subjects.len(),
        data.subjects.iter().map(Subject::visits).sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(mut cfg: ExperimentConfig, data: &Path, out: &Path, fold: usize) -> Result<()> {
    let (data, sp) = open_data(&mut cfg, data)?;
    create_out(out)?;
    freeze(out, &cfg)?;
    let sets = fold_sets(&cfg, &data, &sp, fold)?;
    let mut log = TrainLog::append_to(&out.join("pretrain_log.csv"))?;
    let params = pretrain_fold(&cfg, &sets.train, fold, &mut log)?;
    params.save(&out.join("pretrain.lpwt"))?;
    println!(
        "pre-trained on {} subjects, {} epochs",
        sets.train.len(),
        log.rows.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    mut cfg: ExperimentConfig,
    data: &Path,
    out: &Path,
    fold: usize,
    pretrained: Option<&Path>,
    method: Option<Method>,
    no_consistency: bool,
    freeze_conv: bool,
) -> Result<()> {
    let (data, sp) = open_data(&mut cfg, data)?;
    if freeze_conv {
        cfg.train.freeze_conv = true;
    }
    if let Some(m) = method {
        cfg.train.variant = m.variant();
        cfg.train.consistency = m.consistency();
    }
    if no_consistency {
        cfg.train.consistency = false;
    }
    create_out(out)?;
    freeze(out, &cfg)?;
    let sets = fold_sets(&cfg, &data, &sp, fold)?;
    let pre = match pretrained {
        Some(p) => load_checked(p, Variant::Cnn, &cfg.arch)?,
        None => {
            let mut log = TrainLog::append_to(&out.join("pretrain_log.csv"))?;
            let p = pretrain_fold(&cfg, &sets.train, fold, &mut log)?;
            p.save(&out.join("pretrain.lpwt"))?;
            p
        }
    };
    let mut tc = joint_config(
        &cfg,
        method_of(cfg.train.variant, cfg.train.consistency),
        fold,
    );
    tc.variant = cfg.train.variant;
    tc.consistency = cfg.train.consistency;
    let mut log = TrainLog::append_to(&out.join("train_log.csv"))?;
    let outcome = joint_train(&cfg.arch, &pre, &sets.train, &sets.val, &tc, &mut log)?;
    outcome.params.save(&out.join("model.lpwt"))?;
    let inputs: Vec<Inputs> = sets
        .test
        .iter()
        .map(|s| Inputs::Volumes(&s.volumes))
        .collect();
    let preds = predict(&outcome.params, &sets.test, &inputs, Exec::Parallel)?;
    write_predictions(
        &out.join("predictions.csv"),
        &preds,
        outcome.best_epoch,
        outcome.epochs_run,
    )?;
    write_text(
        &out.join("metrics.csv"),
        &metrics_csv(&preds, cfg.data.max_visits)?,
    )?;
    println!(
        "{} fold {fold}: best epoch {} of {}, validation BACC {:.3}",
        tc.variant, outcome.best_epoch, outcome.epochs_run, outcome.best_val_bacc
    );
    Ok(())
}

fn cmd_experiment(
    mut cfg: ExperimentConfig,
    data: &Path,
    out: &Path,
    variants: Option<&str>,
) -> Result<()> {
    if let Some(v) = variants {
        cfg.methods = v
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(parse_method)
            .collect::<Result<_>>()?;
        cfg.validate()?;
    }
    let (data, sp) = open_data(&mut cfg, data)?;
    create_out(out)?;
    let report = run_experiment(&cfg, &data, Some(&sp), Some(out), Exec::Parallel)?;
    print!("{}", summary_text(&report));
    Ok(())
}

fn subset_of(data: &Dataset, sp: &Split, fold: usize, subset: Subset) -> Result<Vec<Subject>> {
    let idx: Vec<usize> = match subset {
        Subset::Test => sp
            .folds
            .get(fold)
            .cloned()
            .ok_or_else(|| config_error("--fold", format!("{fold} out of range")))?,
        Subset::Validation => sp.validation.clone(),
        Subset::All => (0..data.subjects.len()).collect(),
    };
    Ok(idx.into_iter().map(|i| data.subjects[i].clone()).collect())
}

fn cmd_eval(
    mut cfg: ExperimentConfig,
    data: &Path,
    ckpt: &Path,
    out: &Path,
    fold: usize,
    subset: Subset,
) -> Result<()> {
    let (data, sp) = open_data(&mut cfg, data)?;
    let params = ModelParams::load(ckpt)?;
    if params.arch != cfg.arch {
        return Err(Error::Mismatch(format!(
            "{}: checkpoint architecture differs from the config",
            ckpt.display()
        )));
    }
    create_out(out)?;
    freeze(out, &cfg)?;
    let subjects = subset_of(&data, &sp, fold, subset)?;
    let inputs: Vec<Inputs> = subjects
        .iter()
        .map(|s| Inputs::Volumes(&s.volumes))
        .collect();
    let preds = predict(&params, &subjects, &inputs, Exec::Parallel)?;
    write_predictions(&out.join("predictions.csv"), &preds, 0, 0)?;
    let metrics = metrics_csv(&preds, cfg.data.max_visits)?;
    write_text(&out.join("metrics.csv"), &metrics)?;
    print!(
        "{}",
        metrics.lines().take(2).collect::<Vec<_>>().join("\n") + "\n"
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_saliency(
    mut cfg: ExperimentConfig,
    data: &Path,
    ckpt: &Path,
    out: &Path,
    method: Option<Method>,
    ids: &[String],
    fold: usize,
    limit: usize,
    percentile: bool,
) -> Result<()> {
    let (data, sp) = open_data(&mut cfg, data)?;
    let params = ModelParams::load(ckpt)?;
    if let Some(m) = method {
        if params.variant != m.variant() {
            return Err(Error::Mismatch(format!(
                "{}: checkpoint is {}, expected {}",
                ckpt.display(),
                params.variant,
                m.variant()
            )));
        }
    }
    if params.arch != cfg.arch {
        return Err(Error::Mismatch(format!(
            "{}: checkpoint architecture differs from the config",
            ckpt.display()
        )));
    }
    let subjects: Vec<Subject> = if ids.is_empty() {
        subset_of(&data, &sp, fold, Subset::Test)?
            .into_iter()
            .filter(|s| s.role == CohortRole::Positive)
            .take(limit)
            .collect()
    } else {
        ids.iter()
            .map(|id| {
                data.subjects
                    .iter()
                    .find(|s| &s.id == id)
                    .cloned()
                    .ok_or_else(|| config_error("--subject", format!("unknown id {id}")))
            })
            .collect::<Result<_>>()?
    };
    if subjects.is_empty() {
        return Err(config_error("--subject", "no subjects selected"));
    }
    create_out(out)?;
    freeze(out, &cfg)?;
    let rule = if percentile {
        NormRule::Percentile
    } else {
        NormRule::ScaledMax
    };
    let mut matrices = Vec::new();
    for s in &subjects {
        let m = saliency_matrix(&params, &s.id, &s.volumes, Mode::Eval, Exec::Parallel)?;
        let (m, all_zero) = normalize_subject(m, rule);
        if all_zero {
            eprintln!("warning: {} has an all-zero saliency grid", s.id);
        }
        matrices.push(m);
    }
    write_matrices(&out.join("matrices"), &matrices)?;
    let mut index = String::from("selector,file\n");
    for (name, sel) in [
        ("all", CellSelector::All),
        ("diagonal", CellSelector::Diagonal),
        ("upper", CellSelector::Upper),
    ] {
        if let Ok(avg) = average_map(&matrices, sel) {
            let file = format!("average_{name}.lvol");
            write_volume(&out.join(&file), &avg)?;
            writeln!(index, "{name},{file}").unwrap();
        }
    }
    write_text(&out.join("averages.csv"), &index)?;
    println!("{} saliency matrices -> {}", matrices.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(config_error("--jobs", "must be >= 1"));
        }
        parallel::set_jobs(j);
    }
    let common = match &cli.cmd {
        Cmd::GenData { common, .. }
        | Cmd::Pretrain { common, .. }
        | Cmd::Train { common, .. }
        | Cmd::Experiment { common, .. }
        | Cmd::Eval { common, .. }
        | Cmd::Saliency { common, .. }
        | Cmd::PrintConfig { common } => common.clone(),
    };
    let cfg = resolve_config(&common)?;
    if common.print_config || matches!(cli.cmd, Cmd::PrintConfig { .. }) {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    match cli.cmd {
        Cmd::GenData { out, .. } => cmd_gen_data(cfg, &out),
        Cmd::Pretrain {
            data, out, fold, ..
        } => cmd_pretrain(cfg, &data, &out, fold),
        Cmd::Train {
            data,
            out,
            fold,
            pretrained,
            method,
            no_consistency,
            freeze_conv,
            ..
        } => {
            let method = method.as_deref().map(parse_method).transpose()?;
            cmd_train(
                cfg,
                &data,
                &out,
                fold,
                pretrained.as_deref(),
                method,
                no_consistency,
                freeze_conv,
            )
        }
        Cmd::Experiment {
            data,
            out,
            variants,
            ..
        } => cmd_experiment(cfg, &data, &out, variants.as_deref()),
        Cmd::Eval {
            data,
            checkpoint,
            out,
            fold,
            subset,
            ..
        } => cmd_eval(cfg, &data, &checkpoint, &out, fold, subset),
        Cmd::Saliency {
            data,
            checkpoint,
            out,
            method,
            subjects,
            fold,
            limit,
            percentile,
            ..
        } => {
            let method = method.as_deref().map(parse_method).transpose()?;
            cmd_saliency(
                cfg,
                &data,
                &checkpoint,
                &out,
                method,
                &subjects,
                fold,
                limit,
                percentile,
            )
        }
        Cmd::PrintConfig { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
