//! Cross-validated comparison of methods: split, per-fold pre-training,
//! joint training of every method, evaluation and report files.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{
    auc, confusion_metrics, delong_test, fisher_exact, mean_std, monotone_fraction,
    stratify_by_visits, visit_level, Confusion, DelongResult, Stratum, SubjectPrediction,
    THRESHOLD,
};
use crate::model::{ArchConfig, ModelParams, Variant};
use crate::objectives::CohortRole;
use crate::parallel::{self, Exec};
use crate::rng;
use crate::synth::{augment, split, AugmentConfig, Dataset, Split, Subject, SynthConfig};
use crate::training::{
    input_views, joint_train, predict, pretrain_encoder, trunk_cache, TrainConfig, TrainLog,
};

/// One row of the method comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cnn,
    Ap,
    Rnn,
    Lp,
    LpCl,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Cnn,
        Method::Ap,
        Method::Rnn,
        Method::Lp,
        Method::LpCl,
    ];

    pub fn variant(self) -> Variant {
        match self {
            Method::Cnn => Variant::Cnn,
            Method::Ap => Variant::CnnAp,
            Method::Rnn => Variant::CnnRnn,
            Method::Lp | Method::LpCl => Variant::CnnRnnLp,
        }
    }

    pub fn consistency(self) -> bool {
        self == Method::LpCl
    }

    pub fn key(self) -> &'static str {
        match self {
            Method::Cnn => "cnn",
            Method::Ap => "ap",
            Method::Rnn => "rnn",
            Method::Lp => "lp",
            Method::LpCl => "lp_cl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| {
                Error::config(
                    "methods",
                    format!("unknown method {s:?} (cnn, ap, rnn, lp, lp_cl)"),
                )
            })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::LpCl => f.write_str("CNN+RNN+LP+CL"),
            m => write!(f, "{}", m.variant()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub folds: usize,
    pub val_frac: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            folds: 5,
            val_frac: 0.1,
        }
    }
}

/// Everything a run needs; printed in full by `print-config` and frozen
/// next to the outputs of every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed for splitting, augmentation and training.
    pub seed: u64,
    pub methods: Vec<Method>,
    /// Reference method for the DeLong comparisons.
    pub reference: Method,
    pub data: SynthConfig,
    pub arch: ArchConfig,
    /// `variant` and `consistency` are set per method by the experiment.
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub split: SplitConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            methods: Method::ALL.to_vec(),
            reference: Method::LpCl,
            data: SynthConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            split: SplitConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::config("methods", "select at least one method"));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::config("methods", "duplicate method"));
        }
        if self.arch.input_extent != self.data.extent {
            return Err(Error::config(
                "arch.input_extent",
                format!(
                    "{} differs from data.extent {}",
                    self.arch.input_extent, self.data.extent
                ),
            ));
        }
        self.data.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.split.folds < 2 {
            return Err(Error::config("split.folds", "need at least 2 folds"));
        }
        if !(self.split.val_frac > 0.0 && self.split.val_frac < 1.0) {
            return Err(Error::config("split.val_frac", "must be in (0, 1)"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))
    }

    /// Training config of one method in this experiment.
    pub fn method_train(&self, method: Method) -> TrainConfig {
        TrainConfig {
            variant: method.variant(),
            consistency: method.consistency(),
            seed: rng::derive_seed(self.seed, "train", 0),
            ..self.train.clone()
        }
    }
}

/// Test-fold outcome of one method.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub method: Method,
    pub metrics: Confusion,
    pub auc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub predictions: Vec<SubjectPrediction>,
}

/// Pooled summary of one method across folds.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub sen_mean: f64,
    pub spe_mean: f64,
    pub bacc_mean: f64,
    pub bacc_std: f64,
    pub auc_fold_mean: f64,
    pub auc_pooled: f64,
    pub fisher_p: f64,
    pub monotone_fraction: Option<f64>,
    pub strata: Vec<Stratum>,
    /// All test predictions, fold by fold.
    pub predictions: Vec<SubjectPrediction>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub method: Method,
    pub reference: Method,
    pub delong: DelongResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub folds: Vec<FoldResult>,
    pub methods: Vec<MethodSummary>,
    pub comparisons: Vec<Comparison>,
}

impl ExperimentReport {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

/// Output layout of a run directory.
struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn checkpoint(&self, fold: usize, name: &str) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("fold{fold}_{name}.lpwt"))
    }

    fn predictions(&self, fold: usize, m: Method) -> PathBuf {
        self.root
            .join("predictions")
            .join(format!("fold{fold}_{}.csv", m.key()))
    }

    fn log(&self, fold: usize, name: &str) -> PathBuf {
        self.root
            .join("logs")
            .join(format!("fold{fold}_{name}.csv"))
    }

    fn create(&self) -> Result<()> {
        for sub in ["checkpoints", "predictions", "logs"] {
            let p = self.root.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

const PRED_HEADER: &str = "id,role,visit,label,p,best_epoch,epochs_run";

fn role_key(r: CohortRole) -> &'static str {
    match r {
        CohortRole::Control => "control",
        CohortRole::Positive => "positive",
        CohortRole::ConsistencyOnly => "consistency_only",
    }
}

pub fn write_predictions(
    path: &Path,
    preds: &[SubjectPrediction],
    best_epoch: usize,
    epochs_run: usize,
) -> Result<()> {
    let mut s = format!("{PRED_HEADER}\n");
    for p in preds {
        for (t, (&y, &v)) in p.labels.iter().zip(&p.preds).enumerate() {
            writeln!(
                s,
                "{},{},{},{},{v:e},{best_epoch},{epochs_run}",
                p.id,
                role_key(p.role),
                t + 1,
                y as u8
            )
            .expect("string write");
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a predictions file back, checking it against the fold's test subjects.
pub fn read_predictions(
    path: &Path,
    test: &[Subject],
) -> Result<(Vec<SubjectPrediction>, usize, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: String| Error::Malformed {
        path: path.to_path_buf(),
        detail: d,
    };
    let mut lines = text.lines();
    if lines.next() != Some(PRED_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    let mut by_id: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let (mut best, mut run) = (0, 0);
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(format!("row {line:?}")));
        }
        let p: f64 = f[4].parse().map_err(|_| bad(format!("score {:?}", f[4])))?;
        best = f[5].parse().map_err(|_| bad("best_epoch".into()))?;
        run = f[6].parse().map_err(|_| bad("epochs_run".into()))?;
        by_id.entry(f[0].to_string()).or_default().push(p);
    }
    let preds = test
        .iter()
        .map(|s| {
            let p = by_id
                .remove(&s.id)
                .filter(|p| p.len() == s.visits())
                .ok_or_else(|| {
                    Error::Mismatch(format!(
                        "{}: no matching rows for subject {}",
                        path.display(),
                        s.id
                    ))
                })?;
            Ok(SubjectPrediction {
                id: s.id.clone(),
                role: s.role,
                labels: s.labels.clone(),
                preds: p,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if !by_id.is_empty() {
        return Err(Error::Mismatch(format!(
            "{}: rows for subjects outside the fold",
            path.display()
        )));
    }
    Ok((preds, best, run))
}

pub fn load_checked(path: &Path, variant: Variant, arch: &ArchConfig) -> Result<ModelParams> {
    let p = ModelParams::load(path)?;
    if p.variant != variant || &p.arch != arch {
        return Err(Error::Mismatch(format!(
            "{}: checkpoint is {} {:?}, run expects {variant} {:?}",
            path.display(),
            p.variant,
            p.arch.channels,
            arch.channels
        )));
    }
    Ok(p)
}

fn pick(subjects: &[Subject], idx: &[usize]) -> Vec<Subject> {
    idx.iter().map(|&i| subjects[i].clone()).collect()
}

/// Training subjects plus `factor - 1` posed copies of each.
pub fn augmented(train: &[Subject], cfg: &AugmentConfig, seed: u64) -> Result<Vec<Subject>> {
    let mut out = train.to_vec();
    if cfg.factor > 1 {
        for s in train {
            out.extend(augment(s, cfg.factor - 1, seed, cfg)?);
        }
    }
    Ok(out)
}

fn fold_metrics(preds: &[SubjectPrediction]) -> Result<(Confusion, f64)> {
    let (scores, labels) = visit_level(preds);
    Ok((
        confusion_metrics(&scores, &labels, THRESHOLD)?,
        auc(&scores, &labels)?,
    ))
}

/// Subject sets of one fold; `train` already carries its augmented copies.
#[derive(Clone, Debug)]
pub struct FoldSets {
    pub train: Vec<Subject>,
    pub val: Vec<Subject>,
    pub test: Vec<Subject>,
}

pub fn fold_sets(
    cfg: &ExperimentConfig,
    data: &Dataset,
    sp: &Split,
    fold: usize,
) -> Result<FoldSets> {
    if fold >= sp.folds.len() {
        return Err(Error::config(
            "fold",
            format!("{fold} out of range ({} folds)", sp.folds.len()),
        ));
    }
    let train = pick(&data.subjects, &sp.train_indices(fold));
    Ok(FoldSets {
        train: augmented(
            &train,
            &cfg.augment,
            rng::derive_seed(cfg.seed, "augment", fold as u64),
        )?,
        val: pick(&data.subjects, &sp.validation),
        test: pick(&data.subjects, &sp.folds[fold]),
    })
}

/// Validation set and folds used by every command for this config.
pub fn experiment_split(cfg: &ExperimentConfig, data: &Dataset) -> Result<Split> {
    split(
        &data.roles(),
        cfg.split.folds,
        cfg.split.val_frac,
        rng::derive_seed(cfg.seed, "split", 0),
    )
}

/// Pre-training stage of a fold, seeded like the experiment does it.
pub fn pretrain_fold(
    cfg: &ExperimentConfig,
    train: &[Subject],
    fold: usize,
    log: &mut TrainLog,
) -> Result<ModelParams> {
    let seed = rng::derive_seed(cfg.seed, "pretrain", fold as u64);
    pretrain_encoder(
        &cfg.arch,
        train,
        &TrainConfig {
            seed,
            ..cfg.method_train(Method::Cnn)
        },
        log,
    )
}

/// Joint-training config of one method in one fold. Streams are keyed by
/// variant so LP and LP+CL differ only in the consistency term.
pub fn joint_config(cfg: &ExperimentConfig, method: Method, fold: usize) -> TrainConfig {
    let stream = fold as u64 * 8 + method.variant().tag() as u64;
    TrainConfig {
        seed: rng::derive_seed(cfg.seed, "joint", stream),
        ..cfg.method_train(method)
    }
}

/// Runs one fold: pre-training shared by all methods, then each method.
fn run_fold(
    cfg: &ExperimentConfig,
    data: &Dataset,
    sp: &Split,
    fold: usize,
    dir: Option<&RunDir>,
) -> Result<Vec<FoldResult>> {
    let FoldSets { train, val, test } = fold_sets(cfg, data, sp, fold)?;

    let mut pending = Vec::new();
    let mut results = Vec::new();
    for &m in &cfg.methods {
        if let Some(d) = dir {
            let (pp, cp) = (d.predictions(fold, m), d.checkpoint(fold, m.key()));
            if pp.exists() && cp.exists() {
                load_checked(&cp, m.variant(), &cfg.arch)?;
                let (predictions, best_epoch, epochs_run) = read_predictions(&pp, &test)?;
                let (metrics, auc) = fold_metrics(&predictions)?;
                results.push(FoldResult {
                    fold,
                    method: m,
                    metrics,
                    auc,
                    best_epoch,
                    epochs_run,
                    predictions,
                });
                continue;
            }
        }
        pending.push(m);
    }
    if pending.is_empty() {
        return Ok(results);
    }

    let pretrained = match dir.map(|d| d.checkpoint(fold, "pretrain")) {
        Some(p) if p.exists() => load_checked(&p, Variant::Cnn, &cfg.arch)?,
        other => {
            let mut log = match dir {
                Some(d) => TrainLog::append_to(&d.log(fold, "pretrain"))?,
                None => TrainLog::in_memory(),
            };
            let params = pretrain_fold(cfg, &train, fold, &mut log)?;
            if let Some(p) = other {
                params.save(&p)?;
            }
            params
        }
    };
    // eval-mode trunk features of the test fold are shared by every method
    let test_cache = if cfg.train.freeze_conv {
        Some(trunk_cache(&pretrained, &test, Exec::Parallel)?)
    } else {
        None
    };

    for m in pending {
        let tc = joint_config(cfg, m, fold);
        let mut log = match dir {
            Some(d) => {
                let p = d.log(fold, m.key());
                if p.exists() {
                    std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
                TrainLog::append_to(&p)?
            }
            None => TrainLog::in_memory(),
        };
        let out = joint_train(&cfg.arch, &pretrained, &train, &val, &tc, &mut log)?;
        let inputs = input_views(&test, test_cache.as_deref());
        let predictions = predict(&out.params, &test, &inputs, Exec::Parallel)?;
        let (metrics, auc) = fold_metrics(&predictions)?;
        if let Some(d) = dir {
            out.params.save(&d.checkpoint(fold, m.key()))?;
            write_predictions(
                &d.predictions(fold, m),
                &predictions,
                out.best_epoch,
                out.epochs_run,
            )?;
        }
        results.push(FoldResult {
            fold,
            method: m,
            metrics,
            auc,
            best_epoch: out.best_epoch,
            epochs_run: out.epochs_run,
            predictions,
        });
    }
    results.sort_by_key(|r| cfg.methods.iter().position(|&m| m == r.method));
    Ok(results)
}

fn summarize(cfg: &ExperimentConfig, folds: &[FoldResult]) -> Result<Vec<MethodSummary>> {
    cfg.methods
        .iter()
        .map(|&m| {
            let rows: Vec<&FoldResult> = folds.iter().filter(|r| r.method == m).collect();
            let baccs: Vec<f64> = rows.iter().map(|r| r.metrics.bacc).collect();
            let (bacc_mean, bacc_std) = mean_std(&baccs);
            let mean = |f: fn(&FoldResult) -> f64| {
                rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
            };
            let predictions: Vec<SubjectPrediction> = rows
                .iter()
                .flat_map(|r| r.predictions.iter().cloned())
                .collect();
            let (scores, labels) = visit_level(&predictions);
            let pooled = confusion_metrics(&scores, &labels, THRESHOLD)?;
            let table = [
                [pooled.tp as i64, pooled.fn_ as i64],
                [pooled.fp as i64, pooled.tn as i64],
            ];
            let strata = (1..=cfg.data.max_visits + 1)
                .map(|k| stratify_by_visits(&predictions, k))
                .collect::<Result<Vec<_>>>()?;
            Ok(MethodSummary {
                method: m,
                sen_mean: mean(|r| r.metrics.sen),
                spe_mean: mean(|r| r.metrics.spe),
                bacc_mean,
                bacc_std,
                auc_fold_mean: mean(|r| r.auc),
                auc_pooled: auc(&scores, &labels)?,
                fisher_p: fisher_exact(table)?,
                monotone_fraction: monotone_fraction(&predictions),
                strata,
                predictions,
            })
        })
        .collect()
}

fn compare(cfg: &ExperimentConfig, methods: &[MethodSummary]) -> Result<Vec<Comparison>> {
    let Some(reference) = methods.iter().find(|s| s.method == cfg.reference) else {
        return Ok(Vec::new());
    };
    let (ref_scores, labels) = visit_level(&reference.predictions);
    methods
        .iter()
        .filter(|s| s.method != cfg.reference)
        .map(|s| {
            let (scores, l) = visit_level(&s.predictions);
            if l != labels {
                return Err(Error::Mismatch(
                    "methods were scored on different test visits".into(),
                ));
            }
            Ok(Comparison {
                method: s.method,
                reference: cfg.reference,
                delong: delong_test(&ref_scores, &scores, &labels)?,
            })
        })
        .collect()
}

/// Checks that a stored fold assignment fits the dataset and the config.
pub fn check_split(cfg: &ExperimentConfig, data: &Dataset, sp: &Split) -> Result<()> {
    if sp.folds.len() != cfg.split.folds {
        return Err(Error::Mismatch(format!(
            "dataset has {} folds, config asks for {}",
            sp.folds.len(),
            cfg.split.folds
        )));
    }
    let mut seen = vec![false; data.subjects.len()];
    for &i in sp.validation.iter().chain(sp.folds.iter().flatten()) {
        if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Mismatch(format!(
                "fold assignment lists subject index {i} twice or out of range"
            )));
        }
    }
    Ok(())
}

/// Checks that every volume of the dataset fits the network input.
pub fn check_extent(arch: &ArchConfig, data: &Dataset) -> Result<()> {
    let d = arch.input_extent;
    match data
        .subjects
        .iter()
        .flat_map(|s| &s.volumes)
        .find(|v| v.shape() != [1, d, d, d])
    {
        Some(v) => Err(Error::Mismatch(format!(
            "dataset volume of shape {:?}, network expects [1, {d}, {d}, {d}]",
            v.shape()
        ))),
        None => Ok(()),
    }
}

/// Full cross-validated experiment on an existing dataset. `split` defaults
/// to [`experiment_split`]. With `out_dir` set, every artifact is written
/// there and completed (fold, method) pairs found on disk are reused instead
/// of retrained.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &Dataset,
    split: Option<&Split>,
    out_dir: Option<&Path>,
    exec: Exec,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    check_extent(&cfg.arch, data)?;
    let sp = match split {
        Some(sp) => sp.clone(),
        None => experiment_split(cfg, data)?,
    };
    check_split(cfg, data, &sp)?;
    let dir = out_dir.map(|p| RunDir {
        root: p.to_path_buf(),
    });
    if let Some(d) = &dir {
        d.create()?;
        let frozen = d.root.join("config.toml");
        std::fs::write(&frozen, cfg.to_toml()).map_err(|e| Error::io(&frozen, e))?;
    }
    let per_fold = parallel::map_range(exec, cfg.split.folds, |k| {
        run_fold(cfg, data, &sp, k, dir.as_ref())
    });
    let mut folds = Vec::new();
    for r in per_fold {
        folds.extend(r?);
    }
    let methods = summarize(cfg, &folds)?;
    let comparisons = compare(cfg, &methods)?;
    let report = ExperimentReport {
        folds,
        methods,
        comparisons,
    };
    if let Some(d) = &dir {
        write_reports(&d.root, &report)?;
    }
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn methods_csv(r: &ExperimentReport) -> String {
    let mut s = String::from("method,name,sen,spe,bacc_mean,bacc_std,auc_pooled,auc_fold_mean,fisher_p,monotone_fraction\n");
    for m in &r.methods {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:e},{}",
            m.method.key(),
            m.method,
            m.sen_mean,
            m.spe_mean,
            m.bacc_mean,
            m.bacc_std,
            m.auc_pooled,
            m.auc_fold_mean,
            m.fisher_p,
            fmt_opt(m.monotone_fraction)
        )
        .expect("string write");
    }
    s
}

pub fn folds_csv(r: &ExperimentReport) -> String {
    let mut s = String::from("method,fold,sen,spe,bacc,auc,best_epoch,epochs_run\n");
    for f in &r.folds {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            f.method.key(),
            f.fold,
            f.metrics.sen,
            f.metrics.spe,
            f.metrics.bacc,
            f.auc,
            f.best_epoch,
            f.epochs_run
        )
        .expect("string write");
    }
    s
}

pub fn stratified_csv(r: &ExperimentReport) -> String {
    let mut s = String::from("method,min_visits,n_control,n_positive,sen,spe,bacc\n");
    for m in &r.methods {
        for st in &m.strata {
            let (sen, spe, bacc) = match &st.metrics {
                Some(c) => (
                    format!("{:.6}", c.sen),
                    format!("{:.6}", c.spe),
                    format!("{:.6}", c.bacc),
                ),
                None => Default::default(),
            };
            writeln!(
                s,
                "{},{},{},{},{sen},{spe},{bacc}",
                m.method.key(),
                st.k_min,
                st.n_control,
                st.n_positive
            )
            .expect("string write");
        }
    }
    s
}

pub fn significance_csv(r: &ExperimentReport) -> String {
    let mut s = String::from("method,reference,test,auc_method,auc_reference,statistic,p\n");
    for c in &r.comparisons {
        writeln!(
            s,
            "{},{},delong,{:.6},{:.6},{:.6},{:e}",
            c.method.key(),
            c.reference.key(),
            c.delong.auc_b,
            c.delong.auc_a,
            c.delong.z,
            c.delong.p
        )
        .expect("string write");
    }
    for m in &r.methods {
        writeln!(
            s,
            "{},chance,fisher_exact,,,,{:e}",
            m.method.key(),
            m.fisher_p
        )
        .expect("string write");
    }
    s
}

/// One row per (method, subject, visit); the visit index doubles as the age
/// proxy since visits are equally spaced.
pub fn trajectories_csv(r: &ExperimentReport) -> String {
    let mut s = String::from("method,fold,id,role,visit,age_proxy,p\n");
    for f in &r.folds {
        for p in &f.predictions {
            for (t, v) in p.preds.iter().enumerate() {
                writeln!(
                    s,
                    "{},{},{},{},{},{},{v:.6}",
                    f.method.key(),
                    f.fold,
                    p.id,
                    role_key(p.role),
                    t + 1,
                    t
                )
                .expect("string write");
            }
        }
    }
    s
}

pub fn summary_text(r: &ExperimentReport) -> String {
    let mut s = String::from("# method comparison (visit-level, mean over folds)\n");
    for m in &r.methods {
        writeln!(
            s,
            "{:<14} SEN {:5.1}  SPE {:5.1}  BACC {:5.1} +- {:4.1}  AUC {:5.1}",
            m.method.to_string(),
            100.0 * m.sen_mean,
            100.0 * m.spe_mean,
            100.0 * m.bacc_mean,
            100.0 * m.bacc_std,
            100.0 * m.auc_pooled
        )
        .expect("string write");
    }
    s.push_str("\n# BACC by minimum visit count\n");
    for m in &r.methods {
        let cells: Vec<String> = m
            .strata
            .iter()
            .map(|st| match &st.metrics {
                Some(c) => format!(
                    "{}+: {:.1} ({}/{})",
                    st.k_min,
                    100.0 * c.bacc,
                    st.n_control,
                    st.n_positive
                ),
                None => format!("{}+: -", st.k_min),
            })
            .collect();
        writeln!(s, "{:<14} {}", m.method.to_string(), cells.join("  ")).expect("string write");
    }
    s.push_str("\n# DeLong against the reference (pooled test visits)\n");
    for c in &r.comparisons {
        writeln!(
            s,
            "{} vs {}: z {:.3}  p {:.3e}",
            c.reference, c.method, c.delong.z, c.delong.p
        )
        .expect("string write");
    }
    s
}

fn write_reports(root: &Path, r: &ExperimentReport) -> Result<()> {
    let files = [
        ("methods.csv", methods_csv(r)),
        ("folds.csv", folds_csv(r)),
        ("stratified.csv", stratified_csv(r)),
        ("significance.csv", significance_csv(r)),
        ("trajectories.csv", trajectories_csv(r)),
        ("summary.txt", summary_text(r)),
    ];
    for (name, body) in files {
        let p = root.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
