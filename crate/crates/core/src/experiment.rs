//! Experiment driver: method and ablation registries, evaluation of a method
//! grid over checkpoints and splits, and report files.
//!
//! Output layout of a run directory:
//! `results.csv`, `details.json`, `run.json`, `hist_<method>_<split>.csv`
//! and, for ablations, `ablation.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{
    adapt_image, adapt_with_state, frozen_inference, AdaptConfig, AdaptResult, AdaptState, BnMode,
    ClassWeight, EntropyMode, PseudoLabelStats, StreamMode,
};
use crate::archive::write_atomic;
use crate::calibration::{CalibMode, Fallback};
use crate::checkpoint::{load_checkpoint, ModelCheckpoint};
use crate::dataset::{load_split, read_manifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    auroc, average_precision, fpr_at_95_tpr, histogram, ConfusionMatrix, ScoredPixels,
};
use crate::ood::{argmax_labels, ScoreKind};
use crate::scene::LabeledScene;

pub const HISTOGRAM_BINS: usize = 50;
pub const THREADS_ENV: &str = "ATTA_THREADS";

/// Names accepted by [`method_config`].
pub const METHODS: [&str; 6] = [
    "frozen",
    "atta",
    "tbn_only",
    "sbn_only",
    "ast_only",
    "tent_like",
];

/// Adaptation settings of a registered method; `None` for `frozen`, which
/// runs plain inference.
pub fn method_config(name: &str) -> Result<Option<AdaptConfig>> {
    let base = AdaptConfig::default();
    let config = match name {
        "frozen" => return Ok(None),
        "atta" => base,
        "tbn_only" => AdaptConfig {
            use_ast: false,
            bn_mode: BnMode::BatchOnly,
            ..base
        },
        "sbn_only" => AdaptConfig {
            use_ast: false,
            ..base
        },
        "ast_only" => AdaptConfig {
            use_sbn: false,
            ..base
        },
        // Entropy on seen classes with the image's own BN statistics.
        "tent_like" => AdaptConfig {
            bn_mode: BnMode::BatchOnly,
            entropy_mode: EntropyMode::SeenOnly,
            ..base
        },
        other => {
            return Err(Error::Config(format!(
                "unknown method {other:?}, expected one of {}",
                METHODS.join(", ")
            )))
        }
    };
    Ok(Some(config))
}

/// One evaluated row of a grid: a named adaptation setting and score kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub score_kind: ScoreKind,
    /// `None` runs frozen inference.
    pub config: Option<AdaptConfig>,
}

impl MethodSpec {
    pub fn registered(name: &str, score_kind: ScoreKind) -> Result<Self> {
        let config = method_config(name)?.map(|c| AdaptConfig { score_kind, ..c });
        Ok(Self {
            name: name.to_string(),
            score_kind,
            config,
        })
    }

    /// Name used in result files; non-default score kinds are appended.
    pub fn label(&self) -> String {
        match self.score_kind {
            ScoreKind::Energy => self.name.clone(),
            kind => format!("{}:{}", self.name, kind.name()),
        }
    }
}

/// Every method crossed with every score kind.
pub fn method_matrix(methods: &[String], score_kinds: &[ScoreKind]) -> Result<Vec<MethodSpec>> {
    let mut out = Vec::new();
    for kind in score_kinds {
        for m in methods {
            out.push(MethodSpec::registered(m, *kind)?);
        }
    }
    Ok(out)
}

/// One ablation row: which modules are on plus the full setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub sbn: bool,
    pub ast: bool,
    pub config: AdaptConfig,
}

/// The four module on/off combinations, then single-factor changes of the
/// full method.
pub fn ablation_registry() -> Vec<AblationVariant> {
    let full = AdaptConfig::default();
    let mut out = Vec::new();
    for (name, sbn, ast) in [
        ("neither", false, false),
        ("sbn_only", true, false),
        ("ast_only", false, true),
        ("sbn+ast", true, true),
    ] {
        out.push(AblationVariant {
            name: name.into(),
            sbn,
            ast,
            config: AdaptConfig {
                use_sbn: sbn,
                use_ast: ast,
                ..full.clone()
            },
        });
    }
    let single: [(&str, AdaptConfig); 6] = [
        (
            "bn_train_only",
            AdaptConfig {
                bn_mode: BnMode::TrainOnly,
                ..full.clone()
            },
        ),
        (
            "bn_batch_only",
            AdaptConfig {
                bn_mode: BnMode::BatchOnly,
                ..full.clone()
            },
        ),
        (
            "entropy_seen_only",
            AdaptConfig {
                entropy_mode: EntropyMode::SeenOnly,
                ..full.clone()
            },
        ),
        (
            "calib_zscore",
            AdaptConfig {
                calib_mode: CalibMode::Zscore,
                ..full.clone()
            },
        ),
        (
            "stream_continue",
            AdaptConfig {
                stream_mode: StreamMode::Continue,
                ..full.clone()
            },
        ),
        (
            "class_weight_one",
            AdaptConfig {
                class_weight: ClassWeight::One,
                ..full.clone()
            },
        ),
    ];
    for (name, config) in single {
        out.push(AblationVariant {
            name: name.into(),
            sbn: config.use_sbn,
            ast: config.use_ast,
            config,
        });
    }
    out
}

impl AblationVariant {
    pub fn method_spec(&self, score_kind: ScoreKind) -> MethodSpec {
        MethodSpec {
            name: self.name.clone(),
            score_kind,
            config: Some(AdaptConfig {
                score_kind,
                ..self.config.clone()
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    /// One checkpoint per seed; the seed column comes from the checkpoint.
    pub checkpoints: Vec<PathBuf>,
    pub methods: Vec<String>,
    pub score_kinds: Vec<ScoreKind>,
    pub splits: Vec<Split>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            checkpoints: vec![PathBuf::from("model.json")],
            methods: vec!["frozen".into(), "atta".into()],
            score_kinds: vec![ScoreKind::Energy],
            splits: vec![Split::TestClean, Split::TestCorrupt],
            out_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    /// Checks registry names and grid sizes; does not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.checkpoints.is_empty() {
            return Err(Error::Config("at least one checkpoint is required".into()));
        }
        if self.methods.is_empty() || self.score_kinds.is_empty() || self.splits.is_empty() {
            return Err(Error::Config(
                "methods, score_kinds and splits must be non-empty".into(),
            ));
        }
        for m in &self.methods {
            method_config(m)?;
        }
        Ok(())
    }

    /// Error naming the first referenced path that does not exist.
    pub fn check_paths(&self) -> Result<()> {
        let manifest = self.data_dir.join(crate::dataset::MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(Error::Config(format!(
                "dataset manifest {} not found",
                manifest.display()
            )));
        }
        for ck in &self.checkpoints {
            let (json, bin) = crate::archive::archive_paths(ck);
            if !json.is_file() || !bin.is_file() {
                return Err(Error::Config(format!(
                    "checkpoint {} not found",
                    ck.display()
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub applied: Vec<String>,
    pub auroc: Option<f64>,
    pub ap: Option<f64>,
    pub fpr95: Option<f64>,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
    pub ms: f64,
    pub bn_weight: Option<f64>,
    pub kl_sum: Option<f64>,
    pub domain_probability: Option<f64>,
    pub calibration_fallback: Option<Fallback>,
    pub pseudo_labels: Option<PseudoLabelStats>,
    pub loss_trace: Vec<f64>,
    pub diagnostic: Option<String>,
    pub error: Option<String>,
}

/// Pooled metrics of one method on one split for one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub split: Split,
    pub seed: u64,
    pub auroc: f64,
    pub ap: f64,
    pub fpr95: f64,
    pub miou: f64,
    pub macc: f64,
    pub mean_ms_per_image: f64,
    pub median_ms_per_image: f64,
    pub failures: usize,
    pub images: Vec<ImageRecord>,
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub split: String,
    pub seed: u64,
    pub auroc: f64,
    pub ap: f64,
    pub fpr95: f64,
    pub miou: f64,
    pub macc: f64,
    pub mean_ms_per_image: f64,
}

impl From<&EvalReport> for ResultRow {
    fn from(r: &EvalReport) -> Self {
        Self {
            method: r.method.clone(),
            split: r.split.short_name().into(),
            seed: r.seed,
            auroc: r.auroc,
            ap: r.ap,
            fpr95: r.fpr95,
            miou: r.miou,
            macc: r.macc,
            mean_ms_per_image: r.mean_ms_per_image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentInfo {
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub version: String,
}

impl EnvironmentInfo {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads: rayon::current_num_threads(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub reports: Vec<EvalReport>,
    pub environment: EnvironmentInfo,
}

impl RunRecord {
    pub fn find(&self, method: &str, split: Split, seed: u64) -> Option<&EvalReport> {
        self.reports
            .iter()
            .find(|r| r.method == method && r.split == split && r.seed == seed)
    }

    /// Mean of `metric` over seeds for one method and split.
    pub fn seed_mean(
        &self,
        method: &str,
        split: Split,
        metric: impl Fn(&EvalReport) -> f64,
    ) -> Option<f64> {
        let values: Vec<f64> = self
            .reports
            .iter()
            .filter(|r| r.method == method && r.split == split)
            .map(metric)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

/// Run `f` on a pool capped by `ATTA_THREADS`, or the global pool if unset.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                Error::Config(format!(
                    "{THREADS_ENV} must be a positive integer, got {v:?}"
                ))
            })?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

fn optional(r: Result<f64>) -> Option<f64> {
    r.ok()
}

fn nan_to_none(v: f64) -> Option<f64> {
    if v.is_nan() {
        None
    } else {
        Some(v)
    }
}

struct ImageOutput {
    scores: Vec<f64>,
    labels: Vec<u8>,
    ms: f64,
    adapt: Option<AdaptResult>,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64() * 1e3)
}

fn run_images(
    checkpoint: &ModelCheckpoint,
    scenes: &[LabeledScene],
    spec: &MethodSpec,
) -> Vec<Result<ImageOutput>> {
    let Some(config) = &spec.config else {
        return scenes
            .par_iter()
            .map(|s| {
                let (out, ms) = timed(|| frozen_inference(checkpoint, &s.image, spec.score_kind));
                let (probs, scores) = out?;
                Ok(ImageOutput {
                    scores,
                    labels: argmax_labels(&probs),
                    ms,
                    adapt: None,
                })
            })
            .collect();
    };
    let wrap = |(out, ms): (Result<AdaptResult>, f64)| {
        out.map(|r| ImageOutput {
            scores: r.scores.clone(),
            labels: r.predicted_labels(),
            ms,
            adapt: Some(r),
        })
    };
    match config.stream_mode {
        StreamMode::Episodic => scenes
            .par_iter()
            .map(|s| wrap(timed(|| adapt_image(checkpoint, &s.image, config))))
            .collect(),
        StreamMode::Continue => {
            let mut state = AdaptState::fresh(checkpoint, config);
            scenes
                .iter()
                .map(|s| {
                    wrap(timed(|| {
                        adapt_with_state(checkpoint, &s.image, config, &mut state)
                    }))
                })
                .collect()
        }
    }
}

/// Evaluate one method on one split. Also returns the pooled scores for
/// histogram export.
pub fn evaluate_method(
    checkpoint: &ModelCheckpoint,
    scenes: &[LabeledScene],
    split: Split,
    spec: &MethodSpec,
) -> Result<(EvalReport, ScoredPixels)> {
    let num_classes = checkpoint.net.num_classes();
    let outputs = run_images(checkpoint, scenes, spec);
    let mut pooled = ScoredPixels::default();
    let mut cm = ConfusionMatrix::new(num_classes);
    let mut images = Vec::with_capacity(scenes.len());
    let mut times = Vec::with_capacity(scenes.len());
    let mut failures = 0;
    for (index, (out, scene)) in outputs.into_iter().zip(scenes).enumerate() {
        let mut record = ImageRecord {
            index,
            applied: scene.applied.clone(),
            auroc: None,
            ap: None,
            fpr95: None,
            miou: None,
            macc: None,
            ms: 0.0,
            bn_weight: None,
            kl_sum: None,
            domain_probability: None,
            calibration_fallback: None,
            pseudo_labels: None,
            loss_trace: Vec::new(),
            diagnostic: None,
            error: None,
        };
        match out {
            Err(e) => {
                warn!(
                    "{} on {} image {index}: {e}",
                    spec.label(),
                    split.short_name()
                );
                failures += 1;
                record.error = Some(e.to_string());
            }
            Ok(out) => {
                let one = ScoredPixels::new(out.scores, scene.ood_mask.clone())?;
                record.auroc = optional(auroc(&one));
                record.ap = optional(average_precision(&one));
                record.fpr95 = optional(fpr_at_95_tpr(&one));
                let mut image_cm = ConfusionMatrix::new(num_classes);
                image_cm.add(&out.labels, &scene.labels.labels, &scene.ood_mask)?;
                let (miou, macc) = image_cm.scores();
                record.miou = nan_to_none(miou);
                record.macc = nan_to_none(macc);
                record.ms = out.ms;
                if let Some(r) = out.adapt {
                    record.bn_weight = Some(r.bn_weight);
                    record.kl_sum = Some(r.domain.kl_sum);
                    record.domain_probability = Some(r.domain.probability);
                    record.calibration_fallback = Some(r.calibration.fallback_used);
                    record.pseudo_labels = r.pseudo_label_stats;
                    record.loss_trace = r.loss_trace;
                    record.diagnostic = r.diagnostic;
                }
                cm.merge(&image_cm);
                pooled.extend(&one.scores, &one.is_ood);
                times.push(out.ms);
            }
        }
        images.push(record);
    }
    if times.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} failed on every image of {}",
            spec.label(),
            split.short_name()
        )));
    }
    let (miou, macc) = cm.scores();
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    let report = EvalReport {
        method: spec.label(),
        split,
        seed: checkpoint.meta.training_seed,
        auroc: auroc(&pooled)?,
        ap: average_precision(&pooled)?,
        fpr95: fpr_at_95_tpr(&pooled)?,
        miou,
        macc,
        mean_ms_per_image: mean_ms,
        median_ms_per_image: times[times.len() / 2],
        failures,
        images,
    };
    Ok((report, pooled))
}

/// Evaluate every method on every split for every checkpoint, then write the
/// report files into `config.out_dir`.
pub fn run_grid(config: &ExperimentConfig, specs: &[MethodSpec]) -> Result<RunRecord> {
    config.validate()?;
    config.check_paths()?;
    let manifest = read_manifest(&config.data_dir)?;
    let mut data = BTreeMap::new();
    for &split in &config.splits {
        data.insert(split, load_split(&config.data_dir, &manifest, split)?);
    }
    let checkpoints: Vec<ModelCheckpoint> = config
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<_>>()?;

    let mut reports = Vec::new();
    let mut pooled: BTreeMap<(String, Split), ScoredPixels> = BTreeMap::new();
    with_thread_cap(|| -> Result<()> {
        for ck in &checkpoints {
            for spec in specs {
                for &split in &config.splits {
                    let (report, scores) = evaluate_method(ck, &data[&split], split, spec)?;
                    info!(
                        "{} {} seed {}: auroc {:.4} ap {:.4} fpr95 {:.4} miou {:.4}",
                        report.method,
                        split.short_name(),
                        report.seed,
                        report.auroc,
                        report.ap,
                        report.fpr95,
                        report.miou
                    );
                    let entry = pooled.entry((report.method.clone(), split)).or_default();
                    entry.extend(&scores.scores, &scores.is_ood);
                    reports.push(report);
                }
            }
        }
        Ok(())
    })??;

    let record = RunRecord {
        config_hash: config.config_hash(),
        config: config.clone(),
        reports,
        environment: EnvironmentInfo::current(),
    };
    write_run(&config.out_dir, &record, &pooled)?;
    Ok(record)
}

pub fn run_eval(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let specs = method_matrix(&config.methods, &config.score_kinds)?;
    run_grid(config, &specs)
}

/// Run the ablation registry (methods in `config` are ignored) and add
/// `ablation.md`.
pub fn run_ablate(config: &ExperimentConfig) -> Result<RunRecord> {
    let registry = ablation_registry();
    let specs: Vec<MethodSpec> = config
        .score_kinds
        .iter()
        .flat_map(|&k| registry.iter().map(move |v| v.method_spec(k)))
        .collect();
    let record = run_grid(config, &specs)?;
    let table = ablation_markdown(&record, &registry, &config.splits, &config.score_kinds);
    write_atomic(&config.out_dir.join("ablation.md"), table.as_bytes())?;
    Ok(record)
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_run(
    dir: &Path,
    record: &RunRecord,
    pooled: &BTreeMap<(String, Split), ScoredPixels>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows: Vec<ResultRow> = record.reports.iter().map(ResultRow::from).collect();
    write_atomic(&dir.join("results.csv"), &results_csv(&rows)?)?;

    let details: Vec<serde_json::Value> = record
        .reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "method": r.method,
                "split": r.split.short_name(),
                "seed": r.seed,
                "median_ms_per_image": r.median_ms_per_image,
                "failures": r.failures,
                "images": r.images,
            })
        })
        .collect();
    let path = dir.join("details.json");
    let bytes = serde_json::to_vec_pretty(&details).map_err(|e| Error::json(&path, e))?;
    write_atomic(&path, &bytes)?;

    let summary = serde_json::json!({
        "config_hash": record.config_hash,
        "config": record.config,
        "environment": record.environment,
        "results": rows,
    });
    let path = dir.join("run.json");
    let bytes = serde_json::to_vec_pretty(&summary).map_err(|e| Error::json(&path, e))?;
    write_atomic(&path, &bytes)?;

    for ((method, split), sp) in pooled {
        let h = histogram(sp, HISTOGRAM_BINS);
        let mut out = String::from("bin_lo,bin_hi,inlier,outlier\n");
        for i in 0..HISTOGRAM_BINS {
            writeln!(
                out,
                "{},{},{},{}",
                h.edges[i],
                h.edges[i + 1],
                h.inlier[i],
                h.outlier[i]
            )
            .expect("string write");
        }
        let name = format!("hist_{}_{}.csv", file_safe(method), split.short_name());
        write_atomic(&dir.join(name), out.as_bytes())?;
    }
    Ok(())
}

pub fn results_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::InvalidInput(format!("csv write failed: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv write failed: {e}")))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format {
        offset: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Format {
                offset: e.position().map_or(0, |p| p.byte()),
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

/// Seed-averaged Markdown tables: module on/off rows first, then the
/// single-factor variants.
pub fn ablation_markdown(
    record: &RunRecord,
    registry: &[AblationVariant],
    splits: &[Split],
    score_kinds: &[ScoreKind],
) -> String {
    let mark = |on: bool| if on { "✓" } else { "" };
    let mut out = String::new();
    for &kind in score_kinds {
        writeln!(out, "## Ablation ({} score)\n", kind.name()).expect("string write");
        let mut header = String::from("| Variant | SBN | AST |");
        let mut rule = String::from("|---|:-:|:-:|");
        for split in splits {
            let s = split.short_name();
            write!(header, " {s} AUROC | {s} AP | {s} FPR95 |").expect("string write");
            rule.push_str("---:|---:|---:|");
        }
        writeln!(out, "{header}\n{rule}").expect("string write");
        for v in registry {
            let label = v.method_spec(kind).label();
            let mut line = format!("| {} | {} | {} |", v.name, mark(v.sbn), mark(v.ast));
            for &split in splits {
                for metric in [
                    |r: &EvalReport| r.auroc,
                    |r: &EvalReport| r.ap,
                    |r: &EvalReport| r.fpr95,
                ] {
                    match record.seed_mean(&label, split, metric) {
                        Some(m) => write!(line, " {:.2} |", 100.0 * m),
                        None => write!(line, " - |"),
                    }
                    .expect("string write");
                }
            }
            writeln!(out, "{line}").expect("string write");
        }
        out.push('\n');
    }
    out
}
