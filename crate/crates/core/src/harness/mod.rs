//! Experiment commands behind the `cotmix` binary.

pub mod config;
pub mod pool;

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::{
    load_domain, save_domain, split_and_normalize, DomainDataset, GeneratorSpec, SplitPair,
};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, Metrics};
use crate::mixup::{AugmentationKind, AugmentationSpec, MixupStrategy};
use crate::model::EncoderClassifier;
use crate::objectives::SourceContrast;
use crate::rng;
use crate::substrate::{GradCheckOptions, GradCheckReport, Tensor};
use crate::trainer::{
    composite_gradcheck, evaluate, train_cotmix, EncoderSettings, RunReport, StepBatch, TrainConfig,
};

pub use config::{ExperimentConfig, KeyValues};

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::config(format!(
                "{} exists and is not empty (use --force)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_text(path, &(text + "\n"))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `source/`, `target/` and `provenance.txt` under `out`.
pub fn cmd_generate(spec: &GeneratorSpec, out: &Path, force: bool) -> Result<()> {
    prepare_out(out, force)?;
    let (s, t) = spec.generate()?;
    save_domain(&s, &out.join("source"))?;
    save_domain(&t, &out.join("target"))?;
    let text = config::render_kv(&config::generator_to_kv(spec), "\n") + "\n";
    write_text(&out.join("provenance.txt"), &text)
}

/// Loads both domains and applies the 70/30 split with per-domain normalization.
pub fn load_pair(source: &Path, target: &Path, split_seed: u64) -> Result<(SplitPair, SplitPair)> {
    split_pair(&load_domain(source)?, &load_domain(target)?, split_seed)
}

/// Source splits with `split_seed`, target with `split_seed + 1`.
pub fn split_pair(
    source: &DomainDataset,
    target: &DomainDataset,
    split_seed: u64,
) -> Result<(SplitPair, SplitPair)> {
    if source.num_classes() != target.num_classes() {
        return Err(Error::data("source and target disagree on the class count"));
    }
    Ok((
        split_and_normalize(source, split_seed)?,
        split_and_normalize(target, split_seed + 1)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    CoTMix,
    CoTMixStar,
}

/// Label and configuration for a train invocation.
pub fn variant_config(
    base: &TrainConfig,
    variant: Variant,
    source_only: bool,
) -> (String, TrainConfig) {
    let mut cfg = base.clone();
    if variant == Variant::CoTMixStar {
        cfg.objective.source_contrast = SourceContrast::Unsupervised;
    }
    if source_only {
        return ("source_only".into(), cfg.source_only());
    }
    let label = match variant {
        Variant::CoTMix => "cotmix",
        Variant::CoTMixStar => "cotmix_star",
    };
    (label.into(), cfg)
}

/// Trains every seed of `cfg` (in parallel when `workers > 1`).
pub fn run_report(
    label: &str,
    source: &SplitPair,
    target: &SplitPair,
    cfg: &TrainConfig,
    workers: usize,
) -> (RunReport, Vec<(u64, EncoderClassifier<f32>)>) {
    let outcomes = pool::run_jobs(cfg.seeds.clone(), workers, |&seed| {
        (seed, train_cotmix(source, target, cfg, seed))
    });
    let mut per_seed = Vec::new();
    let mut models = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in outcomes {
        match r {
            Ok(out) => {
                per_seed.push(out.report);
                models.push((seed, out.model));
            }
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let failure = (!failures.is_empty()).then(|| failures.join("; "));
    (RunReport::new(label, cfg, per_seed, failure), models)
}

pub struct TrainArgs<'a> {
    pub source: &'a Path,
    pub target: &'a Path,
    pub config: &'a ExperimentConfig,
    pub variant: Variant,
    pub source_only: bool,
    pub out: &'a Path,
    pub force: bool,
    pub workers: usize,
}

/// Writes `report.json`, `config.txt` and one checkpoint per seed.
pub fn cmd_train(args: &TrainArgs) -> Result<RunReport> {
    prepare_out(args.out, args.force)?;
    let (src, tgt) = load_pair(args.source, args.target, args.config.split_seed)?;
    let (label, cfg) = variant_config(&args.config.train, args.variant, args.source_only);
    let (report, models) = run_report(&label, &src, &tgt, &cfg, args.workers);
    let used = ExperimentConfig {
        train: cfg,
        split_seed: args.config.split_seed,
    };
    write_text(
        &args.out.join("config.txt"),
        &(config::render_kv(&used.to_kv(), "\n") + "\n"),
    )?;
    for (seed, m) in &models {
        m.save(args.out, &format!("model_seed{seed}"))?;
    }
    write_json(&args.out.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub split_seed: u64,
    pub samples: usize,
    pub metrics: Metrics,
}

/// Evaluates a checkpoint on the normalized 30% split of a labeled dataset.
pub fn cmd_eval(
    model: &Path,
    data: &Path,
    split_seed: u64,
    out: &Path,
    force: bool,
) -> Result<EvalReport> {
    prepare_out(out, force)?;
    let dir = model.parent().unwrap_or(Path::new("."));
    let stem = model
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::config(format!("bad model path {}", model.display())))?;
    let m = EncoderClassifier::<f32>::load(dir, stem)?;
    let split = split_and_normalize(&load_domain(data)?, split_seed)?;
    let report = EvalReport {
        model: stem.to_string(),
        dataset: split.eval.name().to_string(),
        split_seed,
        samples: split.eval.len(),
        metrics: evaluate(&m, &split.eval)?,
    };
    write_json(&out.join("eval.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Risk {
    SourceVal,
    TargetOracle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRanges {
    pub beta1: (f64, f64),
    pub beta_rest: (f64, f64),
    pub lambda: (f64, f64),
    /// Window range as fractions of the sequence length.
    pub window_fraction: (f64, f64),
}

impl Default for SweepRanges {
    fn default() -> Self {
        SweepRanges {
            beta1: (0.1, 1.0),
            beta_rest: (0.001, 1.0),
            lambda: (0.5, 1.0),
            window_fraction: (0.0, 0.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub n_trials: usize,
    pub ranges: SweepRanges,
    pub selection: Risk,
    pub sweep_seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            n_trials: 100,
            ranges: SweepRanges::default(),
            selection: Risk::SourceVal,
            sweep_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub trial: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub lambda: f64,
    #[serde(rename = "T")]
    pub window: usize,
    pub source_val_risk: f64,
    pub oracle_target_mf1: Option<f64>,
    pub oracle_target_risk: Option<f64>,
    pub failure: Option<String>,
    pub config: String,
}

/// Samples trial `i` of the sweep on top of `base`, single seed.
pub fn sample_trial(
    base: &ExperimentConfig,
    spec: &SweepSpec,
    length: usize,
    i: usize,
) -> ExperimentConfig {
    let r = &spec.ranges;
    let mut rng = rng::stream(&[spec.sweep_seed, 0x5EE9, i as u64]);
    let mut c = base.clone();
    let t = &mut c.train;
    t.seeds.truncate(1);
    t.objective.betas[0] = rng.random_range(r.beta1.0..=r.beta1.1);
    for b in &mut t.objective.betas[1..] {
        *b = rng.random_range(r.beta_rest.0..=r.beta_rest.1);
    }
    t.mixup.strategy = MixupStrategy::Fixed;
    t.mixup.lambda = loop {
        let l = rng.random_range(r.lambda.0..r.lambda.1);
        if l > 0.5 {
            break l;
        }
    };
    let frac = rng.random_range(r.window_fraction.0..=r.window_fraction.1);
    t.mixup.window = ((frac * length as f64).round() as usize).min(length);
    c
}

/// Trains every sampled trial on the first configured seed.
pub fn sweep(
    source: &SplitPair,
    target: &SplitPair,
    base: &ExperimentConfig,
    spec: &SweepSpec,
    workers: usize,
) -> Vec<SweepRow> {
    let length = source.train.length();
    let trials: Vec<(usize, ExperimentConfig)> = (0..spec.n_trials)
        .map(|i| (i, sample_trial(base, spec, length, i)))
        .collect();
    pool::run_jobs(trials, workers, |(i, c)| {
        let t = &c.train;
        let seed = t.seeds[0];
        let mut row = SweepRow {
            trial: *i,
            seed,
            beta1: t.objective.betas[0],
            beta2: t.objective.betas[1],
            beta3: t.objective.betas[2],
            beta4: t.objective.betas[3],
            lambda: t.mixup.lambda,
            window: t.mixup.window,
            source_val_risk: f64::NAN,
            oracle_target_mf1: None,
            oracle_target_risk: None,
            failure: None,
            config: config::render_kv(&c.to_kv(), ";"),
        };
        match train_cotmix(source, target, t, seed) {
            Ok(out) => {
                row.source_val_risk = out.report.source_val_risk;
                row.oracle_target_mf1 = out.report.target_mf1;
                row.oracle_target_risk = out.report.target_risk;
            }
            Err(e) => row.failure = Some(e.to_string()),
        }
        row
    })
}

/// Index of the row minimizing `risk`; ties go to the lower trial index.
pub fn select_best(rows: &[SweepRow], risk: Risk) -> Option<usize> {
    let key = |r: &SweepRow| match risk {
        Risk::SourceVal => Some(r.source_val_risk).filter(|v| v.is_finite()),
        Risk::TargetOracle => r.oracle_target_risk,
    };
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in rows.iter().enumerate() {
        if let Some(v) = key(r) {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|b| b.0)
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub best: usize,
    pub report: RunReport,
}

/// Sweep table, best configuration, and a rerun of the best configuration on
/// every seed of `base`.
pub fn cmd_sweep(
    source: &Path,
    target: &Path,
    base: &ExperimentConfig,
    spec: &SweepSpec,
    out: &Path,
    force: bool,
    workers: usize,
) -> Result<SweepOutcome> {
    prepare_out(out, force)?;
    let (src, tgt) = load_pair(source, target, base.split_seed)?;
    let rows = sweep(&src, &tgt, base, spec, workers);
    write_csv(&out.join("sweep.csv"), &rows)?;
    let best = select_best(&rows, spec.selection)
        .ok_or_else(|| Error::data("no sweep trial produced the selection risk"))?;
    let mut chosen = ExperimentConfig::from_kv(&config::parse_inline(&rows[best].config)?)?;
    chosen.train.seeds = base.train.seeds.clone();
    write_text(
        &out.join("best_config.txt"),
        &(config::render_kv(&chosen.to_kv(), "\n") + "\n"),
    )?;
    let (report, _) = run_report("sweep_best", &src, &tgt, &chosen.train, workers);
    write_json(&out.join("report.json"), &report)?;
    Ok(SweepOutcome { rows, best, report })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    Ablate,
    Aug,
    MixStrategy,
    TSweep,
}

impl Study {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ablate" => Ok(Study::Ablate),
            "aug" => Ok(Study::Aug),
            "mixstrategy" => Ok(Study::MixStrategy),
            "tsweep" => Ok(Study::TSweep),
            other => Err(Error::config(format!("unknown study {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Study::Ablate => "ablate",
            Study::Aug => "aug",
            Study::MixStrategy => "mixstrategy",
            Study::TSweep => "tsweep",
        }
    }

    pub fn default_grid(self) -> Vec<String> {
        let g: &[&str] = match self {
            Study::Ablate => &["none", "ent", "ent_cac", "ent_uc", "all"],
            Study::Aug => &[
                "temporal_mixup",
                "permutation",
                "scaling",
                "jittering",
                "masking",
            ],
            Study::MixStrategy => &["fixed:0.72", "beta_random:0.2", "beta_range:0.2"],
            Study::TSweep => &["0", "0.025", "0.05", "0.1", "0.2", "0.3", "0.5"],
        };
        g.iter().map(|s| s.to_string()).collect()
    }
}

/// Configuration for one grid point of `study`.
pub fn study_point(
    study: Study,
    base: &TrainConfig,
    point: &str,
    length: usize,
) -> Result<TrainConfig> {
    let mut c = base.clone();
    let bad = || Error::config(format!("{}: bad grid point {point:?}", study.name()));
    match study {
        Study::Ablate => {
            let [b1, b2, b3, b4] = base.objective.betas;
            c.objective.betas = match point {
                "none" => [b1, 0.0, 0.0, 0.0],
                "ent" => [b1, 0.0, b3, 0.0],
                "ent_cac" => [b1, b2, b3, 0.0],
                "ent_uc" => [b1, 0.0, b3, b4],
                "all" => [b1, b2, b3, b4],
                _ => return Err(bad()),
            };
        }
        Study::Aug => {
            c.augmentation = match point {
                "temporal_mixup" => None,
                other => {
                    let kind = AugmentationKind::ALL
                        .into_iter()
                        .find(|k| k.as_str() == other)
                        .ok_or_else(bad)?;
                    let base_spec = base
                        .augmentation
                        .clone()
                        .unwrap_or_else(|| AugmentationSpec::new(kind));
                    Some(AugmentationSpec { kind, ..base_spec })
                }
            };
        }
        Study::MixStrategy => {
            let (name, v) = point.split_once(':').ok_or_else(bad)?;
            let v: f64 = v.parse().map_err(|_| bad())?;
            c.mixup.strategy = name.parse()?;
            match c.mixup.strategy {
                MixupStrategy::Fixed => c.mixup.lambda = v,
                _ => c.mixup.beta_alpha = v,
            }
        }
        Study::TSweep => {
            let f: f64 = point.parse().map_err(|_| bad())?;
            if !(0.0..=1.0).contains(&f) {
                return Err(bad());
            }
            c.mixup.window = (f * length as f64).round() as usize;
        }
    }
    c.validate()?;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub study: String,
    pub point: String,
    pub seeds: String,
    pub mf1_mean: f64,
    pub mf1_std: f64,
    pub mf1_per_seed: String,
    pub source_val_risk_mean: f64,
    pub failure: Option<String>,
    pub config: String,
}

/// One row per grid point, each averaged over the base seeds.
pub fn study(
    source: &SplitPair,
    target: &SplitPair,
    base: &ExperimentConfig,
    kind: Study,
    grid: &[String],
    workers: usize,
) -> Result<Vec<StudyRow>> {
    if grid.is_empty() {
        return Err(Error::config("study grid is empty"));
    }
    let length = source.train.length();
    let configs: Vec<TrainConfig> = grid
        .iter()
        .map(|p| study_point(kind, &base.train, p, length))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..grid.len())
        .flat_map(|g| base.train.seeds.iter().map(move |&s| (g, s)))
        .collect();
    let results = pool::run_jobs(jobs.clone(), workers, |&(g, seed)| {
        train_cotmix(source, target, &configs[g], seed).map(|o| o.report)
    });
    let mut rows = Vec::with_capacity(grid.len());
    for (g, point) in grid.iter().enumerate() {
        let mut mf1 = Vec::new();
        let mut risk = Vec::new();
        let mut failures = Vec::new();
        for ((jg, seed), r) in jobs.iter().zip(&results) {
            if *jg != g {
                continue;
            }
            match r {
                Ok(rep) => {
                    mf1.push(rep.target_mf1.unwrap_or(f64::NAN));
                    risk.push(rep.source_val_risk);
                }
                Err(e) => failures.push(format!("seed {seed}: {e}")),
            }
        }
        let (mean, std) = mean_std(&mf1);
        let used = ExperimentConfig {
            train: configs[g].clone(),
            split_seed: base.split_seed,
        };
        rows.push(StudyRow {
            study: kind.name().to_string(),
            point: point.clone(),
            seeds: base
                .train
                .seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            mf1_mean: mean,
            mf1_std: std,
            mf1_per_seed: mf1
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            source_val_risk_mean: mean_std(&risk).0,
            failure: (!failures.is_empty()).then(|| failures.join("; ")),
            config: config::render_kv(&used.to_kv(), ";"),
        });
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_study(
    source: &Path,
    target: &Path,
    base: &ExperimentConfig,
    kind: Study,
    grid: Option<Vec<String>>,
    out: &Path,
    force: bool,
    workers: usize,
) -> Result<Vec<StudyRow>> {
    prepare_out(out, force)?;
    let (src, tgt) = load_pair(source, target, base.split_seed)?;
    let grid = grid.unwrap_or_else(|| kind.default_grid());
    let rows = study(&src, &tgt, base, kind, &grid, workers)?;
    write_csv(&out.join(format!("study_{}.csv", kind.name())), &rows)?;
    Ok(rows)
}

/// Tiny reference setup: 2 channels, length 16, 3 classes, batch 4.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.train.batch_size = 4;
    c.train.encoder = EncoderSettings {
        kernel: 3,
        filters: [4, 8, 8],
        ..EncoderSettings::default()
    };
    c.train.mixup.window = 2;
    c
}

/// Composite-objective gradient check on a random batch for the tiny model.
pub fn gradcheck(cfg: &ExperimentConfig, tolerance: f64, corrupt: bool) -> Result<GradCheckReport> {
    let (c, l, k) = (2, 16, 3);
    let t = &cfg.train;
    let b = t.batch_size;
    let mut r = rng::stream(&[t.seeds[0], 0x6C]);
    let mut normal = |n: usize| -> Vec<f32> {
        (0..n)
            .map(|_| r.sample::<f64, _>(StandardNormal) as f32)
            .collect()
    };
    let batch = StepBatch {
        xs: Tensor::new(&[b, c, l], normal(b * c * l))?,
        ys: (0..b).map(|i| i % k).collect(),
        xt: Tensor::new(&[b, c, l], normal(b * c * l))?,
    };
    let model = EncoderClassifier::<f32>::build(t.encoder.config(c, k), t.seeds[0])?;
    let opts = GradCheckOptions {
        corrupt_analytic: corrupt,
        ..GradCheckOptions::default()
    };
    composite_gradcheck(
        &model,
        &batch,
        t,
        rng::derive_seed(&[t.seeds[0], 0x6D]),
        tolerance,
        &opts,
    )
}

pub fn default_model_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("model_seed{seed}"))
}
