use std::path::Path;
use std::process::Command;

use proptest::prelude::{prop_assert, proptest, ProptestConfig};

use cotmix::data::{load_domain, GeneratorSpec, ShiftSpec, SplitPair};
use cotmix::harness::{
    self, config, ExperimentConfig, Risk, Study, SweepRow, SweepSpec, TrainArgs, Variant,
};
use cotmix::objectives::SourceContrast;
use cotmix::trainer::{train_cotmix, EncoderSettings};

fn small_spec() -> GeneratorSpec {
    let shift = |amp: f64, noise: f64, phase: f64| ShiftSpec {
        amplitude_scale: amp,
        additive_noise_std: noise,
        phase_shift: phase,
        baseline_offset: 0.0,
        class_frequencies: vec![1.0, 2.0, 3.0],
    };
    GeneratorSpec {
        base: shift(1.0, 0.1, 0.0),
        shift: shift(1.6, 0.3, 0.8),
        n_per_class: 10,
        channels: 2,
        length: 32,
        seed: 9,
    }
}

fn small_pair() -> (SplitPair, SplitPair) {
    let (s, t) = small_spec().generate().unwrap();
    harness::split_pair(&s, &t, 0).unwrap()
}

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.train.epochs = 3;
    c.train.batch_size = 4;
    c.train.seeds = vec![1, 2];
    c.train.mixup.window = 4;
    c.train.encoder = EncoderSettings {
        kernel: 3,
        filters: [4, 8, 8],
        ..EncoderSettings::default()
    };
    c
}

#[test]
fn generate_writes_balanced_reproducible_pair() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    harness::cmd_generate(&GeneratorSpec::default(), &a, false).unwrap();
    harness::cmd_generate(&GeneratorSpec::default(), &b, false).unwrap();
    for domain in ["source", "target"] {
        let d = load_domain(&a.join(domain)).unwrap();
        let mut hist = [0usize; 4];
        d.labels().unwrap().iter().for_each(|&y| hist[y] += 1);
        assert_eq!(hist, [100; 4]);
        for f in ["X.f32le", "y.u8", "meta.json"] {
            let read = |root: &Path| std::fs::read(root.join(domain).join(f)).unwrap();
            assert_eq!(read(&a), read(&b), "{domain}/{f}");
        }
    }
    let prov = config::read_kv(&a.join("provenance.txt")).unwrap();
    assert_eq!(
        config::generator_spec(&prov).unwrap(),
        GeneratorSpec::default()
    );
    assert!(harness::cmd_generate(&GeneratorSpec::default(), &a, false).is_err());
    harness::cmd_generate(&GeneratorSpec::default(), &a, true).unwrap();
}

#[test]
fn variants_set_label_and_objective() {
    let base = ExperimentConfig::default().train;
    let (label, so) = harness::variant_config(&base, Variant::CoTMix, true);
    assert_eq!(label, "source_only");
    assert_eq!(so.objective.betas, [base.objective.betas[0], 0.0, 0.0, 0.0]);
    let (label, star) = harness::variant_config(&base, Variant::CoTMixStar, false);
    assert_eq!(label, "cotmix_star");
    assert_eq!(star.objective.source_contrast, SourceContrast::Unsupervised);
}

#[test]
fn train_outputs_match_eval_of_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    harness::cmd_generate(&small_spec(), &data, false).unwrap();
    let cfg = small_config();
    let out = dir.path().join("run");
    let report = harness::cmd_train(&TrainArgs {
        source: &data.join("source"),
        target: &data.join("target"),
        config: &cfg,
        variant: Variant::CoTMix,
        source_only: false,
        out: &out,
        force: false,
        workers: 2,
    })
    .unwrap();
    assert_eq!(report.label, "cotmix");
    assert!(report.failure.is_none());
    for seed_report in &report.per_seed {
        let model = harness::default_model_path(&out, seed_report.seed);
        let ev = harness::cmd_eval(
            &model,
            &data.join("target"),
            1,
            &dir.path().join("ev"),
            true,
        )
        .unwrap();
        assert_eq!(Some(ev.metrics.macro_f1), seed_report.target_mf1);
    }
    let text = std::fs::read_to_string(out.join("report.json")).unwrap();
    let back: cotmix::trainer::RunReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
}

fn row(trial: usize, risk: f64, mf1: Option<f64>) -> SweepRow {
    SweepRow {
        trial,
        seed: 1,
        beta1: 1.0,
        beta2: 0.1,
        beta3: 0.1,
        beta4: 0.1,
        lambda: 0.9,
        window: 3,
        source_val_risk: risk,
        oracle_target_mf1: mf1,
        oracle_target_risk: mf1.map(|m| 1.0 - m),
        failure: None,
        config: String::new(),
    }
}

#[test]
fn selection_is_argmin_with_low_index_ties() {
    let rows = vec![
        row(0, 0.5, Some(0.6)),
        row(1, 0.2, Some(0.7)),
        row(2, 0.2, Some(0.9)),
        row(3, f64::NAN, None),
        row(4, 0.9, Some(0.9)),
    ];
    assert_eq!(harness::select_best(&rows, Risk::SourceVal), Some(1));
    let oracle = harness::select_best(&rows, Risk::TargetOracle).unwrap();
    assert_eq!(oracle, 2);
    let max = rows
        .iter()
        .filter_map(|r| r.oracle_target_mf1)
        .fold(0.0, f64::max);
    assert_eq!(rows[oracle].oracle_target_mf1, Some(max));
    assert_eq!(harness::select_best(&rows[3..4], Risk::SourceVal), None);
    assert_eq!(harness::select_best(&rows[4..], Risk::SourceVal), Some(0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sampled_trials_stay_in_range(seed in 0u64..1000, trial in 0usize..1000, length in 1usize..400) {
        let spec = SweepSpec { sweep_seed: seed, ..SweepSpec::default() };
        let c = harness::sample_trial(&ExperimentConfig::default(), &spec, length, trial);
        let b = c.train.objective.betas;
        prop_assert!((0.1..=1.0).contains(&b[0]));
        prop_assert!(b[1..].iter().all(|v| (0.001..=1.0).contains(v)));
        prop_assert!(c.train.mixup.lambda > 0.5 && c.train.mixup.lambda < 1.0);
        prop_assert!(c.train.mixup.window <= length.div_ceil(2));
        prop_assert!(c.train.seeds.len() == 1);
        prop_assert!(c.train.validate().is_ok());
    }
}

#[test]
fn sweep_rows_rerun_to_identical_metrics() {
    let (src, tgt) = small_pair();
    let spec = SweepSpec {
        n_trials: 3,
        sweep_seed: 4,
        ..SweepSpec::default()
    };
    let rows = harness::sweep(&src, &tgt, &small_config(), &spec, 2);
    assert_eq!(rows.iter().map(|r| r.trial).collect::<Vec<_>>(), [0, 1, 2]);
    for r in &rows {
        let c = ExperimentConfig::from_kv(&config::parse_inline(&r.config).unwrap()).unwrap();
        assert_eq!(c.train.mixup.window, r.window);
        let again = train_cotmix(&src, &tgt, &c.train, r.seed).unwrap().report;
        assert_eq!(again.source_val_risk.to_bits(), r.source_val_risk.to_bits());
        assert_eq!(again.target_mf1, r.oracle_target_mf1);
    }
    let one = SweepSpec {
        n_trials: 1,
        ..spec
    };
    assert_eq!(
        harness::select_best(
            &harness::sweep(&src, &tgt, &small_config(), &one, 1),
            Risk::SourceVal
        ),
        Some(0)
    );
}

#[test]
fn study_tables_follow_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    harness::cmd_generate(&small_spec(), &data, false).unwrap();
    let mut cfg = small_config();
    cfg.train.seeds = vec![3];
    let grid: Vec<String> = ["0", "0.1", "0.5"].iter().map(|s| s.to_string()).collect();
    let out = dir.path().join("t");
    let rows = harness::cmd_study(
        &data.join("source"),
        &data.join("target"),
        &cfg,
        Study::TSweep,
        Some(grid),
        &out,
        false,
        1,
    )
    .unwrap();
    let windows: Vec<usize> = rows
        .iter()
        .map(|r| {
            ExperimentConfig::from_kv(&config::parse_inline(&r.config).unwrap())
                .unwrap()
                .train
                .mixup
                .window
        })
        .collect();
    assert_eq!(windows, [0, 3, 16]);
    let csv = std::fs::read_to_string(out.join("study_tsweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "study,point,seeds,mf1_mean,mf1_std,mf1_per_seed,source_val_risk_mean,failure,config"
    );
    assert_eq!(lines.count(), 3);
    assert!(harness::study_point(Study::Aug, &cfg.train, "rotation", 32).is_err());
    assert!(Study::parse("tsne").is_err());
}

#[test]
fn ablation_none_is_source_only() {
    let (src, tgt) = small_pair();
    let cfg = small_config();
    let rows = harness::study(
        &src,
        &tgt,
        &cfg,
        Study::Ablate,
        &["none".to_string(), "ent".to_string()],
        1,
    )
    .unwrap();
    let (so, _) = harness::run_report("source_only", &src, &tgt, &cfg.train.source_only(), 1);
    assert_eq!(Some(rows[0].mf1_mean), so.target_mf1.map(|a| a.mean));
    let ent = ExperimentConfig::from_kv(&config::parse_inline(&rows[1].config).unwrap()).unwrap();
    let b = cfg.train.objective.betas;
    assert_eq!(ent.train.objective.betas, [b[0], 0.0, b[2], 0.0]);
}

#[test]
fn gradcheck_command() {
    let tiny = harness::tiny_config();
    assert!(harness::gradcheck(&tiny, 1e-3, false).unwrap().passed);
    assert!(!harness::gradcheck(&tiny, 1e-3, true).unwrap().passed);
    let mut sharp = tiny.clone();
    sharp.train.objective.temperature = 0.05;
    assert!(harness::gradcheck(&sharp, 1e-3, false).unwrap().passed);

    let bin = env!("CARGO_BIN_EXE_cotmix");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status;
    assert!(status(&["gradcheck"]).success());
    assert_eq!(status(&["gradcheck", "--corrupt"]).code(), Some(1));
}
