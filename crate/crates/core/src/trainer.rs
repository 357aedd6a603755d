//! End-to-end training: mix, contrast both domains, minimize the weighted
//! objective, evaluate on the held-out splits.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DomainDataset, SplitPair, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::{classification_metrics, mean_std, Metrics};
use crate::mixup::{augment, mixup_graph, windowed_mean_matrix, AugmentationSpec, MixupConfig};
use crate::model::{EncoderClassifier, EncoderConfig, ForwardVars};
use crate::objectives::{
    class_aware_contrastive_node, cross_entropy, cross_entropy_node, overall_objective,
    target_entropy_node, unsupervised_contrastive_node, LossParts, ObjectiveConfig, SourceContrast,
};
use crate::optim::Adam;
use crate::rng;
use crate::scalar::Scalar;
use crate::substrate::{
    grad_check, GradCheckOptions, GradCheckReport, Graph, ParamStore, Tensor, Var,
};

/// Encoder hyperparameters that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSettings {
    pub kernel: usize,
    pub stride: usize,
    pub filters: [usize; 3],
    pub dropout: f64,
    pub pool_out: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        let d = EncoderConfig::new(1, 1);
        EncoderSettings {
            kernel: d.kernel,
            stride: d.stride,
            filters: d.filters,
            dropout: d.dropout,
            pool_out: d.pool_out,
        }
    }
}

impl EncoderSettings {
    pub fn config(&self, in_channels: usize, num_classes: usize) -> EncoderConfig {
        EncoderConfig {
            kernel: self.kernel,
            stride: self.stride,
            filters: self.filters,
            dropout: self.dropout,
            pool_out: self.pool_out,
            ..EncoderConfig::new(in_channels, num_classes)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    pub mixup: MixupConfig,
    pub objective: ObjectiveConfig,
    pub encoder: EncoderSettings,
    /// Replaces the temporal mixup views with independently augmented originals.
    pub augmentation: Option<AugmentationSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seeds: vec![1, 2, 3],
            mixup: MixupConfig::default(),
            objective: ObjectiveConfig::default(),
            encoder: EncoderSettings::default(),
            augmentation: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                "learning_rate must be positive and weight_decay non-negative",
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        self.mixup.validate()?;
        self.objective.validate()?;
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }

    /// Copy with the contrastive and entropy weights zeroed.
    pub fn source_only(&self) -> Self {
        let mut c = self.clone();
        c.objective.betas = [c.objective.betas[0], 0.0, 0.0, 0.0];
        c
    }

    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(text.as_bytes()))
    }
}

/// One step's inputs. The target side carries no labels.
#[derive(Clone, Debug)]
pub struct StepBatch<T> {
    pub xs: Tensor<T>,
    pub ys: Vec<usize>,
    pub xt: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
enum Role {
    Source = 0,
    SourceView = 1,
    Target = 2,
    TargetView = 3,
}

fn role_seed(step_seed: u64, role: Role) -> u64 {
    rng::derive_seed(&[step_seed, role as u64])
}

pub struct StepGraph {
    pub loss: Var,
    pub parts: LossParts,
    pub total: f64,
    forwards: Vec<ForwardVars>,
}

/// Records the full weighted objective for one step on `g`. Branches whose
/// weight is zero are not evaluated.
pub fn composite_loss<T: Scalar>(
    model: &EncoderClassifier<T>,
    store: &ParamStore<T>,
    g: &mut Graph<T>,
    batch: &StepBatch<T>,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<StepGraph> {
    let obj = &cfg.objective;
    let [b1, b2, b3, b4] = obj.betas;
    let need_sd = b2 > 0.0;
    let need_t = b3 > 0.0 || b4 > 0.0;
    let need_td = b4 > 0.0;
    let stage = |component: &'static str| {
        move |e: Error| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { component },
            other => other,
        }
    };

    let xs = g.input(batch.xs.clone());
    let xt = g.input(batch.xt.clone());
    let (sd, td) = if need_sd || need_td {
        match &cfg.augmentation {
            None => {
                let lambda = cfg
                    .mixup
                    .draw_lambda(rng::derive_seed(&[cfg.mixup.pairing_seed, step_seed]));
                let m = g.input(windowed_mean_matrix(batch.xs.shape()[2], cfg.mixup.window));
                let (sd, td) = mixup_graph(g, xs, xt, m, lambda)?;
                (Some(sd), Some(td))
            }
            Some(spec) => {
                let sd = augment(&batch.xs, spec, role_seed(step_seed, Role::SourceView))?;
                let td = augment(&batch.xt, spec, role_seed(step_seed, Role::TargetView))?;
                (Some(g.input(sd)), Some(g.input(td)))
            }
        }
    } else {
        (None, None)
    };

    let mut forwards = Vec::with_capacity(4);
    let fs = model
        .forward_with(store, g, xs, role_seed(step_seed, Role::Source))
        .map_err(stage("forward_source"))?;
    forwards.push(fs.clone());
    let mut parts = LossParts::default();
    let mut terms = Vec::with_capacity(4);

    let cls = cross_entropy_node(g, fs.logits, &batch.ys)?;
    parts.cls = g.value(cls).item().as_f64();
    terms.push((cls, b1));

    if need_sd {
        let fsd = model
            .forward_with(
                store,
                g,
                sd.expect("built"),
                role_seed(step_seed, Role::SourceView),
            )
            .map_err(stage("forward_source_view"))?;
        forwards.push(fsd.clone());
        let v = match obj.source_contrast {
            SourceContrast::ClassAware => class_aware_contrastive_node(
                g,
                fs.probabilities,
                fsd.probabilities,
                &batch.ys,
                obj.temperature,
                obj.cac_reduction,
            )?,
            SourceContrast::Unsupervised => unsupervised_contrastive_node(
                g,
                fs.probabilities,
                fsd.probabilities,
                obj.temperature,
            )?,
        };
        parts.source_contrast = g.value(v).item().as_f64();
        terms.push((v, b2));
    }
    if need_t {
        let ft = model
            .forward_with(store, g, xt, role_seed(step_seed, Role::Target))
            .map_err(stage("forward_target"))?;
        forwards.push(ft.clone());
        if b3 > 0.0 {
            let v = target_entropy_node(g, ft.probabilities)?;
            parts.entropy = g.value(v).item().as_f64();
            terms.push((v, b3));
        }
        if need_td {
            let ftd = model
                .forward_with(
                    store,
                    g,
                    td.expect("built"),
                    role_seed(step_seed, Role::TargetView),
                )
                .map_err(stage("forward_target_view"))?;
            forwards.push(ftd.clone());
            let v = unsupervised_contrastive_node(
                g,
                ft.probabilities,
                ftd.probabilities,
                obj.temperature,
            )?;
            parts.target_contrast = g.value(v).item().as_f64();
            terms.push((v, b4));
        }
    }

    for (name, value) in [
        ("cls", parts.cls),
        ("source_contrast", parts.source_contrast),
        ("entropy", parts.entropy),
        ("target_contrast", parts.target_contrast),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { component: name });
        }
    }
    let total = overall_objective(&parts, obj);
    let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
    let locals = terms.iter().map(|t| Tensor::scalar(T::lit(t.1))).collect();
    let loss = g.fused(&vars, T::lit(total), locals)?;
    Ok(StepGraph {
        loss,
        parts,
        total,
        forwards,
    })
}

/// Sample order of `domain` (0 = source, 1 = target) for `epoch`.
pub fn epoch_order(
    pairing_seed: u64,
    seed: u64,
    epoch: usize,
    domain: u64,
    n: usize,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(&[
        pairing_seed,
        seed,
        epoch as u64,
        domain,
    ]));
    order
}

pub fn step_seed(seed: u64, step: usize) -> u64 {
    rng::derive_seed(&[seed, 0x57E9, step as u64])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub mean_parts: LossParts,
    pub mean_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub target_mf1: Option<f64>,
    pub target_accuracy: Option<f64>,
    pub per_class_f1: Option<Vec<Option<f64>>>,
    pub source_val_risk: f64,
    pub target_risk: Option<f64>,
    pub final_losses: EpochTrace,
    pub epochs: Vec<EpochTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let (mean, std) = mean_std(values);
        Some(Aggregate { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub fingerprint: String,
    pub config: TrainConfig,
    pub per_seed: Vec<SeedReport>,
    pub target_mf1: Option<Aggregate>,
    pub target_accuracy: Option<Aggregate>,
    pub source_val_risk: Option<Aggregate>,
    pub target_risk: Option<Aggregate>,
    /// Set when a seed aborted; `per_seed` then holds only the completed seeds.
    pub failure: Option<String>,
}

impl RunReport {
    pub fn new(
        label: &str,
        config: &TrainConfig,
        per_seed: Vec<SeedReport>,
        failure: Option<String>,
    ) -> Self {
        let collect = |f: fn(&SeedReport) -> Option<f64>| -> Option<Aggregate> {
            let v: Vec<f64> = per_seed.iter().filter_map(f).collect();
            if v.len() == per_seed.len() {
                Aggregate::of(&v)
            } else {
                None
            }
        };
        RunReport {
            label: label.to_string(),
            fingerprint: config.fingerprint(),
            config: config.clone(),
            target_mf1: collect(|s| s.target_mf1),
            target_accuracy: collect(|s| s.target_accuracy),
            source_val_risk: collect(|s| Some(s.source_val_risk)),
            target_risk: collect(|s| s.target_risk),
            per_seed,
            failure,
        }
    }
}

/// Optional in-training verification of the composite gradient.
#[derive(Clone, Debug, Default)]
pub struct TrainHooks {
    pub gradcheck_every: Option<usize>,
    pub gradcheck_tolerance: f64,
}

pub struct TrainOutcome<T> {
    pub model: EncoderClassifier<T>,
    pub report: SeedReport,
    pub step_losses: Vec<f64>,
    pub gradchecks: Vec<(usize, GradCheckReport)>,
}

pub fn train_cotmix(
    source: &SplitPair,
    target: &SplitPair,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome<f32>> {
    train_with::<f32>(source, target, cfg, seed, &TrainHooks::default())
}

pub fn train_with<T: Scalar>(
    source: &SplitPair,
    target: &SplitPair,
    cfg: &TrainConfig,
    seed: u64,
    hooks: &TrainHooks,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let src = &source.train;
    let ys_all = src
        .labels()
        .ok_or_else(|| Error::data("source training split must be labeled"))?;
    let tgt: UnlabeledDataset = target.train.unlabeled();
    if src.channels() != target.train.channels() || src.length() != target.train.length() {
        return Err(Error::data("source and target samples differ in shape"));
    }
    cfg.mixup.validate_length(src.length())?;
    let enc = cfg.encoder.config(src.channels(), src.num_classes());
    enc.layer_lengths(src.length())?;
    let mut model = EncoderClassifier::<T>::build(enc, rng::derive_seed(&[seed, 0x1417]))?;
    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay);

    let b = cfg.batch_size;
    let steps = (src.len() / b).min(tgt.len() / b);
    if steps == 0 {
        return Err(Error::data(format!(
            "batch size {b} exceeds a training split ({} source, {} target)",
            src.len(),
            tgt.len()
        )));
    }
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::with_capacity(cfg.epochs * steps);
    let mut gradchecks = Vec::new();
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        let so = epoch_order(cfg.mixup.pairing_seed, seed, epoch, 0, src.len());
        let to = epoch_order(cfg.mixup.pairing_seed, seed, epoch, 1, tgt.len());
        let mut acc = [0.0f64; 5];
        for k in 0..steps {
            let si = &so[k * b..(k + 1) * b];
            let ti = &to[k * b..(k + 1) * b];
            let batch = StepBatch {
                xs: src.batch::<T>(si),
                ys: si.iter().map(|&i| ys_all[i]).collect(),
                xt: tgt.batch::<T>(ti),
            };
            let ss = step_seed(seed, global);
            if let Some(every) = hooks.gradcheck_every {
                if global % every == 0 {
                    let report = composite_gradcheck(
                        &model,
                        &batch,
                        cfg,
                        ss,
                        hooks.gradcheck_tolerance,
                        &GradCheckOptions::default(),
                    )?;
                    gradchecks.push((global, report));
                }
            }
            let mut g = Graph::new(true);
            let step = composite_loss(&model, model.params(), &mut g, &batch, cfg, ss)?;
            g.backward_into(step.loss, model.params_mut())?;
            opt.step(model.params_mut());
            for fw in &step.forwards {
                model.update_running_stats(&g, fw);
            }
            for (a, v) in acc
                .iter_mut()
                .zip(step.parts.as_array().into_iter().chain([step.total]))
            {
                *a += v;
            }
            step_losses.push(step.total);
            global += 1;
        }
        let n = steps as f64;
        epochs.push(EpochTrace {
            epoch,
            mean_parts: LossParts {
                cls: acc[0] / n,
                source_contrast: acc[1] / n,
                entropy: acc[2] / n,
                target_contrast: acc[3] / n,
            },
            mean_total: acc[4] / n,
        });
    }

    let risks = compute_risks(&model, &source.eval, Some(&target.eval))?;
    let target_metrics = match target.eval.labels() {
        Some(_) => Some(evaluate(&model, &target.eval)?),
        None => None,
    };
    let report = SeedReport {
        seed,
        target_mf1: target_metrics.as_ref().map(|m| m.macro_f1),
        target_accuracy: target_metrics.as_ref().map(|m| m.accuracy),
        per_class_f1: target_metrics.map(|m| m.per_class_f1),
        source_val_risk: risks.source_val_risk,
        target_risk: risks.target_risk,
        final_losses: epochs.last().expect("epochs >= 1").clone(),
        epochs,
    };
    Ok(TrainOutcome {
        model,
        report,
        step_losses,
        gradchecks,
    })
}

/// Compares the analytic gradient of the step objective against finite
/// differences in double precision.
pub fn composite_gradcheck<T: Scalar>(
    model: &EncoderClassifier<T>,
    batch: &StepBatch<T>,
    cfg: &TrainConfig,
    step_seed: u64,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let m64: EncoderClassifier<f64> = model.cast();
    let b64 = StepBatch {
        xs: batch.xs.cast(),
        ys: batch.ys.clone(),
        xt: batch.xt.cast(),
    };
    let mut store = m64.params().clone();
    store.set_training(true);
    grad_check(
        &store,
        |g, s| Ok(composite_loss(&m64, s, g, &b64, cfg, step_seed)?.loss),
        tolerance,
        opts,
    )
}

fn predict_all<T: Scalar>(model: &EncoderClassifier<T>, data: &DomainDataset) -> Result<Tensor<T>> {
    Ok(model.predict(&data.x().cast(), 256)?.logits)
}

pub fn evaluate<T: Scalar>(model: &EncoderClassifier<T>, data: &DomainDataset) -> Result<Metrics> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::data(format!("{} has no labels to evaluate against", data.name())))?;
    let pred = predict_all(model, data)?.argmax_rows();
    Ok(classification_metrics(labels, &pred, data.num_classes()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Risks {
    pub source_val_risk: f64,
    pub target_risk: Option<f64>,
}

/// Source-validation cross-entropy and, when target labels exist, `1 - MF1` on
/// the target split.
pub fn compute_risks<T: Scalar>(
    model: &EncoderClassifier<T>,
    source_eval: &DomainDataset,
    target_eval: Option<&DomainDataset>,
) -> Result<Risks> {
    let labels = source_eval
        .labels()
        .ok_or_else(|| Error::data("source validation split must be labeled"))?;
    let logits = predict_all(model, source_eval)?;
    let (source_val_risk, _) = cross_entropy(&logits, labels)?;
    let target_risk = match target_eval {
        Some(t) if t.labels().is_some() => Some(1.0 - evaluate(model, t)?.macro_f1),
        _ => None,
    };
    Ok(Risks {
        source_val_risk,
        target_risk,
    })
}

/// Trains every configured seed and assembles the report. A failing seed stops
/// the run and is recorded in `failure`.
pub fn run_seeds(
    label: &str,
    source: &SplitPair,
    target: &SplitPair,
    cfg: &TrainConfig,
) -> (RunReport, Vec<EncoderClassifier<f32>>) {
    let mut per_seed = Vec::new();
    let mut models = Vec::new();
    let mut failure = None;
    for &seed in &cfg.seeds {
        match train_cotmix(source, target, cfg, seed) {
            Ok(out) => {
                per_seed.push(out.report);
                models.push(out.model);
            }
            Err(e) => {
                failure = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
    }
    (RunReport::new(label, cfg, per_seed, failure), models)
}
