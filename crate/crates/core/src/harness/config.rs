//! Flat `key=value` configuration files with dotted keys.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::data::{GeneratorSpec, ShiftSpec};
use crate::error::{Error, Result};
use crate::mixup::{AugmentationKind, AugmentationSpec, MixupStrategy};
use crate::objectives::{Reduction, SourceContrast};
use crate::trainer::{EncoderSettings, TrainConfig};

pub type KeyValues = BTreeMap<String, String>;

/// Parses `key=value` lines. `#` starts a comment; blank lines are ignored.
pub fn parse_kv(text: &str) -> Result<KeyValues> {
    let mut out = KeyValues::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected key=value, got {raw:?}", no + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", no + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::config(format!("line {}: duplicate key {k}", no + 1)));
        }
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<KeyValues> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text)
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {raw:?}")))
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',').map(|s| value(key, s.trim())).collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Training configuration plus the data split seed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub split_seed: u64,
}

fn reduction_str(r: Reduction) -> &'static str {
    match r {
        Reduction::Mean => "mean",
        Reduction::Sum => "sum",
    }
}

fn contrast_str(c: SourceContrast) -> &'static str {
    match c {
        SourceContrast::ClassAware => "class_aware",
        SourceContrast::Unsupervised => "unsupervised",
    }
}

fn augmentation_kind(key: &str, raw: &str) -> Result<Option<AugmentationKind>> {
    if raw == "none" {
        return Ok(None);
    }
    AugmentationKind::ALL
        .into_iter()
        .find(|k| k.as_str() == raw)
        .map(Some)
        .ok_or_else(|| Error::config(format!("{key}: unknown augmentation {raw:?}")))
}

impl ExperimentConfig {
    /// Applies every key in `kv` on top of `self`. Unknown keys are errors.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        let t = &mut self.train;
        let mut aug = t
            .augmentation
            .clone()
            .unwrap_or_else(|| AugmentationSpec::new(AugmentationKind::Permutation));
        let mut aug_kind = t.augmentation.as_ref().map(|a| a.kind);
        for (k, v) in kv {
            let k = k.as_str();
            match k {
                "split_seed" => self.split_seed = value(k, v)?,
                "epochs" => t.epochs = value(k, v)?,
                "batch_size" => t.batch_size = value(k, v)?,
                "learning_rate" => t.learning_rate = value(k, v)?,
                "weight_decay" => t.weight_decay = value(k, v)?,
                "seeds" => t.seeds = list(k, v)?,
                "mixup.lambda" => t.mixup.lambda = value(k, v)?,
                "mixup.strategy" => t.mixup.strategy = MixupStrategy::from_str(v)?,
                "mixup.alpha" => t.mixup.beta_alpha = value(k, v)?,
                "mixup.T" => t.mixup.window = value(k, v)?,
                "mixup.pairing_seed" => t.mixup.pairing_seed = value(k, v)?,
                "objective.tau" => t.objective.temperature = value(k, v)?,
                "objective.beta1" => t.objective.betas[0] = value(k, v)?,
                "objective.beta2" => t.objective.betas[1] = value(k, v)?,
                "objective.beta3" => t.objective.betas[2] = value(k, v)?,
                "objective.beta4" => t.objective.betas[3] = value(k, v)?,
                "objective.cac_reduction" => {
                    t.objective.cac_reduction = match v.as_str() {
                        "mean" => Reduction::Mean,
                        "sum" => Reduction::Sum,
                        _ => return Err(Error::config(format!("{k}: expected mean or sum"))),
                    }
                }
                "objective.source_contrast" => {
                    t.objective.source_contrast = match v.as_str() {
                        "class_aware" => SourceContrast::ClassAware,
                        "unsupervised" => SourceContrast::Unsupervised,
                        _ => {
                            return Err(Error::config(format!(
                                "{k}: expected class_aware or unsupervised"
                            )))
                        }
                    }
                }
                "encoder.kernel" => t.encoder.kernel = value(k, v)?,
                "encoder.stride" => t.encoder.stride = value(k, v)?,
                "encoder.filters" => {
                    let f: Vec<usize> = list(k, v)?;
                    t.encoder.filters = f.try_into().map_err(|_| {
                        Error::config(format!("{k}: exactly three filter counts required"))
                    })?;
                }
                "encoder.dropout" => t.encoder.dropout = value(k, v)?,
                "encoder.pool_out" => t.encoder.pool_out = value(k, v)?,
                "augment.kind" => aug_kind = augmentation_kind(k, v)?,
                "augment.max_segments" => aug.max_segments = value(k, v)?,
                "augment.scale_std" => aug.scale_std = value(k, v)?,
                "augment.jitter_std" => aug.jitter_std = value(k, v)?,
                "augment.mask_fraction" => aug.mask_fraction = value(k, v)?,
                _ => return Err(Error::config(format!("unknown configuration key {k:?}"))),
            }
        }
        t.augmentation = aug_kind.map(|kind| AugmentationSpec { kind, ..aug });
        self.train.validate()
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.apply(kv)?;
        Ok(c)
    }

    /// Every key with its current value; `from_kv(to_kv())` reproduces `self`.
    pub fn to_kv(&self) -> KeyValues {
        let t = &self.train;
        let e: &EncoderSettings = &t.encoder;
        let mut kv = KeyValues::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("split_seed", self.split_seed.to_string());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("learning_rate", t.learning_rate.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("seeds", join(&t.seeds));
        put("mixup.lambda", t.mixup.lambda.to_string());
        put("mixup.strategy", t.mixup.strategy.as_str().to_string());
        put("mixup.alpha", t.mixup.beta_alpha.to_string());
        put("mixup.T", t.mixup.window.to_string());
        put("mixup.pairing_seed", t.mixup.pairing_seed.to_string());
        put("objective.tau", t.objective.temperature.to_string());
        for (i, b) in t.objective.betas.iter().enumerate() {
            put(&format!("objective.beta{}", i + 1), b.to_string());
        }
        put(
            "objective.cac_reduction",
            reduction_str(t.objective.cac_reduction).to_string(),
        );
        put(
            "objective.source_contrast",
            contrast_str(t.objective.source_contrast).to_string(),
        );
        put("encoder.kernel", e.kernel.to_string());
        put("encoder.stride", e.stride.to_string());
        put("encoder.filters", join(&e.filters));
        put("encoder.dropout", e.dropout.to_string());
        put("encoder.pool_out", e.pool_out.to_string());
        match &t.augmentation {
            None => put("augment.kind", "none".to_string()),
            Some(a) => {
                put("augment.kind", a.kind.as_str().to_string());
                put("augment.max_segments", a.max_segments.to_string());
                put("augment.scale_std", a.scale_std.to_string());
                put("augment.jitter_std", a.jitter_std.to_string());
                put("augment.mask_fraction", a.mask_fraction.to_string());
            }
        }
        kv
    }
}

/// `k=v` pairs joined by `sep`, in key order.
pub fn render_kv(kv: &KeyValues, sep: &str) -> String {
    kv.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(sep)
}

/// Parses the single-line form produced by `render_kv(_, ";")`.
pub fn parse_inline(text: &str) -> Result<KeyValues> {
    parse_kv(&text.replace(';', "\n"))
}

fn shift_apply(s: &mut ShiftSpec, field: &str, key: &str, v: &str) -> Result<bool> {
    match field {
        "amplitude_scale" => s.amplitude_scale = value(key, v)?,
        "additive_noise_std" => s.additive_noise_std = value(key, v)?,
        "phase_shift" => s.phase_shift = value(key, v)?,
        "baseline_offset" => s.baseline_offset = value(key, v)?,
        "class_frequencies" => s.class_frequencies = list(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Generator spec from `source.*`, `target.*`, `frequencies` (both domains),
/// `n_per_class`, `channels`, `length` and `seed`, over the desk defaults.
pub fn generator_spec(kv: &KeyValues) -> Result<GeneratorSpec> {
    let mut g = GeneratorSpec::default();
    for (k, v) in kv {
        let handled = match k.as_str() {
            "n_per_class" => {
                g.n_per_class = value(k, v)?;
                true
            }
            "channels" => {
                g.channels = value(k, v)?;
                true
            }
            "length" => {
                g.length = value(k, v)?;
                true
            }
            "seed" => {
                g.seed = value(k, v)?;
                true
            }
            "frequencies" => {
                let f: Vec<f64> = list(k, v)?;
                g.base.class_frequencies = f.clone();
                g.shift.class_frequencies = f;
                true
            }
            other => match other.split_once('.') {
                Some(("source", field)) => shift_apply(&mut g.base, field, k, v)?,
                Some(("target", field)) => shift_apply(&mut g.shift, field, k, v)?,
                _ => false,
            },
        };
        if !handled {
            return Err(Error::config(format!("unknown generator key {k:?}")));
        }
    }
    g.base.validate()?;
    g.shift.validate()?;
    Ok(g)
}

pub fn generator_to_kv(g: &GeneratorSpec) -> KeyValues {
    let mut kv = KeyValues::new();
    for (prefix, s) in [("source", &g.base), ("target", &g.shift)] {
        kv.insert(
            format!("{prefix}.amplitude_scale"),
            s.amplitude_scale.to_string(),
        );
        kv.insert(
            format!("{prefix}.additive_noise_std"),
            s.additive_noise_std.to_string(),
        );
        kv.insert(format!("{prefix}.phase_shift"), s.phase_shift.to_string());
        kv.insert(
            format!("{prefix}.baseline_offset"),
            s.baseline_offset.to_string(),
        );
        kv.insert(
            format!("{prefix}.class_frequencies"),
            join(&s.class_frequencies),
        );
    }
    kv.insert("n_per_class".into(), g.n_per_class.to_string());
    kv.insert("channels".into(), g.channels.to_string());
    kv.insert("length".into(), g.length.to_string());
    kv.insert("seed".into(), g.seed.to_string());
    kv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dotted_keys() {
        let kv = parse_kv(
            "# SSC row\nmixup.lambda=0.79\n\nobjective.beta1 = 0.96  # weight\nmixup.T=150\n",
        )
        .unwrap();
        let c = ExperimentConfig::from_kv(&kv).unwrap();
        assert_eq!(c.train.mixup.lambda, 0.79);
        assert_eq!(c.train.mixup.window, 150);
        assert_eq!(c.train.objective.betas[0], 0.96);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse_kv("epochs").is_err());
        assert!(parse_kv("epochs=1\nepochs=2").is_err());
        assert!(ExperimentConfig::from_kv(&parse_kv("epoch=3").unwrap()).is_err());
        assert!(ExperimentConfig::from_kv(&parse_kv("mixup.lambda=0.4").unwrap()).is_err());
        assert!(ExperimentConfig::from_kv(&parse_kv("encoder.filters=1,2").unwrap()).is_err());
    }

    #[test]
    fn canonical_form_roundtrips() {
        let mut c = ExperimentConfig::default();
        c.train.mixup.lambda = 0.623456789012345;
        c.train.objective.betas = [0.3, 0.00123, 1.0, 0.7];
        c.train.seeds = vec![4, 9];
        c.train.augmentation = Some(AugmentationSpec {
            jitter_std: 0.2,
            ..AugmentationSpec::new(AugmentationKind::Jittering)
        });
        let inline = render_kv(&c.to_kv(), ";");
        let back = ExperimentConfig::from_kv(&parse_inline(&inline).unwrap()).unwrap();
        assert_eq!(back, c);
        let plain = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_kv(&plain.to_kv()).unwrap(), plain);
    }

    #[test]
    fn generator_keys() {
        let kv = parse_kv("seed=7\ntarget.amplitude_scale=2\nfrequencies=1,2,3").unwrap();
        let g = generator_spec(&kv).unwrap();
        assert_eq!(g.seed, 7);
        assert_eq!(g.shift.amplitude_scale, 2.0);
        assert_eq!(g.base.class_frequencies, vec![1.0, 2.0, 3.0]);
        assert_eq!(generator_spec(&generator_to_kv(&g)).unwrap(), g);
        assert!(generator_spec(&parse_kv("frequencies=1,1").unwrap()).is_err());
    }
}
