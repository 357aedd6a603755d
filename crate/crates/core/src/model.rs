//! Three-block 1D-CNN encoder followed by a single linear classifier.
//!
//! Block layout: conv -> batch norm -> relu -> max pool, with dropout after the
//! first block and adaptive average pooling after the last.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::substrate::{window_out_len, Graph, ParamStore, Primitive, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub filters: [usize; 3],
    pub dropout: f64,
    pub pool_out: usize,
    pub num_classes: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl EncoderConfig {
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        EncoderConfig {
            in_channels,
            kernel: 5,
            stride: 1,
            filters: [64, 128, 128],
            dropout: 0.5,
            pool_out: 1,
            num_classes,
            pool_kernel: 2,
            pool_stride: 2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("pool_out", self.pool_out),
            ("num_classes", self.num_classes),
            ("pool_kernel", self.pool_kernel),
            ("pool_stride", self.pool_stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("encoder.{name} must be positive")));
            }
        }
        if self.filters.contains(&0) {
            return Err(Error::config("encoder filters must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("encoder.dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.filters[2] * self.pool_out
    }

    /// Sequence length after each conv and pool layer for input length `len`.
    pub fn layer_lengths(&self, len: usize) -> Result<Vec<(String, usize)>> {
        let mut out = Vec::with_capacity(6);
        let mut l = len;
        for block in 1..=3 {
            let conv = format!("block{block}.conv");
            l = window_out_len(l, self.kernel, self.stride, self.padding()).ok_or_else(|| {
                Error::LengthCollapse {
                    layer: conv.clone(),
                    len: (l + 2 * self.padding()) as i64 - self.kernel as i64,
                }
            })?;
            out.push((conv, l));
            let pool = format!("block{block}.pool");
            l = window_out_len(l, self.pool_kernel, self.pool_stride, 0).ok_or_else(|| {
                Error::LengthCollapse {
                    layer: pool.clone(),
                    len: l as i64 - self.pool_kernel as i64 + 1,
                }
            })?;
            out.push((pool, l));
        }
        Ok(out)
    }
}

/// Materialized outputs of an eval-mode forward.
#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    pub features: Tensor<T>,
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
}

/// Graph handles produced by [`EncoderClassifier::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
    pub probabilities: Var,
    batch_norms: Vec<(usize, Var)>,
}

#[derive(Clone, Debug)]
pub struct EncoderClassifier<T> {
    cfg: EncoderConfig,
    store: ParamStore<T>,
}

fn conv_name(block: usize) -> String {
    format!("block{block}.conv.weight")
}

fn bn_names(block: usize) -> [String; 4] {
    [
        format!("block{block}.bn.weight"),
        format!("block{block}.bn.bias"),
        format!("block{block}.bn.running_mean"),
        format!("block{block}.bn.running_var"),
    ]
}

const CLS_WEIGHT: &str = "classifier.weight";
const CLS_BIAS: &str = "classifier.bias";

impl<T: Scalar> EncoderClassifier<T> {
    /// Fan-in scaled uniform initialization, reproducible from `init_seed`.
    pub fn build(cfg: EncoderConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(&[init_seed, 0x1417]);
        let mut uniform = |shape: &[usize], fan_in: usize| -> Tensor<T> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| T::lit(rng.random_range(-bound..bound)))
                .collect();
            Tensor::new(shape, data).expect("shape")
        };
        let mut cin = cfg.in_channels;
        for (i, &cout) in cfg.filters.iter().enumerate() {
            let block = i + 1;
            store.insert(
                &conv_name(block),
                uniform(&[cout, cin, cfg.kernel], cin * cfg.kernel),
            );
            let [w, b, rm, rv] = bn_names(block);
            store.insert(&w, Tensor::ones(&[cout]));
            store.insert(&b, Tensor::zeros(&[cout]));
            store.insert_buffer(&rm, Tensor::zeros(&[cout]));
            store.insert_buffer(&rv, Tensor::ones(&[cout]));
            cin = cout;
        }
        let fd = cfg.feature_dim();
        store.insert(CLS_WEIGHT, uniform(&[cfg.num_classes, fd], fd));
        store.insert(CLS_BIAS, uniform(&[cfg.num_classes], fd));
        Ok(EncoderClassifier { cfg, store })
    }

    pub fn from_parts(cfg: EncoderConfig, store: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let reference = EncoderClassifier::<T>::build(cfg.clone(), 0)?;
        for (name, value, _) in reference.store.iter() {
            match store.get(name) {
                Some(v) if v.shape() == value.shape() => {}
                _ => {
                    return Err(Error::data(format!(
                        "parameter {name} missing or misshapen"
                    )))
                }
            }
        }
        Ok(EncoderClassifier { cfg, store })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn cast<U: Scalar>(&self) -> EncoderClassifier<U> {
        EncoderClassifier {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
        }
    }

    /// Records the forward pass on `g`; the graph's mode selects train/eval
    /// behaviour. `dropout_seed` keys the dropout mask in training mode.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, dropout_seed: u64) -> Result<ForwardVars> {
        self.forward_with(&self.store, g, x, dropout_seed)
    }

    /// As [`Self::forward`] but reading weights from an explicit store (used when
    /// finite differences perturb a copy).
    pub fn forward_with(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        x: Var,
        dropout_seed: u64,
    ) -> Result<ForwardVars> {
        let cfg = &self.cfg;
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != cfg.in_channels {
            return Err(Error::shape(
                "encoder",
                format!("expected [B, {}, L], got {shape:?}", cfg.in_channels),
            ));
        }
        cfg.layer_lengths(shape[2])?;
        let mut h = x;
        let mut batch_norms = Vec::with_capacity(3);
        for block in 1..=3 {
            let w = g.param(store, &conv_name(block))?;
            h = g.apply(
                Primitive::Conv1d {
                    stride: cfg.stride,
                    padding: cfg.padding(),
                },
                &[h, w],
            )?;
            let [gw, gb, rm, rv] = bn_names(block);
            let gamma = g.param(store, &gw)?;
            let beta = g.param(store, &gb)?;
            let mut bn_inputs = vec![h, gamma, beta];
            if !g.training() {
                for name in [&rm, &rv] {
                    let t = store
                        .buffer(name)
                        .ok_or_else(|| Error::config(format!("missing buffer {name}")))?
                        .clone();
                    bn_inputs.push(g.input(t));
                }
            }
            h = g.apply(Primitive::BatchNorm1d { eps: cfg.bn_eps }, &bn_inputs)?;
            batch_norms.push((block, h));
            h = g.apply(Primitive::Relu, &[h])?;
            h = g.apply(
                Primitive::MaxPool1d {
                    kernel: cfg.pool_kernel,
                    stride: cfg.pool_stride,
                },
                &[h],
            )?;
            if block == 1 {
                h = g.apply(
                    Primitive::Dropout {
                        rate: cfg.dropout,
                        seed: dropout_seed,
                    },
                    &[h],
                )?;
            }
        }
        h = g.apply(
            Primitive::AdaptiveAvgPool1d {
                output: cfg.pool_out,
            },
            &[h],
        )?;
        let features = g.apply(Primitive::Reshape(vec![shape[0], cfg.feature_dim()]), &[h])?;
        let w = g.param(store, CLS_WEIGHT)?;
        let b = g.param(store, CLS_BIAS)?;
        let logits = g.apply(Primitive::Linear, &[features, w, b])?;
        let probabilities = g.apply(Primitive::Softmax, &[logits])?;
        Ok(ForwardVars {
            features,
            logits,
            probabilities,
            batch_norms,
        })
    }

    /// Folds the batch statistics of a training-mode forward into the running
    /// statistics.
    pub fn update_running_stats(&mut self, g: &Graph<T>, fw: &ForwardVars) {
        let m = T::lit(self.cfg.bn_momentum);
        for &(block, v) in &fw.batch_norms {
            let Some((mean, var)) = g.batch_stats(v) else {
                continue;
            };
            let [_, _, rm, rv] = bn_names(block);
            for (name, stat) in [(rm, mean), (rv, var)] {
                let buf = self.store.buffer_mut(&name).expect("buffer exists");
                for (r, &s) in buf.data_mut().iter_mut().zip(stat) {
                    *r = (T::one() - m) * *r + m * s;
                }
            }
        }
    }

    /// Eval-mode forward over `x`, processed in chunks of `chunk` samples.
    pub fn predict(&self, x: &Tensor<T>, chunk: usize) -> Result<ModelOutput<T>> {
        let n = x.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let mut g = Graph::new(false);
            let xv = g.input(x.select_rows(&rows));
            let fw = self.forward(&mut g, xv, 0)?;
            parts.push((
                g.value(fw.features).clone(),
                g.value(fw.logits).clone(),
                g.value(fw.probabilities).clone(),
            ));
            start = end;
        }
        let cat = |sel: fn(&(Tensor<T>, Tensor<T>, Tensor<T>)) -> &Tensor<T>| {
            Tensor::concat_rows(&parts.iter().map(sel).collect::<Vec<_>>())
        };
        Ok(ModelOutput {
            features: cat(|p| &p.0)?,
            logits: cat(|p| &p.1)?,
            probabilities: cat(|p| &p.2)?,
        })
    }

    /// Writes `<stem>.json` (config + parameter manifest) and `<stem>.bin`
    /// (little-endian payload in manifest order).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut payload = Vec::new();
        let mut manifest = Vec::new();
        let entries = self
            .store
            .iter()
            .map(|(n, v, _)| (n.to_string(), v, false))
            .chain(
                self.store
                    .buffer_names()
                    .map(|n| (n.to_string(), self.store.buffer(n).expect("listed"), true)),
            );
        for (name, value, buffer) in entries {
            manifest.push(ManifestEntry {
                name,
                shape: value.shape().to_vec(),
                offset: payload.len() / T::BYTES,
                buffer,
            });
            for &v in value.data() {
                v.write_le(&mut payload);
            }
        }
        let desc = CheckpointDescriptor {
            config: self.cfg.clone(),
            dtype: T::DTYPE.to_string(),
            params: manifest,
        };
        let json_path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&desc).map_err(|e| Error::Json {
            path: json_path.clone(),
            source: e,
        })?;
        fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
        let bin_path = dir.join(format!("{stem}.bin"));
        fs::write(&bin_path, payload).map_err(|e| Error::io(&bin_path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let json_path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let desc: CheckpointDescriptor = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: json_path.clone(),
            source: e,
        })?;
        if desc.dtype != T::DTYPE {
            return Err(Error::data(format!(
                "checkpoint dtype {} does not match {}",
                desc.dtype,
                T::DTYPE
            )));
        }
        let bin_path = dir.join(format!("{stem}.bin"));
        let payload = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut store = ParamStore::new();
        for entry in &desc.params {
            let n: usize = entry.shape.iter().product();
            let lo = entry.offset * T::BYTES;
            let hi = lo + n * T::BYTES;
            if hi > payload.len() {
                return Err(Error::data(format!(
                    "{}: payload too short",
                    bin_path.display()
                )));
            }
            let data = payload[lo..hi]
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            let t = Tensor::new(&entry.shape, data)?;
            if entry.buffer {
                store.insert_buffer(&entry.name, t);
            } else {
                store.insert(&entry.name, t);
            }
        }
        Self::from_parts(desc.config, store)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    buffer: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDescriptor {
    config: EncoderConfig,
    dtype: String,
    params: Vec<ManifestEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = rng::stream(&[seed]);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            kernel: 3,
            filters: [4, 8, 8],
            ..EncoderConfig::new(2, 3)
        }
    }

    fn logits_shape(cfg: EncoderConfig, x: &[usize]) -> Vec<usize> {
        let m = EncoderClassifier::<f32>::build(cfg, 1).unwrap();
        let mut g = Graph::new(true);
        let xv = g.input(random_input(x, 2));
        let fw = m.forward(&mut g, xv, 3).unwrap();
        g.value(fw.logits).shape().to_vec()
    }

    #[test]
    fn output_shapes_for_reference_configs() {
        assert_eq!(
            logits_shape(EncoderConfig::new(9, 6), &[32, 9, 128]),
            vec![32, 6]
        );
        let long = EncoderConfig {
            kernel: 25,
            stride: 6,
            ..EncoderConfig::new(1, 5)
        };
        assert_eq!(logits_shape(long, &[8, 1, 3000]), vec![8, 5]);
        assert_eq!(logits_shape(tiny(), &[4, 2, 16]), vec![4, 3]);
    }

    #[test]
    fn tiny_layer_lengths() {
        let lens: Vec<usize> = tiny()
            .layer_lengths(16)
            .unwrap()
            .into_iter()
            .map(|(_, l)| l)
            .collect();
        assert_eq!(lens, vec![16, 8, 8, 4, 4, 2]);
    }

    #[test]
    fn collapse_names_layer() {
        let err = tiny().layer_lengths(4).unwrap_err().to_string();
        assert!(err.contains("block3.pool"), "{err}");
    }

    #[test]
    fn same_seed_same_weights() {
        let a = EncoderClassifier::<f32>::build(tiny(), 7).unwrap();
        let b = EncoderClassifier::<f32>::build(tiny(), 7).unwrap();
        let c = EncoderClassifier::<f32>::build(tiny(), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        // 2*4*3 + 4*8*3 + 8*8*3 + 2*(4+8+8) + 3*8 + 3
        assert_eq!(a.params().num_scalars(), 24 + 96 + 192 + 40 + 27);
    }

    #[test]
    fn eval_forward_is_deterministic_and_normalized() {
        let m = EncoderClassifier::<f32>::build(EncoderConfig::new(3, 4), 1).unwrap();
        let x = random_input(&[5, 3, 64], 4);
        let a = m.predict(&x, 64).unwrap();
        let b = m.predict(&x, 64).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.features.shape(), &[5, 128]);
        for row in a.probabilities.data().chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_classifier_gives_uniform_probabilities() {
        let mut m = EncoderClassifier::<f32>::build(tiny(), 1).unwrap();
        for name in [CLS_WEIGHT, CLS_BIAS] {
            m.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let out = m.predict(&random_input(&[6, 2, 16], 5), 6).unwrap();
        assert!(out
            .probabilities
            .data()
            .iter()
            .all(|&p| (p - 1.0 / 3.0).abs() < 1e-7));
    }

    #[test]
    fn batch_permutation_equivariance_and_single_rows() {
        let m = EncoderClassifier::<f32>::build(EncoderConfig::new(3, 4), 2).unwrap();
        let x = random_input(&[6, 3, 32], 6);
        let full = m.predict(&x, 6).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted = m.predict(&x.select_rows(&perm), 6).unwrap();
        assert_eq!(permuted.logits, full.logits.select_rows(&perm));
        for i in 0..6 {
            let one = m.predict(&x.select_rows(&[i]), 1).unwrap();
            assert!(one.logits.max_abs_diff(&full.logits.select_rows(&[i])) <= 1e-5);
        }
    }

    #[test]
    fn running_stats_move_only_in_training() {
        let mut m = EncoderClassifier::<f32>::build(tiny(), 1).unwrap();
        let before = m.params().buffer("block1.bn.running_mean").unwrap().clone();
        let mut g = Graph::new(true);
        let xv = g.input(random_input(&[4, 2, 16], 9).map(|v| v + 3.0));
        let fw = m.forward(&mut g, xv, 1).unwrap();
        m.update_running_stats(&g, &fw);
        assert_ne!(
            m.params().buffer("block1.bn.running_mean").unwrap(),
            &before
        );

        let snapshot = m.params().clone();
        let mut g = Graph::new(false);
        let xv = g.input(random_input(&[4, 2, 16], 9));
        let fw = m.forward(&mut g, xv, 1).unwrap();
        m.update_running_stats(&g, &fw);
        assert_eq!(m.params(), &snapshot);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = EncoderClassifier::<f32>::build(tiny(), 3).unwrap();
        m.save(dir.path(), "model").unwrap();
        let back = EncoderClassifier::<f32>::load(dir.path(), "model").unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        assert!(EncoderClassifier::<f64>::load(dir.path(), "model").is_err());
    }
}
