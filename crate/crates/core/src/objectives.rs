//! Classification, contrastive and entropy losses on classifier outputs.
//!
//! Every loss returns its value together with the gradient w.r.t. its input so
//! the trainer can record it as a single fused graph node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::substrate::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceContrast {
    ClassAware,
    Unsupervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub temperature: f64,
    /// Weights of classification, source contrast, target entropy and target contrast.
    pub betas: [f64; 4],
    pub cac_reduction: Reduction,
    pub source_contrast: SourceContrast,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            temperature: 0.2,
            betas: [0.78, 0.1, 0.2, 0.1],
            cac_reduction: Reduction::Mean,
            source_contrast: SourceContrast::ClassAware,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("temperature must be positive"));
        }
        if self.betas.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.betas[0] <= 0.0 {
            return Err(Error::config("beta1 must be positive"));
        }
        Ok(())
    }

    pub fn source_only(&self) -> bool {
        self.betas[1..].iter().all(|&b| b == 0.0)
    }
}

/// The four loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub source_contrast: f64,
    pub entropy: f64,
    pub target_contrast: f64,
}

impl LossParts {
    pub fn as_array(&self) -> [f64; 4] {
        [
            self.cls,
            self.source_contrast,
            self.entropy,
            self.target_contrast,
        ]
    }
}

pub fn overall_objective(parts: &LossParts, cfg: &ObjectiveConfig) -> f64 {
    parts
        .as_array()
        .iter()
        .zip(cfg.betas)
        .map(|(p, b)| b * p)
        .sum()
}

fn rows_of<T: Scalar>(t: &Tensor<T>, what: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(
            what,
            format!("expected [B, K], got {:?}", t.shape()),
        ));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn from_f64<T: Scalar>(shape: &[usize], v: Vec<f64>) -> Tensor<T> {
    Tensor::new(shape, v.into_iter().map(T::lit).collect()).expect("shape")
}

/// InfoNCE over all ordered pairs of rows of `p`. Anchor `k` has positive set
/// `positives[k]`, contrast set every other row, and weight `weights[k]`.
fn info_nce(
    p: &[f64],
    k_dim: usize,
    tau: f64,
    positives: &[Vec<usize>],
    weights: &[f64],
) -> (f64, Vec<f64>) {
    let m = positives.len();
    let mut sim = vec![0.0; m * m];
    for a in 0..m {
        for b in a..m {
            let d: f64 = p[a * k_dim..(a + 1) * k_dim]
                .iter()
                .zip(&p[b * k_dim..(b + 1) * k_dim])
                .map(|(x, y)| x * y)
                .sum::<f64>()
                / tau;
            sim[a * m + b] = d;
            sim[b * m + a] = d;
        }
    }
    let mut loss = 0.0;
    let mut gs = vec![0.0; m * m];
    for k in 0..m {
        let pos = &positives[k];
        if pos.is_empty() || weights[k] == 0.0 {
            continue;
        }
        let row = &sim[k * m..(k + 1) * m];
        let max = (0..m)
            .filter(|&a| a != k)
            .map(|a| row[a])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..m)
            .filter(|&a| a != k)
            .map(|a| (row[a] - max).exp())
            .sum();
        let lse = max + z.ln();
        let inv = 1.0 / pos.len() as f64;
        let mean_pos: f64 = pos.iter().map(|&u| row[u]).sum::<f64>() * inv;
        loss += weights[k] * (lse - mean_pos);
        for a in (0..m).filter(|&a| a != k) {
            gs[k * m + a] += weights[k] * (row[a] - lse).exp();
        }
        for &u in pos {
            gs[k * m + u] -= weights[k] * inv;
        }
    }
    let mut grad = vec![0.0; p.len()];
    for k in 0..m {
        for a in 0..m {
            let g = (gs[k * m + a] + gs[a * m + k]) / tau;
            if g == 0.0 {
                continue;
            }
            for c in 0..k_dim {
                grad[k * k_dim + c] += g * p[a * k_dim + c];
            }
        }
    }
    (loss, grad)
}

fn check_pairs<T: Scalar>(p: &Tensor<T>, what: &'static str) -> Result<(usize, usize)> {
    let (m, k) = rows_of(p, what)?;
    if m < 2 || m % 2 != 0 {
        return Err(Error::shape(
            what,
            format!("need an even number of rows >= 2, got {m}"),
        ));
    }
    Ok((m, k))
}

/// Class-aware contrastive loss over `[2n, K]` probabilities whose first `n` rows
/// are originals and last `n` rows their mixed views. `labels` has length `2n`.
pub fn class_aware_contrastive<T: Scalar>(
    p: &Tensor<T>,
    labels: &[usize],
    tau: f64,
    reduction: Reduction,
) -> Result<(f64, Tensor<T>)> {
    let (m, k) = check_pairs(p, "class_aware_contrastive")?;
    if labels.len() != m {
        return Err(Error::shape(
            "class_aware_contrastive",
            format!("{} labels for {m} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::data(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let n = m / 2;
    if (0..n).any(|i| labels[i] != labels[i + n]) {
        return Err(Error::data(
            "views must carry the labels of their originals",
        ));
    }
    let positives: Vec<Vec<usize>> = (0..m)
        .map(|a| {
            (0..m)
                .filter(|&u| u != a && labels[u] == labels[a])
                .collect()
        })
        .collect();
    let anchors = positives.iter().filter(|p| !p.is_empty()).count();
    let w = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean if anchors > 0 => 1.0 / anchors as f64,
        Reduction::Mean => 0.0,
    };
    let (loss, grad) = info_nce(&to_f64(p), k, tau, &positives, &vec![w; m]);
    Ok((loss, from_f64(p.shape(), grad)))
}

/// Unsupervised contrastive loss: row `k` is paired with row `k ± n`.
pub fn unsupervised_contrastive<T: Scalar>(p: &Tensor<T>, tau: f64) -> Result<(f64, Tensor<T>)> {
    let (m, k) = check_pairs(p, "unsupervised_contrastive")?;
    let n = m / 2;
    let positives: Vec<Vec<usize>> = (0..m).map(|a| vec![(a + n) % m]).collect();
    let (loss, grad) = info_nce(&to_f64(p), k, tau, &positives, &vec![1.0 / m as f64; m]);
    Ok((loss, from_f64(p.shape(), grad)))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (b, k) = rows_of(logits, "cross_entropy")?;
    if labels.len() != b {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {b} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::data(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let z = to_f64(logits);
    let mut grad = vec![0.0; z.len()];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &z[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for c in 0..k {
            grad[i * k + c] = ((row[c] - lse).exp() - if c == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, from_f64(logits.shape(), grad)))
}

/// Mean Shannon entropy of the rows of `p`, with `0 log 0 = 0`.
pub fn target_entropy<T: Scalar>(p: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (b, _) = rows_of(p, "target_entropy")?;
    let v = to_f64(p);
    let inv = 1.0 / b as f64;
    let loss = -v
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>()
        * inv;
    let grad = v
        .iter()
        .map(|&x| -(x.max(f64::MIN_POSITIVE).ln() + 1.0) * inv)
        .collect();
    Ok((loss, from_f64(p.shape(), grad)))
}

fn record<T: Scalar>(g: &mut Graph<T>, inputs: &[Var], loss: f64, grad: Tensor<T>) -> Result<Var> {
    let locals = if inputs.len() == 1 {
        vec![grad]
    } else {
        let n = g.value(inputs[0]).shape()[0];
        let (a, b) = grad.split_rows(n);
        vec![a, b]
    };
    g.fused(inputs, T::lit(loss), locals)
}

fn stack<T: Scalar>(g: &Graph<T>, originals: Var, views: Var) -> Result<Tensor<T>> {
    Tensor::concat_rows(&[g.value(originals), g.value(views)])
}

/// Graph node for [`class_aware_contrastive`] over `originals` and `views`
/// (`[n, K]` each) sharing `labels` (length `n`).
pub fn class_aware_contrastive_node<T: Scalar>(
    g: &mut Graph<T>,
    originals: Var,
    views: Var,
    labels: &[usize],
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    let p = stack(g, originals, views)?;
    let doubled: Vec<usize> = labels.iter().chain(labels).copied().collect();
    let (loss, grad) = class_aware_contrastive(&p, &doubled, tau, reduction)?;
    record(g, &[originals, views], loss, grad)
}

pub fn unsupervised_contrastive_node<T: Scalar>(
    g: &mut Graph<T>,
    originals: Var,
    views: Var,
    tau: f64,
) -> Result<Var> {
    let p = stack(g, originals, views)?;
    let (loss, grad) = unsupervised_contrastive(&p, tau)?;
    record(g, &[originals, views], loss, grad)
}

pub fn cross_entropy_node<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
) -> Result<Var> {
    let (loss, grad) = cross_entropy(g.value(logits), labels)?;
    record(g, &[logits], loss, grad)
}

pub fn target_entropy_node<T: Scalar>(g: &mut Graph<T>, probabilities: Var) -> Result<Var> {
    let (loss, grad) = target_entropy(g.value(probabilities))?;
    record(g, &[probabilities], loss, grad)
}
