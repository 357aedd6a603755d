//! Cross-domain temporal mixup and the baseline augmentations it is compared
//! against.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::substrate::{Graph, Primitive, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixupStrategy {
    Fixed,
    BetaRandom,
    BetaRange,
}

impl std::str::FromStr for MixupStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(MixupStrategy::Fixed),
            "beta_random" => Ok(MixupStrategy::BetaRandom),
            "beta_range" => Ok(MixupStrategy::BetaRange),
            other => Err(Error::config(format!("unknown mixup strategy {other:?}"))),
        }
    }
}

impl MixupStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            MixupStrategy::Fixed => "fixed",
            MixupStrategy::BetaRandom => "beta_random",
            MixupStrategy::BetaRange => "beta_range",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub lambda: f64,
    pub strategy: MixupStrategy,
    pub beta_alpha: f64,
    pub window: usize,
    pub pairing_seed: u64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            lambda: 0.9,
            strategy: MixupStrategy::Fixed,
            beta_alpha: 0.2,
            window: 14,
            pairing_seed: 0,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategy == MixupStrategy::Fixed && !(self.lambda > 0.5 && self.lambda < 1.0) {
            return Err(Error::config(format!(
                "fixed mixup requires 0.5 < lambda < 1, got {}",
                self.lambda
            )));
        }
        if self.strategy != MixupStrategy::Fixed && !(self.beta_alpha > 0.0) {
            return Err(Error::config("mixup.beta_alpha must be positive"));
        }
        Ok(())
    }

    pub fn validate_length(&self, len: usize) -> Result<()> {
        if self.window > len {
            return Err(Error::config(format!(
                "mixup window {} exceeds sequence length {len}",
                self.window
            )));
        }
        Ok(())
    }

    /// Ratio used for the step keyed by `step_seed`.
    pub fn draw_lambda(&self, step_seed: u64) -> f64 {
        match self.strategy {
            MixupStrategy::Fixed => self.lambda,
            MixupStrategy::BetaRandom | MixupStrategy::BetaRange => {
                let mut rng = rng::stream(&[step_seed, 0x1A4B]);
                let beta = Beta::new(self.beta_alpha, self.beta_alpha).expect("alpha validated");
                let l: f64 = beta.sample(&mut rng);
                if self.strategy == MixupStrategy::BetaRange {
                    l.max(1.0 - l)
                } else {
                    l
                }
            }
        }
    }
}

fn window_bounds(i: usize, len: usize, window: usize) -> (usize, usize) {
    let half = window / 2;
    (i.saturating_sub(half), (i + half).min(len - 1))
}

/// Per-channel mean of `x` ([C, L]) over the truncated window centred on `i`.
pub fn windowed_mean<T: Scalar>(x: &Tensor<T>, i: usize, window: usize) -> Vec<T> {
    let (c, len) = (x.shape()[0], x.shape()[1]);
    let (lo, hi) = window_bounds(i, len, window);
    let count = T::lit((hi - lo + 1) as f64);
    (0..c)
        .map(|ch| {
            x.data()[ch * len + lo..=ch * len + hi]
                .iter()
                .copied()
                .sum::<T>()
                / count
        })
        .collect()
}

/// Windowed mean of every row of a row-major `[rows, len]` buffer, via prefix sums.
fn smooth_rows<T: Scalar>(data: &[T], len: usize, window: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    let mut prefix = vec![0.0f64; len + 1];
    for row in data.chunks_exact(len) {
        for (j, &v) in row.iter().enumerate() {
            prefix[j + 1] = prefix[j] + v.as_f64();
        }
        for i in 0..len {
            let (lo, hi) = window_bounds(i, len, window);
            out.push(T::lit((prefix[hi + 1] - prefix[lo]) / (hi - lo + 1) as f64));
        }
    }
    out
}

/// `[L, L]` matrix `M` with `x · M` equal to the windowed mean of row vector `x`.
pub fn windowed_mean_matrix<T: Scalar>(len: usize, window: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[len, len]);
    for i in 0..len {
        let (lo, hi) = window_bounds(i, len, window);
        let w = T::lit(1.0 / (hi - lo + 1) as f64);
        for j in lo..=hi {
            m.data_mut()[j * len + i] = w;
        }
    }
    m
}

fn check_pair<T: Scalar>(xs: &Tensor<T>, xt: &Tensor<T>) -> Result<()> {
    if xs.rank() != 3 || xs.shape() != xt.shape() {
        return Err(Error::shape(
            "mixup",
            format!("source {:?} vs target {:?}", xs.shape(), xt.shape()),
        ));
    }
    Ok(())
}

fn mix_with_lambda<T: Scalar>(
    xs: &Tensor<T>,
    xt: &Tensor<T>,
    lambda: f64,
    window: usize,
) -> (Tensor<T>, Tensor<T>) {
    let len = xs.shape()[2];
    let smooth_s = smooth_rows(xs.data(), len, window);
    let smooth_t = smooth_rows(xt.data(), len, window);
    let (l, r) = (T::lit(lambda), T::lit(1.0 - lambda));
    let mix = |dom: &[T], other: &[T]| -> Vec<T> {
        dom.iter()
            .zip(other)
            .map(|(&d, &o)| l * d + r * o)
            .collect()
    };
    (
        Tensor::new(xs.shape(), mix(xs.data(), &smooth_t)).expect("shape"),
        Tensor::new(xs.shape(), mix(xt.data(), &smooth_s)).expect("shape"),
    )
}

/// Source-dominant and target-dominant views plus the ratio that produced them.
pub fn mixup_views<T: Scalar>(
    xs: &Tensor<T>,
    xt: &Tensor<T>,
    cfg: &MixupConfig,
    step_seed: u64,
) -> Result<(Tensor<T>, Tensor<T>, f64)> {
    check_pair(xs, xt)?;
    cfg.validate()?;
    cfg.validate_length(xs.shape()[2])?;
    let lambda = cfg.draw_lambda(step_seed);
    let (sd, td) = mix_with_lambda(xs, xt, lambda, cfg.window);
    Ok((sd, td, lambda))
}

/// Records both views on the graph so gradients reach `xs` and `xt`.
/// `averaging` is the matrix from [`windowed_mean_matrix`].
pub fn mixup_graph<T: Scalar>(
    g: &mut Graph<T>,
    xs: Var,
    xt: Var,
    averaging: Var,
    lambda: f64,
) -> Result<(Var, Var)> {
    let shape = g.value(xs).shape().to_vec();
    if shape.len() != 3 || g.value(xt).shape() != shape.as_slice() {
        return Err(Error::shape(
            "mixup",
            format!("source {:?} vs target {:?}", shape, g.value(xt).shape()),
        ));
    }
    let rows = vec![shape[0] * shape[1], shape[2]];
    let mut one = |dom: Var, other: Var| -> Result<Var> {
        let flat = g.apply(Primitive::Reshape(rows.clone()), &[other])?;
        let smooth = g.apply(Primitive::MatMul, &[flat, averaging])?;
        let smooth = g.apply(Primitive::Reshape(shape.clone()), &[smooth])?;
        let a = g.apply(Primitive::Scale(lambda), &[dom])?;
        let b = g.apply(Primitive::Scale(1.0 - lambda), &[smooth])?;
        g.apply(Primitive::Add, &[a, b])
    };
    let sd = one(xs, xt)?;
    let td = one(xt, xs)?;
    Ok((sd, td))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    Permutation,
    Scaling,
    Jittering,
    Masking,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 4] = [
        AugmentationKind::Permutation,
        AugmentationKind::Scaling,
        AugmentationKind::Jittering,
        AugmentationKind::Masking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentationKind::Permutation => "permutation",
            AugmentationKind::Scaling => "scaling",
            AugmentationKind::Jittering => "jittering",
            AugmentationKind::Masking => "masking",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub kind: AugmentationKind,
    pub max_segments: usize,
    pub scale_std: f64,
    pub jitter_std: f64,
    pub mask_fraction: f64,
}

impl AugmentationSpec {
    pub fn new(kind: AugmentationKind) -> Self {
        AugmentationSpec {
            kind,
            max_segments: 5,
            scale_std: 0.1,
            jitter_std: 0.05,
            mask_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_segments < 2 {
            return Err(Error::config("augment.max_segments must be at least 2"));
        }
        if !(self.scale_std >= 0.0 && self.jitter_std >= 0.0) {
            return Err(Error::config("augmentation std must be non-negative"));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(Error::config("augment.mask_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Applies `spec` independently to every sample of `x` ([B, C, L]).
pub fn augment<T: Scalar>(x: &Tensor<T>, spec: &AugmentationSpec, seed: u64) -> Result<Tensor<T>> {
    spec.validate()?;
    if x.rank() != 3 {
        return Err(Error::shape(
            "augment",
            format!("expected [B, C, L], got {:?}", x.shape()),
        ));
    }
    let (b, c, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if spec.kind == AugmentationKind::Permutation && spec.max_segments > len {
        return Err(Error::config(format!(
            "max_segments {} exceeds sequence length {len}",
            spec.max_segments
        )));
    }
    let mut out = x.clone();
    let mut rng = rng::stream(&[seed, 0xA06]);
    for sample in out.data_mut().chunks_exact_mut(c * len) {
        match spec.kind {
            AugmentationKind::Permutation => {
                let r = rng.random_range(2..=spec.max_segments);
                let mut cuts: Vec<usize> = rand::seq::index::sample(&mut rng, len - 1, r - 1)
                    .into_iter()
                    .map(|v| v + 1)
                    .collect();
                cuts.sort_unstable();
                let mut bounds = vec![0];
                bounds.extend(cuts);
                bounds.push(len);
                let mut order: Vec<usize> = (0..r).collect();
                order.shuffle(&mut rng);
                let src = sample.to_vec();
                for ch in 0..c {
                    let row = &src[ch * len..(ch + 1) * len];
                    let mut pos = ch * len;
                    for &seg in &order {
                        let piece = &row[bounds[seg]..bounds[seg + 1]];
                        sample[pos..pos + piece.len()].copy_from_slice(piece);
                        pos += piece.len();
                    }
                }
            }
            AugmentationKind::Scaling => {
                let dist = Normal::new(1.0, spec.scale_std).expect("validated std");
                for row in sample.chunks_exact_mut(len) {
                    let f = T::lit(dist.sample(&mut rng));
                    row.iter_mut().for_each(|v| *v *= f);
                }
            }
            AugmentationKind::Jittering => {
                let dist = Normal::new(0.0, spec.jitter_std).expect("validated std");
                sample
                    .iter_mut()
                    .for_each(|v| *v += T::lit(dist.sample(&mut rng)));
            }
            AugmentationKind::Masking => {
                let span = ((spec.mask_fraction * len as f64).round() as usize).min(len);
                let start = rng.random_range(0..=len - span);
                for row in sample.chunks_exact_mut(len) {
                    row[start..start + span].fill(T::zero());
                }
            }
        }
    }
    debug_assert_eq!(out.shape()[0], b);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::{grad_check_inputs, GradCheckOptions};
    use proptest::prelude::{
        any, prop, prop_assert, prop_assert_eq, proptest, ProptestConfig, Strategy,
    };

    fn fixed(lambda: f64, window: usize) -> MixupConfig {
        MixupConfig {
            lambda,
            window,
            ..MixupConfig::default()
        }
    }

    fn seq(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, 1, v.len()], v).unwrap()
    }

    /// Literal per-timestep loop over the window.
    fn naive(xs: &Tensor<f64>, xt: &Tensor<f64>, lambda: f64, window: usize) -> Tensor<f64> {
        let [b, c, l] = [xs.shape()[0], xs.shape()[1], xs.shape()[2]];
        let half = (window / 2) as i64;
        let mut out = vec![0.0; b * c * l];
        for n in 0..b {
            for ch in 0..c {
                for i in 0..l as i64 {
                    let mut sum = 0.0;
                    let mut count = 0.0;
                    for j in i - half..=i + half {
                        if j >= 0 && j < l as i64 {
                            sum += xt.data()[(n * c + ch) * l + j as usize];
                            count += 1.0;
                        }
                    }
                    let at = (n * c + ch) * l + i as usize;
                    out[at] = lambda * xs.data()[at] + (1.0 - lambda) * sum / count;
                }
            }
        }
        Tensor::new(xs.shape(), out).unwrap()
    }

    #[test]
    fn windowed_mean_hand_values() {
        let x: Tensor<f64> = Tensor::from_f64(&[1, 4], &[4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(windowed_mean(&x, 0, 2), vec![3.5]);
        assert_eq!(windowed_mean(&x, 1, 2), vec![3.0]);
        assert_eq!(windowed_mean(&x, 3, 2), vec![1.5]);
        assert_eq!(windowed_mean(&x, 2, 0), vec![2.0]);
        let c: Tensor<f64> = Tensor::full(&[2, 9], 1.25);
        for t in 0..9 {
            assert_eq!(windowed_mean(&c, 4, t), vec![1.25, 1.25]);
        }
    }

    #[test]
    fn mixup_hand_example() {
        let (sd, _, l) = mixup_views(
            &seq(&[1., 2., 3., 4.]),
            &seq(&[4., 3., 2., 1.]),
            &fixed(0.75, 2),
            0,
        )
        .unwrap();
        assert_eq!(l, 0.75);
        let want = [1.625, 2.25, 2.75, 3.375];
        for (a, b) in sd.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_one_is_identity_and_constants_are_fixed_points() {
        let xs = seq(&[1., -2., 3., 5., 0.5]);
        let xt = seq(&[2., 2., -1., 0., 4.]);
        let (sd, td) = mix_with_lambda(&xs, &xt, 1.0, 3);
        assert_eq!((sd, td), (xs, xt));
        let (a, b): (Tensor<f64>, Tensor<f64>) = (
            Tensor::full(&[2, 3, 10], 2.0),
            Tensor::full(&[2, 3, 10], -1.0),
        );
        let (sd, td, _) = mixup_views(&a, &b, &fixed(0.8, 5), 0).unwrap();
        assert!(sd.data().iter().all(|v| (v - 1.4).abs() < 1e-12));
        assert!(td.data().iter().all(|v| (v + 0.4).abs() < 1e-12));
    }

    #[test]
    fn invalid_configs_rejected() {
        let x = seq(&[1., 2., 3.]);
        for lambda in [0.5, 1.0, 0.3] {
            assert!(mixup_views(&x, &x, &fixed(lambda, 1), 0).is_err());
        }
        assert!(mixup_views(&x, &x, &fixed(0.7, 4), 0).is_err());
        assert!(mixup_views(&x, &seq(&[1., 2.]), &fixed(0.7, 1), 0).is_err());
    }

    #[test]
    fn graph_mixup_matches_tensor_version_and_has_gradients() {
        let mut rng = rng::stream(&[3]);
        let xs: Tensor<f64> = Tensor::new(
            &[2, 3, 11],
            (0..66).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let xt: Tensor<f64> = Tensor::new(
            &[2, 3, 11],
            (0..66).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (sd, td) = mix_with_lambda(&xs, &xt, 0.7, 5);
        let mut g = Graph::new(true);
        let (a, b) = (g.input(xs.clone()), g.input(xt.clone()));
        let m = g.input(windowed_mean_matrix(11, 5));
        let (gsd, gtd) = mixup_graph(&mut g, a, b, m, 0.7).unwrap();
        assert!(g.value(gsd).max_abs_diff(&sd) < 1e-12);
        assert!(g.value(gtd).max_abs_diff(&td) < 1e-12);

        let w: Tensor<f64> = Tensor::new(
            &[2, 3, 11],
            (0..66).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let err = grad_check_inputs(
            &[xs, xt],
            true,
            |g, v| {
                let m = g.input(windowed_mean_matrix(11, 5));
                let (sd, td) = mixup_graph(g, v[0], v[1], m, 0.7)?;
                let wv = g.input(w.clone());
                let p = g.apply(Primitive::Mul, &[sd, wv])?;
                let q = g.apply(Primitive::Mul, &[td, td])?;
                let s = g.apply(Primitive::Add, &[p, q])?;
                g.apply(Primitive::Sum, &[s])
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn beta_strategies_draw_per_step() {
        let cfg = MixupConfig {
            strategy: MixupStrategy::BetaRandom,
            ..MixupConfig::default()
        };
        let draws: Vec<f64> = (0..50).map(|s| cfg.draw_lambda(s)).collect();
        assert!(draws.iter().any(|&l| l < 0.5));
        assert_eq!(cfg.draw_lambda(7), cfg.draw_lambda(7));
    }

    #[test]
    fn masking_zeroes_rounded_span() {
        let x = Tensor::full(&[3, 2, 128], 1.0f32);
        let out = augment(&x, &AugmentationSpec::new(AugmentationKind::Masking), 4).unwrap();
        for row in out.data().chunks(128) {
            let zeros: Vec<usize> = (0..128).filter(|&i| row[i] == 0.0).collect();
            assert_eq!(zeros.len(), 13);
            assert_eq!(zeros[12] - zeros[0], 12);
        }
    }

    #[test]
    fn zero_scale_std_is_identity() {
        let mut rng = rng::stream(&[5]);
        let x: Tensor<f32> = Tensor::new(
            &[2, 3, 16],
            (0..96).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let spec = AugmentationSpec {
            scale_std: 0.0,
            ..AugmentationSpec::new(AugmentationKind::Scaling)
        };
        assert_eq!(augment(&x, &spec, 1).unwrap(), x);
    }

    #[test]
    fn permutation_needs_enough_timesteps() {
        let x = Tensor::full(&[1, 1, 4], 1.0f32);
        assert!(augment(&x, &AugmentationSpec::new(AugmentationKind::Permutation), 0).is_err());
    }

    fn tensor_strategy(b: usize, c: usize, l: usize) -> impl Strategy<Value = Tensor<f64>> {
        prop::collection::vec(-5.0..5.0f64, b * c * l)
            .prop_map(move |d| Tensor::new(&[b, c, l], d).unwrap())
    }

    fn case() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, f64, usize)> {
        (1usize..4, 1usize..4, 1usize..20).prop_flat_map(|(b, c, l)| {
            (
                tensor_strategy(b, c, l),
                tensor_strategy(b, c, l),
                0.51..0.99f64,
                0..=l,
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn vectorized_matches_naive((xs, xt, lambda, window) in case()) {
            let (sd, td, _) = mixup_views(&xs, &xt, &fixed(lambda, window), 0).unwrap();
            prop_assert!(sd.max_abs_diff(&naive(&xs, &xt, lambda, window)) <= 1e-6);
            prop_assert!(td.max_abs_diff(&naive(&xt, &xs, lambda, window)) <= 1e-6);
        }

        #[test]
        fn roles_are_symmetric((xs, xt, lambda, window) in case()) {
            let cfg = fixed(lambda, window);
            let (_, td, _) = mixup_views(&xs, &xt, &cfg, 0).unwrap();
            let (sd, _, _) = mixup_views(&xt, &xs, &cfg, 0).unwrap();
            prop_assert_eq!(td, sd);
        }

        #[test]
        fn mixed_values_stay_in_window_range((xs, xt, lambda, window) in case()) {
            let (sd, _, _) = mixup_views(&xs, &xt, &fixed(lambda, window), 0).unwrap();
            let l = xs.shape()[2];
            for (row, (s, t)) in sd.data().chunks(l).zip(xs.data().chunks(l).zip(xt.data().chunks(l))) {
                for i in 0..l {
                    let (lo, hi) = window_bounds(i, l, window);
                    let vals = t[lo..=hi].iter().chain(std::iter::once(&s[i]));
                    let min = vals.clone().fold(f64::INFINITY, |a, &b| a.min(b));
                    let max = vals.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    prop_assert!(row[i] >= min - 1e-6 && row[i] <= max + 1e-6);
                }
            }
        }

        #[test]
        fn beta_range_is_at_least_half(seed in any::<u64>(), alpha in 0.05..5.0f64) {
            let cfg = MixupConfig { strategy: MixupStrategy::BetaRange, beta_alpha: alpha, ..MixupConfig::default() };
            prop_assert!(cfg.draw_lambda(seed) >= 0.5);
        }

        #[test]
        fn permutation_keeps_channel_multisets(seed in any::<u64>(), x in tensor_strategy(2, 3, 12)) {
            let out = augment(&x, &AugmentationSpec::new(AugmentationKind::Permutation), seed).unwrap();
            for (a, b) in out.data().chunks(12).zip(x.data().chunks(12)) {
                let mut a = a.to_vec();
                let mut b = b.to_vec();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                prop_assert_eq!(a, b);
            }
        }
    }
}
