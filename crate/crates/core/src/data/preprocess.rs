use rand::seq::SliceRandom;

use super::dataset::{ChannelStats, DomainDataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::substrate::Tensor;

pub const TRAIN_FRACTION: f64 = 0.7;

/// Train/eval partition of one domain, both normalized with the train split's
/// per-channel statistics.
#[derive(Clone, Debug)]
pub struct SplitPair {
    pub train: DomainDataset,
    pub eval: DomainDataset,
    pub split_seed: u64,
    pub train_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
}

pub fn split_and_normalize(d: &DomainDataset, seed: u64) -> Result<SplitPair> {
    let n = d.len();
    if n < 4 {
        return Err(Error::data(format!(
            "need at least 4 samples to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(&[seed, 0x5B17]));
    let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
    let mut train_idx = order[..n_train].to_vec();
    let mut eval_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    eval_idx.sort_unstable();

    let train_raw = d.subset(&train_idx);
    let stats = channel_stats(train_raw.x(), d.name());
    let train = normalize(&train_raw, &stats)?;
    let eval = normalize(&d.subset(&eval_idx), &stats)?;
    Ok(SplitPair {
        train,
        eval,
        split_seed: seed,
        train_indices: train_idx,
        eval_indices: eval_idx,
    })
}

/// Population mean/std per channel; constant channels get std 1.
fn channel_stats(x: &Tensor<f32>, name: &str) -> ChannelStats {
    let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let count = (n * l) as f64;
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let values =
            || (0..n).flat_map(move |i| x.data()[(i * c + ch) * l..(i * c + ch + 1) * l].iter());
        let m = values().map(|&v| v as f64).sum::<f64>() / count;
        let var = values().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / count;
        let mut s = var.sqrt();
        if s < 1e-8 {
            log::warn!("{name}: channel {ch} is constant; std clamped to 1");
            s = 1.0;
        }
        mean.push(m as f32);
        std.push(s as f32);
    }
    ChannelStats { mean, std }
}

fn normalize(d: &DomainDataset, stats: &ChannelStats) -> Result<DomainDataset> {
    let (c, l) = (d.channels(), d.length());
    let mut data = d.x().data().to_vec();
    for (j, v) in data.iter_mut().enumerate() {
        let ch = (j / l) % c;
        *v = ((*v as f64 - stats.mean[ch] as f64) / stats.std[ch] as f64) as f32;
    }
    let x = Tensor::new(d.x().shape(), data)?;
    Ok(DomainDataset::new(
        d.name(),
        x,
        d.labels().map(<[usize]>::to_vec),
        d.num_classes(),
    )?
    .with_stats(stats.clone()))
}

/// Cuts a raw `[C, M]` stream into windows `[n, C, width]` starting every `stride` steps.
pub fn sliding_window(stream: &Tensor<f32>, width: usize, stride: usize) -> Result<Tensor<f32>> {
    if stream.rank() != 2 {
        return Err(Error::data(format!(
            "stream must be [C, M], got {:?}",
            stream.shape()
        )));
    }
    let (c, m) = (stream.shape()[0], stream.shape()[1]);
    if stride == 0 || width == 0 {
        return Err(Error::data("window width and stride must be positive"));
    }
    if m < width {
        return Err(Error::data(format!(
            "stream length {m} shorter than window {width}"
        )));
    }
    let n = (m - width) / stride + 1;
    let mut data = Vec::with_capacity(n * c * width);
    for i in 0..n {
        for ch in 0..c {
            let start = ch * m + i * stride;
            data.extend_from_slice(&stream.data()[start..start + width]);
        }
    }
    Tensor::new(&[n, c, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn dataset(n: usize, seed: u64) -> DomainDataset {
        let (c, l) = (3, 20);
        let mut rng = rng::stream(&[seed]);
        let data = (0..n * c * l)
            .map(|j| {
                let ch = (j / l) % c;
                rng.random::<f32>() * (ch as f32 + 1.0) * 4.0 + ch as f32 * 10.0
            })
            .collect();
        let x = Tensor::new(&[n, c, l], data).unwrap();
        DomainDataset::new("d", x, Some((0..n).map(|i| i % 2).collect()), 2).unwrap()
    }

    fn split_moments(d: &DomainDataset) -> Vec<(f64, f64)> {
        let (n, c, l) = (d.len(), d.channels(), d.length());
        (0..c)
            .map(|ch| {
                let vals: Vec<f64> = (0..n)
                    .flat_map(|i| d.x().data()[(i * c + ch) * l..(i * c + ch + 1) * l].to_vec())
                    .map(f64::from)
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                (m, v.sqrt())
            })
            .collect()
    }

    #[test]
    fn seventy_thirty_of_hundred() {
        let s = split_and_normalize(&dataset(100, 1), 7).unwrap();
        assert_eq!((s.train.len(), s.eval.len()), (70, 30));
        let mut all: Vec<usize> = s
            .train_indices
            .iter()
            .chain(&s.eval_indices)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn train_split_is_standardized() {
        let s = split_and_normalize(&dataset(50, 2), 3).unwrap();
        for (m, sd) in split_moments(&s.train) {
            assert!(m.abs() <= 1e-5, "mean {m}");
            assert!((sd - 1.0).abs() <= 1e-4, "std {sd}");
        }
        assert_eq!(s.eval.channel_stats(), s.train.channel_stats());
    }

    #[test]
    fn split_membership_is_seeded() {
        let d = dataset(40, 3);
        let a = split_and_normalize(&d, 11).unwrap();
        let b = split_and_normalize(&d, 11).unwrap();
        let c = split_and_normalize(&d, 12).unwrap();
        assert_eq!(a.train_indices, b.train_indices);
        assert_ne!(a.train_indices, c.train_indices);
    }

    #[test]
    fn normalization_is_idempotent() {
        let s = split_and_normalize(&dataset(60, 4), 5).unwrap();
        let stats = channel_stats(s.train.x(), "again");
        let again = normalize(&s.train, &stats).unwrap();
        assert!(again.x().max_abs_diff(s.train.x()) <= 1e-6);
    }

    #[test]
    fn constant_channel_is_clamped() {
        let x = Tensor::new(&[4, 1, 3], vec![2.5; 12]).unwrap();
        let d = DomainDataset::new("flat", x, None, 1).unwrap();
        let s = split_and_normalize(&d, 0).unwrap();
        assert_eq!(s.train.channel_stats().unwrap().std, vec![1.0]);
        assert!(s.train.x().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_small_to_split() {
        assert!(split_and_normalize(&dataset(3, 1), 0).is_err());
    }

    #[test]
    fn window_counts() {
        let stream =
            |m: usize| Tensor::new(&[2, m], (0..2 * m).map(|v| v as f32).collect()).unwrap();
        let w = sliding_window(&stream(128), 128, 128).unwrap();
        assert_eq!(w.shape(), &[1, 2, 128]);
        assert_eq!(w, stream(128).reshape(&[1, 2, 128]).unwrap());

        let w = sliding_window(&stream(300), 128, 128).unwrap();
        assert_eq!(w.shape(), &[2, 2, 128]);
        assert_eq!(w.data()[0], 0.0);
        assert_eq!(w.data()[2 * 128], 128.0); // second window, channel 0
        assert_eq!(w.data()[3 * 128], 300.0 + 128.0); // second window, channel 1

        assert!(sliding_window(&stream(127), 128, 128).is_err());
    }
}
