//! Directory format: `meta.json`, `X.f32le` (row-major `[n][C][L]` little-endian
//! f32) and `y.u8` (one byte per sample, present iff `has_labels`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::DomainDataset;
use crate::error::{Error, Result};
use crate::substrate::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub n: usize,
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
    pub has_labels: bool,
}

pub fn save_domain(d: &DomainDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if d.num_classes() > 256 {
        return Err(Error::data("y.u8 holds at most 256 classes"));
    }
    let meta = DatasetMeta {
        name: d.name().to_string(),
        n: d.len(),
        channels: d.channels(),
        length: d.length(),
        classes: d.num_classes(),
        has_labels: d.labels().is_some(),
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;

    let mut bytes = Vec::with_capacity(d.x().numel() * 4);
    for v in d.x().data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let x_path = dir.join("X.f32le");
    fs::write(&x_path, bytes).map_err(|e| Error::io(&x_path, e))?;

    let y_path = dir.join("y.u8");
    match d.labels() {
        Some(y) => {
            let bytes: Vec<u8> = y.iter().map(|&c| c as u8).collect();
            fs::write(&y_path, bytes).map_err(|e| Error::io(&y_path, e))?;
        }
        None if y_path.exists() => fs::remove_file(&y_path).map_err(|e| Error::io(&y_path, e))?,
        None => {}
    }
    Ok(())
}

pub fn load_domain(dir: &Path) -> Result<DomainDataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    if meta.n == 0 || meta.channels == 0 || meta.length == 0 {
        return Err(Error::data(format!(
            "{}: empty dimensions in descriptor",
            dir.display()
        )));
    }

    let x_path = dir.join("X.f32le");
    let bytes = fs::read(&x_path).map_err(|e| Error::io(&x_path, e))?;
    let expected = meta.n * meta.channels * meta.length * 4;
    if bytes.len() != expected {
        return Err(Error::data(format!(
            "{}: payload size mismatch: expected {expected} bytes, found {}",
            x_path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let x = Tensor::new(&[meta.n, meta.channels, meta.length], data)?;

    let y = if meta.has_labels {
        let y_path = dir.join("y.u8");
        let bytes = fs::read(&y_path).map_err(|e| Error::io(&y_path, e))?;
        if bytes.len() != meta.n {
            return Err(Error::data(format!(
                "{}: label count mismatch: expected {}, found {}",
                y_path.display(),
                meta.n,
                bytes.len()
            )));
        }
        Some(bytes.into_iter().map(usize::from).collect())
    } else {
        None
    };
    DomainDataset::new(meta.name, x, y, meta.classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_dataset(n: usize, c: usize, l: usize, k: usize, labeled: bool) -> DomainDataset {
        let mut rng = crate::rng::stream(&[n as u64, c as u64, l as u64]);
        let x = Tensor::new(
            &[n, c, l],
            (0..n * c * l)
                .map(|_| rng.random::<f32>() * 8.0 - 4.0)
                .collect(),
        )
        .unwrap();
        let y = labeled.then(|| (0..n).map(|i| i % k).collect());
        DomainDataset::new("rand", x, y, k).unwrap()
    }

    #[test]
    fn save_then_load_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let d = random_dataset(10, 3, 128, 4, true);
        save_domain(&d, dir.path()).unwrap();
        let back = load_domain(dir.path()).unwrap();
        assert_eq!(back, d);
        let bytes = std::fs::read(dir.path().join("X.f32le")).unwrap();
        assert_eq!(bytes.len(), 10 * 3 * 128 * 4);
    }

    #[test]
    fn unlabeled_roundtrip_has_no_label_file() {
        let dir = tempfile::tempdir().unwrap();
        let d = random_dataset(4, 2, 8, 2, false);
        save_domain(&d, dir.path()).unwrap();
        assert!(!dir.path().join("y.u8").exists());
        assert_eq!(load_domain(dir.path()).unwrap(), d);
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let d = random_dataset(10, 3, 16, 2, true);
        save_domain(&d, dir.path()).unwrap();
        let nine = random_dataset(9, 3, 16, 2, true);
        let mut bytes = Vec::new();
        for v in nine.x().data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.path().join("X.f32le"), bytes).unwrap();
        let err = load_domain(dir.path()).unwrap_err().to_string();
        assert!(err.contains("payload size mismatch"), "{err}");
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_domain(&random_dataset(4, 1, 4, 3, true), dir.path()).unwrap();
        std::fs::write(dir.path().join("y.u8"), [0u8, 1, 2, 3]).unwrap();
        assert!(load_domain(dir.path()).is_err());
    }

    #[test]
    fn har_shaped_descriptor_loads() {
        let dir = tempfile::tempdir().unwrap();
        save_domain(&random_dataset(5, 9, 128, 6, true), dir.path()).unwrap();
        let d = load_domain(dir.path()).unwrap();
        assert_eq!(d.x().shape(), &[5, 9, 128]);
        assert_eq!(d.num_classes(), 6);
    }
}
