use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::substrate::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// One domain's samples `[n, C, L]` with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    name: String,
    x: Tensor<f32>,
    y: Option<Vec<usize>>,
    num_classes: usize,
    channel_stats: Option<ChannelStats>,
}

impl DomainDataset {
    pub fn new(
        name: impl Into<String>,
        x: Tensor<f32>,
        y: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if x.rank() != 3 {
            return Err(Error::data(format!(
                "samples must be [n, C, L], got {:?}",
                x.shape()
            )));
        }
        if num_classes == 0 {
            return Err(Error::data("class count must be positive"));
        }
        if let Some(y) = &y {
            if y.len() != x.shape()[0] {
                return Err(Error::data(format!(
                    "{} labels for {} samples",
                    y.len(),
                    x.shape()[0]
                )));
            }
            if let Some(bad) = y.iter().find(|&&c| c >= num_classes) {
                return Err(Error::data(format!(
                    "label id {bad} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(DomainDataset {
            name: name.into(),
            x,
            y,
            num_classes,
            channel_stats: None,
        })
    }

    pub(crate) fn with_stats(mut self, stats: ChannelStats) -> Self {
        self.channel_stats = Some(stats);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn x(&self) -> &Tensor<f32> {
        &self.x
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.y.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channel_stats(&self) -> Option<&ChannelStats> {
        self.channel_stats.as_ref()
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn length(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        DomainDataset {
            name: self.name.clone(),
            x: self.x.select_rows(indices),
            y: self
                .y
                .as_ref()
                .map(|y| indices.iter().map(|&i| y[i]).collect()),
            num_classes: self.num_classes,
            channel_stats: self.channel_stats.clone(),
        }
    }

    /// Batch of samples converted to the working precision.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        self.x.select_rows(indices).cast()
    }

    /// Drops the labels. The result's type has no way to expose them.
    pub fn unlabeled(&self) -> UnlabeledDataset {
        UnlabeledDataset { x: self.x.clone() }
    }
}

/// Samples only; used for the target domain's training split.
#[derive(Clone, Debug)]
pub struct UnlabeledDataset {
    x: Tensor<f32>,
}

impl UnlabeledDataset {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        self.x.select_rows(indices).cast()
    }
}
