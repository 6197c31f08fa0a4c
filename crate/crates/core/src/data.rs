//! In-memory labelled image splits with per-resolution caches.

use std::collections::BTreeMap;

use crate::error::{OqatError, Result};
use crate::numerics::{resize_bilinear, Tensor};

/// Labelled NCHW images stored at their native size, with optional
/// pre-resized copies keyed by resolution.
#[derive(Debug, Clone)]
pub struct Split {
    images: Tensor<f32>,
    labels: Vec<usize>,
    resized: BTreeMap<usize, Tensor<f32>>,
}

impl Split {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 || images.dim(0) != labels.len() {
            return Err(OqatError::Shape(format!(
                "split needs NCHW images with one label each, got {:?} and {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if images.dim(2) != images.dim(3) {
            return Err(OqatError::Shape(format!("images must be square, got {:?}", images.shape())));
        }
        Ok(Self { images, labels, resized: BTreeMap::new() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn image_size(&self) -> usize {
        self.images.dim(2)
    }

    /// Resize every image once for each listed resolution.
    pub fn prepare(&mut self, resolutions: &[usize]) -> Result<()> {
        for &r in resolutions {
            if r != self.image_size() && !self.resized.contains_key(&r) {
                let t = resize_bilinear(&self.images, r, r)?;
                self.resized.insert(r, t);
            }
        }
        Ok(())
    }

    fn at(&self, resolution: usize) -> Option<&Tensor<f32>> {
        if resolution == self.image_size() {
            Some(&self.images)
        } else {
            self.resized.get(&resolution)
        }
    }

    /// Images `indices` at `resolution` plus their labels.
    pub fn batch(&self, indices: &[usize], resolution: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let images = match self.at(resolution) {
            Some(t) => t.gather_rows(indices),
            None => resize_bilinear(&self.images.gather_rows(indices), resolution, resolution)?,
        };
        Ok((images, labels))
    }

    /// Consecutive index chunks of at most `batch_size`.
    pub fn chunks(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len()).collect::<Vec<_>>().chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Train / validation / calibration splits.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Split,
    pub val: Split,
    pub calib: Split,
    pub num_classes: usize,
}

impl DataSplits {
    pub fn prepare(&mut self, resolutions: &[usize]) -> Result<()> {
        self.train.prepare(resolutions)?;
        self.val.prepare(resolutions)?;
        self.calib.prepare(resolutions)
    }

    pub fn in_channels(&self) -> usize {
        self.train.images().dim(1)
    }
}
