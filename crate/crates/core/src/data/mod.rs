//! Labeled images, file formats, the synthetic context dataset and
//! accuracy metrics.

mod io;
mod metrics;
mod synth;

pub use io::{
    load_image, load_labeled, load_labels, read_manifest, save_color_png, save_image, save_labels, write_manifest,
    Palette,
};
pub use metrics::ConfusionMatrix;
pub use synth::{gen_synthetic, SyntheticSpec, TextureParams, AMBIGUOUS_CLASSES};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An image with values in `[0, 1]` and one label per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    /// `[c, H, W]`
    pub image: Tensor,
    /// Row-major `H × W`; [`IGNORE_LABEL`](crate::graph::IGNORE_LABEL) marks
    /// unlabeled pixels.
    pub labels: Vec<u8>,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, image: Tensor, labels: Vec<u8>) -> Result<Self> {
        if image.rank() != 3 || image.shape()[1] * image.shape()[2] != labels.len() {
            return Err(Error::Shape {
                op: "labeled image",
                left: image.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        Ok(Self {
            id: id.into(),
            image,
            labels,
        })
    }

    /// `(channels, height, width)`
    pub fn extents(&self) -> (usize, usize, usize) {
        let s = self.image.shape();
        (s[0], s[1], s[2])
    }

    /// Mirror image left to right.
    pub fn flipped(&self) -> Self {
        let (c, h, w) = self.extents();
        let src = self.image.data();
        let mut data = vec![0.0; src.len()];
        let mut labels = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
                }
                labels[y * w + x] = self.labels[y * w + (w - 1 - x)];
            }
        }
        Self {
            id: self.id.clone(),
            image: Tensor::new(&[c, h, w], data).expect("same shape"),
            labels,
        }
    }
}
