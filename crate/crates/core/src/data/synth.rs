//! Synthetic scenes whose central label is decidable only from distant
//! context.
//!
//! Each grayscale image has a small marker in one corner and a larger patch
//! elsewhere. The patch texture is the same in every image; its label is one
//! of the two [`AMBIGUOUS_CLASSES`], chosen by the marker's texture (flat
//! versus checkered). Class 0 is background, class 3 (when present) is the
//! marker, and classes from 4 up are distractor squares with their own
//! textures. All intensities lie on the `k / 255` grid.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The two patch classes that share one appearance.
pub const AMBIGUOUS_CLASSES: [u8; 2] = [1, 2];
const MARKER_CLASS: u8 = 3;
const PLACEMENT_TRIES: usize = 1000;

/// Appearance settings for generated scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    /// Half-width of the uniform per-pixel noise.
    pub noise_amplitude: f64,
    pub marker_side: usize,
    pub patch_side: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Images are `size × size`.
    pub size: usize,
    pub num_classes: usize,
    /// Minimum Chebyshev distance in pixels between the marker and patch
    /// centers.
    pub marker_distance_min: usize,
    pub texture_seed_params: TextureParams,
}

impl SyntheticSpec {
    /// Marker of side `size/8`, patch of side `size/4`, centers at least
    /// `size/2` apart.
    pub fn new(size: usize, num_classes: usize) -> Self {
        Self {
            size,
            num_classes,
            marker_distance_min: size / 2,
            texture_seed_params: TextureParams {
                noise_amplitude: 0.04,
                marker_side: (size / 8).max(2),
                patch_side: (size / 4).max(2),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.texture_seed_params;
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 3 || self.num_classes > 255 {
            return fail(format!(
                "synthetic data needs 3..=255 classes, got {}",
                self.num_classes
            ));
        }
        if t.marker_side < 2 || t.patch_side < 2 {
            return fail("marker and patch sides must be >= 2".into());
        }
        if !(0.0..=0.2).contains(&t.noise_amplitude) {
            return fail(format!("noise amplitude {} outside [0, 0.2]", t.noise_amplitude));
        }
        if 2 * self.marker_distance_min < t.marker_side + t.patch_side + 2 {
            return fail(format!(
                "marker_distance_min {} lets the marker and patch touch",
                self.marker_distance_min
            ));
        }
        // marker center sits at 1 + m/2 from its edges
        if 2 + t.marker_side + 2 * self.marker_distance_min + t.patch_side > 2 * self.size {
            return fail(format!(
                "size {} cannot fit a marker, a patch and a gap of {}",
                self.size, self.marker_distance_min
            ));
        }
        Ok(())
    }
}

/// Axis-aligned box `[r0, r0 + side) × [c0, c0 + side)`.
#[derive(Clone, Copy, Debug)]
struct Square {
    r0: usize,
    c0: usize,
    side: usize,
}

impl Square {
    /// Twice the Chebyshev distance between centers.
    fn center_distance2(&self, other: &Square) -> usize {
        let dr = (2 * self.r0 + self.side).abs_diff(2 * other.r0 + other.side);
        let dc = (2 * self.c0 + self.side).abs_diff(2 * other.c0 + other.side);
        dr.max(dc)
    }

    /// Chebyshev gap between boxes; 0 when they touch or overlap.
    fn gap(&self, other: &Square) -> usize {
        let axis = |a0: usize, a1: usize, b0: usize, b1: usize| {
            if a1 <= b0 {
                b0 - a1
            } else {
                a0.saturating_sub(b1)
            }
        };
        let dr = axis(self.r0, self.r0 + self.side, other.r0, other.r0 + other.side);
        let dc = axis(self.c0, self.c0 + self.side, other.c0, other.c0 + other.side);
        dr.max(dc)
    }

    fn overlaps(&self, other: &Square) -> bool {
        self.r0 < other.r0 + other.side
            && other.r0 < self.r0 + self.side
            && self.c0 < other.c0 + other.side
            && other.c0 < self.c0 + self.side
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        (0..self.side).flat_map(move |dr| (0..self.side).map(move |dc| (self.r0 + dr, self.c0 + dc, dr, dc)))
    }
}

fn random_square(rng: &mut ChaCha8Rng, size: usize, side: usize) -> Square {
    Square {
        r0: rng.random_range(0..=size - side),
        c0: rng.random_range(0..=size - side),
        side,
    }
}

/// Texture intensity at offset `(dr, dc)` inside a region of class `class`.
fn texture(class: u8, checkered_marker: bool, dr: usize, dc: usize) -> f64 {
    match class {
        1 | 2 => {
            if dr % 2 == 0 {
                0.55
            } else {
                0.7
            }
        }
        MARKER_CLASS if checkered_marker => {
            if (dr + dc) % 2 == 0 {
                0.95
            } else {
                0.35
            }
        }
        MARKER_CLASS => 0.95,
        k => {
            let period = usize::from(k) - 2;
            if dc % period < period.div_ceil(2) {
                0.85
            } else {
                0.3
            }
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn generate_one(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, id: String) -> Result<LabeledImage> {
    let s = spec.size;
    let t = &spec.texture_seed_params;
    let mut values = vec![0.2; s * s];
    let mut labels = vec![0u8; s * s];

    let checkered = rng.random_bool(0.5);
    let corner = rng.random_range(0..4usize);
    let far = s - 1 - t.marker_side;
    let marker = Square {
        r0: if corner < 2 { 1 } else { far },
        c0: if corner % 2 == 0 { 1 } else { far },
        side: t.marker_side,
    };
    let patch = (0..PLACEMENT_TRIES)
        .map(|_| random_square(rng, s, t.patch_side))
        .find(|p| p.center_distance2(&marker) >= 2 * spec.marker_distance_min)
        .ok_or_else(|| Error::Config("could not place the patch; relax marker_distance_min".into()))?;
    let patch_class = AMBIGUOUS_CLASSES[usize::from(checkered)];
    let marker_class = if spec.num_classes > usize::from(MARKER_CLASS) {
        MARKER_CLASS
    } else {
        0
    };

    let mut placed = vec![marker, patch];
    let mut regions = vec![(marker, MARKER_CLASS, marker_class), (patch, patch_class, patch_class)];
    for k in 4..spec.num_classes as u8 {
        let side = t.patch_side;
        let spot = (0..PLACEMENT_TRIES)
            .map(|_| random_square(rng, s, side))
            .find(|d| placed.iter().all(|p| !p.overlaps(d) && p.gap(d) >= 1));
        if let Some(d) = spot {
            placed.push(d);
            regions.push((d, k, k));
        }
    }
    for (sq, appearance, label) in regions {
        for (r, c, dr, dc) in sq.cells() {
            values[r * s + c] = texture(appearance, checkered, dr, dc);
            labels[r * s + c] = label;
        }
    }
    for v in &mut values {
        let noise = if t.noise_amplitude > 0.0 {
            rng.random_range(-t.noise_amplitude..=t.noise_amplitude)
        } else {
            0.0
        };
        *v = quantize(*v + noise);
    }
    LabeledImage::new(id, Tensor::new(&[1, s, s], values)?, labels)
}

/// Generates `n` scenes. Image `i` draws from its own stream of the seeded
/// generator, so a dataset of `n` images is a prefix of one of `n + 1`.
pub fn gen_synthetic(n: usize, seed: u64, spec: &SyntheticSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_one(spec, &mut rng, format!("{i:05}"))
        })
        .collect()
}
