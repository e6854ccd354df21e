//! Image ingestion, bicubic degradation, aligned patch sampling and
//! augmentation.

pub mod io;
pub mod manifest;
pub mod pair;
pub mod resize;
pub mod synthetic;

pub use io::{load_image, load_image_with_note, save_png, Coercion, Raster8};
pub use manifest::{DatasetManifest, ManifestEntry, StoredPair};
pub use pair::{augment, crop_pair, make_pair, patch_offsets, sample_patch, Augmentation, SrPair};
pub use resize::{bicubic_resize, bilinear_resize};
pub use synthetic::{synthetic_scene, write_synthetic_split};

use rand::Rng;

use crate::error::Result;

/// Where a training sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleInfo {
    pub image: usize,
    pub top: usize,
    pub left: usize,
    pub augmentation: Augmentation,
}

impl StoredPair {
    /// Random aligned `patch_lr` crop followed by a random augmentation,
    /// decoded to reals. Draws offsets first, then the augmentation.
    pub fn sample<R: Rng>(&self, patch_lr: usize, rng: &mut R) -> Result<SrPair> {
        Ok(self.sample_with_origin(patch_lr, rng)?.0)
    }

    /// [`StoredPair::sample`] that also returns the LR offset and the
    /// augmentation applied.
    pub fn sample_with_origin<R: Rng>(
        &self,
        patch_lr: usize,
        rng: &mut R,
    ) -> Result<(SrPair, (usize, usize), Augmentation)> {
        let (top, left) = patch_offsets(self.lr.height, self.lr.width, patch_lr, rng)?;
        let s = self.scale;
        let pair = SrPair {
            lr: self.lr.crop(top, left, patch_lr, patch_lr),
            hr: self.hr.crop(top * s, left * s, patch_lr * s, patch_lr * s),
            scale: s,
        };
        let aug = Augmentation::draw(rng);
        Ok((aug.apply_pair(&pair), (top, left), aug))
    }

    pub fn to_pair(&self) -> SrPair {
        SrPair {
            hr: self.hr.to_image(),
            lr: self.lr.to_image(),
            scale: self.scale,
        }
    }
}
