use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::images::{crop_resize, CropRect, ImageSet, ImageShape, LabeledImages};
use crate::error::{Result, RnaError};
use crate::scalar::Scalar;

/// Auxiliary outliers cut out of ID training images, with crop provenance.
#[derive(Debug, Clone)]
pub struct AugmentedAux<T> {
    pub images: ImageSet<T>,
    /// `(source index into id_train, crop rectangle)` per generated image.
    pub crops: Vec<(usize, CropRect)>,
}

/// Picks integer crop dimensions whose area fraction lies in `range`, close to `target`.
fn crop_dims(shape: ImageShape, target: f64, range: (f64, f64)) -> Option<(usize, usize)> {
    let (h, w) = (shape.height, shape.width);
    let total = (h * w) as f64;
    let ideal_h = (target.sqrt() * h as f64).round() as usize;
    let mut best: Option<(usize, usize, f64)> = None;
    // search heights near the square-ish ideal, then the best width for each
    for ch in 1..=h {
        let cw = ((target * total) / ch as f64).round().clamp(1.0, w as f64) as usize;
        for cw in [cw.saturating_sub(1).max(1), cw, (cw + 1).min(w)] {
            let frac = (ch * cw) as f64 / total;
            if frac < range.0 - 1e-12 || frac > range.1 + 1e-12 {
                continue;
            }
            let aspect_penalty = (ch as f64 - ideal_h as f64).abs() / h as f64;
            let err = (frac - target).abs() + 1e-3 * aspect_penalty;
            if best.is_none_or(|(_, _, e)| err < e) {
                best = Some((ch, cw, err));
            }
        }
    }
    best.map(|(a, b, _)| (a, b))
}

/// Builds `size` unlabeled outliers: each is a random crop of a random
/// training image covering an area fraction drawn uniformly from
/// `crop_fraction_range`, resized back to the input resolution.
pub fn build_augmented_aux<T: Scalar>(
    id_train: &LabeledImages<T>,
    crop_fraction_range: (f64, f64),
    size: usize,
    seed: u64,
) -> Result<AugmentedAux<T>> {
    let (lo, hi) = crop_fraction_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(RnaError::InvalidArgument(format!(
            "crop fraction range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
        )));
    }
    let shape = id_train.shape();
    if id_train.is_empty() {
        return Err(RnaError::Empty("id_train for augmented auxiliary set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = ImageSet::empty(shape);
    let mut crops = Vec::with_capacity(size);
    for _ in 0..size {
        let src = rng.random_range(0..id_train.len());
        let target = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let (ch, cw) = crop_dims(shape, target, (lo, hi)).ok_or_else(|| {
            RnaError::InvalidArgument(format!(
                "no integer crop of a {}x{} image has area fraction in [{lo}, {hi}]",
                shape.height, shape.width
            ))
        })?;
        let rect = CropRect {
            top: rng.random_range(0..=shape.height - ch),
            left: rng.random_range(0..=shape.width - cw),
            height: ch,
            width: cw,
        };
        images.push(&crop_resize(id_train.images.image(src), shape, rect, shape));
        crops.push((src, rect));
    }
    Ok(AugmentedAux { images, crops })
}
