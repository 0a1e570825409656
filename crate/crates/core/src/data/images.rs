use serde::{Deserialize, Serialize};

use crate::error::{Result, RnaError};
use crate::scalar::Scalar;

/// Resolution of every image in a set. Pixels are stored height-major,
/// channel-last (`[y][x][c]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// A set of unlabeled images of one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet<T> {
    shape: ImageShape,
    pixels: Vec<T>,
}

impl<T: Scalar> ImageSet<T> {
    pub fn new(shape: ImageShape, pixels: Vec<T>) -> Result<Self> {
        let numel = shape.numel();
        if numel == 0 {
            return Err(RnaError::Shape("image shape has a zero dimension".into()));
        }
        if pixels.len() % numel != 0 {
            return Err(RnaError::Shape(format!(
                "{} pixels is not a multiple of image size {numel}",
                pixels.len()
            )));
        }
        Ok(Self { shape, pixels })
    }

    pub fn empty(shape: ImageShape) -> Self {
        Self {
            shape,
            pixels: Vec::new(),
        }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.shape.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, index: usize) -> &[T] {
        let n = self.shape.numel();
        &self.pixels[index * n..(index + 1) * n]
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn push(&mut self, image: &[T]) {
        assert_eq!(image.len(), self.shape.numel(), "image size mismatch");
        self.pixels.extend_from_slice(image);
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.shape);
        out.pixels.reserve(indices.len() * self.shape.numel());
        for &i in indices {
            out.push(self.image(i));
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.pixels.chunks_exact(self.shape.numel())
    }

    pub fn cast<U: Scalar>(&self) -> ImageSet<U> {
        ImageSet {
            shape: self.shape,
            pixels: self
                .pixels
                .iter()
                .map(|&p| U::from_f64_lossy(p.as_f64()))
                .collect(),
        }
    }
}

/// Images with a class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages<T> {
    pub images: ImageSet<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> LabeledImages<T> {
    pub fn new(images: ImageSet<T>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(RnaError::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn empty(shape: ImageShape) -> Self {
        Self {
            images: ImageSet::empty(shape),
            labels: Vec::new(),
        }
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

    pub fn shape(&self) -> ImageShape {
        self.images.shape()
    }

    pub fn push(&mut self, image: &[T], label: usize) {
        self.images.push(image);
        self.labels.push(label);
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.subset(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Per-class sample counts over `num_classes` classes.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Indices of each class, in storage order.
    pub fn class_indices(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> LabeledImages<U> {
        LabeledImages {
            images: self.images.cast(),
            labels: self.labels.clone(),
        }
    }
}

/// Axis-aligned crop rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropRect {
    pub fn area_fraction(&self, shape: ImageShape) -> f64 {
        (self.height * self.width) as f64 / (shape.height * shape.width) as f64
    }
}

/// Crops `rect` out of `image` and bilinearly resizes it to `out`.
/// Same-size resampling reproduces the crop exactly.
pub fn crop_resize<T: Scalar>(
    image: &[T],
    shape: ImageShape,
    rect: CropRect,
    out: ImageShape,
) -> Vec<T> {
    assert_eq!(shape.channels, out.channels, "channel count must match");
    assert!(rect.top + rect.height <= shape.height && rect.left + rect.width <= shape.width);
    let c = shape.channels;
    let sy = rect.height as f64 / out.height as f64;
    let sx = rect.width as f64 / out.width as f64;
    let pixel = |y: usize, x: usize, ch: usize| -> f64 {
        image[((rect.top + y) * shape.width + rect.left + x) * c + ch].as_f64()
    };
    let mut result = Vec::with_capacity(out.numel());
    for oy in 0..out.height {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (rect.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(rect.height - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out.width {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (rect.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(rect.width - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let v = if wy == 0.0 && wx == 0.0 {
                    pixel(y0, x0, ch)
                } else {
                    let top = pixel(y0, x0, ch) * (1.0 - wx) + pixel(y0, x1, ch) * wx;
                    let bottom = pixel(y1, x0, ch) * (1.0 - wx) + pixel(y1, x1, ch) * wx;
                    top * (1.0 - wy) + bottom * wy
                };
                result.push(T::from_f64_lossy(v));
            }
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_crop_same_size_is_identity() {
        let shape = ImageShape::new(3, 5, 4);
        let img: Vec<f32> = (0..shape.numel()).map(|i| i as f32 * 0.25 - 3.0).collect();
        let rect = CropRect {
            top: 0,
            left: 0,
            height: 5,
            width: 4,
        };
        assert_eq!(crop_resize(&img, shape, rect, shape), img);
    }

    #[test]
    fn upscaling_a_constant_crop_stays_constant() {
        let shape = ImageShape::new(1, 6, 6);
        let mut img = vec![0.0f64; 36];
        for y in 2..4 {
            for x in 2..4 {
                img[y * 6 + x] = 7.0;
            }
        }
        let rect = CropRect {
            top: 2,
            left: 2,
            height: 2,
            width: 2,
        };
        let out = crop_resize(&img, shape, rect, shape);
        assert!(out.iter().all(|&v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn labeled_subset_keeps_labels_aligned() {
        let shape = ImageShape::new(1, 1, 2);
        let set = ImageSet::new(shape, vec![0.0f32, 0.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        let labeled = LabeledImages::new(set, vec![5, 6, 7]).unwrap();
        let sub = labeled.subset(&[2, 0]);
        assert_eq!(sub.labels(), &[7, 5]);
        assert_eq!(sub.images.image(0), &[2.0, 2.0]);
    }

    #[test]
    fn mismatched_pixel_count_is_rejected() {
        let shape = ImageShape::new(1, 2, 2);
        assert!(ImageSet::new(shape, vec![0.0f32; 5]).is_err());
    }
}
