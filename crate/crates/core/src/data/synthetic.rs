//! Procedural image families for desk-scale experiments.
//!
//! ID classes are colored sinusoidal gratings with class-specific orientation,
//! frequency and color; per-sample phase, amplitude and pixel noise vary.
//! Outlier families are disjoint from the gratings and from each other, so an
//! auxiliary family never leaks into a held-out test family.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use super::images::{ImageSet, ImageShape, LabeledImages};
use super::longtail::{make_long_tail_counts, ImbalanceProfile, LongTailSpec};
use super::DatasetBundle;
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierFamily {
    /// Blurred Gaussian noise.
    SmoothNoise,
    /// Sum of a few random-color Gaussian bumps.
    Blobs,
    /// Two-color checkerboards with random cell size.
    Checkerboard,
    /// Independent per-pixel noise.
    WhiteNoise,
    /// Left/right or top/bottom two-tone split images.
    Halves,
    /// Radial rings around a random center. Periodic like the ID gratings, so near-OOD.
    Rings,
    /// Linear two-color ramps in a random direction.
    Ramps,
    /// A few bright impulses on a dark background.
    Dots,
}

impl OutlierFamily {
    pub fn name(&self) -> &'static str {
        match self {
            Self::SmoothNoise => "smooth_noise",
            Self::Blobs => "blobs",
            Self::Checkerboard => "checkerboard",
            Self::WhiteNoise => "white_noise",
            Self::Halves => "halves",
            Self::Rings => "rings",
            Self::Ramps => "ramps",
            Self::Dots => "dots",
        }
    }

    pub fn all() -> [OutlierFamily; 8] {
        [
            Self::SmoothNoise,
            Self::Blobs,
            Self::Checkerboard,
            Self::WhiteNoise,
            Self::Halves,
            Self::Rings,
            Self::Ramps,
            Self::Dots,
        ]
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::all().into_iter().find(|f| f.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GratingClasses {
    pub num_classes: usize,
    pub shape: ImageShape,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct ClassParams {
    angle: f64,
    freq: f64,
    color: [f64; 3],
}

impl GratingClasses {
    fn class_params(&self) -> Vec<ClassParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9);
        (0..self.num_classes)
            .map(|c| {
                let angle = PI * c as f64 / self.num_classes as f64;
                let freq = if c % 2 == 0 { 1.0 } else { 2.0 };
                let mut color = [0.0; 3];
                for v in color.iter_mut() {
                    *v = rng.random_range(0.3..1.0);
                }
                ClassParams { angle, freq, color }
            })
            .collect()
    }

    fn render<R: Rng>(&self, p: &ClassParams, rng: &mut R, out: &mut Vec<f64>) {
        let s = self.shape;
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.7..1.3);
        let (sin, cos) = p.angle.sin_cos();
        for y in 0..s.height {
            for x in 0..s.width {
                let u = x as f64 / s.width as f64;
                let v = y as f64 / s.height as f64;
                let wave = (2.0 * PI * p.freq * (u * cos + v * sin) + phase).cos();
                for ch in 0..s.channels {
                    let n: f64 = StandardNormal.sample(rng);
                    out.push(amp * p.color[ch % 3] * wave + self.noise * n);
                }
            }
        }
    }

    /// `per_class[c]` samples of each class, drawn with `seed`.
    pub fn sample<T: Scalar>(&self, per_class: &[usize], seed: u64) -> LabeledImages<T> {
        assert_eq!(per_class.len(), self.num_classes);
        let params = self.class_params();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = LabeledImages::empty(self.shape);
        let mut buf = Vec::with_capacity(self.shape.numel());
        for (c, &n) in per_class.iter().enumerate() {
            for _ in 0..n {
                buf.clear();
                self.render(&params[c], &mut rng, &mut buf);
                let img: Vec<T> = buf.iter().map(|&v| T::from_f64_lossy(v)).collect();
                set.push(&img, c);
            }
        }
        set
    }
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn render_outlier<R: Rng>(family: OutlierFamily, shape: ImageShape, rng: &mut R) -> Vec<f64> {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let mut img = vec![0.0; shape.numel()];
    let at = |y: usize, x: usize, ch: usize| (y * w + x) * c + ch;
    match family {
        OutlierFamily::WhiteNoise => {
            let scale = rng.random_range(0.5..1.2);
            for v in img.iter_mut() {
                *v = scale * gauss(rng);
            }
        }
        OutlierFamily::SmoothNoise => {
            let raw: Vec<f64> = (0..img.len()).map(|_| gauss(rng)).collect();
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        let mut n = 0.0;
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                    acc += raw[at(yy as usize, xx as usize, ch)];
                                    n += 1.0;
                                }
                            }
                        }
                        img[at(y, x, ch)] = 1.5 * acc / n;
                    }
                }
            }
        }
        OutlierFamily::Blobs => {
            for _ in 0..rng.random_range(1..=3) {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let r = rng.random_range(0.8..2.5) * h as f64 / 8.0;
                let color: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let g = (-d2 / (2.0 * r * r)).exp();
                        for ch in 0..c {
                            img[at(y, x, ch)] += color[ch] * g;
                        }
                    }
                }
            }
        }
        OutlierFamily::Checkerboard => {
            let cell = rng.random_range(1..=(h / 2).max(1));
            let a: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            for y in 0..h {
                for x in 0..w {
                    let odd = ((y / cell) + (x / cell)) % 2 == 1;
                    for ch in 0..c {
                        img[at(y, x, ch)] = if odd { a[ch] } else { b[ch] };
                    }
                }
            }
        }
        OutlierFamily::Halves => {
            let vertical = rng.random_bool(0.5);
            let a: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            for y in 0..h {
                for x in 0..w {
                    let first = if vertical { x < w / 2 } else { y < h / 2 };
                    for ch in 0..c {
                        img[at(y, x, ch)] = if first { a[ch] } else { b[ch] };
                    }
                }
            }
        }
        OutlierFamily::Rings => {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let period = rng.random_range(1.5..4.0);
            let color: Vec<f64> = (0..c).map(|_| rng.random_range(0.3..1.0)).collect();
            for y in 0..h {
                for x in 0..w {
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    let wave = (2.0 * PI * d / period).cos();
                    for ch in 0..c {
                        img[at(y, x, ch)] = color[ch] * wave;
                    }
                }
            }
        }
        OutlierFamily::Ramps => {
            let theta = rng.random_range(0.0..2.0 * PI);
            let (sin, cos) = theta.sin_cos();
            let a: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f64 + 0.5) / w as f64 - 0.5;
                    let v = (y as f64 + 0.5) / h as f64 - 0.5;
                    let t = (u * cos + v * sin + 0.71) / 1.42;
                    for ch in 0..c {
                        img[at(y, x, ch)] = a[ch] + (b[ch] - a[ch]) * t;
                    }
                }
            }
        }
        OutlierFamily::Dots => {
            img.iter_mut().for_each(|v| *v = -0.5);
            for _ in 0..rng.random_range(1..=4) {
                let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
                let level = rng.random_range(1.0..2.0);
                for ch in 0..c {
                    img[at(y, x, ch)] = level;
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v += 0.1 * gauss(rng);
    }
    img
}

/// `size` outliers drawn round-robin from `families`.
pub fn outlier_set<T: Scalar>(
    families: &[OutlierFamily],
    shape: ImageShape,
    size: usize,
    seed: u64,
) -> ImageSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ImageSet::empty(shape);
    if families.is_empty() {
        return set;
    }
    for i in 0..size {
        let img = render_outlier(families[i % families.len()], shape, &mut rng);
        let img: Vec<T> = img.into_iter().map(T::from_f64_lossy).collect();
        set.push(&img);
    }
    set
}

/// A complete long-tailed grating experiment with disjoint auxiliary and test outliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub num_classes: usize,
    pub shape: ImageShape,
    pub max_count: usize,
    pub imbalance_ratio: f64,
    pub test_per_class: usize,
    pub noise: f64,
    pub aux_families: Vec<OutlierFamily>,
    pub aux_size: usize,
    /// Each family becomes one named OOD test set.
    pub test_families: Vec<OutlierFamily>,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            shape: ImageShape::new(3, 8, 8),
            max_count: 500,
            imbalance_ratio: 100.0,
            test_per_class: 50,
            noise: 0.3,
            aux_families: vec![
                OutlierFamily::SmoothNoise,
                OutlierFamily::Blobs,
                OutlierFamily::Checkerboard,
                OutlierFamily::Rings,
            ],
            aux_size: 2000,
            test_families: vec![
                OutlierFamily::WhiteNoise,
                OutlierFamily::Halves,
                OutlierFamily::Ramps,
                OutlierFamily::Dots,
            ],
            test_size: 300,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn long_tail(&self) -> LongTailSpec {
        LongTailSpec {
            num_classes: self.num_classes,
            max_count: self.max_count,
            imbalance_ratio: self.imbalance_ratio,
            profile: ImbalanceProfile::Exponential,
            seed: self.seed,
        }
    }

    pub fn classes(&self) -> GratingClasses {
        GratingClasses {
            num_classes: self.num_classes,
            shape: self.shape,
            noise: self.noise,
            seed: self.seed,
        }
    }

    pub fn build<T: Scalar>(&self) -> Result<DatasetBundle<T>> {
        let counts = make_long_tail_counts(&self.long_tail())?;
        let classes = self.classes();
        let id_train = classes.sample(&counts, self.seed.wrapping_add(1));
        let id_test = classes.sample(&vec![self.test_per_class; self.num_classes], self.seed.wrapping_add(2));
        let aux = outlier_set(&self.aux_families, self.shape, self.aux_size, self.seed.wrapping_add(3));
        let mut tests = BTreeMap::new();
        for (i, f) in self.test_families.iter().enumerate() {
            let set = outlier_set(&[*f], self.shape, self.test_size, self.seed.wrapping_add(10 + i as u64));
            tests.insert(f.name().to_string(), set);
        }
        DatasetBundle::new(self.num_classes, id_train, id_test, aux, tests)
    }
}
