use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, BatchNorm, BnCache, BnConfig,
    Conv2d, Geometry, Mode,
};
use super::tensor::{Matrix, Param};
use crate::data::ImageShape;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 reduce, 3×3, 1×1 expand (×4).
    Bottleneck,
}

/// Feature-extractor architecture. Every convolution is followed by batch
/// normalization; features are the global average of the last ReLU output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    /// Plain stack of conv → BN → ReLU blocks.
    SmallCnn {
        channels: Vec<usize>,
        strides: Vec<usize>,
    },
    /// Residual network with a 3×3 stem (CIFAR-style, no max-pool).
    ResNet {
        block: ResidualKind,
        stem_channels: usize,
        stage_channels: Vec<usize>,
        stage_blocks: Vec<usize>,
    },
}

impl BackboneConfig {
    /// Four blocks, 64-dimensional features.
    pub fn small_cnn() -> Self {
        Self::SmallCnn {
            channels: vec![16, 32, 64, 64],
            strides: vec![1, 2, 2, 1],
        }
    }

    pub fn resnet18() -> Self {
        Self::ResNet {
            block: ResidualKind::Basic,
            stem_channels: 64,
            stage_channels: vec![64, 128, 256, 512],
            stage_blocks: vec![2, 2, 2, 2],
        }
    }

    pub fn resnet50() -> Self {
        Self::ResNet {
            block: ResidualKind::Bottleneck,
            stem_channels: 64,
            stage_channels: vec![64, 128, 256, 512],
            stage_blocks: vec![3, 4, 6, 3],
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Self::SmallCnn { channels, .. } => *channels.last().unwrap_or(&0),
            Self::ResNet {
                block,
                stage_channels,
                ..
            } => {
                let last = *stage_channels.last().unwrap_or(&0);
                match block {
                    ResidualKind::Basic => last,
                    ResidualKind::Bottleneck => 4 * last,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            Self::SmallCnn { channels, strides } => {
                if channels.is_empty() {
                    return Err("small_cnn needs at least one block".into());
                }
                if channels.len() != strides.len() {
                    return Err("channels and strides must have equal length".into());
                }
                if channels.contains(&0) || strides.contains(&0) {
                    return Err("channels and strides must be positive".into());
                }
            }
            Self::ResNet {
                stem_channels,
                stage_channels,
                stage_blocks,
                ..
            } => {
                if stage_channels.is_empty() || stage_channels.len() != stage_blocks.len() {
                    return Err("stage_channels and stage_blocks must be non-empty and equal length".into());
                }
                if *stem_channels == 0 || stage_channels.contains(&0) || stage_blocks.contains(&0) {
                    return Err("resnet widths and depths must be positive".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug, Clone)]
struct ConvBnCache<T> {
    input: Matrix<T>,
    cols: Option<Matrix<T>>,
    geometry: Geometry,
    bn: BnCache<T>,
}

impl<T: Scalar> ConvBn<T> {
    fn new<R: Rng>(cin: usize, cout: usize, k: usize, stride: usize, bn: BnConfig, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, k, stride, rng),
            bn: BatchNorm::new(cout, bn),
        }
    }

    fn forward(&mut self, x: Matrix<T>, g: Geometry, mode: Mode) -> (Matrix<T>, Geometry, ConvBnCache<T>) {
        let (pre, og, cols) = self.conv.forward(&x, g);
        let (y, bn) = self.bn.forward(&pre, mode);
        let cache = ConvBnCache {
            input: x,
            cols,
            geometry: g,
            bn,
        };
        (y, og, cache)
    }

    fn infer(&self, x: &Matrix<T>, g: Geometry) -> (Matrix<T>, Geometry) {
        let (pre, og, _) = self.conv.forward(x, g);
        (self.bn.infer(&pre), og)
    }

    fn backward(&mut self, cache: &ConvBnCache<T>, grad_out: &Matrix<T>) -> Matrix<T> {
        let g_pre = self.bn.backward(&cache.bn, grad_out);
        self.conv
            .backward(&cache.input, cache.cols.as_ref(), cache.geometry, &g_pre)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.conv.weight];
        out.extend(self.bn.params_mut());
        out
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.conv.weight];
        out.extend(self.bn.params());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block<T> {
    /// conv → BN → ReLU
    Plain(ConvBn<T>),
    /// ReLU(main(x) + shortcut(x)), ReLU between main units.
    Residual {
        main: Vec<ConvBn<T>>,
        shortcut: Option<ConvBn<T>>,
    },
}

#[derive(Debug, Clone)]
enum BlockCache<T> {
    Plain {
        unit: ConvBnCache<T>,
        out: Matrix<T>,
    },
    Residual {
        main: Vec<(ConvBnCache<T>, Option<Matrix<T>>)>,
        shortcut: Option<ConvBnCache<T>>,
        out: Matrix<T>,
    },
}

fn add<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    Matrix::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    )
}

impl<T: Scalar> Block<T> {
    fn forward(&mut self, x: Matrix<T>, g: Geometry, mode: Mode) -> (Matrix<T>, Geometry, BlockCache<T>) {
        match self {
            Block::Plain(unit) => {
                let (y, og, c) = unit.forward(x, g, mode);
                let out = relu(&y);
                (out.clone(), og, BlockCache::Plain { unit: c, out })
            }
            Block::Residual { main, shortcut } => {
                let skip_in = x.clone();
                let mut h = x;
                let mut hg = g;
                let mut caches = Vec::with_capacity(main.len());
                let last = main.len() - 1;
                for (i, unit) in main.iter_mut().enumerate() {
                    let (y, og, c) = unit.forward(h, hg, mode);
                    hg = og;
                    if i < last {
                        let r = relu(&y);
                        caches.push((c, Some(r.clone())));
                        h = r;
                    } else {
                        caches.push((c, None));
                        h = y;
                    }
                }
                let (skip, sc) = match shortcut {
                    Some(unit) => {
                        let (y, _, c) = unit.forward(skip_in, g, mode);
                        (y, Some(c))
                    }
                    None => (skip_in, None),
                };
                let out = relu(&add(&h, &skip));
                (
                    out.clone(),
                    hg,
                    BlockCache::Residual {
                        main: caches,
                        shortcut: sc,
                        out,
                    },
                )
            }
        }
    }

    fn infer(&self, x: &Matrix<T>, g: Geometry) -> (Matrix<T>, Geometry) {
        match self {
            Block::Plain(unit) => {
                let (y, og) = unit.infer(x, g);
                (relu(&y), og)
            }
            Block::Residual { main, shortcut } => {
                let (h, hg) = Self::infer_main(main, x, g);
                let skip = match shortcut {
                    Some(unit) => unit.infer(x, g).0,
                    None => x.clone(),
                };
                (relu(&add(&h, &skip)), hg)
            }
        }
    }

    fn infer_main(main: &[ConvBn<T>], x: &Matrix<T>, g: Geometry) -> (Matrix<T>, Geometry) {
        let mut h = x.clone();
        let mut hg = g;
        for (i, unit) in main.iter().enumerate() {
            let (y, og) = unit.infer(&h, hg);
            hg = og;
            h = if i + 1 < main.len() { relu(&y) } else { y };
        }
        (h, hg)
    }

    fn backward(&mut self, cache: &BlockCache<T>, grad_out: &Matrix<T>) -> Matrix<T> {
        match (self, cache) {
            (Block::Plain(unit), BlockCache::Plain { unit: c, out }) => {
                let g = relu_backward(out, grad_out);
                unit.backward(c, &g)
            }
            (
                Block::Residual { main, shortcut },
                BlockCache::Residual {
                    main: caches,
                    shortcut: sc,
                    out,
                },
            ) => {
                let g_sum = relu_backward(out, grad_out);
                let mut g = g_sum.clone();
                for (unit, (c, relu_out)) in main.iter_mut().zip(caches).rev() {
                    if let Some(r) = relu_out {
                        g = relu_backward(r, &g);
                    }
                    g = unit.backward(c, &g);
                }
                let g_skip = match (shortcut, sc) {
                    (Some(unit), Some(c)) => unit.backward(c, &g_sum),
                    _ => g_sum,
                };
                add(&g, &g_skip)
            }
            _ => unreachable!("block cache does not match block kind"),
        }
    }

    fn last_unit(&self) -> &ConvBn<T> {
        match self {
            Block::Plain(u) => u,
            Block::Residual { main, .. } => main.last().expect("residual block has units"),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Block::Plain(u) => u.params_mut(),
            Block::Residual { main, shortcut } => main
                .iter_mut()
                .chain(shortcut.iter_mut())
                .flat_map(|u| u.params_mut())
                .collect(),
        }
    }

    fn params(&self) -> Vec<&Param<T>> {
        match self {
            Block::Plain(u) => u.params(),
            Block::Residual { main, shortcut } => main
                .iter()
                .chain(shortcut.iter())
                .flat_map(|u| u.params())
                .collect(),
        }
    }

    fn batch_norms(&self) -> Vec<&BatchNorm<T>> {
        match self {
            Block::Plain(u) => vec![&u.bn],
            Block::Residual { main, shortcut } => {
                main.iter().chain(shortcut.iter()).map(|u| &u.bn).collect()
            }
        }
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        match self {
            Block::Plain(u) => vec![&mut u.bn],
            Block::Residual { main, shortcut } => main
                .iter_mut()
                .chain(shortcut.iter_mut())
                .map(|u| &mut u.bn)
                .collect(),
        }
    }
}

/// Convolutional representation extractor `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<T> {
    pub config: BackboneConfig,
    pub input: ImageShape,
    pub blocks: Vec<Block<T>>,
}

/// Everything `FeatureExtractor::backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ExtractorTape<T> {
    blocks: Vec<BlockCache<T>>,
    final_geometry: Geometry,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new<R: Rng>(config: BackboneConfig, input: ImageShape, bn: BnConfig, rng: &mut R) -> Self {
        let mut blocks = Vec::new();
        match &config {
            BackboneConfig::SmallCnn { channels, strides } => {
                let mut cin = input.channels;
                for (&c, &s) in channels.iter().zip(strides) {
                    blocks.push(Block::Plain(ConvBn::new(cin, c, 3, s, bn, rng)));
                    cin = c;
                }
            }
            BackboneConfig::ResNet {
                block,
                stem_channels,
                stage_channels,
                stage_blocks,
            } => {
                blocks.push(Block::Plain(ConvBn::new(input.channels, *stem_channels, 3, 1, bn, rng)));
                let mut cin = *stem_channels;
                for (stage, (&width, &depth)) in stage_channels.iter().zip(stage_blocks).enumerate() {
                    for i in 0..depth {
                        let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                        let (main, cout) = match block {
                            ResidualKind::Basic => (
                                vec![
                                    ConvBn::new(cin, width, 3, stride, bn, rng),
                                    ConvBn::new(width, width, 3, 1, bn, rng),
                                ],
                                width,
                            ),
                            ResidualKind::Bottleneck => (
                                vec![
                                    ConvBn::new(cin, width, 1, 1, bn, rng),
                                    ConvBn::new(width, width, 3, stride, bn, rng),
                                    ConvBn::new(width, 4 * width, 1, 1, bn, rng),
                                ],
                                4 * width,
                            ),
                        };
                        let shortcut = (stride != 1 || cin != cout)
                            .then(|| ConvBn::new(cin, cout, 1, stride, bn, rng));
                        blocks.push(Block::Residual { main, shortcut });
                        cin = cout;
                    }
                }
            }
        }
        Self {
            config,
            input,
            blocks,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    fn input_matrix(&self, pixels: &[T], n: usize) -> (Matrix<T>, Geometry) {
        let g = Geometry {
            batch: n,
            height: self.input.height,
            width: self.input.width,
        };
        (Matrix::from_vec(g.rows(), self.input.channels, pixels.to_vec()), g)
    }

    /// Features for `n` images; records a tape for `backward`.
    pub fn forward(&mut self, pixels: &[T], n: usize, mode: Mode) -> (Matrix<T>, ExtractorTape<T>) {
        let (mut x, mut g) = self.input_matrix(pixels, n);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (y, og, c) = block.forward(x, g, mode);
            caches.push(c);
            x = y;
            g = og;
        }
        let features = global_avg_pool(&x, g);
        (
            features,
            ExtractorTape {
                blocks: caches,
                final_geometry: g,
            },
        )
    }

    /// Eval-mode features; reads running statistics only.
    pub fn infer(&self, pixels: &[T], n: usize) -> Matrix<T> {
        let (mut x, mut g) = self.input_matrix(pixels, n);
        for block in &self.blocks {
            let (y, og) = block.infer(&x, g);
            x = y;
            g = og;
        }
        global_avg_pool(&x, g)
    }

    /// Eval-mode inputs of the last batch-norm layer (one row per spatial position).
    pub fn last_bn_input(&self, pixels: &[T], n: usize) -> Matrix<T> {
        let (mut x, mut g) = self.input_matrix(pixels, n);
        let last = self.blocks.len() - 1;
        for block in &self.blocks[..last] {
            let (y, og) = block.infer(&x, g);
            x = y;
            g = og;
        }
        let unit = match &self.blocks[last] {
            Block::Plain(u) => {
                return u.conv.forward(&x, g).0;
            }
            Block::Residual { main, .. } => {
                let (h, hg) = Block::infer_main(&main[..main.len() - 1], &x, g);
                let h = if main.len() > 1 { relu(&h) } else { h };
                x = h;
                g = hg;
                main.last().expect("units")
            }
        };
        unit.conv.forward(&x, g).0
    }

    pub fn last_bn(&self) -> &BatchNorm<T> {
        &self.blocks.last().expect("at least one block").last_unit().bn
    }

    pub fn backward(&mut self, tape: &ExtractorTape<T>, grad_features: &Matrix<T>) -> Matrix<T> {
        let mut g = global_avg_pool_backward(grad_features, tape.final_geometry);
        for (block, cache) in self.blocks.iter_mut().zip(&tape.blocks).rev() {
            g = block.backward(cache, &g);
        }
        g
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm<T>> {
        self.blocks.iter().flat_map(|b| b.batch_norms()).collect()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.blocks.iter_mut().flat_map(|b| b.batch_norms_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_pixels(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn tiny_configs() -> Vec<BackboneConfig> {
        vec![
            BackboneConfig::SmallCnn {
                channels: vec![3, 4],
                strides: vec![1, 2],
            },
            BackboneConfig::ResNet {
                block: ResidualKind::Basic,
                stem_channels: 3,
                stage_channels: vec![3, 4],
                stage_blocks: vec![1, 1],
            },
            BackboneConfig::ResNet {
                block: ResidualKind::Bottleneck,
                stem_channels: 2,
                stage_channels: vec![2],
                stage_blocks: vec![1],
            },
        ]
    }

    #[test]
    fn feature_dims() {
        assert_eq!(BackboneConfig::small_cnn().feature_dim(), 64);
        assert_eq!(BackboneConfig::resnet18().feature_dim(), 512);
        assert_eq!(BackboneConfig::resnet50().feature_dim(), 2048);
        assert!(BackboneConfig::SmallCnn {
            channels: vec![4],
            strides: vec![]
        }
        .validate()
        .is_err());
    }

    #[test]
    fn extractor_gradients_match_finite_differences() {
        let shape = ImageShape::new(2, 4, 4);
        for config in tiny_configs() {
            for mode in [Mode::Train, Mode::Eval] {
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let mut ex = FeatureExtractor::<f64>::new(config.clone(), shape, BnConfig::default(), &mut rng);
                // non-trivial running stats for eval mode
                let warm = rand_pixels(3 * shape.numel(), 9);
                ex.forward(&warm, 3, Mode::Train);
                let n = 3;
                let x = rand_pixels(n * shape.numel(), 2);
                let probe = rand_pixels(n * ex.feature_dim(), 3);
                let frozen = ex.clone();
                let loss = |px: &[f64]| -> f64 {
                    let mut m = frozen.clone();
                    let (f, _) = m.forward(px, n, mode);
                    f.data.iter().zip(&probe).map(|(a, b)| a * b).sum()
                };
                let (f, tape) = ex.forward(&x, n, mode);
                let grad = Matrix::from_vec(f.rows, f.cols, probe.clone());
                let gx = ex.backward(&tape, &grad);
                let h = 1e-6;
                for i in (0..x.len()).step_by(5) {
                    let mut xp = x.clone();
                    xp[i] += h;
                    let mut xm = x.clone();
                    xm[i] -= h;
                    let num = (loss(&xp) - loss(&xm)) / (2.0 * h);
                    assert!(
                        (num - gx.data[i]).abs() < 1e-5 * (1.0 + num.abs()),
                        "{config:?} {mode:?} input {i}: {num} vs {}",
                        gx.data[i]
                    );
                }
                // first conv weight
                let w_grad = ex.params()[0].grad.clone();
                for i in (0..w_grad.len()).step_by(3) {
                    let eval = |delta: f64| {
                        let mut m = frozen.clone();
                        m.params_mut()[0].value[i] += delta;
                        let (f, _) = m.forward(&x, n, mode);
                        f.data.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
                    };
                    let num = (eval(h) - eval(-h)) / (2.0 * h);
                    assert!((num - w_grad[i]).abs() < 1e-5 * (1.0 + num.abs()));
                }
            }
        }
    }

    #[test]
    fn infer_matches_eval_forward() {
        let shape = ImageShape::new(3, 8, 8);
        for config in tiny_configs() {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut ex = FeatureExtractor::<f64>::new(config, shape, BnConfig::default(), &mut rng);
            let x = rand_pixels(4 * shape.numel(), 5);
            ex.forward(&x, 4, Mode::Train);
            let a = ex.infer(&x, 4);
            let (b, _) = ex.forward(&x, 4, Mode::Eval);
            assert_eq!(a, b);
            let pre = ex.last_bn_input(&x, 4);
            assert_eq!(pre.cols, ex.last_bn().features);
        }
    }
}
