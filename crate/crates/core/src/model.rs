//! Extractor + projection head + linear classifier, with mixed ID/OOD forward passes.
//!
//! In a mixed batch the ID rows come first and the OOD rows follow; all rows
//! go through the network together, so every batch-norm layer sees (and, in
//! train mode, records) statistics of the union. Losses decide which rows
//! receive gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageShape, TrainingBatch};
use crate::error::{Result, RnaError};
use crate::nn::{
    relu, relu_backward, BackboneConfig, BatchNorm, BnConfig, ExtractorTape, FeatureExtractor,
    Linear, Matrix, Mode, Param,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: ImageShape,
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    /// Hidden width of the projection head; defaults to the feature dimension.
    #[serde(default)]
    pub head_hidden: Option<usize>,
    /// Output width of the projection head; defaults to the feature dimension.
    #[serde(default)]
    pub projection_dim: Option<usize>,
    #[serde(default)]
    pub classifier_bias: bool,
    #[serde(default)]
    pub bn: BnConfig,
}

impl ModelConfig {
    pub fn small(input: ImageShape, num_classes: usize) -> Self {
        Self {
            input,
            num_classes,
            backbone: BackboneConfig::small_cnn(),
            head_hidden: None,
            projection_dim: None,
            classifier_bias: false,
            bn: BnConfig::default(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn head_hidden(&self) -> usize {
        self.head_hidden.unwrap_or_else(|| self.feature_dim())
    }

    pub fn projection_dim(&self) -> usize {
        self.projection_dim.unwrap_or_else(|| self.feature_dim())
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.backbone.validate()?;
        if self.num_classes < 2 {
            return Err("num_classes must be at least 2".into());
        }
        if self.input.numel() == 0 {
            return Err("input shape has a zero dimension".into());
        }
        if self.head_hidden() == 0 || self.projection_dim() == 0 {
            return Err("projection head widths must be positive".into());
        }
        if !(self.bn.momentum > 0.0 && self.bn.momentum < 1.0) {
            return Err("bn.momentum must lie in (0, 1)".into());
        }
        if !(self.bn.eps > 0.0) {
            return Err("bn.eps must be positive".into());
        }
        Ok(())
    }
}

/// Two-layer perceptron `D → hidden → P` with ReLU between the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    pub first: Linear<T>,
    pub second: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutputs<T> {
    /// Pooled representation `f(x)`, after the last ReLU.
    pub features: Matrix<T>,
    /// Projection head output `h(f(x))`.
    pub projected: Matrix<T>,
    pub logits: Matrix<T>,
    /// `true` for ID rows; ID rows form a prefix.
    pub id_mask: Vec<bool>,
}

impl<T: Scalar> ForwardOutputs<T> {
    pub fn b_id(&self) -> usize {
        self.id_mask.iter().filter(|&&m| m).count()
    }

    pub fn id_features(&self) -> Matrix<T> {
        self.features.slice_rows(0, self.b_id())
    }

    pub fn ood_features(&self) -> Matrix<T> {
        self.features.slice_rows(self.b_id(), self.features.rows)
    }
}

/// Cached intermediates for a backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    extractor: ExtractorTape<T>,
    features: Matrix<T>,
    head_hidden: Matrix<T>,
}

/// Loss gradients with respect to the model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads<T> {
    pub logits: Matrix<T>,
    pub projected: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub extractor: FeatureExtractor<T>,
    pub head: ProjectionHead<T>,
    pub classifier: Linear<T>,
    prior: Vec<f64>,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(config: ModelConfig, prior: Vec<f64>, seed: u64) -> Result<Self> {
        config.validate().map_err(RnaError::InvalidArgument)?;
        check_prior(&prior, config.num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = FeatureExtractor::new(config.backbone.clone(), config.input, config.bn, &mut rng);
        let d = config.feature_dim();
        let head = ProjectionHead {
            first: Linear::new(d, config.head_hidden(), true, &mut rng),
            second: Linear::new(config.head_hidden(), config.projection_dim(), true, &mut rng),
        };
        let classifier = Linear::new(d, config.num_classes, config.classifier_bias, &mut rng);
        Ok(Self {
            config,
            extractor,
            head,
            classifier,
            prior,
        })
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn set_prior(&mut self, prior: Vec<f64>) -> Result<()> {
        check_prior(&prior, self.config.num_classes)?;
        self.prior = prior;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn check_inputs(&self, pixels: &[T], n: usize) -> Result<()> {
        let want = n * self.config.input.numel();
        if pixels.len() != want {
            return Err(RnaError::Shape(format!(
                "expected {n} images of {:?} ({want} values), got {}",
                self.config.input,
                pixels.len()
            )));
        }
        Ok(())
    }

    fn heads(&self, features: &Matrix<T>) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
        let hidden = relu(&self.head.first.forward(features));
        let projected = self.head.second.forward(&hidden);
        let logits = self.classifier.forward(features);
        (hidden, projected, logits)
    }

    /// Forward pass over `n` images of which the first `n_id` are ID rows.
    pub fn forward_rows(&mut self, pixels: &[T], n: usize, n_id: usize, mode: Mode) -> Result<(ForwardOutputs<T>, Tape<T>)> {
        self.check_inputs(pixels, n)?;
        if mode == Mode::Train && n < 2 {
            return Err(RnaError::InvalidArgument(
                "train-mode batch norm needs at least two rows".into(),
            ));
        }
        let (features, extractor) = self.extractor.forward(pixels, n, mode);
        let (hidden, projected, logits) = self.heads(&features);
        let outputs = ForwardOutputs {
            features: features.clone(),
            projected,
            logits,
            id_mask: (0..n).map(|i| i < n_id).collect(),
        };
        let tape = Tape {
            extractor,
            features,
            head_hidden: hidden,
        };
        Ok((outputs, tape))
    }

    /// ID and OOD rows as one concatenated batch.
    pub fn forward_mixed(&mut self, batch: &TrainingBatch<T>, mode: Mode) -> Result<(ForwardOutputs<T>, Tape<T>)> {
        if batch.shape != self.config.input {
            return Err(RnaError::Shape(format!(
                "batch images are {:?}, model expects {:?}",
                batch.shape, self.config.input
            )));
        }
        let mut pixels = Vec::with_capacity(batch.id_inputs.len() + batch.ood_inputs.len());
        pixels.extend_from_slice(&batch.id_inputs);
        pixels.extend_from_slice(&batch.ood_inputs);
        self.forward_rows(&pixels, batch.b_id() + batch.b_ood(), batch.b_id(), mode)
    }

    /// Eval-mode forward pass. Reads running statistics, mutates nothing.
    pub fn forward_eval(&self, pixels: &[T], n: usize) -> Result<ForwardOutputs<T>> {
        self.check_inputs(pixels, n)?;
        let features = self.extractor.infer(pixels, n);
        let (_, projected, logits) = self.heads(&features);
        Ok(ForwardOutputs {
            features,
            projected,
            logits,
            id_mask: vec![true; n],
        })
    }

    /// Eval-mode forward in chunks of `chunk` images.
    pub fn forward_eval_chunked(&self, pixels: &[T], n: usize, chunk: usize) -> Result<ForwardOutputs<T>> {
        self.check_inputs(pixels, n)?;
        let numel = self.config.input.numel();
        let chunk = chunk.max(1);
        let d = self.config.feature_dim();
        let mut out = ForwardOutputs {
            features: Matrix::zeros(0, d),
            projected: Matrix::zeros(0, self.config.projection_dim()),
            logits: Matrix::zeros(0, self.config.num_classes),
            id_mask: Vec::with_capacity(n),
        };
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let part = self.forward_eval(&pixels[start * numel..end * numel], end - start)?;
            for (dst, src) in [
                (&mut out.features, part.features),
                (&mut out.projected, part.projected),
                (&mut out.logits, part.logits),
            ] {
                dst.rows += src.rows;
                dst.data.extend(src.data);
            }
            out.id_mask.extend(part.id_mask);
            start = end;
        }
        Ok(out)
    }

    /// Arg-max class per image, without any prior adjustment.
    pub fn predict(&self, pixels: &[T], n: usize) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward_eval(pixels, n)?.logits))
    }

    /// Accumulates parameter gradients from output gradients.
    pub fn backward(&mut self, tape: &Tape<T>, grads: &OutputGrads<T>) {
        let mut g_features = self.classifier.backward(&tape.features, &grads.logits);
        let g_hidden = self.head.second.backward(&tape.head_hidden, &grads.projected);
        let g_hidden = relu_backward(&tape.head_hidden, &g_hidden);
        let g_from_head = self.head.first.backward(&tape.features, &g_hidden);
        for (a, b) in g_features.data.iter_mut().zip(&g_from_head.data) {
            *a += *b;
        }
        self.extractor.backward(&tape.extractor, &g_features);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.extractor.params_mut();
        out.extend(self.head.first.params_mut());
        out.extend(self.head.second.params_mut());
        out.extend(self.classifier.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.extractor.params();
        out.extend(self.head.first.params());
        out.extend(self.head.second.params());
        out.extend(self.classifier.params());
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Copy of every parameter gradient, in parameter order.
    pub fn gradients(&self) -> Vec<Vec<T>> {
        self.params().iter().map(|p| p.grad.clone()).collect()
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm<T>> {
        self.extractor.batch_norms()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.extractor.batch_norms_mut()
    }

    /// All running means and variances, flattened.
    pub fn running_stats(&self) -> Vec<T> {
        self.batch_norms()
            .iter()
            .flat_map(|bn| bn.running_mean.iter().chain(&bn.running_var).copied())
            .collect()
    }
}

fn check_prior(prior: &[f64], num_classes: usize) -> Result<()> {
    if prior.len() != num_classes {
        return Err(RnaError::InvalidPrior(format!(
            "prior has {} entries for {num_classes} classes",
            prior.len()
        )));
    }
    if prior.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(RnaError::InvalidPrior("every class probability must be positive".into()));
    }
    let sum: f64 = prior.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(RnaError::InvalidPrior(format!("prior sums to {sum}")));
    }
    Ok(())
}

/// Row-wise arg-max; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Matrix<T>) -> Vec<usize> {
    logits
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Fraction of strictly positive feature coordinates, averaged over rows.
pub fn activation_ratio<T: Scalar>(features: &Matrix<T>) -> Result<f64> {
    if features.rows == 0 || features.cols == 0 {
        return Err(RnaError::Empty("features for activation ratio"));
    }
    let active = features.data.iter().filter(|&&v| v > T::zero()).count();
    Ok(active as f64 / features.data.len() as f64)
}
