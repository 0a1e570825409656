//! Mixed-batch training loop, fine-tuning and diagnostic probes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{assign_class_groups, BatchStream, ClassGroups, DatasetBundle, ImageSet, TrainingBatch};
use crate::error::{Result, RnaError};
use crate::losses::{analytic_classifier_grad, total_loss, LossBreakdown, LossConfig, OodTerm};
use crate::model::{activation_ratio, ModelBundle};
use crate::nn::{Matrix, Mode};
use crate::optim::{OptimConfig, Optimizer, OptimizerState};
use crate::scalar::Scalar;

fn default_batch() -> usize {
    128
}
fn default_probe() -> usize {
    256
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "default_batch")]
    pub batch_id: usize,
    #[serde(default = "default_batch")]
    pub batch_ood: usize,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default)]
    pub ood_seed: u64,
    /// Samples per split used by the per-epoch probes; 0 disables them.
    #[serde(default = "default_probe")]
    pub probe_size: usize,
    #[serde(default = "default_true")]
    pub record_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            batch_id: default_batch(),
            batch_ood: default_batch(),
            shuffle_seed: 0,
            ood_seed: 1,
            probe_size: default_probe(),
            record_steps: true,
        }
    }
}

impl TrainConfig {
    /// Checks the configuration against the data it will run on.
    pub fn check<T: Scalar>(&self, data: &DatasetBundle<T>) -> Result<()> {
        self.loss.validate().map_err(RnaError::InvalidArgument)?;
        self.optim.validate().map_err(RnaError::InvalidArgument)?;
        if self.batch_id == 0 {
            return Err(RnaError::InvalidArgument("batch_id must be positive".into()));
        }
        if self.loss.ood_term.consumes_ood() && (self.batch_ood == 0 || data.aux_ood.is_empty()) {
            return Err(RnaError::MissingOodRows);
        }
        if self.batch_ood > 0 && data.aux_ood.is_empty() {
            return Err(RnaError::MissingOodRows);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Per-epoch measurements on fixed probe subsets, in eval mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EpochProbe {
    pub id_train_head_norm: Option<f64>,
    pub id_train_tail_norm: Option<f64>,
    pub id_test_norm: Option<f64>,
    pub ood_train_norm: Option<f64>,
    pub ood_test_norm: Option<f64>,
    pub id_activation_ratio: Option<f64>,
    pub ood_activation_ratio: Option<f64>,
    /// Mean over coordinates of the last batch norm's running mean.
    pub last_bn_running_mean: f64,
    pub bn_gap_ratio: Option<f64>,
    /// Per-class `log(‖∇_{w_c} L_ID‖₁ / ‖∇_{w_c} L_OOD‖₁)`.
    pub grad_log_ratio: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_components: BTreeMap<String, f64>,
    pub probe: Option<EpochProbe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DiagnosticsSeries {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl DiagnosticsSeries {
    /// Final-epoch loss value, if any epoch ran.
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    /// Epoch-mean ID test norms, in epoch order.
    pub fn id_norm_curve(&self) -> Vec<f64> {
        self.epochs
            .iter()
            .filter_map(|e| e.probe.as_ref().and_then(|p| p.id_test_norm))
            .collect()
    }
}

/// Owns the optimizer and the schedule position, so training can stop after
/// any epoch and resume later.
pub struct Trainer<'a, T> {
    data: &'a DatasetBundle<T>,
    config: TrainConfig,
    optimizer: Optimizer,
    next_epoch: usize,
    groups: Option<ClassGroups>,
    pub series: DiagnosticsSeries,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(data: &'a DatasetBundle<T>, config: TrainConfig) -> Result<Self> {
        config.check(data)?;
        let optimizer = Optimizer::new(config.optim.clone());
        Ok(Self {
            data,
            groups: assign_class_groups(&data.train_counts()).ok(),
            config,
            optimizer,
            next_epoch: 0,
            series: DiagnosticsSeries::default(),
        })
    }

    /// Continues from a saved optimizer state after `completed` epochs.
    pub fn resume(
        data: &'a DatasetBundle<T>,
        config: TrainConfig,
        state: OptimizerState,
        series: DiagnosticsSeries,
        completed: usize,
    ) -> Result<Self> {
        let mut t = Self::new(data, config)?;
        t.optimizer = Optimizer::with_state(t.config.optim.clone(), state);
        t.series = series;
        t.next_epoch = completed;
        Ok(t)
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn is_done(&self) -> bool {
        self.next_epoch >= self.config.optim.epochs
    }

    pub fn optimizer_state(&self) -> &OptimizerState {
        self.optimizer.state()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn check_model(&self, model: &ModelBundle<T>) -> Result<()> {
        if model.config.input != self.data.shape() || model.num_classes() != self.data.num_classes {
            return Err(RnaError::CheckpointMismatch(format!(
                "model expects {:?} images and {} classes; data has {:?} and {}",
                model.config.input,
                model.num_classes(),
                self.data.shape(),
                self.data.num_classes
            )));
        }
        Ok(())
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(&mut self, model: &mut ModelBundle<T>) -> Result<&EpochRecord> {
        self.check_model(model)?;
        let epoch = self.next_epoch;
        let cfg = &self.config;
        let ood = (cfg.batch_ood > 0).then_some(&self.data.aux_ood);
        let stream = BatchStream::new(
            &self.data.id_train,
            ood,
            cfg.batch_id,
            cfg.batch_ood,
            cfg.shuffle_seed,
            cfg.ood_seed,
        )?;
        let lr = cfg.optim.lr_at(epoch);
        let batches = stream.epoch(epoch)?;
        let mut total = 0.0;
        let mut components: BTreeMap<String, f64> = BTreeMap::new();
        for (step, batch) in batches.iter().enumerate() {
            model.zero_grad();
            let (outputs, tape) = model.forward_mixed(batch, Mode::Train)?;
            let (breakdown, grads) = total_loss(&outputs, &batch.id_labels, model.prior(), &cfg.loss)?;
            if !breakdown.total.is_finite() {
                return Err(RnaError::Diverged {
                    epoch,
                    step,
                    detail: format!("{breakdown:?}"),
                });
            }
            model.backward(&tape, &grads);
            self.optimizer.step(model.params_mut(), lr);
            total += breakdown.total;
            for (k, v) in &breakdown.components {
                *components.entry(k.clone()).or_default() += v;
            }
            if cfg.record_steps {
                self.series.steps.push(StepRecord {
                    epoch,
                    step,
                    lr,
                    loss: breakdown,
                });
            }
        }
        let n = batches.len().max(1) as f64;
        components.values_mut().for_each(|v| *v /= n);
        let probe = (cfg.probe_size > 0)
            .then(|| epoch_probe(model, self.data, self.groups.as_ref(), cfg))
            .transpose()?;
        self.series.epochs.push(EpochRecord {
            epoch,
            lr,
            steps: batches.len(),
            mean_loss: total / n,
            mean_components: components,
            probe,
        });
        self.next_epoch += 1;
        Ok(self.series.epochs.last().expect("just pushed"))
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run_with<F>(&mut self, model: &mut ModelBundle<T>, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Self, &ModelBundle<T>) -> Result<()>,
    {
        while !self.is_done() {
            self.run_epoch(model)?;
            on_epoch(self, model)?;
        }
        Ok(())
    }
}

/// Trains `model` in place for `config.optim.epochs` epochs.
pub fn train<T: Scalar>(
    model: &mut ModelBundle<T>,
    data: &DatasetBundle<T>,
    config: &TrainConfig,
) -> Result<DiagnosticsSeries> {
    let mut trainer = Trainer::new(data, config.clone())?;
    trainer.run_with(model, |_, _| Ok(()))?;
    Ok(trainer.series)
}

/// Continues training a pretrained model for `epochs` epochs with a fresh
/// optimizer and a schedule spanning only those epochs.
pub fn fine_tune<T: Scalar>(
    model: &mut ModelBundle<T>,
    data: &DatasetBundle<T>,
    config: &TrainConfig,
    epochs: usize,
) -> Result<DiagnosticsSeries> {
    if epochs == 0 {
        return Ok(DiagnosticsSeries::default());
    }
    let mut cfg = config.clone();
    cfg.optim.epochs = epochs;
    train(model, data, &cfg)
}

fn head_pixels<T: Scalar>(set: &ImageSet<T>, limit: usize) -> (&[T], usize) {
    let n = set.len().min(limit);
    (&set.pixels()[..n * set.shape().numel()], n)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn row_norms<T: Scalar>(m: &Matrix<T>) -> Vec<f64> {
    m.iter_rows()
        .take(m.rows)
        .map(|r| r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect()
}

/// `‖f(x)‖₂` for the first `limit` images of `set`.
pub fn feature_norms<T: Scalar>(model: &ModelBundle<T>, set: &ImageSet<T>, limit: usize) -> Result<Vec<f64>> {
    let (px, n) = head_pixels(set, limit);
    if n == 0 {
        return Ok(Vec::new());
    }
    Ok(row_norms(&model.forward_eval_chunked(px, n, 256)?.features))
}

fn epoch_probe<T: Scalar>(
    model: &ModelBundle<T>,
    data: &DatasetBundle<T>,
    groups: Option<&ClassGroups>,
    cfg: &TrainConfig,
) -> Result<EpochProbe> {
    let k = cfg.probe_size;
    let shape = data.shape();
    let class_subset = |classes: &[usize]| {
        let idx: Vec<usize> = (0..data.id_train.len())
            .filter(|&i| classes.contains(&data.id_train.labels()[i]))
            .take(k)
            .collect();
        data.id_train.images.subset(&idx)
    };
    let (head, tail) = match groups {
        Some(g) => (
            mean(&feature_norms(model, &class_subset(&g.many), k)?),
            mean(&feature_norms(model, &class_subset(&g.few), k)?),
        ),
        None => (None, None),
    };
    let ood_test = merged_ood_tests(data, k);
    let eval = |set: &ImageSet<T>| -> Result<Option<(f64, f64)>> {
        let (px, n) = head_pixels(set, k);
        if n == 0 {
            return Ok(None);
        }
        let out = model.forward_eval_chunked(px, n, 256)?;
        let norm = mean(&row_norms(&out.features)).expect("non-empty");
        Ok(Some((norm, activation_ratio(&out.features)?)))
    };
    let id_test = eval(&data.id_test.images)?;
    let ood_t = eval(&ood_test)?;
    let ood_train = mean(&feature_norms(model, &data.aux_ood, k)?);
    let last = model.extractor.last_bn();
    let running = last.running_mean.iter().map(|v| v.as_f64()).sum::<f64>() / last.features as f64;
    let id_probe = data.id_train.images.subset(&(0..data.id_train.len().min(k)).collect::<Vec<_>>());
    let (bn_gap_ratio, grad_log_ratio) = if data.aux_ood.is_empty() {
        (None, None)
    } else {
        let (ood_px, n_ood) = head_pixels(&data.aux_ood, k);
        let ood_probe = ImageSet::new(shape, ood_px.to_vec())?;
        let gap = probe_bn_gap(model, &id_probe, &ood_probe)?;
        let labels = data.id_train.labels()[..id_probe.len()].to_vec();
        let batch = TrainingBatch::new(shape, id_probe.pixels().to_vec(), labels, ood_px.to_vec())?;
        let ratio = (n_ood > 0).then(|| probe_grad_log_ratio(model, &batch, &cfg.loss)).transpose()?;
        (Some(gap.ratio), ratio)
    };
    Ok(EpochProbe {
        id_train_head_norm: head,
        id_train_tail_norm: tail,
        id_test_norm: id_test.map(|v| v.0),
        ood_train_norm: ood_train,
        ood_test_norm: ood_t.map(|v| v.0),
        id_activation_ratio: id_test.map(|v| v.1),
        ood_activation_ratio: ood_t.map(|v| v.1),
        last_bn_running_mean: running,
        bn_gap_ratio,
        grad_log_ratio,
    })
}

/// Up to `per_set` images from each OOD test set, concatenated.
fn merged_ood_tests<T: Scalar>(data: &DatasetBundle<T>, per_set: usize) -> ImageSet<T> {
    let mut out = ImageSet::empty(data.shape());
    for set in data.ood_tests.values() {
        for img in set.iter().take(per_set) {
            out.push(img);
        }
    }
    out
}

/// Per-class log-ratio of the classifier-weight gradient norms of the ID loss
/// and the OOD term, with the extractor frozen (eval mode).
///
/// Terms that act on the projection (`rna`, `attenuation`) have no classifier
/// gradient, so for those the outlier-exposure term is used as the probe.
/// A zero OOD gradient yields `+∞`.
pub fn probe_grad_log_ratio<T: Scalar>(
    model: &ModelBundle<T>,
    batch: &TrainingBatch<T>,
    loss: &LossConfig,
) -> Result<Vec<f64>> {
    if batch.b_ood() == 0 {
        return Err(RnaError::MissingOodRows);
    }
    let c = model.num_classes();
    let d = model.config.feature_dim();
    let id = model.forward_eval(&batch.id_inputs, batch.b_id())?;
    let ood = model.forward_eval(&batch.ood_inputs, batch.b_ood())?;
    let f64s = |m: &Matrix<T>| m.data.iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
    let w = f64s(&Matrix::from_vec(d, c, model.classifier.weight.value.clone()));
    let (fi, fo) = (f64s(&id.features), f64s(&ood.features));
    let grad = match loss.ood_term {
        OodTerm::EnergyOe => {
            let mut g = analytic_classifier_grad(
                &fi, &batch.id_labels, &[], &w, d, c, loss.id_loss, model.prior(), loss.tau, 0.0,
            )?;
            let (m_in, m_out) = loss.energy_margins;
            let (_, gi, go) =
                crate::losses::energy_oe_loss_grad(&f64s(&id.logits), &f64s(&ood.logits), c, m_in, m_out)?;
            let mut part = vec![0.0; d * c];
            for (f, gz) in [(&fi, &gi), (&fo, &go)] {
                for (row, grow) in f.chunks_exact(d).zip(gz.chunks_exact(c)) {
                    for a in 0..d {
                        for k in 0..c {
                            part[a * c + k] += loss.energy_weight * row[a] * grow[k];
                        }
                    }
                }
            }
            g.ood_part = part;
            g
        }
        _ => analytic_classifier_grad(
            &fi, &batch.id_labels, &fo, &w, d, c, loss.id_loss, model.prior(), loss.tau, loss.lambda,
        )?,
    };
    Ok((0..c)
        .map(|k| {
            let (num, den) = grad.class_l1(k, c);
            if den == 0.0 {
                f64::INFINITY
            } else {
                (num / den).ln()
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; values outside are clamped to the end bins.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let mut counts = vec![0; bins];
        let width = (hi - lo).max(f64::MIN_POSITIVE);
        for &v in values {
            let b = (((v - lo) / width) * bins as f64).floor();
            counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn edges(&self) -> Vec<f64> {
        let n = self.counts.len();
        (0..=n).map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Mean norm per split name.
    pub means: BTreeMap<String, f64>,
    /// Shared-range histograms per split name.
    pub histograms: BTreeMap<String, Histogram>,
}

/// Mean representation norms and histograms for the ID train head and tail
/// classes, the ID test split, the auxiliary set and each OOD test set.
pub fn probe_norm_stats<T: Scalar>(
    model: &ModelBundle<T>,
    data: &DatasetBundle<T>,
    limit: usize,
    bins: usize,
) -> Result<NormStats> {
    let mut norms: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    if let Ok(groups) = assign_class_groups(&data.train_counts()) {
        for (name, classes) in [("id_train_head", &groups.many), ("id_train_tail", &groups.few)] {
            let idx: Vec<usize> = (0..data.id_train.len())
                .filter(|&i| classes.contains(&data.id_train.labels()[i]))
                .take(limit)
                .collect();
            norms.insert(name.into(), feature_norms(model, &data.id_train.images.subset(&idx), limit)?);
        }
    }
    norms.insert("id_test".into(), feature_norms(model, &data.id_test.images, limit)?);
    norms.insert("ood_train".into(), feature_norms(model, &data.aux_ood, limit)?);
    for (name, set) in &data.ood_tests {
        norms.insert(format!("ood_test/{name}"), feature_norms(model, set, limit)?);
    }
    norms.retain(|_, v| !v.is_empty());
    let hi = norms.values().flatten().copied().fold(0.0, f64::max);
    Ok(NormStats {
        means: norms.iter().map(|(k, v)| (k.clone(), mean(v).expect("non-empty"))).collect(),
        histograms: norms
            .iter()
            .map(|(k, v)| (k.clone(), Histogram::new(v, 0.0, hi, bins)))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnGap {
    /// Column means of the last batch norm's input over the ID images.
    pub id_mean: Vec<f64>,
    pub ood_mean: Vec<f64>,
    pub running_mean: Vec<f64>,
    /// Coordinate average of `μ_ID − μ_BN`.
    pub id_gap: f64,
    /// Coordinate average of `μ_BN − μ_OOD`.
    pub ood_gap: f64,
    /// `id_gap / ood_gap`.
    pub ratio: f64,
}

/// Where the running mean of the last batch norm sits between the ID and OOD
/// activation means, read with frozen eval-mode statistics.
pub fn probe_bn_gap<T: Scalar>(model: &ModelBundle<T>, id: &ImageSet<T>, ood: &ImageSet<T>) -> Result<BnGap> {
    if id.is_empty() {
        return Err(RnaError::Empty("ID images for the batch-norm probe"));
    }
    if ood.is_empty() {
        return Err(RnaError::Empty("OOD images for the batch-norm probe"));
    }
    let col_means = |set: &ImageSet<T>| {
        let x = model.extractor.last_bn_input(set.pixels(), set.len());
        let mut m = vec![0.0; x.cols];
        for row in x.iter_rows().take(x.rows) {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v.as_f64();
            }
        }
        m.iter_mut().for_each(|v| *v /= x.rows as f64);
        m
    };
    let id_mean = col_means(id);
    let ood_mean = col_means(ood);
    let running_mean: Vec<f64> = model.extractor.last_bn().running_mean.iter().map(|v| v.as_f64()).collect();
    let n = running_mean.len() as f64;
    let id_gap = id_mean.iter().zip(&running_mean).map(|(a, b)| a - b).sum::<f64>() / n;
    let ood_gap = running_mean.iter().zip(&ood_mean).map(|(a, b)| a - b).sum::<f64>() / n;
    Ok(BnGap {
        ratio: id_gap / ood_gap,
        id_mean,
        ood_mean,
        running_mean,
        id_gap,
        ood_gap,
    })
}
