//! Training objectives and their gradients with respect to model outputs.
//!
//! The per-term functions are generic over [`num_traits::Float`] and take
//! flat row-major slices, so they can be evaluated on any float-like type.
//! Every term is averaged over the rows it consumes.

use std::collections::BTreeMap;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RnaError};
use crate::model::{ForwardOutputs, OutputGrads};
use crate::nn::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdLoss {
    Ce,
    #[default]
    La,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodTerm {
    None,
    #[default]
    Rna,
    Oe,
    EnergyOe,
    Attenuation,
    RnaAttenuation,
}

impl OodTerm {
    /// Whether the term reads OOD rows (as opposed to only shaping batch statistics).
    pub fn consumes_ood(&self) -> bool {
        matches!(self, Self::Oe | Self::EnergyOe | Self::Attenuation | Self::RnaAttenuation)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Rna => "rna",
            Self::Oe => "oe",
            Self::EnergyOe => "energy_oe",
            Self::Attenuation => "attenuation",
            Self::RnaAttenuation => "rna_attenuation",
        }
    }
}

/// How per-row losses are reduced within a term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

fn default_lambda() -> f64 {
    0.5
}
fn default_tau() -> f64 {
    1.0
}
fn default_margins() -> (f64, f64) {
    (-25.0, -7.0)
}
fn default_energy_weight() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the OOD-side term (RNA, OE, attenuation).
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Temperature on the log-prior offsets of the logit-adjusted loss.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub id_loss: IdLoss,
    #[serde(default)]
    pub ood_term: OodTerm,
    /// `(m_in, m_out)` energy hinge margins.
    #[serde(default = "default_margins")]
    pub energy_margins: (f64, f64),
    /// Weight of the energy hinge term; used instead of `lambda` for `EnergyOe`.
    #[serde(default = "default_energy_weight")]
    pub energy_weight: f64,
    #[serde(default)]
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            tau: default_tau(),
            id_loss: IdLoss::La,
            ood_term: OodTerm::Rna,
            energy_margins: default_margins(),
            energy_weight: default_energy_weight(),
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn with_terms(id_loss: IdLoss, ood_term: OodTerm, lambda: f64) -> Self {
        Self {
            id_loss,
            ood_term,
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err("lambda must be a finite value >= 0".into());
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err("tau must be positive".into());
        }
        let (a, b) = self.energy_margins;
        if !a.is_finite() || !b.is_finite() {
            return Err("energy margins must be finite".into());
        }
        if !(self.energy_weight >= 0.0) {
            return Err("energy_weight must be >= 0".into());
        }
        Ok(())
    }

    /// Short method label, e.g. `LA+RNA`.
    pub fn method_name(&self) -> String {
        let id = match self.id_loss {
            IdLoss::Ce => "CE",
            IdLoss::La => "LA",
        };
        match self.ood_term {
            OodTerm::None => id.to_string(),
            OodTerm::Rna => format!("{id}+RNA"),
            OodTerm::Oe => format!("{id}+OE"),
            OodTerm::EnergyOe => format!("{id}+EnergyOE"),
            OodTerm::Attenuation => format!("{id}+Attenuation"),
            OodTerm::RnaAttenuation => format!("{id}+RNA+Attenuation"),
        }
    }
}

fn c<T: Float>(v: f64) -> T {
    T::from(v).expect("constant representable")
}

fn rows<T: Float>(data: &[T], cols: usize) -> Result<std::slice::ChunksExact<'_, T>> {
    if cols == 0 || data.len() % cols != 0 {
        return Err(RnaError::Shape(format!(
            "{} values do not form rows of width {cols}",
            data.len()
        )));
    }
    Ok(data.chunks_exact(cols))
}

pub fn logsumexp<T: Float>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let sum = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

/// Normalizes by the sum, so equal logits give exactly `1/C`.
pub fn softmax<T: Float>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum = e.iter().fold(T::zero(), |a, &v| a + v);
    e.into_iter().map(|v| v / sum).collect()
}

fn l2_norm<T: Float>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

fn log_prior<T: Float>(prior: &[f64], tau: f64, num_classes: usize) -> Result<Vec<T>> {
    if prior.len() != num_classes {
        return Err(RnaError::InvalidPrior(format!(
            "prior has {} entries for {num_classes} classes",
            prior.len()
        )));
    }
    prior
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            if p > 0.0 && p.is_finite() {
                Ok(c(tau * p.ln()))
            } else {
                Err(RnaError::InvalidPrior(format!("class {k} has probability {p}")))
            }
        })
        .collect()
}

fn check_labels(labels: &[usize], n_rows: usize, num_classes: usize) -> Result<()> {
    if labels.len() != n_rows {
        return Err(RnaError::Shape(format!("{n_rows} logit rows but {} labels", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(RnaError::InvalidArgument(format!("label {y} out of range")));
    }
    Ok(())
}

/// Softmax cross-entropy on logits shifted by per-class `offsets`; value and `dL/dz`.
fn shifted_ce<T: Float>(
    logits: &[T],
    num_classes: usize,
    labels: &[usize],
    offsets: &[T],
) -> Result<(T, Vec<T>)> {
    let n = labels.len();
    check_labels(labels, logits.len() / num_classes.max(1), num_classes)?;
    if n == 0 {
        return Err(RnaError::Empty("ID rows for the classification loss"));
    }
    let scale = T::one() / c(n as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    let mut adjusted = vec![T::zero(); num_classes];
    for (row, &y) in rows(logits, num_classes)?.zip(labels) {
        for k in 0..num_classes {
            adjusted[k] = row[k] + offsets[k];
        }
        total = total + logsumexp(&adjusted) - adjusted[y];
        for (k, p) in softmax(&adjusted).into_iter().enumerate() {
            let target = if k == y { T::one() } else { T::zero() };
            grad.push((p - target) * scale);
        }
    }
    Ok((total * scale, grad))
}

pub fn cross_entropy<T: Float>(logits: &[T], num_classes: usize, labels: &[usize]) -> Result<T> {
    cross_entropy_grad(logits, num_classes, labels).map(|(v, _)| v)
}

pub fn cross_entropy_grad<T: Float>(logits: &[T], num_classes: usize, labels: &[usize]) -> Result<(T, Vec<T>)> {
    shifted_ce(logits, num_classes, labels, &vec![T::zero(); num_classes])
}

/// Logit-adjusted loss: cross-entropy on `z + tau * log(prior)`.
pub fn la_loss<T: Float>(logits: &[T], num_classes: usize, labels: &[usize], prior: &[f64], tau: f64) -> Result<T> {
    la_loss_grad(logits, num_classes, labels, prior, tau).map(|(v, _)| v)
}

pub fn la_loss_grad<T: Float>(
    logits: &[T],
    num_classes: usize,
    labels: &[usize],
    prior: &[f64],
    tau: f64,
) -> Result<(T, Vec<T>)> {
    let offsets = log_prior(prior, tau, num_classes)?;
    shifted_ce(logits, num_classes, labels, &offsets)
}

/// Mean of `-log(1 + ||h||)` over the given (ID) rows.
pub fn rna_loss<T: Float>(projected: &[T], dim: usize) -> Result<T> {
    rna_loss_grad(projected, dim).map(|(v, _)| v)
}

/// `±log(1 + ||h||)` averaged, with gradient `±h / (||h|| (1 + ||h||)) / n`.
fn log_norm_term<T: Float>(projected: &[T], dim: usize, sign: T, what: &'static str) -> Result<(T, Vec<T>)> {
    let n = projected.len() / dim.max(1);
    if n == 0 {
        return Err(RnaError::Empty(what));
    }
    let scale = T::one() / c(n as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(projected.len());
    for row in rows(projected, dim)? {
        let norm = l2_norm(row);
        total = total + (T::one() + norm).ln();
        let coef = if norm > T::zero() {
            sign * scale / (norm * (T::one() + norm))
        } else {
            T::zero()
        };
        grad.extend(row.iter().map(|&v| coef * v));
    }
    Ok((sign * total * scale, grad))
}

pub fn rna_loss_grad<T: Float>(projected: &[T], dim: usize) -> Result<(T, Vec<T>)> {
    log_norm_term(projected, dim, -T::one(), "ID rows for the RNA loss")
}

/// Mean of `+log(1 + ||h||)` over the given (OOD) rows.
pub fn attenuation_loss<T: Float>(projected: &[T], dim: usize) -> Result<T> {
    attenuation_loss_grad(projected, dim).map(|(v, _)| v)
}

pub fn attenuation_loss_grad<T: Float>(projected: &[T], dim: usize) -> Result<(T, Vec<T>)> {
    log_norm_term(projected, dim, T::one(), "OOD rows for the attenuation loss")
}

/// Norm of the per-sample RNA gradient `d(-log(1+||h||))/dh`, i.e. `1 / (1 + ||h||)`.
pub fn rna_grad_norm<T: Float>(h: &[T]) -> Result<T> {
    let norm = l2_norm(h);
    if norm == T::zero() {
        return Err(RnaError::ZeroRepresentation);
    }
    Ok(T::one() / (T::one() + norm))
}

/// Outlier exposure: cross-entropy from the uniform distribution to the softmax.
pub fn oe_loss<T: Float>(logits: &[T], num_classes: usize) -> Result<T> {
    oe_loss_grad(logits, num_classes).map(|(v, _)| v)
}

pub fn oe_loss_grad<T: Float>(logits: &[T], num_classes: usize) -> Result<(T, Vec<T>)> {
    if num_classes < 2 {
        return Err(RnaError::InvalidArgument("outlier exposure needs at least two classes".into()));
    }
    let n = logits.len() / num_classes;
    if n == 0 {
        return Err(RnaError::Empty("OOD rows for the OE loss"));
    }
    let scale = T::one() / c(n as f64);
    let uniform = T::one() / c(num_classes as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for row in rows(logits, num_classes)? {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * uniform;
        total = total + logsumexp(row) - mean;
        grad.extend(softmax(row).into_iter().map(|p| (p - uniform) * scale));
    }
    Ok((total * scale, grad))
}

/// Free energy `-logsumexp(z)`.
pub fn free_energy<T: Float>(row: &[T]) -> T {
    -logsumexp(row)
}

/// Squared-hinge energy regularizer: ID energies pushed below `m_in`, OOD above `m_out`.
pub fn energy_oe_loss<T: Float>(
    id_logits: &[T],
    ood_logits: &[T],
    num_classes: usize,
    m_in: f64,
    m_out: f64,
) -> Result<T> {
    energy_oe_loss_grad(id_logits, ood_logits, num_classes, m_in, m_out).map(|(v, _, _)| v)
}

/// Value and gradients with respect to the ID and OOD logits.
pub fn energy_oe_loss_grad<T: Float>(
    id_logits: &[T],
    ood_logits: &[T],
    num_classes: usize,
    m_in: f64,
    m_out: f64,
) -> Result<(T, Vec<T>, Vec<T>)> {
    let (a, b, gi, go) = energy_parts(id_logits, ood_logits, num_classes, m_in, m_out)?;
    Ok((a + b, gi, go))
}

/// ID mean, OOD mean and the two gradients of the energy hinge.
fn energy_parts<T: Float>(
    id_logits: &[T],
    ood_logits: &[T],
    num_classes: usize,
    m_in: f64,
    m_out: f64,
) -> Result<(T, T, Vec<T>, Vec<T>)> {
    let n_id = id_logits.len() / num_classes.max(1);
    let n_ood = ood_logits.len() / num_classes.max(1);
    if n_id == 0 {
        return Err(RnaError::Empty("ID rows for the energy loss"));
    }
    if n_ood == 0 {
        return Err(RnaError::Empty("OOD rows for the energy loss"));
    }
    let (m_in, m_out) = (c::<T>(m_in), c::<T>(m_out));
    let two = c::<T>(2.0);
    let mut id_total = T::zero();
    let mut id_grad = Vec::with_capacity(id_logits.len());
    let s_id = T::one() / c(n_id as f64);
    for row in rows(id_logits, num_classes)? {
        let gap = (free_energy(row) - m_in).max(T::zero());
        id_total = id_total + gap * gap;
        // dE/dz = -softmax
        id_grad.extend(softmax(row).into_iter().map(|p| -two * gap * p * s_id));
    }
    let mut ood_total = T::zero();
    let mut ood_grad = Vec::with_capacity(ood_logits.len());
    let s_ood = T::one() / c(n_ood as f64);
    for row in rows(ood_logits, num_classes)? {
        let gap = (m_out - free_energy(row)).max(T::zero());
        ood_total = ood_total + gap * gap;
        ood_grad.extend(softmax(row).into_iter().map(|p| two * gap * p * s_ood));
    }
    Ok((id_total * s_id, ood_total * s_ood, id_grad, ood_grad))
}

/// Loss value with its parts, for logging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Classification loss on ID rows.
    pub id_loss: f64,
    /// Unweighted OOD-side term, if any.
    pub ood_term: Option<f64>,
    /// Multiplier applied to `ood_term` in `total`.
    pub ood_weight: f64,
    /// Individual named terms (`ce`/`la`, `rna`, `oe`, `energy`, `attenuation`).
    pub components: BTreeMap<String, f64>,
}

/// Total objective `L_ID + weight * L_term` and its gradient with respect to
/// logits and projections. Rows not read by any term get exactly zero gradient.
pub fn total_loss<T: Scalar>(
    outputs: &ForwardOutputs<T>,
    labels: &[usize],
    prior: &[f64],
    config: &LossConfig,
) -> Result<(LossBreakdown, OutputGrads<T>)> {
    config.validate().map_err(RnaError::InvalidArgument)?;
    let n = outputs.logits.rows;
    let n_id = outputs.b_id();
    if outputs.id_mask.iter().skip(n_id).any(|&m| m) {
        return Err(RnaError::InvalidArgument("ID rows must form a prefix of the batch".into()));
    }
    if labels.len() != n_id {
        return Err(RnaError::Shape(format!("{n_id} ID rows but {} labels", labels.len())));
    }
    let n_ood = n - n_id;
    let num_classes = outputs.logits.cols;
    let p_dim = outputs.projected.cols;
    if config.ood_term.consumes_ood() && n_ood == 0 {
        return Err(RnaError::MissingOodRows);
    }
    let (id_logits, ood_logits) = outputs.logits.data.split_at(n_id * num_classes);
    let (id_proj, ood_proj) = outputs.projected.data.split_at(n_id * p_dim);

    let sum_scale = |rows: usize| match config.reduction {
        Reduction::Mean => 1.0,
        Reduction::Sum => rows as f64,
    };
    let scaled = |g: Vec<T>, s: f64| -> Vec<T> {
        let s = T::from_f64_lossy(s);
        g.into_iter().map(|v| v * s).collect()
    };

    let mut grad_logits = vec![T::zero(); n * num_classes];
    let mut grad_proj = vec![T::zero(); n * p_dim];
    let mut components = BTreeMap::new();

    let (id_value, id_grad) = match config.id_loss {
        IdLoss::Ce => cross_entropy_grad(id_logits, num_classes, labels)?,
        IdLoss::La => la_loss_grad(id_logits, num_classes, labels, prior, config.tau)?,
    };
    let s = sum_scale(n_id);
    let id_loss = id_value.as_f64() * s;
    components.insert(
        match config.id_loss {
            IdLoss::Ce => "ce",
            IdLoss::La => "la",
        }
        .to_string(),
        id_loss,
    );
    grad_logits[..n_id * num_classes].copy_from_slice(&scaled(id_grad, s));

    let add = |dst: &mut [T], src: Vec<T>, w: f64| {
        let w = T::from_f64_lossy(w);
        for (d, v) in dst.iter_mut().zip(src) {
            *d += w * v;
        }
    };

    let (ood_term, weight) = match config.ood_term {
        OodTerm::None => (None, 0.0),
        OodTerm::Rna => {
            let (v, g) = rna_loss_grad(id_proj, p_dim)?;
            let s = sum_scale(n_id);
            let v = v.as_f64() * s;
            components.insert("rna".into(), v);
            add(&mut grad_proj[..n_id * p_dim], scaled(g, s), config.lambda);
            (Some(v), config.lambda)
        }
        OodTerm::Attenuation => {
            let (v, g) = attenuation_loss_grad(ood_proj, p_dim)?;
            let s = sum_scale(n_ood);
            let v = v.as_f64() * s;
            components.insert("attenuation".into(), v);
            add(&mut grad_proj[n_id * p_dim..], scaled(g, s), config.lambda);
            (Some(v), config.lambda)
        }
        OodTerm::RnaAttenuation => {
            let (vr, gr) = rna_loss_grad(id_proj, p_dim)?;
            let (va, ga) = attenuation_loss_grad(ood_proj, p_dim)?;
            let (sr, sa) = (sum_scale(n_id), sum_scale(n_ood));
            let (vr, va) = (vr.as_f64() * sr, va.as_f64() * sa);
            components.insert("rna".into(), vr);
            components.insert("attenuation".into(), va);
            add(&mut grad_proj[..n_id * p_dim], scaled(gr, sr), config.lambda);
            add(&mut grad_proj[n_id * p_dim..], scaled(ga, sa), config.lambda);
            (Some(vr + va), config.lambda)
        }
        OodTerm::Oe => {
            let (v, g) = oe_loss_grad(ood_logits, num_classes)?;
            let s = sum_scale(n_ood);
            let v = v.as_f64() * s;
            components.insert("oe".into(), v);
            add(&mut grad_logits[n_id * num_classes..], scaled(g, s), config.lambda);
            (Some(v), config.lambda)
        }
        OodTerm::EnergyOe => {
            let (m_in, m_out) = config.energy_margins;
            let (vi, vo, gi, go) = energy_parts(id_logits, ood_logits, num_classes, m_in, m_out)?;
            let (si, so) = (sum_scale(n_id), sum_scale(n_ood));
            let v = vi.as_f64() * si + vo.as_f64() * so;
            components.insert("energy".into(), v);
            add(&mut grad_logits[..n_id * num_classes], scaled(gi, si), config.energy_weight);
            add(&mut grad_logits[n_id * num_classes..], scaled(go, so), config.energy_weight);
            (Some(v), config.energy_weight)
        }
    };

    let total = id_loss + ood_term.map_or(0.0, |v| weight * v);
    let breakdown = LossBreakdown {
        total,
        id_loss,
        ood_term,
        ood_weight: weight,
        components,
    };
    let grads = OutputGrads {
        logits: Matrix::from_vec(n, num_classes, grad_logits),
        projected: Matrix::from_vec(n, p_dim, grad_proj),
    };
    Ok((breakdown, grads))
}

/// `∂L/∂W` for a frozen extractor, split into its ID and OOD parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrad<T> {
    /// `D × C`, same layout as the classifier weight.
    pub id_part: Vec<T>,
    /// `λ`-weighted outlier-exposure part, `D × C`.
    pub ood_part: Vec<T>,
}

impl<T: Float> ClassifierGrad<T> {
    pub fn total(&self) -> Vec<T> {
        self.id_part.iter().zip(&self.ood_part).map(|(&a, &b)| a + b).collect()
    }

    /// L1 norm of column `class` (the gradient for `w_class`) of each part.
    pub fn class_l1(&self, class: usize, num_classes: usize) -> (T, T) {
        let col = |m: &[T]| {
            m.iter()
                .skip(class)
                .step_by(num_classes)
                .fold(T::zero(), |a, &v| a + v.abs())
        };
        (col(&self.id_part), col(&self.ood_part))
    }
}

/// Closed form of the classifier gradient for `L_ID + λ·L_OE`:
/// `(1/B) Σ f(x)(S(Wᵀf(x)) - y) + (λ/B') Σ f(x')(S(Wᵀf(x')) - 1/C)`.
/// With the logit-adjusted ID loss the first softmax uses prior-adjusted logits.
#[allow(clippy::too_many_arguments)]
pub fn analytic_classifier_grad<T: Float>(
    id_features: &[T],
    labels: &[usize],
    ood_features: &[T],
    weight: &[T],
    feature_dim: usize,
    num_classes: usize,
    id_loss: IdLoss,
    prior: &[f64],
    tau: f64,
    lambda: f64,
) -> Result<ClassifierGrad<T>> {
    if weight.len() != feature_dim * num_classes {
        return Err(RnaError::Shape("classifier weight must be D × C".into()));
    }
    let offsets: Vec<T> = match id_loss {
        IdLoss::Ce => vec![T::zero(); num_classes],
        IdLoss::La => log_prior(prior, tau, num_classes)?,
    };
    let logits_of = |f: &[T]| -> Vec<T> {
        (0..num_classes)
            .map(|k| (0..feature_dim).fold(T::zero(), |a, d| a + f[d] * weight[d * num_classes + k]))
            .collect()
    };
    let mut id_part = vec![T::zero(); feature_dim * num_classes];
    let n_id = labels.len();
    check_labels(labels, id_features.len() / feature_dim.max(1), num_classes)?;
    if n_id > 0 {
        let inv = T::one() / c(n_id as f64);
        for (f, &y) in rows(id_features, feature_dim)?.zip(labels) {
            let z: Vec<T> = logits_of(f).iter().zip(&offsets).map(|(&a, &b)| a + b).collect();
            let s = softmax(&z);
            for k in 0..num_classes {
                let target = if k == y { T::one() } else { T::zero() };
                let w = (s[k] - target) * inv;
                for d in 0..feature_dim {
                    id_part[d * num_classes + k] = id_part[d * num_classes + k] + f[d] * w;
                }
            }
        }
    }
    let mut ood_part = vec![T::zero(); feature_dim * num_classes];
    let n_ood = ood_features.len() / feature_dim.max(1);
    if n_ood > 0 && lambda != 0.0 {
        let inv = c::<T>(lambda) / c(n_ood as f64);
        let uniform = T::one() / c(num_classes as f64);
        for f in rows(ood_features, feature_dim)? {
            let s = softmax(&logits_of(f));
            for k in 0..num_classes {
                let w = (s[k] - uniform) * inv;
                for d in 0..feature_dim {
                    ood_part[d * num_classes + k] = ood_part[d * num_classes + k] + f[d] * w;
                }
            }
        }
    }
    Ok(ClassifierGrad { id_part, ood_part })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn la_hand_case() {
        let v: f64 = la_loss(&[0.0, 0.0], 2, &[0], &[0.9, 0.1], 1.0).unwrap();
        assert!((v - (-(0.9f64).ln())).abs() < 1e-12);
        assert!((v - 0.10536).abs() < 1e-5);
    }

    #[test]
    fn la_uniform_prior_is_cross_entropy() {
        let z = [1.0, -2.0, 0.5, 3.0, 0.0, -1.0];
        let ce: f64 = cross_entropy(&z, 3, &[2, 0]).unwrap();
        for tau in [0.5, 1.0, 2.0] {
            let la: f64 = la_loss(&z, 3, &[2, 0], &[1.0 / 3.0; 3], tau).unwrap();
            assert!((la - ce).abs() < 1e-12);
        }
    }

    #[test]
    fn la_confident_limit_and_errors() {
        let v: f64 = la_loss(&[60.0, 0.0], 2, &[0], &[0.5, 0.5], 1.0).unwrap();
        assert!(v >= 0.0 && v < 1e-20);
        assert!(matches!(
            la_loss::<f64>(&[0.0, 0.0], 2, &[0], &[1.0, 0.0], 1.0),
            Err(RnaError::InvalidPrior(_))
        ));
    }

    #[test]
    fn rna_hand_cases() {
        assert_eq!(rna_loss(&[0.0f64, 0.0], 2).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((rna_loss(&[e - 1.0, 0.0], 2).unwrap() + 1.0).abs() < 1e-12);
        let v = rna_loss(&[1.0f64, 0.0, 0.0, 3.0], 2).unwrap();
        assert!((v - (-(2f64.ln() + 4f64.ln()) / 2.0)).abs() < 1e-12);
        assert!((v + 1.03972).abs() < 1e-5);
        assert!(matches!(rna_loss::<f64>(&[], 2), Err(RnaError::Empty(_))));
    }

    #[test]
    fn attenuation_negates_rna() {
        let h = [0.3f64, -1.2, 2.0, 0.1, 0.0, 5.0];
        assert_eq!(rna_loss(&h, 3).unwrap() + attenuation_loss(&h, 3).unwrap(), 0.0);
        assert_eq!(attenuation_loss(&[0.0f64, 0.0], 2).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((attenuation_loss(&[e - 1.0], 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rna_grad_norm_cases() {
        assert_eq!(rna_grad_norm(&[1.0f64, 0.0]).unwrap(), 0.5);
        assert!((rna_grad_norm(&[1e-12f64]).unwrap() - 1.0).abs() < 1e-11);
        assert_eq!(rna_grad_norm::<f64>(&[0.0, 0.0]), Err(RnaError::ZeroRepresentation));
    }

    #[test]
    fn oe_cases() {
        let v: f64 = oe_loss(&[0.7; 5], 5).unwrap();
        assert!((v - 5f64.ln()).abs() < 1e-12);
        let a: f64 = oe_loss(&[1.0, -2.0, 0.3], 3).unwrap();
        let b: f64 = oe_loss(&[11.0, 8.0, 10.3], 3).unwrap();
        assert!((a - b).abs() < 1e-12);
        let big: f64 = oe_loss(&[10.0, -10.0], 2).unwrap();
        assert!((big - (10.0 + (1.0 + (-20f64).exp()).ln())).abs() < 1e-12);
        assert!((big - 10.0).abs() < 1e-4);
        assert!(oe_loss::<f64>(&[], 3).is_err());
        assert!(oe_loss::<f64>(&[1.0], 1).is_err());
    }

    #[test]
    fn energy_cases() {
        // E = -logsumexp; logits (0,0) → E = -ln 2 ≈ -0.69
        let id = [0.0f64, 0.0];
        let ood = [0.0f64, 0.0];
        // margins satisfied: E_id <= m_in and E_ood >= m_out
        assert_eq!(energy_oe_loss(&id, &ood, 2, 0.0, -1.0).unwrap(), 0.0);
        // single ID sample with E = m_in + 2
        let e = free_energy(&id);
        let v = energy_oe_loss(&id, &ood, 2, e - 2.0, -100.0).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        assert!(energy_oe_loss::<f64>(&id, &[], 2, 0.0, 0.0).is_err());
    }

    fn outputs(n_id: usize, n_ood: usize, c_: usize, p: usize, seed: u64) -> ForwardOutputs<f64> {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        };
        let n = n_id + n_ood;
        ForwardOutputs {
            features: Matrix::from_vec(n, 1, (0..n).map(|_| next()).collect()),
            projected: Matrix::from_vec(n, p, (0..n * p).map(|_| next()).collect()),
            logits: Matrix::from_vec(n, c_, (0..n * c_).map(|_| next()).collect()),
            id_mask: (0..n).map(|i| i < n_id).collect(),
        }
    }

    #[test]
    fn total_rna_matches_parts_and_isolates_ood_rows() {
        let out = outputs(4, 3, 3, 2, 1);
        let labels = [0, 1, 2, 1];
        let prior = [0.6, 0.3, 0.1];
        let cfg = LossConfig::default();
        let (b, g) = total_loss(&out, &labels, &prior, &cfg).unwrap();
        let la = la_loss(&out.logits.data[..12], 3, &labels, &prior, 1.0).unwrap();
        let rna = rna_loss(&out.projected.data[..8], 2).unwrap();
        assert!((b.total - (la + 0.5 * rna)).abs() < 1e-12);
        assert!((b.components["la"] + 0.5 * b.components["rna"] - b.total).abs() < 1e-12);
        assert!(g.logits.data[12..].iter().all(|&v| v == 0.0));
        assert!(g.projected.data[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn total_lambda_zero_is_id_loss() {
        let out = outputs(4, 2, 3, 2, 2);
        let labels = [0, 1, 2, 1];
        let prior = [0.6, 0.3, 0.1];
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let (b, _) = total_loss(&out, &labels, &prior, &cfg).unwrap();
        assert_eq!(b.total, b.id_loss);
    }

    #[test]
    fn total_rna_attenuation_combines_both_sides() {
        let out = outputs(3, 3, 3, 2, 3);
        let labels = [0, 1, 2];
        let prior = [0.6, 0.3, 0.1];
        let cfg = LossConfig::with_terms(IdLoss::La, OodTerm::RnaAttenuation, 0.5);
        let (b, _) = total_loss(&out, &labels, &prior, &cfg).unwrap();
        let la = la_loss(&out.logits.data[..9], 3, &labels, &prior, 1.0).unwrap();
        let r = rna_loss(&out.projected.data[..6], 2).unwrap();
        let a = attenuation_loss(&out.projected.data[6..], 2).unwrap();
        assert!((b.total - (la + 0.5 * (r + a))).abs() < 1e-12);
    }

    #[test]
    fn total_requires_ood_rows_when_consumed() {
        let out = outputs(3, 0, 3, 2, 4);
        let prior = [0.6, 0.3, 0.1];
        for term in [OodTerm::Oe, OodTerm::EnergyOe, OodTerm::Attenuation, OodTerm::RnaAttenuation] {
            let cfg = LossConfig::with_terms(IdLoss::La, term, 0.5);
            assert_eq!(
                total_loss(&out, &[0, 1, 2], &prior, &cfg).unwrap_err(),
                RnaError::MissingOodRows
            );
        }
        let cfg = LossConfig::with_terms(IdLoss::La, OodTerm::Rna, 0.5);
        assert!(total_loss(&out, &[0, 1, 2], &prior, &cfg).is_ok());
    }

    #[test]
    fn sum_reduction_scales_terms_by_row_count() {
        let out = outputs(4, 2, 3, 2, 5);
        let labels = [0, 1, 2, 1];
        let prior = [0.6, 0.3, 0.1];
        for term in [OodTerm::Rna, OodTerm::Oe, OodTerm::EnergyOe] {
            let mean_cfg = LossConfig::with_terms(IdLoss::La, term, 0.5);
            let sum_cfg = LossConfig {
                reduction: Reduction::Sum,
                ..mean_cfg.clone()
            };
            let (m, gm) = total_loss(&out, &labels, &prior, &mean_cfg).unwrap();
            let (s, _) = total_loss(&out, &labels, &prior, &sum_cfg).unwrap();
            assert!((s.id_loss - 4.0 * m.id_loss).abs() < 1e-12);
            if term == OodTerm::Oe {
                assert!((s.ood_term.unwrap() - 2.0 * m.ood_term.unwrap()).abs() < 1e-12);
            }
            assert!(gm.logits.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn analytic_grad_trivial_cases() {
        // near-one-hot correct softmax and λ = 0 → ≈ zero gradient
        let f = [1.0f64, 0.0, 0.0, 1.0];
        let w = [100.0, -100.0, -100.0, 100.0];
        let g = analytic_classifier_grad(&f, &[0, 1], &[], &w, 2, 2, IdLoss::Ce, &[0.5, 0.5], 1.0, 0.0).unwrap();
        assert!(g.total().iter().all(|v| v.abs() < 1e-80));
        // uniform OOD softmax → OOD part vanishes
        let zero_w = [0.0f64; 6];
        let g = analytic_classifier_grad(&[1.0, 2.0], &[0], &[3.0, -1.0, 0.5, 0.5], &zero_w, 2, 3, IdLoss::Ce, &[1.0 / 3.0; 3], 1.0, 0.5).unwrap();
        assert!(g.ood_part.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn method_names() {
        assert_eq!(LossConfig::default().method_name(), "LA+RNA");
        assert_eq!(LossConfig::with_terms(IdLoss::Ce, OodTerm::None, 0.0).method_name(), "CE");
    }
}
