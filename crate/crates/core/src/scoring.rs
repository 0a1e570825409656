//! Post-hoc OOD scores. Every scorer follows one convention: a larger score
//! means more OOD-like.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RnaError};
use crate::losses::logsumexp;

/// `-‖f‖₂` on the penultimate representation.
pub fn rn_score<T: Float>(features: &[T]) -> T {
    -features.iter().fold(T::zero(), |a, &v| a + v * v).sqrt()
}

/// Negated maximum softmax probability.
pub fn msp_score<T: Float>(logits: &[T]) -> T {
    let lse = logsumexp(logits);
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    -(max - lse).exp()
}

/// Free energy `-T · logsumexp(z / T)`.
pub fn energy_score<T: Float>(logits: &[T], temperature: T) -> T {
    let scaled: Vec<T> = logits.iter().map(|&z| z / temperature).collect();
    -temperature * logsumexp(&scaled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Id,
    Ood,
}

/// OOD iff `score >= threshold`.
pub fn decide<T: Float>(score: T, threshold: T) -> Decision {
    if score >= threshold {
        Decision::Ood
    } else {
        Decision::Id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    Rn,
    Msp,
    Energy,
}

impl Scorer {
    pub fn all() -> [Scorer; 3] {
        [Scorer::Rn, Scorer::Msp, Scorer::Energy]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Rn => "RN",
            Scorer::Msp => "MSP",
            Scorer::Energy => "Energy",
        }
    }

    pub fn parse(s: &str) -> Option<Scorer> {
        match s.to_ascii_lowercase().as_str() {
            "rn" => Some(Scorer::Rn),
            "msp" => Some(Scorer::Msp),
            "energy" => Some(Scorer::Energy),
            _ => None,
        }
    }

    /// Scores one sample from its representation and logits.
    pub fn score<T: Float>(&self, features: &[T], logits: &[T], temperature: f64) -> f64 {
        let v = match self {
            Scorer::Rn => rn_score(features),
            Scorer::Msp => msp_score(logits),
            Scorer::Energy => energy_score(logits, T::from(temperature).expect("temperature")),
        };
        v.to_f64().expect("score representable as f64")
    }

    /// Scores every row of row-major `features` (`D` wide) and `logits` (`C` wide).
    pub fn score_rows<T: Float>(
        &self,
        features: &[T],
        feature_dim: usize,
        logits: &[T],
        num_classes: usize,
        temperature: f64,
    ) -> Vec<f64> {
        features
            .chunks_exact(feature_dim)
            .zip(logits.chunks_exact(num_classes))
            .map(|(f, z)| self.score(f, z, temperature))
            .collect()
    }
}

/// Scores split by ground-truth domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub score_name: String,
    pub id_scores: Vec<f64>,
    /// Class label of each ID sample, when known.
    pub id_labels: Option<Vec<usize>>,
    pub ood_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(score_name: impl Into<String>, id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        let set = Self {
            score_name: score_name.into(),
            id_scores,
            id_labels: None,
            ood_scores,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.id_scores.len() {
            return Err(RnaError::Shape(format!(
                "{} ID scores but {} labels",
                self.id_scores.len(),
                labels.len()
            )));
        }
        self.id_labels = Some(labels);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id_scores.is_empty() {
            return Err(RnaError::Empty("ID scores"));
        }
        if self.ood_scores.is_empty() {
            return Err(RnaError::Empty("OOD scores"));
        }
        if self.id_scores.iter().chain(&self.ood_scores).any(|v| !v.is_finite()) {
            return Err(RnaError::InvalidArgument(format!("{}: scores must be finite", self.score_name)));
        }
        Ok(())
    }

    /// The same scores with the ID and OOD roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            score_name: self.score_name.clone(),
            id_scores: self.ood_scores.clone(),
            id_labels: None,
            ood_scores: self.id_scores.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            score_name: self.score_name.clone(),
            id_scores: self.id_scores.iter().map(|&v| f(v)).collect(),
            id_labels: self.id_labels.clone(),
            ood_scores: self.ood_scores.iter().map(|&v| f(v)).collect(),
        }
    }
}
