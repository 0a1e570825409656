#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rna_core::data::synthetic::ToySpec;
use rna_core::data::DatasetBundle;
use rna_core::losses::{IdLoss, LossConfig, OodTerm};
use rna_core::model::{ModelBundle, ModelConfig};
use rna_core::scoring::ScoreSet;
use rna_core::training::{train, DiagnosticsSeries, TrainConfig};

/// Pairwise count of `ood > id` plus half the ties.
pub fn auroc_brute(s: &ScoreSet) -> f64 {
    let mut credit = 0.0;
    for &o in &s.ood_scores {
        for &i in &s.id_scores {
            if o > i {
                credit += 1.0;
            } else if o == i {
                credit += 0.5;
            }
        }
    }
    credit / (s.id_scores.len() * s.ood_scores.len()) as f64
}

fn distinct_desc(s: &ScoreSet) -> Vec<f64> {
    let mut t: Vec<f64> = s.id_scores.iter().chain(&s.ood_scores).copied().collect();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

fn count_at_least(v: &[f64], t: f64) -> usize {
    v.iter().filter(|&&x| x >= t).count()
}

/// Enumerates every distinct threshold and sums recall steps times precision.
pub fn aupr_brute(s: &ScoreSet) -> f64 {
    let n_pos = s.ood_scores.len() as f64;
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for t in distinct_desc(s) {
        let tp = count_at_least(&s.ood_scores, t) as f64;
        let fp = count_at_least(&s.id_scores, t) as f64;
        let recall = tp / n_pos;
        if tp > 0.0 {
            area += (recall - prev_recall) * tp / (tp + fp);
        }
        prev_recall = recall;
    }
    area
}

/// Largest OOD score whose `>=` set holds at least `target` of the OOD scores.
pub fn fpr_brute(s: &ScoreSet, target: f64) -> f64 {
    let n = s.ood_scores.len() as f64;
    let best = s
        .ood_scores
        .iter()
        .copied()
        .filter(|&t| count_at_least(&s.ood_scores, t) as f64 / n >= target)
        .fold(f64::NEG_INFINITY, f64::max);
    count_at_least(&s.id_scores, best) as f64 / s.id_scores.len() as f64
}

/// Random score set with at most `max_total` scores; half the draws sit on a
/// coarse grid so ties are common.
pub fn random_scores(rng: &mut ChaCha8Rng, max_total: usize) -> ScoreSet {
    let n_id = rng.random_range(1..max_total / 2 + 1);
    let n_ood = rng.random_range(1..max_total - n_id + 1);
    let tied = rng.random_bool(0.5);
    let shift = rng.random_range(-1.0..2.0);
    let mut draw = |offset: f64| -> f64 {
        if tied {
            (rng.random_range(0..6) as f64 + offset).round()
        } else {
            rng.random_range(0.0..1.0) + offset * 0.5
        }
    };
    let id: Vec<f64> = (0..n_id).map(|_| draw(0.0)).collect();
    let ood: Vec<f64> = (0..n_ood).map(|_| draw(shift)).collect();
    ScoreSet::new("random", id, ood).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn toy(seed: u64) -> (ToySpec, DatasetBundle<f32>) {
    let spec = ToySpec {
        seed,
        ..ToySpec::default()
    };
    let data = spec.build().unwrap();
    (spec, data)
}

pub fn train_toy(
    spec: &ToySpec,
    data: &DatasetBundle<f32>,
    id_loss: IdLoss,
    term: OodTerm,
    b_ood: usize,
    epochs: usize,
) -> (ModelBundle<f32>, DiagnosticsSeries) {
    let mut cfg = TrainConfig::default();
    cfg.loss = LossConfig::with_terms(id_loss, term, 0.5);
    cfg.optim.epochs = epochs;
    cfg.batch_ood = b_ood;
    cfg.shuffle_seed = spec.seed;
    cfg.ood_seed = spec.seed + 1;
    cfg.probe_size = 0;
    let mut model = ModelBundle::new(ModelConfig::small(spec.shape, spec.num_classes), data.prior().unwrap(), 7 + spec.seed).unwrap();
    let series = train(&mut model, data, &cfg).unwrap();
    (model, series)
}
