use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::images::LabeledImages;
use crate::error::{Result, RnaError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImbalanceProfile {
    #[default]
    Exponential,
}

/// How many samples each class keeps in a long-tailed training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub num_classes: usize,
    pub max_count: usize,
    /// Largest class count over smallest class count.
    pub imbalance_ratio: f64,
    #[serde(default)]
    pub profile: ImbalanceProfile,
    #[serde(default)]
    pub seed: u64,
}

/// Per-class counts `N(c) = ⌊max_count · ratio^(-c / (C - 1))⌋`, at least 1.
///
/// Truncation (not rounding) is what yields 12406 for the ten-class `ρ = 100`,
/// `max = 5000` split; the small slack absorbs `powf` error on exact values.
pub fn make_long_tail_counts(spec: &LongTailSpec) -> Result<Vec<usize>> {
    if spec.num_classes < 1 {
        return Err(RnaError::InvalidSpec("num_classes must be at least 1".into()));
    }
    if spec.max_count < 1 {
        return Err(RnaError::InvalidSpec("max_count must be at least 1".into()));
    }
    if !(spec.imbalance_ratio >= 1.0) || !spec.imbalance_ratio.is_finite() {
        return Err(RnaError::InvalidSpec(format!(
            "imbalance ratio must be a finite value >= 1, got {}",
            spec.imbalance_ratio
        )));
    }
    let c = spec.num_classes;
    if c == 1 {
        return Ok(vec![spec.max_count]);
    }
    let ImbalanceProfile::Exponential = spec.profile;
    let counts = (0..c)
        .map(|i| {
            let exponent = -(i as f64) / (c - 1) as f64;
            let n = (spec.max_count as f64 * spec.imbalance_ratio.powf(exponent) + 1e-9).floor();
            (n as usize).max(1)
        })
        .collect();
    Ok(counts)
}

/// Selects exactly `counts[c]` samples of each class, deterministically in `seed`.
///
/// Returns the selected indices into `dataset` (sorted) and the subset itself.
pub fn subsample_long_tailed<T: Scalar>(
    dataset: &LabeledImages<T>,
    counts: &[usize],
    seed: u64,
) -> Result<(Vec<usize>, LabeledImages<T>)> {
    let by_class = dataset.class_indices(counts.len());
    if let Some(&bad) = dataset.labels().iter().find(|&&y| y >= counts.len()) {
        return Err(RnaError::InvalidArgument(format!(
            "label {bad} outside the {} classes given by counts",
            counts.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::with_capacity(counts.iter().sum());
    for (class, (members, &want)) in by_class.iter().zip(counts).enumerate() {
        if want > members.len() {
            return Err(RnaError::InsufficientClass {
                class,
                available: members.len(),
                requested: want,
            });
        }
        let mut members = members.clone();
        members.shuffle(&mut rng);
        selected.extend_from_slice(&members[..want]);
    }
    selected.sort_unstable();
    let subset = dataset.subset(&selected);
    Ok((selected, subset))
}

/// Empirical label frequencies. Every class must be present.
pub fn empirical_prior(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return Err(RnaError::Empty("class counts"));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(RnaError::InvalidPrior(format!("class {c} has no samples")));
    }
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Many/Medium/Few partition by training-count rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassGroups {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl ClassGroups {
    pub fn num_classes(&self) -> usize {
        self.many.len() + self.medium.len() + self.few.len()
    }

    pub fn group_of(&self, class: usize) -> Option<Group> {
        if self.many.contains(&class) {
            Some(Group::Many)
        } else if self.medium.contains(&class) {
            Some(Group::Medium)
        } else if self.few.contains(&class) {
            Some(Group::Few)
        } else {
            None
        }
    }

    pub fn members(&self, group: Group) -> &[usize] {
        match group {
            Group::Many => &self.many,
            Group::Medium => &self.medium,
            Group::Few => &self.few,
        }
    }
}

/// Splits classes, ranked by descending count (ties by index), into blocks of
/// `ceil(C/3)`, `ceil((C - ceil(C/3)) / 2)` and the remainder.
pub fn assign_class_groups(counts: &[usize]) -> Result<ClassGroups> {
    let c = counts.len();
    if c < 3 {
        return Err(RnaError::InvalidArgument(format!(
            "class groups need at least 3 classes, got {c}"
        )));
    }
    let mut ranked: Vec<usize> = (0..c).collect();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let many = c.div_ceil(3);
    let medium = (c - many).div_ceil(2);
    Ok(ClassGroups {
        many: ranked[..many].to_vec(),
        medium: ranked[many..many + medium].to_vec(),
        few: ranked[many + medium..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::images::{ImageSet, ImageShape};

    fn spec(c: usize, max: usize, ratio: f64) -> LongTailSpec {
        LongTailSpec {
            num_classes: c,
            max_count: max,
            imbalance_ratio: ratio,
            profile: ImbalanceProfile::Exponential,
            seed: 0,
        }
    }

    fn toy(per_class: &[usize]) -> LabeledImages<f32> {
        let shape = ImageShape::new(1, 1, 1);
        let mut set = LabeledImages::empty(shape);
        let mut k = 0.0;
        for (c, &n) in per_class.iter().enumerate() {
            for _ in 0..n {
                set.push(&[k], c);
                k += 1.0;
            }
        }
        set
    }

    #[test]
    fn cifar10_lt_total() {
        let counts = make_long_tail_counts(&spec(10, 5000, 100.0)).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 12406);
        assert_eq!(counts[0], 5000);
        assert_eq!(counts[9], 50);
    }

    #[test]
    fn balanced_and_two_class_cases() {
        assert_eq!(make_long_tail_counts(&spec(10, 5000, 1.0)).unwrap(), vec![5000; 10]);
        assert_eq!(make_long_tail_counts(&spec(2, 100, 4.0)).unwrap(), vec![100, 25]);
        assert_eq!(make_long_tail_counts(&spec(1, 7, 50.0)).unwrap(), vec![7]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(matches!(
            make_long_tail_counts(&spec(10, 100, 0.5)),
            Err(RnaError::InvalidSpec(_))
        ));
        assert!(matches!(
            make_long_tail_counts(&spec(0, 100, 2.0)),
            Err(RnaError::InvalidSpec(_))
        ));
        assert!(make_long_tail_counts(&spec(3, 100, f64::NAN)).is_err());
    }

    #[test]
    fn counts_floor_at_one() {
        let counts = make_long_tail_counts(&spec(5, 10, 1000.0)).unwrap();
        assert_eq!(*counts.last().unwrap(), 1);
        assert!(counts.iter().all(|&n| n >= 1));
    }

    #[test]
    fn subsample_identity_when_counts_are_full() {
        let set = toy(&[3, 2]);
        let (idx, sub) = subsample_long_tailed(&set, &[3, 2], 9).unwrap();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        assert_eq!(sub, set);
    }

    #[test]
    fn subsample_is_deterministic() {
        let set = toy(&[4, 4]);
        let (a, _) = subsample_long_tailed(&set, &[2, 1], 42).unwrap();
        let (b, _) = subsample_long_tailed(&set, &[2, 1], 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn subsample_reports_the_short_class() {
        let set = toy(&[4, 1]);
        let err = subsample_long_tailed(&set, &[2, 3], 0).unwrap_err();
        assert_eq!(
            err,
            RnaError::InsufficientClass {
                class: 1,
                available: 1,
                requested: 3
            }
        );
        assert!(err.to_string().contains("class 1"));
    }

    #[test]
    fn subsample_histogram_matches_long_tail_counts() {
        let counts = make_long_tail_counts(&spec(10, 500, 100.0)).unwrap();
        let set = toy(&[500; 10]);
        let (_, sub) = subsample_long_tailed(&set, &counts, 3).unwrap();
        assert_eq!(sub.class_counts(10), counts);
    }

    #[test]
    fn groups_even_split() {
        let counts: Vec<usize> = (0..9).rev().map(|i| 10 * (i + 1)).collect();
        let g = assign_class_groups(&counts).unwrap();
        assert_eq!(g.many, vec![0, 1, 2]);
        assert_eq!(g.medium, vec![3, 4, 5]);
        assert_eq!(g.few, vec![6, 7, 8]);
    }

    #[test]
    fn groups_ten_classes() {
        let counts = make_long_tail_counts(&spec(10, 5000, 100.0)).unwrap();
        let g = assign_class_groups(&counts).unwrap();
        assert_eq!(g.many.len(), 4);
        assert_eq!(g.medium.len(), 3);
        assert_eq!(g.few, vec![7, 8, 9]);
    }

    #[test]
    fn groups_ties_fall_back_to_index_order() {
        let g = assign_class_groups(&[5; 9]).unwrap();
        assert_eq!(g.few, vec![6, 7, 8]);
        assert_eq!(g.group_of(0), Some(Group::Many));
        assert!(assign_class_groups(&[1, 2]).is_err());
    }

    #[test]
    fn groups_follow_counts_not_index() {
        let g = assign_class_groups(&[1, 9, 5, 7, 3, 8]).unwrap();
        assert_eq!(g.many, vec![1, 5]);
        assert_eq!(g.medium, vec![3, 2]);
        assert_eq!(g.few, vec![4, 0]);
    }

    #[test]
    fn prior_needs_every_class() {
        let p = empirical_prior(&[3, 1]).unwrap();
        assert_eq!(p, vec![0.75, 0.25]);
        assert!(empirical_prior(&[3, 0]).is_err());
    }

    #[test]
    fn unlabeled_sets_have_no_labels() {
        // Type-level: ImageSet carries no labels at all.
        let set: ImageSet<f32> = ImageSet::empty(ImageShape::new(1, 2, 2));
        assert!(set.is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ratio_one_is_balanced(c in 1usize..50, max in 1usize..10_000) {
                let counts = make_long_tail_counts(&spec(c, max, 1.0)).unwrap();
                prop_assert!(counts.iter().all(|&n| n == max));
            }

            #[test]
            fn larger_ratio_never_raises_min(c in 2usize..30, max in 1usize..5000,
                                             r1 in 1.0f64..500.0, dr in 0.0f64..500.0) {
                let a = make_long_tail_counts(&spec(c, max, r1)).unwrap();
                let b = make_long_tail_counts(&spec(c, max, r1 + dr)).unwrap();
                prop_assert!(b.iter().min() <= a.iter().min());
                prop_assert!(a.windows(2).all(|w| w[0] >= w[1]));
            }

            #[test]
            fn ratio_holds_when_exact(c in 2usize..12, k in 1usize..8) {
                // max_count = ratio * min when ratio divides max_count
                let ratio = (k * k) as f64;
                let max = 100 * k * k;
                let counts = make_long_tail_counts(&spec(c, max, ratio)).unwrap();
                prop_assert_eq!(counts[0], max);
                prop_assert_eq!(*counts.last().unwrap(), 100);
            }

            #[test]
            fn groups_partition_by_rank(counts in proptest::collection::vec(1usize..1000, 3..40)) {
                let g = assign_class_groups(&counts).unwrap();
                let mut all: Vec<usize> = g.many.iter().chain(&g.medium).chain(&g.few).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..counts.len()).collect::<Vec<_>>());
                let max_few = g.few.iter().map(|&i| counts[i]).max().unwrap();
                let min_med = g.medium.iter().map(|&i| counts[i]).min().unwrap();
                let max_med = g.medium.iter().map(|&i| counts[i]).max().unwrap();
                let min_many = g.many.iter().map(|&i| counts[i]).min().unwrap();
                prop_assert!(max_few <= min_med && max_med <= min_many);
            }
        }
    }
}
