//! Long-tailed ID splits, auxiliary outliers and mixed training batches.

mod augment;
mod batch;
mod images;
mod longtail;
pub mod synthetic;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

pub use augment::{build_augmented_aux, AugmentedAux};
pub use batch::{compose_batch, BatchStream, TrainingBatch};
pub use images::{crop_resize, CropRect, ImageSet, ImageShape, LabeledImages};
pub use longtail::{
    assign_class_groups, empirical_prior, make_long_tail_counts, subsample_long_tailed,
    ClassGroups, Group, ImbalanceProfile, LongTailSpec,
};

use crate::error::{Result, RnaError};
use crate::scalar::Scalar;

/// All splits for one experiment.
#[derive(Debug, Clone)]
pub struct DatasetBundle<T> {
    pub num_classes: usize,
    pub id_train: LabeledImages<T>,
    pub id_test: LabeledImages<T>,
    pub aux_ood: ImageSet<T>,
    pub ood_tests: BTreeMap<String, ImageSet<T>>,
}

impl<T: Scalar> DatasetBundle<T> {
    /// Checks resolutions agree, labels are in range and the ID test split is class-balanced.
    pub fn new(
        num_classes: usize,
        id_train: LabeledImages<T>,
        id_test: LabeledImages<T>,
        aux_ood: ImageSet<T>,
        ood_tests: BTreeMap<String, ImageSet<T>>,
    ) -> Result<Self> {
        let shape = id_train.shape();
        let shapes_ok = id_test.shape() == shape
            && (aux_ood.is_empty() || aux_ood.shape() == shape)
            && ood_tests.values().all(|s| s.shape() == shape);
        if !shapes_ok {
            return Err(RnaError::Shape("all splits must share one image shape".into()));
        }
        for split in [&id_train, &id_test] {
            if let Some(&y) = split.labels().iter().find(|&&y| y >= num_classes) {
                return Err(RnaError::InvalidArgument(format!(
                    "label {y} outside {num_classes} classes"
                )));
            }
        }
        let test_counts = id_test.class_counts(num_classes);
        if test_counts.windows(2).any(|w| w[0] != w[1]) {
            return Err(RnaError::InvalidArgument(format!(
                "ID test split must be class-balanced, got counts {test_counts:?}"
            )));
        }
        Ok(Self {
            num_classes,
            id_train,
            id_test,
            aux_ood,
            ood_tests,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.id_train.shape()
    }

    pub fn train_counts(&self) -> Vec<usize> {
        self.id_train.class_counts(self.num_classes)
    }

    /// Empirical label frequencies of the training split.
    pub fn prior(&self) -> Result<Vec<f64>> {
        empirical_prior(&self.train_counts())
    }
}

/// Writes one index per line.
pub fn write_index_list<W: Write>(mut w: W, indices: &[usize]) -> std::io::Result<()> {
    for i in indices {
        writeln!(w, "{i}")?;
    }
    Ok(())
}

pub fn read_index_list<R: BufRead>(r: R) -> std::io::Result<Vec<usize>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse().map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{t:?}: {e}"))
        })?);
    }
    Ok(out)
}
