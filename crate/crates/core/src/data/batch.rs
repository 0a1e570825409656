use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::images::{ImageSet, ImageShape, LabeledImages};
use crate::error::{Result, RnaError};
use crate::scalar::Scalar;

/// One training step's input: labeled ID rows followed by unlabeled OOD rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch<T> {
    pub shape: ImageShape,
    pub id_inputs: Vec<T>,
    pub id_labels: Vec<usize>,
    pub ood_inputs: Vec<T>,
}

impl<T: Scalar> TrainingBatch<T> {
    pub fn new(
        shape: ImageShape,
        id_inputs: Vec<T>,
        id_labels: Vec<usize>,
        ood_inputs: Vec<T>,
    ) -> Result<Self> {
        let n = shape.numel();
        if id_labels.is_empty() {
            return Err(RnaError::InvalidArgument("a batch needs at least one ID row".into()));
        }
        if id_inputs.len() != id_labels.len() * n || ood_inputs.len() % n != 0 {
            return Err(RnaError::Shape("batch inputs do not match the image shape".into()));
        }
        Ok(Self {
            shape,
            id_inputs,
            id_labels,
            ood_inputs,
        })
    }

    pub fn b_id(&self) -> usize {
        self.id_labels.len()
    }

    pub fn b_ood(&self) -> usize {
        self.ood_inputs.len() / self.shape.numel()
    }

    /// Same ID rows, no OOD rows.
    pub fn without_ood(&self) -> Self {
        Self {
            ood_inputs: Vec::new(),
            ..self.clone()
        }
    }
}

/// Pulls exactly `b_id` labeled and `b_ood` unlabeled samples.
///
/// Returns `Ok(None)` when the ID iterator runs out before `b_id` samples
/// (the partial batch is dropped).
pub fn compose_batch<'a, T, I, O>(
    shape: ImageShape,
    id_iter: &mut I,
    ood_iter: Option<&mut O>,
    b_id: usize,
    b_ood: usize,
) -> Result<Option<TrainingBatch<T>>>
where
    T: Scalar,
    I: Iterator<Item = (&'a [T], usize)>,
    O: Iterator<Item = &'a [T]>,
{
    if b_id == 0 {
        return Err(RnaError::InvalidArgument("b_id must be positive".into()));
    }
    let n = shape.numel();
    let mut id_inputs = Vec::with_capacity(b_id * n);
    let mut id_labels = Vec::with_capacity(b_id);
    for _ in 0..b_id {
        match id_iter.next() {
            Some((img, y)) => {
                id_inputs.extend_from_slice(img);
                id_labels.push(y);
            }
            None => return Ok(None),
        }
    }
    let mut ood_inputs = Vec::with_capacity(b_ood * n);
    if b_ood > 0 {
        let ood = ood_iter.ok_or(RnaError::MissingOodRows)?;
        for _ in 0..b_ood {
            let img = ood.next().ok_or(RnaError::Empty("auxiliary OOD stream"))?;
            ood_inputs.extend_from_slice(img);
        }
    }
    TrainingBatch::new(shape, id_inputs, id_labels, ood_inputs).map(Some)
}

fn seeded_permutation(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Deterministic batch schedule over an ID split and an auxiliary OOD set.
///
/// The ID order is reshuffled every epoch; the auxiliary stream is shuffled
/// per pass and cycles on its own, independent of ID epoch boundaries. The
/// batch sequence is a pure function of the seeds and the epoch.
#[derive(Debug, Clone)]
pub struct BatchStream<'a, T> {
    id: &'a LabeledImages<T>,
    ood: Option<&'a ImageSet<T>>,
    pub b_id: usize,
    pub b_ood: usize,
    id_seed: u64,
    ood_seed: u64,
}

impl<'a, T: Scalar> BatchStream<'a, T> {
    pub fn new(
        id: &'a LabeledImages<T>,
        ood: Option<&'a ImageSet<T>>,
        b_id: usize,
        b_ood: usize,
        id_seed: u64,
        ood_seed: u64,
    ) -> Result<Self> {
        if b_id == 0 {
            return Err(RnaError::InvalidArgument("b_id must be positive".into()));
        }
        if id.len() < b_id {
            return Err(RnaError::InvalidArgument(format!(
                "ID split has {} samples, fewer than one batch of {b_id}",
                id.len()
            )));
        }
        if b_ood > 0 && ood.is_none_or(|o| o.is_empty()) {
            return Err(RnaError::MissingOodRows);
        }
        Ok(Self {
            id,
            ood,
            b_id,
            b_ood,
            id_seed,
            ood_seed,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.id.len() / self.b_id
    }

    /// Shuffled ID sample order for `epoch`.
    pub fn id_order(&self, epoch: usize) -> Vec<usize> {
        seeded_permutation(self.id.len(), self.id_seed, epoch as u64)
    }

    /// All full batches of `epoch`, in order.
    pub fn epoch(&self, epoch: usize) -> Result<Vec<TrainingBatch<T>>> {
        let order = self.id_order(epoch);
        let mut id_iter = order
            .iter()
            .map(|&i| (self.id.images.image(i), self.id.labels()[i]));
        let first_draw = epoch * self.steps_per_epoch() * self.b_ood;
        let mut ood_iter = self.ood.map(|set| OodCycle::new(set, self.ood_seed, first_draw));
        let mut batches = Vec::with_capacity(self.steps_per_epoch());
        while let Some(b) = compose_batch(
            self.id.shape(),
            &mut id_iter,
            ood_iter.as_mut(),
            self.b_id,
            self.b_ood,
        )? {
            batches.push(b);
        }
        Ok(batches)
    }
}

/// Endless shuffled pass over an unlabeled set, reshuffled on every cycle.
struct OodCycle<'a, T> {
    set: &'a ImageSet<T>,
    seed: u64,
    draw: usize,
    cycle: usize,
    order: Vec<usize>,
}

impl<'a, T: Scalar> OodCycle<'a, T> {
    fn new(set: &'a ImageSet<T>, seed: u64, first_draw: usize) -> Self {
        let n = set.len().max(1);
        let cycle = first_draw / n;
        Self {
            set,
            seed,
            draw: first_draw,
            cycle,
            order: seeded_permutation(set.len(), seed, cycle as u64),
        }
    }
}

impl<'a, T: Scalar> Iterator for OodCycle<'a, T> {
    type Item = &'a [T];

    fn next(&mut self) -> Option<Self::Item> {
        let n = self.set.len();
        if n == 0 {
            return None;
        }
        let cycle = self.draw / n;
        if cycle != self.cycle {
            self.cycle = cycle;
            self.order = seeded_permutation(n, self.seed, cycle as u64);
        }
        let idx = self.order[self.draw % n];
        self.draw += 1;
        Some(self.set.image(idx))
    }
}
