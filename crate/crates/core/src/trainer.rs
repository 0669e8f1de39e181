//! Desk-scale local training: multinomial logistic regression with
//! minibatch SGD on synthetic Gaussian blobs.
//!
//! Parameters travel as one flat vector: the `dim x classes` weight matrix
//! in row-major order followed by the `classes` biases.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("training diverged: non-finite loss or gradient")]
    Diverged,
    #[error("non-finite activations during evaluation")]
    NonFinite,
    #[error("empty dataset")]
    Empty,
    #[error("invalid hyperparameters: {0}")]
    HyperParams(&'static str),
    #[error("invalid dataset request: {0}")]
    Dataset(String),
    #[error("parameter vector has {got} elements, model expects {expected}")]
    WrongLength { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub dim: usize,
    pub classes: usize,
}

impl ModelShape {
    pub fn new(dim: usize, classes: usize) -> Self {
        Self { dim, classes }
    }

    pub fn param_count(&self) -> usize {
        self.dim * self.classes + self.classes
    }

    pub fn zeros(&self) -> Vec<f32> {
        vec![0.0; self.param_count()]
    }
}

/// Structured view of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub shape: ModelShape,
    /// `weights[i][j]`: input feature `i` to class `j`.
    pub weights: Vec<Vec<f32>>,
    pub bias: Vec<f32>,
}

impl Model {
    pub fn from_flat(shape: ModelShape, flat: &[f32]) -> Result<Self, TrainError> {
        if flat.len() != shape.param_count() {
            return Err(TrainError::WrongLength {
                got: flat.len(),
                expected: shape.param_count(),
            });
        }
        let (w, b) = flat.split_at(shape.dim * shape.classes);
        Ok(Self {
            shape,
            weights: w.chunks(shape.classes).map(<[f32]>::to_vec).collect(),
            bias: b.to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.weights
            .iter()
            .flatten()
            .chain(&self.bias)
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: ModelShape,
    /// Row-major `len x dim` features.
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    /// Owning client of each sample.
    pub partition: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> (&[f32], usize) {
        let d = self.shape.dim;
        (&self.features[i * d..(i + 1) * d], self.labels[i] as usize)
    }

    /// Samples owned by `client`, in dataset order.
    pub fn shard(&self, client: u32) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.partition[i] == client).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.shape.dim);
        for &i in idx {
            features.extend_from_slice(self.sample(i).0);
        }
        Dataset {
            shape: self.shape,
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            partition: idx.iter().map(|&i| self.partition[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub epochs: usize,
    pub batch: usize,
    pub eta: f32,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch: 50,
            eta: 0.1,
            rounds: 20,
            seed: 0,
        }
    }
}

impl HyperParams {
    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch == 0 || self.rounds == 0 {
            return Err(TrainError::HyperParams("epochs, batch and rounds must be at least 1"));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(TrainError::HyperParams("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Distance between class means, in standard deviations, is twice this.
pub const BLOB_SEPARATION: f64 = 3.0;

/// Unit-variance Gaussian blobs centred on the scaled standard simplex:
/// class `j` has mean `sqrt(2) * BLOB_SEPARATION * e_j`. Labels are
/// balanced, samples shuffled, then split into `n_clients` equal shards.
pub fn gen_synthetic(
    seed: u64,
    n: usize,
    dim: usize,
    classes: usize,
    n_clients: usize,
) -> Result<Dataset, TrainError> {
    if n_clients == 0 || !n.is_multiple_of(n_clients) {
        return Err(TrainError::Dataset(format!(
            "{n} samples do not split evenly across {n_clients} clients"
        )));
    }
    if classes == 0 || classes > dim {
        return Err(TrainError::Dataset(format!(
            "need 1 <= classes <= dim, got {classes} classes in {dim} dimensions"
        )));
    }
    let scale = (std::f64::consts::SQRT_2 * BLOB_SEPARATION) as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for &i in &order {
        let label = i % classes;
        for k in 0..dim {
            let noise: f32 = StandardNormal.sample(&mut rng);
            features.push(if k == label { scale + noise } else { noise });
        }
        labels.push(label as u32);
    }
    let per = n / n_clients;
    Ok(Dataset {
        shape: ModelShape::new(dim, classes),
        features,
        labels,
        partition: (0..n).map(|i| (i / per) as u32).collect(),
    })
}

fn logits(w: &[f32], shape: ModelShape, x: &[f32], out: &mut [f64]) {
    let c = shape.classes;
    let bias = &w[shape.dim * c..];
    for (o, b) in out.iter_mut().zip(bias) {
        *o = *b as f64;
    }
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * c..(i + 1) * c];
        let xi = xi as f64;
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij as f64;
        }
    }
}

/// In-place softmax; returns log of the normalizer.
fn softmax(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Mean cross-entropy over `idx` and its gradient with respect to `w`.
pub fn loss_and_grad(w: &[f32], data: &Dataset, idx: &[usize]) -> (f64, Vec<f64>) {
    let shape = data.shape;
    let c = shape.classes;
    let mut grad = vec![0.0f64; shape.param_count()];
    let mut z = vec![0.0f64; c];
    let mut loss = 0.0;
    for &s in idx {
        let (x, y) = data.sample(s);
        logits(w, shape, x, &mut z);
        let zy = z[y];
        let lse = softmax(&mut z);
        loss += lse - zy;
        z[y] -= 1.0;
        for (i, &xi) in x.iter().enumerate() {
            let xi = xi as f64;
            for (g, &dz) in grad[i * c..(i + 1) * c].iter_mut().zip(&z) {
                *g += xi * dz;
            }
        }
        for (g, &dz) in grad[shape.dim * c..].iter_mut().zip(&z) {
            *g += dz;
        }
    }
    let m = idx.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    (loss / m, grad)
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

/// Runs `hp.epochs` epochs of minibatch SGD from `w`. Epoch `e` shuffles
/// with stream `epoch_base + e` of the `hp.seed` generator, so chaining
/// calls with increasing bases reproduces one long run.
pub fn client_update(
    w: &[f32],
    shard: &Dataset,
    hp: &HyperParams,
    epoch_base: u64,
) -> Result<Vec<f32>, TrainError> {
    hp.validate()?;
    if shard.is_empty() {
        return Err(TrainError::Empty);
    }
    if w.len() != shard.shape.param_count() {
        return Err(TrainError::WrongLength {
            got: w.len(),
            expected: shard.shape.param_count(),
        });
    }
    if !w.iter().all(|v| v.is_finite()) {
        return Err(TrainError::Diverged);
    }
    let mut w = w.to_vec();
    let mut order: Vec<usize> = Vec::with_capacity(shard.len());
    for e in 0..hp.epochs as u64 {
        order.clear();
        order.extend(0..shard.len());
        order.shuffle(&mut epoch_rng(hp.seed, epoch_base + e));
        for batch in order.chunks(hp.batch) {
            let (loss, grad) = loss_and_grad(&w, shard, batch);
            if !loss.is_finite() || !grad.iter().all(|g| g.is_finite()) {
                return Err(TrainError::Diverged);
            }
            for (wi, g) in w.iter_mut().zip(&grad) {
                *wi -= hp.eta * *g as f32;
            }
            if !w.iter().all(|v| v.is_finite()) {
                return Err(TrainError::Diverged);
            }
        }
    }
    Ok(w)
}

/// `total_epochs` epochs over the whole dataset, batch order matching
/// repeated [`client_update`] calls on a single shard.
pub fn train_centralized(
    w: &[f32],
    data: &Dataset,
    hp: &HyperParams,
    total_epochs: usize,
) -> Result<Vec<f32>, TrainError> {
    let hp = HyperParams {
        epochs: total_epochs,
        ..*hp
    };
    client_update(w, data, &hp, 0)
}

/// Which of `n` clients train in `round` when a fraction of them is
/// selected: `max(floor(fraction * n), 1)` distinct clients, seeded.
pub fn select_clients(seed: u64, round: u64, n: usize, fraction: f64) -> Vec<bool> {
    let mut chosen = vec![false; n];
    if fraction >= 1.0 {
        chosen.iter_mut().for_each(|c| *c = true);
        return chosen;
    }
    let m = ((fraction * n as f64).floor() as usize).clamp(1, n);
    let mut rng = epoch_rng(seed, round);
    for i in rand::seq::index::sample(&mut rng, n, m) {
        chosen[i] = true;
    }
    chosen
}

/// Mean cross-entropy and accuracy of `w` on `data`.
pub fn evaluate(w: &[f32], data: &Dataset) -> Result<(f64, f64), TrainError> {
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    let shape = data.shape;
    if w.len() != shape.param_count() {
        return Err(TrainError::WrongLength {
            got: w.len(),
            expected: shape.param_count(),
        });
    }
    let mut z = vec![0.0f64; shape.classes];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in 0..data.len() {
        let (x, y) = data.sample(s);
        logits(w, shape, x, &mut z);
        if !z.iter().all(|v| v.is_finite()) {
            return Err(TrainError::NonFinite);
        }
        let pred = z
            .iter()
            .enumerate()
            .fold(0, |best, (j, &v)| if v > z[best] { j } else { best });
        if pred == y {
            correct += 1;
        }
        let zy = z[y];
        loss += softmax(&mut z) - zy;
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}
