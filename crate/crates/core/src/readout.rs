//! Bias-free linear read-out on mixture responsibilities, trained with MSE
//! against one-hot targets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabelSet;
use crate::error::{Error, Result};
use crate::real::Real;

/// Row-major `num_classes x K` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutWeights<T: Real = f32> {
    num_classes: usize,
    k: usize,
    w: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 100,
            epochs: 32,
            seed: 0,
        }
    }
}

impl ReadoutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "read-out learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "read-out batch size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

impl<T: Real> ReadoutWeights<T> {
    pub fn zeros(num_classes: usize, k: usize) -> Self {
        Self {
            num_classes,
            k,
            w: vec![T::zero(); num_classes * k],
        }
    }

    pub fn from_vec(num_classes: usize, k: usize, w: Vec<T>) -> Result<Self> {
        if w.len() != num_classes * k {
            return Err(Error::DimensionMismatch {
                expected: num_classes * k,
                got: w.len(),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite read-out weight".into()));
        }
        Ok(Self { num_classes, k, w })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn as_slice(&self) -> &[T] {
        &self.w
    }

    pub fn scale(&mut self, c: T) {
        self.w.iter_mut().for_each(|v| *v = *v * c);
    }

    fn scores_into(&self, gamma: &[T], out: &mut [T]) {
        for (o, row) in out.iter_mut().zip(self.w.chunks_exact(self.k)) {
            *o = row
                .iter()
                .zip(gamma)
                .fold(T::zero(), |a, (&w, &g)| a + w * g);
        }
    }

    /// Scores `W gamma` and the arg-max class (lowest index on ties).
    pub fn predict(&self, gamma: &[T]) -> Result<(Vec<T>, usize)> {
        if gamma.len() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                got: gamma.len(),
            });
        }
        let mut scores = vec![T::zero(); self.num_classes];
        self.scores_into(gamma, &mut scores);
        let class = crate::gmm::argmax(&scores);
        Ok((scores, class))
    }

    /// Predicted class for every row of a row-major `N x K` matrix.
    pub fn predict_batch(&self, gammas: &[T]) -> Result<Vec<usize>> {
        self.check_rows(gammas)?;
        let mut scores = vec![T::zero(); self.num_classes];
        Ok(gammas
            .chunks_exact(self.k)
            .map(|g| {
                self.scores_into(g, &mut scores);
                crate::gmm::argmax(&scores)
            })
            .collect())
    }

    /// Like [`Self::predict_batch`] but only the listed classes can win; an
    /// empty list allows every class. Classes must be sorted ascending.
    pub fn predict_batch_among(&self, gammas: &[T], classes: &[usize]) -> Result<Vec<usize>> {
        if classes.is_empty() {
            return self.predict_batch(gammas);
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::UnknownClass {
                class: bad,
                num_classes: self.num_classes,
            });
        }
        self.check_rows(gammas)?;
        let mut scores = vec![T::zero(); self.num_classes];
        Ok(gammas
            .chunks_exact(self.k)
            .map(|g| {
                self.scores_into(g, &mut scores);
                let mut best = classes[0];
                for &c in &classes[1..] {
                    if scores[c] > scores[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    fn check_rows(&self, gammas: &[T]) -> Result<usize> {
        if self.k == 0 || !gammas.len().is_multiple_of(self.k) {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                got: gammas.len(),
            });
        }
        Ok(gammas.len() / self.k)
    }

    fn check_labels(&self, labels: &[usize], n: usize) -> Result<()> {
        if labels.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::UnknownClass {
                class: bad,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    /// `(1/N) sum_n |W gamma_n - onehot(y_n)|^2` over selected rows, and its
    /// gradient `(2/N) sum_n (W gamma_n - onehot(y_n)) gamma_n^T`.
    fn loss_grad_rows(
        &self,
        gammas: &[T],
        labels: &[usize],
        rows: impl Iterator<Item = usize>,
        grad: &mut [T],
        scores: &mut [T],
    ) -> f64 {
        grad.iter_mut().for_each(|g| *g = T::zero());
        let mut loss = 0.0;
        let mut n = 0usize;
        for i in rows {
            let g = &gammas[i * self.k..(i + 1) * self.k];
            self.scores_into(g, scores);
            scores[labels[i]] = scores[labels[i]] - T::one();
            for (c, &e) in scores.iter().enumerate() {
                loss += e.f64() * e.f64();
                if e == T::zero() {
                    continue;
                }
                for (gw, &gv) in grad[c * self.k..(c + 1) * self.k].iter_mut().zip(g) {
                    *gw = *gw + e * gv;
                }
            }
            n += 1;
        }
        if n > 0 {
            let f = T::of(2.0 / n as f64);
            grad.iter_mut().for_each(|g| *g = *g * f);
            loss /= n as f64;
        }
        loss
    }

    pub fn mse(&self, gammas: &[T], labels: &[usize]) -> Result<f64> {
        let (loss, _) = self.mse_gradient(gammas, labels)?;
        Ok(loss)
    }

    pub fn mse_gradient(&self, gammas: &[T], labels: &[usize]) -> Result<(f64, Vec<T>)> {
        let n = self.check_rows(gammas)?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        self.check_labels(labels, n)?;
        let mut grad = vec![T::zero(); self.w.len()];
        let mut scores = vec![T::zero(); self.num_classes];
        let loss = self.loss_grad_rows(gammas, labels, 0..n, &mut grad, &mut scores);
        Ok((loss, grad))
    }

    /// Mini-batch SGD on the MSE; returns the mean loss of each epoch.
    pub fn train(
        &mut self,
        gammas: &[T],
        labels: &LabelSet,
        cfg: &ReadoutConfig,
    ) -> Result<Vec<f64>> {
        cfg.validate()?;
        let n = self.check_rows(gammas)?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        self.check_labels(labels.as_slice(), n)?;
        let labels = labels.as_slice();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut grad = vec![T::zero(); self.w.len()];
        let mut scores = vec![T::zero(); self.num_classes];
        let lr = T::of(cfg.learning_rate);
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let l = self.loss_grad_rows(
                    gammas,
                    labels,
                    batch.iter().copied(),
                    &mut grad,
                    &mut scores,
                );
                total += l * batch.len() as f64;
                for (w, &g) in self.w.iter_mut().zip(&grad) {
                    *w = *w - lr * g;
                }
            }
            if self.w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient);
            }
            losses.push(total / n as f64);
        }
        Ok(losses)
    }
}

pub fn train_readout<T: Real>(
    weights: &ReadoutWeights<T>,
    gammas: &[T],
    labels: &LabelSet,
    cfg: &ReadoutConfig,
) -> Result<ReadoutWeights<T>> {
    let mut w = weights.clone();
    w.train(gammas, labels, cfg)?;
    Ok(w)
}
