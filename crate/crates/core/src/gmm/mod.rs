//! Diagonal-covariance Gaussian mixture trained by SGD.
//!
//! Weights are a softmax over free logits and standard deviations are the
//! exponential of free log-stddevs, so the simplex and positivity constraints
//! hold by construction. Components sit on a `side x side` grid; during
//! training the responsibilities are smoothed over that grid with a Gaussian
//! kernel of radius `r`, which shrinks as the loss plateaus (annealing).

pub(crate) mod checkpoint;
mod grid;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use grid::{smoothed_responsibilities, GridSmoother, KernelNorm};
pub use train::{
    anneal_update, fit, fit_batches, loss_and_gradient, plateaued, sgd_step, AnnealMode,
    AnnealingState, BatchPlan, FitError, Gradient, StopReason, TrainConfig, TrainingLog,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::ImageSet;
use crate::error::{Error, Result};
use crate::real::{log_sum_exp, Real};

pub const DEFAULT_STDDEV_FLOOR: f64 = 0.01;
pub const INIT_STDDEV: f64 = 0.3;
pub const INIT_NOISE: f64 = 0.01;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams<T: Real = f32> {
    k: usize,
    dim: usize,
    grid_side: usize,
    stddev_floor: T,
    seed: u64,
    weight_logits: Vec<T>,
    centroids: Vec<T>,
    log_stddevs: Vec<T>,
}

pub fn grid_side(k: usize) -> Result<usize> {
    let side = (k as f64).sqrt().round() as usize;
    if k == 0 || side * side != k {
        return Err(Error::NonSquareK(k));
    }
    Ok(side)
}

impl<T: Real> GmmParams<T> {
    /// Uniform weights, centroids at the batch mean plus uniform noise in
    /// `[-0.01, 0.01]`, every stddev 0.3.
    pub fn init(k: usize, dim: usize, seed: u64, init_batch: &ImageSet) -> Result<Self> {
        let side = grid_side(k)?;
        if init_batch.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: init_batch.dim(),
            });
        }
        if init_batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mean = init_batch.mean();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids = Vec::with_capacity(k * dim);
        for _ in 0..k {
            for &m in &mean {
                centroids.push(T::of(m + rng.random_range(-INIT_NOISE..=INIT_NOISE)));
            }
        }
        Ok(Self {
            k,
            dim,
            grid_side: side,
            stddev_floor: T::of(DEFAULT_STDDEV_FLOOR),
            seed,
            weight_logits: vec![T::zero(); k],
            centroids,
            log_stddevs: vec![T::of(INIT_STDDEV.ln()); k * dim],
        })
    }

    pub fn from_parts(
        k: usize,
        dim: usize,
        weight_logits: Vec<T>,
        centroids: Vec<T>,
        log_stddevs: Vec<T>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::NonSquareK(0));
        }
        // non-square mixtures can be evaluated but not smoothed
        let side = grid_side(k).unwrap_or(0);
        for (got, expected) in [
            (weight_logits.len(), k),
            (centroids.len(), k * dim),
            (log_stddevs.len(), k * dim),
        ] {
            if got != expected {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        let mut p = Self {
            k,
            dim,
            grid_side: side,
            stddev_floor: T::of(DEFAULT_STDDEV_FLOOR),
            seed: 0,
            weight_logits,
            centroids,
            log_stddevs,
        };
        p.apply_floor();
        Ok(p)
    }

    pub fn with_stddev_floor(mut self, floor: T) -> Self {
        self.stddev_floor = floor;
        self.apply_floor();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn stddev_floor(&self) -> T {
        self.stddev_floor
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weight_logits(&self) -> &[T] {
        &self.weight_logits
    }

    pub fn centroids(&self) -> &[T] {
        &self.centroids
    }

    pub fn log_stddevs(&self) -> &[T] {
        &self.log_stddevs
    }

    pub fn centroid(&self, k: usize) -> &[T] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    pub fn log_stddev(&self, k: usize) -> &[T] {
        &self.log_stddevs[k * self.dim..(k + 1) * self.dim]
    }

    /// Grid coordinate `(row, col)` of component `k`; `None` off-grid.
    pub fn grid_coord(&self, k: usize) -> Option<(usize, usize)> {
        if self.grid_side == 0 || k >= self.k {
            return None;
        }
        Some((k / self.grid_side, k % self.grid_side))
    }

    pub(crate) fn check_smoothable(&self, r: f64) -> Result<()> {
        if self.grid_side == 0 && r > 0.0 {
            return Err(Error::NonSquareK(self.k));
        }
        Ok(())
    }

    /// Component weights `pi = softmax(logits)`.
    pub fn weights(&self) -> Vec<T> {
        let lse = log_sum_exp(&self.weight_logits);
        self.weight_logits
            .iter()
            .map(|&l| (l - lse).exp())
            .collect()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [T], &mut [T], &mut [T]) {
        (
            &mut self.weight_logits,
            &mut self.centroids,
            &mut self.log_stddevs,
        )
    }

    pub(crate) fn apply_floor(&mut self) {
        let floor = self.stddev_floor.ln();
        for s in &mut self.log_stddevs {
            if *s < floor {
                *s = floor;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> GmmParams<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::of(x.f64())).collect::<Vec<U>>();
        GmmParams {
            k: self.k,
            dim: self.dim,
            grid_side: self.grid_side,
            stddev_floor: U::of(self.stddev_floor.f64()),
            seed: self.seed,
            weight_logits: conv(&self.weight_logits),
            centroids: conv(&self.centroids),
            log_stddevs: conv(&self.log_stddevs),
        }
    }

    pub fn evaluator(&self) -> Evaluator<'_, T> {
        Evaluator::new(self)
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }

    /// `log sum_k pi_k N(x; mu_k, Sigma_k)`.
    pub fn log_density(&self, x: &[T]) -> Result<T> {
        self.check_dim(x.len())?;
        let ev = self.evaluator();
        let mut terms = vec![T::zero(); self.k];
        Ok(ev.log_terms(x, &mut terms))
    }

    /// Posterior component probabilities for `x`.
    pub fn responsibilities(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_dim(x.len())?;
        let ev = self.evaluator();
        let mut out = vec![T::zero(); self.k];
        ev.responsibilities_into(x, &mut out);
        Ok(out)
    }

    /// Mean negative log-likelihood over a batch.
    pub fn batch_loss(&self, batch: &ImageSet) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.check_dim(batch.dim())?;
        let ev = self.evaluator();
        let mut terms = vec![T::zero(); self.k];
        let mut row = Vec::with_capacity(self.dim);
        let mut total = 0.0f64;
        for x in batch.rows() {
            convert_row(x, &mut row);
            total -= ev.log_terms(&row, &mut terms).f64();
        }
        Ok(total / batch.count() as f64)
    }

    /// Responsibilities for every row, row-major `count x K`.
    pub fn batch_responsibilities(&self, batch: &ImageSet) -> Result<Vec<T>> {
        self.check_dim(batch.dim())?;
        let ev = self.evaluator();
        let mut out = vec![T::zero(); batch.count() * self.k];
        let mut row = Vec::with_capacity(self.dim);
        for (x, o) in batch.rows().zip(out.chunks_exact_mut(self.k)) {
            convert_row(x, &mut row);
            ev.responsibilities_into(&row, o);
        }
        Ok(out)
    }

    /// Index of the component with the highest responsibility for `x`.
    pub fn best_matching_component(&self, x: &[T]) -> Result<usize> {
        let g = self.responsibilities(x)?;
        Ok(argmax(&g))
    }
}

pub(crate) fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn convert_row<T: Real>(x: &[f32], out: &mut Vec<T>) {
    out.clear();
    out.extend(x.iter().map(|&v| T::of_f32(v)));
}

/// Per-step cache of precisions and log normalizers.
pub struct Evaluator<'a, T: Real> {
    params: &'a GmmParams<T>,
    precisions: Vec<T>,
    log_norms: Vec<T>,
}

impl<'a, T: Real> Evaluator<'a, T> {
    pub fn new(params: &'a GmmParams<T>) -> Self {
        let precisions = params.log_stddevs.iter().map(|&s| (-s).exp()).collect();
        let lse = log_sum_exp(&params.weight_logits);
        let const_term = T::of(HALF_LN_2PI * params.dim as f64);
        let log_norms = (0..params.k)
            .map(|k| {
                let sum_s = params.log_stddev(k).iter().fold(T::zero(), |a, &s| a + s);
                params.weight_logits[k] - lse - sum_s - const_term
            })
            .collect();
        Self {
            params,
            precisions,
            log_norms,
        }
    }

    pub fn params(&self) -> &GmmParams<T> {
        self.params
    }

    pub fn precision(&self, k: usize) -> &[T] {
        let d = self.params.dim;
        &self.precisions[k * d..(k + 1) * d]
    }

    /// Fills `out[k] = log pi_k + log N(x; k)` and returns their log-sum-exp.
    pub fn log_terms(&self, x: &[T], out: &mut [T]) -> T {
        let d = self.params.dim;
        let half = T::of(0.5);
        for (k, o) in out.iter_mut().enumerate() {
            let mu = &self.params.centroids[k * d..(k + 1) * d];
            let prec = &self.precisions[k * d..(k + 1) * d];
            *o = self.log_norms[k] - half * weighted_sq_dist(x, mu, prec);
        }
        log_sum_exp(out)
    }

    /// Writes responsibilities into `out` and returns `log p(x)`.
    pub fn responsibilities_into(&self, x: &[T], out: &mut [T]) -> T {
        let lse = self.log_terms(x, out);
        // below this the exponential is subnormal or zero
        let cutoff = T::min_positive_value().ln();
        for v in out.iter_mut() {
            let d = *v - lse;
            *v = if d < cutoff { T::zero() } else { d.exp() };
        }
        lse
    }
}

/// `sum_d ((x_d - mu_d) * prec_d)^2` with eight independent accumulators.
#[inline]
pub(crate) fn weighted_sq_dist<T: Real>(x: &[T], mu: &[T], prec: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let mc = mu.chunks_exact(8);
    let pc = prec.chunks_exact(8);
    let (xr, mr, pr) = (xc.remainder(), mc.remainder(), pc.remainder());
    for ((xs, ms), ps) in xc.zip(mc).zip(pc) {
        for l in 0..8 {
            let z = (xs[l] - ms[l]) * ps[l];
            acc[l] = acc[l] + z * z;
        }
    }
    for ((&xv, &mv), &pv) in xr.iter().zip(mr).zip(pr) {
        let z = (xv - mv) * pv;
        acc[0] = acc[0] + z * z;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_d(means: &[f64], sigma: f64) -> GmmParams<f64> {
        let k = means.len();
        GmmParams::from_parts(k, 1, vec![0.0; k], means.to_vec(), vec![sigma.ln(); k]).unwrap()
    }

    #[test]
    fn init_lays_out_square_grid() {
        let batch = ImageSet::new(vec![0.5; 784 * 3], 784).unwrap();
        let p = GmmParams::<f32>::init(400, 784, 1, &batch).unwrap();
        assert_eq!(p.grid_side(), 20);
        assert_eq!(p.k(), 400);
        assert!(p.centroids().iter().all(|&c| (c - 0.5).abs() <= 0.0100001));
        assert!(p
            .log_stddevs()
            .iter()
            .all(|&s| (s.exp() - 0.3).abs() < 1e-6));
    }

    #[test]
    fn single_component_weight_is_one() {
        let batch = ImageSet::new(vec![0.2, 0.4], 2).unwrap();
        let p = GmmParams::<f64>::init(1, 2, 0, &batch).unwrap();
        assert_eq!(p.weights(), vec![1.0]);
    }

    #[test]
    fn non_square_k_rejected() {
        let batch = ImageSet::new(vec![0.2], 1).unwrap();
        assert!(matches!(
            GmmParams::<f32>::init(5, 1, 0, &batch),
            Err(Error::NonSquareK(5))
        ));
    }

    #[test]
    fn init_dimension_mismatch() {
        let batch = ImageSet::new(vec![0.2, 0.1], 2).unwrap();
        assert!(matches!(
            GmmParams::<f32>::init(4, 3, 0, &batch),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn standard_normal_at_mode() {
        let p = one_d(&[0.0], 1.0);
        assert_abs_diff_eq!(
            p.log_density(&[0.0]).unwrap(),
            -0.918_938_533,
            epsilon = 1e-6
        );
    }

    #[test]
    fn two_component_density_matches_hand_sum() {
        // oracle: 0.5 * phi(1) + 0.5 * phi(-1) = phi(1)
        let oracle = (0.5 * (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt() * 2.0).ln();
        let p = one_d(&[-1.0, 1.0], 1.0);
        let got = p.log_density(&[0.0]).unwrap();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(got, -1.418_939, epsilon = 1e-6);
    }

    #[test]
    fn far_point_is_finite() {
        let p = one_d(&[0.0, 1.0], 0.01);
        let v = p.log_density(&[1e4]).unwrap();
        assert!(v.is_finite() && v < -1e10);
    }

    #[test]
    fn batch_loss_is_mean_nll() {
        let p = one_d(&[-1.0, 1.0], 1.0);
        let one = ImageSet::new(vec![0.0], 1).unwrap();
        let two = ImageSet::new(vec![0.0, 0.0], 1).unwrap();
        let l1 = p.batch_loss(&one).unwrap();
        assert_abs_diff_eq!(l1, 1.418_939, epsilon = 1e-6);
        assert_eq!(l1, p.batch_loss(&two).unwrap());
        assert!(matches!(
            p.batch_loss(&ImageSet::empty(1)),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn responsibilities_examples() {
        assert_eq!(
            one_d(&[0.3], 1.0).responsibilities(&[0.0]).unwrap(),
            vec![1.0]
        );
        let sym = one_d(&[-1.0, 1.0], 1.0).responsibilities(&[0.0]).unwrap();
        assert_abs_diff_eq!(sym[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(sym[1], 0.5, epsilon = 1e-15);
        // oracle: exp(0) / (exp(0) + exp(-2))
        let g = one_d(&[0.0, 2.0], 1.0).responsibilities(&[0.0]).unwrap();
        assert_abs_diff_eq!(g[0], 1.0 / (1.0 + (-2.0f64).exp()), epsilon = 1e-12);
        assert_abs_diff_eq!(g[0], 0.880_797, epsilon = 1e-6);
    }

    #[test]
    fn dimension_mismatch_on_query() {
        let p = one_d(&[0.0], 1.0);
        assert!(matches!(
            p.responsibilities(&[0.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn floor_applied_on_construction() {
        let p = GmmParams::<f64>::from_parts(1, 2, vec![0.0], vec![0.0, 0.0], vec![-50.0, 0.0])
            .unwrap();
        assert_abs_diff_eq!(p.log_stddevs()[0], 0.01f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn sq_dist_tail_handled() {
        let x: Vec<f64> = (0..13).map(|i| i as f64 * 0.1).collect();
        let mu = vec![0.05; 13];
        let prec = vec![2.0; 13];
        let direct: f64 = x.iter().map(|v| ((v - 0.05) * 2.0).powi(2)).sum();
        assert_abs_diff_eq!(weighted_sq_dist(&x, &mu, &prec), direct, epsilon = 1e-12);
    }
}
