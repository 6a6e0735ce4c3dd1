use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::ImageSet;
use crate::error::{Error, Result};
use crate::real::Real;

use super::{convert_row, Evaluator, GmmParams, GridSmoother, KernelNorm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stopping fires once `r` sits at its floor and the loss improved
    /// by less than `early_stop_delta` (relative) over this many epochs.
    pub early_stop_window: usize,
    pub early_stop_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 100,
            max_epochs: 128,
            early_stop_window: 5,
            early_stop_delta: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn new(
        learning_rate: f64,
        batch_size: usize,
        max_epochs: usize,
        seed: u64,
    ) -> Result<Self> {
        let cfg = Self {
            learning_rate,
            batch_size,
            max_epochs,
            seed,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if self.early_stop_window == 0 {
            return Err(Error::InvalidConfig(
                "early_stop_window must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// When the radius shrinks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealMode {
    /// After every epoch whose loss has plateaued.
    #[default]
    Plateau,
    /// After every epoch.
    Epoch,
}

/// Annealing radius schedule: `r` shrinks by `gamma` on each decay event,
/// never below `r_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealingState {
    pub r: f64,
    pub r0: f64,
    pub gamma: f64,
    pub r_min: f64,
    pub plateau_window: usize,
    pub plateau_delta: f64,
    #[serde(default)]
    pub mode: AnnealMode,
    #[serde(default)]
    pub kernel: KernelNorm,
}

pub const DEFAULT_R_MIN: f64 = 0.01;
pub const DEFAULT_PLATEAU_WINDOW: usize = 5;
pub const DEFAULT_PLATEAU_DELTA: f64 = 1e-3;

impl AnnealingState {
    pub fn new(r0: f64, gamma: f64, r_min: f64) -> Result<Self> {
        let s = Self {
            r: r0,
            r0,
            gamma,
            r_min,
            plateau_window: DEFAULT_PLATEAU_WINDOW,
            plateau_delta: DEFAULT_PLATEAU_DELTA,
            mode: AnnealMode::Plateau,
            kernel: KernelNorm::Mass,
        };
        s.validate()?;
        Ok(s)
    }

    /// Schedule for training from scratch: `r0 = sqrt(0.125 K)`, `gamma = 0.96`.
    pub fn initial(k: usize) -> Self {
        Self::new((0.125 * k as f64).sqrt(), 0.96, DEFAULT_R_MIN).expect("valid initial schedule")
    }

    /// Schedule for replay training: `r0 = 0.1`, `gamma = 0.9`.
    pub fn replay() -> Self {
        Self::new(0.1, 0.9, DEFAULT_R_MIN).expect("valid replay schedule")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "annealing gamma {} must lie in (0, 1)",
                self.gamma
            )));
        }
        if !(self.r_min > 0.0 && self.r_min <= self.r0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < r_min ({}) <= r0 ({})",
                self.r_min, self.r0
            )));
        }
        if self.plateau_window == 0 {
            return Err(Error::InvalidConfig("plateau_window must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: AnnealMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_kernel(mut self, kernel: KernelNorm) -> Self {
        self.kernel = kernel;
        self
    }

    /// Same schedule with `r` back at `r0`.
    pub fn reset(&self) -> Self {
        Self {
            r: self.r0,
            ..self.clone()
        }
    }

    pub fn at_floor(&self) -> bool {
        self.r <= self.r_min
    }
}

/// `true` when the relative loss improvement over the last `window` entries
/// is below `delta`. Needs `window + 1` entries.
pub fn plateaued(losses: &[f64], window: usize, delta: f64) -> bool {
    if losses.len() <= window {
        return false;
    }
    let prev = losses[losses.len() - 1 - window];
    let cur = losses[losses.len() - 1];
    let scale = prev.abs().max(f64::MIN_POSITIVE);
    (prev - cur) / scale < delta
}

pub fn anneal_update(state: &AnnealingState, log: &TrainingLog) -> AnnealingState {
    let mut next = state.clone();
    let decay = match state.mode {
        AnnealMode::Plateau => plateaued(&log.losses, state.plateau_window, state.plateau_delta),
        AnnealMode::Epoch => !log.is_empty(),
    };
    if decay {
        next.r = (state.gamma * state.r).max(state.r_min);
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Converged,
    NonFiniteGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean negative log-likelihood of each epoch.
    pub losses: Vec<f64>,
    /// Radius in effect during each epoch.
    pub radii: Vec<f64>,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
}

impl Default for TrainingLog {
    fn default() -> Self {
        Self {
            losses: Vec::new(),
            radii: Vec::new(),
            stop_epoch: 0,
            stop_reason: StopReason::MaxEpochs,
        }
    }
}

impl TrainingLog {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn push(&mut self, loss: f64, radius: f64) {
        self.losses.push(loss);
        self.radii.push(radius);
    }
}

/// Fit aborted; `log` covers the epochs that completed.
#[derive(Debug)]
pub struct FitError {
    pub error: Error,
    pub log: TrainingLog,
}

impl From<FitError> for Error {
    fn from(e: FitError) -> Self {
        e.error
    }
}

impl std::fmt::Display for FitError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} after {} epochs", self.error, self.log.len())
    }
}

impl std::error::Error for FitError {}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T: Real> {
    pub weight_logits: Vec<T>,
    pub centroids: Vec<T>,
    pub log_stddevs: Vec<T>,
}

impl<T: Real> Gradient<T> {
    pub fn zeros(k: usize, dim: usize) -> Self {
        Self {
            weight_logits: vec![T::zero(); k],
            centroids: vec![T::zero(); k * dim],
            log_stddevs: vec![T::zero(); k * dim],
        }
    }

    fn clear(&mut self) {
        for v in [
            &mut self.weight_logits,
            &mut self.centroids,
            &mut self.log_stddevs,
        ] {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight_logits
            .iter()
            .chain(&self.centroids)
            .chain(&self.log_stddevs)
            .all(|v| v.is_finite())
    }
}

/// Reusable buffers for gradient accumulation.
struct Workspace<T: Real> {
    grad: Gradient<T>,
    gamma: Vec<T>,
    smooth: Vec<T>,
    scratch: Vec<T>,
    row: Vec<T>,
    mass: Vec<T>,
}

impl<T: Real> Workspace<T> {
    fn new(k: usize, dim: usize) -> Self {
        Self {
            grad: Gradient::zeros(k, dim),
            gamma: vec![T::zero(); k],
            smooth: vec![T::zero(); k],
            scratch: vec![T::zero(); k],
            row: Vec::with_capacity(dim),
            mass: vec![T::zero(); k],
        }
    }

    /// Fills `self.grad` with the annealed gradient of the mean NLL over
    /// `rows` and returns `(sum of NLL, row count)`.
    fn accumulate<'a>(
        &mut self,
        params: &GmmParams<T>,
        smoother: &GridSmoother<T>,
        rows: impl Iterator<Item = &'a [f32]>,
    ) -> (f64, usize) {
        let ev = Evaluator::new(params);
        let (k, dim) = (params.k(), params.dim());
        self.grad.clear();
        self.mass.iter_mut().for_each(|m| *m = T::zero());
        let mut nll = 0.0f64;
        let mut n = 0usize;
        for x in rows {
            convert_row(x, &mut self.row);
            let lse = ev.responsibilities_into(&self.row, &mut self.gamma);
            nll -= lse.f64();
            n += 1;
            smoother.apply(&self.gamma, &mut self.smooth, &mut self.scratch);
            for c in 0..k {
                let w = self.smooth[c];
                if w == T::zero() {
                    continue;
                }
                self.mass[c] = self.mass[c] + w;
                let span = c * dim..(c + 1) * dim;
                let mu = &params.centroids()[span.clone()];
                let prec = ev.precision(c);
                let g_mu = &mut self.grad.centroids[span.clone()];
                let g_s = &mut self.grad.log_stddevs[span];
                for ((((gm, gs), &xv), &m), &p) in g_mu
                    .iter_mut()
                    .zip(g_s.iter_mut())
                    .zip(self.row.iter())
                    .zip(mu)
                    .zip(prec)
                {
                    let diff = xv - m;
                    let t = w * diff * p * p;
                    *gm = *gm - t;
                    *gs = *gs - t * diff;
                }
            }
        }
        if n == 0 {
            return (0.0, 0);
        }
        let inv_n = T::of(1.0 / n as f64);
        let count = T::of(n as f64);
        let weights = params.weights();
        for c in 0..k {
            let mass = self.mass[c];
            self.grad.weight_logits[c] = (count * weights[c] - mass) * inv_n;
            let span = c * dim..(c + 1) * dim;
            for g in &mut self.grad.centroids[span.clone()] {
                *g = *g * inv_n;
            }
            for g in &mut self.grad.log_stddevs[span] {
                *g = (*g + mass) * inv_n;
            }
        }
        (nll, n)
    }

    fn apply(&self, params: &mut GmmParams<T>, lr: T) {
        let (logits, centroids, log_stddevs) = params.parts_mut();
        for (p, &g) in logits.iter_mut().zip(&self.grad.weight_logits) {
            *p = *p - lr * g;
        }
        for (p, &g) in centroids.iter_mut().zip(&self.grad.centroids) {
            *p = *p - lr * g;
        }
        for (p, &g) in log_stddevs.iter_mut().zip(&self.grad.log_stddevs) {
            *p = *p - lr * g;
        }
        params.apply_floor();
    }
}

/// Sets flush-to-zero and denormals-are-zero for the current thread until
/// dropped. Near-zero responsibilities otherwise hit the slow subnormal path.
struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    fn enable() -> Self {
        let mut saved: u32 = 0;
        // SAFETY: stmxcsr/ldmxcsr only touch the SSE control register of this
        // thread, and the value written differs only in the FTZ and DAZ bits.
        unsafe {
            std::arch::asm!("stmxcsr [{}]", in(reg) &mut saved, options(nostack));
            let flushed = saved | 0x8040;
            std::arch::asm!("ldmxcsr [{}]", in(reg) &flushed, options(nostack));
        }
        Self { saved }
    }

    #[cfg(not(target_arch = "x86_64"))]
    fn enable() -> Self {
        Self {}
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the register value read in `enable`.
        unsafe {
            std::arch::asm!("ldmxcsr [{}]", in(reg) &self.saved, options(nostack));
        }
    }
}

/// Mean NLL of `batch` and its gradient, with responsibilities smoothed at
/// radius `r` (`r = 0` gives the exact gradient of the loss).
pub fn loss_and_gradient<T: Real>(
    params: &GmmParams<T>,
    batch: &ImageSet,
    r: f64,
) -> Result<(f64, Gradient<T>)> {
    check_batch(params, batch)?;
    params.check_smoothable(r)?;
    let mut ws = Workspace::new(params.k(), params.dim());
    let smoother = GridSmoother::new(params.grid_side(), r);
    let (nll, n) = ws.accumulate(params, &smoother, batch.rows());
    Ok((nll / n as f64, ws.grad))
}

fn check_batch<T: Real>(params: &GmmParams<T>, batch: &ImageSet) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: batch.dim(),
        });
    }
    Ok(())
}

/// One SGD step on `batch`; returns the pre-step mean NLL.
pub fn sgd_step<T: Real>(
    params: &mut GmmParams<T>,
    batch: &ImageSet,
    learning_rate: f64,
    r: f64,
) -> Result<f64> {
    check_batch(params, batch)?;
    params.check_smoothable(r)?;
    let mut ws = Workspace::new(params.k(), params.dim());
    let smoother = GridSmoother::new(params.grid_side(), r);
    let (nll, n) = ws.accumulate(params, &smoother, batch.rows());
    if !ws.grad.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    ws.apply(params, T::of(learning_rate));
    Ok(nll / n as f64)
}

/// How each epoch is cut into mini-batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchPlan {
    /// Shuffle all rows, consecutive chunks of `batch_size`.
    Shuffled,
    /// Rows `0..real` are real samples and the rest generated ones; every
    /// batch takes `per_batch_real` real and `per_batch_generated` generated
    /// rows. An epoch is one pass over the real rows; generated rows cycle.
    Mixed {
        real: usize,
        per_batch_real: usize,
        per_batch_generated: usize,
    },
}

impl BatchPlan {
    pub fn epoch_batches(
        &self,
        n: usize,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Vec<usize>> {
        match *self {
            BatchPlan::Shuffled => {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(rng);
                idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
            }
            BatchPlan::Mixed {
                real,
                per_batch_real,
                per_batch_generated,
            } => {
                let real = real.min(n);
                let mut r_idx: Vec<usize> = (0..real).collect();
                let mut g_idx: Vec<usize> = (real..n).collect();
                r_idx.shuffle(rng);
                g_idx.shuffle(rng);
                if per_batch_generated == 0 || g_idx.is_empty() {
                    return r_idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
                }
                if per_batch_real == 0 || r_idx.is_empty() {
                    return g_idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
                }
                let batches = r_idx.len().div_ceil(per_batch_real);
                (0..batches)
                    .map(|b| {
                        let lo = b * per_batch_real;
                        let hi = (lo + per_batch_real).min(r_idx.len());
                        let mut batch = r_idx[lo..hi].to_vec();
                        let start = b * per_batch_generated;
                        batch.extend(
                            (0..per_batch_generated).map(|j| g_idx[(start + j) % g_idx.len()]),
                        );
                        batch
                    })
                    .collect()
            }
        }
    }
}

/// Shuffled mini-batch SGD with annealing and early stopping.
pub fn fit<T: Real>(
    params: &mut GmmParams<T>,
    data: &ImageSet,
    config: &TrainConfig,
    annealing: &AnnealingState,
) -> Result<TrainingLog, FitError> {
    fit_batches(params, data, &BatchPlan::Shuffled, config, annealing)
}

pub fn fit_batches<T: Real>(
    params: &mut GmmParams<T>,
    data: &ImageSet,
    plan: &BatchPlan,
    config: &TrainConfig,
    annealing: &AnnealingState,
) -> Result<TrainingLog, FitError> {
    let mut log = TrainingLog::default();
    let fail = |error: Error, log: TrainingLog| FitError { error, log };
    if let Err(e) = config.validate().and_then(|_| annealing.validate()) {
        return Err(fail(e, log));
    }
    if let Err(e) = check_batch(params, data).and_then(|_| params.check_smoothable(annealing.r0)) {
        return Err(fail(e, log));
    }
    let _ftz = FlushDenormals::enable();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ws = Workspace::new(params.k(), params.dim());
    let mut state = annealing.clone();
    let lr = T::of(config.learning_rate);
    for epoch in 0..config.max_epochs {
        let smoother = GridSmoother::with_norm(params.grid_side(), state.r, state.kernel);
        let mut nll = 0.0;
        let mut seen = 0usize;
        for batch in plan.epoch_batches(data.count(), config.batch_size, &mut rng) {
            let (l, n) = ws.accumulate(params, &smoother, batch.iter().map(|&i| data.row(i)));
            if !ws.grad.is_finite() || !l.is_finite() {
                log.stop_epoch = epoch;
                log.stop_reason = StopReason::NonFiniteGradient;
                return Err(fail(Error::NonFiniteGradient, log));
            }
            ws.apply(params, lr);
            nll += l;
            seen += n;
        }
        log.push(nll / seen.max(1) as f64, state.r);
        state = anneal_update(&state, &log);
        log.stop_epoch = epoch + 1;
        if state.at_floor()
            && plateaued(
                &log.losses,
                config.early_stop_window,
                config.early_stop_delta,
            )
        {
            log.stop_reason = StopReason::Converged;
            return Ok(log);
        }
    }
    log.stop_reason = StopReason::MaxEpochs;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn log_of(losses: &[f64]) -> TrainingLog {
        let mut l = TrainingLog::default();
        for &x in losses {
            l.push(x, 0.0);
        }
        l
    }

    #[test]
    fn plateau_decays_radius() {
        let s = AnnealingState {
            r: 0.1,
            ..AnnealingState::new(1.0, 0.9, 0.01).unwrap()
        };
        let next = anneal_update(&s, &log_of(&[5.0; 6]));
        assert_abs_diff_eq!(next.r, 0.09, epsilon = 1e-15);
    }

    #[test]
    fn epoch_mode_decays_without_plateau() {
        let s = AnnealingState::new(1.0, 0.9, 0.01)
            .unwrap()
            .with_mode(AnnealMode::Epoch);
        let next = anneal_update(&s, &log_of(&[10.0, 9.0]));
        assert_abs_diff_eq!(next.r, 0.9, epsilon = 1e-15);
    }

    #[test]
    fn radius_clamped_at_floor() {
        let s = AnnealingState {
            r: 0.01,
            ..AnnealingState::new(1.0, 0.9, 0.01).unwrap()
        };
        assert_eq!(anneal_update(&s, &log_of(&[5.0; 6])).r, 0.01);
    }

    #[test]
    fn improving_loss_keeps_radius() {
        let s = AnnealingState::new(1.0, 0.9, 0.01).unwrap();
        let next = anneal_update(&s, &log_of(&[10.0, 9.0, 8.0, 7.0, 6.0, 5.0]));
        assert_eq!(next.r, 1.0);
        // too little history never counts as a plateau
        assert_eq!(anneal_update(&s, &log_of(&[1.0, 1.0])).r, 1.0);
    }

    #[test]
    fn plateau_with_negative_losses() {
        assert!(plateaued(&[-1000.0, -1000.1, -1000.2], 2, 1e-3));
        assert!(!plateaued(&[-1000.0, -1005.0, -1010.0], 2, 1e-3));
    }

    #[test]
    fn initial_schedule_for_400_components() {
        let s = AnnealingState::initial(400);
        assert_abs_diff_eq!(s.r0, 50f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.r0, 7.0711, epsilon = 1e-4);
        assert_eq!(s.gamma, 0.96);
        let r = AnnealingState::replay();
        assert_eq!((r.r0, r.gamma), (0.1, 0.9));
    }

    #[test]
    fn invalid_gamma_rejected() {
        assert!(AnnealingState::new(1.0, 1.0, 0.01).is_err());
        assert!(AnnealingState::new(1.0, 0.0, 0.01).is_err());
    }

    #[test]
    fn zero_epochs_rejected() {
        assert!(TrainConfig::new(0.05, 100, 0, 0).is_err());
        assert!(TrainConfig::new(0.0, 100, 1, 0).is_err());
        assert!(TrainConfig::new(0.05, 0, 1, 0).is_err());
    }

    #[test]
    fn mixed_plan_composition() {
        let plan = BatchPlan::Mixed {
            real: 100,
            per_batch_real: 50,
            per_batch_generated: 50,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = plan.epoch_batches(200, 100, &mut rng);
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert_eq!(b.iter().filter(|&&i| i < 100).count(), 50);
            assert_eq!(b.iter().filter(|&&i| i >= 100).count(), 50);
        }
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn mixed_plan_without_generated_is_plain() {
        let plan = BatchPlan::Mixed {
            real: 10,
            per_batch_real: 5,
            per_batch_generated: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = plan.epoch_batches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let batch = ImageSet::new(vec![0.1, 0.9, 0.4, 0.2], 2).unwrap();
        let mut p = GmmParams::<f64>::init(4, 2, 3, &batch).unwrap();
        let before = p.clone();
        sgd_step(&mut p, &batch, 0.0, 0.5).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn empty_batch_step_rejected() {
        let batch = ImageSet::new(vec![0.1, 0.9], 2).unwrap();
        let mut p = GmmParams::<f64>::init(4, 2, 3, &batch).unwrap();
        assert!(matches!(
            sgd_step(&mut p, &ImageSet::empty(2), 0.1, 0.0),
            Err(Error::EmptyBatch)
        ));
    }
}
