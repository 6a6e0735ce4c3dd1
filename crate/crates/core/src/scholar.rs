//! Scholar: one mixture acting as generator and, through the read-out, as
//! classifier. New tasks are learned by replaying variants of the known
//! samples that the new data resembles.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{write_atomic, ImageSet, LabelSet, Labeled};
use crate::error::{Error, Result};
use crate::gmm::checkpoint::{decode_container, encode_container, params_from_arrays};
use crate::gmm::{
    fit, fit_batches, AnnealMode, AnnealingState, BatchPlan, CheckpointHeader, GmmParams,
    KernelNorm, TrainConfig, TrainingLog,
};
use crate::readout::{ReadoutConfig, ReadoutWeights};
use crate::sampler::{generate_variants_traced, SamplerConfig};

pub const SCHOLAR_FORMAT: &str = "ar-scholar";

/// Floors below this let a single off-centre pixel produce centroid steps
/// far outside the feature range at `learning_rate = 0.05`.
pub const SCHOLAR_STDDEV_FLOOR: f64 = 0.1;

/// Flat hyper-parameter set of a scholar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScholarConfig {
    /// Component count; must be a perfect square.
    pub k: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub initial_epochs: usize,
    pub replay_epochs: usize,
    pub readout_epochs: usize,
    /// Top-S cutoff of the sampler.
    pub top_s: usize,
    pub rho: f64,
    pub initial_gamma: f64,
    /// Initial radius for the first task; `None` means `sqrt(0.125 K)`.
    pub initial_r0: Option<f64>,
    pub replay_r0: f64,
    pub replay_gamma: f64,
    pub r_min: f64,
    pub anneal_mode: AnnealMode,
    pub kernel: KernelNorm,
    /// Lower bound on every per-dimension standard deviation.
    pub stddev_floor: f64,
    pub seed: u64,
}

impl Default for ScholarConfig {
    fn default() -> Self {
        Self {
            k: 400,
            learning_rate: 0.05,
            batch_size: 100,
            initial_epochs: 128,
            replay_epochs: 256,
            readout_epochs: 32,
            top_s: 3,
            rho: 1.0,
            initial_gamma: 0.96,
            initial_r0: None,
            replay_r0: 0.1,
            replay_gamma: 0.9,
            r_min: 0.01,
            anneal_mode: AnnealMode::Epoch,
            kernel: KernelNorm::Peak,
            stddev_floor: SCHOLAR_STDDEV_FLOOR,
            seed: 0,
        }
    }
}

/// Per-run stream derivation so that distinct stages and roles never share
/// random numbers.
fn derive_seed(seed: u64, stage: usize, role: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((stage as u64) << 32)
        ^ role.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

impl ScholarConfig {
    pub fn validate(&self) -> Result<()> {
        crate::gmm::grid_side(self.k)?;
        self.train_config(1, 0).validate()?;
        if self.replay_epochs == 0 {
            return Err(Error::InvalidConfig("replay_epochs must be >= 1".into()));
        }
        self.sampler_config(0).validate(self.k)?;
        self.initial_annealing()?;
        self.replay_annealing()?;
        if !(self.stddev_floor > 0.0) {
            return Err(Error::InvalidConfig("stddev_floor must be > 0".into()));
        }
        Ok(())
    }

    pub fn initial_annealing(&self) -> Result<AnnealingState> {
        let r0 = self
            .initial_r0
            .unwrap_or_else(|| (0.125 * self.k as f64).sqrt());
        Ok(
            AnnealingState::new(r0, self.initial_gamma, self.r_min.min(r0))?
                .with_mode(self.anneal_mode)
                .with_kernel(self.kernel),
        )
    }

    pub fn replay_annealing(&self) -> Result<AnnealingState> {
        Ok(AnnealingState::new(
            self.replay_r0,
            self.replay_gamma,
            self.r_min.min(self.replay_r0),
        )?
        .with_mode(self.anneal_mode)
        .with_kernel(self.kernel))
    }

    fn train_config(&self, stage: usize, epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: epochs.max(1),
            seed: derive_seed(self.seed, stage, 1),
            ..TrainConfig::default()
        }
    }

    fn readout_config(&self, stage: usize) -> ReadoutConfig {
        ReadoutConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.readout_epochs,
            seed: derive_seed(self.seed, stage, 2),
        }
    }

    fn sampler_config(&self, stage: usize) -> SamplerConfig {
        SamplerConfig {
            s: self.top_s,
            rho: self.rho,
            seed: derive_seed(self.seed, stage, 3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "chi")]
pub enum ReplayStrategy {
    /// One generated sample per new sample, half/half batches.
    ConstantTime,
    /// Ratio of seen to new classes, so replay grows with the history.
    Balanced,
    /// Explicit generated-to-real ratio; 0 means plain fine-tuning.
    Ratio(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayPlan {
    pub strategy: ReplayStrategy,
    /// Mini-batch size.
    pub batch: usize,
}

impl ReplayPlan {
    pub fn constant_time(batch: usize) -> Self {
        Self {
            strategy: ReplayStrategy::ConstantTime,
            batch,
        }
    }
}

/// Sizes of one replay stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub chi: f64,
    pub generate_count: usize,
    pub per_batch_generated: usize,
    pub per_batch_real: usize,
}

pub fn plan_mix(
    plan: &ReplayPlan,
    task_index: usize,
    new_samples: usize,
    seen_classes: usize,
    new_classes: usize,
) -> Result<MixPlan> {
    if task_index < 2 {
        return Err(Error::InvalidConfig(format!(
            "replay starts at the second task, got task {task_index}"
        )));
    }
    if plan.batch == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    let chi = match plan.strategy {
        ReplayStrategy::ConstantTime => 1.0,
        ReplayStrategy::Balanced => {
            if new_classes == 0 {
                return Err(Error::InvalidRatio(f64::INFINITY));
            }
            seen_classes as f64 / new_classes as f64
        }
        ReplayStrategy::Ratio(c) => c,
    };
    if !(chi >= 0.0 && chi.is_finite()) {
        return Err(Error::InvalidRatio(chi));
    }
    let generate_count = match plan.strategy {
        ReplayStrategy::ConstantTime => new_samples,
        _ => (chi * new_samples as f64).round() as usize,
    };
    // halves go to the real side
    let share = plan.batch as f64 * chi / (1.0 + chi);
    let per_batch_generated = ((share - 0.5).ceil().max(0.0) as usize).min(plan.batch);
    Ok(MixPlan {
        chi,
        generate_count,
        per_batch_generated,
        per_batch_real: plan.batch - per_batch_generated,
    })
}

/// What one training stage did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: usize,
    pub real_samples: usize,
    pub generated: usize,
    pub mix: Option<MixPlan>,
    pub gmm: TrainingLog,
    pub readout_losses: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scholar {
    config: ScholarConfig,
    dim: usize,
    gmm: Option<GmmParams<f32>>,
    readout: ReadoutWeights<f32>,
    stages: usize,
    classes_seen: BTreeSet<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScholarHeader {
    #[serde(flatten)]
    gmm: CheckpointHeader,
    num_classes: usize,
    stages: usize,
    classes_seen: Vec<usize>,
    config: ScholarConfig,
}

impl Scholar {
    pub fn new(config: ScholarConfig, dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        if dim == 0 || num_classes == 0 {
            return Err(Error::InvalidConfig(
                "dimension and class count must be >= 1".into(),
            ));
        }
        Ok(Self {
            readout: ReadoutWeights::zeros(num_classes, config.k),
            config,
            dim,
            gmm: None,
            stages: 0,
            classes_seen: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &ScholarConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.readout.num_classes()
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn classes_seen(&self) -> &BTreeSet<usize> {
        &self.classes_seen
    }

    pub fn is_initialized(&self) -> bool {
        self.gmm.is_some()
    }

    pub fn gmm(&self) -> Result<&GmmParams<f32>> {
        self.gmm.as_ref().ok_or(Error::NotInitialized)
    }

    pub fn readout(&self) -> &ReadoutWeights<f32> {
        &self.readout
    }

    fn check_task(&self, task: &Labeled) -> Result<()> {
        if task.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if task.images.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: task.images.dim(),
            });
        }
        if let Some(&c) = task
            .labels
            .as_slice()
            .iter()
            .find(|&&c| c >= self.num_classes())
        {
            return Err(Error::UnknownClass {
                class: c,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }

    fn train_readout(&mut self, data: &Labeled, stage: usize) -> Result<Vec<f64>> {
        let gammas = self.gmm()?.batch_responsibilities(&data.images)?;
        let cfg = self.config.readout_config(stage);
        self.readout.train(&gammas, &data.labels, &cfg)
    }

    /// Trains the mixture from scratch on the first task, then the read-out.
    pub fn initial_fit(&mut self, task: &Labeled) -> Result<StageLog> {
        if self.gmm.is_some() {
            return Err(Error::SecondInitialFit);
        }
        self.check_task(task)?;
        let start = Instant::now();
        let stage = 1;
        let mut gmm =
            GmmParams::<f32>::init(self.config.k, self.dim, self.config.seed, &task.images)?
                .with_stddev_floor(self.config.stddev_floor as f32);
        let log = fit(
            &mut gmm,
            &task.images,
            &self.config.train_config(stage, self.config.initial_epochs),
            &self.config.initial_annealing()?,
        )?;
        self.gmm = Some(gmm);
        let readout_losses = self.train_readout(task, stage)?;
        self.stages = stage;
        self.classes_seen.extend(task.labels.distinct());
        Ok(StageLog {
            stage,
            real_samples: task.len(),
            generated: 0,
            mix: None,
            gmm: log,
            readout_losses,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Variants of known samples selected by the new task's samples,
    /// labeled by the current scholar.
    pub fn generate_replay(
        &self,
        queries: &ImageSet,
        count: usize,
        stage: usize,
    ) -> Result<Labeled> {
        let gmm = self.gmm()?;
        if count == 0 {
            return Labeled::new(
                ImageSet::empty(self.dim),
                LabelSet::new(Vec::new(), Some(self.num_classes()))?,
            );
        }
        // cycle through the queries when more variants than queries are needed
        let idx: Vec<usize> = (0..count).map(|n| n % queries.count()).collect();
        let q = if count == queries.count() {
            queries.clone()
        } else {
            queries.select(&idx)
        };
        let variants = generate_variants_traced(gmm, &q, &self.config.sampler_config(stage), 1)?;
        let labels = self.classify_batch(&variants.images)?;
        Labeled::new(
            variants.images,
            LabelSet::new(labels, Some(self.num_classes()))?,
        )
    }

    /// Learns a new task from its samples plus replayed variants, continuing
    /// from the current parameters.
    pub fn adiabatic_update(&mut self, task: &Labeled, plan: &ReplayPlan) -> Result<StageLog> {
        if self.gmm.is_none() {
            return Err(Error::NotInitialized);
        }
        self.check_task(task)?;
        let start = Instant::now();
        let stage = self.stages + 1;
        let task_classes = task.labels.distinct();
        let new_classes = task_classes.difference(&self.classes_seen).count();
        let mix = plan_mix(
            plan,
            stage,
            task.len(),
            self.classes_seen.len(),
            new_classes,
        )?;
        let replay = self.generate_replay(&task.images, mix.generate_count, stage)?;
        let generated = replay.len();
        let mut merged = task.clone();
        merged.append(&replay)?;
        let batch_plan = BatchPlan::Mixed {
            real: task.len(),
            per_batch_real: mix.per_batch_real,
            per_batch_generated: mix.per_batch_generated,
        };
        let mut train = self.config.train_config(stage, self.config.replay_epochs);
        train.batch_size = plan.batch;
        let annealing = self.config.replay_annealing()?;
        let gmm = self.gmm.as_mut().expect("checked above");
        let log = fit_batches(gmm, &merged.images, &batch_plan, &train, &annealing)?;
        let readout_losses = self.train_readout(&merged, stage)?;
        self.stages = stage;
        self.classes_seen.extend(task_classes);
        Ok(StageLog {
            stage,
            real_samples: task.len(),
            generated,
            mix: Some(mix),
            gmm: log,
            readout_losses,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Predicted class of `x`, chosen among the classes trained so far: the
    /// read-out rows of unseen classes are untrained and carry no evidence.
    pub fn classify(&self, x: &[f32]) -> Result<usize> {
        let gamma = self.gmm()?.responsibilities(x)?;
        Ok(self
            .readout
            .predict_batch_among(&gamma, &self.known_classes())?[0])
    }

    pub fn classify_batch(&self, images: &ImageSet) -> Result<Vec<usize>> {
        let gammas = self.gmm()?.batch_responsibilities(images)?;
        self.readout
            .predict_batch_among(&gammas, &self.known_classes())
    }

    fn known_classes(&self) -> Vec<usize> {
        self.classes_seen.iter().copied().collect()
    }

    /// Test accuracy on a labeled set.
    pub fn evaluate(&self, data: &Labeled) -> Result<f64> {
        let pred = self.classify_batch(&data.images)?;
        crate::metrics::accuracy(&pred, data.labels.as_slice())
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let gmm = self.gmm()?;
        let header = ScholarHeader {
            gmm: CheckpointHeader::for_params(gmm, SCHOLAR_FORMAT),
            num_classes: self.num_classes(),
            stages: self.stages,
            classes_seen: self.classes_seen.iter().copied().collect(),
            config: self.config.clone(),
        };
        let header =
            serde_json::to_value(header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        Ok(encode_container(
            &header,
            &[
                gmm.weight_logits(),
                gmm.centroids(),
                gmm.log_stddevs(),
                self.readout.as_slice(),
            ],
        ))
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, arrays) = decode_container(bytes)?;
        let header: ScholarHeader = serde_json::from_value(header)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.gmm.format != SCHOLAR_FORMAT {
            return Err(Error::Checkpoint(format!(
                "expected format {SCHOLAR_FORMAT:?}, found {:?}",
                header.gmm.format
            )));
        }
        if header.config.k != header.gmm.k {
            return Err(Error::Checkpoint("config K differs from mixture K".into()));
        }
        let mut it = arrays.into_iter();
        let gmm = params_from_arrays(&header.gmm, &mut it)?;
        let w = it
            .next()
            .ok_or_else(|| Error::Checkpoint("missing read-out array".into()))?;
        let readout = ReadoutWeights::from_vec(header.num_classes, header.gmm.k, w)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if it.next().is_some() {
            return Err(Error::Checkpoint("trailing arrays".into()));
        }
        Ok(Self {
            config: header.config,
            dim: header.gmm.dim,
            gmm: Some(gmm),
            readout,
            stages: header.stages,
            classes_seen: header.classes_seen.into_iter().collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_checkpoint_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(strategy: ReplayStrategy, batch: usize) -> ReplayPlan {
        ReplayPlan { strategy, batch }
    }

    #[test]
    fn balanced_nine_to_one() {
        let m = plan_mix(&plan(ReplayStrategy::Balanced, 100), 10, 6000, 9, 1).unwrap();
        assert_eq!(m.chi, 9.0);
        assert_eq!((m.per_batch_generated, m.per_batch_real), (90, 10));
        assert_eq!(m.generate_count, 54000);
    }

    #[test]
    fn constant_time_ignores_history() {
        for i in 2..8 {
            let m = plan_mix(&ReplayPlan::constant_time(100), i, 6000, 5 * i, 1).unwrap();
            assert_eq!(m.generate_count, 6000);
            assert_eq!((m.per_batch_generated, m.per_batch_real), (50, 50));
        }
    }

    #[test]
    fn odd_batch_extra_goes_to_real() {
        let m = plan_mix(&ReplayPlan::constant_time(101), 2, 10, 1, 1).unwrap();
        assert_eq!((m.per_batch_generated, m.per_batch_real), (50, 51));
    }

    #[test]
    fn zero_ratio_generates_nothing() {
        let m = plan_mix(&plan(ReplayStrategy::Ratio(0.0), 100), 2, 500, 3, 1).unwrap();
        assert_eq!(m.generate_count, 0);
        assert_eq!((m.per_batch_generated, m.per_batch_real), (0, 100));
    }

    #[test]
    fn invalid_ratios() {
        assert!(matches!(
            plan_mix(&plan(ReplayStrategy::Ratio(-1.0), 100), 2, 5, 1, 1),
            Err(Error::InvalidRatio(_))
        ));
        assert!(matches!(
            plan_mix(&plan(ReplayStrategy::Balanced, 100), 2, 5, 1, 0),
            Err(Error::InvalidRatio(_))
        ));
        assert!(plan_mix(&ReplayPlan::constant_time(100), 1, 5, 1, 1).is_err());
    }

    #[test]
    fn default_config_is_valid() {
        ScholarConfig::default().validate().unwrap();
        let bad = ScholarConfig {
            k: 10,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::NonSquareK(10))));
    }

    #[test]
    fn fresh_scholar_refuses_update_and_classify() {
        let s = Scholar::new(
            ScholarConfig {
                k: 4,
                top_s: 2,
                ..Default::default()
            },
            2,
            2,
        )
        .unwrap();
        assert!(matches!(
            s.classify(&[0.1, 0.2]),
            Err(Error::NotInitialized)
        ));
        let task = Labeled::new(
            ImageSet::new(vec![0.1, 0.2], 2).unwrap(),
            LabelSet::new(vec![0], Some(2)).unwrap(),
        )
        .unwrap();
        let mut s = s;
        assert!(matches!(
            s.adiabatic_update(&task, &ReplayPlan::constant_time(10)),
            Err(Error::NotInitialized)
        ));
    }
}
