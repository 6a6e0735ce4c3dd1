//! Experiment driver: first task, sequential replay stages, per-stage
//! evaluation, joint-training baseline and likelihood probes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{ImageSet, TaskStream};
use crate::error::{Error, Result};
use crate::scholar::{ReplayPlan, ReplayStrategy, Scholar, ScholarConfig, StageLog};

/// Evaluation after one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    /// Accuracy on the test split of each task seen so far.
    pub task_accuracy: Vec<f64>,
    /// Accuracy on the union test set of all tasks.
    pub baseline_accuracy: f64,
    pub log: StageLog,
    /// Training plus evaluation time.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub problem: String,
    pub seed: u64,
    pub num_tasks: usize,
    pub task_classes: Vec<Vec<usize>>,
    pub task_sizes: Vec<usize>,
    pub config: ScholarConfig,
    pub plan: ReplayPlan,
    pub stages: Vec<StageRecord>,
    /// Mean NLL of every task's test split right after the first stage.
    pub probe_after_first: Vec<f64>,
    /// Set when the run aborted; `stages` then holds the completed prefix.
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn generated_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.log.generated).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none() && self.stages.len() == self.num_tasks
    }
}

fn evaluate_stage(
    scholar: &Scholar,
    stream: &TaskStream,
    log: StageLog,
    start: Instant,
) -> Result<StageRecord> {
    let stage = log.stage;
    let task_accuracy = stream.test_tasks[..stage]
        .iter()
        .map(|t| scholar.evaluate(t))
        .collect::<Result<Vec<_>>>()?;
    let baseline_accuracy = scholar.evaluate(&stream.baseline_test)?;
    Ok(StageRecord {
        stage,
        task_accuracy,
        baseline_accuracy,
        log,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs a whole class-incremental stream with one scholar. Failures after
/// validation are reported inside the returned record.
pub fn run_cil(
    stream: &TaskStream,
    config: &ScholarConfig,
    plan: &ReplayPlan,
    seed: u64,
) -> Result<RunRecord> {
    if stream.num_tasks() < 2 {
        return Err(Error::TooFewTasks(stream.num_tasks()));
    }
    let config = ScholarConfig {
        seed,
        ..config.clone()
    };
    let mut scholar = Scholar::new(config.clone(), stream.dim(), stream.num_classes())?;
    let mut record = RunRecord {
        problem: stream.problem.name.clone(),
        seed,
        num_tasks: stream.num_tasks(),
        task_classes: stream.problem.task_class_lists.clone(),
        task_sizes: stream.tasks.iter().map(|t| t.len()).collect(),
        config,
        plan: plan.clone(),
        stages: Vec::new(),
        probe_after_first: Vec::new(),
        failure: None,
    };
    let outcome = (|| -> Result<()> {
        for (i, task) in stream.tasks.iter().enumerate() {
            let start = Instant::now();
            let log = if i == 0 {
                scholar.initial_fit(task)?
            } else {
                scholar.adiabatic_update(task, plan)?
            };
            if plan.strategy == ReplayStrategy::ConstantTime && i > 0 && log.generated != task.len()
            {
                return Err(Error::InvalidConfig(format!(
                    "constant-time replay generated {} samples for a task of {}",
                    log.generated,
                    task.len()
                )));
            }
            record
                .stages
                .push(evaluate_stage(&scholar, stream, log, start)?);
            if i == 0 {
                let sets: Vec<ImageSet> =
                    stream.test_tasks.iter().map(|t| t.images.clone()).collect();
                record.probe_after_first = task_similarity_probe(&scholar, &sets)?;
            }
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        record.failure = Some(e.to_string());
    }
    Ok(record)
}

/// Joint training on the union of all tasks; accuracy on the union test set.
pub fn offline_baseline(stream: &TaskStream, config: &ScholarConfig, seed: u64) -> Result<f64> {
    let config = ScholarConfig {
        seed,
        ..config.clone()
    };
    let mut scholar = Scholar::new(config, stream.dim(), stream.num_classes())?;
    scholar.initial_fit(&stream.joint_train()?)?;
    scholar.evaluate(&stream.baseline_test)
}

/// Mean negative log-likelihood of each set under the scholar's mixture.
pub fn task_similarity_probe(scholar: &Scholar, sets: &[ImageSet]) -> Result<Vec<f64>> {
    let gmm = scholar.gmm()?;
    sets.iter().map(|s| gmm.batch_loss(s)).collect()
}
