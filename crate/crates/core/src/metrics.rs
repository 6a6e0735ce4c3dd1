//! Accuracy matrices, forgetting and backward transfer.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::RunRecord;

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Half-up rounding to two decimals, for presentation only.
pub fn round2(v: f64) -> f64 {
    (v * 100.0 + 0.5).floor() / 100.0
}

/// `entries[i][j]`: accuracy on task `i+1` after stage `j+1`, defined for
/// `i <= j`. `baseline[j]` is the accuracy on the union test set after stage
/// `j+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    entries: Vec<Vec<Option<f64>>>,
    baseline: Vec<Option<f64>>,
}

fn check_unit(v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::AccuracyOutOfRange(v));
    }
    Ok(v)
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            entries: vec![vec![None; tasks]; tasks],
            baseline: vec![None; tasks],
        }
    }

    /// `rows[j]` holds the accuracies on tasks `1..=j+1` after stage `j+1`.
    pub fn from_rows(rows: &[Vec<f64>], baseline: &[f64]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (j, row) in rows.iter().enumerate() {
            if row.len() != j + 1 {
                return Err(Error::IncompleteRecord(format!(
                    "stage {} has {} task entries, expected {}",
                    j + 1,
                    row.len(),
                    j + 1
                )));
            }
            for (i, &v) in row.iter().enumerate() {
                m.set(i + 1, j + 1, v)?;
            }
        }
        for (j, &v) in baseline.iter().enumerate() {
            m.set_baseline(j + 1, v)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.tasks {
            return Err(Error::StageOutOfRange {
                stage,
                tasks: self.tasks,
            });
        }
        Ok(())
    }

    /// Sets the accuracy on task `task` after stage `stage` (both 1-based).
    pub fn set(&mut self, task: usize, stage: usize, v: f64) -> Result<()> {
        self.check_stage(stage)?;
        if task == 0 || task > stage {
            return Err(Error::StageOutOfRange {
                stage: task,
                tasks: stage,
            });
        }
        self.entries[task - 1][stage - 1] = Some(check_unit(v)?);
        Ok(())
    }

    pub fn set_baseline(&mut self, stage: usize, v: f64) -> Result<()> {
        self.check_stage(stage)?;
        self.baseline[stage - 1] = Some(check_unit(v)?);
        Ok(())
    }

    pub fn get(&self, task: usize, stage: usize) -> Option<f64> {
        if task == 0 || stage == 0 || task > self.tasks || stage > self.tasks {
            return None;
        }
        self.entries[task - 1][stage - 1]
    }

    pub fn baseline(&self, stage: usize) -> Option<f64> {
        self.baseline.get(stage.checked_sub(1)?).copied().flatten()
    }

    /// Accuracy on the first task right after training on it.
    pub fn alpha_init(&self) -> Option<f64> {
        self.get(1, 1)
    }

    /// Accuracy on the first task after the last stage.
    pub fn alpha_init_final(&self) -> Option<f64> {
        self.get(1, self.tasks)
    }

    pub fn baseline_final(&self) -> Option<f64> {
        self.baseline(self.tasks)
    }

    fn zip_entries(ms: &[AccuracyMatrix], f: impl Fn(&[f64]) -> f64) -> Result<AccuracyMatrix> {
        let first = ms
            .first()
            .ok_or_else(|| Error::IncompleteRecord("no matrices to average".into()))?;
        let t = first.tasks;
        if let Some(bad) = ms.iter().find(|m| m.tasks != t) {
            return Err(Error::LengthMismatch {
                left: t,
                right: bad.tasks,
            });
        }
        let mut out = AccuracyMatrix::new(t);
        for j in 0..t {
            for i in 0..=j {
                let vals: Option<Vec<f64>> = ms.iter().map(|m| m.entries[i][j]).collect();
                out.entries[i][j] = vals.map(|v| f(&v));
            }
            let vals: Option<Vec<f64>> = ms.iter().map(|m| m.baseline[j]).collect();
            out.baseline[j] = vals.map(|v| f(&v));
        }
        Ok(out)
    }

    /// Entrywise mean; an entry is defined only if defined in every input.
    pub fn mean(ms: &[AccuracyMatrix]) -> Result<AccuracyMatrix> {
        Self::zip_entries(ms, mean)
    }

    /// Entrywise population standard deviation.
    pub fn std(ms: &[AccuracyMatrix]) -> Result<AccuracyMatrix> {
        Self::zip_entries(ms, std)
    }

    /// Header `task,T1..Tn`, one row per task and a `Tbase` row; undefined
    /// cells are empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["task".to_string()];
        header.extend((1..=self.tasks).map(|j| format!("T{j}")));
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let res: csv::Result<()> = (|| {
            wr.write_record(&header)?;
            for i in 0..self.tasks {
                let mut rec = vec![format!("T{}", i + 1)];
                rec.extend(self.entries[i].iter().map(|&v| cell(v)));
                wr.write_record(&rec)?;
            }
            let mut rec = vec!["Tbase".to_string()];
            rec.extend(self.baseline.iter().map(|&v| cell(v)));
            wr.write_record(&rec)?;
            wr.flush()?;
            Ok(())
        })();
        res.map_err(|e| Error::InvalidConfig(format!("csv write: {e}")))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf8 csv")
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let bad = |m: String| Error::IncompleteRecord(format!("accuracy csv: {m}"));
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(|e| bad(e.to_string()))?.clone();
        let t = header.len().saturating_sub(1);
        if header.get(0) != Some("task")
            || (1..=t).any(|j| header.get(j) != Some(format!("T{j}").as_str()))
        {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut m = AccuracyMatrix::new(t);
        let mut seen_base = false;
        let mut rows = 0;
        for rec in rd.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let name = rec.get(0).unwrap_or("");
            let parse = |j: usize| -> Result<Option<f64>> {
                match rec.get(j).unwrap_or("") {
                    "" => Ok(None),
                    s => s
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|e| bad(format!("{s:?}: {e}"))),
                }
            };
            if name == "Tbase" {
                for j in 1..=t {
                    if let Some(v) = parse(j)? {
                        m.set_baseline(j, v)?;
                    }
                }
                seen_base = true;
            } else {
                let i: usize = name
                    .strip_prefix('T')
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(format!("row label {name:?}")))?;
                for j in 1..=t {
                    if let Some(v) = parse(j)? {
                        m.set(i, j, v)?;
                    }
                }
                rows += 1;
            }
        }
        if rows != t || !seen_base {
            return Err(bad(format!("expected {t} task rows and a Tbase row")));
        }
        Ok(m)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub stage: usize,
    /// `per_task[i]`: forgetting of task `i+1` at `stage`.
    pub per_task: Vec<f64>,
    /// Mean of `per_task`; zero at the first stage.
    pub average: f64,
    pub bwt: Vec<f64>,
}

/// Peak accuracy over stages `i..t-1` minus accuracy at stage `t`, for every
/// task `i < t`.
pub fn forgetting(matrix: &AccuracyMatrix, stage: usize) -> Result<ForgettingReport> {
    matrix.check_stage(stage)?;
    let missing =
        |i: usize, j: usize| Error::IncompleteRecord(format!("no entry for task {i} at stage {j}"));
    let mut per_task = Vec::with_capacity(stage - 1);
    for i in 1..stage {
        let mut peak = f64::NEG_INFINITY;
        for l in i..stage {
            peak = peak.max(matrix.get(i, l).ok_or_else(|| missing(i, l))?);
        }
        let cur = matrix.get(i, stage).ok_or_else(|| missing(i, stage))?;
        per_task.push(peak - cur);
    }
    let average = if per_task.is_empty() {
        0.0
    } else {
        mean(&per_task)
    };
    let bwt = per_task.iter().map(|f| -f).collect();
    Ok(ForgettingReport {
        stage,
        per_task,
        average,
        bwt,
    })
}

/// Places the per-stage accuracy rows of a finished run into a matrix.
pub fn assemble_matrix(record: &RunRecord) -> Result<AccuracyMatrix> {
    if let Some(f) = &record.failure {
        return Err(Error::IncompleteRecord(format!("run failed: {f}")));
    }
    let t = record.num_tasks;
    if record.stages.len() != t {
        return Err(Error::IncompleteRecord(format!(
            "{} of {t} stages recorded",
            record.stages.len()
        )));
    }
    let rows: Vec<Vec<f64>> = record
        .stages
        .iter()
        .map(|s| s.task_accuracy.clone())
        .collect();
    let base: Vec<f64> = record.stages.iter().map(|s| s.baseline_accuracy).collect();
    AccuracyMatrix::from_rows(&rows, &base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(matches!(
            accuracy(&[1], &[1, 2]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn two_task_placement() {
        let m = AccuracyMatrix::from_rows(&[vec![0.9], vec![0.8, 0.95]], &[0.5, 0.6]).unwrap();
        assert_eq!(m.get(1, 1), Some(0.9));
        assert_eq!(m.get(1, 2), Some(0.8));
        assert_eq!(m.get(2, 2), Some(0.95));
        assert_eq!(m.get(2, 1), None);
        assert_eq!(m.baseline_final(), Some(0.6));
    }

    #[test]
    fn constant_row_has_no_forgetting() {
        let rows: Vec<Vec<f64>> = (1..=4).map(|j| vec![0.7; j]).collect();
        let m = AccuracyMatrix::from_rows(&rows, &[]).unwrap();
        let f = forgetting(&m, 4).unwrap();
        assert_eq!(f.per_task, vec![0.0; 3]);
        assert_eq!(f.average, 0.0);
    }

    #[test]
    fn first_row_peak_minus_current() {
        let row = [0.98, 0.96, 0.96, 0.95, 0.91, 0.85];
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|j| {
                let mut r = vec![row[j]];
                r.extend(vec![0.5; j]);
                r
            })
            .collect();
        let m = AccuracyMatrix::from_rows(&rows, &[]).unwrap();
        assert_abs_diff_eq!(
            forgetting(&m, 6).unwrap().per_task[0],
            0.13,
            epsilon = 1e-12
        );
    }

    #[test]
    fn stage_out_of_range() {
        let m = AccuracyMatrix::new(2);
        assert!(matches!(
            forgetting(&m, 3),
            Err(Error::StageOutOfRange { .. })
        ));
        assert!(matches!(
            forgetting(&m, 0),
            Err(Error::StageOutOfRange { .. })
        ));
    }

    #[test]
    fn out_of_unit_interval_rejected() {
        let mut m = AccuracyMatrix::new(2);
        assert!(matches!(
            m.set(1, 1, 1.5),
            Err(Error::AccuracyOutOfRange(_))
        ));
        assert!(m.set(2, 1, 0.5).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = AccuracyMatrix::from_rows(&[vec![0.9], vec![0.8, 0.95]], &[0.45, 0.875]).unwrap();
        let s = m.to_csv_string();
        assert!(s.starts_with("task,T1,T2\n"));
        assert!(s.contains("Tbase,"));
        assert_eq!(AccuracyMatrix::read_csv(s.as_bytes()).unwrap(), m);
    }

    #[test]
    fn mean_and_std_entrywise() {
        let a = AccuracyMatrix::from_rows(&[vec![0.2], vec![0.4, 0.6]], &[0.1, 0.3]).unwrap();
        let b = AccuracyMatrix::from_rows(&[vec![0.4], vec![0.8, 0.6]], &[0.3, 0.5]).unwrap();
        let m = AccuracyMatrix::mean(&[a.clone(), b.clone()]).unwrap();
        assert_abs_diff_eq!(m.get(1, 1).unwrap(), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(m.get(1, 2).unwrap(), 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(m.baseline(2).unwrap(), 0.4, epsilon = 1e-12);
        let s = AccuracyMatrix::std(&[a, b]).unwrap();
        assert_abs_diff_eq!(s.get(2, 2).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.get(1, 2).unwrap(), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn round_half_up() {
        assert_eq!(round2(0.125), 0.13);
        assert_eq!(round2(0.144), 0.14);
    }
}
