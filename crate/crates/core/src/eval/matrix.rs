use crate::error::{Error, Result};

/// A model snapshot: after `epoch` (1-based) of training stage `stage` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CheckpointId {
    pub stage: usize,
    pub epoch: usize,
}

/// Score of every checkpoint on every evaluation task, in `[0, 100]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    tasks: Vec<String>,
    checkpoints: Vec<CheckpointId>,
    cells: Vec<Vec<Option<f64>>>,
}

impl ScoreMatrix {
    pub fn new(tasks: Vec<String>) -> Self {
        Self {
            tasks,
            checkpoints: Vec::new(),
            cells: Vec::new(),
        }
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn checkpoints(&self) -> &[CheckpointId] {
        &self.checkpoints
    }

    fn task_index(&self, task: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t == task)
            .ok_or_else(|| Error::Data(format!("unknown eval task {task:?}")))
    }

    pub fn set(&mut self, checkpoint: CheckpointId, task: &str, score: f64) -> Result<()> {
        if !(0.0..=100.0).contains(&score) {
            return Err(Error::Data(format!("score {score} outside [0, 100]")));
        }
        let col = self.task_index(task)?;
        let row = match self.checkpoints.iter().position(|c| *c == checkpoint) {
            Some(r) => r,
            None => {
                self.checkpoints.push(checkpoint);
                self.cells.push(vec![None; self.tasks.len()]);
                self.checkpoints.len() - 1
            }
        };
        self.cells[row][col] = Some(score);
        Ok(())
    }

    pub fn get(&self, checkpoint: CheckpointId, task: &str) -> Option<f64> {
        let col = self.task_index(task).ok()?;
        let row = self.checkpoints.iter().position(|c| *c == checkpoint)?;
        self.cells[row][col]
    }

    /// Scores of `task` in checkpoint order.
    pub fn series(&self, task: &str) -> Result<Vec<f64>> {
        let col = self.task_index(task)?;
        Ok(self.cells.iter().filter_map(|row| row[col]).collect())
    }

    pub fn missing(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (c, row) in self.checkpoints.iter().zip(&self.cells) {
            for (t, cell) in self.tasks.iter().zip(row) {
                if cell.is_none() {
                    out.push(format!("stage {} epoch {} / {t}", c.stage, c.epoch));
                }
            }
        }
        if self.checkpoints.is_empty() {
            out.push("no checkpoints".into());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    /// Mean of the final-checkpoint scores over eval tasks.
    pub average: f64,
    pub final_scores: Vec<(String, f64)>,
    /// Best score ever reached minus final score, per task.
    pub forgetting: Vec<(String, f64)>,
}

pub fn summarize(matrix: &ScoreMatrix) -> Result<Summary> {
    let missing = matrix.missing();
    if !missing.is_empty() {
        return Err(Error::IncompleteMatrix(missing));
    }
    let last = matrix.cells.last().expect("non-empty");
    let mut final_scores = Vec::new();
    let mut forgetting = Vec::new();
    for (col, task) in matrix.tasks.iter().enumerate() {
        let fin = last[col].expect("complete");
        let best = matrix
            .cells
            .iter()
            .map(|r| r[col].expect("complete"))
            .fold(f64::NEG_INFINITY, f64::max);
        final_scores.push((task.clone(), fin));
        forgetting.push((task.clone(), best - fin));
    }
    let average = final_scores.iter().map(|(_, s)| s).sum::<f64>() / final_scores.len() as f64;
    Ok(Summary {
        average,
        final_scores,
        forgetting,
    })
}

/// Averages of several task-order runs with their mean and population std.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderSummary {
    pub averages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize_orders(summaries: &[Summary]) -> Result<OrderSummary> {
    if summaries.is_empty() {
        return Err(Error::Data("no runs to summarize".into()));
    }
    let averages: Vec<f64> = summaries.iter().map(|s| s.average).collect();
    let n = averages.len() as f64;
    let mean = averages.iter().sum::<f64>() / n;
    let var = averages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    Ok(OrderSummary {
        averages,
        mean,
        std: var.sqrt(),
    })
}
