//! Synthetic structure-sensitive tasks, training and the ablation runner.
//!
//! Two tasks isolate the two pathways of the encoder. In the *depth* task
//! every token is labelled with its tree depth; tokens are drawn uniformly, so
//! the label is only recoverable from absolute structural positions. In the
//! *distance* task the model decides whether two tokens are within a tree
//! distance threshold, with query pairs stratified so that their sequential
//! distance says nothing about the answer.

mod tasks;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deptree::TreeError;
use crate::nn::NnError;
use crate::posenc::PositionError;

pub use tasks::{
    distance_label_correlation, gen_depth_task, gen_distance_task, generate, read_jsonl,
    stratified_pairs, write_jsonl, DataConfig, Targets, TaskSample, DEPTH_CLASSES,
};
pub use train::{
    evaluate, marginal_baseline, run_ablation, train, Baseline, EpochStats, Evaluation, ModelSpec,
    Optimizer, RunReport, TaskModel, TrainConfig,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("tree admits no stratified query pairs")]
    DegenerateTree,
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sequential distance correlates with the label (r = {0:.3})")]
    Correlated(f64),
    #[error("sample {index} does not match the {expected} task")]
    TaskMismatch { index: usize, expected: Task },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Position(#[from] PositionError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Depth,
    Distance,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Depth => DEPTH_CLASSES,
            Task::Distance => 2,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Depth => "depth",
            Task::Distance => "distance",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "depth" => Ok(Task::Depth),
            "distance" => Ok(Task::Distance),
            other => Err(format!(
                "unknown task {other:?} (expected depth or distance)"
            )),
        }
    }
}
