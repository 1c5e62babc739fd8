use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tasks::{DataConfig, Targets, TaskSample};
use super::{generate, HarnessError, Task};
use crate::deptree::SubwordAlignment;
use crate::nn::checkpoint;
use crate::nn::encoder::{encoder_forward, init_params};
use crate::nn::{AblationRow, EncoderConfig, ParamStore, Tape, Tensor, Var};
use crate::posenc::{PositionAnnotation, PositionConfig, Rule1};

/// Everything needed to rebuild a model from a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub task: Task,
    pub rule1: Rule1,
}

impl ModelSpec {
    pub fn position_config(&self) -> PositionConfig {
        PositionConfig {
            d_model: self.encoder.d_model,
            r_clip: self.encoder.r_clip,
            fusion_mode: self.encoder.fusion_mode,
            rule1: self.rule1,
        }
    }
}

/// Encoder plus a zero-initialised classification head: per token for the
/// depth task, bilinear over token pairs for the distance task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub spec: ModelSpec,
    pub params: ParamStore<f32>,
}

impl TaskModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, HarnessError> {
        spec.encoder.validate()?;
        let d = spec.encoder.d_model;
        let c = spec.task.num_classes();
        let mut params = init_params(&spec.encoder, seed);
        match spec.task {
            Task::Depth => {
                params.insert("head.weight", Tensor::zeros(&[c, d]));
                params.insert("head.bias", Tensor::zeros(&[c]));
            }
            Task::Distance => {
                params.insert("pair.weight", Tensor::zeros(&[c, d, d]));
                params.insert("pair.bias", Tensor::zeros(&[c]));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn annotate(&self, sample: &TaskSample) -> Result<PositionAnnotation, HarnessError> {
        let align = SubwordAlignment::identity(sample.tree.len(), false);
        Ok(PositionAnnotation::annotate(
            &sample.tree,
            &align,
            &self.spec.position_config(),
        )?)
    }

    /// Records the forward pass and returns `(loss, logits)`.
    fn record(
        &self,
        tape: &mut Tape<'_, f32>,
        sample: &TaskSample,
        ann: &PositionAnnotation,
    ) -> Result<(Var, Var), HarnessError> {
        let h = encoder_forward(tape, &self.spec.encoder, &sample.token_ids, ann)?.output;
        let logits = match (&sample.targets, self.spec.task) {
            (Targets::Depth(_), Task::Depth) => {
                let w = tape.param("head.weight")?;
                let b = tape.param("head.bias")?;
                let z = tape.matmul(h, w, true);
                tape.add_row(z, b)
            }
            (Targets::Pairs(p), Task::Distance) => {
                let w = tape.param("pair.weight")?;
                let b = tape.param("pair.bias")?;
                tape.pair_bilinear(h, w, b, p.iter().map(|&(i, j, _)| (i, j)).collect())
            }
            _ => {
                return Err(HarnessError::TaskMismatch {
                    index: 0,
                    expected: self.spec.task,
                })
            }
        };
        let loss = tape.cross_entropy(logits, sample.labels());
        Ok((loss, logits))
    }

    /// Predicted class of every labelled unit of `sample`.
    pub fn predict(&self, sample: &TaskSample) -> Result<Vec<usize>, HarnessError> {
        let ann = self.annotate(sample)?;
        let mut tape = Tape::new(&self.params);
        let (_, logits) = self.record(&mut tape, sample, &ann)?;
        Ok(argmax_rows(tape.value(logits)))
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        Ok(checkpoint::save(path, &self.spec, &self.params)?)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let (spec, params): (ModelSpec, _) = checkpoint::load(path)?;
        let model = Self { spec, params };
        // Every expected parameter must be present with its expected shape.
        let reference = Self::new(spec, 0)?;
        for (name, t) in reference.params.iter() {
            let got = model.params.get(name)?;
            if got.shape() != t.shape() {
                return Err(crate::nn::NnError::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                ))
                .into());
            }
        }
        Ok(model)
    }
}

fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let (_, c) = logits.matrix_dims();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (k, &v)| {
                    if v > best.1 {
                        (k, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub rule1: Rule1,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            rule1: Rule1::default(),
            epochs: 6,
            batch_size: 16,
            optimizer: Optimizer::default(),
            learning_rate: 1e-3,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sentence training loss.
    pub loss: f64,
    /// Training accuracy over labelled units, measured during the epoch.
    pub accuracy: f64,
}

/// Accuracy of always predicting the most frequent training label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub majority_class: usize,
    pub accuracy: f64,
    /// Binomial standard error of `accuracy` over the test units.
    pub standard_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Task,
    pub config_row: Option<AblationRow>,
    pub flags: String,
    pub seed: u64,
    pub train_sentences: usize,
    pub test_units: usize,
    pub epochs: Vec<EpochStats>,
    pub final_accuracy: f64,
    pub baseline: Baseline,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

fn check_task(samples: &[TaskSample], task: Task) -> Result<(), HarnessError> {
    match samples.iter().position(|s| s.task() != task) {
        Some(index) => Err(HarnessError::TaskMismatch {
            index,
            expected: task,
        }),
        None => Ok(()),
    }
}

pub fn evaluate(model: &TaskModel, samples: &[TaskSample]) -> Result<Evaluation, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    check_task(samples, model.spec.task)?;
    let (mut correct, mut total) = (0, 0);
    for s in samples {
        let pred = model.predict(s)?;
        correct += pred
            .iter()
            .zip(s.labels())
            .filter(|(p, l)| **p == *l)
            .count();
        total += pred.len();
    }
    Ok(Evaluation {
        correct,
        total,
        accuracy: correct as f64 / total as f64,
    })
}

pub fn marginal_baseline(train: &[TaskSample], test: &[TaskSample], classes: usize) -> Baseline {
    let mut counts = vec![0usize; classes];
    for l in train.iter().flat_map(|s| s.labels()) {
        counts[l] += 1;
    }
    let majority_class = counts
        .iter()
        .enumerate()
        .fold(
            (0, 0),
            |best, (k, &c)| if c > best.1 { (k, c) } else { best },
        )
        .0;
    let labels: Vec<usize> = test.iter().flat_map(|s| s.labels()).collect();
    let n = labels.len().max(1) as f64;
    let p = labels.iter().filter(|&&l| l == majority_class).count() as f64 / n;
    Baseline {
        majority_class,
        accuracy: p,
        standard_error: (p * (1.0 - p) / n).sqrt(),
    }
}

struct OptimizerState {
    step: i32,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl OptimizerState {
    fn new(params: &ParamStore<f32>) -> Self {
        Self {
            step: 0,
            moments: params
                .iter()
                .map(|(_, t)| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
                .collect(),
        }
    }

    /// Applies the accumulated gradients (already averaged and clipped).
    fn apply(
        &mut self,
        cfg: &TrainConfig,
        params: &mut ParamStore<f32>,
        grads: &[Option<Vec<f32>>],
    ) {
        self.step += 1;
        let lr = cfg.learning_rate as f32;
        for (((_, t), g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            match cfg.optimizer {
                Optimizer::Sgd => {
                    if let Some(g) = g {
                        t.data_mut()
                            .iter_mut()
                            .zip(g)
                            .for_each(|(w, &g)| *w -= lr * g);
                    }
                }
                Optimizer::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let (b1, b2, eps) = (beta1 as f32, beta2 as f32, epsilon as f32);
                    let c1 = 1.0 - b1.powi(self.step);
                    let c2 = 1.0 - b2.powi(self.step);
                    for k in 0..t.numel() {
                        let gk = g.as_ref().map_or(0.0, |g| g[k]);
                        m[k] = b1 * m[k] + (1.0 - b1) * gk;
                        v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                        let update = (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                        t.data_mut()[k] -= lr * update;
                    }
                }
            }
        }
    }
}

/// Trains a fresh model on `train_set` and reports held-out accuracy on
/// `test_set`. Single-threaded and deterministic given `cfg.seed`.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[TaskSample],
    test_set: &[TaskSample],
) -> Result<(TaskModel, RunReport), HarnessError> {
    let start = Instant::now();
    let first = train_set.first().ok_or(HarnessError::EmptyDataset)?;
    if test_set.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate >= 0.0) {
        return Err(HarnessError::InvalidArgument(
            "batch size must be positive and the learning rate non-negative".into(),
        ));
    }
    let task = first.task();
    check_task(train_set, task)?;
    check_task(test_set, task)?;

    let spec = ModelSpec {
        encoder: cfg.encoder,
        task,
        rule1: cfg.rule1,
    };
    let mut model = TaskModel::new(spec, cfg.seed)?;
    let annotations = train_set
        .iter()
        .map(|s| model.annotate(s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut opt = OptimizerState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0b5e_55ed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut total) = (0.0f64, 0usize, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Option<Vec<f32>>> = vec![None; model.params.len()];
            for &k in batch {
                let sample = &train_set[k];
                let mut tape = Tape::new(&model.params);
                let (loss, logits) = model.record(&mut tape, sample, &annotations[k])?;
                let l = tape.value(loss).data()[0];
                if !l.is_finite() {
                    return Err(HarnessError::NonFiniteLoss {
                        epoch,
                        step,
                        loss: f64::from(l),
                    });
                }
                loss_sum += f64::from(l);
                let pred = argmax_rows(tape.value(logits));
                correct += pred
                    .iter()
                    .zip(sample.labels())
                    .filter(|(p, l)| **p == *l)
                    .count();
                total += pred.len();
                let grads = tape.backward(loss)?;
                for (id, g) in grads.iter() {
                    match &mut acc[id.0] {
                        Some(a) => a.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                        slot => *slot = Some(g.to_vec()),
                    }
                }
            }
            let scale = 1.0 / batch.len() as f32;
            let mut norm_sq = 0.0f64;
            for g in acc.iter_mut().flatten() {
                for v in g.iter_mut() {
                    *v *= scale;
                    norm_sq += f64::from(*v) * f64::from(*v);
                }
            }
            if !norm_sq.is_finite() {
                return Err(HarnessError::NonFiniteLoss {
                    epoch,
                    step,
                    loss: norm_sq,
                });
            }
            if let Some(max) = cfg.clip_norm {
                let norm = norm_sq.sqrt();
                if norm > max {
                    let shrink = (max / norm) as f32;
                    acc.iter_mut()
                        .flatten()
                        .flatten()
                        .for_each(|v| *v *= shrink);
                }
            }
            opt.apply(cfg, &mut model.params, &acc);
        }
        epochs.push(EpochStats {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            accuracy: correct as f64 / total.max(1) as f64,
        });
    }

    let held_out = evaluate(&model, test_set)?;
    let report = RunReport {
        task,
        config_row: cfg.encoder.row(),
        flags: cfg.encoder.flags.to_string(),
        seed: cfg.seed,
        train_sentences: train_set.len(),
        test_units: held_out.total,
        epochs,
        final_accuracy: held_out.accuracy,
        baseline: marginal_baseline(train_set, test_set, task.num_classes()),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Trains every requested row on the same data with the same seed. `observe`
/// sees each trained model and its report as soon as the row finishes.
pub fn run_ablation(
    rows: &[AblationRow],
    data: &DataConfig,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&TaskModel, &RunReport) -> Result<(), HarnessError>,
) -> Result<Vec<RunReport>, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::InvalidArgument(
            "no ablation rows selected".into(),
        ));
    }
    let (train_set, test_set) = generate(data)?;
    let mut rows = rows.to_vec();
    rows.sort_unstable();
    rows.dedup();
    let mut reports = Vec::with_capacity(rows.len());
    for row in rows {
        let row_cfg = TrainConfig {
            encoder: cfg.encoder.with_row(row),
            ..*cfg
        };
        let (model, report) = train(&row_cfg, &train_set, &test_set)?;
        observe(&model, &report)?;
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{gen_depth_task, gen_distance_task, DEPTH_CLASSES};

    fn small(row: u8) -> TrainConfig {
        TrainConfig {
            encoder: EncoderConfig {
                d_model: 16,
                d_ffn: 32,
                vocab_size: 20,
                ..EncoderConfig::default()
            }
            .with_row(AblationRow::new(row).unwrap()),
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = gen_depth_task(12, 8, 20, 1).unwrap();
        for optimizer in [Optimizer::default(), Optimizer::Sgd] {
            let cfg = TrainConfig {
                learning_rate: 0.0,
                epochs: 3,
                optimizer,
                ..small(9)
            };
            let (model, _) = train(&cfg, &data, &data).unwrap();
            let fresh = TaskModel::new(model.spec, cfg.seed).unwrap();
            assert_eq!(model.params, fresh.params);
        }
    }

    #[test]
    fn initial_loss_is_uniform() {
        // A zero head gives identical logits, hence loss ln(C) on the first step.
        for (data, classes) in [
            (gen_depth_task(1, 10, 20, 3).unwrap(), DEPTH_CLASSES),
            (gen_distance_task(1, 10, 20, 1, 3).unwrap(), 2),
        ] {
            let cfg = TrainConfig {
                learning_rate: 0.0,
                batch_size: 1,
                ..small(9)
            };
            let (_, report) = train(&cfg, &data, &data).unwrap();
            assert!((report.epochs[0].loss - (classes as f64).ln()).abs() < 1e-5);
        }
    }

    #[test]
    fn single_sample_is_memorised() {
        for data in [
            gen_depth_task(1, 12, 100, 4).unwrap(),
            gen_distance_task(1, 12, 100, 1, 4).unwrap(),
        ] {
            let cfg = TrainConfig {
                encoder: EncoderConfig::default().with_row(AblationRow::new(9).unwrap()),
                epochs: 200,
                batch_size: 1,
                ..TrainConfig::default()
            };
            let (model, report) = train(&cfg, &data, &data).unwrap();
            assert_eq!(report.epochs.last().unwrap().accuracy, 1.0);
            assert_eq!(evaluate(&model, &data).unwrap().accuracy, 1.0);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = gen_distance_task(10, 10, 20, 1, 8).unwrap();
        let (m1, r1) = train(&small(9), &data, &data).unwrap();
        let (m2, r2) = train(&small(9), &data, &data).unwrap();
        assert_eq!(m1.params, m2.params);
        assert_eq!(r1.epochs, r2.epochs);
        assert_eq!(r1.final_accuracy, r2.final_accuracy);
    }

    #[test]
    fn checkpoint_reproduces_evaluation() {
        let data = gen_depth_task(10, 10, 20, 2).unwrap();
        let (model, report) = train(&small(6), &data, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = TaskModel::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(
            evaluate(&back, &data).unwrap().accuracy,
            report.final_accuracy
        );
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let depth = gen_depth_task(2, 6, 20, 0).unwrap();
        let dist = gen_distance_task(2, 6, 20, 1, 0).unwrap();
        assert!(matches!(
            train(&small(1), &[], &depth),
            Err(HarnessError::EmptyDataset)
        ));
        assert!(matches!(
            train(&small(1), &depth, &dist),
            Err(HarnessError::TaskMismatch {
                index: 0,
                expected: Task::Depth
            })
        ));
        let (model, _) = train(&small(1), &depth, &depth).unwrap();
        assert!(matches!(
            evaluate(&model, &[]),
            Err(HarnessError::EmptyDataset)
        ));
    }

    #[test]
    fn baseline_uses_training_majority() {
        let data = gen_depth_task(50, 10, 20, 0).unwrap();
        let b = marginal_baseline(&data, &data, DEPTH_CLASSES);
        let labels: Vec<usize> = data.iter().flat_map(|s| s.labels()).collect();
        let top = (0..DEPTH_CLASSES)
            .map(|c| labels.iter().filter(|&&l| l == c).count())
            .max()
            .unwrap();
        assert_eq!(b.accuracy, top as f64 / labels.len() as f64);
        assert!(b.standard_error > 0.0);
    }
}
