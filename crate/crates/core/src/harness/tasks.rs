use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Task};
use crate::deptree::DepTree;

/// Depth labels run `0..DEPTH_CLASSES - 1`; deeper tokens share the last class.
pub const DEPTH_CLASSES: usize = 8;

/// Longest run of degenerate trees tolerated before giving up.
const MAX_RESAMPLES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Targets {
    /// Capped depth label per token.
    Depth(Vec<usize>),
    /// Query pairs `(i, j, tree_distance(i, j) <= threshold)`.
    Pairs(Vec<(usize, usize, bool)>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub token_ids: Vec<usize>,
    pub tree: DepTree,
    pub targets: Targets,
}

impl TaskSample {
    pub fn task(&self) -> Task {
        match self.targets {
            Targets::Depth(_) => Task::Depth,
            Targets::Pairs(_) => Task::Distance,
        }
    }

    /// Number of labelled units: tokens or query pairs.
    pub fn num_targets(&self) -> usize {
        match &self.targets {
            Targets::Depth(d) => d.len(),
            Targets::Pairs(p) => p.len(),
        }
    }

    /// Class index of every labelled unit, in order.
    pub fn labels(&self) -> Vec<usize> {
        match &self.targets {
            Targets::Depth(d) => d.clone(),
            Targets::Pairs(p) => p.iter().map(|&(_, _, l)| usize::from(l)).collect(),
        }
    }
}

/// Dataset shape shared by the train and test splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub task: Task,
    pub train_size: usize,
    pub test_size: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub threshold: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: Task::Depth,
            train_size: 4000,
            test_size: 1000,
            max_len: 24,
            vocab_size: 100,
            threshold: 1,
            seed: 0,
        }
    }
}

/// Train and test splits drawn from independent streams of `cfg.seed`.
pub fn generate(cfg: &DataConfig) -> Result<(Vec<TaskSample>, Vec<TaskSample>), HarnessError> {
    let test_seed = cfg.seed ^ 0x7e57_0000_0000_0000;
    let gen = |count, seed| match cfg.task {
        Task::Depth => gen_depth_task(count, cfg.max_len, cfg.vocab_size, seed),
        Task::Distance => {
            gen_distance_task(count, cfg.max_len, cfg.vocab_size, cfg.threshold, seed)
        }
    };
    Ok((
        gen(cfg.train_size, cfg.seed)?,
        gen(cfg.test_size, test_seed)?,
    ))
}

fn check_sizes(max_len: usize, min_len: usize, vocab_size: usize) -> Result<(), HarnessError> {
    if max_len < min_len {
        return Err(HarnessError::InvalidArgument(format!(
            "max_len must be at least {min_len}, got {max_len}"
        )));
    }
    if vocab_size == 0 {
        return Err(HarnessError::InvalidArgument("vocabulary is empty".into()));
    }
    Ok(())
}

fn random_sentence(
    rng: &mut ChaCha8Rng,
    min_len: usize,
    max_len: usize,
    vocab_size: usize,
) -> (Vec<usize>, DepTree) {
    let len = rng.gen_range(min_len..=max_len);
    let tree = DepTree::random(len, rng, true);
    let tokens = (0..len).map(|_| rng.gen_range(0..vocab_size)).collect();
    (tokens, tree)
}

/// Sentences with uniformly drawn tokens, labelled with capped tree depth.
///
/// Every sentence has exactly `max_len` tokens. With varying lengths the
/// label marginal would depend on length (the root label occurs once per
/// sentence), and length is visible to a model without any position signal.
pub fn gen_depth_task(
    count: usize,
    max_len: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<TaskSample>, HarnessError> {
    check_sizes(max_len, 2, vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let (token_ids, tree) = random_sentence(&mut rng, max_len, max_len, vocab_size);
            let labels = tree
                .depths()
                .iter()
                .map(|&d| d.min(DEPTH_CLASSES - 1))
                .collect();
            TaskSample {
                token_ids,
                tree,
                targets: Targets::Depth(labels),
            }
        })
        .collect())
}

/// Query pairs balanced within every sequential distance: for each chosen
/// offset `|i - j|` one positive and one negative pair are drawn, so the
/// offset is independent of the label. At most `max_pairs` pairs (rounded
/// down to even) are returned.
pub fn stratified_pairs<R: Rng + ?Sized>(
    tree: &DepTree,
    threshold: usize,
    max_pairs: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize, bool)>, HarnessError> {
    let n = tree.len();
    let mut strata: Vec<(Vec<(usize, usize)>, Vec<(usize, usize)>)> = Vec::new();
    for offset in 1..n {
        let (mut near, mut far) = (Vec::new(), Vec::new());
        for i in 0..n - offset {
            let j = i + offset;
            if tree.tree_distance(i, j)? <= threshold {
                near.push((i, j));
            } else {
                far.push((i, j));
            }
        }
        if !near.is_empty() && !far.is_empty() {
            near.shuffle(rng);
            far.shuffle(rng);
            strata.push((near, far));
        }
    }
    if strata.is_empty() || max_pairs < 2 {
        return Err(HarnessError::DegenerateTree);
    }
    strata.shuffle(rng);
    let mut pairs = Vec::with_capacity(max_pairs);
    'fill: loop {
        let mut progressed = false;
        for (near, far) in strata.iter_mut() {
            if pairs.len() + 2 > max_pairs {
                break 'fill;
            }
            if let (Some(a), Some(b)) = (near.pop(), far.pop()) {
                pairs.push((a, true));
                pairs.push((b, false));
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    pairs.shuffle(rng);
    Ok(pairs
        .into_iter()
        .map(|((i, j), label)| {
            if rng.gen_bool(0.5) {
                (i, j, label)
            } else {
                (j, i, label)
            }
        })
        .collect())
}

/// Query pairs per sentence in the distance task.
const PAIRS_PER_SENTENCE: usize = 8;

/// Sentences with pair queries `tree_distance(i, j) <= threshold`. Trees that
/// cannot be stratified are redrawn.
pub fn gen_distance_task(
    count: usize,
    max_len: usize,
    vocab_size: usize,
    threshold: usize,
    seed: u64,
) -> Result<Vec<TaskSample>, HarnessError> {
    check_sizes(max_len, 3, vocab_size)?;
    if threshold == 0 {
        return Err(HarnessError::InvalidArgument(
            "threshold must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    let mut failures = 0;
    while samples.len() < count {
        let (token_ids, tree) = random_sentence(&mut rng, 3, max_len, vocab_size);
        match stratified_pairs(&tree, threshold, PAIRS_PER_SENTENCE, &mut rng) {
            Ok(pairs) => {
                failures = 0;
                samples.push(TaskSample {
                    token_ids,
                    tree,
                    targets: Targets::Pairs(pairs),
                });
            }
            Err(HarnessError::DegenerateTree) => {
                failures += 1;
                if failures > MAX_RESAMPLES {
                    return Err(HarnessError::InvalidArgument(format!(
                        "no stratifiable tree with max_len {max_len} and threshold {threshold}"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
    let r = distance_label_correlation(&samples);
    if r.abs() >= 0.2 {
        return Err(HarnessError::Correlated(r));
    }
    Ok(samples)
}

/// Pearson correlation between `|i - j|` and the label over every query pair
/// (0 when either side is constant).
pub fn distance_label_correlation(samples: &[TaskSample]) -> f64 {
    let points: Vec<(f64, f64)> = samples
        .iter()
        .filter_map(|s| match &s.targets {
            Targets::Pairs(p) => Some(p),
            Targets::Depth(_) => None,
        })
        .flatten()
        .map(|&(i, j, l)| (i.abs_diff(j) as f64, f64::from(u8::from(l))))
        .collect();
    let n = points.len() as f64;
    if points.is_empty() {
        return 0.0;
    }
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x / n, b + y / n));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &points {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

pub fn write_jsonl<W: Write>(mut w: W, samples: &[TaskSample]) -> Result<(), HarnessError> {
    for (k, s) in samples.iter().enumerate() {
        serde_json::to_writer(&mut w, s).map_err(|source| HarnessError::Json {
            line: k + 1,
            source,
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TaskSample>, HarnessError> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| HarnessError::Json {
                line: k + 1,
                source,
            })?,
        );
    }
    Ok(out)
}
