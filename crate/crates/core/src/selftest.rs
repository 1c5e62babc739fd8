//! Self-checks shipped with the library and run by `structpos selftest`.
//!
//! Each suite compares the production code against an independent
//! formulation (or an algebraic property) on random inputs and reports a
//! single pass/fail verdict with a short diagnostic.

use std::collections::VecDeque;
use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deptree::{DepTree, SubwordAlignment};
use crate::nn::gradcheck::grad_check;
use crate::nn::{AblationRow, Encoder, EncoderConfig, NnError, PositionFlags, Real};
use crate::posenc::{
    abs_structural, clip, rel_structural_matrix, PositionAnnotation, PositionConfig, PositionError,
    RelMatrix, Rule1,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn timed(name: &'static str, body: impl FnOnce() -> Result<String, String>) -> SuiteReport {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    SuiteReport {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

/// Sizes of the randomized suites.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelftestOptions {
    pub trees: usize,
    pub max_tree_len: usize,
    pub permutation_pairs: usize,
    pub seed: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            trees: 1000,
            max_tree_len: 30,
            permutation_pairs: 100,
            seed: 7,
        }
    }
}

/// Relative structural matrix under test.
pub type RelFn<'a> =
    dyn Fn(&DepTree, &SubwordAlignment, &PositionConfig) -> Result<RelMatrix, PositionError> + 'a;

/// Depths by breadth-first search from the root, and for each token the set
/// of its ancestors (itself included) as a membership table.
pub fn bfs_oracle(tree: &DepTree) -> (Vec<usize>, Vec<Vec<bool>>) {
    let n = tree.len();
    let mut children = vec![Vec::new(); n];
    for (k, p) in tree.parents().iter().enumerate() {
        if let Some(p) = *p {
            children[p].push(k);
        }
    }
    let mut depth = vec![0; n];
    let mut ancestors = vec![vec![false; n]; n];
    let root = tree.root();
    ancestors[root][root] = true;
    let mut queue = VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        for &c in &children[u] {
            depth[c] = depth[u] + 1;
            let mut set = ancestors[u].clone();
            set[c] = true;
            ancestors[c] = set;
            queue.push_back(c);
        }
    }
    (depth, ancestors)
}

/// Relative structural matrix computed from the oracle depths and ancestor
/// sets (one token per word, no end-of-sentence symbol).
pub fn oracle_rel_structural(tree: &DepTree, rule1: Rule1, r_clip: usize) -> RelMatrix {
    let (depth, anc) = bfs_oracle(tree);
    RelMatrix::from_fn(tree.len(), |i, j| {
        let (ai, aj) = (depth[i] as i64, depth[j] as i64);
        let same_path = match rule1 {
            Rule1::AncestorPath => anc[i][j] || anc[j][i],
            Rule1::LiteralEdge => i == j || tree.parent(i) == Some(j) || tree.parent(j) == Some(i),
        };
        let v = if same_path {
            ai - aj
        } else {
            (i as i64 - j as i64).signum() * (ai + aj)
        };
        clip(v, r_clip)
    })
}

fn random_trees(count: usize, max_len: usize, seed: u64) -> Vec<DepTree> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(1..=max_len);
            DepTree::random(n, &mut rng, true)
        })
        .collect()
}

/// Production absolute and relative structural positions agree exactly with
/// the BFS/ancestor-set oracle, for both rule-1 interpretations and a clip
/// distance small enough to bind.
pub fn oracle_equivalence(opts: &SelftestOptions) -> SuiteReport {
    timed("oracle-equivalence", || {
        let trees = random_trees(opts.trees, opts.max_tree_len, opts.seed);
        let mut checked = 0usize;
        for (t, tree) in trees.iter().enumerate() {
            let align = SubwordAlignment::identity(tree.len(), false);
            let abs = abs_structural(tree, &align).map_err(|e| e.to_string())?;
            if abs != bfs_oracle(tree).0 {
                return Err(format!("tree {t}: depths differ from BFS"));
            }
            for rule1 in [Rule1::AncestorPath, Rule1::LiteralEdge] {
                for r_clip in [3, 16] {
                    let cfg = PositionConfig {
                        rule1,
                        r_clip,
                        ..PositionConfig::default()
                    };
                    let got =
                        rel_structural_matrix(tree, &align, &cfg).map_err(|e| e.to_string())?;
                    if got != oracle_rel_structural(tree, rule1, r_clip) {
                        return Err(format!(
                            "tree {t}: {rule1:?}, r={r_clip} relative matrix differs"
                        ));
                    }
                    checked += got.as_slice().len();
                }
            }
        }
        Ok(format!(
            "{} trees, {checked} relative entries match",
            trees.len()
        ))
    })
}

/// Rule-2 with its sign factor dropped. Used as a mutation to show that
/// [`antisymmetry`] detects a wrong sign.
pub fn rel_structural_without_rule2_sign(
    tree: &DepTree,
    align: &SubwordAlignment,
    cfg: &PositionConfig,
) -> Result<RelMatrix, PositionError> {
    let abs = abs_structural(tree, align)?;
    Ok(RelMatrix::from_fn(abs.len(), |i, j| {
        let (ai, aj) = (abs[i] as i64, abs[j] as i64);
        let v = match (align.word(i), align.word(j)) {
            _ if i == j => 0,
            (Some(wi), Some(wj)) if tree.is_on_same_root_path(wi, wj).unwrap_or(false) => ai - aj,
            _ => ai + aj,
        };
        clip(v, cfg.r_clip)
    }))
}

/// `rel` is antisymmetric with a zero diagonal and bounded by the clip, on
/// random trees with random sub-word splits and an end-of-sentence symbol.
pub fn antisymmetry(opts: &SelftestOptions, rel: &RelFn<'_>) -> SuiteReport {
    timed("antisymmetry", || {
        let trees = random_trees(opts.trees, opts.max_tree_len, opts.seed ^ 0xa5);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let cfg = PositionConfig::default();
        for (t, tree) in trees.iter().enumerate() {
            let pieces: Vec<usize> = (0..tree.len()).map(|_| rng.gen_range(1..=3)).collect();
            let align = SubwordAlignment::from_piece_counts(&pieces, rng.gen_bool(0.5));
            let m = rel(tree, &align, &cfg).map_err(|e| e.to_string())?;
            let r = cfg.r_clip as i64;
            for i in 0..m.len() {
                if m.get(i, i) != 0 {
                    return Err(format!("tree {t}: diagonal entry {i} is {}", m.get(i, i)));
                }
                for j in 0..m.len() {
                    if m.get(i, j) != -m.get(j, i) {
                        return Err(format!(
                            "tree {t}: rel({i},{j}) = {} but rel({j},{i}) = {}",
                            m.get(i, j),
                            m.get(j, i)
                        ));
                    }
                    if m.get(i, j).abs() > r {
                        return Err(format!("tree {t}: |rel({i},{j})| exceeds {r}"));
                    }
                }
            }
        }
        Ok(format!(
            "{} matrices antisymmetric with zero diagonal",
            trees.len()
        ))
    })
}

fn small_encoder<T: Real>(flags: PositionFlags, seed: u64) -> Result<Encoder<T>, NnError> {
    Encoder::new(
        EncoderConfig {
            d_model: 32,
            d_ffn: 64,
            vocab_size: 50,
            flags,
            ..EncoderConfig::default()
        },
        seed,
    )
}

/// Largest `|out(P x) - P out(x)|` without position signal and smallest
/// such difference with absolute sequential positions, over random
/// (input, non-identity permutation) pairs.
pub fn permutation_gaps<T: Real>(pairs: usize, seed: u64) -> Result<(f64, f64), String> {
    let flat = small_encoder::<T>(PositionFlags::default(), seed).map_err(|e| e.to_string())?;
    let ordered = small_encoder::<T>(AblationRow::new(4).expect("row").flags(), seed)
        .map_err(|e| e.to_string())?;
    let d = flat.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e);
    let (mut worst_off, mut weakest_on) = (0.0f64, f64::INFINITY);
    for _ in 0..pairs {
        let n = rng.gen_range(2..=16);
        let tree = DepTree::random(n, &mut rng, true);
        let tokens: Vec<usize> = (0..n)
            .map(|_| rng.gen_range(0..flat.config.vocab_size))
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        while perm.iter().enumerate().all(|(k, &p)| k == p) {
            perm.shuffle(&mut rng);
        }
        let cfg = PositionConfig {
            d_model: d,
            ..PositionConfig::default()
        };
        let ann = PositionAnnotation::annotate(&tree, &SubwordAlignment::identity(n, false), &cfg)
            .map_err(|e| e.to_string())?;
        let permuted_ann = ann.permuted(&perm, cfg.r_clip);
        let permuted_tokens: Vec<usize> = perm.iter().map(|&p| tokens[p]).collect();
        for (enc, off) in [(&flat, true), (&ordered, false)] {
            let out = enc.forward(&tokens, &ann).map_err(|e| e.to_string())?;
            let out_p = enc
                .forward(&permuted_tokens, &permuted_ann)
                .map_err(|e| e.to_string())?;
            let diff = perm
                .iter()
                .enumerate()
                .flat_map(|(k, &p)| {
                    let got = &out_p.data()[k * d..(k + 1) * d];
                    let want = &out.data()[p * d..(p + 1) * d];
                    got.iter()
                        .zip(want)
                        .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
                })
                .fold(0.0, f64::max);
            if off {
                worst_off = worst_off.max(diff);
            } else {
                weakest_on = weakest_on.min(diff);
            }
        }
    }
    Ok((worst_off, weakest_on))
}

/// Output rows of a permuted input equal the permuted output rows when no
/// position signal is present, and differ once absolute sequential positions
/// are on. Judged in `f64`, where summation-order rounding stays far below
/// the 1e-6 tolerance; the `f32` gap is reported alongside.
pub fn permutation_equivariance(opts: &SelftestOptions) -> SuiteReport {
    timed("permutation-equivariance", || {
        let (off, on) = permutation_gaps::<f64>(opts.permutation_pairs, opts.seed)?;
        let (off32, _) = permutation_gaps::<f32>(opts.permutation_pairs, opts.seed)?;
        let detail = format!(
            "{} pairs: flags off max diff {off:.2e} (f32: {off32:.2e}), abs_seq min diff {on:.2e}",
            opts.permutation_pairs
        );
        if off <= 1e-6 && on > 1e-3 {
            Ok(detail)
        } else {
            Err(detail)
        }
    })
}

/// Relative flags with zeroed tables reproduce the relative-free
/// configuration bit for bit.
pub fn zero_table_reduction(opts: &SelftestOptions) -> SuiteReport {
    timed("zero-table-reduction", || {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x2e);
        let mut compared = 0;
        for (with_rel, without_rel) in [(9, 5), (7, 4), (3, 1), (6, 5)] {
            let row = |r| AblationRow::new(r).expect("row").flags();
            let mut a =
                small_encoder::<f32>(row(with_rel), opts.seed).map_err(|e| e.to_string())?;
            a.zero_relative_tables();
            let b = small_encoder::<f32>(row(without_rel), opts.seed).map_err(|e| e.to_string())?;
            for _ in 0..opts.permutation_pairs {
                let n = rng.gen_range(1..=20);
                let tree = DepTree::random(n, &mut rng, true);
                let tokens: Vec<usize> = (0..n)
                    .map(|_| rng.gen_range(0..a.config.vocab_size))
                    .collect();
                let cfg = PositionConfig {
                    d_model: a.config.d_model,
                    ..PositionConfig::default()
                };
                let ann = PositionAnnotation::annotate(
                    &tree,
                    &SubwordAlignment::identity(n, false),
                    &cfg,
                )
                .map_err(|e| e.to_string())?;
                let x = a.forward(&tokens, &ann).map_err(|e| e.to_string())?;
                let y = b.forward(&tokens, &ann).map_err(|e| e.to_string())?;
                let same = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .all(|(p, q)| p.to_bits() == q.to_bits());
                if !same {
                    return Err(format!(
                        "row #{with_rel} with zero tables differs from row #{without_rel}"
                    ));
                }
                compared += 1;
            }
        }
        Ok(format!("{compared} inputs bit-identical"))
    })
}

/// Finite-difference check of every ablation row at the default model size.
pub fn gradient_check(opts: &SelftestOptions) -> SuiteReport {
    timed("gradient-check", || {
        let mut worst = (0.0f64, 0u8, String::new());
        for row in AblationRow::all() {
            let cfg = EncoderConfig::default().with_row(row);
            let report = grad_check(&cfg, opts.seed, 1e-3).map_err(|e| e.to_string())?;
            if report.max_rel_error >= worst.0 {
                let group = report
                    .worst_group()
                    .map(|g| g.name.clone())
                    .unwrap_or_default();
                worst = (report.max_rel_error, row.id(), group);
            }
        }
        let detail = format!(
            "max relative error {:.3e} (row #{}, {})",
            worst.0, worst.1, worst.2
        );
        if worst.0 < 1e-4 {
            Ok(detail)
        } else {
            Err(detail)
        }
    })
}

pub fn run_all(opts: &SelftestOptions) -> Vec<SuiteReport> {
    let production =
        |t: &DepTree, a: &SubwordAlignment, c: &PositionConfig| rel_structural_matrix(t, a, c);
    vec![
        oracle_equivalence(opts),
        antisymmetry(opts, &production),
        permutation_equivariance(opts),
        zero_table_reduction(opts),
        gradient_check(opts),
    ]
}
