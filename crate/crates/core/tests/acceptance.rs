//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Built with `harness = false`, so the lines are printed on every run:
//! `cargo test -p structpos-core --test acceptance`.

use std::collections::VecDeque;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use structpos::harness::{
    evaluate, generate, run_ablation, train, DataConfig, Task, TaskModel, TrainConfig,
};
use structpos::nn::gradcheck::grad_check;
use structpos::nn::{AblationRow, Encoder, EncoderConfig, PositionFlags};
use structpos::posenc::{
    abs_structural, rel_structural_matrix, rel_structural_matrix_unclipped, PositionAnnotation,
    PositionConfig, Rule1,
};
use structpos::{parse_conllu, DepTree, SubwordAlignment};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Independent oracle: breadth-first depths and explicit ancestor sets.

struct Oracle {
    depth: Vec<i64>,
    ancestors: Vec<Vec<usize>>,
}

impl Oracle {
    fn new(parents: &[Option<usize>]) -> Self {
        let n = parents.len();
        let mut children = vec![Vec::new(); n];
        let mut root = 0;
        for (k, p) in parents.iter().enumerate() {
            match p {
                Some(p) => children[*p].push(k),
                None => root = k,
            }
        }
        let mut depth = vec![-1i64; n];
        let mut ancestors = vec![Vec::new(); n];
        depth[root] = 0;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &c in &children[u] {
                depth[c] = depth[u] + 1;
                let mut a = ancestors[u].clone();
                a.push(u);
                ancestors[c] = a;
                queue.push_back(c);
            }
        }
        Self { depth, ancestors }
    }

    fn rel(&self, i: usize, j: usize) -> i64 {
        let related = i == j || self.ancestors[i].contains(&j) || self.ancestors[j].contains(&i);
        if related {
            self.depth[i] - self.depth[j]
        } else {
            (i as i64 - j as i64).signum() * (self.depth[i] + self.depth[j])
        }
    }
}

fn random_trees(count: usize, max_n: usize, seed: u64) -> Vec<DepTree> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(1..=max_n);
            DepTree::random(n, &mut rng, true)
        })
        .collect()
}

// ---------------------------------------------------------------------------

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let cfg = PositionConfig::default();
    let trees = random_trees(1000, 30, 11);
    for (t, tree) in trees.iter().enumerate() {
        let n = tree.len();
        let oracle = Oracle::new(tree.parents());
        let align = SubwordAlignment::identity(n, false);
        let abs = abs_structural(tree, &align).map_err(|e| e.to_string())?;
        if abs.iter().zip(&oracle.depth).any(|(&a, &d)| a as i64 != d) {
            return Err(format!("tree {t}: absolute positions differ"));
        }
        let m = rel_structural_matrix(tree, &align, &cfg).map_err(|e| e.to_string())?;
        for i in 0..n {
            for j in 0..n {
                let want = oracle
                    .rel(i, j)
                    .clamp(-(cfg.r_clip as i64), cfg.r_clip as i64);
                if m.get(i, j) != want {
                    return Err(format!(
                        "tree {t}: rel({i},{j}) = {}, oracle {want}",
                        m.get(i, j)
                    ));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        elapsed < Duration::from_secs(30),
        format!(
            "1000 trees (n <= 30) match exactly in {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

const FIXTURE: &str = "\
# text = Bush held a talk with Sharon
1\tBush\t_\t_\t_\t_\t2\tnsubj\t_\t_
2\theld\t_\t_\t_\t_\t0\troot\t_\t_
3\ta\t_\t_\t_\t_\t4\tdet\t_\t_
4\ttalk\t_\t_\t_\t_\t2\tobj\t_\t_
5\twith\t_\t_\t_\t_\t6\tcase\t_\t_
6\tSharon\t_\t_\t_\t_\t2\tobl\t_\t_
";

fn figure_fixture() -> Outcome {
    let tree = parse_conllu(FIXTURE).map_err(|e| e.to_string())?.remove(0);
    let pos = |w: &str| {
        tree.forms()
            .iter()
            .position(|f| f == w)
            .expect("word in fixture")
    };
    let (talk, held) = (pos("talk"), pos("held"));
    let d = tree.tree_distance(talk, held).map_err(|e| e.to_string())?;
    let seq = talk.abs_diff(held);
    check(
        d == 1 && seq == 2,
        format!("tree distance(talk, held) = {d}, sequential distance = {seq}"),
    )
}

fn antisymmetry() -> Outcome {
    let trees = random_trees(1000, 30, 12);
    let mut pairs = 0usize;
    for rule1 in [Rule1::AncestorPath, Rule1::LiteralEdge] {
        for (t, tree) in trees.iter().enumerate() {
            let align = SubwordAlignment::identity(tree.len(), false);
            let m =
                rel_structural_matrix_unclipped(tree, &align, rule1).map_err(|e| e.to_string())?;
            for i in 0..m.len() {
                if m.get(i, i) != 0 {
                    return Err(format!("tree {t}: nonzero diagonal at {i}"));
                }
                for j in 0..m.len() {
                    if m.get(i, j) != -m.get(j, i) {
                        return Err(format!(
                            "tree {t} ({rule1:?}): rel({i},{j}) != -rel({j},{i})"
                        ));
                    }
                    pairs += 1;
                }
            }
        }
    }
    Ok(format!(
        "{pairs} unclipped pairs on 1000 trees, both rule-1 readings"
    ))
}

fn encoder<T: structpos::nn::Real>(flags: PositionFlags) -> Encoder<T> {
    let config = EncoderConfig {
        flags,
        ..EncoderConfig::default()
    };
    Encoder::new(config, 21).expect("valid config")
}

fn permutation_equivariance() -> Outcome {
    let flat = encoder::<f64>(PositionFlags::default());
    let ordered = encoder::<f64>(AblationRow::new(4).unwrap().flags());
    let flat32 = encoder::<f32>(PositionFlags::default());
    let d = flat.config.d_model;
    let cfg = PositionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut off, mut off32, mut on) = (0.0f64, 0.0f64, f64::INFINITY);
    let gap = |a: &[f64], b: &[f64], perm: &[usize]| {
        perm.iter()
            .enumerate()
            .flat_map(|(k, &p)| (0..d).map(move |c| (a[k * d + c] - b[p * d + c]).abs()))
            .fold(0.0, f64::max)
    };
    for _ in 0..100 {
        let n = rng.gen_range(2..=24);
        let tree = DepTree::random(n, &mut rng, true);
        let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..100)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        while perm.iter().enumerate().all(|(k, &p)| k == p) {
            perm.shuffle(&mut rng);
        }
        let ann = PositionAnnotation::annotate(&tree, &SubwordAlignment::identity(n, false), &cfg)
            .map_err(|e| e.to_string())?;
        let ann_p = ann.permuted(&perm, cfg.r_clip);
        let tok_p: Vec<usize> = perm.iter().map(|&p| tokens[p]).collect();
        let run = |e: &Encoder<f64>, t: &[usize], a: &PositionAnnotation| {
            e.forward(t, a).unwrap().into_data()
        };
        off = off.max(gap(
            &run(&flat, &tok_p, &ann_p),
            &run(&flat, &tokens, &ann),
            &perm,
        ));
        on = on.min(gap(
            &run(&ordered, &tok_p, &ann_p),
            &run(&ordered, &tokens, &ann),
            &perm,
        ));
        let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
        let a32 = widen(flat32.forward(&tok_p, &ann_p).unwrap().into_data());
        let b32 = widen(flat32.forward(&tokens, &ann).unwrap().into_data());
        off32 = off32.max(gap(&a32, &b32, &perm));
    }
    check(
        off <= 1e-6 && on > 1e-3,
        format!("flags off: max diff {off:.2e} (f32 engine: {off32:.2e}); abs_seq on: min diff {on:.2e}"),
    )
}

fn zero_table_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = PositionConfig::default();
    let mut compared = 0;
    for (rel_row, plain_row) in [(9u8, 5u8), (7, 4), (3, 1)] {
        let mut with_rel = encoder::<f32>(AblationRow::new(rel_row).unwrap().flags());
        with_rel.zero_relative_tables();
        let plain = encoder::<f32>(AblationRow::new(plain_row).unwrap().flags());
        for _ in 0..100 {
            let n = rng.gen_range(1..=24);
            let tree = DepTree::random(n, &mut rng, true);
            let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..100)).collect();
            let ann =
                PositionAnnotation::annotate(&tree, &SubwordAlignment::identity(n, false), &cfg)
                    .map_err(|e| e.to_string())?;
            let a = with_rel.forward(&tokens, &ann).map_err(|e| e.to_string())?;
            let b = plain.forward(&tokens, &ann).map_err(|e| e.to_string())?;
            if a.data()
                .iter()
                .zip(b.data())
                .any(|(x, y)| x.to_bits() != y.to_bits())
            {
                return Err(format!(
                    "row #{rel_row} with zero tables differs from row #{plain_row}"
                ));
            }
            compared += 1;
        }
    }
    Ok(format!(
        "{compared} inputs bit-identical (rows 9/5, 7/4, 3/1)"
    ))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut worst = 0.0f64;
    for row in AblationRow::all() {
        let report = grad_check(&EncoderConfig::default().with_row(row), 7, 1e-3)
            .map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_error);
        lines.push(format!("{}:{:.1e}", row.id(), report.max_rel_error));
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-4 && elapsed < Duration::from_secs(300),
        format!(
            "max {worst:.2e} over rows [{}] in {:.1}s",
            lines.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn ablation_direction() -> Outcome {
    let cfg = TrainConfig::default();
    let limit = 600.0;
    let distance = DataConfig {
        task: Task::Distance,
        ..DataConfig::default()
    };
    let rows = [AblationRow::new(4).unwrap(), AblationRow::new(9).unwrap()];
    let reports = run_ablation(&rows, &distance, &cfg, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let (r4, r9) = (&reports[0], &reports[1]);

    let depth = DataConfig::default();
    let rep1 = run_ablation(&[AblationRow::new(1).unwrap()], &depth, &cfg, |_, _| Ok(()))
        .map_err(|e| e.to_string())?;
    let r1 = &rep1[0];
    let z = (r1.final_accuracy - r1.baseline.accuracy) / r1.baseline.standard_error;
    let slowest = [r4, r9, r1]
        .iter()
        .map(|r| r.wall_clock_secs)
        .fold(0.0, f64::max);
    check(
        r9.final_accuracy > r4.final_accuracy && z.abs() <= 3.0 && slowest < limit,
        format!(
            "distance: row 9 {:.4} vs row 4 {:.4}; depth: row 1 {:.4} vs baseline {:.4} ({z:+.2} SE); slowest row {slowest:.0}s",
            r9.final_accuracy, r4.final_accuracy, r1.final_accuracy, r1.baseline.accuracy
        ),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let data = DataConfig {
        task: Task::Distance,
        train_size: 200,
        test_size: 100,
        ..DataConfig::default()
    };
    let (train_set, test_set) = generate(&data).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let (model, report) = train(&cfg, &train_set, &test_set).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    model.save(&path).map_err(|e| e.to_string())?;
    let back = TaskModel::load(&path).map_err(|e| e.to_string())?;
    for s in &test_set {
        if model.predict(s).unwrap() != back.predict(s).unwrap() {
            return Err("predictions differ after reload".into());
        }
    }
    let enc = |m: &TaskModel, s: &structpos::TaskSample| {
        let e = Encoder {
            config: m.spec.encoder,
            params: m.params.clone(),
        };
        e.forward(&s.token_ids, &m.annotate(s).unwrap())
            .unwrap()
            .into_data()
    };
    let bits_equal = test_set.iter().take(50).all(|s| {
        let (a, b) = (enc(&model, s), enc(&back, s));
        a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let eval = evaluate(&back, &test_set).map_err(|e| e.to_string())?;
    check(
        bits_equal && eval.accuracy == report.final_accuracy,
        format!(
            "encoder outputs bit-identical; reloaded accuracy {:.4} = reported {:.4}",
            eval.accuracy, report.final_accuracy
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("oracle equivalence", oracle_equivalence),
        ("dependency fixture distance", figure_fixture),
        ("antisymmetry and zero diagonal", antisymmetry),
        ("permutation equivariance", permutation_equivariance),
        ("zero-table reduction", zero_table_reduction),
        ("gradient checks, all nine rows", gradient_checks),
        ("ablation direction", ablation_direction),
        ("checkpoint round-trip", checkpoint_round_trip),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failures = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
