//! Sequential and structural positions, absolute and relative.
//!
//! Integer positions are computed here; the learnable pieces (relative
//! embedding tables, the absolute fusion map) are given plain reference
//! implementations that the encoder's differentiable versions are tested
//! against.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deptree::{DepTree, SubwordAlignment};

pub const DEFAULT_R_CLIP: usize = 16;

/// Base of the sinusoid wavelength progression.
const WAVELENGTH_BASE: f64 = 10000.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PositionError {
    #[error("embedding width {0} is odd; sin/cos pairs need an even width")]
    OddDimension(usize),
    #[error("clipping distance must be at least 1")]
    InvalidClip,
    #[error("position {position} maps to word {word}, but the tree has {len} words")]
    AlignmentOutOfRange {
        position: usize,
        word: usize,
        len: usize,
    },
    #[error("position {index} out of range for a sequence of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("relative index {value} outside [-{r_clip}, {r_clip}]")]
    IndexOutOfClipRange { value: i64, r_clip: usize },
    #[error("annotation disagrees with its tree: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Nonlinear,
    Addition,
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nonlinear" => Ok(Self::Nonlinear),
            "addition" => Ok(Self::Addition),
            other => Err(format!(
                "unknown fusion mode {other:?} (nonlinear|addition)"
            )),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Nonlinear => "nonlinear",
            Self::Addition => "addition",
        })
    }
}

/// How "same dependency edge" is read when choosing between the two
/// relative structural rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule1 {
    /// One token is an ancestor of the other.
    #[default]
    AncestorPath,
    /// The tokens share a single head-dependent arc.
    LiteralEdge,
}

impl FromStr for Rule1 {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ancestor" | "ancestor_path" => Ok(Self::AncestorPath),
            "edge" | "literal_edge" => Ok(Self::LiteralEdge),
            other => Err(format!("unknown rule-1 reading {other:?} (ancestor|edge)")),
        }
    }
}

impl fmt::Display for Rule1 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AncestorPath => "ancestor_path",
            Self::LiteralEdge => "literal_edge",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionConfig {
    pub d_model: usize,
    pub r_clip: usize,
    pub fusion_mode: FusionMode,
    pub rule1: Rule1,
}

impl PositionConfig {
    pub fn new(d_model: usize, r_clip: usize) -> Result<Self, PositionError> {
        let cfg = Self {
            d_model,
            r_clip,
            fusion_mode: FusionMode::default(),
            rule1: Rule1::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PositionError> {
        if self.d_model % 2 != 0 {
            return Err(PositionError::OddDimension(self.d_model));
        }
        if self.r_clip == 0 {
            return Err(PositionError::InvalidClip);
        }
        Ok(())
    }
}

impl Default for PositionConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            r_clip: DEFAULT_R_CLIP,
            fusion_mode: FusionMode::default(),
            rule1: Rule1::default(),
        }
    }
}

/// Fixed sinusoidal encoding of an absolute position: dimension `2i` holds
/// `sin(pos / 10000^(2i/d))` and dimension `2i + 1` the matching cosine.
pub fn sinusoidal_abs(pos: usize, d_model: usize) -> Result<Vec<f64>, PositionError> {
    if d_model % 2 != 0 {
        return Err(PositionError::OddDimension(d_model));
    }
    let mut out = Vec::with_capacity(d_model);
    for i in 0..d_model / 2 {
        let angle = pos as f64 / WAVELENGTH_BASE.powf(2.0 * i as f64 / d_model as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

pub fn clip(value: i64, r_clip: usize) -> i64 {
    let r = r_clip as i64;
    value.clamp(-r, r)
}

/// Position of key `j` relative to query `i`, clipped to `[-r, r]`.
pub fn rel_seq_index(i: usize, j: usize, r_clip: usize) -> i64 {
    clip(j as i64 - i as i64, r_clip)
}

/// Three-way sign used by the second relative structural rule.
pub fn structural_sign(x: i64) -> i64 {
    x.signum()
}

fn check_alignment(tree: &DepTree, align: &SubwordAlignment) -> Result<(), PositionError> {
    for (position, &word) in align.word_of_subword().iter().enumerate() {
        if word >= tree.len() {
            return Err(PositionError::AlignmentOutOfRange {
                position,
                word,
                len: tree.len(),
            });
        }
    }
    Ok(())
}

/// Tree depth of every sub-word position. Sub-words inherit their word's
/// depth; the end-of-sentence symbol sits one level below the deepest word.
pub fn abs_structural(
    tree: &DepTree,
    align: &SubwordAlignment,
) -> Result<Vec<usize>, PositionError> {
    check_alignment(tree, align)?;
    let mut out: Vec<usize> = align
        .word_of_subword()
        .iter()
        .map(|&w| tree.depth(w))
        .collect();
    if align.has_eos() {
        out.push(tree.max_depth() + 1);
    }
    Ok(out)
}

fn rule1_applies(tree: &DepTree, rule1: Rule1, wi: usize, wj: usize) -> bool {
    match rule1 {
        Rule1::AncestorPath => tree.is_on_same_root_path(wi, wj),
        Rule1::LiteralEdge => tree.is_direct_edge(wi, wj),
    }
    .expect("alignment was checked against the tree")
}

fn rel_structural_with(
    tree: &DepTree,
    align: &SubwordAlignment,
    abs: &[usize],
    i: usize,
    j: usize,
    rule1: Rule1,
) -> i64 {
    let (ai, aj) = (abs[i] as i64, abs[j] as i64);
    match (align.word(i), align.word(j)) {
        _ if i == j => 0,
        (Some(wi), Some(wj)) if wi == wj => 0,
        (Some(wi), Some(wj)) if rule1_applies(tree, rule1, wi, wj) => ai - aj,
        // The end-of-sentence symbol lies on no tree path.
        _ => structural_sign(i as i64 - j as i64) * (ai + aj),
    }
}

fn check_position(index: usize, len: usize) -> Result<(), PositionError> {
    if index < len {
        Ok(())
    } else {
        Err(PositionError::IndexOutOfRange { index, len })
    }
}

/// Relative structural position before clipping.
pub fn rel_structural_unclipped(
    tree: &DepTree,
    align: &SubwordAlignment,
    i: usize,
    j: usize,
    rule1: Rule1,
) -> Result<i64, PositionError> {
    let abs = abs_structural(tree, align)?;
    check_position(i, abs.len())?;
    check_position(j, abs.len())?;
    Ok(rel_structural_with(tree, align, &abs, i, j, rule1))
}

pub fn rel_structural(
    tree: &DepTree,
    align: &SubwordAlignment,
    i: usize,
    j: usize,
    cfg: &PositionConfig,
) -> Result<i64, PositionError> {
    rel_structural_unclipped(tree, align, i, j, cfg.rule1).map(|v| clip(v, cfg.r_clip))
}

/// Square matrix of relative positions, row-major, indexed `(query, key)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelMatrix {
    len: usize,
    data: Vec<i64>,
}

impl RelMatrix {
    pub fn from_fn(len: usize, mut f: impl FnMut(usize, usize) -> i64) -> Self {
        let mut data = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                data.push(f(i, j));
            }
        }
        Self { len, data }
    }

    pub fn from_row_major(len: usize, data: Vec<i64>) -> Result<Self, PositionError> {
        if data.len() != len * len {
            return Err(PositionError::ShapeMismatch {
                expected: len * len,
                found: data.len(),
            });
        }
        Ok(Self { len, data })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize, j: usize) -> i64 {
        self.data[i * self.len + j]
    }

    pub fn as_slice(&self) -> &[i64] {
        &self.data
    }

    pub fn max_abs(&self) -> i64 {
        self.data.iter().map(|v| v.abs()).max().unwrap_or(0)
    }

    pub fn is_antisymmetric(&self) -> bool {
        (0..self.len).all(|i| (0..self.len).all(|j| self.get(i, j) == -self.get(j, i)))
    }
}

pub fn rel_seq_matrix(len: usize, r_clip: usize) -> RelMatrix {
    RelMatrix::from_fn(len, |i, j| rel_seq_index(i, j, r_clip))
}

pub fn rel_structural_matrix_unclipped(
    tree: &DepTree,
    align: &SubwordAlignment,
    rule1: Rule1,
) -> Result<RelMatrix, PositionError> {
    let abs = abs_structural(tree, align)?;
    Ok(RelMatrix::from_fn(abs.len(), |i, j| {
        rel_structural_with(tree, align, &abs, i, j, rule1)
    }))
}

pub fn rel_structural_matrix(
    tree: &DepTree,
    align: &SubwordAlignment,
    cfg: &PositionConfig,
) -> Result<RelMatrix, PositionError> {
    let mut m = rel_structural_matrix_unclipped(tree, align, cfg.rule1)?;
    for v in &mut m.data {
        *v = clip(*v, cfg.r_clip);
    }
    Ok(m)
}

/// Every position structure of one sequence. The relative matrices are
/// optional so that purely sequential inputs need no tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionAnnotation {
    pub abs_seq: Vec<usize>,
    pub abs_stru: Option<Vec<usize>>,
    pub rel_seq: Option<RelMatrix>,
    pub rel_stru: Option<RelMatrix>,
}

impl PositionAnnotation {
    /// Sequential positions only.
    pub fn sequential(len: usize, r_clip: usize) -> Self {
        Self {
            abs_seq: (0..len).collect(),
            abs_stru: None,
            rel_seq: Some(rel_seq_matrix(len, r_clip)),
            rel_stru: None,
        }
    }

    /// Sequential and structural positions for a parsed sentence.
    pub fn annotate(
        tree: &DepTree,
        align: &SubwordAlignment,
        cfg: &PositionConfig,
    ) -> Result<Self, PositionError> {
        let abs_stru = abs_structural(tree, align)?;
        let len = abs_stru.len();
        Ok(Self {
            abs_seq: (0..len).collect(),
            rel_seq: Some(rel_seq_matrix(len, cfg.r_clip)),
            rel_stru: Some(rel_structural_matrix(tree, align, cfg)?),
            abs_stru: Some(abs_stru),
        })
    }

    pub fn len(&self) -> usize {
        self.abs_seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.abs_seq.is_empty()
    }

    /// Reorders positions as `new[k] = old[perm[k]]`, keeping the sequential
    /// fields tied to the new surface order.
    pub fn permuted(&self, perm: &[usize], r_clip: usize) -> Self {
        let len = perm.len();
        Self {
            abs_seq: (0..len).collect(),
            abs_stru: self
                .abs_stru
                .as_ref()
                .map(|a| perm.iter().map(|&p| a[p]).collect()),
            rel_seq: self.rel_seq.as_ref().map(|_| rel_seq_matrix(len, r_clip)),
            rel_stru: self
                .rel_stru
                .as_ref()
                .map(|m| RelMatrix::from_fn(len, |i, j| m.get(perm[i], perm[j]))),
        }
    }
}

/// One line of annotation output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub tokens: Vec<String>,
    pub abs_seq: Vec<usize>,
    pub abs_stru: Vec<usize>,
    pub rel_seq: Vec<i64>,
    pub rel_stru: Vec<i64>,
    pub r_clip: usize,
    pub rule1_interpretation: Rule1,
}

pub const EOS_TOKEN: &str = "</s>";

impl AnnotationRecord {
    /// Annotates a sentence word by word, optionally appending an
    /// end-of-sentence symbol.
    pub fn for_sentence(
        tree: &DepTree,
        eos: bool,
        cfg: &PositionConfig,
    ) -> Result<Self, PositionError> {
        let align = SubwordAlignment::identity(tree.len(), eos);
        let ann = PositionAnnotation::annotate(tree, &align, cfg)?;
        let mut tokens = tree.forms().to_vec();
        if eos {
            tokens.push(EOS_TOKEN.to_string());
        }
        Ok(Self {
            tokens,
            abs_seq: ann.abs_seq,
            abs_stru: ann.abs_stru.unwrap_or_default(),
            rel_seq: ann.rel_seq.map(|m| m.data).unwrap_or_default(),
            rel_stru: ann.rel_stru.map(|m| m.data).unwrap_or_default(),
            r_clip: cfg.r_clip,
            rule1_interpretation: cfg.rule1,
        })
    }

    /// Rebuilds both relative matrices from the stored absolute positions and
    /// the tree's ancestor sets, and checks them against the stored ones.
    pub fn verify(&self, tree: &DepTree) -> Result<(), PositionError> {
        let n = tree.len();
        let len = self.tokens.len();
        let eos = match len {
            l if l == n => false,
            l if l == n + 1 => true,
            _ => {
                return Err(PositionError::Mismatch(format!(
                    "{len} tokens for a tree of {n} words"
                )))
            }
        };
        let fail = |what: &str| Err(PositionError::Mismatch(what.to_string()));
        if self.abs_seq.len() != len || self.abs_stru.len() != len {
            return fail("absolute position arrays have the wrong length");
        }
        if self.rel_seq.len() != len * len || self.rel_stru.len() != len * len {
            return fail("relative matrices have the wrong size");
        }
        if self.abs_seq.iter().enumerate().any(|(k, &a)| a != k) {
            return fail("abs_seq is not 0..len");
        }

        let ancestors: Vec<Vec<usize>> = (0..n)
            .map(|t| {
                let mut chain = vec![t];
                let mut cur = t;
                while let Some(p) = tree.parent(cur) {
                    chain.push(p);
                    cur = p;
                }
                chain
            })
            .collect();
        let same_path = |a: usize, b: usize| match self.rule1_interpretation {
            Rule1::AncestorPath => ancestors[a].contains(&b) || ancestors[b].contains(&a),
            Rule1::LiteralEdge => a == b || tree.parent(a) == Some(b) || tree.parent(b) == Some(a),
        };
        let r = self.r_clip as i64;
        for i in 0..len {
            for j in 0..len {
                let seq = (j as i64 - i as i64).clamp(-r, r);
                if self.rel_seq[i * len + j] != seq {
                    return fail(&format!("rel_seq[{i}][{j}]"));
                }
                let (ai, aj) = (self.abs_stru[i] as i64, self.abs_stru[j] as i64);
                let is_word = |k: usize| !(eos && k == n);
                let raw = if i == j {
                    0
                } else if is_word(i) && is_word(j) && same_path(i, j) {
                    ai - aj
                } else {
                    (i as i64 - j as i64).signum() * (ai + aj)
                };
                if self.rel_stru[i * len + j] != raw.clamp(-r, r) {
                    return fail(&format!("rel_stru[{i}][{j}]"));
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the absolute fusion map `tanh(W [seq; stru] + b)`, with `W`
/// stored row-major as `d_model x 2 d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub d_model: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FusionParams {
    pub fn zeros(d_model: usize) -> Self {
        Self {
            d_model,
            weight: vec![0.0; d_model * 2 * d_model],
            bias: vec![0.0; d_model],
        }
    }
}

/// Combines the sinusoids of the sequential and structural absolute positions.
pub fn fuse_absolute(
    seq_vec: &[f64],
    stru_vec: &[f64],
    mode: FusionMode,
    params: &FusionParams,
) -> Result<Vec<f64>, PositionError> {
    let d = params.d_model;
    for v in [seq_vec, stru_vec] {
        if v.len() != d {
            return Err(PositionError::ShapeMismatch {
                expected: d,
                found: v.len(),
            });
        }
    }
    Ok(match mode {
        FusionMode::Addition => seq_vec.iter().zip(stru_vec).map(|(a, b)| a + b).collect(),
        FusionMode::Nonlinear => (0..d)
            .map(|row| {
                let w = &params.weight[row * 2 * d..(row + 1) * 2 * d];
                let z: f64 = seq_vec
                    .iter()
                    .chain(stru_vec)
                    .zip(w)
                    .map(|(x, w)| x * w)
                    .sum();
                (z + params.bias[row]).tanh()
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableRole {
    Key,
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionScheme {
    Sequential,
    Structural,
}

/// `(2 r + 1) x d_head` table of relative position embeddings, row `rel + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelEmbeddingTable {
    pub r_clip: usize,
    pub d_head: usize,
    pub entries: Vec<f64>,
    pub role: TableRole,
    pub scheme: PositionScheme,
}

impl RelEmbeddingTable {
    pub fn zeros(r_clip: usize, d_head: usize, role: TableRole, scheme: PositionScheme) -> Self {
        Self {
            r_clip,
            d_head,
            entries: vec![0.0; (2 * r_clip + 1) * d_head],
            role,
            scheme,
        }
    }

    pub fn rows(&self) -> usize {
        2 * self.r_clip + 1
    }

    pub fn row(&self, rel: i64) -> Result<&[f64], PositionError> {
        let r = self.r_clip as i64;
        if !(-r..=r).contains(&rel) {
            return Err(PositionError::IndexOutOfClipRange {
                value: rel,
                r_clip: self.r_clip,
            });
        }
        let k = (rel + r) as usize;
        Ok(&self.entries[k * self.d_head..(k + 1) * self.d_head])
    }
}

/// Gathers one embedding per `(query, key)` pair: a `len x len x d_head`
/// row-major array.
pub fn lookup_relative(
    indices: &RelMatrix,
    table: &RelEmbeddingTable,
) -> Result<Vec<f64>, PositionError> {
    let mut out = Vec::with_capacity(indices.as_slice().len() * table.d_head);
    for &rel in indices.as_slice() {
        out.extend_from_slice(table.row(rel)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deptree::parse_conllu;

    const FIXTURE: &str = "\
1\tBush\t_\t_\t_\t_\t2\tnsubj\t_\t_
2\theld\t_\t_\t_\t_\t0\troot\t_\t_
3\ta\t_\t_\t_\t_\t4\tdet\t_\t_
4\ttalk\t_\t_\t_\t_\t2\tobj\t_\t_
5\twith\t_\t_\t_\t_\t6\tcase\t_\t_
6\tSharon\t_\t_\t_\t_\t2\tobl\t_\t_
";

    fn fixture() -> DepTree {
        parse_conllu(FIXTURE).unwrap().remove(0)
    }

    #[test]
    fn sinusoid_values() {
        assert_eq!(sinusoidal_abs(0, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        let v = sinusoidal_abs(1, 4).unwrap();
        let expected = [0.841471, 0.540302, 0.010000, 0.999950];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(sinusoidal_abs(3, 5), Err(PositionError::OddDimension(5)));
        for pos in [0, 1, 7, 100, 5000] {
            let v = sinusoidal_abs(pos, 16).unwrap();
            for pair in v.chunks(2) {
                assert!((pair[0].powi(2) + pair[1].powi(2) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sequential_relative_index() {
        assert_eq!(rel_seq_index(3, 3, 16), 0);
        assert_eq!(rel_seq_index(5, 2, 16), -3);
        assert_eq!(rel_seq_index(0, 40, 16), 16);
        assert_eq!(rel_seq_index(40, 0, 16), -16);
    }

    #[test]
    fn absolute_structural_positions() {
        let tree = fixture();
        let ident = SubwordAlignment::identity(6, false);
        assert_eq!(
            abs_structural(&tree, &ident).unwrap(),
            vec![1, 0, 2, 1, 2, 1]
        );

        // "talk" split into two pieces.
        let split = SubwordAlignment::from_piece_counts(&[1, 1, 1, 2, 1, 1], false);
        let abs = abs_structural(&tree, &split).unwrap();
        assert_eq!(abs, vec![1, 0, 2, 1, 1, 2, 1]);

        let single = DepTree::from_parents(vec![None]).unwrap();
        let with_eos = SubwordAlignment::identity(1, true);
        assert_eq!(abs_structural(&single, &with_eos).unwrap(), vec![0, 1]);

        let bad = SubwordAlignment::new(vec![0, 9], false);
        assert!(matches!(
            abs_structural(&tree, &bad),
            Err(PositionError::AlignmentOutOfRange {
                position: 1,
                word: 9,
                ..
            })
        ));
    }

    #[test]
    fn relative_structural_rules() {
        let tree = fixture();
        let align = SubwordAlignment::identity(6, false);
        let cfg = PositionConfig::default();
        // talk -> held share an arc: depth difference.
        assert_eq!(rel_structural(&tree, &align, 3, 1, &cfg).unwrap(), 1);
        // Bush and "a" sit on different branches: sign(0 - 2) * (1 + 2).
        assert_eq!(rel_structural(&tree, &align, 0, 2, &cfg).unwrap(), -3);
        // "a" is a grandchild of "held": rule 1 under the ancestor reading only.
        assert_eq!(rel_structural(&tree, &align, 2, 1, &cfg).unwrap(), 2);
        let edge = PositionConfig {
            rule1: Rule1::LiteralEdge,
            ..cfg
        };
        assert_eq!(rel_structural(&tree, &align, 2, 1, &edge).unwrap(), 2);
        assert_eq!(rel_structural(&tree, &align, 1, 2, &edge).unwrap(), -2);
        assert_eq!(rel_structural(&tree, &align, 1, 2, &cfg).unwrap(), -2);
        for i in 0..6 {
            assert_eq!(rel_structural(&tree, &align, i, i, &cfg).unwrap(), 0);
        }
        assert!(matches!(
            rel_structural(&tree, &align, 0, 6, &cfg),
            Err(PositionError::IndexOutOfRange { index: 6, len: 6 })
        ));
    }

    #[test]
    fn literal_edge_reading_differs_off_the_arc() {
        // 0 <- 1 <- 2 : token 2 is a grandchild of the root.
        let chain = DepTree::from_parents(vec![None, Some(0), Some(1)]).unwrap();
        let align = SubwordAlignment::identity(3, false);
        let anc = PositionConfig::default();
        let edge = PositionConfig {
            rule1: Rule1::LiteralEdge,
            ..anc
        };
        assert_eq!(rel_structural(&chain, &align, 2, 0, &anc).unwrap(), 2);
        assert_eq!(rel_structural(&chain, &align, 2, 0, &edge).unwrap(), 2);
        assert_eq!(rel_structural(&chain, &align, 0, 2, &anc).unwrap(), -2);
        assert_eq!(rel_structural(&chain, &align, 0, 2, &edge).unwrap(), -2);
        // Reversed surface order separates the readings.
        let rev = DepTree::from_parents(vec![Some(1), Some(2), None]).unwrap();
        assert_eq!(rel_structural(&rev, &align, 0, 2, &anc).unwrap(), 2);
        assert_eq!(rel_structural(&rev, &align, 0, 2, &edge).unwrap(), -2);
    }

    #[test]
    fn eos_uses_second_rule() {
        let tree = fixture();
        let align = SubwordAlignment::identity(6, true);
        let cfg = PositionConfig::default();
        // EOS at position 6 has depth 3; "held" (depth 0) is the root.
        assert_eq!(rel_structural(&tree, &align, 6, 1, &cfg).unwrap(), 3);
        assert_eq!(rel_structural(&tree, &align, 1, 6, &cfg).unwrap(), -3);
        assert_eq!(rel_structural(&tree, &align, 6, 6, &cfg).unwrap(), 0);
    }

    #[test]
    fn subwords_of_one_word_are_at_zero_distance() {
        let tree = fixture();
        let align = SubwordAlignment::from_piece_counts(&[1, 1, 1, 3, 1, 1], false);
        let m = rel_structural_matrix(&tree, &align, &PositionConfig::default()).unwrap();
        for i in 3..6 {
            for j in 3..6 {
                assert_eq!(m.get(i, j), 0);
            }
        }
    }

    #[test]
    fn fixture_matrix_properties() {
        let tree = fixture();
        let align = SubwordAlignment::identity(6, false);
        let m = rel_structural_matrix(&tree, &align, &PositionConfig::default()).unwrap();
        assert!((0..6).all(|i| m.get(i, i) == 0));
        assert!(m.is_antisymmetric());
        assert!(m.max_abs() <= 16);
    }

    #[test]
    fn clipping_saturates() {
        let chain: Vec<Option<usize>> = (0..40usize).map(|k| k.checked_sub(1)).collect();
        let tree = DepTree::from_parents(chain).unwrap();
        let align = SubwordAlignment::identity(40, false);
        let cfg = PositionConfig::default();
        assert_eq!(rel_structural(&tree, &align, 39, 0, &cfg).unwrap(), 16);
        assert_eq!(
            rel_structural_unclipped(&tree, &align, 39, 0, cfg.rule1).unwrap(),
            39
        );
        let m = rel_structural_matrix(&tree, &align, &cfg).unwrap();
        assert_eq!(m.max_abs(), 16);
        assert!(m.is_antisymmetric());
    }

    #[test]
    fn fusion_modes() {
        let p = FusionParams::zeros(2);
        assert_eq!(
            fuse_absolute(&[1.0, 2.0], &[0.0, 0.0], FusionMode::Addition, &p).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            fuse_absolute(&[1.0, 2.0], &[3.0, 4.0], FusionMode::Addition, &p).unwrap(),
            vec![4.0, 6.0]
        );
        assert_eq!(
            fuse_absolute(&[1.0, 2.0], &[3.0, 4.0], FusionMode::Nonlinear, &p).unwrap(),
            vec![0.0, 0.0]
        );
        let mut q = FusionParams::zeros(2);
        // Row 0 picks seq[0], row 1 picks stru[1].
        q.weight = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        q.bias = vec![0.0, 0.5];
        let out = fuse_absolute(&[0.3, 9.0], &[9.0, -0.2], FusionMode::Nonlinear, &q).unwrap();
        assert!((out[0] - 0.3f64.tanh()).abs() < 1e-15);
        assert!((out[1] - 0.3f64.tanh()).abs() < 1e-15);
        assert_eq!(
            fuse_absolute(&[1.0], &[1.0, 2.0], FusionMode::Addition, &p),
            Err(PositionError::ShapeMismatch {
                expected: 2,
                found: 1
            })
        );
    }

    #[test]
    fn relative_lookup() {
        let mut table = RelEmbeddingTable::zeros(2, 3, TableRole::Key, PositionScheme::Structural);
        for (k, v) in table.entries.iter_mut().enumerate() {
            *v = k as f64;
        }
        let zeros = RelMatrix::from_fn(2, |_, _| 0);
        let out = lookup_relative(&zeros, &table).unwrap();
        assert_eq!(out.len(), 2 * 2 * 3);
        for chunk in out.chunks(3) {
            assert_eq!(chunk, &[6.0, 7.0, 8.0]);
        }
        let ends = RelMatrix::from_row_major(1, vec![-2]).unwrap();
        assert_eq!(lookup_relative(&ends, &table).unwrap(), vec![0.0, 1.0, 2.0]);
        let ends = RelMatrix::from_row_major(1, vec![2]).unwrap();
        assert_eq!(
            lookup_relative(&ends, &table).unwrap(),
            vec![12.0, 13.0, 14.0]
        );
        let out_of_range = RelMatrix::from_row_major(1, vec![3]).unwrap();
        assert_eq!(
            lookup_relative(&out_of_range, &table),
            Err(PositionError::IndexOutOfClipRange {
                value: 3,
                r_clip: 2
            })
        );
        let blank = RelEmbeddingTable::zeros(2, 3, TableRole::Value, PositionScheme::Sequential);
        let m = RelMatrix::from_fn(3, |i, j| rel_seq_index(i, j, 2));
        assert!(lookup_relative(&m, &blank)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn annotation_records_verify() {
        let tree = fixture();
        for eos in [false, true] {
            for rule1 in [Rule1::AncestorPath, Rule1::LiteralEdge] {
                let cfg = PositionConfig {
                    rule1,
                    r_clip: 2,
                    ..PositionConfig::default()
                };
                let rec = AnnotationRecord::for_sentence(&tree, eos, &cfg).unwrap();
                rec.verify(&tree).unwrap();
                let mut tampered = rec.clone();
                tampered.rel_stru[1] = -tampered.rel_stru[1] + 1;
                assert!(tampered.verify(&tree).is_err());
            }
        }
        let rec = AnnotationRecord::for_sentence(&tree, true, &PositionConfig::default()).unwrap();
        assert_eq!(rec.tokens.last().unwrap(), EOS_TOKEN);
        assert_eq!(rec.abs_stru, vec![1, 0, 2, 1, 2, 1, 3]);
        let json = serde_json::to_value(&rec).unwrap();
        assert_eq!(json["rule1_interpretation"], "ancestor_path");
        assert_eq!(json["rel_seq"].as_array().unwrap().len(), 49);
    }

    #[test]
    fn config_validation() {
        assert_eq!(
            PositionConfig::new(7, 16),
            Err(PositionError::OddDimension(7))
        );
        assert_eq!(PositionConfig::new(8, 0), Err(PositionError::InvalidClip));
        assert_eq!("edge".parse::<Rule1>(), Ok(Rule1::LiteralEdge));
        assert_eq!("addition".parse::<FusionMode>(), Ok(FusionMode::Addition));
    }
}
