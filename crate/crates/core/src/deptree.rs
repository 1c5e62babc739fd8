//! Dependency trees: CoNLL-U ingestion, validation and tree-path queries.
//!
//! Token indices are 0-based throughout. The root token's parent is `None`
//! (HEAD = 0 in CoNLL-U). Depths are measured from the root, which plays the
//! role of the sentence's main verb.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("line {line}: expected 10 tab-separated columns, found {found}")]
    MalformedLine { line: usize, found: usize },
    #[error("line {line}: invalid {column} value {value:?}")]
    MalformedField {
        line: usize,
        column: &'static str,
        value: String,
    },
    #[error("token {token} has head {head}, but the sentence has {len} tokens")]
    HeadOutOfRange {
        token: usize,
        head: usize,
        len: usize,
    },
    #[error("parent links starting at token {token} contain a cycle")]
    CycleDetected { token: usize },
    #[error("sentence has no root token")]
    NoRoot,
    #[error("sentence has more than one root (tokens {first} and {second})")]
    MultipleRoots { first: usize, second: usize },
    #[error("token index {index} out of range for a tree of {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("tree invariant violated: {0}")]
    InvariantViolation(String),
}

/// The six CoNLL-U columns that are carried along but never interpreted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpaqueColumns {
    pub lemma: String,
    pub upos: String,
    pub xpos: String,
    pub feats: String,
    pub deps: String,
    pub misc: String,
}

impl Default for OpaqueColumns {
    fn default() -> Self {
        let blank = || "_".to_string();
        Self {
            lemma: blank(),
            upos: blank(),
            xpos: blank(),
            feats: blank(),
            deps: blank(),
            misc: blank(),
        }
    }
}

/// A validated dependency tree over one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTree", into = "RawTree")]
pub struct DepTree {
    forms: Vec<String>,
    parent: Vec<Option<usize>>,
    deprel: Vec<String>,
    depth: Vec<usize>,
    root: usize,
    columns: Vec<OpaqueColumns>,
    comments: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawTree {
    forms: Vec<String>,
    parent: Vec<Option<usize>>,
    deprel: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    columns: Vec<OpaqueColumns>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    comments: Vec<String>,
}

impl TryFrom<RawTree> for DepTree {
    type Error = TreeError;

    fn try_from(raw: RawTree) -> Result<Self, TreeError> {
        let n = raw.parent.len();
        if raw.forms.len() != n || raw.deprel.len() != n {
            return Err(TreeError::InvariantViolation(format!(
                "column lengths differ: {} forms, {} parents, {} relations",
                raw.forms.len(),
                n,
                raw.deprel.len()
            )));
        }
        let columns = if raw.columns.is_empty() {
            vec![OpaqueColumns::default(); n]
        } else if raw.columns.len() == n {
            raw.columns
        } else {
            return Err(TreeError::InvariantViolation(
                "opaque column count differs from token count".into(),
            ));
        };
        let mut tree = DepTree::with_labels(raw.parent, raw.forms, raw.deprel)?;
        tree.columns = columns;
        tree.comments = raw.comments;
        Ok(tree)
    }
}

impl From<DepTree> for RawTree {
    fn from(tree: DepTree) -> Self {
        let plain = tree.columns.iter().all(|c| *c == OpaqueColumns::default());
        RawTree {
            forms: tree.forms,
            parent: tree.parent,
            deprel: tree.deprel,
            columns: if plain { Vec::new() } else { tree.columns },
            comments: tree.comments,
        }
    }
}

/// Follows parent links, detecting cycles and out-of-range heads, and returns
/// the per-token depth together with the unique root.
fn compute_depths(parent: &[Option<usize>]) -> Result<(Vec<usize>, usize), TreeError> {
    let n = parent.len();
    for (token, head) in parent.iter().enumerate() {
        if let Some(h) = *head {
            if h >= n {
                return Err(TreeError::HeadOutOfRange {
                    token,
                    head: h,
                    len: n,
                });
            }
        }
    }

    // 0 = unvisited, 1 = on the current walk, 2 = resolved.
    let mut state = vec![0u8; n];
    let mut depth = vec![0usize; n];
    let mut walk = Vec::new();
    for start in 0..n {
        let mut t = start;
        walk.clear();
        let base = loop {
            match state[t] {
                2 => break depth[t] + 1,
                1 => return Err(TreeError::CycleDetected { token: t }),
                _ => {}
            }
            state[t] = 1;
            walk.push(t);
            match parent[t] {
                Some(p) => t = p,
                None => break 0,
            }
        };
        // `walk` runs from `start` upwards; the last entry sits closest to the
        // resolved ancestor (or is the root itself).
        for (k, &node) in walk.iter().rev().enumerate() {
            depth[node] = base + k;
            state[node] = 2;
        }
    }

    let mut roots = parent.iter().enumerate().filter(|(_, p)| p.is_none());
    let root = match (roots.next(), roots.next()) {
        (None, _) => return Err(TreeError::NoRoot),
        (Some((r, _)), None) => r,
        (Some((first, _)), Some((second, _))) => {
            return Err(TreeError::MultipleRoots { first, second })
        }
    };
    Ok((depth, root))
}

impl DepTree {
    /// Builds a tree from parent links, with placeholder forms and relations.
    pub fn from_parents(parent: Vec<Option<usize>>) -> Result<Self, TreeError> {
        let n = parent.len();
        let forms = (1..=n).map(|i| format!("w{i}")).collect();
        DepTree::with_labels(parent, forms, vec!["_".to_string(); n])
    }

    pub fn with_labels(
        parent: Vec<Option<usize>>,
        forms: Vec<String>,
        deprel: Vec<String>,
    ) -> Result<Self, TreeError> {
        assert_eq!(parent.len(), forms.len(), "one form per token");
        assert_eq!(parent.len(), deprel.len(), "one relation per token");
        let (depth, root) = compute_depths(&parent)?;
        let n = parent.len();
        Ok(Self {
            forms,
            parent,
            deprel,
            depth,
            root,
            columns: vec![OpaqueColumns::default(); n],
            comments: Vec::new(),
        })
    }

    /// Assembles a tree from precomputed parts without checking anything.
    /// Call [`DepTree::validate`] before relying on the result.
    pub fn from_raw_parts(parent: Vec<Option<usize>>, depth: Vec<usize>, root: usize) -> Self {
        let n = parent.len();
        Self {
            forms: (1..=n).map(|i| format!("w{i}")).collect(),
            deprel: vec!["_".to_string(); n],
            columns: vec![OpaqueColumns::default(); n],
            comments: Vec::new(),
            parent,
            depth,
            root,
        }
    }

    /// Random recursive tree: token `k > 0` picks its head uniformly among
    /// tokens `0..k`. With `shuffle`, token positions are then permuted so that
    /// the root and depths carry no information about surface order.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R, shuffle: bool) -> Self {
        assert!(n >= 1, "a tree needs at least one token");
        let mut parent: Vec<Option<usize>> = (0..n)
            .map(|k| {
                if k == 0 {
                    None
                } else {
                    Some(rng.gen_range(0..k))
                }
            })
            .collect();
        if shuffle {
            let mut position: Vec<usize> = (0..n).collect();
            position.shuffle(rng);
            let mut moved = vec![None; n];
            for (k, head) in parent.iter().enumerate() {
                moved[position[k]] = head.map(|h| position[h]);
            }
            parent = moved;
        }
        DepTree::from_parents(parent).expect("random recursive trees are valid")
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, token: usize) -> Option<usize> {
        self.parent[token]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn depth(&self, token: usize) -> usize {
        self.depth[token]
    }

    pub fn depths(&self) -> &[usize] {
        &self.depth
    }

    pub fn max_depth(&self) -> usize {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    pub fn forms(&self) -> &[String] {
        &self.forms
    }

    pub fn deprels(&self) -> &[String] {
        &self.deprel
    }

    pub fn comments(&self) -> &[String] {
        &self.comments
    }

    fn check_index(&self, index: usize) -> Result<(), TreeError> {
        if index < self.len() {
            Ok(())
        } else {
            Err(TreeError::IndexOutOfRange {
                index,
                len: self.len(),
            })
        }
    }

    /// Lowest common ancestor by climbing parent links.
    pub fn lca(&self, i: usize, j: usize) -> Result<usize, TreeError> {
        self.check_index(i)?;
        self.check_index(j)?;
        let (mut a, mut b) = (i, j);
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].expect("non-root has a parent");
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].expect("non-root has a parent");
        }
        while a != b {
            a = self.parent[a].expect("non-root has a parent");
            b = self.parent[b].expect("non-root has a parent");
        }
        Ok(a)
    }

    /// Length of the undirected tree path between `i` and `j`.
    pub fn tree_distance(&self, i: usize, j: usize) -> Result<usize, TreeError> {
        let l = self.lca(i, j)?;
        Ok(self.depth[i] + self.depth[j] - 2 * self.depth[l])
    }

    /// True iff one token is an ancestor of the other (or they coincide).
    pub fn is_on_same_root_path(&self, i: usize, j: usize) -> Result<bool, TreeError> {
        let l = self.lca(i, j)?;
        Ok(l == i || l == j)
    }

    /// True iff `i` and `j` are joined by a single head-dependent arc (or coincide).
    pub fn is_direct_edge(&self, i: usize, j: usize) -> Result<bool, TreeError> {
        self.check_index(i)?;
        self.check_index(j)?;
        Ok(i == j || self.parent[i] == Some(j) || self.parent[j] == Some(i))
    }

    /// Re-checks every structural invariant, including the stored depths.
    pub fn validate(&self) -> Result<(), TreeError> {
        let n = self.len();
        if self.depth.len() != n || self.forms.len() != n || self.deprel.len() != n {
            return Err(TreeError::InvariantViolation(
                "per-token arrays have different lengths".into(),
            ));
        }
        let (depth, root) = compute_depths(&self.parent)?;
        if root != self.root {
            return Err(TreeError::InvariantViolation(format!(
                "stored root {} but parent links root the tree at {}",
                self.root, root
            )));
        }
        if let Some(t) = (0..n).find(|&t| depth[t] != self.depth[t]) {
            return Err(TreeError::InvariantViolation(format!(
                "token {t} stores depth {} but its parent chain has length {}",
                self.depth[t], depth[t]
            )));
        }
        Ok(())
    }

    /// Renders the tree as one CoNLL-U sentence block, including the
    /// terminating blank line.
    pub fn to_conllu(&self) -> String {
        let mut out = String::new();
        for c in &self.comments {
            out.push_str(c);
            out.push('\n');
        }
        for t in 0..self.len() {
            let col = &self.columns[t];
            let head = self.parent[t].map_or(0, |p| p + 1);
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                t + 1,
                self.forms[t],
                col.lemma,
                col.upos,
                col.xpos,
                col.feats,
                head,
                self.deprel[t],
                col.deps,
                col.misc
            ));
        }
        out.push('\n');
        out
    }
}

/// Serialises a sequence of trees as a CoNLL-U document.
pub fn write_conllu<'a>(trees: impl IntoIterator<Item = &'a DepTree>) -> String {
    trees.into_iter().map(DepTree::to_conllu).collect()
}

struct PendingToken {
    line: usize,
    form: String,
    head: usize,
    deprel: String,
    columns: OpaqueColumns,
}

fn finish_block(comments: Vec<String>, tokens: Vec<PendingToken>) -> Result<DepTree, TreeError> {
    let n = tokens.len();
    let mut parent = Vec::with_capacity(n);
    for (t, tok) in tokens.iter().enumerate() {
        parent.push(match tok.head {
            0 => None,
            h if h <= n => Some(h - 1),
            h => {
                return Err(TreeError::HeadOutOfRange {
                    token: t,
                    head: h - 1,
                    len: n,
                })
            }
        });
    }
    let (depth, root) = compute_depths(&parent)?;
    let mut forms = Vec::with_capacity(n);
    let mut deprel = Vec::with_capacity(n);
    let mut columns = Vec::with_capacity(n);
    for tok in tokens {
        forms.push(tok.form);
        deprel.push(tok.deprel);
        columns.push(tok.columns);
    }
    Ok(DepTree {
        forms,
        parent,
        deprel,
        depth,
        root,
        columns,
        comments,
    })
}

fn parse_token_line(
    line_no: usize,
    line: &str,
    expected_id: usize,
) -> Result<Option<PendingToken>, TreeError> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 10 {
        return Err(TreeError::MalformedLine {
            line: line_no,
            found: fields.len(),
        });
    }
    let id = fields[0];
    // Multiword ranges ("3-4") and empty nodes ("5.1") carry no HEAD.
    if id.contains('-') || id.contains('.') {
        return Ok(None);
    }
    let malformed = |column, value: &str| TreeError::MalformedField {
        line: line_no,
        column,
        value: value.to_string(),
    };
    let id: usize = id.parse().map_err(|_| malformed("ID", id))?;
    if id != expected_id {
        return Err(malformed("ID", fields[0]));
    }
    let head: usize = fields[6]
        .parse()
        .map_err(|_| malformed("HEAD", fields[6]))?;
    Ok(Some(PendingToken {
        line: line_no,
        form: fields[1].to_string(),
        head,
        deprel: fields[7].to_string(),
        columns: OpaqueColumns {
            lemma: fields[2].to_string(),
            upos: fields[3].to_string(),
            xpos: fields[4].to_string(),
            feats: fields[5].to_string(),
            deps: fields[8].to_string(),
            misc: fields[9].to_string(),
        },
    }))
}

/// A sentence block that failed to parse, with the 1-based line it starts on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockError {
    pub start_line: usize,
    pub error: TreeError,
}

/// Parses every sentence block independently so that one malformed sentence
/// does not hide the others. Blocks containing only comments are dropped.
pub fn parse_conllu_blocks(text: &str) -> Vec<Result<DepTree, BlockError>> {
    let mut out = Vec::new();
    let mut comments = Vec::new();
    let mut tokens: Vec<PendingToken> = Vec::new();
    let mut failure: Option<TreeError> = None;
    let mut start_line = 1;

    let mut flush = |comments: &mut Vec<String>,
                     tokens: &mut Vec<PendingToken>,
                     failure: &mut Option<TreeError>,
                     start_line: usize| {
        let block_tokens = std::mem::take(tokens);
        let block_comments = std::mem::take(comments);
        if let Some(error) = failure.take() {
            out.push(Err(BlockError { start_line, error }));
        } else if !block_tokens.is_empty() {
            let first = block_tokens[0].line;
            out.push(
                finish_block(block_comments, block_tokens).map_err(|error| BlockError {
                    start_line: start_line.min(first),
                    error,
                }),
            );
        }
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            flush(&mut comments, &mut tokens, &mut failure, start_line);
            start_line = line_no + 1;
            continue;
        }
        if failure.is_some() {
            continue;
        }
        if line.starts_with('#') {
            comments.push(line.to_string());
            continue;
        }
        match parse_token_line(line_no, line, tokens.len() + 1) {
            Ok(Some(tok)) => tokens.push(tok),
            Ok(None) => {}
            Err(e) => failure = Some(e),
        }
    }
    flush(&mut comments, &mut tokens, &mut failure, start_line);
    out
}

/// Parses a CoNLL-U document, failing on the first malformed sentence.
pub fn parse_conllu(text: &str) -> Result<Vec<DepTree>, TreeError> {
    parse_conllu_blocks(text)
        .into_iter()
        .map(|r| r.map_err(|b| b.error))
        .collect()
}

/// Maps sub-word positions back to the words of a tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubwordAlignment {
    word_of_subword: Vec<usize>,
    has_eos: bool,
}

impl SubwordAlignment {
    pub fn new(word_of_subword: Vec<usize>, has_eos: bool) -> Self {
        Self {
            word_of_subword,
            has_eos,
        }
    }

    /// One sub-word per word.
    pub fn identity(words: usize, has_eos: bool) -> Self {
        Self::new((0..words).collect(), has_eos)
    }

    /// Word `w` is split into `pieces[w]` consecutive sub-words.
    pub fn from_piece_counts(pieces: &[usize], has_eos: bool) -> Self {
        let map = pieces
            .iter()
            .enumerate()
            .flat_map(|(w, &count)| std::iter::repeat(w).take(count))
            .collect();
        Self::new(map, has_eos)
    }

    pub fn word_of_subword(&self) -> &[usize] {
        &self.word_of_subword
    }

    pub fn has_eos(&self) -> bool {
        self.has_eos
    }

    pub fn total_len(&self) -> usize {
        self.word_of_subword.len() + usize::from(self.has_eos)
    }

    /// Source word of position `k`; `None` for the end-of-sentence symbol.
    pub fn word(&self, k: usize) -> Option<usize> {
        self.word_of_subword.get(k).copied()
    }
}
