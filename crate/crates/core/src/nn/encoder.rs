//! Post-norm self-attention encoder with absolute and relation-aware
//! position pathways.
//!
//! Each of the four position schemes can be switched on independently; the
//! nine combinations studied in the ablation grid are named by
//! [`AblationRow`]. Every parameter exists regardless of the active flags and
//! is seeded from its own name, so two configurations built with the same
//! seed share all common weights.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{ParamStore, Real, Tensor};
use super::NnError;
use crate::posenc::{sinusoidal_abs, FusionMode, PositionAnnotation, RelMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PositionFlags {
    pub abs_seq: bool,
    pub rel_seq: bool,
    pub abs_stru: bool,
    pub rel_stru: bool,
}

impl PositionFlags {
    pub fn any_absolute(&self) -> bool {
        self.abs_seq || self.abs_stru
    }

    pub fn needs_tree(&self) -> bool {
        self.abs_stru || self.rel_stru
    }
}

impl fmt::Display for PositionFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.abs_seq, "abs_seq"),
            (self.rel_seq, "rel_seq"),
            (self.abs_stru, "abs_stru"),
            (self.rel_stru, "rel_stru"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

/// One row of the position-encoding ablation grid, 1 through 9.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct AblationRow(u8);

// (abs_seq, rel_seq, abs_stru, rel_stru) per row.
const ROW_FLAGS: [(bool, bool, bool, bool); 9] = [
    (false, false, false, false),
    (false, false, true, false),
    (false, false, false, true),
    (true, false, false, false),
    (true, false, true, false),
    (true, false, true, true),
    (true, true, false, false),
    (true, true, true, false),
    (true, true, true, true),
];

impl AblationRow {
    pub fn new(row: u8) -> Result<Self, NnError> {
        if (1..=9).contains(&row) {
            Ok(Self(row))
        } else {
            Err(NnError::InvalidConfig(format!(
                "ablation row {row} is not in 1..=9"
            )))
        }
    }

    pub fn all() -> impl Iterator<Item = AblationRow> {
        (1..=9).map(AblationRow)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn flags(self) -> PositionFlags {
        let (abs_seq, rel_seq, abs_stru, rel_stru) = ROW_FLAGS[usize::from(self.0 - 1)];
        PositionFlags {
            abs_seq,
            rel_seq,
            abs_stru,
            rel_stru,
        }
    }

    pub fn from_flags(flags: PositionFlags) -> Option<Self> {
        Self::all().find(|r| r.flags() == flags)
    }
}

impl TryFrom<u8> for AblationRow {
    type Error = NnError;

    fn try_from(row: u8) -> Result<Self, NnError> {
        Self::new(row)
    }
}

impl From<AblationRow> for u8 {
    fn from(row: AblationRow) -> u8 {
        row.0
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub r_clip: usize,
    pub vocab_size: usize,
    pub flags: PositionFlags,
    pub fusion_mode: FusionMode,
    /// One relative table per layer serves every head; otherwise each head
    /// gets its own block of rows.
    pub share_rel_across_heads: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ffn: 128,
            r_clip: crate::posenc::DEFAULT_R_CLIP,
            vocab_size: 100,
            flags: AblationRow(4).flags(),
            fusion_mode: FusionMode::Nonlinear,
            share_rel_across_heads: true,
        }
    }
}

impl EncoderConfig {
    pub fn with_row(mut self, row: AblationRow) -> Self {
        self.flags = row.flags();
        self
    }

    pub fn row(&self) -> Option<AblationRow> {
        AblationRow::from_flags(self.flags)
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn rel_blocks(&self) -> usize {
        if self.share_rel_across_heads {
            1
        } else {
            self.n_heads
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: String| Err(NnError::InvalidConfig(msg));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad(format!(
                "d_model {} must be positive and even",
                self.d_model
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ffn == 0 || self.vocab_size == 0 {
            return bad("layers, ffn width and vocabulary must be positive".into());
        }
        if self.r_clip == 0 {
            return bad("clipping distance must be at least 1".into());
        }
        Ok(())
    }
}

pub(crate) fn layer_param(layer: usize, name: &str) -> String {
    format!("layers.{layer}.{name}")
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Normal(0, std) tensor seeded from `(seed, name)`; drawn in `f64` so that
/// every precision sees the same initial values.
pub(crate) fn seeded_normal<T: Real>(
    seed: u64,
    name: &str,
    shape: &[usize],
    std: f64,
) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::of(normal.sample(&mut rng)))
}

/// Builds every encoder parameter for `config`.
pub fn init_params<T: Real>(config: &EncoderConfig, seed: u64) -> ParamStore<T> {
    let d = config.d_model;
    let dh = config.d_head();
    let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();
    let mut store = ParamStore::new();
    let normal = |store: &mut ParamStore<T>, name: String, shape: &[usize], std: f64| {
        let t = seeded_normal(seed, &name, shape, std);
        store.insert(name, t);
    };
    normal(
        &mut store,
        "embed".into(),
        &[config.vocab_size, d],
        inv_sqrt(d),
    );
    normal(
        &mut store,
        "fusion.weight".into(),
        &[d, 2 * d],
        inv_sqrt(2 * d),
    );
    store.insert("fusion.bias", Tensor::zeros(&[d]));
    let table_rows = config.rel_blocks() * (2 * config.r_clip + 1);
    for l in 0..config.n_layers {
        for w in ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"] {
            normal(&mut store, layer_param(l, w), &[d, d], inv_sqrt(d));
        }
        for t in [
            "rel.seq_key",
            "rel.seq_value",
            "rel.stru_key",
            "rel.stru_value",
        ] {
            normal(
                &mut store,
                layer_param(l, t),
                &[table_rows, dh],
                inv_sqrt(dh),
            );
        }
        for ln in ["ln1", "ln2"] {
            store.insert(
                layer_param(l, &format!("{ln}.gain")),
                Tensor::filled(&[d], T::one()),
            );
            store.insert(layer_param(l, &format!("{ln}.bias")), Tensor::zeros(&[d]));
        }
        normal(
            &mut store,
            layer_param(l, "ffn.w1"),
            &[d, config.d_ffn],
            inv_sqrt(d),
        );
        store.insert(layer_param(l, "ffn.b1"), Tensor::zeros(&[config.d_ffn]));
        normal(
            &mut store,
            layer_param(l, "ffn.w2"),
            &[config.d_ffn, d],
            inv_sqrt(config.d_ffn),
        );
        store.insert(layer_param(l, "ffn.b2"), Tensor::zeros(&[d]));
    }
    store
}

/// Tape handles produced by one encoder pass.
pub struct EncoderTrace {
    pub output: Var,
    /// One attention node per layer, for inspecting softmax weights.
    pub attention: Vec<Var>,
}

fn sinusoid_matrix<T: Real>(positions: &[usize], d: usize) -> Result<Tensor<T>, NnError> {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        data.extend(sinusoidal_abs(p, d)?.into_iter().map(T::of));
    }
    Tensor::new(vec![positions.len(), d], data)
}

fn check_rel(name: &str, m: &Option<RelMatrix>, len: usize, r_clip: usize) -> Result<(), NnError> {
    let m = m.as_ref().ok_or_else(|| {
        NnError::ConfigMismatch(format!(
            "{name} is enabled but the annotation has no {name} matrix"
        ))
    })?;
    if m.len() != len {
        return Err(NnError::ShapeMismatch(format!(
            "{name} matrix is {0}x{0} for {len} tokens",
            m.len()
        )));
    }
    if m.max_abs() > r_clip as i64 {
        return Err(NnError::ConfigMismatch(format!(
            "{name} entries exceed the clipping distance {r_clip}"
        )));
    }
    Ok(())
}

fn validate_inputs(
    config: &EncoderConfig,
    tokens: &[usize],
    ann: &PositionAnnotation,
) -> Result<(), NnError> {
    let len = tokens.len();
    if len == 0 {
        return Err(NnError::ShapeMismatch("empty token sequence".into()));
    }
    if ann.len() != len {
        return Err(NnError::ShapeMismatch(format!(
            "annotation covers {} positions for {len} tokens",
            ann.len()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(NnError::ShapeMismatch(format!(
            "token id {t} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    let flags = config.flags;
    if flags.abs_stru {
        match &ann.abs_stru {
            Some(a) if a.len() == len => {}
            Some(a) => {
                return Err(NnError::ShapeMismatch(format!(
                    "abs_stru has {} entries for {len} tokens",
                    a.len()
                )))
            }
            None => {
                return Err(NnError::ConfigMismatch(
                    "abs_stru is enabled but the annotation has no structural positions".into(),
                ))
            }
        }
    }
    if flags.rel_seq {
        check_rel("rel_seq", &ann.rel_seq, len, config.r_clip)?;
    }
    if flags.rel_stru {
        check_rel("rel_stru", &ann.rel_stru, len, config.r_clip)?;
    }
    Ok(())
}

fn table_rows(m: &RelMatrix, r_clip: usize, blocks: usize) -> Vec<usize> {
    let width = 2 * r_clip + 1;
    (0..blocks)
        .flat_map(|b| {
            m.as_slice()
                .iter()
                .map(move |&rel| b * width + (rel + r_clip as i64) as usize)
        })
        .collect()
}

/// Records a full encoder pass on `tape`.
pub fn encoder_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    config: &EncoderConfig,
    tokens: &[usize],
    ann: &PositionAnnotation,
) -> Result<EncoderTrace, NnError> {
    config.validate()?;
    validate_inputs(config, tokens, ann)?;
    let len = tokens.len();
    let d = config.d_model;
    let dh = config.d_head();
    let flags = config.flags;

    let embed = tape.param("embed")?;
    let tok = tape.gather(embed, tokens.to_vec(), vec![len, d]);
    let mut x = tape.scale(tok, T::of((d as f64).sqrt()));

    let seq_pe = if flags.abs_seq {
        Some(tape.constant(sinusoid_matrix(&ann.abs_seq, d)?))
    } else {
        None
    };
    let stru_pe = match (&ann.abs_stru, flags.abs_stru) {
        (Some(a), true) => Some(tape.constant(sinusoid_matrix(a, d)?)),
        _ => None,
    };
    let pos = match (seq_pe, stru_pe) {
        (None, None) => None,
        (Some(p), None) | (None, Some(p)) => Some(p),
        (Some(s), Some(t)) => Some(match config.fusion_mode {
            FusionMode::Addition => tape.add(s, t),
            FusionMode::Nonlinear => {
                let w = tape.param("fusion.weight")?;
                let b = tape.param("fusion.bias")?;
                let cat = tape.concat(s, t);
                let z = tape.matmul(cat, w, true);
                let z = tape.add_row(z, b);
                tape.tanh(z)
            }
        }),
    };
    if let Some(p) = pos {
        x = tape.add(x, p);
    }

    let blocks = config.rel_blocks();
    let rel_shape = vec![blocks, len, len, dh];
    let seq_rows = match (&ann.rel_seq, flags.rel_seq) {
        (Some(m), true) => Some(table_rows(m, config.r_clip, blocks)),
        _ => None,
    };
    let stru_rows = match (&ann.rel_stru, flags.rel_stru) {
        (Some(m), true) => Some(table_rows(m, config.r_clip, blocks)),
        _ => None,
    };

    let mut attention = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |name: &str| layer_param(l, name);
        let rel = |tape: &mut Tape<'_, T>, role: &str| -> Result<Option<Var>, NnError> {
            let mut acc: Option<Var> = None;
            for (rows, scheme) in [(&seq_rows, "seq"), (&stru_rows, "stru")] {
                if let Some(rows) = rows {
                    let table = tape.param(&p(&format!("rel.{scheme}_{role}")))?;
                    let g = tape.gather(table, rows.clone(), rel_shape.clone());
                    acc = Some(match acc {
                        Some(prev) => tape.add(prev, g),
                        None => g,
                    });
                }
            }
            Ok(acc)
        };
        let rel_k = rel(tape, "key")?;
        let rel_v = rel(tape, "value")?;

        let wq = tape.param(&p("attn.w_q"))?;
        let wk = tape.param(&p("attn.w_k"))?;
        let wv = tape.param(&p("attn.w_v"))?;
        let wo = tape.param(&p("attn.w_o"))?;
        let q = tape.matmul(x, wq, false);
        let k = tape.matmul(x, wk, false);
        let v = tape.matmul(x, wv, false);
        let a = tape.attention(q, k, v, rel_k, rel_v, config.n_heads);
        attention.push(a);
        let o = tape.matmul(a, wo, false);
        let res = tape.add(x, o);
        let g1 = tape.param(&p("ln1.gain"))?;
        let b1 = tape.param(&p("ln1.bias"))?;
        x = tape.layer_norm(res, g1, b1);

        let w1 = tape.param(&p("ffn.w1"))?;
        let c1 = tape.param(&p("ffn.b1"))?;
        let w2 = tape.param(&p("ffn.w2"))?;
        let c2 = tape.param(&p("ffn.b2"))?;
        let h = tape.matmul(x, w1, false);
        let h = tape.add_row(h, c1);
        let h = tape.gelu(h);
        let f = tape.matmul(h, w2, false);
        let f = tape.add_row(f, c2);
        let res = tape.add(x, f);
        let g2 = tape.param(&p("ln2.gain"))?;
        let b2 = tape.param(&p("ln2.bias"))?;
        x = tape.layer_norm(res, g2, b2);
    }
    Ok(EncoderTrace {
        output: x,
        attention,
    })
}

/// An encoder configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        Ok(Self {
            config,
            params: init_params(&config, seed),
        })
    }

    pub fn forward(
        &self,
        tokens: &[usize],
        ann: &PositionAnnotation,
    ) -> Result<Tensor<T>, NnError> {
        let mut tape = Tape::new(&self.params);
        let trace = encoder_forward(&mut tape, &self.config, tokens, ann)?;
        Ok(tape.value(trace.output).clone())
    }

    /// Output together with every layer's softmax weights (`[heads, I, I]`).
    pub fn forward_with_attention(
        &self,
        tokens: &[usize],
        ann: &PositionAnnotation,
    ) -> Result<(Tensor<T>, Vec<Vec<T>>), NnError> {
        let mut tape = Tape::new(&self.params);
        let trace = encoder_forward(&mut tape, &self.config, tokens, ann)?;
        let probs = trace
            .attention
            .iter()
            .map(|&a| tape.attention_probs(a).expect("attention node").to_vec())
            .collect();
        Ok((tape.value(trace.output).clone(), probs))
    }

    /// Zeroes every relative key/value table.
    pub fn zero_relative_tables(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if name.contains(".rel.") {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

pub struct AttentionOutput<T> {
    pub output: Tensor<T>,
    /// Softmax weights laid out `[heads, I, I]`.
    pub probs: Vec<T>,
}

fn rel_as_blocks<T: Real>(
    rel: &Tensor<T>,
    len: usize,
    dh: usize,
    heads: usize,
) -> Result<Tensor<T>, NnError> {
    let s = rel.shape();
    let blocks = match s.len() {
        3 => 1,
        4 => s[0],
        _ => 0,
    };
    if !(blocks == 1 || blocks == heads) || s[s.len() - 3..] != [len, len, dh] {
        return Err(NnError::ShapeMismatch(format!(
            "relative tensor {s:?} does not match {len}x{len}x{dh}"
        )));
    }
    Tensor::new(vec![blocks, len, len, dh], rel.data().to_vec())
}

/// One attention sub-layer (`layers.{layer}.attn.*` weights) applied to `x`,
/// with optional relative key and value embeddings shaped `I x I x d_head`
/// (or `heads x I x I x d_head`).
pub fn attention_forward<T: Real>(
    x: &Tensor<T>,
    params: &ParamStore<T>,
    layer: usize,
    n_heads: usize,
    rel_k: Option<&Tensor<T>>,
    rel_v: Option<&Tensor<T>>,
) -> Result<AttentionOutput<T>, NnError> {
    if x.shape().len() != 2 {
        return Err(NnError::ShapeMismatch(format!(
            "input must be I x d, got {:?}",
            x.shape()
        )));
    }
    let (len, d) = x.matrix_dims();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(NnError::ShapeMismatch(format!(
            "{n_heads} heads do not divide width {d}"
        )));
    }
    for w in ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"] {
        let t = params.get(&layer_param(layer, w))?;
        if t.shape() != [d, d] {
            return Err(NnError::ShapeMismatch(format!(
                "{w} is {:?}, expected [{d}, {d}]",
                t.shape()
            )));
        }
    }
    let dh = d / n_heads;
    let inputs = [Some(x), rel_k, rel_v];
    if inputs.iter().flatten().any(|t| !t.all_finite()) {
        return Err(NnError::NonFiniteInput);
    }
    let rel_k = rel_k
        .map(|r| rel_as_blocks(r, len, dh, n_heads))
        .transpose()?;
    let rel_v = rel_v
        .map(|r| rel_as_blocks(r, len, dh, n_heads))
        .transpose()?;

    let mut tape = Tape::new(params);
    let xv = tape.constant(x.clone());
    let rk = rel_k.map(|t| tape.constant(t));
    let rv = rel_v.map(|t| tape.constant(t));
    let wq = tape.param(&layer_param(layer, "attn.w_q"))?;
    let wk = tape.param(&layer_param(layer, "attn.w_k"))?;
    let wv = tape.param(&layer_param(layer, "attn.w_v"))?;
    let wo = tape.param(&layer_param(layer, "attn.w_o"))?;
    let q = tape.matmul(xv, wq, false);
    let k = tape.matmul(xv, wk, false);
    let v = tape.matmul(xv, wv, false);
    let a = tape.attention(q, k, v, rk, rv, n_heads);
    let o = tape.matmul(a, wo, false);
    Ok(AttentionOutput {
        output: tape.value(o).clone(),
        probs: tape.attention_probs(a).expect("attention node").to_vec(),
    })
}
