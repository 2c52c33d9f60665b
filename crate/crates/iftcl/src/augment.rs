//! Embedding lookup and the twin augmentations.
//!
//! Sentences are sequences of integer token ids over a [`Vocabulary`] whose
//! id 0 is padding. Two frozen [`EmbeddingTable`]s map source and fraternal
//! token streams to d-dimensional rows. An anchor sentence yields three
//! augmented views: two independent dropout masks over the source embedding
//! (the identical twins) and one dropout mask over an epsilon-fusion of the
//! source embedding with its fraternal counterpart (the fraternal twin).
//! Token-level delete/insert/substitute augmenters are included as baselines
//! for comparison runs.

use crate::error::{Error, Result};
use crate::numeric::TokenMatrix;
use crate::streams::gaussian;
use rand::Rng;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// Reserved padding token id. It embeds to the all-zero row in every table.
pub const PAD_ID: u32 = 0;

/// Closed token universe shared by both embedding tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    /// `size` counts ids [0, size), id 0 being padding, so at least 2 is
    /// needed to have any real token.
    pub fn new(size: u32) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!(
                "vocabulary size must be at least 2 (pad plus one real token), got {size}"
            )));
        }
        Ok(Vocabulary { size })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn contains(&self, id: u32) -> bool {
        id < self.size
    }
}

/// Frozen vocab_size x d embedding matrix. Row 0 (padding) is all-zero and no
/// method mutates the table after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vocab_size: u32,
    d: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    /// Table with i.i.d. Gaussian entries of standard deviation 1/sqrt(d),
    /// padding row zeroed. Deterministic for a fixed generator state.
    pub fn seeded_gaussian<R: Rng>(vocab: Vocabulary, d: usize, rng: &mut R) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let sigma = 1.0 / (d as f64).sqrt();
        let rows = vocab.size() as usize;
        let mut data = vec![0.0; rows * d];
        for r in 1..rows {
            for c in 0..d {
                data[r * d + c] = gaussian(rng, sigma);
            }
        }
        Ok(EmbeddingTable {
            vocab_size: vocab.size(),
            d,
            data,
        })
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let i = id as usize;
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Raw storage, exposed so tests can check the frozen-table contract.
    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// One corpus sentence: source token ids plus the paired fraternal ids.
/// The fraternal field may be empty only when the fraternal channel is off.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSentence {
    pub tokens: Vec<u32>,
    pub fraternal: Vec<u32>,
}

/// Multiplicative dropout mask over an L x d matrix. Entries are either 0
/// (dropped, probability rate) or exactly 1/(1-rate).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    rows: usize,
    cols: usize,
    rate: f64,
    data: Vec<f64>,
}

impl DropoutMask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Embeds `tokens` into an L x d matrix with L = max_len; rows past the
/// sentence length stay zero and valid_len records the true length.
pub fn embed_lookup(table: &EmbeddingTable, tokens: &[u32], max_len: usize) -> Result<TokenMatrix> {
    if tokens.len() > max_len {
        return Err(Error::Domain(format!(
            "embed_lookup: sentence length {} exceeds max_len {max_len}",
            tokens.len()
        )));
    }
    let mut m = TokenMatrix::zeros(max_len, table.dim(), tokens.len())?;
    for (t, &id) in tokens.iter().enumerate() {
        if id >= table.vocab_size() {
            return Err(Error::Domain(format!(
                "embed_lookup: token id {id} at position {t} is outside the vocabulary (size {})",
                table.vocab_size()
            )));
        }
        m.row_mut(t).copy_from_slice(table.row(id));
    }
    Ok(m)
}

/// Samples an L x d dropout mask: each entry independently 0 with probability
/// `rate`, else 1/(1-rate). Entries are drawn row-major so a fixed generator
/// state reproduces the mask bit for bit.
pub fn sample_mask<R: Rng>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Result<DropoutMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let mut data = vec![0.0; rows * cols];
    for x in &mut data {
        let u: f64 = rng.gen();
        *x = if u < rate { 0.0 } else { keep_scale };
    }
    Ok(DropoutMask {
        rows,
        cols,
        rate,
        data,
    })
}

/// Elementwise product of a matrix with a dropout mask. Padding rows stay
/// zero, so valid_len carries over unchanged.
pub fn apply_dropout(m: &TokenMatrix, z: &DropoutMask) -> Result<TokenMatrix> {
    if m.rows() != z.rows() || m.cols() != z.cols() {
        return Err(Error::Domain(format!(
            "apply_dropout: matrix is {}x{} but mask is {}x{}",
            m.rows(),
            m.cols(),
            z.rows(),
            z.cols()
        )));
    }
    let mut out = m.clone();
    let data = out.data_mut();
    for (x, &w) in data.iter_mut().zip(z.data()) {
        *x *= w;
    }
    Ok(out)
}

/// Convex fusion eps*y + (1-eps)*y_frat. The boundaries eps=0 and eps=1
/// return the corresponding input bit for bit, and entries equal on both
/// sides pass through unchanged so fusing a matrix with itself is exact.
/// valid_len of the result is the longer of the two inputs.
pub fn fuse(y: &TokenMatrix, y_frat: &TokenMatrix, eps: f64) -> Result<TokenMatrix> {
    if y.rows() != y_frat.rows() || y.cols() != y_frat.cols() {
        return Err(Error::Domain(format!(
            "fuse: shape mismatch {}x{} vs {}x{}",
            y.rows(),
            y.cols(),
            y_frat.rows(),
            y_frat.cols()
        )));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Config(format!(
            "fusion rate must lie in [0, 1], got {eps}"
        )));
    }
    let valid = y.valid_len().max(y_frat.valid_len());
    let mut out = if eps == 1.0 {
        y.clone()
    } else if eps == 0.0 {
        y_frat.clone()
    } else {
        let mut m = y.clone();
        let data = m.data_mut();
        for (x, &b) in data.iter_mut().zip(y_frat.data()) {
            let a = *x;
            *x = if a == b { a } else { eps * a + (1.0 - eps) * b };
        }
        m
    };
    out.set_valid_len(valid);
    Ok(out)
}

/// The three augmented views of one sentence, in embedding space.
#[derive(Debug, Clone)]
pub struct TwinViews {
    /// Anchor: source embedding under mask z.
    pub anchor: TokenMatrix,
    /// Identical twin: same source embedding under an independent mask z+.
    pub identical: TokenMatrix,
    /// Fraternal twin: fusion of source and fraternal embeddings under z-,
    /// absent when the fraternal channel is disabled.
    pub fraternal: Option<TokenMatrix>,
}

/// Builds anchor and identical views only (fraternal channel disabled).
/// Draws masks z then z+ from `rng` in that order.
pub fn make_identical_pair<R: Rng>(
    s: &TokenSentence,
    bel_s: &EmbeddingTable,
    max_len: usize,
    rate: f64,
    rng: &mut R,
) -> Result<TwinViews> {
    let y = embed_lookup(bel_s, &s.tokens, max_len)?;
    let z = sample_mask(max_len, bel_s.dim(), rate, rng)?;
    let z_plus = sample_mask(max_len, bel_s.dim(), rate, rng)?;
    Ok(TwinViews {
        anchor: apply_dropout(&y, &z)?,
        identical: apply_dropout(&y, &z_plus)?,
        fraternal: None,
    })
}

/// Builds the full twin triple. Masks are drawn in the order z, z+, z- so a
/// fixed generator state makes this a pure function of its arguments.
pub fn make_twins<R: Rng>(
    s: &TokenSentence,
    bel_s: &EmbeddingTable,
    bel_f: &EmbeddingTable,
    max_len: usize,
    rate: f64,
    eps: f64,
    rng: &mut R,
) -> Result<TwinViews> {
    if s.fraternal.is_empty() {
        return Err(Error::Domain(
            "make_twins: fraternal tokens are empty but the fraternal channel is enabled".into(),
        ));
    }
    if bel_s.dim() != bel_f.dim() {
        return Err(Error::Domain(format!(
            "make_twins: table dimensions differ ({} vs {})",
            bel_s.dim(),
            bel_f.dim()
        )));
    }
    let y = embed_lookup(bel_s, &s.tokens, max_len)?;
    let z = sample_mask(max_len, bel_s.dim(), rate, rng)?;
    let z_plus = sample_mask(max_len, bel_s.dim(), rate, rng)?;
    let z_minus = sample_mask(max_len, bel_s.dim(), rate, rng)?;
    let y_frat = embed_lookup(bel_f, &s.fraternal, max_len)?;
    let fused = fuse(&y, &y_frat, eps)?;
    Ok(TwinViews {
        anchor: apply_dropout(&y, &z)?,
        identical: apply_dropout(&y, &z_plus)?,
        fraternal: Some(apply_dropout(&fused, &z_minus)?),
    })
}

/// Token-level baseline augmenters for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Delete,
    Insert,
    Substitute,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delete" => Ok(BaselineKind::Delete),
            "insert" => Ok(BaselineKind::Insert),
            "substitute" => Ok(BaselineKind::Substitute),
            other => Err(Error::Config(format!(
                "unknown baseline augmenter {other:?}, expected delete, insert or substitute"
            ))),
        }
    }
}

/// Applies one token-level augmentation to the source tokens.
///
/// delete drops each token with probability `rate` but never all of them (a
/// fully-deleted sentence is returned unchanged); insert puts a uniformly
/// random non-pad token after each position with probability `rate`;
/// substitute replaces each token with a uniformly random non-pad token with
/// probability `rate`. The result is truncated to max_len. The fraternal
/// field passes through untouched.
pub fn baseline_augment<R: Rng>(
    s: &TokenSentence,
    kind: BaselineKind,
    rate: f64,
    vocab: Vocabulary,
    max_len: usize,
    rng: &mut R,
) -> Result<TokenSentence> {
    if s.tokens.is_empty() {
        return Err(Error::Domain(
            "baseline_augment: source tokens are empty".into(),
        ));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "baseline augmentation rate must lie in [0, 1], got {rate}"
        )));
    }
    let mut out = Vec::with_capacity(s.tokens.len() * 2);
    match kind {
        BaselineKind::Delete => {
            for &tok in &s.tokens {
                if rng.gen::<f64>() >= rate {
                    out.push(tok);
                }
            }
            if out.is_empty() {
                out = s.tokens.clone();
            }
        }
        BaselineKind::Insert => {
            for &tok in &s.tokens {
                out.push(tok);
                if rng.gen::<f64>() < rate {
                    out.push(rng.gen_range(1..vocab.size()));
                }
            }
        }
        BaselineKind::Substitute => {
            for &tok in &s.tokens {
                if rng.gen::<f64>() < rate {
                    out.push(rng.gen_range(1..vocab.size()));
                } else {
                    out.push(tok);
                }
            }
        }
    }
    out.truncate(max_len);
    Ok(TokenSentence {
        tokens: out,
        fraternal: s.fraternal.clone(),
    })
}

fn parse_id_field(
    field: &str,
    vocab: Vocabulary,
    path: &str,
    line_no: usize,
) -> Result<Vec<u32>> {
    let mut ids = Vec::new();
    for piece in field.split_whitespace() {
        let id: u32 = piece.parse().map_err(|_| Error::Parse {
            path: path.to_string(),
            line: line_no,
            msg: format!("expected a decimal token id, found {piece:?}"),
        })?;
        if !vocab.contains(id) {
            return Err(Error::Parse {
                path: path.to_string(),
                line: line_no,
                msg: format!("token id {id} is outside the vocabulary (size {})", vocab.size()),
            });
        }
        ids.push(id);
    }
    Ok(ids)
}

/// Reads a paired-corpus TSV: one sentence per line, `src_ids<TAB>frat_ids`,
/// both fields space-separated decimal ids. Sentences are truncated to
/// max_len. The fraternal field may be empty only when `fraternal_required`
/// is false.
pub fn read_paired_corpus(
    path: &Path,
    vocab: Vocabulary,
    max_len: usize,
    fraternal_required: bool,
) -> Result<Vec<TokenSentence>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let path_str = path.display().to_string();
    let mut sentences = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_no = idx + 1;
        let (src_field, frat_field) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path_str.clone(),
            line: line_no,
            msg: "expected two tab-separated fields: src_ids<TAB>frat_ids".into(),
        })?;
        let mut tokens = parse_id_field(src_field, vocab, &path_str, line_no)?;
        let mut fraternal = parse_id_field(frat_field, vocab, &path_str, line_no)?;
        tokens.truncate(max_len);
        fraternal.truncate(max_len);
        if !tokens.iter().any(|&t| t != PAD_ID) {
            return Err(Error::Parse {
                path: path_str.clone(),
                line: line_no,
                msg: "source field has no non-pad token".into(),
            });
        }
        if fraternal_required && fraternal.is_empty() {
            return Err(Error::Parse {
                path: path_str.clone(),
                line: line_no,
                msg: "fraternal field is empty but the fraternal channel is enabled".into(),
            });
        }
        sentences.push(TokenSentence { tokens, fraternal });
    }
    Ok(sentences)
}
