//! Similarity evaluation and analysis: Spearman rank correlation against
//! gold scores, per-pair prediction dumps, and a softmax-based mutual
//! information estimator over paired representations.
//!
//! Evaluation is fully deterministic: dropout is disabled (predictions use
//! the raw embedding lookup) and every reduction runs in index order.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::augment::{embed_lookup, EmbeddingTable};
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::numeric::cosine_similarity;

/// One evaluation pair: two token sentences and a human-style gold score.
#[derive(Debug, Clone, PartialEq)]
pub struct StsPair {
    pub tokens_a: Vec<u32>,
    pub tokens_b: Vec<u32>,
    pub gold: f64,
}

/// The score scale runs from 0 to this maximum; pairs at the maximum are
/// the "task-relevant" ones for the MI analysis.
pub const MAX_GOLD: f64 = 5.0;

impl StsPair {
    pub fn new(tokens_a: Vec<u32>, tokens_b: Vec<u32>, gold: f64) -> Result<Self> {
        if tokens_a.is_empty() || tokens_b.is_empty() {
            return Err(Error::Domain("evaluation pair has an empty side".into()));
        }
        if !gold.is_finite() || !(0.0..=MAX_GOLD).contains(&gold) {
            return Err(Error::Domain(format!(
                "gold score {gold} is outside [0, {MAX_GOLD}]"
            )));
        }
        Ok(StsPair {
            tokens_a,
            tokens_b,
            gold,
        })
    }
}

/// Evaluation outcome: the rank correlation plus every (prediction, gold)
/// pair for external analysis.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub spearman: f64,
    pub n_pairs: usize,
    pub predictions: Vec<(f64, f64)>,
}

/// Fractional ranks (1-based); tied values all receive the mean of their
/// rank block. Inputs must be finite.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).expect("finiteness checked by caller"));
    let mut ranks = vec![0.0; n];
    let mut k = 0;
    while k < n {
        let mut e = k;
        while e + 1 < n && x[idx[e + 1]] == x[idx[k]] {
            e += 1;
        }
        // positions k..=e (0-based) share ranks k+1..=e+1
        let avg = (k + e) as f64 / 2.0 + 1.0;
        for t in k..=e {
            ranks[idx[t]] = avg;
        }
        k = e + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::Domain(
            "constant input has no defined rank correlation".into(),
        ));
    }
    Ok(cov / (var_a * var_b).sqrt())
}

/// Spearman rank correlation with average ranks for ties: Pearson over the
/// fractionally ranked vectors.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Domain(format!(
            "spearman: length mismatch, {} predictions vs {} golds",
            pred.len(),
            gold.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Domain(format!(
            "spearman needs at least 2 pairs, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(gold).any(|x| !x.is_finite()) {
        return Err(Error::Domain("spearman: non-finite input value".into()));
    }
    pearson(&average_ranks(pred), &average_ranks(gold))
}

fn represent(theta: &EncoderParams, table: &EmbeddingTable, tokens: &[u32]) -> Result<Vec<f64>> {
    let emb = embed_lookup(table, tokens, tokens.len())?;
    Ok(encode(theta, &emb)?.0)
}

/// Cosine similarity of the two encoded sentences, with dropout disabled.
pub fn predict_similarity(
    theta: &EncoderParams,
    pair: &StsPair,
    table: &EmbeddingTable,
) -> Result<f64> {
    let ha = represent(theta, table, &pair.tokens_a)?;
    let hb = represent(theta, table, &pair.tokens_b)?;
    cosine_similarity(&ha, &hb)
}

/// Predicts every pair and correlates predictions with gold scores.
pub fn evaluate_sts(
    theta: &EncoderParams,
    dataset: &[StsPair],
    table: &EmbeddingTable,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Domain("evaluation dataset is empty".into()));
    }
    let mut preds = Vec::with_capacity(dataset.len());
    let mut golds = Vec::with_capacity(dataset.len());
    for pair in dataset {
        preds.push(predict_similarity(theta, pair, table)?);
        golds.push(pair.gold);
    }
    let rho = spearman(&preds, &golds)?;
    Ok(EvalReport {
        spearman: rho,
        n_pairs: dataset.len(),
        predictions: preds.into_iter().zip(golds).collect(),
    })
}

/// Softmax mutual information over N paired representations:
///
/// ```text
/// MI = log N + (1/N) sum_i log[ exp(sim(h_i, h_i*)/tau)
///                               / sum_j exp(sim(h_i, h_j*)/tau) ]
/// ```
///
/// Upper-bounded by log N (the diagonal term appears in its own
/// denominator); exactly 0 for N = 1 and for uniform similarities.
pub fn mutual_information(h: &[Vec<f64>], h_star: &[Vec<f64>], tau: f64) -> Result<f64> {
    if h.is_empty() {
        return Err(Error::Domain("mutual information of an empty set".into()));
    }
    if h.len() != h_star.len() {
        return Err(Error::Domain(format!(
            "mutual information: {} representations vs {} counterparts",
            h.len(),
            h_star.len()
        )));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    let n = h.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            row.push(cosine_similarity(&h[i], &h_star[j])? / tau);
        }
        let c = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&x| (x - c).exp()).sum();
        acc += (row[i] - c) - sum.ln();
    }
    Ok((n as f64).ln() + acc / n as f64)
}

/// MI restricted to maximum-gold pairs: encodes both sides of each pair and
/// runs the estimator. Every pair must carry the maximum score.
pub fn task_relevant_mi(
    theta: &EncoderParams,
    dataset: &[StsPair],
    tau: f64,
    table: &EmbeddingTable,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Domain(
            "task-relevant MI over an empty dataset".into(),
        ));
    }
    for (k, pair) in dataset.iter().enumerate() {
        if pair.gold != MAX_GOLD {
            return Err(Error::Domain(format!(
                "pair {k}: gold {} is not the maximum score {MAX_GOLD}",
                pair.gold
            )));
        }
    }
    let mut h = Vec::with_capacity(dataset.len());
    let mut h_star = Vec::with_capacity(dataset.len());
    for pair in dataset {
        h.push(represent(theta, table, &pair.tokens_a)?);
        h_star.push(represent(theta, table, &pair.tokens_b)?);
    }
    mutual_information(&h, &h_star, tau)
}

fn parse_tokens(path: &Path, line_no: usize, field: &str, what: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for piece in field.split_whitespace() {
        let id: u32 = piece.parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: line_no,
            msg: format!("expected integer token id in the {what} field, got {piece:?}"),
        })?;
        if id == 0 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: line_no,
                msg: format!("token id 0 is reserved for padding ({what} field)"),
            });
        }
        out.push(id);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: line_no,
            msg: format!("{what} field is empty"),
        });
    }
    Ok(out)
}

/// Reads an evaluation file: one `ids_a<TAB>ids_b<TAB>gold` line per pair,
/// token ids space-separated, gold a decimal in [0, 5]. Blank lines are
/// skipped; there are no comments.
pub fn read_sts_file(path: &Path) -> Result<Vec<StsPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (zero_based, line) in text.lines().enumerate() {
        let line_no = zero_based + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: line_no,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let a = parse_tokens(path, line_no, fields[0], "first sentence")?;
        let b = parse_tokens(path, line_no, fields[1], "second sentence")?;
        let gold: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: line_no,
            msg: format!("expected a decimal gold score, got {:?}", fields[2]),
        })?;
        pairs.push(StsPair::new(a, b, gold).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: line_no,
            msg: e.to_string(),
        })?);
    }
    Ok(pairs)
}

fn join_ids(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes the evaluation file format read by [`read_sts_file`]. Gold scores
/// are printed with two decimals.
pub fn write_sts_file(path: &Path, pairs: &[StsPair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!(
            "{}\t{}\t{:.2}\n",
            join_ids(&p.tokens_a),
            join_ids(&p.tokens_b),
            p.gold
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes one `predicted<TAB>gold` line per pair, for external plotting.
pub fn write_predictions(path: &Path, report: &EvalReport) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (pred, gold) in &report.predictions {
        writeln!(w, "{pred}\t{gold}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
