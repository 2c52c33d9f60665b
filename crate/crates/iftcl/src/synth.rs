//! Deterministic synthetic data: clustered token corpora with a remapped
//! fraternal channel, and evaluation pairs whose gold scores come from an
//! implementation-independent token-overlap oracle.
//!
//! The vocabulary (excluding padding id 0) is cut into one shared pool plus
//! one core pool per cluster, all of equal size. A sentence from cluster c
//! draws each token from the shared pool with probability
//! `cluster_token_overlap` and from c's core otherwise, so sentences from
//! one cluster overlap heavily and sentences from different clusters meet
//! only in the shared pool. The fraternal side of every line is a fixed
//! bijective remap of the source tokens, a stand-in second language with
//! exact tokenwise translational structure.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::streams::stream_rng;

/// Shape and seeding of one synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_clusters: usize,
    pub sentences_per_cluster: usize,
    pub vocab_size: u32,
    pub len_min: usize,
    pub len_max: usize,
    /// Probability that a token comes from the shared pool instead of the
    /// sentence's cluster core.
    pub cluster_token_overlap: f64,
    pub corpus_seed: u64,
    pub remap_seed: u64,
}

impl SynthSpec {
    /// Tokens per pool: the non-pad vocabulary is split into
    /// `n_clusters + 1` pools (shared plus one core per cluster).
    pub fn core_size(&self) -> u32 {
        (self.vocab_size - 1) / (self.n_clusters as u32 + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::Config("n_clusters must be at least 1".into()));
        }
        if self.sentences_per_cluster == 0 {
            return Err(Error::Config(
                "sentences_per_cluster must be at least 1".into(),
            ));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.core_size() == 0 {
            return Err(Error::Config(format!(
                "vocab_size {} is too small for {} clusters: \
                 each of the {} token pools would be empty",
                self.vocab_size,
                self.n_clusters,
                self.n_clusters + 1
            )));
        }
        if self.len_min == 0 || self.len_max < self.len_min {
            return Err(Error::Config(format!(
                "sentence length range [{}, {}] is invalid",
                self.len_min, self.len_max
            )));
        }
        if !(0.0..=1.0).contains(&self.cluster_token_overlap)
            || !self.cluster_token_overlap.is_finite()
        {
            return Err(Error::Config(format!(
                "cluster_token_overlap must lie in [0, 1], got {}",
                self.cluster_token_overlap
            )));
        }
        Ok(())
    }

    fn draw_sentence<R: Rng>(&self, cluster: usize, rng: &mut R) -> Vec<u32> {
        let k = self.core_size();
        let core_start = 1 + k + cluster as u32 * k;
        let len = rng.gen_range(self.len_min..=self.len_max);
        (0..len)
            .map(|_| {
                if rng.gen::<f64>() < self.cluster_token_overlap {
                    1 + rng.gen_range(0..k)
                } else {
                    core_start + rng.gen_range(0..k)
                }
            })
            .collect()
    }
}

/// The fixed bijective token remap defining the fraternal channel:
/// `remap[t - 1]` is the image of token t, for t in [1, vocab_size).
pub fn token_remap(spec: &SynthSpec) -> Vec<u32> {
    let mut ids: Vec<u32> = (1..spec.vocab_size).collect();
    ids.shuffle(&mut stream_rng(spec.remap_seed, "remap-perm"));
    ids
}

fn join_ids(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates the paired-corpus file content: one `source<TAB>fraternal`
/// line per sentence, clusters interleaved round-robin. Bitwise
/// reproducible for a fixed spec.
pub fn gen_corpus(spec: &SynthSpec) -> Result<String> {
    spec.validate()?;
    let remap = token_remap(spec);
    let mut rng = stream_rng(spec.corpus_seed, "corpus-tokens");
    let total = spec.n_clusters * spec.sentences_per_cluster;
    let mut out = String::new();
    for s in 0..total {
        let cluster = s % spec.n_clusters;
        let tokens = spec.draw_sentence(cluster, &mut rng);
        let fraternal: Vec<u32> = tokens.iter().map(|&t| remap[t as usize - 1]).collect();
        out.push_str(&join_ids(&tokens));
        out.push('\t');
        out.push_str(&join_ids(&fraternal));
        out.push('\n');
    }
    Ok(out)
}

fn jaccard(a: &[u32], b: &[u32]) -> f64 {
    let sa: std::collections::BTreeSet<u32> = a.iter().copied().collect();
    let sb: std::collections::BTreeSet<u32> = b.iter().copied().collect();
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    inter / union
}

/// Gold score of a sentence pair: 5 times the Jaccard overlap of the two
/// token sets, rounded to two decimals. Any implementation can recompute
/// this from the file alone.
pub fn gold_score(a: &[u32], b: &[u32]) -> f64 {
    (5.0 * jaccard(a, b) * 100.0).round() / 100.0
}

/// Generates evaluation file content: `n_pairs` lines of
/// `ids_a<TAB>ids_b<TAB>gold`. Every eighth pair (the first of each block)
/// is a sentence paired with itself, guaranteeing maximum-gold pairs for
/// the task-relevant MI analysis; the rest alternate within-cluster and
/// cross-cluster draws. Bitwise reproducible for fixed (spec, seed).
pub fn gen_sts(spec: &SynthSpec, n_pairs: usize, seed: u64) -> Result<String> {
    spec.validate()?;
    if n_pairs < 2 {
        return Err(Error::Config(format!(
            "an evaluation set needs at least 2 pairs, got {n_pairs}"
        )));
    }
    let mut rng = stream_rng(seed, "sts-pairs");
    let mut out = String::new();
    for p in 0..n_pairs {
        let (a, b) = if p % 8 == 0 {
            let s = spec.draw_sentence(rng.gen_range(0..spec.n_clusters), &mut rng);
            (s.clone(), s)
        } else if p % 2 == 1 {
            let c = rng.gen_range(0..spec.n_clusters);
            (spec.draw_sentence(c, &mut rng), spec.draw_sentence(c, &mut rng))
        } else {
            let c1 = rng.gen_range(0..spec.n_clusters);
            let c2 = if spec.n_clusters == 1 {
                0
            } else {
                let shift = rng.gen_range(1..spec.n_clusters);
                (c1 + shift) % spec.n_clusters
            };
            (spec.draw_sentence(c1, &mut rng), spec.draw_sentence(c2, &mut rng))
        };
        out.push_str(&format!(
            "{}\t{}\t{:.2}\n",
            join_ids(&a),
            join_ids(&b),
            gold_score(&a, &b)
        ));
    }
    Ok(out)
}
