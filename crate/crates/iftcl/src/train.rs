//! The training driver: one SGD step per mini-batch of twin triples, with
//! the queue updated after each parameter update, plus the epoch loop that
//! streams metrics records.
//!
//! Abort semantics are strict: a step that fails for any reason (typically
//! a numeric blow-up) leaves the parameters, the velocity and the queue
//! exactly as they were, so the caller always holds the last good state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_identical_pair, make_twins, EmbeddingTable, TokenSentence};
use crate::encoder::{sgd_step, update_velocity, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate_sts, StsPair};
use crate::objective::{
    batch_param_gradients, compute_margins, loss_and_h_gradients, LossBreakdown, LossFlags,
    TwinsBatch,
};
use crate::queue::HippocampusQueue;

/// Everything a single training step needs besides the mutable state.
#[derive(Debug, Clone, Copy)]
pub struct StepSettings<'a> {
    /// Softmax temperature for both InfoNCE terms.
    pub tau: f64,
    /// Dropout rate for the twin masks.
    pub rate: f64,
    /// Fusion rate: weight of the source embedding in the fraternal view.
    pub eps: f64,
    pub max_len: usize,
    pub lr: f64,
    pub momentum: f64,
    pub flags: LossFlags,
    /// Frozen source-language embedding table.
    pub bel_s: &'a EmbeddingTable,
    /// Frozen fraternal-language embedding table.
    pub bel_f: &'a EmbeddingTable,
}

/// One metrics stream record, one JSON object per line in metrics files.
/// Loss fields hold the per-batch sums of the corresponding per-instance
/// terms; `spearman_dev` is null when no dev set is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(rename = "loss_I")]
    pub loss_identical: f64,
    #[serde(rename = "loss_F")]
    pub loss_fraternal: f64,
    #[serde(rename = "loss_T")]
    pub loss_twins: f64,
    pub loss_total: f64,
    pub spearman_dev: Option<f64>,
    pub queue_len: usize,
}

/// Runs one full training step over the given sentences:
/// augment, encode, measure margins, evaluate the loss, backpropagate,
/// update (momentum) SGD state, then enqueue the detached anchor
/// representations. On error nothing is mutated.
pub fn train_step<R: Rng>(
    theta: &mut EncoderParams,
    velocity: &mut EncoderParams,
    mut queue: Option<&mut HippocampusQueue>,
    sentences: &[TokenSentence],
    st: &StepSettings,
    rng: &mut R,
) -> Result<LossBreakdown> {
    if sentences.is_empty() {
        return Err(Error::Domain("train_step: empty batch".into()));
    }
    if !st.momentum.is_finite() || st.momentum < 0.0 {
        return Err(Error::Config(format!(
            "momentum must be finite and nonnegative, got {}",
            st.momentum
        )));
    }
    let need_fraternal = st.flags.fraternal || st.flags.twins;
    let mut views = Vec::with_capacity(sentences.len());
    for s in sentences {
        views.push(if need_fraternal {
            make_twins(s, st.bel_s, st.bel_f, st.max_len, st.rate, st.eps, rng)?
        } else {
            make_identical_pair(s, st.bel_s, st.max_len, st.rate, rng)?
        });
    }
    let batch = TwinsBatch::from_views(theta, views)?;
    let margins = match st.flags.twins {
        true => Some(compute_margins(&batch, st.flags.mode)?),
        false => None,
    };
    let (breakdown, hg) =
        loss_and_h_gradients(&batch, queue.as_deref(), st.tau, margins.as_ref(), &st.flags)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!(
            "train_step: non-finite loss {}",
            breakdown.total
        )));
    }
    let grads = batch_param_gradients(theta, &batch, &hg)?;

    // stage the full update, then commit only once every part has succeeded
    let mut new_velocity = velocity.clone();
    update_velocity(&mut new_velocity, &grads, st.momentum);
    let new_theta = sgd_step(theta, &new_velocity, st.lr)?;
    if let Some(q) = queue.as_deref_mut() {
        let anchors: Vec<Vec<f64>> = batch.anchors.iter().map(|c| c.h().to_vec()).collect();
        q.push_batch(&anchors)?;
    }
    *theta = new_theta;
    *velocity = new_velocity;
    Ok(breakdown)
}

/// Runs one epoch of sequential mini-batches over the corpus (any ragged
/// tail shorter than `batch_size` is dropped). A metrics record is passed
/// to `sink` whenever the global step count is a multiple of `eval_every`,
/// and additionally for the epoch's last step when `force_final` is set.
/// Returns the number of steps completed; on error, `theta`, `velocity`
/// and `queue` hold the state after the last successful step.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<R, F>(
    theta: &mut EncoderParams,
    velocity: &mut EncoderParams,
    mut queue: Option<&mut HippocampusQueue>,
    corpus: &[TokenSentence],
    dev: Option<&[StsPair]>,
    st: &StepSettings,
    batch_size: usize,
    eval_every: usize,
    step_base: usize,
    force_final: bool,
    rng: &mut R,
    sink: &mut F,
) -> Result<usize>
where
    R: Rng,
    F: FnMut(&MetricsRecord, &EncoderParams) -> Result<()>,
{
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if eval_every == 0 {
        return Err(Error::Config("eval_every must be at least 1".into()));
    }
    let n_batches = corpus.len() / batch_size;
    if n_batches == 0 {
        return Err(Error::Domain(format!(
            "corpus of {} sentences provides no full batch of {batch_size}",
            corpus.len()
        )));
    }
    let mut steps = 0;
    for (b, batch) in corpus.chunks_exact(batch_size).enumerate() {
        let breakdown = train_step(theta, velocity, queue.as_deref_mut(), batch, st, rng)
            .map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("step {}: {msg}", step_base + b + 1))
                }
                other => other,
            })?;
        steps += 1;
        let global = step_base + steps;
        let is_last = b + 1 == n_batches;
        if global % eval_every == 0 || (force_final && is_last) {
            let spearman_dev = match dev {
                Some(pairs) => Some(evaluate_sts(theta, pairs, st.bel_s)?.spearman),
                None => None,
            };
            let record = MetricsRecord {
                step: global,
                loss_identical: breakdown.sum_identical(),
                loss_fraternal: breakdown.sum_fraternal(),
                loss_twins: breakdown.sum_twins(),
                loss_total: breakdown.total,
                spearman_dev,
                queue_len: queue.as_deref().map(|q| q.len()).unwrap_or(0),
            };
            sink(&record, theta)?;
        }
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Vocabulary;
    use crate::streams::stream_rng;

    struct Fixture {
        bel_s: EmbeddingTable,
        bel_f: EmbeddingTable,
        theta: EncoderParams,
        velocity: EncoderParams,
        corpus: Vec<TokenSentence>,
        dev: Vec<StsPair>,
    }

    fn fixture(seed: u64, n_sentences: usize) -> Fixture {
        let vocab = Vocabulary::new(20).unwrap();
        let mut rng = stream_rng(seed, "train-tables");
        let bel_s = EmbeddingTable::seeded_gaussian(vocab, 4, &mut rng).unwrap();
        let bel_f = EmbeddingTable::seeded_gaussian(vocab, 4, &mut rng).unwrap();
        let theta =
            EncoderParams::init_gaussian(4, 5, 4, &mut stream_rng(seed, "train-init")).unwrap();
        let velocity = EncoderParams::zeros(4, 5, 4).unwrap();
        let corpus: Vec<TokenSentence> = (0..n_sentences)
            .map(|i| TokenSentence {
                tokens: vec![1 + (i % 6) as u32, 7 + (i % 4) as u32, 12 + (i % 3) as u32],
                fraternal: vec![2 + (i % 5) as u32, 15 + (i % 4) as u32],
            })
            .collect();
        let dev = vec![
            StsPair::new(vec![1, 7, 12], vec![1, 7, 12], 5.0).unwrap(),
            StsPair::new(vec![2, 8], vec![3, 9, 13], 1.0).unwrap(),
            StsPair::new(vec![4, 10], vec![4, 10, 14], 3.0).unwrap(),
        ];
        Fixture {
            bel_s,
            bel_f,
            theta,
            velocity,
            corpus,
            dev,
        }
    }

    fn settings<'a>(
        bel_s: &'a EmbeddingTable,
        bel_f: &'a EmbeddingTable,
        lr: f64,
    ) -> StepSettings<'a> {
        StepSettings {
            tau: 0.05,
            rate: 0.15,
            eps: 0.9,
            max_len: 4,
            lr,
            momentum: 0.0,
            flags: LossFlags::default(),
            bel_s,
            bel_f,
        }
    }

    #[test]
    fn a_successful_step_updates_theta_and_enqueues_the_batch() {
        let mut f = fixture(1, 2);
        let st = settings(&f.bel_s, &f.bel_f, 0.05);
        let mut q = HippocampusQueue::new(6, 2, 0.01).unwrap();
        let before = f.theta.to_flat();
        let corpus = f.corpus.clone();
        let breakdown = train_step(
            &mut f.theta,
            &mut f.velocity,
            Some(&mut q),
            &corpus,
            &st,
            &mut stream_rng(1, "step-masks"),
        )
        .unwrap();
        assert_eq!(q.len(), 2, "anchors of the batch should be enqueued");
        assert_ne!(f.theta.to_flat(), before, "parameters should move");
        assert_eq!(breakdown.l_identical.len(), 2);
        assert!(breakdown.total.is_finite());
        assert!(breakdown.total >= 0.0);
    }

    #[test]
    fn zero_learning_rate_leaves_theta_bitwise_but_still_enqueues() {
        let mut f = fixture(2, 2);
        let st = settings(&f.bel_s, &f.bel_f, 0.0);
        let mut q = HippocampusQueue::new(6, 2, 0.01).unwrap();
        let before: Vec<u64> = f.theta.to_flat().iter().map(|x| x.to_bits()).collect();
        let corpus = f.corpus.clone();
        train_step(
            &mut f.theta,
            &mut f.velocity,
            Some(&mut q),
            &corpus,
            &st,
            &mut stream_rng(2, "step-masks"),
        )
        .unwrap();
        let after: Vec<u64> = f.theta.to_flat().iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after, "lr = 0 must not change a single bit");
        assert_eq!(q.len(), 2, "the queue still advances");
    }

    #[test]
    fn steps_are_deterministic_given_equal_state_and_rng() {
        let run = || {
            let mut f = fixture(3, 4);
            let st = settings(&f.bel_s, &f.bel_f, 0.1);
            let mut q = HippocampusQueue::new(8, 2, 0.01).unwrap();
            let mut rng = stream_rng(3, "step-masks");
            let corpus = f.corpus.clone();
            for batch in corpus.chunks_exact(2) {
                train_step(&mut f.theta, &mut f.velocity, Some(&mut q), batch, &st, &mut rng)
                    .unwrap();
            }
            f.theta
                .to_flat()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn a_numeric_abort_leaves_all_state_untouched() {
        let mut f = fixture(4, 4);
        let st = settings(&f.bel_s, &f.bel_f, 1e300);
        let mut q = HippocampusQueue::new(8, 2, 0.01).unwrap();
        let mut rng = stream_rng(4, "step-masks");
        let corpus = f.corpus.clone();

        // the first step succeeds but catapults theta to a huge scale
        train_step(
            &mut f.theta,
            &mut f.velocity,
            Some(&mut q),
            &corpus[..2],
            &st,
            &mut rng,
        )
        .unwrap();
        let theta_bits: Vec<u64> = f.theta.to_flat().iter().map(|x| x.to_bits()).collect();
        let vel_bits: Vec<u64> = f.velocity.to_flat().iter().map(|x| x.to_bits()).collect();
        assert_eq!(q.len(), 2);

        // the second step overflows and must change nothing
        let err = train_step(
            &mut f.theta,
            &mut f.velocity,
            Some(&mut q),
            &corpus[2..4],
            &st,
            &mut rng,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 3, "numeric abort: {err}");
        let after: Vec<u64> = f.theta.to_flat().iter().map(|x| x.to_bits()).collect();
        assert_eq!(theta_bits, after, "theta must be untouched by the abort");
        let vel_after: Vec<u64> = f.velocity.to_flat().iter().map(|x| x.to_bits()).collect();
        assert_eq!(vel_bits, vel_after, "velocity must be untouched");
        assert_eq!(q.len(), 2, "queue must be untouched");
    }

    #[test]
    fn an_epoch_drops_the_ragged_tail_and_numbers_steps_globally() {
        let mut f = fixture(5, 5);
        let st = settings(&f.bel_s, &f.bel_f, 0.05);
        let mut q = HippocampusQueue::new(8, 2, 0.01).unwrap();
        let mut records = Vec::new();
        let corpus = f.corpus.clone();
        let dev = f.dev.clone();
        let steps = train_epoch(
            &mut f.theta,
            &mut f.velocity,
            Some(&mut q),
            &corpus,
            Some(&dev),
            &st,
            2,
            1,
            10,
            false,
            &mut stream_rng(5, "epoch-masks"),
            &mut |r, _| {
                records.push(r.clone());
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(steps, 2, "5 sentences at batch 2 yield 2 steps");
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].step, 11);
        assert_eq!(records[1].step, 12);
        assert_eq!(records[0].queue_len, 2);
        assert_eq!(records[1].queue_len, 4);
        assert!(records.iter().all(|r| r.spearman_dev.is_some()));
        assert!(records.iter().all(|r| r.loss_total.is_finite()));
    }

    #[test]
    fn sparse_metrics_emission_respects_eval_every_and_force_final() {
        let mut f = fixture(6, 6);
        let st = settings(&f.bel_s, &f.bel_f, 0.05);
        let corpus = f.corpus.clone();
        let mut steps_seen = Vec::new();
        train_epoch(
            &mut f.theta,
            &mut f.velocity,
            None,
            &corpus,
            None,
            &st,
            2,
            2,
            0,
            true,
            &mut stream_rng(6, "epoch-masks"),
            &mut |r, _| {
                steps_seen.push(r.step);
                assert_eq!(r.spearman_dev, None);
                assert_eq!(r.queue_len, 0);
                Ok(())
            },
        )
        .unwrap();
        // multiples of 2 plus the forced final step 3
        assert_eq!(steps_seen, vec![2, 3]);
    }

    #[test]
    fn an_epoch_abort_retains_the_last_good_state_and_records() {
        let mut f = fixture(7, 6);
        let st = settings(&f.bel_s, &f.bel_f, 1e300);
        let mut q = HippocampusQueue::new(8, 2, 0.01).unwrap();
        let corpus = f.corpus.clone();
        let mut records = Vec::new();
        let mut theta_at_records: Vec<Vec<u64>> = Vec::new();
        let err = train_epoch(
            &mut f.theta,
            &mut f.velocity,
            Some(&mut q),
            &corpus,
            None,
            &st,
            2,
            1,
            0,
            false,
            &mut stream_rng(7, "epoch-masks"),
            &mut |r, t| {
                records.push(r.clone());
                theta_at_records.push(t.to_flat().iter().map(|x| x.to_bits()).collect());
                Ok(())
            },
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("step 2"), "got: {err}");
        assert_eq!(records.len(), 1, "only the first step completed");
        let theta_now: Vec<u64> = f.theta.to_flat().iter().map(|x| x.to_bits()).collect();
        assert_eq!(
            theta_now, theta_at_records[0],
            "theta must equal the state at the last good step"
        );
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn identical_only_training_ignores_the_fraternal_field() {
        let mut f = fixture(8, 4);
        for s in &mut f.corpus {
            s.fraternal.clear();
        }
        let mut st = settings(&f.bel_s, &f.bel_f, 0.05);
        st.flags = LossFlags {
            fraternal: false,
            twins: false,
            ..LossFlags::default()
        };
        let corpus = f.corpus.clone();
        let breakdown = train_step(
            &mut f.theta,
            &mut f.velocity,
            None,
            &corpus[..2],
            &st,
            &mut stream_rng(8, "step-masks"),
        )
        .unwrap();
        assert!(breakdown.l_fraternal.iter().all(|&x| x == 0.0));
        assert!(breakdown.l_twins.iter().all(|&x| x == 0.0));
        assert_eq!(breakdown.total, breakdown.sum_identical());
    }

    #[test]
    fn epoch_rejects_degenerate_shapes() {
        let mut f = fixture(9, 1);
        let st = settings(&f.bel_s, &f.bel_f, 0.05);
        let corpus = f.corpus.clone();
        let sink = &mut |_: &MetricsRecord, _: &EncoderParams| Ok(());
        let err = train_epoch(
            &mut f.theta,
            &mut f.velocity,
            None,
            &corpus,
            None,
            &st,
            2,
            1,
            0,
            false,
            &mut stream_rng(9, "m"),
            sink,
        )
        .unwrap_err();
        assert!(err.to_string().contains("no full batch"), "got: {err}");
    }

    #[test]
    fn metrics_records_serialize_with_the_documented_keys() {
        let r = MetricsRecord {
            step: 7,
            loss_identical: 1.5,
            loss_fraternal: 0.25,
            loss_twins: 0.125,
            loss_total: 1.875,
            spearman_dev: None,
            queue_len: 16,
        };
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(
            json,
            "{\"step\":7,\"loss_I\":1.5,\"loss_F\":0.25,\"loss_T\":0.125,\
             \"loss_total\":1.875,\"spearman_dev\":null,\"queue_len\":16}"
        );
        let back: MetricsRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);

        let r2 = MetricsRecord {
            spearman_dev: Some(0.5),
            ..r
        };
        assert!(serde_json::to_string(&r2)
            .unwrap()
            .contains("\"spearman_dev\":0.5"));
    }
}
