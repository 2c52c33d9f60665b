//! The training objective: identical-twin InfoNCE with the queue's weighted
//! negative mass, fraternal-twin InfoNCE, and the margin-preserving twins
//! loss, together with exact analytic gradients through the representations.
//!
//! Per batch instance i the three terms are
//!
//! ```text
//! lI_i = -log[ exp(sim(h_i, h_i+)/tau) / (sum_j exp(sim(h_i, h_j+)/tau) + phi(h_i)) ]
//! lF_i = -log[ exp(sim(h_i, h_i-)/tau) / sum_j exp(sim(h_i, h_j-)/tau) ]
//! lT_i = | exp(sim(h_i, h_i+)) - exp(sim(h_i, h_i-)) - M_i |
//! ```
//!
//! with phi the queue term and M_i the innate margin measured on the pooled
//! post-dropout embeddings. M_i is a constant during differentiation and
//! queue entries receive no gradient. The twins loss carries no temperature.
//! All per-instance losses are summed, not averaged.

use crate::encoder::{accumulate_grads, encode, encode_backward, EncoderParams};
use crate::error::{Error, Result};
use crate::numeric::{cosine_similarity, cosine_similarity_grad, sign, TokenMatrix};
use crate::queue::HippocampusQueue;
use crate::augment::TwinViews;

/// How the twins loss pairs instances with margins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TwinsMode {
    /// Per-instance margins M_i, compared diagonally (the default).
    #[default]
    Diagonal,
    /// Margin matrix M_ij accumulated over all batch pairs.
    Pairwise,
}

impl std::str::FromStr for TwinsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag" | "diagonal" => Ok(TwinsMode::Diagonal),
            "pairwise" => Ok(TwinsMode::Pairwise),
            other => Err(Error::Config(format!(
                "unknown twins_mode {other:?}, expected diag or pairwise"
            ))),
        }
    }
}

/// Which loss terms are active. Ablations clear individual flags; the twins
/// loss additionally requires the fraternal channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    pub fraternal: bool,
    pub twins: bool,
    pub mode: TwinsMode,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            fraternal: true,
            twins: true,
            mode: TwinsMode::Diagonal,
        }
    }
}

/// One encoded view of one sentence: the augmented embedding matrix and the
/// forward trace (whose pooled vector and output the losses consume).
#[derive(Debug, Clone)]
pub struct ChannelView {
    pub emb: TokenMatrix,
    pub trace: crate::encoder::EncodeTrace,
}

impl ChannelView {
    pub fn encode(theta: &EncoderParams, emb: TokenMatrix) -> Result<Self> {
        let (_, trace) = encode(theta, &emb)?;
        Ok(ChannelView { emb, trace })
    }

    /// The representation h.
    pub fn h(&self) -> &[f64] {
        &self.trace.output
    }

    /// The pooled post-dropout embedding.
    pub fn pooled(&self) -> &[f64] {
        &self.trace.pooled
    }
}

/// The N encoded twin triples of one mini-batch. The fraternal channel is
/// absent only when it has been ablated away.
#[derive(Debug, Clone)]
pub struct TwinsBatch {
    pub anchors: Vec<ChannelView>,
    pub identicals: Vec<ChannelView>,
    pub fraternals: Option<Vec<ChannelView>>,
}

impl TwinsBatch {
    /// Encodes augmented views into a batch. Every view must agree on
    /// whether the fraternal channel is present.
    pub fn from_views(theta: &EncoderParams, views: Vec<TwinViews>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let with_fraternal = views[0].fraternal.is_some();
        let mut anchors = Vec::with_capacity(views.len());
        let mut identicals = Vec::with_capacity(views.len());
        let mut fraternals = Vec::with_capacity(views.len());
        for (i, v) in views.into_iter().enumerate() {
            if v.fraternal.is_some() != with_fraternal {
                return Err(Error::Domain(format!(
                    "instance {i}: fraternal channel presence differs within the batch"
                )));
            }
            anchors.push(ChannelView::encode(theta, v.anchor)?);
            identicals.push(ChannelView::encode(theta, v.identical)?);
            if let Some(f) = v.fraternal {
                fraternals.push(ChannelView::encode(theta, f)?);
            }
        }
        Ok(TwinsBatch {
            anchors,
            identicals,
            fraternals: with_fraternal.then_some(fraternals),
        })
    }

    /// Re-encodes the stored embedding matrices under different parameters.
    /// Gradient checks use this to express the loss as a pure function of
    /// theta while masks and margins stay fixed.
    pub fn reencode(&self, theta: &EncoderParams) -> Result<Self> {
        let redo = |views: &[ChannelView]| -> Result<Vec<ChannelView>> {
            views
                .iter()
                .map(|v| ChannelView::encode(theta, v.emb.clone()))
                .collect()
        };
        Ok(TwinsBatch {
            anchors: redo(&self.anchors)?,
            identicals: redo(&self.identicals)?,
            fraternals: match &self.fraternals {
                Some(f) => Some(redo(f)?),
                None => None,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn fraternals(&self) -> Result<&[ChannelView]> {
        self.fraternals.as_deref().ok_or_else(|| {
            Error::Domain("the fraternal channel is required but was ablated away".into())
        })
    }

    fn validate_nonzero(&self, need_fraternal: bool) -> Result<()> {
        for i in 0..self.len() {
            let mut channels = vec![
                ("anchor", self.anchors[i].h()),
                ("identical", self.identicals[i].h()),
            ];
            if need_fraternal {
                channels.push(("fraternal", self.fraternals()?[i].h()));
            }
            for (name, h) in channels {
                if h.iter().all(|&x| x == 0.0) {
                    return Err(Error::Domain(format!(
                        "instance {i}: zero-norm {name} representation"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-instance loss lists and their grand total (the sum of all 3N terms).
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_identical: Vec<f64>,
    pub l_fraternal: Vec<f64>,
    pub l_twins: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn sum_identical(&self) -> f64 {
        self.l_identical.iter().sum()
    }

    pub fn sum_fraternal(&self) -> f64 {
        self.l_fraternal.iter().sum()
    }

    pub fn sum_twins(&self) -> f64 {
        self.l_twins.iter().sum()
    }
}

/// Innate margins, matching the twins mode they were computed for.
#[derive(Debug, Clone, PartialEq)]
pub enum MarginSet {
    Diagonal(Vec<f64>),
    Pairwise(Vec<Vec<f64>>),
}

/// Diagonal innate margins M_i = exp(sim(p_i, p_i+)) - exp(sim(p_i, p_i-)),
/// measured on pooled post-dropout embeddings. |M_i| <= e - 1/e by
/// construction. The values are constants from the optimizer's perspective.
pub fn margins(batch: &TwinsBatch) -> Result<Vec<f64>> {
    let fraternals = batch.fraternals()?;
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let p = batch.anchors[i].pooled();
        let sim_plus = instance_sim(p, batch.identicals[i].pooled(), i)?;
        let sim_minus = instance_sim(p, fraternals[i].pooled(), i)?;
        out.push(sim_plus.exp() - sim_minus.exp());
    }
    Ok(out)
}

/// Pairwise margin matrix M_ij over pooled embeddings.
pub fn margins_pairwise(batch: &TwinsBatch) -> Result<Vec<Vec<f64>>> {
    let fraternals = batch.fraternals()?;
    let n = batch.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        let p = batch.anchors[i].pooled();
        for j in 0..n {
            let sim_plus = instance_sim(p, batch.identicals[j].pooled(), i)?;
            let sim_minus = instance_sim(p, fraternals[j].pooled(), i)?;
            out[i][j] = sim_plus.exp() - sim_minus.exp();
        }
    }
    Ok(out)
}

/// Margins in the shape the given mode needs.
pub fn compute_margins(batch: &TwinsBatch, mode: TwinsMode) -> Result<MarginSet> {
    match mode {
        TwinsMode::Diagonal => Ok(MarginSet::Diagonal(margins(batch)?)),
        TwinsMode::Pairwise => Ok(MarginSet::Pairwise(margins_pairwise(batch)?)),
    }
}

fn instance_sim(u: &[f64], v: &[f64], i: usize) -> Result<f64> {
    cosine_similarity(u, v).map_err(|e| match e {
        Error::Domain(msg) => Error::Domain(format!("instance {i}: {msg}")),
        other => other,
    })
}

/// Identical-twin loss per instance. The denominator holds all N in-batch
/// positives plus the queue's weighted mass; the queue side is a constant
/// (no gradient reaches stored entries). Computed in log-sum-exp form so
/// tau as small as 0.05 stays stable, and exactly 0 for the
/// N=1 empty-queue case.
pub fn loss_identical(
    batch: &TwinsBatch,
    queue: Option<&HippocampusQueue>,
    tau: f64,
) -> Result<Vec<f64>> {
    let (losses, _) = identical_core(batch, queue, tau, false)?;
    Ok(losses)
}

/// Fraternal-twin loss per instance; same form as the identical loss but
/// over the fraternal channel and without any queue term.
pub fn loss_fraternal(batch: &TwinsBatch, tau: f64) -> Result<Vec<f64>> {
    let (losses, _) = fraternal_core(batch, tau, false)?;
    Ok(losses)
}

/// Twins loss per instance against precomputed margins. No temperature.
pub fn loss_twins(batch: &TwinsBatch, margins: &MarginSet) -> Result<Vec<f64>> {
    let (losses, _) = twins_core(batch, margins, false)?;
    Ok(losses)
}

/// Full objective under the given flags. Ablated terms contribute zero
/// lists; the total is sum_i (lI_i + lF_i + lT_i) in index order.
pub fn total_loss(
    batch: &TwinsBatch,
    queue: Option<&HippocampusQueue>,
    tau: f64,
    margins: Option<&MarginSet>,
    flags: &LossFlags,
) -> Result<LossBreakdown> {
    let n = batch.len();
    let l_identical = loss_identical(batch, queue, tau)?;
    let l_fraternal = if flags.fraternal {
        loss_fraternal(batch, tau)?
    } else {
        vec![0.0; n]
    };
    let l_twins = if flags.twins {
        let m = margins.ok_or_else(|| {
            Error::Domain("twins loss is enabled but no margins were supplied".into())
        })?;
        loss_twins(batch, m)?
    } else {
        vec![0.0; n]
    };
    let mut total = 0.0;
    for i in 0..n {
        total += l_identical[i] + l_fraternal[i] + l_twins[i];
    }
    Ok(LossBreakdown {
        l_identical,
        l_fraternal,
        l_twins,
        total,
    })
}

/// Loss gradients with respect to every representation vector.
#[derive(Debug, Clone)]
pub struct HGrads {
    pub anchors: Vec<Vec<f64>>,
    pub identicals: Vec<Vec<f64>>,
    pub fraternals: Option<Vec<Vec<f64>>>,
}

/// Identical-twin losses and their representation gradients alone.
pub fn loss_identical_gradients(
    batch: &TwinsBatch,
    queue: Option<&HippocampusQueue>,
    tau: f64,
) -> Result<(Vec<f64>, HGrads)> {
    let (losses, g) = identical_core(batch, queue, tau, true)?;
    let (anchors, identicals) = g.expect("gradients requested");
    Ok((
        losses,
        HGrads {
            anchors,
            identicals,
            fraternals: None,
        },
    ))
}

/// Fraternal-twin losses and their representation gradients alone.
pub fn loss_fraternal_gradients(batch: &TwinsBatch, tau: f64) -> Result<(Vec<f64>, HGrads)> {
    let n = batch.len();
    let d_out = if n > 0 { batch.anchors[0].h().len() } else { 0 };
    let (losses, g) = fraternal_core(batch, tau, true)?;
    let (anchors, fraternals) = g.expect("gradients requested");
    Ok((
        losses,
        HGrads {
            anchors,
            identicals: zero_grads(n, d_out),
            fraternals: Some(fraternals),
        },
    ))
}

/// Twins losses and their representation gradients alone.
pub fn loss_twins_gradients(batch: &TwinsBatch, margins: &MarginSet) -> Result<(Vec<f64>, HGrads)> {
    let (losses, g) = twins_core(batch, margins, true)?;
    let (anchors, identicals, fraternals) = g.expect("gradients requested");
    Ok((
        losses,
        HGrads {
            anchors,
            identicals,
            fraternals: Some(fraternals),
        },
    ))
}

struct PairSim {
    c: f64,
    gu: Vec<f64>,
    gv: Vec<f64>,
}

fn pair_sims(
    left: &[ChannelView],
    right: &[ChannelView],
    with_grads: bool,
) -> Result<Vec<Vec<PairSim>>> {
    let n = left.len();
    let mut out = Vec::with_capacity(n);
    for (i, l) in left.iter().enumerate() {
        let mut row = Vec::with_capacity(n);
        for r in right.iter() {
            let ps = if with_grads {
                let (c, gu, gv) = cosine_similarity_grad(l.h(), r.h())?;
                PairSim { c, gu, gv }
            } else {
                PairSim {
                    c: instance_sim(l.h(), r.h(), i)?,
                    gu: Vec::new(),
                    gv: Vec::new(),
                }
            };
            row.push(ps);
        }
        out.push(row);
    }
    Ok(out)
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (y, &xi) in acc.iter_mut().zip(x) {
        *y += a * xi;
    }
}

fn zero_grads(n: usize, d_out: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; d_out]; n]
}

/// Shared implementation of the identical loss: losses plus, when asked,
/// gradients into the anchor and identical representations.
fn identical_core(
    batch: &TwinsBatch,
    queue: Option<&HippocampusQueue>,
    tau: f64,
    with_grads: bool,
) -> Result<(Vec<f64>, Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    batch.validate_nonzero(false)?;
    let n = batch.len();
    let d_out = batch.anchors[0].h().len();
    let sims = pair_sims(&batch.anchors, &batch.identicals, with_grads)?;

    // queue side: similarity and gradient into the anchor only; the stored
    // entry side of each cosine gradient is dropped, which is the
    // detachment contract
    let coeffs = queue.map(|q| q.coefficients()).unwrap_or_default();
    let mut queue_sims: Vec<Vec<(f64, Vec<f64>)>> = Vec::with_capacity(n);
    for a in &batch.anchors {
        let mut per_anchor = Vec::with_capacity(coeffs.len());
        if let Some(q) = queue {
            for m in 0..q.len() {
                if with_grads {
                    let (c, gu, _) = cosine_similarity_grad(a.h(), q.entry(m))?;
                    per_anchor.push((c, gu));
                } else {
                    per_anchor.push((cosine_similarity(a.h(), q.entry(m))?, Vec::new()));
                }
            }
        }
        queue_sims.push(per_anchor);
    }

    let mut losses = Vec::with_capacity(n);
    let mut g_anchor = zero_grads(n, d_out);
    let mut g_identical = zero_grads(n, d_out);
    for i in 0..n {
        let mut c = f64::NEG_INFINITY;
        for j in 0..n {
            c = c.max(sims[i][j].c / tau);
        }
        for (s, _) in &queue_sims[i] {
            c = c.max(s / tau);
        }
        let mut denom = 0.0;
        let mut batch_terms = Vec::with_capacity(n);
        for j in 0..n {
            let e = (sims[i][j].c / tau - c).exp();
            batch_terms.push(e);
            denom += e;
        }
        let mut queue_terms = Vec::with_capacity(queue_sims[i].len());
        for (m, (s, _)) in queue_sims[i].iter().enumerate() {
            let e = coeffs[m] * (s / tau - c).exp();
            queue_terms.push(e);
            denom += e;
        }
        let x_ii = sims[i][i].c / tau;
        if !denom.is_finite() {
            return Err(Error::Numeric(format!(
                "loss_identical: instance {i}: denominator overflowed"
            )));
        }
        losses.push((c - x_ii) + denom.ln());

        if with_grads {
            for j in 0..n {
                let w = batch_terms[j] / denom;
                let delta = if i == j { 1.0 } else { 0.0 };
                let dsim = (w - delta) / tau;
                axpy(&mut g_anchor[i], dsim, &sims[i][j].gu);
                axpy(&mut g_identical[j], dsim, &sims[i][j].gv);
            }
            for (m, (_, gu)) in queue_sims[i].iter().enumerate() {
                let dsim = queue_terms[m] / denom / tau;
                axpy(&mut g_anchor[i], dsim, gu);
            }
        }
    }
    Ok((losses, with_grads.then_some((g_anchor, g_identical))))
}

/// Shared implementation of the fraternal loss.
fn fraternal_core(
    batch: &TwinsBatch,
    tau: f64,
    with_grads: bool,
) -> Result<(Vec<f64>, Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    batch.validate_nonzero(true)?;
    let n = batch.len();
    let d_out = batch.anchors[0].h().len();
    let fraternals = batch.fraternals()?;
    let sims = pair_sims(&batch.anchors, fraternals, with_grads)?;

    let mut losses = Vec::with_capacity(n);
    let mut g_anchor = zero_grads(n, d_out);
    let mut g_fraternal = zero_grads(n, d_out);
    for i in 0..n {
        let mut c = f64::NEG_INFINITY;
        for j in 0..n {
            c = c.max(sims[i][j].c / tau);
        }
        let mut denom = 0.0;
        let mut terms = Vec::with_capacity(n);
        for j in 0..n {
            let e = (sims[i][j].c / tau - c).exp();
            terms.push(e);
            denom += e;
        }
        let x_ii = sims[i][i].c / tau;
        losses.push((c - x_ii) + denom.ln());

        if with_grads {
            for j in 0..n {
                let w = terms[j] / denom;
                let delta = if i == j { 1.0 } else { 0.0 };
                let dsim = (w - delta) / tau;
                axpy(&mut g_anchor[i], dsim, &sims[i][j].gu);
                axpy(&mut g_fraternal[j], dsim, &sims[i][j].gv);
            }
        }
    }
    Ok((losses, with_grads.then_some((g_anchor, g_fraternal))))
}

/// Shared implementation of the twins loss. The margin is a constant; the
/// subgradient of |.| at 0 is taken as 0.
#[allow(clippy::type_complexity)]
fn twins_core(
    batch: &TwinsBatch,
    margins: &MarginSet,
    with_grads: bool,
) -> Result<(
    Vec<f64>,
    Option<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)>,
)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    batch.validate_nonzero(true)?;
    let n = batch.len();
    let d_out = batch.anchors[0].h().len();
    let fraternals = batch.fraternals()?;

    let mut losses = vec![0.0; n];
    let mut g_anchor = zero_grads(n, d_out);
    let mut g_identical = zero_grads(n, d_out);
    let mut g_fraternal = zero_grads(n, d_out);

    let term = |i: usize,
                j: usize,
                margin: f64,
                g_anchor: &mut Vec<Vec<f64>>,
                g_identical: &mut Vec<Vec<f64>>,
                g_fraternal: &mut Vec<Vec<f64>>|
     -> Result<f64> {
        if with_grads {
            let (sp, gpu, gpv) = cosine_similarity_grad(batch.anchors[i].h(), batch.identicals[j].h())?;
            let (sm, gmu, gmv) = cosine_similarity_grad(batch.anchors[i].h(), fraternals[j].h())?;
            let gap = sp.exp() - sm.exp() - margin;
            let s = sign(gap);
            if s != 0.0 {
                axpy(&mut g_anchor[i], s * sp.exp(), &gpu);
                axpy(&mut g_identical[j], s * sp.exp(), &gpv);
                axpy(&mut g_anchor[i], -s * sm.exp(), &gmu);
                axpy(&mut g_fraternal[j], -s * sm.exp(), &gmv);
            }
            Ok(gap.abs())
        } else {
            let sp = instance_sim(batch.anchors[i].h(), batch.identicals[j].h(), i)?;
            let sm = instance_sim(batch.anchors[i].h(), fraternals[j].h(), i)?;
            Ok((sp.exp() - sm.exp() - margin).abs())
        }
    };

    match margins {
        MarginSet::Diagonal(m) => {
            if m.len() != n {
                return Err(Error::Domain(format!(
                    "margins: got {} values for a batch of {n}",
                    m.len()
                )));
            }
            for i in 0..n {
                losses[i] = term(i, i, m[i], &mut g_anchor, &mut g_identical, &mut g_fraternal)?;
            }
        }
        MarginSet::Pairwise(m) => {
            if m.len() != n || m.iter().any(|row| row.len() != n) {
                return Err(Error::Domain(format!(
                    "margin matrix shape disagrees with a batch of {n}"
                )));
            }
            for i in 0..n {
                for j in 0..n {
                    losses[i] +=
                        term(i, j, m[i][j], &mut g_anchor, &mut g_identical, &mut g_fraternal)?;
                }
            }
        }
    }
    Ok((
        losses,
        with_grads.then_some((g_anchor, g_identical, g_fraternal)),
    ))
}

/// Computes the full loss breakdown and its gradients with respect to every
/// representation vector, in one pass.
pub fn loss_and_h_gradients(
    batch: &TwinsBatch,
    queue: Option<&HippocampusQueue>,
    tau: f64,
    margins: Option<&MarginSet>,
    flags: &LossFlags,
) -> Result<(LossBreakdown, HGrads)> {
    let n = batch.len();
    let d_out = if n > 0 { batch.anchors[0].h().len() } else { 0 };
    let (l_identical, gi) = identical_core(batch, queue, tau, true)?;
    let (mut g_anchor, mut g_identical) = gi.expect("gradients requested");
    let mut g_fraternal = batch.fraternals.is_some().then(|| zero_grads(n, d_out));

    let l_fraternal = if flags.fraternal {
        let (l, gf) = fraternal_core(batch, tau, true)?;
        let (ga, gm) = gf.expect("gradients requested");
        for i in 0..n {
            axpy(&mut g_anchor[i], 1.0, &ga[i]);
            axpy(
                &mut g_fraternal.as_mut().expect("fraternal channel present")[i],
                1.0,
                &gm[i],
            );
        }
        l
    } else {
        vec![0.0; n]
    };

    let l_twins = if flags.twins {
        let m = margins.ok_or_else(|| {
            Error::Domain("twins loss is enabled but no margins were supplied".into())
        })?;
        let (l, gt) = twins_core(batch, m, true)?;
        let (ga, gid, gfr) = gt.expect("gradients requested");
        for i in 0..n {
            axpy(&mut g_anchor[i], 1.0, &ga[i]);
            axpy(&mut g_identical[i], 1.0, &gid[i]);
            axpy(
                &mut g_fraternal.as_mut().expect("fraternal channel present")[i],
                1.0,
                &gfr[i],
            );
        }
        l
    } else {
        vec![0.0; n]
    };

    let mut total = 0.0;
    for i in 0..n {
        total += l_identical[i] + l_fraternal[i] + l_twins[i];
    }
    Ok((
        LossBreakdown {
            l_identical,
            l_fraternal,
            l_twins,
            total,
        },
        HGrads {
            anchors: g_anchor,
            identicals: g_identical,
            fraternals: g_fraternal,
        },
    ))
}

/// Backpropagates representation gradients through the encoder into theta,
/// summing over all channels of all instances in index order.
pub fn batch_param_gradients(
    theta: &EncoderParams,
    batch: &TwinsBatch,
    hg: &HGrads,
) -> Result<EncoderParams> {
    let mut acc = EncoderParams::zeros(theta.d, theta.d_hidden, theta.d_out)?;
    for i in 0..batch.len() {
        let (g, _) = encode_backward(theta, &batch.anchors[i].trace, &hg.anchors[i])?;
        accumulate_grads(&mut acc, &g);
        let (g, _) = encode_backward(theta, &batch.identicals[i].trace, &hg.identicals[i])?;
        accumulate_grads(&mut acc, &g);
        if let (Some(frat), Some(gfr)) = (&batch.fraternals, &hg.fraternals) {
            let (g, _) = encode_backward(theta, &frat[i].trace, &gfr[i])?;
            accumulate_grads(&mut acc, &g);
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{make_twins, EmbeddingTable, TokenSentence, Vocabulary};
    use crate::encoder::EncodeTrace;
    use crate::numeric::{finite_diff_gradient, relative_error, FINITE_DIFF_H};
    use crate::streams::stream_rng;

    /// A channel whose pooled vector and representation are both `v`
    /// (consistent: the embedding matrix is the single row v).
    fn channel(v: &[f64]) -> ChannelView {
        let emb = TokenMatrix::from_rows(vec![v.to_vec()], 1).unwrap();
        ChannelView {
            emb,
            trace: EncodeTrace {
                pooled: v.to_vec(),
                pre_activation: vec![],
                hidden: vec![],
                output: v.to_vec(),
            },
        }
    }

    fn batch_from(
        anchors: &[&[f64]],
        identicals: &[&[f64]],
        fraternals: Option<&[&[f64]]>,
    ) -> TwinsBatch {
        TwinsBatch {
            anchors: anchors.iter().map(|v| channel(v)).collect(),
            identicals: identicals.iter().map(|v| channel(v)).collect(),
            fraternals: fraternals.map(|f| f.iter().map(|v| channel(v)).collect()),
        }
    }

    /// Unit vector at angle acos(c) from [1, 0].
    fn at_cos(c: f64) -> Vec<f64> {
        vec![c, (1.0 - c * c).sqrt()]
    }

    #[test]
    fn single_instance_empty_queue_identical_loss_is_exactly_zero() {
        let b = batch_from(&[&[0.3, -0.8]], &[&[0.1, 0.44]], None);
        let l = loss_identical(&b, None, 0.05).unwrap();
        assert_eq!(l, vec![0.0]);
    }

    #[test]
    fn orthogonal_pair_identical_loss_matches_the_scalar_oracle() {
        let b = batch_from(
            &[&[1.0, 0.0], &[0.0, 1.0]],
            &[&[1.0, 0.0], &[0.0, 1.0]],
            None,
        );
        let l = loss_identical(&b, None, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l[0] - expected).abs() < 1e-12, "l0 = {}", l[0]);
        assert!((l[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn a_queue_entry_adds_its_weighted_negative_mass() {
        let b = batch_from(
            &[&[1.0, 0.0], &[0.0, 1.0]],
            &[&[1.0, 0.0], &[0.0, 1.0]],
            None,
        );
        let mut q = HippocampusQueue::new(2, 2, 0.0).unwrap();
        q.push_batch(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        // for h1 = (1,0): denominator = e^1 + e^0 + 2 e^0, lambda = 0, so
        // l1 = -1 + log(e + 3) = log(1 + 3 e^-1)
        let l = loss_identical(&b, Some(&q), 1.0).unwrap();
        let expected = (1.0 + 3.0 * (-1.0f64).exp()).ln();
        assert!((l[0] - expected).abs() < 1e-12, "l0 = {}", l[0]);
    }

    #[test]
    fn a_single_orthogonal_queue_entry_matches_the_scalar_oracle() {
        // N=1 with one orthogonal stored entry at full weight:
        // l1 = -1 + log(e^1 + e^0) = log(1 + e^-1)
        let b = batch_from(&[&[1.0, 0.0]], &[&[1.0, 0.0]], None);
        let mut q = HippocampusQueue::new(1, 1, 0.0).unwrap();
        q.push_batch(&[vec![0.0, 1.0]]).unwrap();
        let l = loss_identical(&b, Some(&q), 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l[0] - expected).abs() < 1e-12, "l0 = {}", l[0]);
    }

    #[test]
    fn fraternal_loss_matches_the_scalar_oracle_and_ignores_any_queue() {
        let b = batch_from(
            &[&[1.0, 0.0], &[0.0, 1.0]],
            &[&[1.0, 0.0], &[0.0, 1.0]],
            Some(&[&[1.0, 0.0], &[0.0, 1.0]]),
        );
        let l = loss_fraternal(&b, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l[0] - expected).abs() < 1e-12);
        let single = batch_from(&[&[0.5, 0.5]], &[&[0.5, 0.5]], Some(&[&[1.0, 3.0]]));
        assert_eq!(loss_fraternal(&single, 0.05).unwrap(), vec![0.0]);
    }

    #[test]
    fn uniform_similarities_give_log_n_exactly() {
        let h = at_cos(0.6);
        let b = batch_from(
            &[&h, &h, &h],
            &[&[2.0, 0.0], &[2.0, 0.0], &[2.0, 0.0]],
            Some(&[&[0.0, 1.0], &[0.0, 1.0], &[0.0, 1.0]]),
        );
        let li = loss_identical(&b, None, 0.05).unwrap();
        let lf = loss_fraternal(&b, 0.05).unwrap();
        let ln3 = 3.0f64.ln();
        for i in 0..3 {
            assert!((li[i] - ln3).abs() < 1e-10, "lI[{i}] = {}", li[i]);
            assert!((lf[i] - ln3).abs() < 1e-10, "lF[{i}] = {}", lf[i]);
        }
    }

    #[test]
    fn degenerate_twins_have_zero_margin() {
        let v = at_cos(0.3);
        let b = batch_from(&[&v], &[&v], Some(&[&v]));
        assert_eq!(margins(&b).unwrap(), vec![0.0]);
    }

    #[test]
    fn margin_matches_the_exponential_gap_oracle() {
        let b = batch_from(&[&[1.0, 0.0]], &[&at_cos(0.95)], Some(&[&at_cos(0.8)]));
        let m = margins(&b).unwrap();
        let oracle = 0.95f64.exp() - 0.8f64.exp();
        assert!((m[0] - oracle).abs() < 1e-12, "margin {}", m[0]);
        assert!(m[0].abs() <= std::f64::consts::E - (-1.0f64).exp());
    }

    #[test]
    fn equal_similarities_cancel_the_margin() {
        let b = batch_from(&[&[1.0, 0.0]], &[&at_cos(0.77)], Some(&[&at_cos(0.77)]));
        assert_eq!(margins(&b).unwrap(), vec![0.0]);
    }

    #[test]
    fn margins_name_the_zero_norm_instance() {
        let b = TwinsBatch {
            anchors: vec![channel(&[1.0, 0.0]), {
                let emb = TokenMatrix::from_rows(vec![vec![0.0, 0.0]], 1).unwrap();
                ChannelView {
                    emb,
                    trace: EncodeTrace {
                        pooled: vec![0.0, 0.0],
                        pre_activation: vec![],
                        hidden: vec![],
                        output: vec![1.0, 1.0],
                    },
                }
            }],
            identicals: vec![channel(&[1.0, 0.0]), channel(&[1.0, 1.0])],
            fraternals: Some(vec![channel(&[0.0, 1.0]), channel(&[1.0, 2.0])]),
        };
        let err = margins(&b).unwrap_err();
        assert!(err.to_string().contains("instance 1"), "got: {err}");
    }

    #[test]
    fn twins_loss_is_zero_when_the_gap_equals_the_margin() {
        let b = batch_from(&[&[1.0, 0.0]], &[&at_cos(0.9)], Some(&[&at_cos(0.7)]));
        // margins computed from the same vectors as the h-space gap
        let m = compute_margins(&b, TwinsMode::Diagonal).unwrap();
        let l = loss_twins(&b, &m).unwrap();
        assert_eq!(l, vec![0.0]);
    }

    #[test]
    fn twins_loss_matches_the_scalar_oracle() {
        let b = batch_from(&[&[1.0, 0.0]], &[&at_cos(0.9)], Some(&[&at_cos(0.7)]));
        let margin = 0.95f64.exp() - 0.8f64.exp();
        let l = loss_twins(&b, &MarginSet::Diagonal(vec![margin])).unwrap();
        let oracle = (0.9f64.exp() - 0.7f64.exp() - margin).abs();
        assert!((l[0] - oracle).abs() < 1e-12, "lT = {}", l[0]);
    }

    #[test]
    fn fully_degenerate_instance_has_zero_twins_loss() {
        let v = at_cos(0.4);
        let b = batch_from(&[&v], &[&v], Some(&[&v]));
        let l = loss_twins(&b, &MarginSet::Diagonal(vec![0.0])).unwrap();
        assert_eq!(l, vec![0.0]);
    }

    #[test]
    fn total_adds_the_three_terms_exactly_and_honors_flags() {
        let b = batch_from(
            &[&[1.0, 0.1], &[0.2, 1.0]],
            &[&at_cos(0.9), &[0.4, 1.0]],
            Some(&[&at_cos(0.5), &[1.0, 0.7]]),
        );
        let m = compute_margins(&b, TwinsMode::Diagonal).unwrap();
        let flags = LossFlags::default();
        let t = total_loss(&b, None, 0.5, Some(&m), &flags).unwrap();
        let mut expected = 0.0;
        for i in 0..2 {
            expected += t.l_identical[i] + t.l_fraternal[i] + t.l_twins[i];
        }
        assert_eq!(t.total, expected);

        let no_twins = LossFlags {
            twins: false,
            ..LossFlags::default()
        };
        let t2 = total_loss(&b, None, 0.5, None, &no_twins).unwrap();
        assert!(t2.l_twins.iter().all(|&x| x == 0.0));
        // same per-instance order: adding the zeroed twins column is exact
        let mut expected2 = 0.0;
        for i in 0..2 {
            expected2 += t2.l_identical[i] + t2.l_fraternal[i];
        }
        assert_eq!(t2.total, expected2);
        let relaxed = t2.sum_identical() + t2.sum_fraternal();
        assert!(
            (t2.total - relaxed).abs() <= 1e-12 * relaxed.abs(),
            "column sums should agree with the per-instance total up to rounding"
        );

        let identical_only = LossFlags {
            fraternal: false,
            twins: false,
            ..LossFlags::default()
        };
        let t3 = total_loss(&b, None, 0.5, None, &identical_only).unwrap();
        assert_eq!(t3.total, t3.sum_identical());
    }

    #[test]
    fn fully_degenerate_single_instance_total_is_zero() {
        let v = at_cos(0.25);
        let b = batch_from(&[&v], &[&v], Some(&[&v]));
        let m = compute_margins(&b, TwinsMode::Diagonal).unwrap();
        let t = total_loss(&b, None, 0.05, Some(&m), &LossFlags::default()).unwrap();
        assert_eq!(t.total, 0.0);
    }

    #[test]
    fn losses_are_invariant_to_rescaling_all_representations() {
        let b = batch_from(
            &[&[1.0, 0.1], &[0.2, 1.0]],
            &[&at_cos(0.9), &[0.4, 1.0]],
            Some(&[&at_cos(0.5), &[1.0, 0.7]]),
        );
        let scale = 3.7;
        let scaled = TwinsBatch {
            anchors: b
                .anchors
                .iter()
                .map(|c| channel(&c.h().iter().map(|x| x * scale).collect::<Vec<_>>()))
                .collect(),
            identicals: b
                .identicals
                .iter()
                .map(|c| channel(&c.h().iter().map(|x| x * scale).collect::<Vec<_>>()))
                .collect(),
            fraternals: b.fraternals.as_ref().map(|f| {
                f.iter()
                    .map(|c| channel(&c.h().iter().map(|x| x * scale).collect::<Vec<_>>()))
                    .collect()
            }),
        };
        let m = MarginSet::Diagonal(vec![0.1, -0.2]);
        let a = total_loss(&b, None, 0.05, Some(&m), &LossFlags::default()).unwrap();
        let s = total_loss(&scaled, None, 0.05, Some(&m), &LossFlags::default()).unwrap();
        for i in 0..2 {
            assert!((a.l_identical[i] - s.l_identical[i]).abs() < 1e-9);
            assert!((a.l_fraternal[i] - s.l_fraternal[i]).abs() < 1e-9);
            assert!((a.l_twins[i] - s.l_twins[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn permuting_the_batch_permutes_the_loss_lists() {
        let hs: Vec<Vec<f64>> = vec![vec![1.0, 0.2], vec![-0.3, 0.9], vec![0.5, 0.5]];
        let hp: Vec<Vec<f64>> = vec![vec![0.9, 0.3], vec![-0.2, 1.0], vec![0.6, 0.4]];
        let hm: Vec<Vec<f64>> = vec![vec![0.1, 1.0], vec![0.8, -0.1], vec![0.3, 0.7]];
        let as_refs = |v: &[Vec<f64>]| v.iter().map(|x| channel(x)).collect::<Vec<_>>();
        let b = TwinsBatch {
            anchors: as_refs(&hs),
            identicals: as_refs(&hp),
            fraternals: Some(as_refs(&hm)),
        };
        let perm = [2usize, 0, 1];
        let permuted = TwinsBatch {
            anchors: perm.iter().map(|&i| channel(&hs[i])).collect(),
            identicals: perm.iter().map(|&i| channel(&hp[i])).collect(),
            fraternals: Some(perm.iter().map(|&i| channel(&hm[i])).collect()),
        };
        let m = compute_margins(&b, TwinsMode::Diagonal).unwrap();
        let mp = compute_margins(&permuted, TwinsMode::Diagonal).unwrap();
        let t = total_loss(&b, None, 0.1, Some(&m), &LossFlags::default()).unwrap();
        let tp = total_loss(&permuted, None, 0.1, Some(&mp), &LossFlags::default()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((tp.l_identical[k] - t.l_identical[i]).abs() < 1e-12);
            assert!((tp.l_fraternal[k] - t.l_fraternal[i]).abs() < 1e-12);
            assert!((tp.l_twins[k] - t.l_twins[i]).abs() < 1e-12);
        }
        assert!((tp.total - t.total).abs() < 1e-9);
    }

    #[test]
    fn losses_are_nonnegative_on_random_instances() {
        let mut rng = stream_rng(31, "loss-nonneg");
        for trial in 0..200 {
            let n = 1 + trial % 4;
            let rand_vec = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                (0..3)
                    .map(|_| crate::streams::gaussian(rng, 1.0))
                    .collect()
            };
            let make = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<ChannelView> {
                (0..n).map(|_| channel(&rand_vec(rng))).collect()
            };
            let b = TwinsBatch {
                anchors: make(&mut rng, n),
                identicals: make(&mut rng, n),
                fraternals: Some(make(&mut rng, n)),
            };
            let mut q = HippocampusQueue::new(4, 2, 0.01).unwrap();
            q.push_batch(&[rand_vec(&mut rng), rand_vec(&mut rng)])
                .unwrap();
            q.push_batch(&[rand_vec(&mut rng), rand_vec(&mut rng)])
                .unwrap();
            let m = compute_margins(&b, TwinsMode::Diagonal).unwrap();
            let t = total_loss(&b, Some(&q), 0.05, Some(&m), &LossFlags::default()).unwrap();
            for i in 0..n {
                assert!(t.l_identical[i] >= 0.0, "trial {trial}: lI < 0");
                assert!(t.l_fraternal[i] >= 0.0, "trial {trial}: lF < 0");
                assert!(t.l_twins[i] >= 0.0, "trial {trial}: lT < 0");
            }
        }
    }

    #[test]
    fn zero_norm_representation_error_names_the_instance() {
        let b = batch_from(&[&[1.0, 0.0], &[0.0, 0.0]], &[&[1.0, 0.0], &[1.0, 1.0]], None);
        let err = loss_identical(&b, None, 1.0).unwrap_err();
        assert!(err.to_string().contains("instance 1"), "got: {err}");
    }

    /// End-to-end gradient check: the full objective as a function of theta,
    /// with masks, queue and margins frozen.
    fn grad_check(seed: u64, flags: LossFlags, queue_entries: usize) {
        let d = 3;
        let vocab = Vocabulary::new(20).unwrap();
        let mut trng = stream_rng(seed, "grad-tables");
        let bel_s = EmbeddingTable::seeded_gaussian(vocab, d, &mut trng).unwrap();
        let bel_f = EmbeddingTable::seeded_gaussian(vocab, d, &mut trng).unwrap();
        let theta =
            EncoderParams::init_gaussian(d, 4, 3, &mut stream_rng(seed, "grad-init")).unwrap();

        let mut mrng = stream_rng(seed, "grad-masks");
        let n = 3;
        let mut views = Vec::new();
        for i in 0..n {
            let s = TokenSentence {
                tokens: vec![1 + i as u32, 5 + i as u32],
                fraternal: vec![9 + i as u32],
            };
            views.push(make_twins(&s, &bel_s, &bel_f, 4, 0.15, 0.9, &mut mrng).unwrap());
        }
        let batch = TwinsBatch::from_views(&theta, views).unwrap();

        let queue = if queue_entries > 0 {
            let mut q = HippocampusQueue::new(queue_entries, 1, 0.002).unwrap();
            let mut qrng = stream_rng(seed, "grad-queue");
            for _ in 0..queue_entries {
                let v: Vec<f64> = (0..3)
                    .map(|_| crate::streams::gaussian(&mut qrng, 1.0))
                    .collect();
                q.push_batch(&[v]).unwrap();
            }
            Some(q)
        } else {
            None
        };

        let margins = flags
            .twins
            .then(|| compute_margins(&batch, flags.mode).unwrap());

        let (_, hg) = loss_and_h_gradients(
            &batch,
            queue.as_ref(),
            0.05,
            margins.as_ref(),
            &flags,
        )
        .unwrap();
        let analytic = batch_param_gradients(&theta, &batch, &hg).unwrap().to_flat();

        // At tau = 0.05 the softmax exponents are steep enough that the
        // h^2 truncation term of a central difference at the default step
        // is visible at the 1e-3 level, so the check runs a tighter step.
        let flat = theta.to_flat();
        let numeric = finite_diff_gradient(
            |x| {
                let t = theta.from_flat(x)?;
                let rb = batch.reencode(&t)?;
                Ok(total_loss(&rb, queue.as_ref(), 0.05, margins.as_ref(), &flags)?.total)
            },
            &flat,
            FINITE_DIFF_H / 10.0,
        )
        .unwrap();

        for k in 0..flat.len() {
            assert!(
                relative_error(analytic[k], numeric[k]) < 1e-4,
                "seed {seed}, param {k}: analytic {} vs numeric {}",
                analytic[k],
                numeric[k]
            );
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences_full_objective() {
        grad_check(1, LossFlags::default(), 5);
    }

    #[test]
    fn analytic_gradients_match_finite_differences_without_queue() {
        grad_check(2, LossFlags::default(), 0);
    }

    #[test]
    fn analytic_gradients_match_finite_differences_pairwise_mode() {
        grad_check(
            3,
            LossFlags {
                mode: TwinsMode::Pairwise,
                ..LossFlags::default()
            },
            4,
        );
    }

    #[test]
    fn analytic_gradients_match_finite_differences_under_ablations() {
        grad_check(
            4,
            LossFlags {
                twins: false,
                ..LossFlags::default()
            },
            3,
        );
        grad_check(
            5,
            LossFlags {
                fraternal: false,
                twins: false,
                ..LossFlags::default()
            },
            3,
        );
    }

    #[test]
    fn queue_entries_are_bit_identical_across_a_backward_pass() {
        let b = batch_from(
            &[&[1.0, 0.1], &[0.2, 1.0]],
            &[&at_cos(0.9), &[0.4, 1.0]],
            Some(&[&at_cos(0.5), &[1.0, 0.7]]),
        );
        let mut q = HippocampusQueue::new(4, 2, 0.01).unwrap();
        q.push_batch(&[vec![0.3, 0.4], vec![-0.8, 0.1]]).unwrap();
        let before: Vec<Vec<u64>> = (0..q.len())
            .map(|m| q.entry(m).iter().map(|x| x.to_bits()).collect())
            .collect();
        let m = compute_margins(&b, TwinsMode::Diagonal).unwrap();
        let _ = loss_and_h_gradients(&b, Some(&q), 0.05, Some(&m), &LossFlags::default()).unwrap();
        let after: Vec<Vec<u64>> = (0..q.len())
            .map(|m| q.entry(m).iter().map(|x| x.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }
}
