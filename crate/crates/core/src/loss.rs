//! The noise-aware contrastive objective.
//!
//! For anchor i with bag members z_i1..z_iK and batch anchors y_1..y_N, the
//! per-anchor term is
//!
//! ```text
//! l_i = -log( sum_k exp(s(z_ik, y_i))
//!           / (sum_k exp(s(z_ik, y_i)) + sum_{j!=i} sum_k exp(s(z_ik, y_j))) )
//! ```
//!
//! with s(u,v) = cos(u,v) / temperature. The log-sum-exp terms subtract a
//! per-anchor maximum and accumulate in sorted order, so the value is stable
//! and bit-invariant under bag permutations. The softmax over a bag lets a
//! single well-matched member satisfy the objective while poorly matched
//! members receive vanishing gradient.
//!
//! The objective applies at the tracklet level, the frame level, or both
//! (summed). At the frame level every anchor frame acts as an anchor whose
//! candidate positives are its bag's frame embeddings; the anchors it
//! contrasts against are the other anchors' frame embeddings at the same
//! frame offset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::cosine;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Tracklet,
    Frame,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FramePairing {
    /// Each anchor frame's bag is all K*L bag-member frames.
    All,
    /// Each anchor frame's bag is the K member frames at its own offset.
    Aligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub sim_temperature: f64,
    pub level: Level,
    pub frame_pairing: FramePairing,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sim_temperature: 0.1,
            level: Level::Both,
            frame_pairing: FramePairing::All,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sim_temperature > 0.0) {
            return Err(Error::Config(format!(
                "sim_temperature must be > 0, got {}",
                self.sim_temperature
            )));
        }
        Ok(())
    }
}

/// Scaled cosine similarity s(u, v) = cos(u, v) / temperature.
pub fn similarity(u: &[f64], v: &[f64], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if u.len() != v.len() {
        return Err(Error::Mismatch(format!(
            "similarity dims {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let c = cosine(u, v).ok_or_else(|| Error::Numeric("zero-norm vector".into()))?;
    Ok(c / cfg.sim_temperature)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossOutput {
    pub total: f64,
    pub per_level: BTreeMap<Level, f64>,
    pub per_anchor: Vec<f64>,
}

/// Per-anchor loss terms assembled from a precomputed logits matrix
/// `[N*K_eff, N]` whose rows group per anchor. This is the
/// log-sum-exp core; it is shift-invariant in the logits.
///
/// Returns the mean-over-anchors total and the per-anchor scalars.
pub fn noise_aware_from_logits(
    tape: &mut Tape,
    logits: Var,
    n: usize,
    k_eff: usize,
) -> Result<(Var, Vec<f64>)> {
    let shape_rows = tape.value(logits).rows();
    let shape_cols = tape.value(logits).cols();
    if shape_rows != n * k_eff || shape_cols != n {
        return Err(Error::Mismatch(format!(
            "logits shape [{shape_rows},{shape_cols}] does not match N={n}, K={k_eff}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidInput(
            "noise-aware loss needs N >= 2 anchors (no negatives otherwise)".into(),
        ));
    }
    if !tape.value(logits).is_finite() {
        return Err(Error::Numeric("non-finite similarity input".into()));
    }

    let mut per_anchor_vars = Vec::with_capacity(n);
    let mut per_anchor = Vec::with_capacity(n);
    for i in 0..n {
        let block = tape.slice_rows(logits, i * k_eff, k_eff);
        let denominator = tape.log_sum_exp_all(block);
        let positives = tape.slice_cols(block, i, 1);
        let numerator = tape.log_sum_exp_all(positives);
        let li = tape.sub(denominator, numerator);
        per_anchor.push(tape.value(li).item());
        per_anchor_vars.push(li);
    }
    let stacked = tape.concat_rows(&per_anchor_vars);
    let sum = tape.sum_all(stacked);
    let total = tape.scale(sum, 1.0 / n as f64);
    Ok((total, per_anchor))
}

/// Cosine-similarity logits between grouped bag rows `[N*K_eff, d]` and
/// anchor rows `[N, d]`, scaled by 1/temperature.
fn cosine_logits(tape: &mut Tape, bags: Var, anchors: Var, temperature: f64) -> Result<Var> {
    let z = tape.normalize_rows(bags)?;
    let y = tape.normalize_rows(anchors)?;
    let yt = tape.transpose(y);
    let sims = tape.matmul(z, yt);
    Ok(tape.scale(sims, 1.0 / temperature))
}

/// Tracklet-level noise-aware loss on a tape. `anchors` is `[N, d]`, `bags`
/// is `[N*K, d]` with rows grouped per anchor.
pub fn noise_aware_loss_on_tape(
    tape: &mut Tape,
    anchors: Var,
    bags: Var,
    n: usize,
    k: usize,
    cfg: &LossConfig,
) -> Result<(Var, Vec<f64>)> {
    cfg.validate()?;
    if k < 1 {
        return Err(Error::InvalidInput("bag size K must be >= 1".into()));
    }
    if !tape.value(anchors).is_finite() || !tape.value(bags).is_finite() {
        return Err(Error::Numeric("non-finite embedding input".into()));
    }
    let logits = cosine_logits(tape, bags, anchors, cfg.sim_temperature)?;
    noise_aware_from_logits(tape, logits, n, k)
}

/// Plain-tensor entry point: `anchors` is `[N, d]`, `bags` is `[N, K, d]`.
pub fn noise_aware_loss(anchors: &Tensor, bags: &Tensor, cfg: &LossConfig) -> Result<LossOutput> {
    let (n, k) = bag_dims(anchors, bags)?;
    let mut tape = Tape::new();
    let a = tape.leaf(anchors.clone());
    let b = tape.leaf(bags.clone());
    let (total, per_anchor) = noise_aware_loss_on_tape(&mut tape, a, b, n, k, cfg)?;
    let total = tape.value(total).item();
    let mut per_level = BTreeMap::new();
    per_level.insert(Level::Tracklet, total);
    Ok(LossOutput {
        total,
        per_level,
        per_anchor,
    })
}

fn bag_dims(anchors: &Tensor, bags: &Tensor) -> Result<(usize, usize)> {
    if anchors.shape().len() != 2 {
        return Err(Error::Mismatch(format!(
            "anchors must be [N, d], got {:?}",
            anchors.shape()
        )));
    }
    let n = anchors.shape()[0];
    let d = anchors.shape()[1];
    match bags.shape() {
        [bn, k, bd] if *bn == n && *bd == d => Ok((n, *k)),
        other => Err(Error::Mismatch(format!(
            "bags must be [N={n}, K, d={d}], got {other:?}"
        ))),
    }
}

/// Embedding groups entering the multi-level objective. All tensors are
/// projected embeddings; rows group by anchor, then member, then frame.
pub struct MultiLevelEmbeddings {
    /// `[N, d]`
    pub anchor_tracklets: Tensor,
    /// `[N, L, d]`
    pub anchor_frames: Tensor,
    /// `[N, K, d]`
    pub bag_tracklets: Tensor,
    /// `[N, K, L, d]`
    pub bag_frames: Tensor,
}

/// Vars for the same groups when the graph is built on a live tape.
#[derive(Clone, Copy)]
pub struct MultiLevelVars {
    pub anchor_tracklets: Var,
    pub anchor_frames: Var,
    pub bag_tracklets: Var,
    pub bag_frames: Var,
    pub n: usize,
    pub k: usize,
    pub l: usize,
}

/// Multi-level noise-aware loss on a tape. Returns the total-loss var and
/// the assembled `LossOutput` (values read from the forward pass).
pub fn multi_level_loss_on_tape(
    tape: &mut Tape,
    vars: MultiLevelVars,
    cfg: &LossConfig,
) -> Result<(Var, LossOutput)> {
    cfg.validate()?;
    let MultiLevelVars {
        anchor_tracklets,
        anchor_frames,
        bag_tracklets,
        bag_frames,
        n,
        k,
        l,
    } = vars;
    if l < 1 && matches!(cfg.level, Level::Frame | Level::Both) {
        return Err(Error::InvalidInput("frame level needs L >= 1".into()));
    }

    let mut per_level = BTreeMap::new();
    let mut totals: Vec<Var> = Vec::new();
    let mut per_anchor = vec![0.0; n];

    if matches!(cfg.level, Level::Tracklet | Level::Both) {
        let (t_total, t_anchor) =
            noise_aware_loss_on_tape(tape, anchor_tracklets, bag_tracklets, n, k, cfg)?;
        per_level.insert(Level::Tracklet, tape.value(t_total).item());
        for (acc, v) in per_anchor.iter_mut().zip(&t_anchor) {
            *acc += v;
        }
        totals.push(t_total);
    }

    if matches!(cfg.level, Level::Frame | Level::Both) {
        if !tape.value(anchor_frames).is_finite() || !tape.value(bag_frames).is_finite() {
            return Err(Error::Numeric("non-finite embedding input".into()));
        }
        let zf = tape.normalize_rows(bag_frames)?;
        let yf = tape.normalize_rows(anchor_frames)?;
        let mut frame_totals = Vec::with_capacity(l);
        let mut frame_per_anchor = vec![0.0; n];
        for t in 0..l {
            // anchors of this instance: every anchor's frame t
            let rows: Vec<Var> = (0..n).map(|i| tape.slice_rows(yf, i * l + t, 1)).collect();
            let anchors_t = tape.concat_rows(&rows);
            let (bag_t, k_eff) = match cfg.frame_pairing {
                FramePairing::All => (zf, k * l),
                FramePairing::Aligned => {
                    let picked: Vec<Var> = (0..n)
                        .flat_map(|i| (0..k).map(move |m| (i, m)))
                        .map(|(i, m)| tape.slice_rows(zf, (i * k + m) * l + t, 1))
                        .collect();
                    (tape.concat_rows(&picked), k)
                }
            };
            let yt = tape.transpose(anchors_t);
            let sims = tape.matmul(bag_t, yt);
            let logits = tape.scale(sims, 1.0 / cfg.sim_temperature);
            let (t_total, t_anchor) = noise_aware_from_logits(tape, logits, n, k_eff)?;
            for (acc, v) in frame_per_anchor.iter_mut().zip(&t_anchor) {
                *acc += v / l as f64;
            }
            frame_totals.push(t_total);
        }
        let stacked = tape.concat_rows(&frame_totals);
        let sum = tape.sum_all(stacked);
        let frame_total = tape.scale(sum, 1.0 / l as f64);
        per_level.insert(Level::Frame, tape.value(frame_total).item());
        for (acc, v) in per_anchor.iter_mut().zip(&frame_per_anchor) {
            *acc += v;
        }
        totals.push(frame_total);
    }

    let total_var = match totals.len() {
        1 => totals[0],
        2 => tape.add(totals[0], totals[1]),
        _ => unreachable!("level always selects at least one objective"),
    };
    let output = LossOutput {
        total: tape.value(total_var).item(),
        per_level,
        per_anchor,
    };
    Ok((total_var, output))
}

/// Plain-tensor multi-level loss.
pub fn multi_level_loss(embs: &MultiLevelEmbeddings, cfg: &LossConfig) -> Result<LossOutput> {
    let (n, k) = bag_dims(&embs.anchor_tracklets, &embs.bag_tracklets)?;
    let (l, d) = match embs.anchor_frames.shape() {
        [an, l, d] if *an == n => (*l, *d),
        other => {
            return Err(Error::Mismatch(format!(
                "anchor_frames must be [N={n}, L, d], got {other:?}"
            )))
        }
    };
    match embs.bag_frames.shape() {
        [bn, bk, bl, bd] if *bn == n && *bk == k && *bl == l && *bd == d => {}
        other => {
            return Err(Error::Mismatch(format!(
                "bag_frames must be [{n}, {k}, {l}, {d}], got {other:?}"
            )))
        }
    }
    let mut tape = Tape::new();
    let vars = MultiLevelVars {
        anchor_tracklets: tape.leaf(embs.anchor_tracklets.clone()),
        anchor_frames: tape.leaf(embs.anchor_frames.clone()),
        bag_tracklets: tape.leaf(embs.bag_tracklets.clone()),
        bag_frames: tape.leaf(embs.bag_frames.clone()),
        n,
        k,
        l,
    };
    let (_, output) = multi_level_loss_on_tape(&mut tape, vars, cfg)?;
    Ok(output)
}
