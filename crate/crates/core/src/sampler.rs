//! Temporal self-supervision: rank orders, the exponential rank
//! distribution, bag sampling without replacement, the cosine temperature
//! curriculum, and bag-purity diagnostics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrackletDataset;
use crate::error::{Error, Result};
use crate::numeric::kahan_sum;

/// Same-video candidates of one anchor, sorted by increasing temporal
/// distance. Ties break toward the smaller position, then lexicographic id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOrder {
    pub anchor_id: String,
    pub anchor_index: usize,
    /// Tracklet ids at ranks 1..=C.
    pub ordered_ids: Vec<String>,
    /// Dataset indices parallel to `ordered_ids`.
    pub ordered_indices: Vec<usize>,
}

impl RankOrder {
    pub fn candidate_count(&self) -> usize {
        self.ordered_ids.len()
    }
}

/// An anchor with its sampled candidate positives.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub anchor_id: String,
    pub anchor_index: usize,
    pub member_ids: Vec<String>,
    pub member_indices: Vec<usize>,
    /// 1-based ranks that produced each member.
    pub sampled_ranks: Vec<usize>,
}

/// Cosine interpolation between tau_min and tau_max.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            tau_min: 0.3,
            tau_max: 12.0,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0) {
            return Err(Error::Config("tau_min must be > 0".into()));
        }
        if self.tau_max < self.tau_min {
            return Err(Error::Config("tau_max must be >= tau_min".into()));
        }
        Ok(())
    }
}

/// Temperature at curriculum progress `c` in [0,1].
pub fn curriculum_tau(sched: &CurriculumSchedule, c: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::InvalidInput(format!(
            "curriculum progress must be in [0,1], got {c}"
        )));
    }
    let w = (1.0 - (std::f64::consts::PI * c).cos()) / 2.0;
    Ok(sched.tau_min + w * (sched.tau_max - sched.tau_min))
}

/// Rank order of one anchor's same-video candidates.
pub fn rank_order(dataset: &TrackletDataset, anchor_id: &str) -> Result<RankOrder> {
    let anchor_idx = dataset
        .index_of(anchor_id)
        .ok_or_else(|| Error::InvalidInput(format!("unknown anchor {anchor_id}")))?;
    Ok(rank_order_by_index(dataset, anchor_idx))
}

fn rank_order_by_index(dataset: &TrackletDataset, anchor_idx: usize) -> RankOrder {
    let anchor = dataset.get(anchor_idx);
    let mut scored: Vec<(u64, u64, &str, usize)> = dataset
        .tracklets()
        .iter()
        .enumerate()
        .filter(|(i, t)| *i != anchor_idx && t.video_id() == anchor.video_id())
        .map(|(i, t)| {
            (
                t.position().abs_diff(anchor.position()),
                t.position(),
                t.tracklet_id(),
                i,
            )
        })
        .collect();
    scored.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(b.2)));
    RankOrder {
        anchor_id: anchor.tracklet_id().to_string(),
        anchor_index: anchor_idx,
        ordered_ids: scored.iter().map(|s| s.2.to_string()).collect(),
        ordered_indices: scored.iter().map(|s| s.3).collect(),
    }
}

/// Rank orders for every tracklet, computed once per dataset. They depend
/// only on positions, never on training state.
#[derive(Debug, Clone)]
pub struct RankIndex {
    orders: Vec<RankOrder>,
}

impl RankIndex {
    pub fn build(dataset: &TrackletDataset) -> Self {
        let orders = (0..dataset.len())
            .map(|i| rank_order_by_index(dataset, i))
            .collect();
        Self { orders }
    }

    pub fn order(&self, anchor_index: usize) -> &RankOrder {
        &self.orders[anchor_index]
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    /// Indices of anchors with at least `k` candidates.
    pub fn usable_anchors(&self, k: usize) -> Vec<usize> {
        (0..self.orders.len())
            .filter(|&i| self.orders[i].candidate_count() >= k)
            .collect()
    }
}

/// Exponential rank distribution over ranks 1..=C at temperature `tau`.
/// Computed with max subtraction; entries are positive and sum to 1.
pub fn rank_pmf(c: usize, tau: f64) -> Result<Vec<f64>> {
    if c < 1 {
        return Err(Error::InvalidInput("rank_pmf needs C >= 1".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("tau must be > 0, got {tau}")));
    }
    // exp(-r/tau) normalized; subtracting the r=1 exponent keeps the largest
    // weight at exactly 1 for any tau.
    let weights: Vec<f64> = (1..=c)
        .map(|r| (-((r - 1) as f64) / tau).exp())
        .collect();
    let z = kahan_sum(weights.iter().copied());
    Ok(weights.into_iter().map(|w| w / z).collect())
}

/// Draw K distinct ranks without replacement by sequential renormalization
/// over the remaining ranks, then map them through the rank order.
pub fn sample_bag(
    order: &RankOrder,
    k: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Bag> {
    let c = order.candidate_count();
    if k > c {
        return Err(Error::InvalidInput(format!(
            "insufficient candidates: K={k} > C={c}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidInput("bag size K must be >= 1".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("tau must be > 0, got {tau}")));
    }

    let mut remaining: Vec<usize> = (1..=c).collect();
    let mut ranks = Vec::with_capacity(k);
    for _ in 0..k {
        // renormalize with max subtraction over what is left; the smallest
        // remaining rank carries the largest weight
        let r_min = remaining[0];
        let weights: Vec<f64> = remaining
            .iter()
            .map(|&r| (-((r - r_min) as f64) / tau).exp())
            .collect();
        let total = kahan_sum(weights.iter().copied());
        let u: f64 = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = remaining.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                chosen = i;
                break;
            }
        }
        ranks.push(remaining.remove(chosen));
    }

    Ok(make_bag(order, ranks))
}

/// Deterministic bag of the K temporally closest candidates.
pub fn top_k_bag(order: &RankOrder, k: usize) -> Result<Bag> {
    let c = order.candidate_count();
    if k > c {
        return Err(Error::InvalidInput(format!(
            "insufficient candidates: K={k} > C={c}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidInput("bag size K must be >= 1".into()));
    }
    Ok(make_bag(order, (1..=k).collect()))
}

fn make_bag(order: &RankOrder, ranks: Vec<usize>) -> Bag {
    Bag {
        anchor_id: order.anchor_id.clone(),
        anchor_index: order.anchor_index,
        member_ids: ranks.iter().map(|&r| order.ordered_ids[r - 1].clone()).collect(),
        member_indices: ranks
            .iter()
            .map(|&r| order.ordered_indices[r - 1])
            .collect(),
        sampled_ranks: ranks,
    }
}

/// Fraction of bags whose members all share the anchor's polyp identity.
pub fn bag_purity(bags: &[Bag], dataset: &TrackletDataset) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::InvalidInput("bag_purity over zero bags".into()));
    }
    let mut pure = 0usize;
    for bag in bags {
        let anchor = dataset
            .by_id(&bag.anchor_id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown anchor {}", bag.anchor_id)))?;
        let anchor_polyp = anchor
            .eval_polyp_id()
            .ok_or_else(|| Error::InvalidInput("missing polyp_id on anchor".into()))?;
        let mut all_same = true;
        for &mi in &bag.member_indices {
            let member_polyp = dataset.get(mi).eval_polyp_id().ok_or_else(|| {
                Error::InvalidInput(format!("missing polyp_id on member {}", dataset.get(mi).tracklet_id()))
            })?;
            if member_polyp != anchor_polyp {
                all_same = false;
            }
        }
        if all_same {
            pure += 1;
        }
    }
    Ok(pure as f64 / bags.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Tracklet, TrackletDataset};
    use crate::rng::derive_rng;

    fn ds_with_positions(entries: &[(&str, &str, u64)]) -> TrackletDataset {
        let tracklets: Vec<Tracklet> = entries
            .iter()
            .map(|(id, video, pos)| {
                Tracklet::new(
                    *id,
                    *video,
                    *pos,
                    vec![vec![1.0, 0.0]],
                    Some(format!("{video}_poly")),
                    None,
                )
                .unwrap()
            })
            .collect();
        TrackletDataset::new(tracklets, 1, 2).unwrap()
    }

    #[test]
    fn rank_order_sorts_by_distance() {
        let ds = ds_with_positions(&[
            ("anchor", "v", 100),
            ("a", "v", 90),
            ("b", "v", 120),
            ("c", "v", 95),
        ]);
        let order = rank_order(&ds, "anchor").unwrap();
        assert_eq!(order.ordered_ids, vec!["c", "a", "b"]);
    }

    #[test]
    fn rank_order_tie_prefers_smaller_position() {
        let ds = ds_with_positions(&[("anchor", "v", 100), ("late", "v", 110), ("early", "v", 90)]);
        let order = rank_order(&ds, "anchor").unwrap();
        assert_eq!(order.ordered_ids, vec!["early", "late"]);
    }

    #[test]
    fn lone_anchor_has_empty_order() {
        let ds = ds_with_positions(&[("anchor", "v", 0), ("other", "w", 0)]);
        let order = rank_order(&ds, "anchor").unwrap();
        assert_eq!(order.candidate_count(), 0);
    }

    #[test]
    fn rank_pmf_matches_direct_formula() {
        let p = rank_pmf(2, 1.0).unwrap();
        let e1 = (-1.0f64).exp();
        let e2 = (-2.0f64).exp();
        assert!((p[0] - e1 / (e1 + e2)).abs() < 1e-15);
        assert!((p[1] - e2 / (e1 + e2)).abs() < 1e-15);
        assert!((p[0] - 0.731058578630).abs() < 1e-9);
    }

    #[test]
    fn rank_pmf_limits() {
        let flat = rank_pmf(4, 1e9).unwrap();
        for p in &flat {
            assert!((p - 0.25).abs() < 1e-6);
        }
        let sharp = rank_pmf(3, 1e-3).unwrap();
        assert!(sharp[0] > 1.0 - 1e-9);
    }

    #[test]
    fn rank_pmf_sums_to_one_and_decreases() {
        for &(c, tau) in &[(1usize, 0.001), (10, 0.3), (1000, 2.0), (100_000, 1e9), (100_000, 1e-3)] {
            let p = rank_pmf(c, tau).unwrap();
            let s = kahan_sum(p.iter().copied());
            assert!((s - 1.0).abs() < 1e-12, "C={c} tau={tau}: sum={s}");
            for w in p.windows(2) {
                assert!(w[0] >= w[1]);
            }
            if tau < 1e6 && c > 1 {
                assert!(p[0] > p[1], "strictly decreasing for finite tau");
            }
        }
    }

    #[test]
    fn curriculum_endpoints_and_midpoint() {
        let s = CurriculumSchedule::default();
        assert_eq!(curriculum_tau(&s, 0.0).unwrap(), 0.3);
        assert_eq!(curriculum_tau(&s, 1.0).unwrap(), 12.0);
        assert!((curriculum_tau(&s, 0.5).unwrap() - 6.15).abs() < 1e-12);
        assert!(curriculum_tau(&s, -0.01).is_err());
        assert!(curriculum_tau(&s, 1.01).is_err());
    }

    #[test]
    fn curriculum_is_monotone() {
        let s = CurriculumSchedule::default();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=1000 {
            let tau = curriculum_tau(&s, i as f64 / 1000.0).unwrap();
            assert!(tau >= prev);
            prev = tau;
        }
    }

    fn chain_order(c: usize) -> RankOrder {
        RankOrder {
            anchor_id: "anchor".into(),
            anchor_index: 0,
            ordered_ids: (0..c).map(|i| format!("m{i}")).collect(),
            ordered_indices: (0..c).collect(),
        }
    }

    #[test]
    fn sample_bag_exhaustive_when_k_equals_c() {
        let order = chain_order(5);
        let mut rng = derive_rng(1, &[]);
        let bag = sample_bag(&order, 5, 3.0, &mut rng).unwrap();
        let mut ids = bag.member_ids.clone();
        ids.sort();
        assert_eq!(ids, vec!["m0", "m1", "m2", "m3", "m4"]);
    }

    #[test]
    fn sample_bag_concentrates_at_tiny_tau() {
        let order = chain_order(5);
        for seed in 0..200 {
            let mut rng = derive_rng(seed, &[]);
            let bag = sample_bag(&order, 2, 1e-3, &mut rng).unwrap();
            assert_eq!(bag.sampled_ranks, vec![1, 2]);
        }
    }

    #[test]
    fn sample_bag_is_deterministic() {
        let order = chain_order(20);
        let a = sample_bag(&order, 4, 2.0, &mut derive_rng(9, &[3])).unwrap();
        let b = sample_bag(&order, 4, 2.0, &mut derive_rng(9, &[3])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_bag_rejects_k_above_c() {
        let order = chain_order(3);
        let mut rng = derive_rng(0, &[]);
        let err = sample_bag(&order, 4, 1.0, &mut rng).unwrap_err().to_string();
        assert!(err.contains("insufficient candidates"), "{err}");
    }

    #[test]
    fn top_k_takes_nearest() {
        let order = chain_order(4);
        let bag = top_k_bag(&order, 1).unwrap();
        assert_eq!(bag.member_ids, vec!["m0"]);
        assert_eq!(bag.sampled_ranks, vec![1]);
        let bag = top_k_bag(&order, 4).unwrap();
        assert_eq!(bag.sampled_ranks, vec![1, 2, 3, 4]);
        assert!(top_k_bag(&order, 5).is_err());
    }

    #[test]
    fn top_k_respects_rank_order_example() {
        let ds = ds_with_positions(&[
            ("anchor", "v", 100),
            ("a", "v", 90),
            ("b", "v", 120),
            ("c", "v", 95),
        ]);
        let order = rank_order(&ds, "anchor").unwrap();
        let bag = top_k_bag(&order, 2).unwrap();
        assert_eq!(bag.member_ids, vec!["c", "a"]);
    }

    #[test]
    fn purity_counts_fraction() {
        let ds = ds_with_positions(&[("t0", "v", 0), ("t1", "v", 10), ("t2", "w", 0), ("t3", "w", 5)]);
        // v tracklets share identity "v_poly"; w share "w_poly"
        let pure_bag = Bag {
            anchor_id: "t0".into(),
            anchor_index: 0,
            member_ids: vec!["t1".into()],
            member_indices: vec![1],
            sampled_ranks: vec![1],
        };
        let impure_bag = Bag {
            anchor_id: "t0".into(),
            anchor_index: 0,
            member_ids: vec!["t2".into()],
            member_indices: vec![2],
            sampled_ranks: vec![1],
        };
        let p = bag_purity(
            &[pure_bag.clone(), pure_bag.clone(), pure_bag, impure_bag],
            &ds,
        )
        .unwrap();
        assert_eq!(p, 0.75);
    }

    #[test]
    fn purity_is_one_when_sampling_stays_within_a_block() {
        // 5 windows per encounter, so every anchor has >= 4 same-encounter
        // partners at distance <= 128 while foreign blocks sit >= 150 away
        let cfg = crate::synth::SynthConfig {
            num_videos: 4,
            polyps_per_video: 3,
            encounters_per_polyp: 2,
            frames_per_encounter: 160,
            gap_frames: 100,
            overlap_prob: 0.0,
            d_in: 4,
            drift_scale: 0.0,
            noise_scale: 0.0,
            seed: 11,
        };
        let ds = crate::synth::generate_dataset(&cfg).unwrap();
        let index = RankIndex::build(&ds);
        let mut bags = Vec::new();
        for (i, anchor) in index.usable_anchors(4).into_iter().enumerate().take(200) {
            let mut rng = derive_rng(100, &[i as u64]);
            bags.push(sample_bag(index.order(anchor), 4, 0.05, &mut rng).unwrap());
        }
        assert_eq!(bag_purity(&bags, &ds).unwrap(), 1.0);
    }
}
