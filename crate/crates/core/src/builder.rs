//! Converts detection streams into fixed-length tracklets.
//!
//! Detections in consecutive frames of one video are chained when their box
//! IoU clears a threshold (or, for streams carrying track ids, when identity
//! is continuous). Each chain is subsampled and cut into non-overlapping
//! windows of exactly `tracklet_length` retained detections.

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, Detection, Tracklet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainBy {
    /// Chain consecutive-frame detections whose IoU clears the threshold.
    Iou,
    /// Chain consecutive-frame detections sharing a ground-truth track id.
    Track,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuilderConfig {
    pub iou_threshold: f64,
    pub subsample_stride: usize,
    pub tracklet_length: usize,
    pub chain_by: ChainBy,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.1,
            subsample_stride: 4,
            tracklet_length: 8,
            chain_by: ChainBy::Iou,
        }
    }
}

impl BuilderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Config(format!(
                "iou_threshold must be in [0,1], got {}",
                self.iou_threshold
            )));
        }
        if self.subsample_stride < 1 {
            return Err(Error::Config("subsample_stride must be >= 1".into()));
        }
        if self.tracklet_length < 1 {
            return Err(Error::Config("tracklet_length must be >= 1".into()));
        }
        Ok(())
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Split a detection stream into chains.
///
/// Within a video, a detection joins the previous one's chain when the frame
/// indices are consecutive and the linking rule holds; a frame gap or a
/// failed link starts a new chain. Requires strictly increasing frame
/// indices per video (videos themselves may interleave).
pub fn chain_detections(stream: &[Detection], cfg: &BuilderConfig) -> Result<Vec<Vec<Detection>>> {
    cfg.validate()?;
    let mut chains: Vec<Vec<Detection>> = Vec::new();
    // open chain per video: (video_id, chain index)
    let mut open: Vec<(String, usize)> = Vec::new();

    for det in stream {
        let slot = open.iter().position(|(v, _)| v == &det.video_id);
        let linked = slot.and_then(|s| {
            let chain = &chains[open[s].1];
            let prev = chain.last().expect("open chains are non-empty");
            if det.frame_index <= prev.frame_index {
                return Some(Err(Error::InvalidInput(format!(
                    "unsorted input: video {} frame {} after frame {}",
                    det.video_id, det.frame_index, prev.frame_index
                ))));
            }
            let consecutive = det.frame_index == prev.frame_index + 1;
            let joins = consecutive
                && match cfg.chain_by {
                    ChainBy::Iou => iou(&prev.box_, &det.box_) >= cfg.iou_threshold,
                    ChainBy::Track => {
                        prev.polyp_id.is_some() && prev.polyp_id == det.polyp_id
                    }
                };
            if joins {
                Some(Ok(open[s].1))
            } else {
                None
            }
        });

        match linked {
            Some(Err(e)) => return Err(e),
            Some(Ok(chain_idx)) => chains[chain_idx].push(det.clone()),
            None => {
                chains.push(vec![det.clone()]);
                let idx = chains.len() - 1;
                match slot {
                    Some(s) => open[s].1 = idx,
                    None => open.push((det.video_id.clone(), idx)),
                }
            }
        }
    }
    Ok(chains)
}

/// Cut one chain into tracklets.
///
/// Every `subsample_stride`-th detection starting from the chain's first is
/// retained; retained detections are partitioned into consecutive
/// non-overlapping windows of exactly `tracklet_length`, discarding the
/// trailing remainder. `position` is the frame index of the window's first
/// retained detection.
pub fn windows(chain: &[Detection], cfg: &BuilderConfig, id_prefix: &str) -> Vec<Tracklet> {
    let retained: Vec<&Detection> = chain.iter().step_by(cfg.subsample_stride).collect();
    let l = cfg.tracklet_length;
    let mut out = Vec::new();
    for (w, window) in retained.chunks_exact(l).enumerate() {
        let first = window[0];
        let frames: Vec<Vec<f64>> = window.iter().map(|d| d.features.clone()).collect();
        let t = Tracklet::new(
            format!("{id_prefix}_w{w}"),
            first.video_id.clone(),
            first.frame_index,
            frames,
            first.polyp_id.clone(),
            first.attrs.clone(),
        )
        .expect("window frames are non-empty and rectangular");
        out.push(t);
    }
    out
}

/// Full stream -> tracklet pipeline: chain, then window every chain.
pub fn build_tracklets(stream: &[Detection], cfg: &BuilderConfig) -> Result<Vec<Tracklet>> {
    let chains = chain_detections(stream, cfg)?;
    let mut out = Vec::new();
    for (c, chain) in chains.iter().enumerate() {
        let prefix = format!("{}_c{c}", chain[0].video_id);
        out.extend(windows(chain, cfg, &prefix));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(x: f64) -> BoundingBox {
        BoundingBox::new(x, 0.0, x + 10.0, 10.0).unwrap()
    }

    fn det(video: &str, frame: u64, b: BoundingBox) -> Detection {
        Detection {
            video_id: video.into(),
            frame_index: frame,
            box_: b,
            features: vec![frame as f64, 1.0],
            polyp_id: Some("p0".into()),
            attrs: None,
        }
    }

    #[test]
    fn iou_identity_disjoint_and_partial() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let c = BoundingBox::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(iou(&b, &c), 0.0);
        let d = BoundingBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
        assert!((iou(&a, &d) - 50.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn consecutive_identical_boxes_chain() {
        let cfg = BuilderConfig::default();
        let stream = vec![det("v", 0, boxed(0.0)), det("v", 1, boxed(0.0))];
        let chains = chain_detections(&stream, &cfg).unwrap();
        assert_eq!(chains.len(), 1);
        assert_eq!(chains[0].len(), 2);
    }

    #[test]
    fn zero_iou_splits() {
        let cfg = BuilderConfig::default();
        let stream = vec![det("v", 0, boxed(0.0)), det("v", 1, boxed(100.0))];
        let chains = chain_detections(&stream, &cfg).unwrap();
        assert_eq!(chains.len(), 2);
    }

    #[test]
    fn weak_link_splits_into_two_and_three() {
        let cfg = BuilderConfig::default();
        // 3rd detection has IoU ~0.05 to the 2nd: shift a 10-wide box by ~9.05
        let mut stream = vec![det("v", 0, boxed(0.0)), det("v", 1, boxed(0.2))];
        stream.push(det("v", 2, boxed(9.3))); // iou(0.2, 9.3): inter 0.9, union 19.1 -> 0.047
        stream.push(det("v", 3, boxed(9.4)));
        stream.push(det("v", 4, boxed(9.5)));
        assert!(iou(&boxed(0.2), &boxed(9.3)) < cfg.iou_threshold);
        let chains = chain_detections(&stream, &cfg).unwrap();
        let lens: Vec<usize> = chains.iter().map(|c| c.len()).collect();
        assert_eq!(lens, vec![2, 3]);
    }

    #[test]
    fn frame_gap_splits() {
        let cfg = BuilderConfig::default();
        let stream = vec![det("v", 0, boxed(0.0)), det("v", 2, boxed(0.0))];
        let chains = chain_detections(&stream, &cfg).unwrap();
        assert_eq!(chains.len(), 2);
    }

    #[test]
    fn unsorted_input_is_an_error() {
        let cfg = BuilderConfig::default();
        let stream = vec![det("v", 5, boxed(0.0)), det("v", 5, boxed(0.0))];
        assert!(chain_detections(&stream, &cfg).is_err());
    }

    #[test]
    fn interleaved_videos_chain_independently() {
        let cfg = BuilderConfig::default();
        let stream = vec![
            det("a", 0, boxed(0.0)),
            det("b", 0, boxed(0.0)),
            det("a", 1, boxed(0.0)),
            det("b", 1, boxed(0.0)),
        ];
        let chains = chain_detections(&stream, &cfg).unwrap();
        assert_eq!(chains.len(), 2);
        assert!(chains.iter().all(|c| c.len() == 2));
    }

    #[test]
    fn chain_by_track_ignores_boxes() {
        let cfg = BuilderConfig {
            chain_by: ChainBy::Track,
            ..BuilderConfig::default()
        };
        let mut a = det("v", 0, boxed(0.0));
        let mut b = det("v", 1, boxed(500.0)); // no overlap at all
        a.polyp_id = Some("p1".into());
        b.polyp_id = Some("p1".into());
        let mut c = det("v", 2, boxed(500.0));
        c.polyp_id = Some("p2".into());
        let chains = chain_detections(&[a, b, c], &cfg).unwrap();
        let lens: Vec<usize> = chains.iter().map(|ch| ch.len()).collect();
        assert_eq!(lens, vec![2, 1]);
    }

    fn long_chain(n: u64) -> Vec<Detection> {
        (0..n).map(|f| det("v", f, boxed(0.0))).collect()
    }

    #[test]
    fn window_counts_match_arithmetic() {
        let cfg = BuilderConfig::default();
        assert_eq!(windows(&long_chain(64), &cfg, "x").len(), 2);
        assert_eq!(windows(&long_chain(31), &cfg, "x").len(), 1);
        assert_eq!(windows(&long_chain(7), &cfg, "x").len(), 0);
    }

    #[test]
    fn windows_are_strided_and_disjoint() {
        let cfg = BuilderConfig::default();
        let ts = windows(&long_chain(64), &cfg, "x");
        assert_eq!(ts[0].position(), 0);
        assert_eq!(ts[1].position(), 32);
        for t in &ts {
            assert_eq!(t.len(), cfg.tracklet_length);
            // frames carry the source frame index in features[0]
            for (k, row) in t.frames().iter().enumerate() {
                assert_eq!(
                    row[0] as u64,
                    t.position() + (k * cfg.subsample_stride) as u64
                );
            }
        }
        // no detection reused across windows
        let mut seen = std::collections::BTreeSet::new();
        for t in &ts {
            for row in t.frames() {
                assert!(seen.insert(row[0] as u64));
            }
        }
    }
}
