//! Procedural generation of colonoscopy-like detection streams.
//!
//! Each video contains a sequence of polyp encounters. A polyp has a latent
//! appearance vector on the unit sphere; its frame features are that latent
//! plus an accumulated random-walk drift and per-frame isotropic noise. With
//! probability `overlap_prob`, one encounter of the next polyp is interleaved
//! into the current polyp's block, which creates temporally adjacent
//! detections of distinct polyps — the failure mode the sampler diagnostics
//! measure. Binary attributes are sign tests on fixed latent coordinates, so
//! they are linearly recoverable from clean features.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::builder::{build_tracklets, BuilderConfig};
use crate::data::{BoundingBox, Detection, TrackletDataset};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, tag};

/// Attribute coordinates are pushed this far from the decision boundary
/// (before renormalization) so sign labels keep a geometric margin.
const ATTR_MARGIN: f64 = 0.25;

/// Multiplier on `gap_frames` between distinct polyp blocks. Within-polyp
/// encounter gaps use `gap_frames` itself, so same-polyp tracklets stay
/// temporally closer than cross-polyp ones except at interleaves.
const BLOCK_GAP_FACTOR: u64 = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub polyps_per_video: usize,
    pub encounters_per_polyp: usize,
    pub frames_per_encounter: usize,
    /// Mean number of skipped frames between consecutive encounters.
    pub gap_frames: u64,
    /// Probability that one encounter of the next polyp is interleaved into
    /// the current polyp's block.
    pub overlap_prob: f64,
    pub d_in: usize,
    pub drift_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 20,
            polyps_per_video: 5,
            encounters_per_polyp: 4,
            frames_per_encounter: 64,
            gap_frames: 40,
            overlap_prob: 0.3,
            d_in: 8,
            drift_scale: 0.02,
            noise_scale: 0.25,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_videos", self.num_videos),
            ("polyps_per_video", self.polyps_per_video),
            ("encounters_per_polyp", self.encounters_per_polyp),
            ("frames_per_encounter", self.frames_per_encounter),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        if self.gap_frames < 1 {
            return Err(Error::Config("gap_frames must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return Err(Error::Config(format!(
                "overlap_prob must be in [0,1], got {}",
                self.overlap_prob
            )));
        }
        if self.d_in < 2 {
            return Err(Error::Config(
                "d_in must be >= 2 (two attribute coordinates)".into(),
            ));
        }
        if self.drift_scale < 0.0 || self.noise_scale < 0.0 {
            return Err(Error::Config("scales must be >= 0".into()));
        }
        Ok(())
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one value per call keeps the draw order trivially stable.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gauss_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| gauss(rng)).collect()
}

/// Uniform draw on the unit sphere, with the two attribute coordinates
/// pushed away from zero by `ATTR_MARGIN` (sign-preserving) and the vector
/// renormalized.
fn latent(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v = loop {
        let g = gauss_vec(rng, d);
        let n = crate::numeric::norm(&g);
        if n > 1e-12 {
            break g.iter().map(|x| x / n).collect::<Vec<f64>>();
        }
    };
    for coord in v.iter_mut().take(2) {
        *coord = coord.signum() * (coord.abs() + ATTR_MARGIN);
    }
    let n = crate::numeric::norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

#[derive(Clone, Copy)]
struct Unit {
    polyp: usize,
    interleaved: bool,
}

/// Per-video ordered encounter units: sequential polyp blocks with optional
/// single-encounter interleaves of the following polyp.
fn encounter_units(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Unit> {
    let (p, e) = (cfg.polyps_per_video, cfg.encounters_per_polyp);
    let mut units: Vec<Unit> = (0..p)
        .flat_map(|polyp| {
            std::iter::repeat(Unit {
                polyp,
                interleaved: false,
            })
            .take(e)
        })
        .collect();
    if e < 2 {
        return units; // nothing to interleave between
    }
    for polyp in 0..p.saturating_sub(1) {
        let draw: f64 = rng.gen();
        if draw < cfg.overlap_prob {
            // move the next polyp's first encounter between this polyp's
            // last two encounters
            let from = units
                .iter()
                .position(|u| u.polyp == polyp + 1)
                .expect("every polyp has units");
            let mut moved = units.remove(from);
            moved.interleaved = true;
            let last_of_p = units
                .iter()
                .rposition(|u| u.polyp == polyp && !u.interleaved)
                .expect("every polyp has units");
            units.insert(last_of_p, moved);
        }
    }
    units
}

/// Generate the full detection stream for a configuration.
pub fn generate_stream(cfg: &SynthConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for v in 0..cfg.num_videos {
        let mut rng = derive_rng(cfg.seed, &[tag("video"), v as u64]);
        let video_id = format!("v{v}");

        let latents: Vec<Vec<f64>> = (0..cfg.polyps_per_video)
            .map(|_| latent(&mut rng, cfg.d_in))
            .collect();
        let attrs: Vec<BTreeMap<String, u8>> = latents
            .iter()
            .map(|a| {
                let mut m = BTreeMap::new();
                m.insert("size_class".to_string(), (a[0] > 0.0) as u8);
                m.insert("histology_class".to_string(), (a[1] > 0.0) as u8);
                m
            })
            .collect();
        let units = encounter_units(cfg, &mut rng);

        let mut drift: Vec<Vec<f64>> = vec![vec![0.0; cfg.d_in]; cfg.polyps_per_video];
        let mut cursor: u64 = 0;
        let mut prev: Option<Unit> = None;
        for unit in units {
            let base_gap = match prev {
                None => 0,
                Some(pu) => {
                    if pu.polyp == unit.polyp || pu.interleaved || unit.interleaved {
                        cfg.gap_frames
                    } else {
                        cfg.gap_frames * BLOCK_GAP_FACTOR
                    }
                }
            };
            let gap = if base_gap == 0 {
                0
            } else {
                rng.gen_range(base_gap.div_ceil(2)..=base_gap + base_gap / 2)
            };
            let start = cursor + gap;

            let mut cx: f64 = rng.gen_range(20.0..80.0);
            let mut cy: f64 = rng.gen_range(20.0..80.0);
            for f in 0..cfg.frames_per_encounter {
                if f > 0 {
                    cx += rng.gen_range(-0.5..0.5);
                    cy += rng.gen_range(-0.5..0.5);
                }
                let step = gauss_vec(&mut rng, cfg.d_in);
                let eps = gauss_vec(&mut rng, cfg.d_in);
                let dp = &mut drift[unit.polyp];
                for (d, s) in dp.iter_mut().zip(&step) {
                    *d += s * cfg.drift_scale;
                }
                let features: Vec<f64> = latents[unit.polyp]
                    .iter()
                    .zip(dp.iter())
                    .zip(&eps)
                    .map(|((a, d), e)| a + d + e * cfg.noise_scale)
                    .collect();
                out.push(Detection {
                    video_id: video_id.clone(),
                    frame_index: start + f as u64,
                    box_: BoundingBox::new(cx - 5.0, cy - 5.0, cx + 5.0, cy + 5.0)
                        .expect("synth boxes are non-degenerate"),
                    features,
                    polyp_id: Some(format!("v{v}_p{}", unit.polyp)),
                    attrs: Some(attrs[unit.polyp].clone()),
                });
            }
            cursor = start + cfg.frames_per_encounter as u64;
            prev = Some(unit);
        }
    }
    Ok(out)
}

/// Generate a stream and build it into tracklets with the given builder.
pub fn generate_dataset_with(
    cfg: &SynthConfig,
    builder: &BuilderConfig,
) -> Result<TrackletDataset> {
    let stream = generate_stream(cfg)?;
    let tracklets = build_tracklets(&stream, builder)?;
    if tracklets.is_empty() {
        return Err(Error::Config(
            "no tracklets produced: encounters too short for the tracklet window".into(),
        ));
    }
    TrackletDataset::new(tracklets, builder.tracklet_length, cfg.d_in)
}

/// Generate a dataset with the default tracklet builder.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<TrackletDataset> {
    generate_dataset_with(cfg, &BuilderConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            num_videos: 2,
            polyps_per_video: 3,
            encounters_per_polyp: 2,
            frames_per_encounter: 32,
            gap_frames: 10,
            overlap_prob: 0.0,
            d_in: 4,
            drift_scale: 0.0,
            noise_scale: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn sequential_when_overlap_is_zero() {
        let stream = generate_stream(&small_cfg()).unwrap();
        for v in ["v0", "v1"] {
            let dets: Vec<&Detection> = stream.iter().filter(|d| d.video_id == v).collect();
            for w in dets.windows(2) {
                let p0: &str = w[0].polyp_id.as_deref().unwrap();
                let p1: &str = w[1].polyp_id.as_deref().unwrap();
                assert!(p0 <= p1, "polyp order regressed: {p0} then {p1}");
            }
        }
    }

    #[test]
    fn zero_noise_zero_drift_reproduces_latents() {
        let stream = generate_stream(&small_cfg()).unwrap();
        let mut per_polyp: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
        for d in &stream {
            per_polyp
                .entry(d.polyp_id.as_deref().unwrap())
                .or_default()
                .push(&d.features);
        }
        for (_, feats) in per_polyp {
            for f in &feats {
                assert_eq!(*f, feats[0], "frames of one polyp must be identical");
            }
            let n = crate::numeric::norm(feats[0]);
            assert!((n - 1.0).abs() < 1e-12, "latents are unit-norm");
        }
    }

    #[test]
    fn determinism_same_seed() {
        let a = generate_stream(&small_cfg()).unwrap();
        let b = generate_stream(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let ds_a = generate_dataset(&small_cfg()).unwrap();
        let ds_b = generate_dataset(&small_cfg()).unwrap();
        assert_eq!(ds_a, ds_b);
    }

    #[test]
    fn tracklet_counts_follow_arithmetic() {
        // 32 frames, stride 4 -> 8 retained -> exactly one window per encounter
        let cfg = small_cfg();
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(
            ds.len(),
            cfg.num_videos * cfg.polyps_per_video * cfg.encounters_per_polyp
        );
        // default config: 20 videos x 5 polyps x 8 tracklets
        let ds = generate_dataset(&SynthConfig::default()).unwrap();
        assert_eq!(ds.len(), 800);
    }

    #[test]
    fn too_short_encounters_error() {
        let cfg = SynthConfig {
            frames_per_encounter: 4,
            ..small_cfg()
        };
        let err = generate_dataset(&cfg).unwrap_err().to_string();
        assert!(err.contains("no tracklets produced"), "{err}");
    }

    #[test]
    fn identity_separability_with_zero_noise() {
        // same-polyp frame cosine >= cross-polyp frame cosine, many seeds
        for seed in 0..20 {
            let cfg = SynthConfig {
                seed,
                num_videos: 1,
                ..small_cfg()
            };
            let stream = generate_stream(&cfg).unwrap();
            let mut by_polyp: BTreeMap<&str, &[f64]> = BTreeMap::new();
            for d in &stream {
                by_polyp.insert(d.polyp_id.as_deref().unwrap(), &d.features);
            }
            let ids: Vec<&&str> = by_polyp.keys().collect();
            for i in 0..ids.len() {
                for j in (i + 1)..ids.len() {
                    let cross =
                        crate::numeric::cosine(by_polyp[*ids[i]], by_polyp[*ids[j]]).unwrap();
                    assert!(cross < 1.0 - 1e-9, "distinct latents must not coincide");
                }
            }
        }
    }

    #[test]
    fn attributes_are_sign_tests_with_margin() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        for t in ds.tracklets() {
            // zero noise/drift: frames equal the latent exactly
            let a = &t.frames()[0];
            assert_eq!(t.eval_attr("size_class").unwrap(), (a[0] > 0.0) as u8);
            assert_eq!(t.eval_attr("histology_class").unwrap(), (a[1] > 0.0) as u8);
            assert!(a[0].abs() > 0.1, "margin kept after renormalization");
            assert!(a[1].abs() > 0.1);
        }
    }

    #[test]
    fn interleaving_moves_one_encounter() {
        let cfg = SynthConfig {
            overlap_prob: 1.0,
            num_videos: 1,
            ..small_cfg()
        };
        let stream = generate_stream(&cfg).unwrap();
        // with overlap 1.0 and 3 polyps, polyp order must regress somewhere
        let order: Vec<&str> = stream.iter().map(|d| d.polyp_id.as_deref().unwrap()).collect();
        let sorted = order.windows(2).all(|w| w[0] <= w[1]);
        assert!(!sorted, "interleaving must break strict sequentiality");
        // counts are preserved
        let n1 = order.iter().filter(|p| **p == "v0_p1").count();
        assert_eq!(n1, cfg.encounters_per_polyp * cfg.frames_per_encounter);
    }
}
