//! Training loop with curriculum progress, plus frozen-embedding extraction.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::TrackletDataset;
use crate::encoder::{
    encode_on_tape, init_params, project_on_tape, BoundParams, EmbeddingSet, EncoderConfig, Mode,
};
use crate::error::{Error, Result};
use crate::loss::{multi_level_loss_on_tape, LossConfig, MultiLevelVars};
use crate::optim::AdamW;
use crate::rng::{derive_rng, tag};
use crate::sampler::{bag_purity, curriculum_tau, sample_bag, top_k_bag, Bag, CurriculumSchedule, RankIndex};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Deterministic K temporally closest candidates.
    Topk,
    /// Exponential rank sampling without replacement.
    Exp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub k: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub sampling: Sampling,
    pub curriculum: bool,
    pub schedule: CurriculumSchedule,
    /// Temperature used by `exp` sampling when the curriculum is off.
    pub fixed_tau: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_size: 60,
            k: 4,
            lr: 1e-4,
            weight_decay: 1e-2,
            sampling: Sampling::Exp,
            curriculum: true,
            schedule: CurriculumSchedule::default(),
            fixed_tau: 2.0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps < 1 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.k < 1 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if !(self.fixed_tau > 0.0) {
            return Err(Error::Config("fixed_tau must be > 0".into()));
        }
        self.schedule.validate()
    }
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub c: f64,
    pub tau: f64,
    pub loss_total: f64,
    pub loss_tracklet: Option<f64>,
    pub loss_frame: Option<f64>,
    pub purity: Option<f64>,
}

pub fn write_step_log(records: &[StepRecord], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,c,tau,loss_total,loss_tracklet,loss_frame,purity\n");
    let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step,
            r.c,
            r.tau,
            r.loss_total,
            fmt(r.loss_tracklet),
            fmt(r.loss_frame),
            fmt(r.purity)
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Debug)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

fn check_dataset_compat(dataset: &TrackletDataset, enc_cfg: &EncoderConfig) -> Result<()> {
    if dataset.feature_dim() != enc_cfg.d_in {
        return Err(Error::Mismatch(format!(
            "dataset d_in {} vs encoder d_in {}",
            dataset.feature_dim(),
            enc_cfg.d_in
        )));
    }
    if dataset.tracklet_len() != enc_cfg.tracklet_len {
        return Err(Error::Mismatch(format!(
            "dataset L {} vs encoder L {}",
            dataset.tracklet_len(),
            enc_cfg.tracklet_len
        )));
    }
    Ok(())
}

fn stack_frames(dataset: &TrackletDataset, indices: &[usize]) -> Tensor {
    let l = dataset.tracklet_len();
    let d = dataset.feature_dim();
    let mut data = Vec::with_capacity(indices.len() * l * d);
    for &i in indices {
        for row in dataset.get(i).frames() {
            data.extend_from_slice(row);
        }
    }
    Tensor::matrix(indices.len() * l, d, data).expect("dataset frames are rectangular")
}

/// Train the encoder with temporal bags and the noise-aware objective.
pub fn train(
    dataset: &TrackletDataset,
    enc_cfg: &EncoderConfig,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainResult> {
    enc_cfg.validate()?;
    loss_cfg.validate()?;
    train_cfg.validate()?;
    check_dataset_compat(dataset, enc_cfg)?;

    let index = RankIndex::build(dataset);
    let usable = index.usable_anchors(train_cfg.k);
    let excluded = dataset.len() - usable.len();
    if excluded > 0 {
        log::warn!(
            "{excluded} anchors have fewer than K={} candidates and are excluded this run",
            train_cfg.k
        );
    }
    if usable.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "no usable anchors: {} tracklets have >= K={} same-video candidates, need >= 2",
            usable.len(),
            train_cfg.k
        )));
    }

    let mut params = init_params(enc_cfg, train_cfg.seed)?;
    let mut optimizer = AdamW::new(train_cfg.lr, train_cfg.weight_decay);
    let labels_present = dataset
        .tracklets()
        .iter()
        .all(|t| t.eval_polyp_id().is_some());

    let l = dataset.tracklet_len();
    let batch_size = train_cfg.batch_size.min(usable.len());
    let mut schedule_order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let mut log_records = Vec::with_capacity(train_cfg.total_steps);

    for step in 0..train_cfg.total_steps {
        let c = step as f64 / (train_cfg.total_steps.saturating_sub(1).max(1)) as f64;
        let tau = if train_cfg.curriculum {
            curriculum_tau(&train_cfg.schedule, c)?
        } else {
            train_cfg.fixed_tau
        };

        // next batch of anchors; reshuffle at each epoch boundary
        if cursor + batch_size > schedule_order.len() {
            schedule_order = usable.clone();
            let mut rng = derive_rng(train_cfg.seed, &[tag("epoch"), epoch]);
            schedule_order.shuffle(&mut rng);
            epoch += 1;
            cursor = 0;
        }
        let batch: Vec<usize> = schedule_order[cursor..cursor + batch_size].to_vec();
        cursor += batch_size;

        // one independent stream per (step, anchor) for bag sampling
        let mut bags: Vec<Bag> = Vec::with_capacity(batch.len());
        for &anchor in &batch {
            let order = index.order(anchor);
            let bag = match train_cfg.sampling {
                Sampling::Topk => top_k_bag(order, train_cfg.k)?,
                Sampling::Exp => {
                    let mut rng =
                        derive_rng(train_cfg.seed, &[tag("bag"), step as u64, anchor as u64]);
                    sample_bag(order, train_cfg.k, tau, &mut rng)?
                }
            };
            bags.push(bag);
        }

        let n = batch.len();
        let k = train_cfg.k;
        let mut sequence_indices = batch.clone();
        for bag in &bags {
            sequence_indices.extend_from_slice(&bag.member_indices);
        }
        let frames = stack_frames(dataset, &sequence_indices);

        let mut tape = Tape::new();
        let frames_var = tape.leaf(frames);
        let bound = BoundParams::bind(&mut tape, &params, true);
        let mut dropout_rng = derive_rng(train_cfg.seed, &[tag("dropout"), step as u64]);
        let mut mode = Mode::Train {
            rng: &mut dropout_rng,
        };
        let (tracklet_hidden, frame_hidden) =
            encode_on_tape(&mut tape, frames_var, n + n * k, &bound, enc_cfg, &mut mode)?;
        let proj_tracklet = project_on_tape(&mut tape, tracklet_hidden, &bound, enc_cfg)?;
        let proj_frames = project_on_tape(&mut tape, frame_hidden, &bound, enc_cfg)?;

        let vars = MultiLevelVars {
            anchor_tracklets: tape.slice_rows(proj_tracklet, 0, n),
            bag_tracklets: tape.slice_rows(proj_tracklet, n, n * k),
            anchor_frames: tape.slice_rows(proj_frames, 0, n * l),
            bag_frames: tape.slice_rows(proj_frames, n * l, n * k * l),
            n,
            k,
            l,
        };
        let (total_var, loss_out) = multi_level_loss_on_tape(&mut tape, vars, loss_cfg)?;

        if !loss_out.total.is_finite() {
            let anchor_ids: Vec<&str> = bags.iter().map(|b| b.anchor_id.as_str()).collect();
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step} (tau {tau}); offending batch anchors: {}",
                anchor_ids.join(" ")
            )));
        }

        params.zero_grads();
        let grads = tape.backward(total_var)?;
        for (name, var) in bound.iter() {
            if let Some(g) = grads.get(*var) {
                params.accumulate_grad(name, g);
            }
        }
        optimizer.step(&mut params);

        let purity = if labels_present {
            Some(bag_purity(&bags, dataset)?)
        } else {
            None
        };
        log_records.push(StepRecord {
            step,
            c,
            tau,
            loss_total: loss_out.total,
            loss_tracklet: loss_out.per_level.get(&crate::loss::Level::Tracklet).copied(),
            loss_frame: loss_out.per_level.get(&crate::loss::Level::Frame).copied(),
            purity,
        });
    }

    let provenance = serde_json::json!({
        "seed": train_cfg.seed,
        "train": train_cfg,
        "loss": loss_cfg,
    });
    params.zero_grads();
    Ok(TrainResult {
        checkpoint: Checkpoint::new(enc_cfg.clone(), params, provenance),
        log: log_records,
    })
}

/// Eval-mode encoding of every tracklet in the dataset.
pub fn embed_all(dataset: &TrackletDataset, checkpoint: &Checkpoint) -> Result<EmbeddingSet> {
    let cfg = &checkpoint.encoder;
    cfg.validate()?;
    check_dataset_compat(dataset, cfg)?;
    let n = dataset.len();
    let l = dataset.tracklet_len();
    if n == 0 {
        return Ok(EmbeddingSet {
            tracklet_emb: Tensor::zeros(vec![0, cfg.proj_out]),
            frame_embs: Tensor::zeros(vec![0, l, cfg.proj_out]),
        });
    }

    const CHUNK: usize = 64;
    let mut tracklet_rows: Vec<f64> = Vec::with_capacity(n * cfg.proj_out);
    let mut frame_rows: Vec<f64> = Vec::with_capacity(n * l * cfg.proj_out);
    let mut start = 0;
    while start < n {
        let count = CHUNK.min(n - start);
        let indices: Vec<usize> = (start..start + count).collect();
        let frames = stack_frames(dataset, &indices);
        let mut tape = Tape::new();
        let frames_var = tape.leaf(frames);
        let bound = BoundParams::bind(&mut tape, &checkpoint.params, false);
        let (th, fh) = encode_on_tape(&mut tape, frames_var, count, &bound, cfg, &mut Mode::Eval)?;
        let pt = project_on_tape(&mut tape, th, &bound, cfg)?;
        let pf = project_on_tape(&mut tape, fh, &bound, cfg)?;
        tracklet_rows.extend_from_slice(tape.value(pt).data());
        frame_rows.extend_from_slice(tape.value(pf).data());
        start += count;
    }

    let set = EmbeddingSet {
        tracklet_emb: Tensor::matrix(n, cfg.proj_out, tracklet_rows)?,
        frame_embs: Tensor::new(vec![n, l, cfg.proj_out], frame_rows)?,
    };
    if !set.tracklet_emb.is_finite() || !set.frame_embs.is_finite() {
        return Err(Error::Numeric("non-finite embeddings".into()));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::Level;
    use crate::synth::{generate_dataset, SynthConfig};

    fn tiny_dataset() -> TrackletDataset {
        generate_dataset(&SynthConfig {
            num_videos: 2,
            polyps_per_video: 2,
            encounters_per_polyp: 2,
            frames_per_encounter: 64,
            gap_frames: 20,
            overlap_prob: 0.0,
            d_in: 4,
            drift_scale: 0.01,
            noise_scale: 0.1,
            seed: 5,
        })
        .unwrap()
    }

    fn tiny_enc() -> EncoderConfig {
        EncoderConfig {
            d_in: 4,
            d_model: 8,
            num_layers: 1,
            num_heads: 2,
            d_ff: 16,
            proj_hidden: 8,
            proj_out: 4,
            tracklet_len: 8,
            ..EncoderConfig::default()
        }
    }

    fn tiny_train(steps: usize) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            batch_size: 8,
            k: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_step_has_c_zero_and_tau_min() {
        let ds = tiny_dataset();
        let res = train(&ds, &tiny_enc(), &LossConfig::default(), &tiny_train(1)).unwrap();
        assert_eq!(res.log.len(), 1);
        assert_eq!(res.log[0].c, 0.0);
        assert_eq!(res.log[0].tau, 0.3);
    }

    #[test]
    fn zero_lr_keeps_initial_params() {
        let ds = tiny_dataset();
        let cfg = tiny_enc();
        let tcfg = TrainConfig {
            lr: 0.0,
            ..tiny_train(3)
        };
        let res = train(&ds, &cfg, &LossConfig::default(), &tcfg).unwrap();
        let init = init_params(&cfg, tcfg.seed).unwrap();
        assert_eq!(res.checkpoint.params, init);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let ds = tiny_dataset();
        let a = train(&ds, &tiny_enc(), &LossConfig::default(), &tiny_train(4)).unwrap();
        let b = train(&ds, &tiny_enc(), &LossConfig::default(), &tiny_train(4)).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn loss_moving_average_decreases() {
        let ds = generate_dataset(&SynthConfig {
            num_videos: 4,
            polyps_per_video: 3,
            encounters_per_polyp: 2,
            frames_per_encounter: 64,
            gap_frames: 20,
            overlap_prob: 0.1,
            d_in: 4,
            drift_scale: 0.01,
            noise_scale: 0.2,
            seed: 9,
        })
        .unwrap();
        let tcfg = TrainConfig {
            total_steps: 150,
            batch_size: 12,
            k: 2,
            lr: 3e-4,
            ..TrainConfig::default()
        };
        let loss_cfg = LossConfig {
            level: Level::Tracklet,
            ..LossConfig::default()
        };
        let res = train(&ds, &tiny_enc(), &loss_cfg, &tcfg).unwrap();
        let first: f64 = res.log[..30].iter().map(|r| r.loss_total).sum::<f64>() / 30.0;
        let last: f64 = res.log[res.log.len() - 30..]
            .iter()
            .map(|r| r.loss_total)
            .sum::<f64>()
            / 30.0;
        assert!(last < first, "loss must decrease: {first} -> {last}");
    }

    #[test]
    fn logged_tau_follows_schedule() {
        let ds = tiny_dataset();
        let res = train(&ds, &tiny_enc(), &LossConfig::default(), &tiny_train(5)).unwrap();
        for r in &res.log {
            let expect = curriculum_tau(&CurriculumSchedule::default(), r.c).unwrap();
            assert_eq!(r.tau, expect);
        }
        // fixed-tau path
        let tcfg = TrainConfig {
            curriculum: false,
            fixed_tau: 1.5,
            ..tiny_train(5)
        };
        let res = train(&ds, &tiny_enc(), &LossConfig::default(), &tcfg).unwrap();
        assert!(res.log.iter().all(|r| r.tau == 1.5));
    }

    #[test]
    fn unusable_dataset_is_rejected() {
        // single tracklet per video -> zero candidates anywhere
        let ds = generate_dataset(&SynthConfig {
            num_videos: 3,
            polyps_per_video: 1,
            encounters_per_polyp: 1,
            frames_per_encounter: 32,
            gap_frames: 10,
            overlap_prob: 0.0,
            d_in: 4,
            drift_scale: 0.0,
            noise_scale: 0.0,
            seed: 2,
        })
        .unwrap();
        let err = train(&ds, &tiny_enc(), &LossConfig::default(), &tiny_train(1))
            .unwrap_err()
            .to_string();
        assert!(err.contains("no usable anchors"), "{err}");
    }

    #[test]
    fn embed_all_is_deterministic_and_shaped() {
        let ds = tiny_dataset();
        let res = train(&ds, &tiny_enc(), &LossConfig::default(), &tiny_train(2)).unwrap();
        let a = embed_all(&ds, &res.checkpoint).unwrap();
        let b = embed_all(&ds, &res.checkpoint).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tracklet_emb.shape(), &[ds.len(), 4]);
        assert_eq!(a.frame_embs.shape(), &[ds.len(), 8, 4]);
    }

    #[test]
    fn embed_all_rejects_mismatched_checkpoint() {
        let ds = tiny_dataset();
        let mut cfg = tiny_enc();
        cfg.d_in = 7;
        let params = init_params(&cfg, 0).unwrap();
        let ckpt = Checkpoint::new(cfg, params, serde_json::Value::Null);
        assert!(matches!(
            embed_all(&ds, &ckpt),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn step_log_round_trips_as_csv() {
        let ds = tiny_dataset();
        let res = train(&ds, &tiny_enc(), &LossConfig::default(), &tiny_train(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_step_log(&res.log, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,c,tau,loss_total"));
        assert_eq!(text.lines().count(), 3);
    }
}
