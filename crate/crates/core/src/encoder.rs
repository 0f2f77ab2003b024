//! The tracklet encoder: per-frame projection with learned positional
//! embeddings, a learnable aggregation token prepended to the sequence,
//! pre-norm attention blocks, a final layer norm, and the shared MLP
//! projection head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{derive_rng, tag};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub proj_hidden: usize,
    pub proj_out: usize,
    /// Tracklet length L.
    pub tracklet_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_in: 8,
            d_model: 32,
            num_layers: 1,
            num_heads: 4,
            d_ff: 64,
            dropout: 0.0,
            proj_hidden: 32,
            proj_out: 16,
            tracklet_len: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_in", self.d_in),
            ("d_model", self.d_model),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("proj_hidden", self.proj_hidden),
            ("proj_out", self.proj_out),
            ("tracklet_len", self.tracklet_len),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Forward mode. Train mode draws dropout masks from the supplied stream.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng },
}

/// Projected embeddings for a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    /// `[N, d]` tracklet embeddings.
    pub tracklet_emb: Tensor,
    /// `[N, L, d]` per-frame embeddings.
    pub frame_embs: Tensor,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.tracklet_emb.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tracklet_emb.cols()
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn small_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std;
            if z.abs() <= 0.5 {
                break z;
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Fan-in scaled uniform weights, zero biases, unit layer-norm gains, and
/// small-variance normal token and positional embeddings. Deterministic per
/// seed.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = derive_rng(seed, &[tag("init")]);
    let d = cfg.d_model;
    let mut store = ParamStore::new();
    let put = |store: &mut ParamStore, name: &str, t: Tensor| {
        store.insert(name, t).expect("init names are unique");
    };

    put(&mut store, "embed.w", uniform_init(&mut rng, cfg.d_in, d, cfg.d_in));
    put(&mut store, "embed.b", Tensor::zeros(vec![1, d]));
    put(&mut store, "token", small_normal(&mut rng, 1, d, 0.02));
    put(&mut store, "pos", small_normal(&mut rng, cfg.tracklet_len, d, 0.02));

    for l in 0..cfg.num_layers {
        let p = format!("layer{l}");
        put(&mut store, &format!("{p}.ln1.g"), Tensor::new(vec![1, d], vec![1.0; d])?);
        put(&mut store, &format!("{p}.ln1.b"), Tensor::zeros(vec![1, d]));
        for w in ["wq", "wk", "wv", "wo"] {
            put(&mut store, &format!("{p}.attn.{w}"), uniform_init(&mut rng, d, d, d));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            put(&mut store, &format!("{p}.attn.{b}"), Tensor::zeros(vec![1, d]));
        }
        put(&mut store, &format!("{p}.ln2.g"), Tensor::new(vec![1, d], vec![1.0; d])?);
        put(&mut store, &format!("{p}.ln2.b"), Tensor::zeros(vec![1, d]));
        put(&mut store, &format!("{p}.ff.w1"), uniform_init(&mut rng, d, cfg.d_ff, d));
        put(&mut store, &format!("{p}.ff.b1"), Tensor::zeros(vec![1, cfg.d_ff]));
        put(&mut store, &format!("{p}.ff.w2"), uniform_init(&mut rng, cfg.d_ff, d, cfg.d_ff));
        put(&mut store, &format!("{p}.ff.b2"), Tensor::zeros(vec![1, d]));
    }

    put(&mut store, "final_ln.g", Tensor::new(vec![1, d], vec![1.0; d])?);
    put(&mut store, "final_ln.b", Tensor::zeros(vec![1, d]));

    put(&mut store, "proj.w1", uniform_init(&mut rng, d, cfg.proj_hidden, d));
    put(&mut store, "proj.b1", Tensor::zeros(vec![1, cfg.proj_hidden]));
    put(
        &mut store,
        "proj.w2",
        uniform_init(&mut rng, cfg.proj_hidden, cfg.proj_out, cfg.proj_hidden),
    );
    put(&mut store, "proj.b2", Tensor::zeros(vec![1, cfg.proj_out]));

    Ok(store)
}

/// Parameter leaves bound onto a tape, by name.
pub struct BoundParams {
    vars: std::collections::BTreeMap<String, Var>,
}

impl BoundParams {
    /// Bind every parameter as a differentiable leaf (training) or a
    /// constant (evaluation).
    pub fn bind(tape: &mut Tape, store: &ParamStore, trainable: bool) -> Self {
        let mut vars = std::collections::BTreeMap::new();
        for (name, value) in store.iter() {
            let v = if trainable {
                tape.param(value.clone())
            } else {
                tape.leaf(value.clone())
            };
            vars.insert(name.clone(), v);
        }
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn layer_norm_affine(tape: &mut Tape, x: Var, bound: &BoundParams, prefix: &str) -> Var {
    let normed = tape.layer_norm_rows(x, LN_EPS);
    let scaled = tape.mul_row(normed, bound.var(&format!("{prefix}.g")));
    tape.add_row(scaled, bound.var(&format!("{prefix}.b")))
}

fn dropout_mask(tape: &mut Tape, rows: usize, cols: usize, p: f64, rng: &mut ChaCha8Rng) -> Var {
    let keep = 1.0 - p;
    let data = (0..rows * cols)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    tape.leaf(Tensor::matrix(rows, cols, data).unwrap())
}

/// Batched encoder forward on a tape.
///
/// `frames` must hold `batch * L` rows of width `d_in`, sequence b occupying
/// rows `b*L..(b+1)*L`. Returns the aggregated tracklet hiddens `[batch,
/// d_model]` and the per-frame hiddens `[batch*L, d_model]`.
pub fn encode_on_tape(
    tape: &mut Tape,
    frames: Var,
    batch: usize,
    bound: &BoundParams,
    cfg: &EncoderConfig,
    mode: &mut Mode,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let l = cfg.tracklet_len;
    let t_len = l + 1;
    let d = cfg.d_model;
    {
        let f = tape.value(frames);
        if f.rows() != batch * l || f.cols() != cfg.d_in {
            return Err(Error::Mismatch(format!(
                "frames shape {:?} does not match batch {batch} x L {l} x d_in {}",
                f.shape(),
                cfg.d_in
            )));
        }
    }

    // frame projection + learned positional embeddings
    let projected = tape.matmul(frames, bound.var("embed.w"));
    let projected = tape.add_row(projected, bound.var("embed.b"));
    let pos = bound.var("pos");
    let pos_tiled = tape.concat_rows(&vec![pos; batch]);
    let projected = tape.add(projected, pos_tiled);

    // prepend the learnable token to every sequence
    let token = bound.var("token");
    let mut parts = Vec::with_capacity(2 * batch);
    for b in 0..batch {
        parts.push(token);
        parts.push(tape.slice_rows(projected, b * l, l));
    }
    let mut seq = tape.concat_rows(&parts);

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for layer in 0..cfg.num_layers {
        let p = format!("layer{layer}");

        let n1 = layer_norm_affine(tape, seq, bound, &format!("{p}.ln1"));
        let q = tape.matmul(n1, bound.var(&format!("{p}.attn.wq")));
        let q = tape.add_row(q, bound.var(&format!("{p}.attn.bq")));
        let k = tape.matmul(n1, bound.var(&format!("{p}.attn.wk")));
        let k = tape.add_row(k, bound.var(&format!("{p}.attn.bk")));
        let v = tape.matmul(n1, bound.var(&format!("{p}.attn.wv")));
        let v = tape.add_row(v, bound.var(&format!("{p}.attn.bv")));

        let heads: Vec<(Var, Var, Var)> = (0..cfg.num_heads)
            .map(|h| {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(k, h * dh, dh);
                let vh = tape.slice_cols(v, h * dh, dh);
                (qh, kh, vh)
            })
            .collect();

        let mut per_seq = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut outs = Vec::with_capacity(cfg.num_heads);
            for &(qh, kh, vh) in &heads {
                let qb = tape.slice_rows(qh, b * t_len, t_len);
                let kb = tape.slice_rows(kh, b * t_len, t_len);
                let vb = tape.slice_rows(vh, b * t_len, t_len);
                let kt = tape.transpose(kb);
                let scores = tape.matmul(qb, kt);
                let scores = tape.scale(scores, scale);
                let probs = tape.softmax_rows(scores);
                outs.push(tape.matmul(probs, vb));
            }
            per_seq.push(tape.concat_cols(&outs));
        }
        let merged = tape.concat_rows(&per_seq);
        let attn = tape.matmul(merged, bound.var(&format!("{p}.attn.wo")));
        let mut attn = tape.add_row(attn, bound.var(&format!("{p}.attn.bo")));
        if let Mode::Train { rng } = mode {
            if cfg.dropout > 0.0 {
                let mask = dropout_mask(tape, batch * t_len, d, cfg.dropout, rng);
                attn = tape.mul(attn, mask);
            }
        }
        seq = tape.add(seq, attn);

        let n2 = layer_norm_affine(tape, seq, bound, &format!("{p}.ln2"));
        let h1 = tape.matmul(n2, bound.var(&format!("{p}.ff.w1")));
        let h1 = tape.add_row(h1, bound.var(&format!("{p}.ff.b1")));
        let h1 = tape.relu(h1);
        let h2 = tape.matmul(h1, bound.var(&format!("{p}.ff.w2")));
        let mut ff = tape.add_row(h2, bound.var(&format!("{p}.ff.b2")));
        if let Mode::Train { rng } = mode {
            if cfg.dropout > 0.0 {
                let mask = dropout_mask(tape, batch * t_len, d, cfg.dropout, rng);
                ff = tape.mul(ff, mask);
            }
        }
        seq = tape.add(seq, ff);
    }

    let out = layer_norm_affine(tape, seq, bound, "final_ln");

    let tracklet_rows: Vec<Var> = (0..batch).map(|b| tape.slice_rows(out, b * t_len, 1)).collect();
    let frame_rows: Vec<Var> = (0..batch)
        .map(|b| tape.slice_rows(out, b * t_len + 1, l))
        .collect();
    let tracklet_hidden = tape.concat_rows(&tracklet_rows);
    let frame_hiddens = tape.concat_rows(&frame_rows);
    Ok((tracklet_hidden, frame_hiddens))
}

/// Projection head on a tape: linear -> ReLU -> linear, shared between
/// tracklet and frame hiddens.
pub fn project_on_tape(tape: &mut Tape, x: Var, bound: &BoundParams, cfg: &EncoderConfig) -> Result<Var> {
    if tape.value(x).cols() != cfg.d_model {
        return Err(Error::Mismatch(format!(
            "project expects last dim {}, got {}",
            cfg.d_model,
            tape.value(x).cols()
        )));
    }
    let h = tape.matmul(x, bound.var("proj.w1"));
    let h = tape.add_row(h, bound.var("proj.b1"));
    let h = tape.relu(h);
    let o = tape.matmul(h, bound.var("proj.w2"));
    Ok(tape.add_row(o, bound.var("proj.b2")))
}

/// One-tracklet eval/train forward returning plain tensors: the aggregated
/// hidden `[1, d_model]` and per-frame hiddens `[L, d_model]`.
pub fn encode(
    frames: &Tensor,
    params: &ParamStore,
    cfg: &EncoderConfig,
    mode: &mut Mode,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let f = tape.leaf(frames.clone());
    let bound = BoundParams::bind(&mut tape, params, false);
    let (th, fh) = encode_on_tape(&mut tape, f, 1, &bound, cfg, mode)?;
    Ok((tape.value(th).clone(), tape.value(fh).clone()))
}

/// Plain-tensor projection of hiddens (any row count).
pub fn project(h: &Tensor, params: &ParamStore, cfg: &EncoderConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(h.clone());
    let bound = BoundParams::bind(&mut tape, params, false);
    let out = project_on_tape(&mut tape, x, &bound, cfg)?;
    Ok(tape.value(out).clone())
}
