//! Core domain types and the on-disk dataset format.
//!
//! A dataset is stored as UTF-8 JSON Lines: the first line is a header object
//! `{"schema":"ntssl-tracklets/1","L":..,"d_in":..}`, every following line is
//! one tracklet record. Frame features are 64-bit floats serialized in
//! decimal with full round-trip precision, so save → load reproduces the
//! dataset bit for bit.
//!
//! Identity labels (`polyp_id`) and binary attributes are evaluation-only.
//! They are exposed through accessors named `eval_*`; training code must not
//! call those.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_SCHEMA: &str = "ntssl-tracklets/1";

/// Axis-aligned box in frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::InvalidInput(format!(
                "degenerate bounding box [{x_min},{y_min},{x_max},{y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

/// One detection of one polyp in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub frame_index: u64,
    pub box_: BoundingBox,
    pub features: Vec<f64>,
    /// Ground-truth identity; evaluation only.
    pub polyp_id: Option<String>,
    /// Ground-truth binary attributes; evaluation only.
    pub attrs: Option<BTreeMap<String, u8>>,
}

/// Fixed-length sequence of frame feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    tracklet_id: String,
    video_id: String,
    position: u64,
    frames: Vec<Vec<f64>>,
    polyp_id: Option<String>,
    attrs: Option<BTreeMap<String, u8>>,
}

impl Tracklet {
    pub fn new(
        tracklet_id: impl Into<String>,
        video_id: impl Into<String>,
        position: u64,
        frames: Vec<Vec<f64>>,
        polyp_id: Option<String>,
        attrs: Option<BTreeMap<String, u8>>,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidInput("tracklet with zero frames".into()));
        }
        let d = frames[0].len();
        if d == 0 || frames.iter().any(|row| row.len() != d) {
            return Err(Error::InvalidInput(
                "tracklet frame rows have inconsistent width".into(),
            ));
        }
        Ok(Self {
            tracklet_id: tracklet_id.into(),
            video_id: video_id.into(),
            position,
            frames,
            polyp_id,
            attrs,
        })
    }

    pub fn tracklet_id(&self) -> &str {
        &self.tracklet_id
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    /// Frame index of the first retained frame.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// L x d_in frame features.
    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames[0].len()
    }

    /// Ground-truth polyp identity. Evaluation and diagnostics only.
    pub fn eval_polyp_id(&self) -> Option<&str> {
        self.polyp_id.as_deref()
    }

    /// Ground-truth binary attribute. Evaluation only.
    pub fn eval_attr(&self, name: &str) -> Option<u8> {
        self.attrs.as_ref().and_then(|m| m.get(name).copied())
    }

    pub fn eval_attrs(&self) -> Option<&BTreeMap<String, u8>> {
        self.attrs.as_ref()
    }
}

/// Immutable ordered collection of equally shaped tracklets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackletDataset {
    tracklets: Vec<Tracklet>,
    tracklet_len: usize,
    feature_dim: usize,
    index: BTreeMap<String, usize>,
}

impl TrackletDataset {
    pub fn new(tracklets: Vec<Tracklet>, tracklet_len: usize, feature_dim: usize) -> Result<Self> {
        if tracklet_len == 0 || feature_dim == 0 {
            return Err(Error::InvalidInput(
                "tracklet length and feature dim must be >= 1".into(),
            ));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tracklets.iter().enumerate() {
            if t.len() != tracklet_len {
                return Err(Error::InvalidInput(format!(
                    "inconsistent tracklet length: {} has {} frames, expected {}",
                    t.tracklet_id(),
                    t.len(),
                    tracklet_len
                )));
            }
            if t.feature_dim() != feature_dim {
                return Err(Error::InvalidInput(format!(
                    "inconsistent feature dim: {} has d={}, expected {}",
                    t.tracklet_id(),
                    t.feature_dim(),
                    feature_dim
                )));
            }
            if index.insert(t.tracklet_id().to_string(), i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate tracklet_id {}",
                    t.tracklet_id()
                )));
            }
        }
        Ok(Self {
            tracklets,
            tracklet_len,
            feature_dim,
            index,
        })
    }

    /// Build from tracklets, inferring L and d_in from the first record.
    pub fn from_tracklets(tracklets: Vec<Tracklet>) -> Result<Self> {
        match tracklets.first() {
            None => Err(Error::InvalidInput(
                "cannot infer shape from an empty tracklet list".into(),
            )),
            Some(t) => {
                let (l, d) = (t.len(), t.feature_dim());
                Self::new(tracklets, l, d)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tracklets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracklets.is_empty()
    }

    pub fn tracklet_len(&self) -> usize {
        self.tracklet_len
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn get(&self, i: usize) -> &Tracklet {
        &self.tracklets[i]
    }

    pub fn index_of(&self, tracklet_id: &str) -> Option<usize> {
        self.index.get(tracklet_id).copied()
    }

    pub fn by_id(&self, tracklet_id: &str) -> Option<&Tracklet> {
        self.index_of(tracklet_id).map(|i| &self.tracklets[i])
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    #[serde(rename = "L")]
    l: usize,
    d_in: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    tracklet_id: String,
    video_id: String,
    position: u64,
    frames: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    polyp_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attrs: Option<BTreeMap<String, u8>>,
}

/// Load a dataset from JSON Lines. Errors carry the 1-based line number.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<TrackletDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header: Header = match lines.next() {
        None => {
            return Err(Error::MalformedRecord {
                line: 1,
                msg: "missing header line".into(),
            })
        }
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line: 1,
                msg: format!("bad header: {e}"),
            })?
        }
    };
    if header.schema != DATASET_SCHEMA {
        return Err(Error::MalformedRecord {
            line: 1,
            msg: format!("unknown schema {:?}", header.schema),
        });
    }

    let mut tracklets = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: lineno,
            msg: e.to_string(),
        })?;
        if rec.frames.len() != header.l {
            return Err(Error::MalformedRecord {
                line: lineno,
                msg: format!(
                    "inconsistent tracklet length: got {} frames, expected {}",
                    rec.frames.len(),
                    header.l
                ),
            });
        }
        if rec.frames.iter().any(|row| row.len() != header.d_in) {
            return Err(Error::MalformedRecord {
                line: lineno,
                msg: format!("inconsistent feature dim, expected {}", header.d_in),
            });
        }
        let t = Tracklet::new(
            rec.tracklet_id,
            rec.video_id,
            rec.position,
            rec.frames,
            rec.polyp_id,
            rec.attrs,
        )
        .map_err(|e| Error::MalformedRecord {
            line: lineno,
            msg: e.to_string(),
        })?;
        tracklets.push(t);
    }

    TrackletDataset::new(tracklets, header.l, header.d_in)
}

/// Save a dataset as JSON Lines (header line first).
pub fn save_dataset(dataset: &TrackletDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        schema: DATASET_SCHEMA.to_string(),
        l: dataset.tracklet_len(),
        d_in: dataset.feature_dim(),
    };
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::InvalidInput(e.to_string()))?;
    w.write_all(b"\n").map_err(io_err)?;
    for t in dataset.tracklets() {
        let rec = Record {
            tracklet_id: t.tracklet_id().to_string(),
            video_id: t.video_id().to_string(),
            position: t.position(),
            frames: t.frames().to_vec(),
            polyp_id: t.eval_polyp_id().map(str::to_string),
            attrs: t.eval_attrs().cloned(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::InvalidInput(e.to_string()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
