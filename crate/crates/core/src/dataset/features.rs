//! Precomputed video features: the `MCDF` binary store, nearest-neighbour
//! retrieval and Gaussian distortion.
//!
//! File layout, all integers little-endian:
//! `"MCDF"`, version `u8`, dimension `u64`, video count `u64`, then per video
//! in ascending id order: id length `u32`, UTF-8 id bytes, frame count `u64`,
//! frames row-major as `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PairKind;
use crate::model::VideoFeatures;
use crate::numerics::{cosine_similarity, SeededRng};

const FEATURE_MAGIC: &[u8; 4] = b"MCDF";
const FEATURE_FORMAT_VERSION: u8 = 1;

/// Immutable map from video id to features, all of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    videos: BTreeMap<String, VideoFeatures>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            videos: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, video: VideoFeatures) -> Result<()> {
        video.validate()?;
        if video.dim() != self.dim {
            return Err(Error::FeatureDim {
                expected: self.dim,
                got: video.dim(),
            });
        }
        self.videos.insert(video.video_id.clone(), video);
        Ok(())
    }

    pub fn get(&self, video_id: &str) -> Result<&VideoFeatures> {
        self.videos
            .get(video_id)
            .ok_or_else(|| Error::UnknownVideo(video_id.to_string()))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.videos.keys().map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FEATURE_MAGIC);
        out.push(FEATURE_FORMAT_VERSION);
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.videos.len() as u64).to_le_bytes());
        for (id, video) in &self.videos {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(video.frames.len() as u64).to_le_bytes());
            for v in video.frames.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != FEATURE_MAGIC {
            return Err(r.fail("bad magic, expected MCDF"));
        }
        if r.take(1)?[0] != FEATURE_FORMAT_VERSION {
            return Err(r.fail("unsupported format version"));
        }
        let dim = r.u64()? as usize;
        let count = r.u64()?;
        let mut store = Self::new(dim);
        for _ in 0..count {
            let id_len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
            let raw = r.take(id_len)?.to_vec();
            let id = String::from_utf8(raw).map_err(|_| r.fail("video id is not UTF-8"))?;
            let n_frames = r.u64()? as usize;
            let mut frames = Vec::with_capacity(n_frames.min(1 << 16));
            for _ in 0..n_frames {
                frames.push((0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
            }
            store.insert(VideoFeatures {
                video_id: id,
                frames,
            })?;
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { message, .. } => Error::Format {
                path: path.into(),
                message,
            },
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, message: &str) -> Error {
        Error::Format {
            path: "<features>".into(),
            message: format!("{message} (offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| self.fail("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// The other video with the highest cosine similarity between mean-pooled
/// features. Ties go to the lexicographically smaller id.
pub fn retrieve_most_similar(store: &FeatureStore, query_id: &str) -> Result<String> {
    if store.len() < 2 {
        return Err(Error::StoreTooSmall(store.len()));
    }
    let query = store.get(query_id)?.mean_pooled();
    let mut best: Option<(&str, f64)> = None;
    for (id, video) in &store.videos {
        if id == query_id {
            continue;
        }
        let sim = cosine_similarity(&query, &video.mean_pooled())?;
        if best.is_none_or(|(_, b)| sim > b) {
            best = Some((id, sim));
        }
    }
    Ok(best.expect("store has another video").0.to_string())
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every entry, drawn from a ChaCha8
/// stream seeded with `seed` in frame-major order. Keeps the video id.
pub fn distort_features(features: &VideoFeatures, sigma: f64, seed: u64) -> Result<VideoFeatures> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidParams(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let frames = features
        .frames
        .iter()
        .map(|frame| frame.iter().map(|x| x + rng.gaussian(0.0, sigma)).collect())
        .collect();
    Ok(VideoFeatures {
        video_id: features.video_id.clone(),
        frames,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedVideo {
    pub original: String,
    pub counterpart: String,
    pub kind: PairKind,
}

/// For every video: its nearest neighbour (relevant) and a noised copy
/// stored as `<id>~dist` (distorted). Returns the pairs and the enlarged
/// store.
pub fn build_avc_pairs(
    store: &FeatureStore,
    sigma: f64,
    seed: u64,
) -> Result<(Vec<PairedVideo>, FeatureStore)> {
    let mut out = store.clone();
    let mut pairs = Vec::new();
    for (i, id) in store.ids().enumerate() {
        pairs.push(PairedVideo {
            original: id.to_string(),
            counterpart: retrieve_most_similar(store, id)?,
            kind: PairKind::Relevant,
        });
        let mut distorted = distort_features(store.get(id)?, sigma, seed.wrapping_add(i as u64))?;
        distorted.video_id = format!("{id}~dist");
        pairs.push(PairedVideo {
            original: id.to_string(),
            counterpart: distorted.video_id.clone(),
            kind: PairKind::Distorted,
        });
        out.insert(distorted)?;
    }
    Ok((pairs, out))
}
