//! Seeded decoder-only transformer standing in for a video LVLM.
//!
//! Input sequences are laid out as
//! `[query prefix][video tokens][text tokens][generated tokens]`; video tokens
//! are frame features passed through a bias-free linear projector. Blocks are
//! pre-norm with learned absolute positions and no dropout.

use std::io::Read;
use std::ops::Range;
use std::path::Path;

type VideoSpan = Option<Range<usize>>;

use crate::branches::amplify_attention_row;
use crate::error::{Error, Result};
use crate::numerics::{check_finite, norm, softmax, SeededRng};

pub type TokenId = u32;

/// Reserved token ids. Everything at or above [`vocab::FIRST_FREE`] is an
/// ordinary text token.
pub mod vocab {
    use super::TokenId;

    /// End of sequence. Also used as the start-of-prompt marker.
    pub const EOS: TokenId = 0;
    pub const YES: TokenId = 1;
    pub const NO: TokenId = 2;
    pub const OPTION_A: TokenId = 3;
    pub const FIRST_FREE: TokenId = 8;

    const LETTERS: [&str; 5] = ["A", "B", "C", "D", "E"];

    /// Maps an option label (`A`..`E`, `yes`, `no`) to its reserved token.
    pub fn option_token(label: &str) -> Option<TokenId> {
        match label {
            "yes" => Some(YES),
            "no" => Some(NO),
            _ => LETTERS
                .iter()
                .position(|l| *l == label)
                .map(|i| OPTION_A + i as TokenId),
        }
    }

    pub fn option_label(token: TokenId) -> Option<&'static str> {
        match token {
            YES => Some("yes"),
            NO => Some("no"),
            t if (OPTION_A..OPTION_A + 5).contains(&t) => Some(LETTERS[(t - OPTION_A) as usize]),
            _ => None,
        }
    }

    pub fn letter(index: usize) -> Option<&'static str> {
        LETTERS.get(index).copied()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const MODEL_MAGIC: &[u8; 4] = b"MCDM";
const MODEL_FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub video_feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 256,
            video_feature_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.vocab_size < vocab::FIRST_FREE as usize {
            return bad("vocab_size must be at least 8");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad("d_model, n_heads and n_layers must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model not divisible by n_heads");
        }
        if self.max_seq_len == 0 || self.video_feature_dim == 0 {
            return bad("max_seq_len and video_feature_dim must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Where the video span sits in the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputLayout {
    /// Query tokens before the video span.
    pub n_k: usize,
    /// Video tokens (one per frame).
    pub n_v: usize,
    /// Text tokens after the video span.
    pub text_len: usize,
}

impl InputLayout {
    pub fn text_only(len: usize) -> Self {
        Self {
            n_k: 0,
            n_v: 0,
            text_len: len,
        }
    }

    /// 0-based position range of the video span.
    pub fn video_span(&self) -> Range<usize> {
        self.n_k..self.n_k + self.n_v
    }

    pub fn prompt_len(&self) -> usize {
        self.n_k + self.n_v + self.text_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    pub frames: Vec<Vec<f64>>,
}

impl VideoFeatures {
    pub fn new(video_id: impl Into<String>, frames: Vec<Vec<f64>>) -> Result<Self> {
        let video = Self {
            video_id: video_id.into(),
            frames,
        };
        video.validate()?;
        Ok(video)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Error::Schema {
            sample_id: self.video_id.clone(),
            message: m,
        };
        let first = self
            .frames
            .first()
            .ok_or_else(|| invalid("video has no frames".into()))?;
        for (i, frame) in self.frames.iter().enumerate() {
            if frame.len() != first.len() {
                return Err(invalid(format!("frame {i} has inconsistent dimension")));
            }
            if check_finite(frame).is_err() || norm(frame) == 0.0 {
                return Err(invalid(format!("frame {i} is non-finite or zero")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Per-dimension mean over frames.
    pub fn mean_pooled(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        for frame in &self.frames {
            for (a, x) in acc.iter_mut().zip(frame) {
                *a += x;
            }
        }
        let n = self.frames.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Pre-softmax amplification of video-span attention scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionIntervention {
    pub alpha: f64,
    /// `None` means every layer.
    pub layers: Option<Vec<usize>>,
    /// `None` means every head.
    pub heads: Option<Vec<usize>>,
    /// Amplify every query row instead of only the current (last) one.
    pub all_rows: bool,
}

impl AttentionIntervention {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            layers: None,
            heads: None,
            all_rows: false,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if let Some(layers) = &self.layers {
            if let Some(l) = layers.iter().find(|l| **l >= config.n_layers) {
                return Err(Error::InvalidParams(format!("layer {l} out of range")));
            }
        }
        if let Some(heads) = &self.heads {
            if let Some(h) = heads.iter().find(|h| **h >= config.n_heads) {
                return Err(Error::InvalidParams(format!("head {h} out of range")));
            }
        }
        Ok(())
    }

    fn targets(&self, layer: usize, head: usize) -> bool {
        self.layers.as_ref().is_none_or(|ls| ls.contains(&layer))
            && self.heads.as_ref().is_none_or(|hs| hs.contains(&head))
    }
}

/// One attention row of the current (last) position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow {
    /// Scores as computed from queries and keys.
    pub raw_scores: Vec<f64>,
    /// Scores fed to the softmax, after any intervention.
    pub scores: Vec<f64>,
    /// Post-softmax weights.
    pub weights: Vec<f64>,
}

impl AttentionRow {
    pub fn mass(&self, span: Range<usize>) -> f64 {
        self.weights[span].iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub last_position_logits: Vec<f64>,
    /// Indexed `[layer][head]`.
    pub attention_rows: Vec<Vec<AttentionRow>>,
    pub video_span: Option<Range<usize>>,
    pub seq_len: usize,
}

impl ForwardTrace {
    /// Video-span attention mass of the last row in `(layer, head)`.
    pub fn video_mass(&self, layer: usize, head: usize) -> f64 {
        self.video_span
            .clone()
            .map_or(0.0, |span| self.attention_rows[layer][head].mass(span))
    }
}

/// Row-major matrix; `x · M` maps `rows` inputs to `cols` outputs.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn random(rows: usize, cols: usize, std_dev: f64, rng: &mut SeededRng) -> Self {
        Self {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| rng.gaussian(0.0, std_dev))
                .collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, xv) in x.iter().enumerate() {
            if *xv == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += xv * w;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerWeights {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w_up: Matrix,
    pub b_up: Vec<f64>,
    pub w_down: Matrix,
    pub b_down: Vec<f64>,
}

impl LayerWeights {
    fn zeros(d: usize) -> Self {
        let hidden = 4 * d;
        Self {
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            w_up: Matrix::zeros(d, hidden),
            b_up: vec![0.0; hidden],
            w_down: Matrix::zeros(hidden, d),
            b_down: vec![0.0; d],
        }
    }
}

/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    pub(crate) token_embedding: Matrix,
    pub(crate) position_embedding: Matrix,
    pub(crate) video_projection: Matrix,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) final_gain: Vec<f64>,
    pub(crate) final_bias: Vec<f64>,
    pub(crate) lm_head: Matrix,
}

impl ToyModel {
    /// Random-initialized weights drawn from a ChaCha8 stream seeded with
    /// `seed`, in a fixed order.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let hidden = 4 * d;
        let mut rng = SeededRng::new(seed);
        let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();

        let token_embedding = Matrix::random(config.vocab_size, d, 1.0, &mut rng);
        let position_embedding = Matrix::random(config.max_seq_len, d, 0.5, &mut rng);
        let video_projection = Matrix::random(
            config.video_feature_dim,
            d,
            inv_sqrt(config.video_feature_dim).max(0.25),
            &mut rng,
        );
        let layers = (0..config.n_layers)
            .map(|_| {
                let mut layer = LayerWeights::zeros(d);
                layer.wq = Matrix::random(d, d, inv_sqrt(d), &mut rng);
                layer.wk = Matrix::random(d, d, inv_sqrt(d), &mut rng);
                layer.wv = Matrix::random(d, d, inv_sqrt(d), &mut rng);
                layer.wo = Matrix::random(d, d, inv_sqrt(d), &mut rng);
                layer.w_up = Matrix::random(d, hidden, inv_sqrt(d), &mut rng);
                layer.w_down = Matrix::random(hidden, d, inv_sqrt(hidden), &mut rng);
                layer
            })
            .collect();
        let lm_head = Matrix::random(d, config.vocab_size, inv_sqrt(d) * 2.0, &mut rng);

        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            video_projection,
            layers,
            final_gain: vec![1.0; d],
            final_bias: vec![0.0; d],
            lm_head,
        })
    }

    /// All-zero projections with unit layer-norm gains; the starting point
    /// for hand-set models.
    pub(crate) fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            config,
            token_embedding: Matrix::zeros(config.vocab_size, d),
            position_embedding: Matrix::zeros(config.max_seq_len, d),
            video_projection: Matrix::zeros(config.video_feature_dim, d),
            layers: (0..config.n_layers)
                .map(|_| LayerWeights::zeros(d))
                .collect(),
            final_gain: vec![1.0; d],
            final_bias: vec![0.0; d],
            lm_head: Matrix::zeros(d, config.vocab_size),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Maps each frame through the bias-free linear projector.
    pub fn project_video(&self, features: &VideoFeatures) -> Result<Vec<Vec<f64>>> {
        features
            .frames
            .iter()
            .map(|frame| {
                if frame.len() != self.config.video_feature_dim {
                    return Err(Error::FeatureDim {
                        expected: self.config.video_feature_dim,
                        got: frame.len(),
                    });
                }
                check_finite(frame)?;
                Ok(self.video_projection.left_mul(frame))
            })
            .collect()
    }

    /// Runs the full sequence and returns last-position logits plus the
    /// last row of every attention head.
    pub fn forward(
        &self,
        layout: &InputLayout,
        video: Option<&VideoFeatures>,
        text_tokens: &[TokenId],
        generated: &[TokenId],
        intervention: Option<&AttentionIntervention>,
    ) -> Result<ForwardTrace> {
        let (embeddings, span) = self.embed(layout, video, text_tokens, generated, intervention)?;
        let pass = self.run(embeddings, span.clone(), intervention, false);
        Ok(ForwardTrace {
            last_position_logits: pass.logits.into_iter().next_back().unwrap_or_default(),
            attention_rows: pass.last_rows,
            seq_len: pass.seq_len,
            video_span: span,
        })
    }

    /// Logits at every position; used to check causality.
    pub fn forward_all_positions(
        &self,
        layout: &InputLayout,
        video: Option<&VideoFeatures>,
        text_tokens: &[TokenId],
        generated: &[TokenId],
        intervention: Option<&AttentionIntervention>,
    ) -> Result<Vec<Vec<f64>>> {
        let (embeddings, span) = self.embed(layout, video, text_tokens, generated, intervention)?;
        Ok(self.run(embeddings, span, intervention, true).logits)
    }

    fn embed(
        &self,
        layout: &InputLayout,
        video: Option<&VideoFeatures>,
        text_tokens: &[TokenId],
        generated: &[TokenId],
        intervention: Option<&AttentionIntervention>,
    ) -> Result<(Vec<Vec<f64>>, VideoSpan)> {
        if text_tokens.len() != layout.n_k + layout.text_len {
            return Err(Error::InvalidLayout(format!(
                "layout expects {} text tokens, got {}",
                layout.n_k + layout.text_len,
                text_tokens.len()
            )));
        }
        let video_embeddings = match video {
            Some(v) => {
                if v.n_frames() != layout.n_v {
                    return Err(Error::InvalidLayout(format!(
                        "layout has n_v = {} but video has {} frames",
                        layout.n_v,
                        v.n_frames()
                    )));
                }
                self.project_video(v)?
            }
            None if layout.n_v != 0 => {
                return Err(Error::InvalidLayout("n_v > 0 without a video".into()))
            }
            None => Vec::new(),
        };
        if let Some(iv) = intervention {
            iv.validate(&self.config)?;
            if layout.n_v == 0 {
                return Err(Error::NoVideoSpan);
            }
        }
        let len = layout.prompt_len() + generated.len();
        if len > self.config.max_seq_len {
            return Err(Error::SequenceOverflow {
                len,
                max: self.config.max_seq_len,
            });
        }
        if len == 0 {
            return Err(Error::InvalidLayout("empty sequence".into()));
        }

        let token_row = |t: TokenId| -> Result<Vec<f64>> {
            if (t as usize) >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
            Ok(self.token_embedding.row(t as usize).to_vec())
        };
        let mut seq = Vec::with_capacity(len);
        for t in &text_tokens[..layout.n_k] {
            seq.push(token_row(*t)?);
        }
        seq.extend(video_embeddings);
        for t in text_tokens[layout.n_k..].iter().chain(generated) {
            seq.push(token_row(*t)?);
        }
        for (pos, x) in seq.iter_mut().enumerate() {
            for (a, p) in x.iter_mut().zip(self.position_embedding.row(pos)) {
                *a += p;
            }
        }
        let span = (layout.n_v > 0).then(|| layout.video_span());
        Ok((seq, span))
    }

    fn run(
        &self,
        mut x: Vec<Vec<f64>>,
        span: Option<Range<usize>>,
        intervention: Option<&AttentionIntervention>,
        all_logits: bool,
    ) -> Pass {
        let cfg = &self.config;
        let n = x.len();
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut last_rows = Vec::with_capacity(cfg.n_layers);

        for (li, layer) in self.layers.iter().enumerate() {
            let normed: Vec<Vec<f64>> = x
                .iter()
                .map(|v| layer_norm(v, &layer.ln1_gain, &layer.ln1_bias))
                .collect();
            let q: Vec<Vec<f64>> = normed.iter().map(|h| layer.wq.left_mul(h)).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|h| layer.wk.left_mul(h)).collect();
            let v: Vec<Vec<f64>> = normed.iter().map(|h| layer.wv.left_mul(h)).collect();

            let mut heads_out = vec![vec![0.0; cfg.d_model]; n];
            let mut layer_rows = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let cols = head * hd..(head + 1) * hd;
                let amplify = intervention.filter(|iv| iv.targets(li, head));
                for t in 0..n {
                    let raw: Vec<f64> = (0..=t)
                        .map(|j| scale * dot_slice(&q[t][cols.clone()], &k[j][cols.clone()]))
                        .collect();
                    let mut scores = raw.clone();
                    if let (Some(iv), Some(span)) = (amplify, span.as_ref()) {
                        let current = t == n - 1;
                        if (current || iv.all_rows) && span.start <= t {
                            let end = span.end.min(t + 1);
                            scores = amplify_attention_row(
                                &scores,
                                span.start,
                                end - span.start,
                                iv.alpha,
                            )
                            .expect("span clipped to row");
                        }
                    }
                    let weights = softmax(&scores)
                        .expect("finite attention scores")
                        .into_inner();
                    for (j, w) in weights.iter().enumerate() {
                        for (o, val) in heads_out[t][cols.clone()]
                            .iter_mut()
                            .zip(&v[j][cols.clone()])
                        {
                            *o += w * val;
                        }
                    }
                    if t == n - 1 {
                        layer_rows.push(AttentionRow {
                            raw_scores: raw,
                            scores,
                            weights,
                        });
                    }
                }
            }
            last_rows.push(layer_rows);

            for (xt, ht) in x.iter_mut().zip(&heads_out) {
                for (a, b) in xt.iter_mut().zip(layer.wo.left_mul(ht)) {
                    *a += b;
                }
            }
            for xt in x.iter_mut() {
                let h = layer_norm(xt, &layer.ln2_gain, &layer.ln2_bias);
                let mut up = layer.w_up.left_mul(&h);
                for (u, b) in up.iter_mut().zip(&layer.b_up) {
                    *u = gelu(*u + b);
                }
                let down = layer.w_down.left_mul(&up);
                for ((a, d), b) in xt.iter_mut().zip(down).zip(&layer.b_down) {
                    *a += d + b;
                }
            }
        }

        let positions: Vec<usize> = if all_logits {
            (0..n).collect()
        } else {
            vec![n - 1]
        };
        let logits = positions
            .into_iter()
            .map(|t| {
                let h = layer_norm(&x[t], &self.final_gain, &self.final_bias);
                self.lm_head.left_mul(&h)
            })
            .collect();
        Pass {
            logits,
            last_rows,
            seq_len: n,
        }
    }

    /// Serializes to the `MCDM` binary format: magic, version byte, six
    /// little-endian `u64` config fields, then every weight array row-major
    /// as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.push(MODEL_FORMAT_VERSION);
        for field in [
            c.vocab_size,
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.max_seq_len,
            c.video_feature_dim,
        ] {
            out.extend_from_slice(&(field as u64).to_le_bytes());
        }
        for array in self.arrays() {
            for v in array {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Format {
            path: "<model>".into(),
            message: m.to_string(),
        };
        let mut cursor = bytes;
        let mut magic = [0u8; 5];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| fail("truncated header"))?;
        if &magic[..4] != MODEL_MAGIC {
            return Err(fail("bad magic, expected MCDM"));
        }
        if magic[4] != MODEL_FORMAT_VERSION {
            return Err(fail("unsupported format version"));
        }
        let mut fields = [0usize; 6];
        for f in fields.iter_mut() {
            let mut buf = [0u8; 8];
            cursor
                .read_exact(&mut buf)
                .map_err(|_| fail("truncated config block"))?;
            *f = usize::try_from(u64::from_le_bytes(buf))
                .map_err(|_| fail("config field overflow"))?;
        }
        let config = ModelConfig {
            vocab_size: fields[0],
            d_model: fields[1],
            n_layers: fields[2],
            n_heads: fields[3],
            max_seq_len: fields[4],
            video_feature_dim: fields[5],
        };
        config.validate()?;
        let mut model = Self::zeroed(config)?;
        let expected: usize = model.arrays().iter().map(|a| a.len()).sum();
        if cursor.len() != expected * 8 {
            return Err(fail("weight block length does not match config"));
        }
        let mut values = cursor
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for array in model.arrays_mut() {
            for slot in array.iter_mut() {
                *slot = values.next().expect("length checked");
            }
        }
        Ok(model)
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

    fn arrays(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            &self.token_embedding.data,
            &self.position_embedding.data,
            &self.video_projection.data,
        ];
        for l in &self.layers {
            out.extend([
                &l.ln1_gain[..],
                &l.ln1_bias,
                &l.wq.data,
                &l.wk.data,
                &l.wv.data,
                &l.wo.data,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.w_up.data,
                &l.b_up,
                &l.w_down.data,
                &l.b_down,
            ]);
        }
        out.extend([&self.final_gain[..], &self.final_bias, &self.lm_head.data]);
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![
            &mut self.token_embedding.data,
            &mut self.position_embedding.data,
            &mut self.video_projection.data,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.wq.data,
                &mut l.wk.data,
                &mut l.wv.data,
                &mut l.wo.data,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w_up.data,
                &mut l.b_up,
                &mut l.w_down.data,
                &mut l.b_down,
            ]);
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.lm_head.data,
        ]);
        out
    }
}

struct Pass {
    logits: Vec<Vec<f64>>,
    last_rows: Vec<Vec<AttentionRow>>,
    seq_len: usize,
}

fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter()
        .zip(gain)
        .zip(bias)
        .map(|((v, g), b)| (v - mean) * inv * g + b)
        .collect()
}

/// Layer norm with unit gain and zero bias.
pub(crate) fn layer_norm_unit(x: &[f64]) -> Vec<f64> {
    let ones = vec![1.0; x.len()];
    let zeros = vec![0.0; x.len()];
    layer_norm(x, &ones, &zeros)
}

// tanh approximation
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}
