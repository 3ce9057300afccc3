//! The three per-step distributions contrasted by MCD: amateur (text only),
//! weak expert (plain multimodal pass) and strong expert (multimodal pass
//! with amplified video attention). All share one weight set.

use crate::error::{Error, Result};
use crate::model::{AttentionIntervention, InputLayout, TokenId, ToyModel, VideoFeatures};
use crate::numerics::{softmax, ProbabilityDistribution};

/// `out[i] = row[i] + alpha * |row[i]|` on the span, unchanged elsewhere.
pub fn amplify_attention_row(
    row: &[f64],
    span_start: usize,
    span_len: usize,
    alpha: f64,
) -> Result<Vec<f64>> {
    let end = span_start
        .checked_add(span_len)
        .filter(|end| *end <= row.len())
        .ok_or(Error::SpanOutOfBounds {
            start: span_start,
            end: span_start.saturating_add(span_len),
            len: row.len(),
        })?;
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidParams(format!(
            "alpha must be >= 0, got {alpha}"
        )));
    }
    let mut out = row.to_vec();
    for v in &mut out[span_start..end] {
        *v += alpha * v.abs();
    }
    Ok(out)
}

/// A multimodal prompt: text tokens split around the video span by `layout`.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub layout: InputLayout,
    pub video: &'a VideoFeatures,
    pub text_tokens: &'a [TokenId],
}

impl<'a> Query<'a> {
    /// Builds a query with `n_k` leading text tokens before the video.
    pub fn new(video: &'a VideoFeatures, text_tokens: &'a [TokenId], n_k: usize) -> Result<Self> {
        if n_k > text_tokens.len() {
            return Err(Error::InvalidLayout(format!(
                "n_k = {n_k} exceeds {} text tokens",
                text_tokens.len()
            )));
        }
        Ok(Self {
            layout: InputLayout {
                n_k,
                n_v: video.n_frames(),
                text_len: text_tokens.len() - n_k,
            },
            video,
            text_tokens,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub p_amateur: ProbabilityDistribution,
    pub p_weak: ProbabilityDistribution,
    pub p_strong: ProbabilityDistribution,
}

/// The video span is removed from the sequence, not masked; text positions
/// are renumbered contiguously.
pub fn amateur_distribution(
    model: &ToyModel,
    text_tokens: &[TokenId],
    generated: &[TokenId],
) -> Result<ProbabilityDistribution> {
    let layout = InputLayout::text_only(text_tokens.len());
    let trace = model.forward(&layout, None, text_tokens, generated, None)?;
    softmax(&trace.last_position_logits)
}

pub fn weak_expert_distribution(
    model: &ToyModel,
    query: &Query<'_>,
    generated: &[TokenId],
) -> Result<ProbabilityDistribution> {
    let trace = model.forward(
        &query.layout,
        Some(query.video),
        query.text_tokens,
        generated,
        None,
    )?;
    softmax(&trace.last_position_logits)
}

pub fn strong_expert_distribution(
    model: &ToyModel,
    query: &Query<'_>,
    generated: &[TokenId],
    intervention: &AttentionIntervention,
) -> Result<ProbabilityDistribution> {
    let trace = model.forward(
        &query.layout,
        Some(query.video),
        query.text_tokens,
        generated,
        Some(intervention),
    )?;
    softmax(&trace.last_position_logits)
}

pub fn compute_branches(
    model: &ToyModel,
    query: &Query<'_>,
    generated: &[TokenId],
    intervention: &AttentionIntervention,
) -> Result<BranchOutputs> {
    Ok(BranchOutputs {
        p_amateur: amateur_distribution(model, query.text_tokens, generated)?,
        p_weak: weak_expert_distribution(model, query, generated)?,
        p_strong: strong_expert_distribution(model, query, generated, intervention)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn amplify_examples() {
        assert_eq!(
            amplify_attention_row(&[2.0, -1.0, 0.5], 1, 1, 0.5).unwrap(),
            vec![2.0, -0.5, 0.5]
        );
        let row = [0.3, -2.0, 7.0];
        assert_eq!(
            amplify_attention_row(&row, 0, 3, 0.0).unwrap(),
            row.to_vec()
        );
        assert_eq!(
            amplify_attention_row(&[0.0, 0.0], 0, 2, 3.0).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn amplify_rejects_bad_span() {
        assert!(matches!(
            amplify_attention_row(&[1.0, 2.0], 1, 2, 1.0),
            Err(Error::SpanOutOfBounds { .. })
        ));
        assert!(amplify_attention_row(&[1.0], usize::MAX, 2, 1.0).is_err());
        assert!(amplify_attention_row(&[1.0], 0, 1, -0.5).is_err());
    }

    fn random_video(seed: u64, frames: usize) -> VideoFeatures {
        let mut rng = SeededRng::new(seed);
        VideoFeatures::new(
            format!("v{seed}"),
            (0..frames)
                .map(|_| (0..16).map(|_| rng.standard_normal()).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn amateur_ignores_video() {
        let model = ToyModel::build(ModelConfig::default(), 3).unwrap();
        let text = [0, 10, 11, 12];
        let a = amateur_distribution(&model, &text, &[]).unwrap();
        let b = amateur_distribution(&model, &text, &[]).unwrap();
        assert_eq!(a, b);
        // two different videos, identical amateur branch
        let v1 = random_video(1, 3);
        let v2 = random_video(2, 5);
        let iv = AttentionIntervention::new(0.5);
        let b1 = compute_branches(&model, &Query::new(&v1, &text, 1).unwrap(), &[], &iv).unwrap();
        let b2 = compute_branches(&model, &Query::new(&v2, &text, 1).unwrap(), &[], &iv).unwrap();
        assert_eq!(b1.p_amateur, b2.p_amateur);
        assert_eq!(b1.p_amateur, a);
    }

    #[test]
    fn weak_differs_from_amateur() {
        let model = ToyModel::build(ModelConfig::default(), 3).unwrap();
        let text = [0, 10, 11, 12];
        let v = random_video(1, 3);
        let q = Query::new(&v, &text, 1).unwrap();
        let weak = weak_expert_distribution(&model, &q, &[]).unwrap();
        let amateur = amateur_distribution(&model, &text, &[]).unwrap();
        assert_ne!(weak, amateur);
    }

    #[test]
    fn strong_zero_alpha_equals_weak() {
        let model = ToyModel::build(ModelConfig::default(), 5).unwrap();
        let text = [0, 10, 11, 12, 13];
        let v = random_video(4, 4);
        let q = Query::new(&v, &text, 1).unwrap();
        let weak = weak_expert_distribution(&model, &q, &[14]).unwrap();
        let strong =
            strong_expert_distribution(&model, &q, &[14], &AttentionIntervention::new(0.0))
                .unwrap();
        for (a, b) in weak.probs().iter().zip(strong.probs()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn strong_raises_video_mass_somewhere() {
        let model = ToyModel::build(ModelConfig::default(), 5).unwrap();
        let text = [0, 10, 11, 12, 13];
        let v = random_video(4, 4);
        let q = Query::new(&v, &text, 1).unwrap();
        let iv = AttentionIntervention::new(0.5);
        let plain = model
            .forward(&q.layout, Some(&v), &text, &[], None)
            .unwrap();
        let amp = model
            .forward(&q.layout, Some(&v), &text, &[], Some(&iv))
            .unwrap();
        let mut strictly = false;
        for l in 0..2 {
            for h in 0..4 {
                let (a, b) = (plain.video_mass(l, h), amp.video_mass(l, h));
                assert!(b >= a - 1e-15);
                strictly |= b > a;
            }
        }
        assert!(strictly);
    }

    #[test]
    fn strong_requires_video_span() {
        let model = ToyModel::build(ModelConfig::default(), 5).unwrap();
        let v = random_video(4, 2);
        let text = [0, 10];
        let mut q = Query::new(&v, &text, 1).unwrap();
        q.layout.n_v = 0;
        assert!(
            strong_expert_distribution(&model, &q, &[], &AttentionIntervention::new(1.0)).is_err()
        );
    }

    proptest! {
        #[test]
        fn amplified_span_dominates(
            row in prop::collection::vec(-10.0f64..10.0, 1..40),
            start_frac in 0.0f64..1.0,
            len_frac in 0.0f64..1.0,
            alpha in 0.0f64..5.0,
        ) {
            let start = ((row.len() - 1) as f64 * start_frac) as usize;
            let len = ((row.len() - start) as f64 * len_frac) as usize;
            let out = amplify_attention_row(&row, start, len, alpha).unwrap();
            for (i, (o, r)) in out.iter().zip(&row).enumerate() {
                if (start..start + len).contains(&i) {
                    prop_assert!(o >= r);
                } else {
                    prop_assert_eq!(o, r);
                }
            }
        }

        #[test]
        fn video_mass_monotone_in_alpha(
            row in prop::collection::vec(-6.0f64..6.0, 2..40),
            start_frac in 0.0f64..1.0,
        ) {
            let start = ((row.len() - 1) as f64 * start_frac) as usize;
            let len = (row.len() - start).min(8);
            let mut prev = f64::NEG_INFINITY;
            for alpha in [0.0, 0.25, 0.5, 1.0, 2.0] {
                let w = softmax(&amplify_attention_row(&row, start, len, alpha).unwrap()).unwrap();
                let mass: f64 = w.probs()[start..start + len].iter().sum();
                prop_assert!(mass >= prev - 1e-12);
                prev = mass;
            }
        }
    }
}
