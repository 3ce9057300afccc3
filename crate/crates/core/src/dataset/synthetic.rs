//! Seeded synthetic datasets with clustered video features.

use super::features::{distort_features, retrieve_most_similar, FeatureStore};
use super::{AnswerOption, AvcSample, Counterpart, Dataset, IqpSample, YesNo};
use crate::error::{Error, Result};
use crate::metrics::PairKind;
use crate::model::{vocab, TokenId, VideoFeatures};
use crate::numerics::{norm, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub n_avc: usize,
    pub n_iqp: usize,
    pub n_videos: usize,
    pub n_options: usize,
    pub feature_dim: usize,
    pub frames_per_video: usize,
    /// Noise scale of distorted counterparts, relative to unit-norm frames.
    pub sigma: f64,
    /// Text tokens are drawn from `FIRST_FREE..vocab_size`.
    pub vocab_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_avc: 40,
            n_iqp: 40,
            n_videos: 20,
            n_options: 4,
            feature_dim: 16,
            frames_per_video: 4,
            sigma: 1.0,
            vocab_size: 64,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_avc + self.n_iqp == 0 {
            return bad("need at least one sample");
        }
        if self.n_videos < 2 {
            return bad("n_videos must be at least 2");
        }
        if !(2..=5).contains(&self.n_options) {
            return bad("n_options must be between 2 and 5");
        }
        if self.feature_dim == 0 || self.frames_per_video == 0 {
            return bad("feature_dim and frames_per_video must be positive");
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return bad("sigma must be > 0");
        }
        if self.vocab_size <= vocab::FIRST_FREE as usize {
            return bad("vocab_size leaves no free text tokens");
        }
        Ok(())
    }
}

fn below(rng: &mut SeededRng, n: usize) -> usize {
    (rng.next_f64() * n as f64) as usize % n
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Generates a dataset and its feature store, fully determined by `seed`.
///
/// Videos come in clusters of two around shared centres, so nearest-neighbour
/// retrieval finds semantically close partners. Even AVC samples pair with
/// the retrieved neighbour, odd ones with a Gaussian-distorted copy. IQP
/// follow-up answers are `ceil(n/2)` yes and `floor(n/2)` no, shuffled.
pub fn generate_synthetic_dataset(
    config: &SyntheticConfig,
    seed: u64,
) -> Result<(Dataset, FeatureStore)> {
    config.validate()?;
    let mut rng = SeededRng::new(seed);
    let dim = config.feature_dim;
    let n_clusters = (config.n_videos / 2).max(1);
    let centres: Vec<Vec<f64>> = (0..n_clusters)
        .map(|_| (0..dim).map(|_| rng.standard_normal()).collect())
        .collect();

    let mut store = FeatureStore::new(dim);
    let mut video_ids = Vec::with_capacity(config.n_videos);
    for i in 0..config.n_videos {
        let centre = &centres[i % n_clusters];
        let frames = (0..config.frames_per_video)
            .map(|_| {
                unit(
                    centre
                        .iter()
                        .map(|c| c + 0.3 * rng.standard_normal())
                        .collect(),
                )
            })
            .collect();
        let id = format!("vid{i:04}");
        store.insert(VideoFeatures::new(id.clone(), frames)?)?;
        video_ids.push(id);
    }
    let base = store.clone();

    let free = vocab::FIRST_FREE as usize;
    let span = config.vocab_size - free;
    let text = |rng: &mut SeededRng, lo: usize, hi: usize| -> Vec<TokenId> {
        let len = lo + below(rng, hi - lo + 1);
        (0..len)
            .map(|_| (free + below(rng, span)) as TokenId)
            .collect()
    };
    let options = |rng: &mut SeededRng| -> Vec<AnswerOption> {
        (0..config.n_options)
            .map(|i| AnswerOption {
                id: vocab::letter(i).expect("at most five options").to_string(),
                tokens: text(rng, 1, 2),
            })
            .collect()
    };

    let mut dataset = Dataset::default();
    for i in 0..config.n_avc {
        let video_id = video_ids[i % video_ids.len()].clone();
        let kind = if i % 2 == 0 {
            PairKind::Relevant
        } else {
            PairKind::Distorted
        };
        let counterpart = match kind {
            PairKind::Relevant => retrieve_most_similar(&base, &video_id)?,
            PairKind::Distorted => {
                let mut v = distort_features(base.get(&video_id)?, config.sigma, rng.next_u64())?;
                v.video_id = format!("{video_id}~dist{i:04}");
                let id = v.video_id.clone();
                store.insert(v)?;
                id
            }
        };
        let opts = options(&mut rng);
        let gold = below(&mut rng, opts.len());
        let other = (gold + 1 + below(&mut rng, opts.len() - 1)) % opts.len();
        dataset.avc.push(AvcSample {
            sample_id: format!("avc{i:05}"),
            video_id,
            question: text(&mut rng, 3, 6),
            gold: opts[gold].id.clone(),
            pair: Counterpart {
                video_id: counterpart,
                kind,
                gold: opts[other].id.clone(),
            },
            options: opts,
        });
    }

    let mut answers: Vec<YesNo> = (0..config.n_iqp)
        .map(|i| {
            if i < config.n_iqp.div_ceil(2) {
                YesNo::Yes
            } else {
                YesNo::No
            }
        })
        .collect();
    for i in (1..answers.len()).rev() {
        let j = below(&mut rng, i + 1);
        answers.swap(i, j);
    }
    for (i, followup_gold) in answers.into_iter().enumerate() {
        let opts = options(&mut rng);
        let gold = below(&mut rng, opts.len());
        dataset.iqp.push(IqpSample {
            sample_id: format!("iqp{i:05}"),
            video_id: video_ids[below(&mut rng, video_ids.len())].clone(),
            question: text(&mut rng, 3, 6),
            gold: opts[gold].id.clone(),
            options: opts,
            followup: text(&mut rng, 2, 4),
            followup_gold,
        });
    }
    dataset.validate()?;
    Ok((dataset, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(n_avc: usize, n_iqp: usize) -> SyntheticConfig {
        SyntheticConfig {
            n_avc,
            n_iqp,
            n_videos: 6,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn balanced_follow_ups() {
        for (n, yes) in [(100, 50), (101, 51), (1, 1)] {
            let (d, _) = generate_synthetic_dataset(&config(2, n), 3).unwrap();
            let got = d
                .iqp
                .iter()
                .filter(|s| s.followup_gold == YesNo::Yes)
                .count();
            assert_eq!(got, yes, "n = {n}");
            assert_eq!(d.iqp.len(), n);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, fa) = generate_synthetic_dataset(&config(10, 10), 11).unwrap();
        let (b, fb) = generate_synthetic_dataset(&config(10, 10), 11).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        assert_eq!(fa.to_bytes(), fb.to_bytes());
        let (c, _) = generate_synthetic_dataset(&config(10, 10), 12).unwrap();
        assert_ne!(a.to_jsonl().unwrap(), c.to_jsonl().unwrap());
    }

    #[test]
    fn pairs_are_valid() {
        let (d, store) = generate_synthetic_dataset(&config(12, 0), 5).unwrap();
        for s in &d.avc {
            assert_ne!(s.gold, s.pair.gold);
            assert_ne!(s.video_id, s.pair.video_id);
            assert!(store.get(&s.video_id).is_ok());
            assert!(store.get(&s.pair.video_id).is_ok());
        }
        assert!(d.avc.iter().any(|s| s.pair.kind == PairKind::Relevant));
        assert!(d.avc.iter().any(|s| s.pair.kind == PairKind::Distorted));
    }

    #[test]
    fn relevant_partner_shares_cluster() {
        let (d, _) = generate_synthetic_dataset(&config(6, 0), 21).unwrap();
        // vidN and vid(N+3) share a centre when n_videos = 6
        for s in d.avc.iter().filter(|s| s.pair.kind == PairKind::Relevant) {
            let a: usize = s.video_id[3..].parse().unwrap();
            let b: usize = s.pair.video_id[3..].parse().unwrap();
            assert_eq!(a % 3, b % 3, "{} -> {}", s.video_id, s.pair.video_id);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_synthetic_dataset(
            &SyntheticConfig {
                n_videos: 1,
                ..config(1, 1)
            },
            0
        )
        .is_err());
        assert!(generate_synthetic_dataset(
            &SyntheticConfig {
                n_options: 6,
                ..config(1, 1)
            },
            0
        )
        .is_err());
        assert!(generate_synthetic_dataset(&config(0, 0), 0).is_err());
    }
}
