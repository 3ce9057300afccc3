//! A hand-built model and dataset where the text prior wins under plain
//! decoding but the video wins under MCD.
//!
//! The model is zero everywhere except:
//! * two cue tokens whose embeddings carry a prior (option `A` for
//!   multiple-choice prompts, `yes` for follow-ups) and a query marker;
//! * a video projector that writes the grounded option, the grounded yes/no
//!   answer and a key marker into separate residual directions;
//! * head 0 of layer 0, where the cue attends to video tokens with a fixed
//!   positive score and copies their content into the residual;
//! * an output head reading prior and content directions.
//!
//! Every residual direction is a `(+1, -1)` dimension pair so layer norm
//! leaves directions intact. The last position's residual is
//! `prior + m * content`, where `m` is the attention mass on the video span,
//! so raising `m` by amplification moves the argmax toward the video.

use serde::Serialize;

use super::features::{distort_features, FeatureStore};
use super::{
    ask, choice_prompt, option_tokens, yes_no_options, AnswerOption, AvcSample, Counterpart,
    Dataset, IqpSample, YesNo, PROMPT_PREFIX,
};
use crate::branches::{compute_branches, Query};
use crate::decoding::{
    answer_multiple_choice, mcd_combine, ChoiceQuestion, DecodeParams, Strategy,
};
use crate::error::{Error, Result};
use crate::metrics::PairKind;
use crate::model::{layer_norm_unit, vocab, ModelConfig, TokenId, ToyModel, VideoFeatures};

/// Cue closing every multiple-choice question; its prior favours `A`.
pub const CHOICE_CUE: TokenId = 8;
/// Cue closing every follow-up question; its prior favours `yes`.
pub const FOLLOWUP_CUE: TokenId = 9;
const FILLER: [TokenId; 2] = [10, 11];
const OPTION_CONTENT: [TokenId; 4] = [12, 13, 14, 15];

pub const BIASED_OPTION: &str = "A";

// residual slots; slot k occupies dims 2k (+) and 2k + 1 (-)
const SLOT_PRIOR_CHOICE: usize = 0;
const SLOT_PRIOR_FOLLOWUP: usize = 1;
const SLOT_OPTION_A: usize = 2;
const SLOT_YES: usize = 7;
const SLOT_NO: usize = 8;
const SLOT_VIDEO_KEY: usize = 9;
const SLOT_QUERY: usize = 10;

// feature layout: 0..5 option one-hot, 5 yes, 6 no, 7 marker
const FEATURE_YES: usize = 5;
const FEATURE_NO: usize = 6;
const FEATURE_MARKER: usize = 7;

const PRIOR_AMPLITUDE: f64 = 1.0;
const QUERY_AMPLITUDE: f64 = 1.0;
const CONTENT_AMPLITUDE: f64 = 1.0;
const MARKER_AMPLITUDE: f64 = 1.0;
/// Pre-softmax score of the cue against each video token.
const VIDEO_SCORE: f64 = 1.0;
/// Output gain of the prior directions.
const PRIOR_GAIN: f64 = 2.5;
/// Output gain of the video content directions.
const CONTENT_GAIN: f64 = 4.0;

/// Scenario decoding parameters: paper defaults for gamma and beta,
/// repo-chosen lambda and alpha.
pub fn scenario_params() -> DecodeParams {
    let mut p = DecodeParams::with_strategy(Strategy::Mcd);
    p.lambda = 0.5;
    p.intervention.alpha = 2.0;
    p
}

fn set_pair(model_rows: &mut crate::model::Matrix, row: usize, slot: usize, value: f64) {
    model_rows.set(row, 2 * slot, value);
    model_rows.set(row, 2 * slot + 1, -value);
}

fn scenario_model() -> Result<ToyModel> {
    let config = ModelConfig::default();
    let d = config.d_model;
    let mut m = ToyModel::zeroed(config)?;

    set_pair(
        &mut m.token_embedding,
        CHOICE_CUE as usize,
        SLOT_PRIOR_CHOICE,
        PRIOR_AMPLITUDE,
    );
    set_pair(
        &mut m.token_embedding,
        CHOICE_CUE as usize,
        SLOT_QUERY,
        QUERY_AMPLITUDE,
    );
    set_pair(
        &mut m.token_embedding,
        FOLLOWUP_CUE as usize,
        SLOT_PRIOR_FOLLOWUP,
        PRIOR_AMPLITUDE,
    );
    set_pair(
        &mut m.token_embedding,
        FOLLOWUP_CUE as usize,
        SLOT_QUERY,
        QUERY_AMPLITUDE,
    );

    for option in 0..5 {
        set_pair(
            &mut m.video_projection,
            option,
            SLOT_OPTION_A + option,
            CONTENT_AMPLITUDE,
        );
    }
    set_pair(
        &mut m.video_projection,
        FEATURE_YES,
        SLOT_YES,
        CONTENT_AMPLITUDE,
    );
    set_pair(
        &mut m.video_projection,
        FEATURE_NO,
        SLOT_NO,
        CONTENT_AMPLITUDE,
    );
    set_pair(
        &mut m.video_projection,
        FEATURE_MARKER,
        SLOT_VIDEO_KEY,
        MARKER_AMPLITUDE,
    );

    // normalized magnitudes seen by layer 0
    let mut cue = vec![0.0; d];
    cue[2 * SLOT_PRIOR_CHOICE] = PRIOR_AMPLITUDE;
    cue[2 * SLOT_PRIOR_CHOICE + 1] = -PRIOR_AMPLITUDE;
    cue[2 * SLOT_QUERY] = QUERY_AMPLITUDE;
    cue[2 * SLOT_QUERY + 1] = -QUERY_AMPLITUDE;
    let cue_query = layer_norm_unit(&cue)[2 * SLOT_QUERY];
    let mut frame = vec![0.0; d];
    for (slot, amp) in [
        (SLOT_OPTION_A, CONTENT_AMPLITUDE),
        (SLOT_YES, CONTENT_AMPLITUDE),
        (SLOT_VIDEO_KEY, MARKER_AMPLITUDE),
    ] {
        frame[2 * slot] = amp;
        frame[2 * slot + 1] = -amp;
    }
    let normed = layer_norm_unit(&frame);
    let frame_key = normed[2 * SLOT_VIDEO_KEY];
    let frame_content = normed[2 * SLOT_OPTION_A];

    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    let layer = &mut m.layers[0];
    layer.wq.set(2 * SLOT_QUERY, 0, 1.0);
    layer.wk.set(
        2 * SLOT_VIDEO_KEY,
        0,
        VIDEO_SCORE / (scale * cue_query * frame_key),
    );
    // head 0 value columns 0..7 carry the seven content slots
    for j in 0..7 {
        let slot = SLOT_OPTION_A + j;
        layer.wv.set(2 * slot, j, 1.0);
        set_pair(&mut layer.wo, j, slot, 1.0 / frame_content);
    }

    let mut head = |slot: usize, token: TokenId, gain: f64| {
        m.lm_head.set(2 * slot, token as usize, gain / 2.0);
        m.lm_head.set(2 * slot + 1, token as usize, -gain / 2.0);
    };
    head(SLOT_PRIOR_CHOICE, vocab::OPTION_A, PRIOR_GAIN);
    head(SLOT_PRIOR_FOLLOWUP, vocab::YES, PRIOR_GAIN);
    for option in 0..5 {
        head(
            SLOT_OPTION_A + option,
            vocab::OPTION_A + option as TokenId,
            CONTENT_GAIN,
        );
    }
    head(SLOT_YES, vocab::YES, CONTENT_GAIN);
    head(SLOT_NO, vocab::NO, CONTENT_GAIN);
    Ok(m)
}

const FRAMES: usize = 4;

fn grounded_video(id: &str, option: &str, answer: YesNo) -> Result<VideoFeatures> {
    let mut f = vec![0.0; ModelConfig::default().video_feature_dim];
    let index = (vocab::option_token(option).expect("letter option") - vocab::OPTION_A) as usize;
    f[index] = 1.0;
    f[match answer {
        YesNo::Yes => FEATURE_YES,
        YesNo::No => FEATURE_NO,
    }] = 1.0;
    f[FEATURE_MARKER] = 1.0;
    VideoFeatures::new(id, vec![f; FRAMES])
}

fn choice_options() -> Vec<AnswerOption> {
    ["A", "B", "C", "D"]
        .iter()
        .zip(OPTION_CONTENT)
        .map(|(id, t)| AnswerOption {
            id: id.to_string(),
            tokens: vec![t],
        })
        .collect()
}

fn choice_question() -> Vec<TokenId> {
    vec![FILLER[0], FILLER[1], CHOICE_CUE]
}

/// Padded so follow-up prompts hold as many text tokens as choice prompts.
fn followup_question() -> Vec<TokenId> {
    let pad = choice_prompt(&choice_question(), &choice_options())
        .expect("valid options")
        .len()
        - choice_prompt(&[], &yes_no_options())
            .expect("valid options")
            .len()
        - 1;
    let mut q: Vec<TokenId> = (0..pad).map(|i| FILLER[i % 2]).collect();
    q.push(FOLLOWUP_CUE);
    q
}

/// Step-one evidence for one scenario sample: the three branch
/// distributions, the combined scores and the resulting choices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioCertificate {
    pub sample_id: String,
    pub biased_option: String,
    pub grounded_option: String,
    pub option_ids: Vec<String>,
    pub option_tokens: Vec<TokenId>,
    pub gamma: f64,
    pub lambda: f64,
    pub beta: f64,
    pub alpha: f64,
    pub p_amateur: Vec<f64>,
    pub p_weak: Vec<f64>,
    pub p_strong: Vec<f64>,
    pub raw_scores: Vec<f64>,
    pub final_scores: Vec<f64>,
    pub admissible: Vec<usize>,
    pub amateur_biased_mass: f64,
    pub greedy_choice: String,
    pub mcd_choice: String,
}

/// Minimum amateur mass on the biased token.
pub const MIN_AMATEUR_BIAS: f64 = 0.8;

impl ScenarioCertificate {
    /// Re-derives the combination arithmetic element by element from the
    /// stored branch distributions and checks every claim.
    pub fn verify(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invariant(format!("scenario certificate: {m}")));
        let n = self.p_weak.len();
        let max_weak = self.p_weak.iter().copied().fold(0.0, f64::max);
        for t in 0..n {
            let mixed = self.lambda * self.p_weak[t] + (1.0 - self.lambda) * self.p_strong[t];
            let raw = (1.0 + self.gamma) * mixed - self.gamma * self.p_amateur[t];
            if (raw - self.raw_scores[t]).abs() > 1e-12 {
                return fail(format!("raw score {t} does not match"));
            }
            let admissible = self.p_weak[t] >= self.beta * max_weak;
            if admissible != self.admissible.contains(&t) {
                return fail(format!("admissibility of token {t} does not match"));
            }
            let expected = if admissible { raw.max(0.0) } else { 0.0 };
            if (expected - self.final_scores[t]).abs() > 1e-12 {
                return fail(format!("final score {t} does not match"));
            }
        }
        let biased = vocab::option_token(&self.biased_option).expect("biased option") as usize;
        if self.p_amateur[biased] < MIN_AMATEUR_BIAS {
            return fail(format!(
                "amateur mass {} on biased option",
                self.p_amateur[biased]
            ));
        }
        let pick = |scores: &[f64], allowed: &dyn Fn(usize) -> bool| {
            let mut best: Option<usize> = None;
            for (i, t) in self.option_tokens.iter().enumerate() {
                let t = *t as usize;
                if allowed(t)
                    && best.is_none_or(|b| scores[t] > scores[self.option_tokens[b] as usize])
                {
                    best = Some(i);
                }
            }
            best.map(|i| self.option_ids[i].clone())
        };
        if pick(&self.p_weak, &|_| true).as_deref() != Some(self.biased_option.as_str())
            || self.greedy_choice != self.biased_option
        {
            return fail("greedy does not pick the biased option".into());
        }
        if pick(&self.final_scores, &|t| self.admissible.contains(&t)).as_deref()
            != Some(self.grounded_option.as_str())
            || self.mcd_choice != self.grounded_option
        {
            return fail("MCD does not pick the grounded option".into());
        }
        Ok(())
    }
}

/// Which prompt of a sample an expectation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Prompt {
    Original,
    Counterpart,
    Followup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExpectedAnswer {
    pub sample_id: String,
    pub prompt: Prompt,
    pub greedy: String,
    pub mcd: String,
}

#[derive(Debug, Clone)]
pub struct BiasedScenario {
    pub model: ToyModel,
    pub dataset: Dataset,
    pub features: FeatureStore,
    pub params: DecodeParams,
    pub certificate: ScenarioCertificate,
    pub expected: Vec<ExpectedAnswer>,
}

/// Builds the scenario and validates it: the certificate for the first
/// sample and the greedy/MCD answer of every prompt are checked before
/// returning. `seed` drives the noise on distorted counterparts.
pub fn build_biased_scenario(seed: u64) -> Result<BiasedScenario> {
    let model = scenario_model()?;
    let params = scenario_params();
    let mut features = FeatureStore::new(model.config().video_feature_dim);
    let mut dataset = Dataset::default();

    let avc_plan = [
        (PairKind::Relevant, "B", "C"),
        (PairKind::Relevant, "C", "D"),
        (PairKind::Relevant, "D", "B"),
        (PairKind::Distorted, "B", "D"),
        (PairKind::Distorted, "C", "B"),
        (PairKind::Distorted, "D", "C"),
    ];
    for (i, (kind, gold, other)) in avc_plan.into_iter().enumerate() {
        let original = grounded_video(&format!("orig{i}"), gold, YesNo::Yes)?;
        let mut counterpart = grounded_video(&format!("pair{i}"), other, YesNo::Yes)?;
        if kind == PairKind::Distorted {
            counterpart = distort_features(&counterpart, 0.01, seed.wrapping_add(i as u64))?;
            counterpart.video_id = format!("{}~dist", original.video_id);
        }
        dataset.avc.push(AvcSample {
            sample_id: format!("scn-avc{i}"),
            video_id: original.video_id.clone(),
            question: choice_question(),
            options: choice_options(),
            gold: gold.to_string(),
            pair: Counterpart {
                video_id: counterpart.video_id.clone(),
                kind,
                gold: other.to_string(),
            },
        });
        features.insert(original)?;
        features.insert(counterpart)?;
    }

    let iqp_plan = [
        ("A", YesNo::Yes),
        ("A", YesNo::No),
        ("A", YesNo::Yes),
        ("A", YesNo::No),
        ("B", YesNo::Yes),
        ("C", YesNo::No),
        ("D", YesNo::Yes),
        ("B", YesNo::No),
    ];
    for (i, (gold, answer)) in iqp_plan.into_iter().enumerate() {
        let video = grounded_video(&format!("iqp{i}"), gold, answer)?;
        dataset.iqp.push(IqpSample {
            sample_id: format!("scn-iqp{i}"),
            video_id: video.video_id.clone(),
            question: choice_question(),
            options: choice_options(),
            gold: gold.to_string(),
            followup: followup_question(),
            followup_gold: answer,
        });
        features.insert(video)?;
    }
    dataset.validate()?;

    let first = &dataset.avc[0];
    let certificate = certify(&model, &params, features.get(&first.video_id)?, first)?;
    certificate.verify()?;

    let expected = expected_answers(&dataset);
    check_expectations(&model, &params, &dataset, &features, &expected)?;

    Ok(BiasedScenario {
        model,
        dataset,
        features,
        params,
        certificate,
        expected,
    })
}

fn certify(
    model: &ToyModel,
    params: &DecodeParams,
    video: &VideoFeatures,
    sample: &AvcSample,
) -> Result<ScenarioCertificate> {
    let prompt = choice_prompt(&sample.question, &sample.options)?;
    let query = Query::new(video, &prompt, PROMPT_PREFIX.len())?;
    let branches = compute_branches(model, &query, &[], &params.intervention)?;
    let combined = mcd_combine(&branches, params)?;
    let tokens = option_tokens(&sample.options)?;
    let ids: Vec<String> = sample.options.iter().map(|o| o.id.clone()).collect();
    let question = ChoiceQuestion {
        query,
        option_tokens: &tokens,
    };
    let greedy = answer_multiple_choice(
        model,
        &question,
        &DecodeParams::with_strategy(Strategy::Greedy),
    )?;
    let mcd = answer_multiple_choice(model, &question, params)?;
    Ok(ScenarioCertificate {
        sample_id: sample.sample_id.clone(),
        biased_option: BIASED_OPTION.to_string(),
        grounded_option: sample.gold.clone(),
        amateur_biased_mass: branches.p_amateur.probs()[vocab::OPTION_A as usize],
        option_ids: ids.clone(),
        option_tokens: tokens,
        gamma: params.gamma,
        lambda: params.lambda,
        beta: params.beta,
        alpha: params.intervention.alpha,
        p_amateur: branches.p_amateur.into_inner(),
        p_weak: branches.p_weak.into_inner(),
        p_strong: branches.p_strong.into_inner(),
        raw_scores: combined.raw,
        final_scores: combined.scores,
        admissible: combined.admissible,
        greedy_choice: ids[greedy.index].clone(),
        mcd_choice: ids[mcd.index].clone(),
    })
}

fn expected_answers(dataset: &Dataset) -> Vec<ExpectedAnswer> {
    let mut out = Vec::new();
    for s in &dataset.avc {
        for (prompt, gold) in [
            (Prompt::Original, &s.gold),
            (Prompt::Counterpart, &s.pair.gold),
        ] {
            out.push(ExpectedAnswer {
                sample_id: s.sample_id.clone(),
                prompt,
                greedy: BIASED_OPTION.to_string(),
                mcd: gold.clone(),
            });
        }
    }
    for s in &dataset.iqp {
        out.push(ExpectedAnswer {
            sample_id: s.sample_id.clone(),
            prompt: Prompt::Original,
            greedy: BIASED_OPTION.to_string(),
            mcd: s.gold.clone(),
        });
        out.push(ExpectedAnswer {
            sample_id: s.sample_id.clone(),
            prompt: Prompt::Followup,
            greedy: YesNo::Yes.as_str().to_string(),
            mcd: s.followup_gold.as_str().to_string(),
        });
    }
    out
}

fn check_expectations(
    model: &ToyModel,
    params: &DecodeParams,
    dataset: &Dataset,
    features: &FeatureStore,
    expected: &[ExpectedAnswer],
) -> Result<()> {
    let greedy = DecodeParams::with_strategy(Strategy::Greedy);
    for e in expected {
        let (video, question, options) =
            if let Some(s) = dataset.avc.iter().find(|s| s.sample_id == e.sample_id) {
                let vid = if e.prompt == Prompt::Counterpart {
                    &s.pair.video_id
                } else {
                    &s.video_id
                };
                (features.get(vid)?, s.question.clone(), s.options.clone())
            } else {
                let s = dataset
                    .iqp
                    .iter()
                    .find(|s| s.sample_id == e.sample_id)
                    .expect("expectation refers to a sample");
                if e.prompt == Prompt::Followup {
                    (
                        features.get(&s.video_id)?,
                        s.followup.clone(),
                        yes_no_options(),
                    )
                } else {
                    (
                        features.get(&s.video_id)?,
                        s.question.clone(),
                        s.options.clone(),
                    )
                }
            };
        let (g, _) = ask(model, &greedy, video, &question, &options)?;
        let (m, _) = ask(model, params, video, &question, &options)?;
        if g != e.greedy || m != e.mcd {
            return Err(Error::Invariant(format!(
                "scenario {} ({:?}): greedy {g} (want {}), mcd {m} (want {})",
                e.sample_id, e.prompt, e.greedy, e.mcd
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branches::amateur_distribution;

    #[test]
    fn scenario_builds_and_verifies() {
        let s = build_biased_scenario(0).unwrap();
        s.certificate.verify().unwrap();
        assert_eq!(s.certificate.greedy_choice, "A");
        assert_eq!(s.certificate.mcd_choice, s.dataset.avc[0].gold);
        assert!(s.certificate.amateur_biased_mass >= MIN_AMATEUR_BIAS);
        assert_eq!(s.params.gamma, 0.1);
        assert_eq!(s.params.beta, 0.1);
    }

    #[test]
    fn tampered_certificate_fails() {
        let s = build_biased_scenario(0).unwrap();
        let mut c = s.certificate.clone();
        c.raw_scores[3] += 1e-6;
        assert!(c.verify().is_err());
        let mut c = s.certificate.clone();
        c.mcd_choice = "A".into();
        assert!(c.verify().is_err());
    }

    #[test]
    fn amateur_identical_across_paired_videos() {
        let s = build_biased_scenario(3).unwrap();
        let sample = &s.dataset.avc[0];
        let prompt = choice_prompt(&sample.question, &sample.options).unwrap();
        let a = s.features.get(&sample.video_id).unwrap();
        let b = s.features.get(&sample.pair.video_id).unwrap();
        let qa = Query::new(a, &prompt, 1).unwrap();
        let qb = Query::new(b, &prompt, 1).unwrap();
        let ba = compute_branches(&s.model, &qa, &[], &s.params.intervention).unwrap();
        let bb = compute_branches(&s.model, &qb, &[], &s.params.intervention).unwrap();
        assert_eq!(ba.p_amateur, bb.p_amateur);
        assert_eq!(
            ba.p_amateur,
            amateur_distribution(&s.model, &prompt, &[]).unwrap()
        );
        assert_ne!(ba.p_weak, bb.p_weak);
    }

    #[test]
    fn prompts_share_length() {
        let c = choice_prompt(&choice_question(), &choice_options()).unwrap();
        let f = choice_prompt(&followup_question(), &yes_no_options()).unwrap();
        assert_eq!(c.len(), f.len());
    }
}
