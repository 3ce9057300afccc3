//! Branch combination and token generation.
//!
//! Contrastive scores live in probability space:
//! `(1 + gamma) * expert - gamma * amateur`, where the expert is either the
//! weak expert alone (VCD) or the mixture `lambda * weak + (1 - lambda) * strong`
//! (MCD). Tokens below `beta * max(reference)` are excluded, surviving
//! negatives are clamped to zero, and the rest is renormalized.

use std::fmt;
use std::str::FromStr;

use crate::branches::{
    amateur_distribution, compute_branches, weak_expert_distribution, BranchOutputs, Query,
};
use crate::error::{Error, Result};
use crate::model::{vocab, AttentionIntervention, TokenId, ToyModel};
use crate::numerics::{argmax, sample_weights, ProbabilityDistribution, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Greedy,
    Beam,
    Nucleus,
    TopK,
    Vcd,
    Mcd,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Greedy,
        Strategy::Beam,
        Strategy::Nucleus,
        Strategy::TopK,
        Strategy::Vcd,
        Strategy::Mcd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Beam => "beam",
            Strategy::Nucleus => "nucleus",
            Strategy::TopK => "topk",
            Strategy::Vcd => "vcd",
            Strategy::Mcd => "mcd",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown strategy '{s}'")))
    }
}

/// Which distribution defines the admissible head set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlausibilityReference {
    /// The plain multimodal pass.
    WeakExpert,
    /// The lambda-mixture of both experts.
    IntegratedExpert,
}

impl PlausibilityReference {
    fn as_str(self) -> &'static str {
        match self {
            PlausibilityReference::WeakExpert => "weak",
            PlausibilityReference::IntegratedExpert => "integrated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeParams {
    /// Contrast strength against the amateur branch.
    pub gamma: f64,
    /// Weight of the weak expert in the integrated expert.
    pub lambda: f64,
    /// Plausibility cut-off relative to the reference maximum.
    pub beta: f64,
    pub intervention: AttentionIntervention,
    pub strategy: Strategy,
    pub beam_width: usize,
    pub top_k: usize,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub plausibility_reference: PlausibilityReference,
}

/// Default contrast strength.
pub const DEFAULT_GAMMA: f64 = 0.1;
/// Default plausibility cut-off.
pub const DEFAULT_BETA: f64 = 0.1;
/// Repo-chosen; the per-model values used upstream are not published.
pub const DEFAULT_LAMBDA: f64 = 0.5;
/// Repo-chosen amplification coefficient.
pub const DEFAULT_ALPHA: f64 = 0.5;

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            intervention: AttentionIntervention::new(DEFAULT_ALPHA),
            strategy: Strategy::Greedy,
            beam_width: 3,
            top_k: 10,
            top_p: 0.9,
            max_new_tokens: 16,
            seed: 0,
            plausibility_reference: PlausibilityReference::WeakExpert,
        }
    }
}

const CONFIG_KEYS: [&str; 14] = [
    "strategy",
    "gamma",
    "lambda",
    "beta",
    "alpha",
    "layers",
    "heads",
    "all_rows",
    "beam_width",
    "top_k",
    "top_p",
    "max_new_tokens",
    "seed",
    "plausibility_reference",
];

impl DecodeParams {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must be in [0, 1], got {}", self.beta));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.intervention.alpha.is_finite() && self.intervention.alpha >= 0.0) {
            return bad(format!(
                "alpha must be >= 0, got {}",
                self.intervention.alpha
            ));
        }
        if self.beam_width == 0 || self.top_k == 0 {
            return bad("beam_width and top_k must be >= 1".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parses back to an equal value.
    pub fn to_config_string(&self) -> String {
        let list = |v: &Option<Vec<usize>>| match v {
            None => "all".to_string(),
            Some(xs) => xs
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        };
        let iv = &self.intervention;
        let values = [
            self.strategy.to_string(),
            self.gamma.to_string(),
            self.lambda.to_string(),
            self.beta.to_string(),
            iv.alpha.to_string(),
            list(&iv.layers),
            list(&iv.heads),
            iv.all_rows.to_string(),
            self.beam_width.to_string(),
            self.top_k.to_string(),
            self.top_p.to_string(),
            self.max_new_tokens.to_string(),
            self.seed.to_string(),
            self.plausibility_reference.as_str().to_string(),
        ];
        let mut out = String::from("# mcd decode params, format 1\n");
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped;
    /// unknown or repeated keys are rejected; missing keys keep defaults.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut p = Self::default();
        let mut seen = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::InvalidParams(format!("line {}: {m}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if !CONFIG_KEYS.contains(&key) {
                return Err(err(format!("unknown key '{key}'")));
            }
            if seen.contains(&key) {
                return Err(err(format!("duplicate key '{key}'")));
            }
            seen.push(key);
            let float = || {
                value
                    .parse::<f64>()
                    .map_err(|_| err(format!("bad number '{value}'")))
            };
            let count = || {
                value
                    .parse::<usize>()
                    .map_err(|_| err(format!("bad count '{value}'")))
            };
            let list = || -> Result<Option<Vec<usize>>> {
                if value == "all" {
                    return Ok(None);
                }
                value
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| err(format!("bad index list '{value}'")))
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(Some)
            };
            match key {
                "strategy" => p.strategy = value.parse()?,
                "gamma" => p.gamma = float()?,
                "lambda" => p.lambda = float()?,
                "beta" => p.beta = float()?,
                "alpha" => p.intervention.alpha = float()?,
                "layers" => p.intervention.layers = list()?,
                "heads" => p.intervention.heads = list()?,
                "all_rows" => {
                    p.intervention.all_rows = value
                        .parse()
                        .map_err(|_| err(format!("bad bool '{value}'")))?
                }
                "beam_width" => p.beam_width = count()?,
                "top_k" => p.top_k = count()?,
                "top_p" => p.top_p = float()?,
                "max_new_tokens" => p.max_new_tokens = count()?,
                "seed" => {
                    p.seed = value
                        .parse()
                        .map_err(|_| err(format!("bad seed '{value}'")))?
                }
                "plausibility_reference" => {
                    p.plausibility_reference = match value {
                        "weak" => PlausibilityReference::WeakExpert,
                        "integrated" => PlausibilityReference::IntegratedExpert,
                        _ => return Err(err(format!("bad reference '{value}'"))),
                    }
                }
                _ => unreachable!("key checked above"),
            }
        }
        p.validate()?;
        Ok(p)
    }
}

fn same_vocab(a: &ProbabilityDistribution, b: &ProbabilityDistribution) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        })
    }
}

/// `lambda * p_weak + (1 - lambda) * p_strong`.
pub fn integrated_expert(
    p_weak: &ProbabilityDistribution,
    p_strong: &ProbabilityDistribution,
    lambda: f64,
) -> Result<ProbabilityDistribution> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParams(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    same_vocab(p_weak, p_strong)?;
    let mixed = p_weak
        .probs()
        .iter()
        .zip(p_strong.probs())
        .map(|(w, s)| lambda * w + (1.0 - lambda) * s)
        .collect();
    ProbabilityDistribution::new(mixed)
}

/// Indices whose probability is at least `beta` times the maximum.
pub fn plausibility_mask(p_reference: &ProbabilityDistribution, beta: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidParams(format!(
            "beta must be in [0, 1], got {beta}"
        )));
    }
    let max = p_reference.probs().iter().copied().fold(0.0, f64::max);
    let threshold = beta * max;
    Ok(p_reference
        .probs()
        .iter()
        .enumerate()
        .filter(|(_, p)| **p >= threshold)
        .map(|(i, _)| i)
        .collect())
}

/// `(1 + gamma) * p_full - gamma * p_amateur`, unclamped.
pub fn vcd_combine(
    p_full: &ProbabilityDistribution,
    p_amateur: &ProbabilityDistribution,
    gamma: f64,
) -> Result<Vec<f64>> {
    same_vocab(p_full, p_amateur)?;
    Ok(p_full
        .probs()
        .iter()
        .zip(p_amateur.probs())
        .map(|(f, a)| (1.0 + gamma) * f - gamma * a)
        .collect())
}

/// Contrastive scores after masking and clamping.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedScores {
    /// Contrast before masking; sums to one, may hold negatives.
    pub raw: Vec<f64>,
    /// Excluded tokens and negatives set to zero.
    pub scores: Vec<f64>,
    /// The head set, ascending.
    pub admissible: Vec<usize>,
}

impl CombinedScores {
    /// Renormalized over the surviving tokens.
    pub fn distribution(&self) -> Result<ProbabilityDistribution> {
        ProbabilityDistribution::from_weights(&self.scores).map_err(|e| match e {
            Error::DegenerateDistribution => Error::ContrastAnnihilated,
            other => other,
        })
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.scores)
    }
}

/// Contrast `expert` against `amateur`, masked by the head set of `reference`.
pub fn contrastive_scores(
    expert: &ProbabilityDistribution,
    amateur: &ProbabilityDistribution,
    reference: &ProbabilityDistribution,
    gamma: f64,
    beta: f64,
) -> Result<CombinedScores> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::InvalidParams(format!(
            "gamma must be >= 0, got {gamma}"
        )));
    }
    same_vocab(expert, reference)?;
    let raw = vcd_combine(expert, amateur, gamma)?;
    let admissible = plausibility_mask(reference, beta)?;
    let mut scores = vec![0.0; raw.len()];
    for &i in &admissible {
        scores[i] = raw[i].max(0.0);
    }
    if scores.iter().all(|s| *s == 0.0) {
        return Err(Error::ContrastAnnihilated);
    }
    Ok(CombinedScores {
        raw,
        scores,
        admissible,
    })
}

pub fn mcd_combine(branches: &BranchOutputs, params: &DecodeParams) -> Result<CombinedScores> {
    params.validate()?;
    let expert = integrated_expert(&branches.p_weak, &branches.p_strong, params.lambda)?;
    let reference = match params.plausibility_reference {
        PlausibilityReference::WeakExpert => &branches.p_weak,
        PlausibilityReference::IntegratedExpert => &expert,
    };
    contrastive_scores(
        &expert,
        &branches.p_amateur,
        reference,
        params.gamma,
        params.beta,
    )
}

/// Keeps the smallest top-probability set whose mass reaches `top_p`
/// (ties by index). Returns the input untouched when nothing is cut.
pub fn filter_top_p(dist: &ProbabilityDistribution, top_p: f64) -> Result<ProbabilityDistribution> {
    if top_p >= 1.0 {
        return Ok(dist.clone());
    }
    let keep = ranked(dist.probs())
        .scan(0.0, |acc, i| {
            if *acc >= top_p {
                return None;
            }
            *acc += dist.probs()[i];
            Some(i)
        })
        .collect::<Vec<_>>();
    restrict(dist, &keep)
}

/// Keeps the `k` most probable tokens (ties by index).
pub fn filter_top_k(dist: &ProbabilityDistribution, k: usize) -> Result<ProbabilityDistribution> {
    if k >= dist.len() {
        return Ok(dist.clone());
    }
    let keep: Vec<usize> = ranked(dist.probs()).take(k).collect();
    restrict(dist, &keep)
}

fn ranked(probs: &[f64]) -> impl Iterator<Item = usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|a, b| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b)));
    order.into_iter()
}

fn restrict(dist: &ProbabilityDistribution, keep: &[usize]) -> Result<ProbabilityDistribution> {
    if keep.len() == dist.len() {
        return Ok(dist.clone());
    }
    let mut weights = vec![0.0; dist.len()];
    for &i in keep {
        weights[i] = dist.probs()[i];
    }
    ProbabilityDistribution::from_weights(&weights)
}

/// What one decoding step hands to the token selector.
#[derive(Debug, Clone, PartialEq)]
pub struct StepScores {
    pub p_weak: ProbabilityDistribution,
    /// Present for the contrastive strategies.
    pub combined: Option<CombinedScores>,
}

/// Computes only the branches `params.strategy` needs.
pub fn step_scores(
    model: &ToyModel,
    query: &Query<'_>,
    generated: &[TokenId],
    params: &DecodeParams,
) -> Result<StepScores> {
    match params.strategy {
        Strategy::Greedy | Strategy::Beam | Strategy::Nucleus | Strategy::TopK => Ok(StepScores {
            p_weak: weak_expert_distribution(model, query, generated)?,
            combined: None,
        }),
        Strategy::Vcd => {
            let p_weak = weak_expert_distribution(model, query, generated)?;
            let p_amateur = amateur_distribution(model, query.text_tokens, generated)?;
            let combined =
                contrastive_scores(&p_weak, &p_amateur, &p_weak, params.gamma, params.beta)?;
            Ok(StepScores {
                p_weak,
                combined: Some(combined),
            })
        }
        Strategy::Mcd => {
            let branches = compute_branches(model, query, generated, &params.intervention)?;
            let combined = mcd_combine(&branches, params)?;
            Ok(StepScores {
                p_weak: branches.p_weak,
                combined: Some(combined),
            })
        }
    }
}

/// Generates up to `max_new_tokens`, stopping at (and omitting) EOS.
///
/// Greedy and beam consume the weak expert; nucleus and top-k sample from
/// its filtered form; VCD and MCD take the argmax of the combined scores.
pub fn decode(
    model: &ToyModel,
    query: &Query<'_>,
    params: &DecodeParams,
    rng: &mut SeededRng,
) -> Result<Vec<TokenId>> {
    params.validate()?;
    if params.strategy == Strategy::Beam {
        return beam_search(model, query, params);
    }
    let mut generated = Vec::new();
    while generated.len() < params.max_new_tokens {
        let step = step_scores(model, query, &generated, params)?;
        let token = match params.strategy {
            Strategy::Greedy => step.p_weak.argmax(),
            Strategy::Nucleus => {
                sample_weights(filter_top_p(&step.p_weak, params.top_p)?.probs(), rng)?
            }
            Strategy::TopK => {
                sample_weights(filter_top_k(&step.p_weak, params.top_k)?.probs(), rng)?
            }
            Strategy::Vcd | Strategy::Mcd => {
                step.combined.as_ref().expect("contrastive step").argmax()
            }
            Strategy::Beam => unreachable!(),
        } as TokenId;
        if token == vocab::EOS {
            break;
        }
        generated.push(token);
    }
    Ok(generated)
}

struct Hypothesis {
    tokens: Vec<TokenId>,
    score: f64,
}

/// Cumulative log-probability beam search over the weak expert, without a
/// length penalty.
fn beam_search(model: &ToyModel, query: &Query<'_>, params: &DecodeParams) -> Result<Vec<TokenId>> {
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..params.max_new_tokens {
        let mut candidates: Vec<(f64, usize, TokenId)> = Vec::new();
        for (bi, hyp) in live.iter().enumerate() {
            let p = weak_expert_distribution(model, query, &hyp.tokens)?;
            for (t, prob) in p.probs().iter().enumerate() {
                if *prob > 0.0 {
                    candidates.push((hyp.score + prob.ln(), bi, t as TokenId));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        for (score, bi, token) in candidates.into_iter().take(params.beam_width) {
            let mut tokens = live[bi].tokens.clone();
            if token == vocab::EOS {
                finished.push(Hypothesis { tokens, score });
            } else {
                tokens.push(token);
                next.push(Hypothesis { tokens, score });
            }
        }
        live = next;
        let best_finished = finished
            .iter()
            .map(|h| h.score)
            .fold(f64::NEG_INFINITY, f64::max);
        // scores only decrease, so no live beam can overtake a finished one
        if live.first().is_none_or(|h| best_finished >= h.score) {
            break;
        }
    }
    finished.extend(live);
    let mut best: Option<Hypothesis> = None;
    for h in finished {
        if best.as_ref().is_none_or(|b| h.score > b.score) {
            best = Some(h);
        }
    }
    Ok(best.map(|h| h.tokens).unwrap_or_default())
}

/// A question whose answer is one of a fixed set of reserved tokens.
#[derive(Debug, Clone, Copy)]
pub struct ChoiceQuestion<'a> {
    pub query: Query<'a>,
    /// One answer token per option, in option order.
    pub option_tokens: &'a [TokenId],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChoiceAnswer {
    /// Position in `option_tokens`.
    pub index: usize,
    /// Set when no option survived masking and the weak expert decided.
    pub fallback: bool,
}

/// First-step argmax restricted to the option tokens; ties go to the lowest
/// option index.
pub fn answer_multiple_choice(
    model: &ToyModel,
    question: &ChoiceQuestion<'_>,
    params: &DecodeParams,
) -> Result<ChoiceAnswer> {
    params.validate()?;
    let options = question.option_tokens;
    if options.len() < 2 {
        return Err(Error::InvalidParams("need at least two options".into()));
    }
    if let Some(t) = options
        .iter()
        .find(|t| **t as usize >= model.config().vocab_size)
    {
        return Err(Error::TokenOutOfRange {
            token: *t,
            vocab: model.config().vocab_size,
        });
    }
    let step = match step_scores(model, &question.query, &[], params) {
        Ok(step) => step,
        Err(Error::ContrastAnnihilated) => {
            let p_weak = weak_expert_distribution(model, &question.query, &[])?;
            return Ok(ChoiceAnswer {
                index: restricted_argmax(p_weak.probs(), options, |_| true)
                    .expect("options non-empty"),
                fallback: true,
            });
        }
        Err(e) => return Err(e),
    };
    let choice = match (params.strategy, &step.combined) {
        (Strategy::Nucleus, _) => {
            let filtered = filter_top_p(&step.p_weak, params.top_p)?;
            restricted_argmax(filtered.probs(), options, |t| filtered.probs()[t] > 0.0)
        }
        (Strategy::TopK, _) => {
            let filtered = filter_top_k(&step.p_weak, params.top_k)?;
            restricted_argmax(filtered.probs(), options, |t| filtered.probs()[t] > 0.0)
        }
        (_, Some(combined)) => restricted_argmax(&combined.scores, options, |t| {
            combined.admissible.binary_search(&t).is_ok()
        }),
        (_, None) => restricted_argmax(step.p_weak.probs(), options, |_| true),
    };
    Ok(match choice {
        Some(index) => ChoiceAnswer {
            index,
            fallback: false,
        },
        None => ChoiceAnswer {
            index: restricted_argmax(step.p_weak.probs(), options, |_| true)
                .expect("options non-empty"),
            fallback: true,
        },
    })
}

fn restricted_argmax(
    scores: &[f64],
    options: &[TokenId],
    admissible: impl Fn(usize) -> bool,
) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, t) in options.iter().enumerate() {
        let t = *t as usize;
        if !admissible(t) {
            continue;
        }
        if best.is_none_or(|b| scores[t] > scores[options[b] as usize]) {
            best = Some(i);
        }
    }
    best
}
