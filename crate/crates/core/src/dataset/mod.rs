//! Dataset schema and JSONL I/O.
//!
//! A dataset file is UTF-8 JSON lines. The first line is a header
//! `{"record":"header","format_version":1}`; every following line is either
//! an `avc` or an `iqp` record:
//!
//! | field | record | type | meaning |
//! |---|---|---|---|
//! | `sample_id` | both | string | unique across the file |
//! | `video_id` | both | string | key into the feature store |
//! | `question` | both | token ids | question text |
//! | `options` | both | list of `{id, tokens}` | 2 to 5 options, ids `A`..`E` |
//! | `gold` | both | option id | answer for `video_id` |
//! | `pair` | avc | `{video_id, kind, gold}` | counterpart video, `relevant` or `distorted`, and its answer |
//! | `followup` | iqp | token ids | binary follow-up question |
//! | `followup_gold` | iqp | `yes` or `no` | follow-up answer |

mod features;
mod scenario;
mod synthetic;

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use features::{
    build_avc_pairs, distort_features, retrieve_most_similar, FeatureStore, PairedVideo,
};
pub use scenario::{
    build_biased_scenario, scenario_params, BiasedScenario, ExpectedAnswer, Prompt,
    ScenarioCertificate, BIASED_OPTION, MIN_AMATEUR_BIAS,
};
pub use synthetic::{generate_synthetic_dataset, SyntheticConfig};

use crate::branches::Query;
use crate::decoding::{answer_multiple_choice, ChoiceQuestion, DecodeParams};
use crate::error::{Error, Result};
use crate::metrics::PairKind;
use crate::model::{vocab, TokenId, ToyModel, VideoFeatures};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Tokens placed before the video span in every prompt.
pub const PROMPT_PREFIX: [TokenId; 1] = [vocab::EOS];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerOption {
    pub id: String,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counterpart {
    pub video_id: String,
    pub kind: PairKind,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvcSample {
    pub sample_id: String,
    pub video_id: String,
    pub question: Vec<TokenId>,
    pub options: Vec<AnswerOption>,
    pub gold: String,
    pub pair: Counterpart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
}

impl YesNo {
    pub fn as_str(self) -> &'static str {
        match self {
            YesNo::Yes => "yes",
            YesNo::No => "no",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IqpSample {
    pub sample_id: String,
    pub video_id: String,
    pub question: Vec<TokenId>,
    pub options: Vec<AnswerOption>,
    pub gold: String,
    pub followup: Vec<TokenId>,
    pub followup_gold: YesNo,
}

/// The two answer options of every follow-up question.
pub fn yes_no_options() -> Vec<AnswerOption> {
    vec![
        AnswerOption {
            id: "yes".into(),
            tokens: Vec::new(),
        },
        AnswerOption {
            id: "no".into(),
            tokens: Vec::new(),
        },
    ]
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub avc: Vec<AvcSample>,
    pub iqp: Vec<IqpSample>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub n_avc: usize,
    pub n_iqp: usize,
    pub yes: usize,
    pub no: usize,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Line {
    Header { format_version: u32 },
    Avc(AvcSample),
    Iqp(IqpSample),
}

fn schema(sample_id: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        sample_id: sample_id.to_string(),
        message: message.into(),
    }
}

fn validate_options(sample_id: &str, options: &[AnswerOption], allow_yes_no: bool) -> Result<()> {
    if !(2..=5).contains(&options.len()) {
        return Err(schema(
            sample_id,
            format!("options: expected 2 to 5, got {}", options.len()),
        ));
    }
    let mut seen = HashSet::new();
    for o in options {
        let token = vocab::option_token(&o.id)
            .ok_or_else(|| schema(sample_id, format!("options: unknown option id '{}'", o.id)))?;
        if !allow_yes_no && (token == vocab::YES || token == vocab::NO) {
            return Err(schema(
                sample_id,
                format!("options: '{}' is not a letter option", o.id),
            ));
        }
        if !seen.insert(o.id.as_str()) {
            return Err(schema(
                sample_id,
                format!("options: duplicate id '{}'", o.id),
            ));
        }
    }
    Ok(())
}

fn check_gold(sample_id: &str, field: &str, gold: &str, options: &[AnswerOption]) -> Result<()> {
    if options.iter().any(|o| o.id == gold) {
        Ok(())
    } else {
        Err(schema(
            sample_id,
            format!("{field}: '{gold}' is not among the options"),
        ))
    }
}

impl AvcSample {
    pub fn validate(&self) -> Result<()> {
        validate_options(&self.sample_id, &self.options, false)?;
        check_gold(&self.sample_id, "gold", &self.gold, &self.options)?;
        check_gold(&self.sample_id, "pair.gold", &self.pair.gold, &self.options)?;
        if self.gold == self.pair.gold {
            return Err(schema(
                &self.sample_id,
                format!(
                    "pair.gold: gold collision with counterpart video {}",
                    self.pair.video_id
                ),
            ));
        }
        Ok(())
    }
}

impl IqpSample {
    pub fn validate(&self) -> Result<()> {
        validate_options(&self.sample_id, &self.options, false)?;
        check_gold(&self.sample_id, "gold", &self.gold, &self.options)?;
        if self.followup.is_empty() {
            return Err(schema(&self.sample_id, "followup: empty question"));
        }
        Ok(())
    }
}

impl Dataset {
    pub fn validate(&self) -> Result<LoadReport> {
        let mut ids = HashSet::new();
        for id in self
            .avc
            .iter()
            .map(|s| &s.sample_id)
            .chain(self.iqp.iter().map(|s| &s.sample_id))
        {
            if !ids.insert(id) {
                return Err(schema(id, "sample_id: duplicate"));
            }
        }
        for s in &self.avc {
            s.validate()?;
        }
        for s in &self.iqp {
            s.validate()?;
        }
        let yes = self
            .iqp
            .iter()
            .filter(|s| s.followup_gold == YesNo::Yes)
            .count();
        let no = self.iqp.len() - yes;
        let mut warnings = Vec::new();
        if yes.abs_diff(no) > 1 {
            warnings.push(format!("follow-up answers unbalanced: {yes} yes / {no} no"));
        }
        Ok(LoadReport {
            n_avc: self.avc.len(),
            n_iqp: self.iqp.len(),
            yes,
            no,
            warnings,
        })
    }

    /// Canonical JSONL text: header, AVC records, then IQP records.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Line::Header {
            format_version: DATASET_FORMAT_VERSION,
        })?;
        out.push('\n');
        for s in &self.avc {
            out.push_str(&serde_json::to_string(&Line::Avc(s.clone()))?);
            out.push('\n');
        }
        for s in &self.iqp {
            out.push_str(&serde_json::to_string(&Line::Iqp(s.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<(Self, LoadReport)> {
        let mut dataset = Dataset::default();
        let mut saw_header = false;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| schema(&format!("<line {}>", n + 1), format!("invalid JSON: {e}")))?;
            let sample_id = value
                .get("sample_id")
                .and_then(|v| v.as_str())
                .map_or_else(|| format!("<line {}>", n + 1), str::to_string);
            let parsed: Line = serde_json::from_value(value)
                .map_err(|e| schema(&sample_id, format!("line {}: {e}", n + 1)))?;
            match parsed {
                Line::Header { format_version } => {
                    if saw_header || n != 0 {
                        return Err(schema(&sample_id, "header must be the first line"));
                    }
                    if format_version != DATASET_FORMAT_VERSION {
                        return Err(schema(
                            &sample_id,
                            format!("unsupported format_version {format_version}"),
                        ));
                    }
                    saw_header = true;
                }
                Line::Avc(s) => dataset.avc.push(s),
                Line::Iqp(s) => dataset.iqp.push(s),
            }
        }
        if !saw_header {
            return Err(schema("<line 1>", "missing header record"));
        }
        let report = dataset.validate()?;
        Ok((dataset, report))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = &str> {
        self.avc
            .iter()
            .map(|s| s.sample_id.as_str())
            .chain(self.iqp.iter().map(|s| s.sample_id.as_str()))
    }
}

/// Reads and validates a dataset file.
pub fn load_dataset(path: &Path) -> Result<(Dataset, LoadReport)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_jsonl(&text)
}

/// `[prefix][video][option listing][question]`, returned without the video;
/// the video span sits after the first `PROMPT_PREFIX.len()` tokens.
pub fn choice_prompt(question: &[TokenId], options: &[AnswerOption]) -> Result<Vec<TokenId>> {
    let mut tokens = PROMPT_PREFIX.to_vec();
    for o in options {
        tokens.push(option_token(o)?);
        tokens.extend(&o.tokens);
    }
    tokens.extend(question);
    Ok(tokens)
}

pub fn option_token(option: &AnswerOption) -> Result<TokenId> {
    vocab::option_token(&option.id)
        .ok_or_else(|| Error::InvalidParams(format!("unknown option id '{}'", option.id)))
}

pub fn option_tokens(options: &[AnswerOption]) -> Result<Vec<TokenId>> {
    options.iter().map(option_token).collect()
}

/// Answers a choice question over one video; returns the chosen option id
/// and whether the weak-expert fallback decided.
pub fn ask(
    model: &ToyModel,
    params: &DecodeParams,
    video: &VideoFeatures,
    question: &[TokenId],
    options: &[AnswerOption],
) -> Result<(String, bool)> {
    let prompt = choice_prompt(question, options)?;
    let tokens = option_tokens(options)?;
    let q = ChoiceQuestion {
        query: Query::new(video, &prompt, PROMPT_PREFIX.len())?,
        option_tokens: &tokens,
    };
    let a = answer_multiple_choice(model, &q, params)?;
    Ok((options[a.index].id.clone(), a.fallback))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(ids: &[&str]) -> Vec<AnswerOption> {
        ids.iter()
            .map(|id| AnswerOption {
                id: id.to_string(),
                tokens: vec![20],
            })
            .collect()
    }

    fn avc(id: &str, gold: &str, cgold: &str) -> AvcSample {
        AvcSample {
            sample_id: id.into(),
            video_id: "v1".into(),
            question: vec![10, 11],
            options: opts(&["A", "B", "C"]),
            gold: gold.into(),
            pair: Counterpart {
                video_id: "v2".into(),
                kind: PairKind::Relevant,
                gold: cgold.into(),
            },
        }
    }

    fn iqp(id: &str, fg: YesNo) -> IqpSample {
        IqpSample {
            sample_id: id.into(),
            video_id: "v1".into(),
            question: vec![12],
            options: opts(&["A", "B"]),
            gold: "B".into(),
            followup: vec![13, 14],
            followup_gold: fg,
        }
    }

    fn ten_sample_dataset() -> Dataset {
        Dataset {
            avc: (0..5).map(|i| avc(&format!("a{i}"), "A", "B")).collect(),
            iqp: (0..5)
                .map(|i| {
                    iqp(
                        &format!("i{i}"),
                        if i % 2 == 0 { YesNo::Yes } else { YesNo::No },
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn well_formed_file_loads() {
        let text = ten_sample_dataset().to_jsonl().unwrap();
        let (back, report) = Dataset::from_jsonl(&text).unwrap();
        assert_eq!(back.avc.len() + back.iqp.len(), 10);
        assert!(report.warnings.is_empty());
        assert_eq!(back.to_jsonl().unwrap(), text);
        assert!(text.starts_with("{\"record\":\"header\",\"format_version\":1}\n"));
    }

    #[test]
    fn gold_collision_names_pair() {
        let mut d = ten_sample_dataset();
        d.avc[2] = avc("a2", "B", "B");
        let text = d.to_jsonl().unwrap();
        let err = Dataset::from_jsonl(&text).unwrap_err().to_string();
        assert!(
            err.contains("a2") && err.contains("gold collision"),
            "{err}"
        );
    }

    #[test]
    fn imbalance_warns() {
        let d = Dataset {
            avc: vec![],
            iqp: (0..10)
                .map(|i| iqp(&format!("i{i}"), if i < 7 { YesNo::Yes } else { YesNo::No }))
                .collect(),
        };
        let (_, report) = Dataset::from_jsonl(&d.to_jsonl().unwrap()).unwrap();
        assert_eq!((report.yes, report.no), (7, 3));
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("7 yes / 3 no"));
    }

    #[test]
    fn schema_errors_name_sample_and_field() {
        let header = "{\"record\":\"header\",\"format_version\":1}\n";
        let missing = format!(
            "{header}{{\"record\":\"iqp\",\"sample_id\":\"s9\",\"video_id\":\"v\",\"question\":[1],\"options\":[],\"gold\":\"A\",\"followup\":[2]}}\n"
        );
        let err = Dataset::from_jsonl(&missing).unwrap_err().to_string();
        assert!(err.contains("s9") && err.contains("followup_gold"), "{err}");

        let mut d = ten_sample_dataset();
        d.avc[0].options = opts(&["A"]);
        let err = Dataset::from_jsonl(&d.to_jsonl().unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("a0") && err.contains("options"), "{err}");

        let mut d = ten_sample_dataset();
        d.iqp[1].gold = "E".into();
        let err = Dataset::from_jsonl(&d.to_jsonl().unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("i1") && err.contains("gold"), "{err}");

        let extra = format!("{header}{{\"record\":\"avc\",\"sample_id\":\"z\",\"bogus\":1}}\n");
        assert!(Dataset::from_jsonl(&extra).is_err());
        assert!(Dataset::from_jsonl("").is_err());

        let mut d = ten_sample_dataset();
        d.iqp[0].sample_id = "a0".into();
        let err = Dataset::from_jsonl(&d.to_jsonl().unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn prompt_layout() {
        let options = opts(&["A", "B"]);
        let prompt = choice_prompt(&[30, 31], &options).unwrap();
        assert_eq!(prompt, vec![vocab::EOS, 3, 20, 4, 20, 30, 31]);
        assert_eq!(
            option_tokens(&yes_no_options()).unwrap(),
            vec![vocab::YES, vocab::NO]
        );
    }
}
