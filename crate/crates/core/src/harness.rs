//! Experiment orchestration: run decoding variants over a dataset, write
//! prediction files, score them and dump attention for plotting.
//!
//! Prediction files are JSON lines. The first line is a header carrying the
//! format version, a digest of everything that determines the run, the
//! seeds and the code version; each following line is one sample.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{ask, choice_prompt, yes_no_options, Dataset, FeatureStore, PROMPT_PREFIX};
use crate::decoding::{DecodeParams, Strategy};
use crate::error::{Error, Result};
use crate::metrics::{render_table, AvcPairRecord, IqpRecord, MetricsReport, REPORT_COLUMNS};
use crate::model::{InputLayout, ModelConfig, TokenId, ToyModel, VideoFeatures};

pub const PREDICTION_FORMAT_VERSION: u32 = 1;
pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Branch toggles for MCD variants. Other strategies ignore them.
///
/// | video-enhanced | original | runs as |
/// |---|---|---|
/// | on | on | MCD |
/// | off | on | VCD (weak expert vs amateur) |
/// | on | off | MCD with `lambda = 0` |
/// | off | off | greedy |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub video_enhanced: bool,
    pub original: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            video_enhanced: true,
            original: true,
        }
    }
}

impl Ablation {
    pub fn is_full(&self) -> bool {
        self.video_enhanced && self.original
    }

    /// The parameters actually decoded for `params` under these toggles.
    pub fn apply(&self, params: &DecodeParams) -> DecodeParams {
        let mut p = params.clone();
        if p.strategy != Strategy::Mcd {
            return p;
        }
        match (self.video_enhanced, self.original) {
            (true, true) => {}
            (false, true) => p.strategy = Strategy::Vcd,
            (true, false) => p.lambda = 0.0,
            (false, false) => p.strategy = Strategy::Greedy,
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Build { config: ModelConfig, seed: u64 },
    Weights(PathBuf),
}

impl ModelSource {
    pub fn load(&self) -> Result<ToyModel> {
        match self {
            ModelSource::Build { config, seed } => ToyModel::build(*config, *seed),
            ModelSource::Weights(path) => ToyModel::load(path),
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            ModelSource::Build { seed, .. } => Some(*seed),
            ModelSource::Weights(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    pub dataset: PathBuf,
    pub features: PathBuf,
    /// One entry per strategy row.
    pub variants: Vec<DecodeParams>,
    pub ablation: Ablation,
    pub output_dir: PathBuf,
    pub workers: usize,
    /// Adds a wall-clock field to headers, which breaks byte-identical reruns.
    pub timestamp: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::InvalidConfig(
                "need at least one strategy variant".into(),
            ));
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        for v in &self.variants {
            v.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Avc,
    Iqp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowError {
    pub code: i32,
    pub message: String,
}

/// Answers for one sample. `first` is the original question; `second` is
/// the counterpart video (AVC) or the follow-up (IQP). Both are `None` when
/// `error` is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRow {
    pub sample_id: String,
    pub task: Task,
    pub strategy: String,
    pub seed: u64,
    pub first: Option<String>,
    pub second: Option<String>,
    pub fallback: bool,
    pub error: Option<RowError>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionHeader {
    pub format_version: u32,
    pub code_version: String,
    pub config_digest: String,
    pub dataset_digest: String,
    /// Strategy as requested, before ablation.
    pub strategy: String,
    pub ablation: Ablation,
    /// Decoded parameters in the decode config format.
    pub params: String,
    pub seed: u64,
    pub model_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl PredictionHeader {
    /// Row label for reports, e.g. `mcd` or `mcd (VE off)`.
    pub fn label(&self) -> String {
        if self.ablation.is_full() || self.strategy != Strategy::Mcd.as_str() {
            return self.strategy.clone();
        }
        let off: Vec<&str> = [
            (!self.ablation.video_enhanced).then_some("VE"),
            (!self.ablation.original).then_some("OR"),
        ]
        .into_iter()
        .flatten()
        .collect();
        format!("{} ({} off)", self.strategy, off.join("+"))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Line {
    Header(PredictionHeader),
    Prediction(PredictionRow),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionFile {
    pub header: PredictionHeader,
    /// Sorted by `sample_id`.
    pub rows: Vec<PredictionRow>,
}

impl PredictionFile {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Line::Header(self.header.clone()))?;
        out.push('\n');
        out.push_str(&self.body_jsonl()?);
        Ok(out)
    }

    /// Rows only, without the header.
    pub fn body_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(&Line::Prediction(r.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let fail = |m: String| Error::Format {
            path: path.to_path_buf(),
            message: m,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let header = match lines.next() {
            Some((_, l)) => {
                match serde_json::from_str(l).map_err(|e| fail(format!("line 1: {e}")))? {
                    Line::Header(h) => h,
                    Line::Prediction(_) => return Err(fail("first line is not a header".into())),
                }
            }
            None => return Err(fail("empty file".into())),
        };
        if header.format_version != PREDICTION_FORMAT_VERSION {
            return Err(fail(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut rows = Vec::new();
        for (i, l) in lines {
            match serde_json::from_str(l).map_err(|e| fail(format!("line {}: {e}", i + 1)))? {
                Line::Prediction(r) => rows.push(r),
                Line::Header(_) => return Err(fail(format!("line {}: second header", i + 1))),
            }
        }
        Ok(Self { header, rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, path)
    }

    /// Checks the header digests against the inputs that supposedly produced
    /// this file.
    pub fn verify_inputs(
        &self,
        model: &ToyModel,
        dataset: &Dataset,
        features: &FeatureStore,
    ) -> Result<()> {
        let computed = dataset_digest(dataset)?;
        if computed != self.header.dataset_digest {
            return Err(Error::DigestMismatch {
                what: "dataset".into(),
                recorded: self.header.dataset_digest.clone(),
                computed,
            });
        }
        let params = DecodeParams::from_config_str(&self.header.params)?;
        let computed = run_digest(
            model,
            dataset,
            features,
            &params,
            &self.header.ablation,
            &self.header.strategy,
        )?;
        if computed != self.header.config_digest {
            return Err(Error::DigestMismatch {
                what: "config".into(),
                recorded: self.header.config_digest.clone(),
                computed,
            });
        }
        Ok(())
    }
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn dataset_digest(dataset: &Dataset) -> Result<String> {
    Ok(sha256_hex(&[dataset.to_jsonl()?.as_bytes()]))
}

/// Digest of everything that determines a run's rows.
pub fn run_digest(
    model: &ToyModel,
    dataset: &Dataset,
    features: &FeatureStore,
    decoded: &DecodeParams,
    ablation: &Ablation,
    requested: &str,
) -> Result<String> {
    let ablation = serde_json::to_string(ablation)?;
    Ok(sha256_hex(&[
        CODE_VERSION.as_bytes(),
        &model.to_bytes(),
        dataset.to_jsonl()?.as_bytes(),
        &features.to_bytes(),
        decoded.to_config_string().as_bytes(),
        ablation.as_bytes(),
        requested.as_bytes(),
    ]))
}

fn unix_timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    format!("unix:{secs}")
}

enum Job<'a> {
    Avc(&'a crate::dataset::AvcSample),
    Iqp(&'a crate::dataset::IqpSample),
}

fn answer_job(
    model: &ToyModel,
    features: &FeatureStore,
    params: &DecodeParams,
    job: &Job<'_>,
) -> Result<(String, String, bool)> {
    match job {
        Job::Avc(s) => {
            let (a, fa) = ask(
                model,
                params,
                features.get(&s.video_id)?,
                &s.question,
                &s.options,
            )?;
            let (b, fb) = ask(
                model,
                params,
                features.get(&s.pair.video_id)?,
                &s.question,
                &s.options,
            )?;
            Ok((a, b, fa || fb))
        }
        Job::Iqp(s) => {
            let video = features.get(&s.video_id)?;
            let (a, fa) = ask(model, params, video, &s.question, &s.options)?;
            let (b, fb) = ask(model, params, video, &s.followup, &yes_no_options())?;
            Ok((a, b, fa || fb))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSettings {
    pub workers: usize,
    /// Recorded in the header when the model was built from a seed.
    pub model_seed: Option<u64>,
    pub timestamp: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            workers: 1,
            model_seed: None,
            timestamp: false,
        }
    }
}

/// Runs one variant over every sample on `settings.workers` threads. Sample failures
/// become rows with an error code; rows are sorted by sample id.
pub fn run_variant(
    model: &ToyModel,
    dataset: &Dataset,
    features: &FeatureStore,
    params: &DecodeParams,
    ablation: &Ablation,
    settings: &RunSettings,
) -> Result<PredictionFile> {
    params.validate()?;
    let decoded = ablation.apply(params);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let jobs: Vec<Job<'_>> = dataset
        .avc
        .iter()
        .map(Job::Avc)
        .chain(dataset.iqp.iter().map(Job::Iqp))
        .collect();
    let strategy = decoded.strategy.as_str().to_string();
    let mut rows: Vec<PredictionRow> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let (sample_id, task) = match job {
                    Job::Avc(s) => (s.sample_id.clone(), Task::Avc),
                    Job::Iqp(s) => (s.sample_id.clone(), Task::Iqp),
                };
                let mut row = PredictionRow {
                    sample_id,
                    task,
                    strategy: strategy.clone(),
                    seed: decoded.seed,
                    first: None,
                    second: None,
                    fallback: false,
                    error: None,
                };
                match answer_job(model, features, &decoded, job) {
                    Ok((a, b, fallback)) => {
                        row.first = Some(a);
                        row.second = Some(b);
                        row.fallback = fallback;
                    }
                    Err(e) => {
                        row.error = Some(RowError {
                            code: e.exit_code(),
                            message: e.to_string(),
                        })
                    }
                }
                row
            })
            .collect()
    });
    rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let header = PredictionHeader {
        format_version: PREDICTION_FORMAT_VERSION,
        code_version: CODE_VERSION.to_string(),
        config_digest: run_digest(
            model,
            dataset,
            features,
            &decoded,
            ablation,
            params.strategy.as_str(),
        )?,
        dataset_digest: dataset_digest(dataset)?,
        strategy: params.strategy.as_str().to_string(),
        ablation: *ablation,
        params: decoded.to_config_string(),
        seed: decoded.seed,
        model_seed: settings.model_seed,
        timestamp: settings.timestamp.then(unix_timestamp),
    };
    Ok(PredictionFile { header, rows })
}

/// File name for the `index`-th variant's predictions.
pub fn prediction_file_name(index: usize, params: &DecodeParams) -> String {
    format!("predictions-{index:02}-{}.jsonl", params.strategy)
}

/// Loads inputs, runs every variant and writes one prediction file each
/// into the output directory. Returns the files in variant order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<(PathBuf, PredictionFile)>> {
    config.validate()?;
    let model = config.model.load()?;
    let (dataset, _) = crate::dataset::load_dataset(&config.dataset)?;
    let features = FeatureStore::load(&config.features)?;
    std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let mut out = Vec::new();
    for (i, params) in config.variants.iter().enumerate() {
        let file = run_variant(
            &model,
            &dataset,
            &features,
            params,
            &config.ablation,
            &RunSettings {
                workers: config.workers,
                model_seed: config.model.seed(),
                timestamp: config.timestamp,
            },
        )?;
        let path = config.output_dir.join(prediction_file_name(i, params));
        file.save(&path)?;
        out.push((path, file));
    }
    Ok(out)
}

/// Scores a prediction file against its dataset. Rows with an error are
/// left out of every metric.
pub fn evaluate(predictions: &PredictionFile, dataset: &Dataset) -> Result<MetricsReport> {
    let expected: BTreeSet<&str> = dataset.sample_ids().collect();
    let mut got = BTreeSet::new();
    for r in &predictions.rows {
        if !got.insert(r.sample_id.as_str()) {
            return Err(Error::IdMismatch(format!(
                "duplicate prediction for {}",
                r.sample_id
            )));
        }
    }
    let missing: Vec<&str> = expected.difference(&got).copied().collect();
    let extra: Vec<&str> = got.difference(&expected).copied().collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut msg = Vec::new();
        if !missing.is_empty() {
            msg.push(format!("missing [{}]", missing.join(", ")));
        }
        if !extra.is_empty() {
            msg.push(format!("unexpected [{}]", extra.join(", ")));
        }
        return Err(Error::IdMismatch(msg.join("; ")));
    }

    let rows: std::collections::HashMap<&str, &PredictionRow> = predictions
        .rows
        .iter()
        .map(|r| (r.sample_id.as_str(), r))
        .collect();
    let answered = |id: &str| {
        let r = rows[id];
        match (&r.error, &r.first, &r.second) {
            (None, Some(a), Some(b)) => Some((a.clone(), b.clone())),
            _ => None,
        }
    };
    let mut pairs = Vec::new();
    for s in &dataset.avc {
        if let Some((a, b)) = answered(&s.sample_id) {
            pairs.push(AvcPairRecord {
                pair_id: s.sample_id.clone(),
                pair_kind: s.pair.kind,
                question_id: s.sample_id.clone(),
                pred_original: a,
                gold_original: s.gold.clone(),
                pred_counterpart: b,
                gold_counterpart: s.pair.gold.clone(),
            });
        }
    }
    let mut iqp = Vec::new();
    for s in &dataset.iqp {
        if let Some((a, b)) = answered(&s.sample_id) {
            iqp.push(IqpRecord {
                orig_correct: a == s.gold,
                followup_correct: b == s.followup_gold.as_str(),
            });
        }
    }
    Ok(MetricsReport::compute(&pairs, &iqp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub metrics: MetricsReport,
}

/// Strategy-by-metric comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub format_version: u32,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ComparisonReport {
    pub fn new(rows: Vec<ReportRow>) -> Self {
        Self {
            format_version: REPORT_FORMAT_VERSION,
            columns: REPORT_COLUMNS.iter().map(|c| c.to_string()).collect(),
            rows,
        }
    }

    /// Evaluates each file and labels its row from the header.
    pub fn from_predictions(files: &[PredictionFile], dataset: &Dataset) -> Result<Self> {
        let rows = files
            .iter()
            .map(|f| {
                Ok(ReportRow {
                    label: f.header.label(),
                    metrics: evaluate(f, dataset)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(rows))
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<(String, MetricsReport)> = self
            .rows
            .iter()
            .map(|r| (r.label.clone(), r.metrics))
            .collect();
        render_table(&rows)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Last-layer attention of the final position at one sequence position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPoint {
    pub position: usize,
    /// `prefix`, `video` or `text`.
    pub segment: String,
    /// Mean over heads.
    pub weak: f64,
    pub strong: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub format_version: u32,
    pub sample_id: String,
    pub video_id: String,
    pub alpha: f64,
    pub layer: usize,
    pub seq_len: usize,
    pub video_span: [usize; 2],
    /// Head-averaged video-span mass.
    pub weak_video_mass: f64,
    pub strong_video_mass: f64,
    pub rows: Vec<AttentionPoint>,
}

/// Step-one last-layer attention of the weak and strong experts for a
/// prompt over `video`. `prompt` includes the prefix.
pub fn emit_attention_report(
    model: &ToyModel,
    sample_id: &str,
    video: &VideoFeatures,
    prompt: &[TokenId],
    params: &DecodeParams,
) -> Result<AttentionReport> {
    params.validate()?;
    let n_k = PROMPT_PREFIX.len();
    let layout = InputLayout {
        n_k,
        n_v: video.n_frames(),
        text_len: prompt.len().saturating_sub(n_k),
    };
    let weak = model.forward(&layout, Some(video), prompt, &[], None)?;
    let strong = model.forward(
        &layout,
        Some(video),
        prompt,
        &[],
        Some(&params.intervention),
    )?;
    let layer = model.config().n_layers - 1;
    let heads = model.config().n_heads as f64;
    let mean_weight = |t: &crate::model::ForwardTrace, pos: usize| {
        t.attention_rows[layer]
            .iter()
            .map(|r| r.weights[pos])
            .sum::<f64>()
            / heads
    };
    let mean_mass = |t: &crate::model::ForwardTrace| {
        (0..model.config().n_heads)
            .map(|h| t.video_mass(layer, h))
            .sum::<f64>()
            / heads
    };
    let span = layout.video_span();
    let rows = (0..weak.seq_len)
        .map(|pos| AttentionPoint {
            position: pos,
            segment: if pos < span.start {
                "prefix"
            } else if pos < span.end {
                "video"
            } else {
                "text"
            }
            .to_string(),
            weak: mean_weight(&weak, pos),
            strong: mean_weight(&strong, pos),
        })
        .collect();
    Ok(AttentionReport {
        format_version: REPORT_FORMAT_VERSION,
        sample_id: sample_id.to_string(),
        video_id: video.video_id.clone(),
        alpha: params.intervention.alpha,
        layer,
        seq_len: weak.seq_len,
        video_span: [span.start, span.end],
        weak_video_mass: mean_mass(&weak),
        strong_video_mass: mean_mass(&strong),
        rows,
    })
}

/// Attention report for a dataset sample's original question.
pub fn attention_for_sample(
    model: &ToyModel,
    dataset: &Dataset,
    features: &FeatureStore,
    sample_id: &str,
    params: &DecodeParams,
) -> Result<AttentionReport> {
    let (video_id, question, options) =
        if let Some(s) = dataset.avc.iter().find(|s| s.sample_id == sample_id) {
            (&s.video_id, &s.question, &s.options)
        } else if let Some(s) = dataset.iqp.iter().find(|s| s.sample_id == sample_id) {
            (&s.video_id, &s.question, &s.options)
        } else {
            return Err(Error::IdMismatch(format!("no sample {sample_id}")));
        };
    let prompt = choice_prompt(question, options)?;
    emit_attention_report(model, sample_id, features.get(video_id)?, &prompt, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, SyntheticConfig};

    fn setup() -> (ToyModel, Dataset, FeatureStore) {
        let config = SyntheticConfig {
            n_avc: 6,
            n_iqp: 6,
            n_videos: 6,
            ..SyntheticConfig::default()
        };
        let (d, f) = generate_synthetic_dataset(&config, 4).unwrap();
        (ToyModel::build(ModelConfig::default(), 1).unwrap(), d, f)
    }

    fn settings(workers: usize) -> RunSettings {
        RunSettings {
            workers,
            ..RunSettings::default()
        }
    }

    fn perfect(dataset: &Dataset, header: PredictionHeader) -> PredictionFile {
        let mut rows: Vec<PredictionRow> = dataset
            .avc
            .iter()
            .map(|s| {
                (
                    s.sample_id.clone(),
                    Task::Avc,
                    s.gold.clone(),
                    s.pair.gold.clone(),
                )
            })
            .chain(dataset.iqp.iter().map(|s| {
                (
                    s.sample_id.clone(),
                    Task::Iqp,
                    s.gold.clone(),
                    s.followup_gold.as_str().to_string(),
                )
            }))
            .map(|(id, task, a, b)| PredictionRow {
                sample_id: id,
                task,
                strategy: "greedy".into(),
                seed: 0,
                first: Some(a),
                second: Some(b),
                fallback: false,
                error: None,
            })
            .collect();
        rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        PredictionFile { header, rows }
    }

    #[test]
    fn ablation_mapping() {
        let mcd = DecodeParams::with_strategy(Strategy::Mcd);
        let on = |ve, or| Ablation {
            video_enhanced: ve,
            original: or,
        };
        assert_eq!(on(true, true).apply(&mcd), mcd);
        assert_eq!(on(false, true).apply(&mcd).strategy, Strategy::Vcd);
        assert_eq!(on(true, false).apply(&mcd).lambda, 0.0);
        assert_eq!(on(false, false).apply(&mcd).strategy, Strategy::Greedy);
        let beam = DecodeParams::with_strategy(Strategy::Beam);
        assert_eq!(on(false, false).apply(&beam), beam);
    }

    #[test]
    fn rows_sorted_and_complete() {
        let (m, d, f) = setup();
        let p = DecodeParams::with_strategy(Strategy::Mcd);
        let file = run_variant(&m, &d, &f, &p, &Ablation::default(), &settings(2)).unwrap();
        assert_eq!(file.rows.len(), 12);
        assert!(file
            .rows
            .windows(2)
            .all(|w| w[0].sample_id < w[1].sample_id));
        assert!(file.rows.iter().all(|r| r.error.is_none()));
        file.verify_inputs(&m, &d, &f).unwrap();
        evaluate(&file, &d).unwrap();
    }

    #[test]
    fn missing_video_is_a_row_error() {
        let (m, mut d, f) = setup();
        d.avc[0].pair.video_id = "nowhere".into();
        let p = DecodeParams::default();
        let file = run_variant(&m, &d, &f, &p, &Ablation::default(), &settings(1)).unwrap();
        let bad: Vec<_> = file.rows.iter().filter(|r| r.error.is_some()).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].error.as_ref().unwrap().code, 2);
        assert!(bad[0].first.is_none());
    }

    #[test]
    fn jsonl_round_trip_and_tamper_check() {
        let (m, d, f) = setup();
        let file = run_variant(
            &m,
            &d,
            &f,
            &DecodeParams::default(),
            &Ablation::default(),
            &settings(1),
        )
        .unwrap();
        let text = file.to_jsonl().unwrap();
        assert!(!text.contains("timestamp"));
        let back = PredictionFile::from_jsonl(&text, Path::new("x")).unwrap();
        assert_eq!(back, file);
        let mut tampered = file.clone();
        tampered.header.params = tampered.header.params.replace("gamma = 0.1", "gamma = 0.2");
        assert!(matches!(
            tampered.verify_inputs(&m, &d, &f),
            Err(Error::DigestMismatch { .. })
        ));
        let mut d2 = d.clone();
        d2.avc[0].question.push(9);
        assert!(file.verify_inputs(&m, &d2, &f).is_err());
    }

    #[test]
    fn timestamp_flag() {
        let (m, d, f) = setup();
        let file = run_variant(
            &m,
            &d,
            &f,
            &DecodeParams::default(),
            &Ablation::default(),
            &RunSettings {
                timestamp: true,
                ..settings(1)
            },
        )
        .unwrap();
        assert!(file
            .header
            .timestamp
            .as_deref()
            .unwrap()
            .starts_with("unix:"));
    }

    #[test]
    fn evaluate_reports_missing_ids() {
        let (m, d, f) = setup();
        let mut file = run_variant(
            &m,
            &d,
            &f,
            &DecodeParams::default(),
            &Ablation::default(),
            &settings(1),
        )
        .unwrap();
        let gone = file.rows.remove(3).sample_id;
        match evaluate(&file, &d) {
            Err(Error::IdMismatch(msg)) => assert!(msg.contains(&gone), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn perfect_predictions() {
        let (m, d, f) = setup();
        let header = run_variant(
            &m,
            &d,
            &f,
            &DecodeParams::default(),
            &Ablation::default(),
            &settings(1),
        )
        .unwrap()
        .header;
        let r = evaluate(&perfect(&d, header), &d).unwrap();
        assert_eq!(
            r.columns(),
            [
                Some(100.0),
                Some(0.0),
                Some(100.0),
                Some(0.0),
                r.tcr,
                Some(100.0)
            ]
        );
        assert_eq!(r.tcr, Some(100.0));
    }

    #[test]
    fn attention_report_shape() {
        let (m, d, f) = setup();
        let mut p = DecodeParams::default();
        p.intervention.alpha = 0.0;
        let r = attention_for_sample(&m, &d, &f, &d.avc[0].sample_id, &p).unwrap();
        assert_eq!(r.rows.len(), r.seq_len);
        assert!((r.weak_video_mass - r.strong_video_mass).abs() <= 1e-12);
        p.intervention.alpha = 0.5;
        let r = attention_for_sample(&m, &d, &f, &d.avc[0].sample_id, &p).unwrap();
        assert!(r.strong_video_mass >= r.weak_video_mass);
        assert_eq!(
            r.rows.iter().filter(|p| p.segment == "video").count(),
            r.video_span[1] - r.video_span[0]
        );
        assert!(attention_for_sample(&m, &d, &f, "nope", &p).is_err());
    }

    #[test]
    fn labels() {
        let (m, d, f) = setup();
        let p = DecodeParams::with_strategy(Strategy::Mcd);
        let off = Ablation {
            video_enhanced: false,
            original: true,
        };
        let file = run_variant(&m, &d, &f, &p, &off, &settings(1)).unwrap();
        assert_eq!(file.header.label(), "mcd (VE off)");
        assert_eq!(file.rows[0].strategy, "vcd");
    }
}
