//! Python bindings for `mcd_core`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use mcd_core::branches::{compute_branches, BranchOutputs, Query};
use mcd_core::dataset::{self, AnswerOption, Dataset, FeatureStore, SyntheticConfig};
use mcd_core::decoding::{self, DecodeParams as CoreParams, PlausibilityReference, Strategy};
use mcd_core::harness::{self, Ablation, PredictionFile, RunSettings};
use mcd_core::metrics::{
    self, AvcPairRecord, InterplayCounts, IqpRecord, MetricsReport, PairKind, REPORT_COLUMNS,
};
use mcd_core::model::{InputLayout, ModelConfig, TokenId, ToyModel as CoreModel, VideoFeatures};
use mcd_core::numerics::{self, ProbabilityDistribution};
use mcd_core::Error;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn dist(p: Vec<f64>) -> PyResult<ProbabilityDistribution> {
    ProbabilityDistribution::new(p).map_err(to_py)
}

fn video(frames: Vec<Vec<f64>>) -> PyResult<VideoFeatures> {
    VideoFeatures::new("video", frames).map_err(to_py)
}

#[pyfunction]
fn softmax(scores: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(numerics::softmax(&scores).map_err(to_py)?.into_inner())
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    numerics::cosine_similarity(&a, &b).map_err(to_py)
}

#[pyfunction]
fn plausibility_mask(p_reference: Vec<f64>, beta: f64) -> PyResult<Vec<usize>> {
    decoding::plausibility_mask(&dist(p_reference)?, beta).map_err(to_py)
}

#[pyfunction]
fn vcd_combine(p_expert: Vec<f64>, p_amateur: Vec<f64>, gamma: f64) -> PyResult<Vec<f64>> {
    decoding::vcd_combine(&dist(p_expert)?, &dist(p_amateur)?, gamma).map_err(to_py)
}

/// Returns `{"raw", "scores", "admissible", "distribution"}`;
/// `distribution` is None when the contrast leaves nothing positive.
#[pyfunction]
#[pyo3(signature = (p_amateur, p_weak, p_strong, gamma = 0.1, lambda_ = 0.5, beta = 0.1))]
fn mcd_combine<'py>(
    py: Python<'py>,
    p_amateur: Vec<f64>,
    p_weak: Vec<f64>,
    p_strong: Vec<f64>,
    gamma: f64,
    lambda_: f64,
    beta: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let branches = BranchOutputs {
        p_amateur: dist(p_amateur)?,
        p_weak: dist(p_weak)?,
        p_strong: dist(p_strong)?,
    };
    let params = CoreParams {
        gamma,
        lambda: lambda_,
        beta,
        ..CoreParams::with_strategy(Strategy::Mcd)
    };
    let out = PyDict::new(py);
    match decoding::mcd_combine(&branches, &params) {
        Ok(c) => {
            out.set_item(
                "distribution",
                c.distribution().ok().map(|d| d.into_inner()),
            )?;
            out.set_item("raw", c.raw)?;
            out.set_item("scores", c.scores)?;
            out.set_item("admissible", c.admissible)?;
        }
        Err(Error::ContrastAnnihilated) => {
            out.set_item("distribution", None::<Vec<f64>>)?;
            out.set_item(
                "raw",
                decoding::vcd_combine(
                    &decoding::integrated_expert(&branches.p_weak, &branches.p_strong, lambda_)
                        .map_err(to_py)?,
                    &branches.p_amateur,
                    gamma,
                )
                .map_err(to_py)?,
            )?;
            out.set_item("scores", vec![0.0; branches.p_weak.len()])?;
            out.set_item(
                "admissible",
                decoding::plausibility_mask(&branches.p_weak, beta).map_err(to_py)?,
            )?;
        }
        Err(e) => return Err(to_py(e)),
    }
    Ok(out)
}

#[pyclass(name = "DecodeParams", module = "mcd")]
struct PyDecodeParams {
    inner: CoreParams,
}

#[pymethods]
impl PyDecodeParams {
    #[new]
    #[pyo3(signature = (
        strategy = "greedy",
        gamma = decoding::DEFAULT_GAMMA,
        lambda_ = decoding::DEFAULT_LAMBDA,
        beta = decoding::DEFAULT_BETA,
        alpha = decoding::DEFAULT_ALPHA,
        beam_width = 3,
        top_k = 10,
        top_p = 0.9,
        max_new_tokens = 16,
        seed = 0,
        plausibility_reference = "weak",
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        strategy: &str,
        gamma: f64,
        lambda_: f64,
        beta: f64,
        alpha: f64,
        beam_width: usize,
        top_k: usize,
        top_p: f64,
        max_new_tokens: usize,
        seed: u64,
        plausibility_reference: &str,
    ) -> PyResult<Self> {
        let mut p = CoreParams::with_strategy(strategy.parse().map_err(to_py)?);
        p.gamma = gamma;
        p.lambda = lambda_;
        p.beta = beta;
        p.intervention.alpha = alpha;
        p.beam_width = beam_width;
        p.top_k = top_k;
        p.top_p = top_p;
        p.max_new_tokens = max_new_tokens;
        p.seed = seed;
        p.plausibility_reference = match plausibility_reference {
            "weak" => PlausibilityReference::WeakExpert,
            "integrated" => PlausibilityReference::IntegratedExpert,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown plausibility reference '{other}'"
                )))
            }
        };
        p.validate().map_err(to_py)?;
        Ok(Self { inner: p })
    }

    #[staticmethod]
    fn from_config(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreParams::from_config_str(text).map_err(to_py)?,
        })
    }

    fn to_config(&self) -> String {
        self.inner.to_config_string()
    }

    #[getter]
    fn strategy(&self) -> &'static str {
        self.inner.strategy.as_str()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.intervention.alpha
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        let p = &self.inner;
        format!(
            "DecodeParams(strategy='{}', gamma={}, lambda_={}, beta={}, alpha={})",
            p.strategy, p.gamma, p.lambda, p.beta, p.intervention.alpha
        )
    }
}

#[pyclass(name = "ToyModel", module = "mcd")]
struct PyToyModel {
    inner: CoreModel,
}

impl PyToyModel {
    fn query<'a>(&self, prompt: &'a [TokenId], video: &'a VideoFeatures) -> PyResult<Query<'a>> {
        Query::new(video, prompt, dataset::PROMPT_PREFIX.len()).map_err(to_py)
    }
}

#[pymethods]
impl PyToyModel {
    #[new]
    #[pyo3(signature = (
        seed = 0,
        vocab_size = 64,
        d_model = 32,
        n_layers = 2,
        n_heads = 4,
        max_seq_len = 256,
        video_feature_dim = 16,
    ))]
    fn new(
        seed: u64,
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        max_seq_len: usize,
        video_feature_dim: usize,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            max_seq_len,
            video_feature_dim,
        };
        Ok(Self {
            inner: CoreModel::build(config, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: CoreModel::from_bytes(data).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreModel::load(&path).map_err(to_py)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.inner.config();
        let d = PyDict::new(py);
        d.set_item("vocab_size", c.vocab_size)?;
        d.set_item("d_model", c.d_model)?;
        d.set_item("n_layers", c.n_layers)?;
        d.set_item("n_heads", c.n_heads)?;
        d.set_item("max_seq_len", c.max_seq_len)?;
        d.set_item("video_feature_dim", c.video_feature_dim)?;
        Ok(d)
    }

    /// Last-position logits. `prompt` starts with the one-token prefix; the
    /// video, if given, sits right after it. `alpha` amplifies attention to
    /// the video in every layer and head.
    #[pyo3(signature = (prompt, video = None, alpha = None))]
    fn forward(
        &self,
        prompt: Vec<TokenId>,
        video: Option<Vec<Vec<f64>>>,
        alpha: Option<f64>,
    ) -> PyResult<Vec<f64>> {
        let video = video.map(self::video).transpose()?;
        let n_k = dataset::PROMPT_PREFIX.len();
        let layout = match &video {
            Some(v) => InputLayout {
                n_k,
                n_v: v.n_frames(),
                text_len: prompt.len().saturating_sub(n_k),
            },
            None => InputLayout::text_only(prompt.len()),
        };
        let intervention = alpha.map(mcd_core::model::AttentionIntervention::new);
        let trace = self
            .inner
            .forward(&layout, video.as_ref(), &prompt, &[], intervention.as_ref())
            .map_err(to_py)?;
        Ok(trace.last_position_logits)
    }

    /// Step-one `{"amateur", "weak", "strong"}` distributions.
    #[pyo3(signature = (prompt, video, alpha = decoding::DEFAULT_ALPHA))]
    fn branches<'py>(
        &self,
        py: Python<'py>,
        prompt: Vec<TokenId>,
        video: Vec<Vec<f64>>,
        alpha: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let v = self::video(video)?;
        let q = self.query(&prompt, &v)?;
        let b = compute_branches(
            &self.inner,
            &q,
            &[],
            &mcd_core::model::AttentionIntervention::new(alpha),
        )
        .map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("amateur", b.p_amateur.into_inner())?;
        d.set_item("weak", b.p_weak.into_inner())?;
        d.set_item("strong", b.p_strong.into_inner())?;
        Ok(d)
    }

    fn decode(
        &self,
        prompt: Vec<TokenId>,
        video: Vec<Vec<f64>>,
        params: &PyDecodeParams,
    ) -> PyResult<Vec<TokenId>> {
        let v = self::video(video)?;
        let q = self.query(&prompt, &v)?;
        let mut rng = numerics::SeededRng::new(params.inner.seed);
        decoding::decode(&self.inner, &q, &params.inner, &mut rng).map_err(to_py)
    }

    /// Answers a choice question; `options` are `(id, content tokens)`
    /// pairs with ids `A`..`E` or `yes`/`no`. Returns `(id, fallback)`.
    fn answer(
        &self,
        question: Vec<TokenId>,
        options: Vec<(String, Vec<TokenId>)>,
        video: Vec<Vec<f64>>,
        params: &PyDecodeParams,
    ) -> PyResult<(String, bool)> {
        let options: Vec<AnswerOption> = options
            .into_iter()
            .map(|(id, tokens)| AnswerOption { id, tokens })
            .collect();
        dataset::ask(
            &self.inner,
            &params.inner,
            &self::video(video)?,
            &question,
            &options,
        )
        .map_err(to_py)
    }
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (name, v) in REPORT_COLUMNS.iter().zip(r.columns()) {
        d.set_item(*name, v)?;
    }
    Ok(d)
}

/// Six-column report from `(kind, pred_original, gold_original,
/// pred_counterpart, gold_counterpart)` pairs and `(orig_correct,
/// followup_correct)` records. `kind` is `relevant` or `distorted`.
#[pyfunction]
fn metrics_report<'py>(
    py: Python<'py>,
    pairs: Vec<(String, String, String, String, String)>,
    iqp: Vec<(bool, bool)>,
) -> PyResult<Bound<'py, PyDict>> {
    let pairs = pairs
        .into_iter()
        .enumerate()
        .map(|(i, (kind, po, go, pc, gc))| {
            let pair_kind = match kind.as_str() {
                "relevant" => PairKind::Relevant,
                "distorted" => PairKind::Distorted,
                other => {
                    return Err(PyValueError::new_err(format!(
                        "unknown pair kind '{other}'"
                    )))
                }
            };
            let r = AvcPairRecord {
                pair_id: i.to_string(),
                pair_kind,
                question_id: i.to_string(),
                pred_original: po,
                gold_original: go,
                pred_counterpart: pc,
                gold_counterpart: gc,
            };
            r.validate().map_err(to_py)?;
            Ok(r)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let iqp: Vec<IqpRecord> = iqp
        .into_iter()
        .map(|(orig_correct, followup_correct)| IqpRecord {
            orig_correct,
            followup_correct,
        })
        .collect();
    report_dict(py, &MetricsReport::compute(&pairs, &iqp))
}

#[pyfunction]
fn compute_tcr(n_cr: u64, n_pr: u64, n_pv: u64, n_cv: u64) -> PyResult<f64> {
    metrics::compute_tcr(&InterplayCounts::new(n_cr, n_pr, n_pv, n_cv)).map_err(to_py)
}

#[pyfunction]
fn compute_ra(n_cr: u64, n_pr: u64, n_pv: u64, n_cv: u64) -> PyResult<f64> {
    metrics::compute_ra(&InterplayCounts::new(n_cr, n_pr, n_pv, n_cv)).map_err(to_py)
}

/// Returns `(dataset_jsonl, feature_store_bytes)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, n_avc = 40, n_iqp = 40, n_videos = 20, n_options = 4, sigma = 1.0))]
fn generate_synthetic_dataset<'py>(
    py: Python<'py>,
    seed: u64,
    n_avc: usize,
    n_iqp: usize,
    n_videos: usize,
    n_options: usize,
    sigma: f64,
) -> PyResult<(String, Bound<'py, PyBytes>)> {
    let config = SyntheticConfig {
        n_avc,
        n_iqp,
        n_videos,
        n_options,
        sigma,
        ..SyntheticConfig::default()
    };
    let (d, f) = dataset::generate_synthetic_dataset(&config, seed).map_err(to_py)?;
    Ok((
        d.to_jsonl().map_err(to_py)?,
        PyBytes::new(py, &f.to_bytes()),
    ))
}

fn parse_inputs(dataset_jsonl: &str, features: &[u8]) -> PyResult<(Dataset, FeatureStore)> {
    let (d, _) = Dataset::from_jsonl(dataset_jsonl).map_err(to_py)?;
    Ok((d, FeatureStore::from_bytes(features).map_err(to_py)?))
}

/// Runs one strategy over a dataset; returns the prediction file as JSONL.
#[pyfunction]
#[pyo3(signature = (model, dataset_jsonl, features, params, workers = 1, video_enhanced = true, original = true))]
fn run_variant(
    model: &PyToyModel,
    dataset_jsonl: &str,
    features: &[u8],
    params: &PyDecodeParams,
    workers: usize,
    video_enhanced: bool,
    original: bool,
) -> PyResult<String> {
    let (d, f) = parse_inputs(dataset_jsonl, features)?;
    let ablation = Ablation {
        video_enhanced,
        original,
    };
    let settings = RunSettings {
        workers,
        ..RunSettings::default()
    };
    harness::run_variant(&model.inner, &d, &f, &params.inner, &ablation, &settings)
        .and_then(|p| p.to_jsonl())
        .map_err(to_py)
}

#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    predictions_jsonl: &str,
    dataset_jsonl: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let p = PredictionFile::from_jsonl(predictions_jsonl, std::path::Path::new("<predictions>"))
        .map_err(to_py)?;
    let (d, _) = Dataset::from_jsonl(dataset_jsonl).map_err(to_py)?;
    report_dict(py, &harness::evaluate(&p, &d).map_err(to_py)?)
}

/// Builds and verifies the biased scenario. Returns a dict with the model,
/// the MCD parameters, the dataset (JSONL), features (bytes), the
/// certificate (JSON) and the greedy and MCD metric rows.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn build_biased_scenario<'py>(py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let s = dataset::build_biased_scenario(seed).map_err(to_py)?;
    let settings = RunSettings::default();
    let score = |p: &CoreParams| {
        harness::run_variant(
            &s.model,
            &s.dataset,
            &s.features,
            p,
            &Ablation::default(),
            &settings,
        )
        .and_then(|f| harness::evaluate(&f, &s.dataset))
        .map_err(to_py)
    };
    let greedy = score(&CoreParams::with_strategy(Strategy::Greedy))?;
    let mcd = score(&s.params)?;
    let d = PyDict::new(py);
    d.set_item(
        "certificate",
        serde_json::to_string(&s.certificate).map_err(|e| to_py(e.into()))?,
    )?;
    d.set_item("dataset", s.dataset.to_jsonl().map_err(to_py)?)?;
    d.set_item("features", PyBytes::new(py, &s.features.to_bytes()))?;
    d.set_item("greedy", report_dict(py, &greedy)?)?;
    d.set_item("mcd", report_dict(py, &mcd)?)?;
    d.set_item("params", Py::new(py, PyDecodeParams { inner: s.params })?)?;
    d.set_item("model", Py::new(py, PyToyModel { inner: s.model })?)?;
    Ok(d)
}

#[pymodule]
fn mcd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyToyModel>()?;
    m.add_class::<PyDecodeParams>()?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(plausibility_mask, m)?)?;
    m.add_function(wrap_pyfunction!(vcd_combine, m)?)?;
    m.add_function(wrap_pyfunction!(mcd_combine, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_report, m)?)?;
    m.add_function(wrap_pyfunction!(compute_tcr, m)?)?;
    m.add_function(wrap_pyfunction!(compute_ra, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_variant, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(build_biased_scenario, m)?)?;
    m.add("DEFAULT_GAMMA", decoding::DEFAULT_GAMMA)?;
    m.add("DEFAULT_BETA", decoding::DEFAULT_BETA)?;
    Ok(())
}
