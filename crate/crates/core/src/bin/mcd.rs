use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mcd_core::dataset::{
    build_avc_pairs, build_biased_scenario, generate_synthetic_dataset, load_dataset, FeatureStore,
    SyntheticConfig, DATASET_FORMAT_VERSION,
};
use mcd_core::decoding::{DecodeParams, Strategy};
use mcd_core::harness::{
    attention_for_sample, evaluate, run_experiment, run_variant, Ablation, ComparisonReport,
    ExperimentConfig, ModelSource, PredictionFile, RunSettings,
};
use mcd_core::model::{ModelConfig, ToyModel};
use mcd_core::{Error, Result};

/// Multi-branch contrastive decoding experiments on a toy video-language model.
///
/// Exit codes: 0 success, 1 usage or config error, 2 data error,
/// 3 internal invariant violation.
#[derive(Parser)]
#[command(name = "mcd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and feature store.
    Gen(GenArgs),
    /// Pair every video with its nearest neighbour and a distorted copy.
    Pair(PairArgs),
    /// Build a seeded toy model and save its weights.
    Model(ModelArgs),
    /// Run decoding variants over a dataset and write prediction files.
    Decode(DecodeArgs),
    /// Score one prediction file.
    Eval(EvalArgs),
    /// Merge prediction files into one comparison table.
    Report(ReportArgs),
    /// Dump step-one last-layer attention of the weak and strong experts.
    Attn(AttnArgs),
    /// Build and verify the biased scenario, then compare greedy with MCD on it.
    Scenario(ScenarioArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    n_avc: usize,
    #[arg(long, default_value_t = 40)]
    n_iqp: usize,
    #[arg(long, default_value_t = 20)]
    n_videos: usize,
    #[arg(long, default_value_t = 4)]
    n_options: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    /// Noise scale of distorted counterparts.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long)]
    out_dataset: PathBuf,
    #[arg(long)]
    out_features: PathBuf,
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feature store including the distorted copies.
    #[arg(long)]
    out_features: PathBuf,
    /// JSON lines, one pair per line after a header.
    #[arg(long)]
    out_pairs: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 256)]
    max_seq_len: usize,
    #[arg(long, default_value_t = 16)]
    video_feature_dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelSourceArgs {
    /// Build the default-shaped model from this seed.
    #[arg(long, conflicts_with = "weights")]
    model_seed: Option<u64>,
    /// Load weights saved by `mcd model` or `mcd scenario`.
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl ModelSourceArgs {
    fn source(&self) -> ModelSource {
        match (&self.weights, self.model_seed) {
            (Some(path), _) => ModelSource::Weights(path.clone()),
            (None, seed) => ModelSource::Build {
                config: ModelConfig::default(),
                seed: seed.unwrap_or(0),
            },
        }
    }
}

#[derive(Args)]
struct ParamArgs {
    /// Decode config file; flags below override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ParamArgs {
    fn base(&self) -> Result<DecodeParams> {
        let mut p = match &self.params {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
                DecodeParams::from_config_str(&text)?
            }
            None => DecodeParams::default(),
        };
        if let Some(v) = self.gamma {
            p.gamma = v;
        }
        if let Some(v) = self.lambda {
            p.lambda = v;
        }
        if let Some(v) = self.beta {
            p.beta = v;
        }
        if let Some(v) = self.alpha {
            p.intervention.alpha = v;
        }
        if let Some(v) = self.seed {
            p.seed = v;
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    model: ModelSourceArgs,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Strategies to run, one prediction file each. Defaults to the params file's.
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<Strategy>,
    #[command(flatten)]
    params: ParamArgs,
    /// Drop the video-enhanced branch from MCD variants.
    #[arg(long)]
    no_video_enhanced: bool,
    /// Drop the original (weak expert) branch from MCD variants.
    #[arg(long)]
    no_original: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Record wall-clock time in headers.
    #[arg(long)]
    timestamp: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// With a model source, also check the config digest.
    #[arg(long)]
    features: Option<PathBuf>,
    #[command(flatten)]
    model: ModelSourceArgs,
    /// Skip the dataset digest check.
    #[arg(long)]
    no_digest_check: bool,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, required = true, num_args = 1..)]
    predictions: Vec<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out_table: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Args)]
struct AttnArgs {
    #[command(flatten)]
    model: ModelSourceArgs,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    sample: String,
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes model.bin, dataset.jsonl, features.bin, params.cfg,
    /// certificate.json, report.txt and report.json.
    #[arg(long)]
    out: PathBuf,
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io(path, e))
}

fn to_json(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn gen(a: GenArgs) -> Result<()> {
    let config = SyntheticConfig {
        n_avc: a.n_avc,
        n_iqp: a.n_iqp,
        n_videos: a.n_videos,
        n_options: a.n_options,
        feature_dim: a.feature_dim,
        frames_per_video: a.frames,
        sigma: a.sigma,
        vocab_size: a.vocab_size,
    };
    let (dataset, features) = generate_synthetic_dataset(&config, a.seed)?;
    write(&a.out_dataset, dataset.to_jsonl()?)?;
    write(&a.out_features, features.to_bytes())?;
    println!(
        "wrote {} avc and {} iqp samples over {} videos",
        dataset.avc.len(),
        dataset.iqp.len(),
        features.len()
    );
    Ok(())
}

fn pair(a: PairArgs) -> Result<()> {
    let store = FeatureStore::load(&a.features)?;
    let (pairs, enlarged) = build_avc_pairs(&store, a.sigma, a.seed)?;
    let mut out = serde_json::json!({"record": "header", "format_version": DATASET_FORMAT_VERSION})
        .to_string();
    out.push('\n');
    for p in &pairs {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    write(&a.out_pairs, out)?;
    write(&a.out_features, enlarged.to_bytes())?;
    println!("wrote {} pairs", pairs.len());
    Ok(())
}

fn model(a: ModelArgs) -> Result<()> {
    let config = ModelConfig {
        vocab_size: a.vocab_size,
        d_model: a.d_model,
        n_layers: a.n_layers,
        n_heads: a.n_heads,
        max_seq_len: a.max_seq_len,
        video_feature_dim: a.video_feature_dim,
    };
    let m = ToyModel::build(config, a.seed)?;
    write(&a.out, m.to_bytes())?;
    println!("wrote model with seed {}", a.seed);
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let base = a.params.base()?;
    let strategies = if a.strategy.is_empty() {
        vec![base.strategy]
    } else {
        a.strategy.clone()
    };
    let config = ExperimentConfig {
        model: a.model.source(),
        dataset: a.dataset,
        features: a.features,
        variants: strategies
            .into_iter()
            .map(|s| DecodeParams {
                strategy: s,
                ..base.clone()
            })
            .collect(),
        ablation: Ablation {
            video_enhanced: !a.no_video_enhanced,
            original: !a.no_original,
        },
        output_dir: a.out,
        workers: a.workers,
        timestamp: a.timestamp,
    };
    for (path, file) in run_experiment(&config)? {
        let failed = file.rows.iter().filter(|r| r.error.is_some()).count();
        println!(
            "{}: {} rows, {failed} failed -> {}",
            file.header.label(),
            file.rows.len(),
            path.display()
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let predictions = PredictionFile::load(&a.predictions)?;
    let (dataset, _) = load_dataset(&a.dataset)?;
    if let Some(features) = &a.features {
        let model = a.model.source().load()?;
        predictions.verify_inputs(&model, &dataset, &FeatureStore::load(features)?)?;
    } else if !a.no_digest_check {
        let computed = mcd_core::harness::dataset_digest(&dataset)?;
        if computed != predictions.header.dataset_digest {
            return Err(Error::DigestMismatch {
                what: "dataset".into(),
                recorded: predictions.header.dataset_digest.clone(),
                computed,
            });
        }
    }
    let report = ComparisonReport::new(vec![mcd_core::harness::ReportRow {
        label: predictions.header.label(),
        metrics: evaluate(&predictions, &dataset)?,
    }]);
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write(out, report.to_json()?)?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let (dataset, _) = load_dataset(&a.dataset)?;
    let files = a
        .predictions
        .iter()
        .map(|p| PredictionFile::load(p))
        .collect::<Result<Vec<_>>>()?;
    let report = ComparisonReport::from_predictions(&files, &dataset)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(out) = &a.out_table {
        write(out, &table)?;
    }
    if let Some(out) = &a.out_json {
        write(out, report.to_json()?)?;
    }
    Ok(())
}

fn attn(a: AttnArgs) -> Result<()> {
    let model = a.model.source().load()?;
    let (dataset, _) = load_dataset(&a.dataset)?;
    let features = FeatureStore::load(&a.features)?;
    let params = a.params.base()?;
    let r = attention_for_sample(&model, &dataset, &features, &a.sample, &params)?;
    write(&a.out, to_json(&r)?)?;
    println!(
        "video mass: weak {:.6}, strong {:.6} (alpha {})",
        r.weak_video_mass, r.strong_video_mass, r.alpha
    );
    Ok(())
}

fn scenario(a: ScenarioArgs) -> Result<()> {
    let s = build_biased_scenario(a.seed)?;
    let dir = &a.out;
    write(&dir.join("model.bin"), s.model.to_bytes())?;
    write(&dir.join("dataset.jsonl"), s.dataset.to_jsonl()?)?;
    write(&dir.join("features.bin"), s.features.to_bytes())?;
    write(&dir.join("params.cfg"), s.params.to_config_string())?;
    write(&dir.join("certificate.json"), to_json(&s.certificate)?)?;
    write(&dir.join("expected.json"), to_json(&s.expected)?)?;

    let settings = RunSettings::default();
    let files = [
        DecodeParams::with_strategy(Strategy::Greedy),
        s.params.clone(),
    ]
    .iter()
    .map(|p| {
        run_variant(
            &s.model,
            &s.dataset,
            &s.features,
            p,
            &Ablation::default(),
            &settings,
        )
    })
    .collect::<Result<Vec<_>>>()?;
    let report = ComparisonReport::from_predictions(&files, &s.dataset)?;
    let table = report.to_table();
    write(&dir.join("report.txt"), &table)?;
    write(&dir.join("report.json"), report.to_json()?)?;
    println!(
        "certificate verified: greedy answers {}, mcd answers {} (amateur mass on {} = {:.4})",
        s.certificate.greedy_choice,
        s.certificate.mcd_choice,
        s.certificate.biased_option,
        s.certificate.amateur_biased_mass
    );
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Pair(a) => pair(a),
        Command::Model(a) => model(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Attn(a) => attn(a),
        Command::Scenario(a) => scenario(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
