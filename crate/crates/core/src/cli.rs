//! Command-line interface.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::baselines::{external_scores, Deployment};
use crate::calibrator::CalibratedRouterModel;
use crate::error::{Error, Result};
use crate::evaluation::{cost_sweep, curves_to_csv, multi_loss_report, parse_grid, sweep_to_csv};
use crate::io::{self as dio, manifest_path, RunManifest};
use crate::losses::LossSpec;
use crate::partition::{partition_quality, PartitionRequest, PartitionSpec};
use crate::router::{OracleSpec, Router};
use crate::selftest::{lipschitz_checks, run_lemma_checks};
use crate::synthetic::{generate, GroundTruthFn, SyntheticConfig};
use crate::types::RoutingConfig;

const ROUTE_CHUNK: usize = 4096;

#[derive(Debug, Parser)]
#[command(name = "hoc-router", version, about = "Predict, route or abstain using a higher-order calibrated weak model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/calibration/test datasets.
    GenerateSynthetic(GenerateArgs),
    /// Fit a partition and build the calibrated model from a k-snapshot dataset.
    Calibrate(CalibrateArgs),
    /// Stream routing decisions for JSONL records.
    Route(RouteArgs),
    /// Two-way routing curves for one or more losses.
    Curve(CurveArgs),
    /// Three-way cost sweep over abstention penalties.
    Sweep(SweepArgs),
    /// Calibration diagnostics, or the randomized lemma self-test.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    /// sinusoidal, three-steps or piecewise
    #[arg(long, default_value = "sinusoidal")]
    pub function: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub train: usize,
    #[arg(long, default_value_t = 5_000)]
    pub calibration: usize,
    #[arg(long, default_value_t = 100_000)]
    pub test: usize,
    /// Labels per calibration example.
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    /// Labels per test example.
    #[arg(long, default_value_t = 100)]
    pub test_k: usize,
    /// Equal-mass cells of the binned-frequency weak model.
    #[arg(long, default_value_t = 50)]
    pub weak_bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// topclass:B, feature:B[:index] or levelset
    #[arg(long, default_value = "topclass:10")]
    pub partition: String,
    /// Replace predictions by bin centroids.
    #[arg(long)]
    pub recalibrate: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RoutingArgs {
    #[arg(long)]
    pub loss: String,
    /// Routing penalty per oracle (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    pub alpha: Vec<f64>,
    /// Oracle per routing penalty: bayes, majority:K or mean:K. Defaults to bayes.
    #[arg(long = "oracle", value_delimiter = ',')]
    pub oracles: Vec<String>,
}

impl RoutingArgs {
    fn parse(&self) -> Result<(LossSpec, Vec<OracleSpec>)> {
        let loss: LossSpec = self.loss.parse()?;
        let oracles = if self.oracles.is_empty() {
            vec![OracleSpec::Bayes; self.alpha.len()]
        } else {
            self.oracles.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?
        };
        if oracles.len() != self.alpha.len() {
            return Err(Error::invalid(format!(
                "{} oracles given for {} routing penalties",
                oracles.len(),
                self.alpha.len()
            )));
        }
        Ok((loss, oracles))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct RouteArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub routing: RoutingArgs,
    /// Abstention penalty; `inf` disables abstention.
    #[arg(long, default_value = "inf")]
    pub beta: f64,
    /// Input records (default: stdin).
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CurveArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Repeatable; `all` expands to every loss with default parameters.
    #[arg(long = "loss", required = true)]
    pub losses: Vec<String>,
    /// Extra policy from an `id,score` CSV.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Evaluate raw weak predictions even when the model is recalibrated.
    #[arg(long)]
    pub raw_predictions: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[command(flatten)]
    pub routing: RoutingArgs,
    /// `lo:hi:step` (inclusive) or a single value.
    #[arg(long, default_value = "0.1:0.8:0.05")]
    pub beta: String,
    #[arg(long)]
    pub raw_predictions: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DiagnoseArgs {
    #[arg(long, required_unless_present = "self_test")]
    pub model: Option<PathBuf>,
    /// Held-out dataset compared against the calibrated mixtures.
    #[arg(long, required_unless_present = "self_test")]
    pub reference: Option<PathBuf>,
    /// Losses for partition quality and Lipschitz spot-checks (default: all).
    #[arg(long = "loss")]
    pub losses: Vec<String>,
    /// Run the randomized lemma checks instead.
    #[arg(long)]
    pub self_test: bool,
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn config_value<T: Serialize>(args: &T) -> Value {
    serde_json::to_value(args).unwrap_or(Value::Null)
}

fn parse_losses(specs: &[String]) -> Result<Vec<LossSpec>> {
    let mut out = Vec::new();
    for s in specs {
        if s.eq_ignore_ascii_case("all") {
            out.extend(LossSpec::all_defaults());
        } else {
            out.push(s.parse()?);
        }
    }
    Ok(out)
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::invalid(format!("{} does not exist", path.display())));
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CalibratedRouterModel> {
    require_file(path)?;
    CalibratedRouterModel::from_bytes(&fs::read(path)?)
}

fn json_cost(c: f64) -> Value {
    if c.is_finite() {
        json!(c)
    } else {
        Value::Null
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateSynthetic(a) => generate_cmd(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Route(a) => route_cmd(a),
        Command::Curve(a) => curve_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Diagnose(a) => diagnose_cmd(a),
    }
}

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let function: GroundTruthFn = a.function.parse()?;
    let config = SyntheticConfig {
        function,
        train: a.train,
        calibration: a.calibration,
        test: a.test,
        k: a.k,
        test_k: a.test_k,
        weak_bins: a.weak_bins,
        seed: a.seed,
    };
    let data = generate(config)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut manifest = RunManifest::new("generate-synthetic", config_value(&a), false);
    manifest.seeds.insert("seed".into(), a.seed);
    for (name, examples) in [
        ("train.jsonl", data.train_examples()?),
        ("calibration.jsonl", data.calibration.clone()),
        ("test.jsonl", data.test.clone()),
    ] {
        let path = a.out_dir.join(name);
        dio::write_dataset(&path, &examples, None)?;
        manifest.output(&path)?;
        manifest.output(&dio::header_path(&path))?;
    }
    manifest.write(&a.out_dir.join("generate-synthetic.manifest.json"))?;
    info!("wrote synthetic {function} data to {}", a.out_dir.display());
    Ok(())
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<()> {
    require_file(&a.input)?;
    let request: PartitionRequest = a.partition.parse()?;
    let data = dio::ingest(&a.input)?;
    let spec = PartitionSpec::fit(request.kind, &data, request.buckets)?;
    let model = CalibratedRouterModel::calibrate(spec, &data, a.recalibrate)?;
    fs::write(&a.out, model.to_bytes()?)?;
    let mut manifest = RunManifest::new("calibrate", config_value(&a), true);
    manifest.input(&a.input)?;
    manifest.output(&a.out)?;
    manifest.write(&a.manifest.clone().unwrap_or_else(|| manifest_path(&a.out)))?;
    info!(
        "calibrated {} examples into {} bins",
        data.len(),
        model.mixtures.len()
    );
    Ok(())
}

fn route_cmd(a: RouteArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let (loss, oracles) = a.routing.parse()?;
    let config = RoutingConfig::new(loss, a.routing.alpha.clone(), a.beta)?;
    let router = Router::new(&model, config, oracles)?;

    let reader: Box<dyn BufRead> = match &a.input {
        Some(p) => {
            require_file(p)?;
            Box::new(BufReader::new(File::open(p)?))
        }
        None => Box::new(BufReader::new(io::stdin().lock())),
    };
    let mut writer: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };

    let mut lines = reader.lines().enumerate();
    let mut routed = 0usize;
    loop {
        let mut chunk = Vec::with_capacity(ROUTE_CHUNK);
        for (i, line) in lines.by_ref() {
            let line = line?;
            if !line.trim().is_empty() {
                chunk.push((i + 1, line));
            }
            if chunk.len() == ROUTE_CHUNK {
                break;
            }
        }
        if chunk.is_empty() {
            break;
        }
        let out = chunk
            .par_iter()
            .map(|(n, line)| {
                let e = dio::parse_record(line, *n, Some(model.num_classes))?;
                let (bin, d) = router.route(&e)?;
                let costs: Map<String, Value> = d
                    .est_costs
                    .iter()
                    .map(|(act, c)| (act.to_string(), json_cost(*c)))
                    .collect();
                Ok(json!({
                    "id": e.id,
                    "bin": bin.to_string(),
                    "action": d.action.to_string(),
                    "est_costs": costs,
                })
                .to_string())
            })
            .collect::<Result<Vec<_>>>()?;
        for line in out {
            writeln!(writer, "{line}")?;
        }
        routed += chunk.len();
    }
    writer.flush()?;
    drop(writer);

    let target = a.manifest.clone().or_else(|| a.out.as_deref().map(manifest_path));
    if let Some(path) = target {
        let mut manifest = RunManifest::new("route", config_value(&a), false);
        manifest.input(&a.model)?;
        if let Some(p) = &a.input {
            manifest.input(p)?;
        }
        if let Some(p) = &a.out {
            manifest.output(p)?;
        }
        manifest.write(&path)?;
    }
    info!("routed {routed} records");
    Ok(())
}

fn curve_cmd(a: CurveArgs) -> Result<()> {
    require_file(&a.test)?;
    if let Some(p) = &a.scores {
        require_file(p)?;
    }
    let losses = parse_losses(&a.losses)?;
    let model = load_model(&a.model)?;
    let test = dio::ingest(&a.test)?;
    let external = match &a.scores {
        Some(p) => Some(external_scores("external", &test, &dio::read_scores_csv(p)?)?),
        None => None,
    };
    let deployment = Deployment::new(&model, &test, !a.raw_predictions)?;
    let report = multi_loss_report(&model, &test, &deployment, &losses, external.as_ref())?;
    fs::write(&a.out, curves_to_csv(&report.curves))?;

    let mut config = config_value(&a);
    config["skipped_losses"] = json!(report
        .skipped
        .iter()
        .map(|(l, why)| json!({"loss": l, "reason": why}))
        .collect::<Vec<_>>());
    let mut manifest = RunManifest::new("curve", config, false);
    manifest.input(&a.model)?;
    manifest.input(&a.test)?;
    if let Some(p) = &a.scores {
        manifest.input(p)?;
    }
    manifest.output(&a.out)?;
    manifest.write(&a.manifest.clone().unwrap_or_else(|| manifest_path(&a.out)))?;
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    require_file(&a.test)?;
    let (loss, oracles) = a.routing.parse()?;
    let betas = parse_grid(&a.beta)?;
    let model = load_model(&a.model)?;
    let test = dio::ingest(&a.test)?;
    let deployment = Deployment::new(&model, &test, !a.raw_predictions)?;
    let sweep = cost_sweep(&model, &test, &deployment, &loss, &a.routing.alpha, &betas, &oracles)?;
    fs::write(&a.out, sweep_to_csv(&sweep))?;
    let mut manifest = RunManifest::new("sweep", config_value(&a), false);
    manifest.input(&a.model)?;
    manifest.input(&a.test)?;
    manifest.output(&a.out)?;
    manifest.write(&a.manifest.clone().unwrap_or_else(|| manifest_path(&a.out)))?;
    Ok(())
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn diagnose_cmd(a: DiagnoseArgs) -> Result<()> {
    if a.self_test {
        let report = run_lemma_checks(a.seed, a.trials)?;
        let mut text = String::new();
        for c in &report.checks {
            text.push_str(&format!("{c}\n"));
        }
        write_output(a.out.as_deref(), &text)?;
        if !report.passed() {
            return Err(Error::invalid("self-test found violations"));
        }
        return Ok(());
    }

    let (Some(model_path), Some(reference_path)) = (&a.model, &a.reference) else {
        return Err(Error::invalid("--model and --reference are required without --self-test"));
    };
    require_file(reference_path)?;
    let losses = if a.losses.is_empty() {
        LossSpec::all_defaults()
    } else {
        parse_losses(&a.losses)?
    };
    let model = load_model(model_path)?;
    let reference = dio::ingest(reference_path)?;

    let mut out = Map::new();
    match model.wasserstein_error(&reference) {
        Ok(w) => {
            let mean = w.values().sum::<f64>() / w.len().max(1) as f64;
            let per_bin: BTreeMap<String, f64> = w.iter().map(|(b, v)| (b.to_string(), *v)).collect();
            out.insert("wasserstein".into(), json!(per_bin));
            out.insert("mean_wasserstein".into(), json!(mean));
        }
        Err(e @ Error::UnsupportedDiagnostic(_)) => {
            warn!("{e}");
            out.insert("wasserstein".into(), Value::Null);
            out.insert("wasserstein_note".into(), json!(e.to_string()));
        }
        Err(e) => return Err(e),
    }
    let mut quality = Map::new();
    let mut lipschitz = Vec::new();
    for loss in &losses {
        if loss.supports(model.num_classes).is_err() {
            continue;
        }
        quality.insert(
            loss.to_string(),
            serde_json::to_value(partition_quality(&model.partition, &reference, loss)?)?,
        );
        for check in lipschitz_checks(loss, model.num_classes, 1000, a.seed)? {
            lipschitz.push(serde_json::to_value(check)?);
        }
    }
    out.insert("partition_quality".into(), Value::Object(quality));
    out.insert("lipschitz_spot_checks".into(), Value::Array(lipschitz));
    write_output(
        a.out.as_deref(),
        &(serde_json::to_string_pretty(&Value::Object(out))? + "\n"),
    )
}

/// Runs the CLI and maps failures to a single `error[kind]: message` line and exit code 1.
/// Argument errors are reported by clap with usage text and exit code 2.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            1
        }
    }
}
