//! The `ciota` command line: config-driven experiments emitting CSV and JSON.
//!
//! Every subcommand reads an [`ExperimentConfig`] (JSON file, `--preset`,
//! then `--set key=value` overrides on dotted paths), writes into `--out`,
//! and embeds the resolved config in its JSON output.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::AgentState;
use crate::chain::crypto::{KeyedHashSigner, SignatureProvider};
use crate::chain::{AgentId, ProtocolParams};
use crate::emm::{combine, distance, FrequencyMatrix, ModelParams, State};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::simnet::{run_trials, SimConfig, TopologySpec, TrialResult, TrialSummary};
use crate::traces::{
    gen_benign_from, inject_attack, read_labels, read_trace, window_labels, write_labels,
    write_trace, AttackSpec, GeneratorConfig, GroundTruthModel,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ciota", version, about = "Collaborative control-flow anomaly detection toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Run seeded protocol simulations over generated networks.
    Simulate(#[command(flatten)] CommonArgs),
    /// Generate a training trace and a labelled test trace.
    TraceGen(#[command(flatten)] CommonArgs),
    /// Train a detector and score a labelled trace.
    Detect(#[command(flatten)] CommonArgs),
    /// Compute ROC and precision-recall metrics from a score file.
    Eval(#[command(flatten)] CommonArgs),
    /// Combine model files and report their distance from a local model.
    Combine(#[command(flatten)] CommonArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Testbed parameters: T = 60 s, L = 20, p_a = 0.25, alpha = 0.05,
    /// p_thr = 0.012, k = 10,000, B = 256. The direct-message trigger count
    /// is also k, and event noise is 1% of T.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Eq, clap::Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. `sim.n_agents=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

/// Input files for the read modes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    /// Benign trace a detector is trained on.
    pub train: Option<PathBuf>,
    /// Trace to score.
    pub trace: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// A local model file; `detect` starts from it, `combine` measures
    /// distance against it.
    pub model: Option<PathBuf>,
    pub models: Vec<PathBuf>,
    /// `score,label` CSV for `eval`.
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSettings {
    pub train_length: usize,
    pub test_length: usize,
    pub attack: Option<AttackSpec>,
}

impl Default for TraceSettings {
    fn default() -> Self {
        Self {
            train_length: 50_000,
            test_length: 20_000,
            attack: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: u64,
    pub app_id: String,
    pub app_version: String,
    pub model: ModelParams,
    pub protocol: ProtocolParams,
    pub sim: SimConfig,
    pub topology: TopologySpec,
    pub generator: GeneratorConfig,
    pub trace: TraceSettings,
    pub inputs: Inputs,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 10,
            app_id: "app".into(),
            app_version: "1".into(),
            model: ModelParams::paper(),
            protocol: ProtocolParams::default(),
            sim: SimConfig::default(),
            topology: TopologySpec::WattsStrogatz {
                neighbors: 5,
                p: 0.1,
                variant: Default::default(),
            },
            generator: GeneratorConfig::default(),
            trace: TraceSettings::default(),
            inputs: Inputs::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn paper() -> Self {
        let model = ModelParams::paper();
        let protocol = ProtocolParams {
            block_size: 20,
            interval_secs: 60.0,
            k_dm: model.window_k as u32,
            ..ProtocolParams::default()
        };
        Self {
            sim: SimConfig {
                block_size: protocol.block_size,
                interval_secs: protocol.interval_secs,
                k_dm: protocol.k_dm,
                jitter: 0.01,
                alpha: model.alpha,
                p_a: model.p_a,
                ..SimConfig::default()
            },
            model,
            protocol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.protocol.validate()?;
        if self.app_id.is_empty() {
            return Err(Error::Config("app_id must not be empty".into()));
        }
        Ok(())
    }
}

/// Sets `value` at a dotted `path` inside a JSON object.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{path}: {} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        node = obj.entry(*key).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    Err(Error::Config("empty --set path".into()))
}

/// Parses a `--set` right-hand side as JSON, falling back to a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

pub fn resolve_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut value = match (&args.config, args.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let base = match args.preset {
                Some(Preset::Paper) => serde_json::to_value(ExperimentConfig::paper())?,
                None => serde_json::to_value(ExperimentConfig::default())?,
            };
            let file: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(base, file)
        }
        (None, Some(Preset::Paper)) => serde_json::to_value(ExperimentConfig::paper())?,
        (None, None) => serde_json::to_value(ExperimentConfig::default())?,
    };
    for s in &args.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        set_path(&mut value, k.trim(), parse_value(v.trim()))?;
    }
    if let Some(seed) = args.seed {
        set_path(&mut value, "seed", Value::from(seed))?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.sim.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: Value, over: Value) -> Value {
    match (base, over) {
        (Value::Object(mut b), Value::Object(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            Value::Object(b)
        }
        (_, o) => o,
    }
}

/// Model file: a frequency matrix tagged with the application it models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub app_id: String,
    pub app_version: String,
    /// `[from, to, count]` triples.
    pub transitions: Vec<[State; 3]>,
}

impl ModelFile {
    pub fn new(app_id: &str, app_version: &str, model: &FrequencyMatrix) -> Self {
        Self {
            app_id: app_id.into(),
            app_version: app_version.into(),
            transitions: model.entries().map(|(a, b, c)| [a, b, c]).collect(),
        }
    }

    pub fn model(&self) -> FrequencyMatrix {
        FrequencyMatrix::from_entries(self.transitions.iter().map(|&[a, b, c]| (a, b, c)))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn require(input: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    match input {
        Some(p) if p.exists() => Ok(p.clone()),
        Some(p) => Err(Error::Config(format!("{what} file {} does not exist", p.display()))),
        None => Err(Error::Config(format!("inputs.{what} is required"))),
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

pub const TRIALS_HEADER: &str = "trial,seed,generator,n,L,epochs,messages,deadlock";

#[derive(Debug, Serialize)]
struct SimulateReport<'a> {
    config: &'a ExperimentConfig,
    summary: TrialSummary,
}

pub fn write_trials_csv(path: &Path, results: &[TrialResult]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{TRIALS_HEADER}").map_err(io)?;
    for r in results {
        let epochs = r.epochs.map(|e| e.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.trial, r.seed, r.generator, r.n, r.block_size, epochs, r.messages, r.deadlock
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<TrialSummary> {
    prepare_out(out)?;
    let results = run_trials(&cfg.sim, &cfg.topology, cfg.trials)?;
    write_trials_csv(&out.join("trials.csv"), &results)?;
    let summary = TrialSummary::of(&results);
    write_json(
        &out.join("summary.json"),
        &SimulateReport {
            config: cfg,
            summary: summary.clone(),
        },
    )?;
    Ok(summary)
}

pub fn cmd_trace_gen(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    prepare_out(out)?;
    let gt = GroundTruthModel::generate(&cfg.generator)?;
    let (train, end) = gen_benign_from(&gt, cfg.trace.train_length, cfg.seed, None)?;
    let (test, _) = gen_benign_from(&gt, cfg.trace.test_length, cfg.seed.wrapping_add(1), Some(end))?;
    let (test, mask) = match &cfg.trace.attack {
        Some(spec) => inject_attack(&gt, &test, spec)?,
        None => {
            let n = test.len();
            (test, vec![false; n])
        }
    };
    write_trace(out.join("train.trace"), &train)?;
    write_trace(out.join("test.trace"), &test)?;
    write_labels(out.join("test.labels"), &test, &mask)?;
    write_json(&out.join("trace-gen.json"), &serde_json::json!({ "config": cfg }))
}

#[derive(Debug, Serialize)]
struct DetectReport<'a> {
    config: &'a ExperimentConfig,
    alerts: usize,
    eval: Option<EvalResult>,
}

/// Trains (or loads) a model, scores the test trace and evaluates the
/// window scores against the labels.
pub fn cmd_detect(cfg: &ExperimentConfig, out: &Path) -> Result<Option<EvalResult>> {
    let trace_path = require(&cfg.inputs.trace, "trace")?;
    let labels_path = cfg.inputs.labels.as_ref().map(|_| require(&cfg.inputs.labels, "labels")).transpose()?;
    let model_path = cfg.inputs.model.as_ref().map(|_| require(&cfg.inputs.model, "model")).transpose()?;
    let train_path = cfg.inputs.train.as_ref().map(|_| require(&cfg.inputs.train, "train")).transpose()?;
    if model_path.is_none() && train_path.is_none() {
        return Err(Error::Config("detect needs inputs.model or inputs.train".into()));
    }
    prepare_out(out)?;

    let provider: Arc<dyn SignatureProvider> = Arc::new(KeyedHashSigner);
    let keys = provider.keypair_from_seed(cfg.seed);
    let keyring = Arc::new([(AgentId(0), keys.public.clone())].into_iter().collect());
    let mut builder = AgentState::builder(AgentId(0), keys, provider, keyring)
        .params(cfg.model.clone())
        .protocol(cfg.protocol.clone())
        .start_time(-cfg.model.t_grace_secs);
    if let Some(p) = &model_path {
        let file = ModelFile::read(p)?;
        if file.app_id != cfg.app_id {
            return Err(Error::InvalidInput(format!(
                "model is for application {:?}, config names {:?}",
                file.app_id, cfg.app_id
            )));
        }
        builder = builder.model(file.model());
    }
    let mut agent = builder.build()?;
    if let Some(p) = &train_path {
        let train: Vec<u64> = read_trace(p)?.iter().map(|r| r.address).collect();
        // training happens inside the grace period, so nothing is filtered
        let mut trainer = agent.params.clone();
        trainer.t_grace_secs = f64::INFINITY;
        std::mem::swap(&mut agent.params, &mut trainer);
        agent.monitor_batch(&train, 0.0);
        std::mem::swap(&mut agent.params, &mut trainer);
        agent.window.clear();
        agent.current_state = None;
    }
    ModelFile::new(&cfg.app_id, &cfg.app_version, &agent.local_model).write(&out.join("model.json"))?;

    let trace = read_trace(&trace_path)?;
    let addrs: Vec<u64> = trace.iter().map(|r| r.address).collect();
    let mut steps = Vec::with_capacity(addrs.len());
    let alerts = agent.monitor_with(&addrs, 0.0, |s| steps.push(s));

    let labels = match &labels_path {
        Some(p) => {
            let mask = read_labels(p)?;
            if mask.len() != trace.len() {
                return Err(Error::InvalidInput(format!(
                    "{} labels for {} trace records",
                    mask.len(),
                    trace.len()
                )));
            }
            Some(window_labels(&mask, cfg.model.window_k))
        }
        None => None,
    };

    let path = out.join("scores.csv");
    let mut w = create(&path)?;
    let io = |e| Error::io(&path, e);
    writeln!(w, "index,seq,src,dst,prob,score,alerted,label").map_err(io)?;
    for s in &steps {
        let label = labels.as_ref().map(|l| u8::from(l[s.index]).to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            s.index,
            trace[s.index].seq,
            s.src,
            s.dst,
            s.prob,
            s.score,
            u8::from(s.alerted),
            label
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)?;

    let path = out.join("alerts.csv");
    let mut w = create(&path)?;
    let io = |e| Error::io(&path, e);
    writeln!(w, "{}", crate::agent::Alert::CSV_HEADER).map_err(io)?;
    for a in &alerts {
        writeln!(w, "{}", a.to_csv_line()).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let eval = match &labels {
        Some(l) => {
            let scores: Vec<f64> = steps.iter().map(|s| s.score).collect();
            let l: Vec<bool> = steps.iter().map(|s| l[s.index]).collect();
            Some(evaluate(&scores, &l, cfg.model.p_thr)?)
        }
        None => None,
    };
    write_json(
        &out.join("detect.json"),
        &DetectReport {
            config: cfg,
            alerts: alerts.len(),
            eval: eval.clone(),
        },
    )?;
    Ok(eval)
}

/// Reads a `score,label` CSV with a header line.
pub fn read_scores(path: &Path) -> Result<(Vec<f64>, Vec<bool>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse { line: i + 1, reason };
        let (s, l) = line
            .split_once(',')
            .ok_or_else(|| parse_err(format!("expected score,label, got {line:?}")))?;
        scores.push(s.trim().parse().map_err(|_| parse_err(format!("invalid score {s:?}")))?);
        labels.push(match l.trim() {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(format!("label must be 0 or 1, got {other:?}"))),
        });
    }
    Ok((scores, labels))
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    config: &'a ExperimentConfig,
    eval: &'a EvalResult,
}

pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path) -> Result<EvalResult> {
    let path = require(&cfg.inputs.scores, "scores")?;
    prepare_out(out)?;
    let (scores, labels) = read_scores(&path)?;
    let eval = evaluate(&scores, &labels, cfg.model.p_thr)?;
    let curve_path = out.join("curve.csv");
    let mut w = create(&curve_path)?;
    let io = |e| Error::io(&curve_path, e);
    writeln!(w, "threshold,tpr,fpr,precision").map_err(io)?;
    for p in &eval.curve {
        writeln!(w, "{},{},{},{}", p.threshold, p.tpr, p.fpr, p.precision).map_err(io)?;
    }
    w.flush().map_err(io)?;
    write_json(&out.join("eval.json"), &EvalReport { config: cfg, eval: &eval })?;
    Ok(eval)
}

#[derive(Debug, Clone, Serialize)]
pub struct CombineReport {
    pub models: usize,
    pub distance: f64,
    pub alpha: f64,
    pub attested: bool,
}

/// Combines the input models and writes the combined model, a per-entry
/// probability difference grid against the local model, and the distance.
/// The local model is `inputs.model`, or the first input model.
pub fn cmd_combine(cfg: &ExperimentConfig, out: &Path) -> Result<CombineReport> {
    if cfg.inputs.models.len() < 2 {
        return Err(Error::Config(format!(
            "combine needs at least 2 models, got {}",
            cfg.inputs.models.len()
        )));
    }
    let paths: Vec<PathBuf> = cfg
        .inputs
        .models
        .iter()
        .map(|p| require(&Some(p.clone()), "models"))
        .collect::<Result<_>>()?;
    let local_path = cfg.inputs.model.as_ref().map(|_| require(&cfg.inputs.model, "model")).transpose()?;
    prepare_out(out)?;
    let files: Vec<ModelFile> = paths.iter().map(|p| ModelFile::read(p)).collect::<Result<_>>()?;
    let local_file = match &local_path {
        Some(p) => ModelFile::read(p)?,
        None => files[0].clone(),
    };
    for f in files.iter().chain([&local_file]) {
        if f.app_id != local_file.app_id || f.app_version != local_file.app_version {
            return Err(Error::InvalidInput(format!(
                "models mix applications {}/{} and {}/{}",
                f.app_id, f.app_version, local_file.app_id, local_file.app_version
            )));
        }
    }
    let models: Vec<FrequencyMatrix> = files.iter().map(ModelFile::model).collect();
    let combined = combine(&models, cfg.model.p_a)?;
    let local = local_file.model();
    ModelFile::new(&local_file.app_id, &local_file.app_version, &combined).write(&out.join("combined.json"))?;

    let states: Vec<State> = local.states().union(combined.states()).copied().collect();
    let grid_path = out.join("distance_grid.csv");
    let mut w = create(&grid_path)?;
    let io = |e| Error::io(&grid_path, e);
    writeln!(w, "src,dst,local,combined,abs_diff").map_err(io)?;
    for &a in &states {
        for &b in &states {
            let (p, q) = (local.transition_prob(a, b), combined.transition_prob(a, b));
            writeln!(w, "{a},{b},{p},{q},{}", (p - q).abs()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;

    let d = distance(&local, &combined);
    let report = CombineReport {
        models: models.len(),
        distance: d,
        alpha: cfg.model.alpha,
        attested: d < cfg.model.alpha,
    };
    write_json(
        &out.join("combine.json"),
        &serde_json::json!({ "config": cfg, "result": report }),
    )?;
    Ok(report)
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let (Command::Simulate(args)
    | Command::TraceGen(args)
    | Command::Detect(args)
    | Command::Eval(args)
    | Command::Combine(args)) = &cli.command;
    let cfg = resolve_config(args)?;
    let out = &args.out;
    match &cli.command {
        Command::Simulate(_) => {
            let s = cmd_simulate(&cfg, out)?;
            if let Some(e) = s.epochs {
                log::info!("{} trials, epochs mean {:.2} std {:.2}, {} deadlocks", s.trials, e.mean, e.std, s.deadlocks);
            }
        }
        Command::TraceGen(_) => cmd_trace_gen(&cfg, out)?,
        Command::Detect(_) => {
            if let Some(e) = cmd_detect(&cfg, out)? {
                log::info!("auc {:?} fpr {:?} tpr {:?}", e.auc, e.fpr, e.tpr);
            }
        }
        Command::Eval(_) => {
            let e = cmd_eval(&cfg, out)?;
            log::info!("auc {:?} average precision {:?}", e.auc, e.average_precision);
        }
        Command::Combine(_) => {
            let r = cmd_combine(&cfg, out)?;
            log::info!("distance {} (alpha {}, attested {})", r.distance, r.alpha, r.attested);
        }
    }
    Ok(())
}

/// Entry point for the binary: parses arguments, runs, returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
