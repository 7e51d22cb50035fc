//! Commands behind the `switchfold` binary.
//!
//! Every stage reads and writes artifacts under one root directory, so each
//! command can be rerun on its own:
//! `dataset.bin` and `cae.ckpt` feed `mtrnn.ckpt`, which feeds rollouts,
//! whose traces feed the analysis.

pub mod prompt;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use switchfold::analysis::{analyze, StateKind};
use switchfold::checkpoint::{CaeCheckpoint, MtrnnCheckpoint, TrainingMeta};
use switchfold::config::ExperimentConfig;
use switchfold::mtrnn::StateTrace;
use switchfold::pipeline::{
    build_dataset, evaluate, rollout, train_cae_stage, train_mtrnn_stage, Dataset, InstructionSource, Model, RolloutEvent, RolloutOptions,
    RolloutReport, ScheduledSource,
};
use switchfold::taskworld::{EpisodeSpec, StepCounts, SubtaskId};
use switchfold::{Error, Result};
use switchfold_service::session::SessionConfig;

pub use prompt::{parse_signal, PromptSource};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING_ARTIFACT: u8 = 3;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingArtifact { .. } => EXIT_MISSING_ARTIFACT,
        Error::Config(_) | Error::InvalidArgument(_) | Error::IllegalSubtask { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

#[derive(Debug, Parser)]
#[command(name = "switchfold", version, about = "Train, roll out and analyse the instruction-switching folding model")]
pub struct Cli {
    /// TOML experiment config. Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Artifact root. Beats both the config file and SWITCHFOLD_ARTIFACTS.
    #[arg(long, global = true)]
    pub artifacts: Option<PathBuf>,
    /// Training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Cae,
    Mtrnn,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the training episodes, encode them with the CAE and write the dataset.
    GenData {
        /// Object positions, e.g. 1,3,4,6.
        #[arg(long, value_delimiter = ',')]
        positions: Option<Vec<u8>>,
        /// Pattern ids 1-4 or subtask letters such as ABCD.
        #[arg(long, value_delimiter = ',')]
        patterns: Option<Vec<String>>,
    },
    /// Train one network.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run one closed-loop episode.
    Rollout(RolloutArgs),
    /// Scheduled rollouts of the test (or training) episodes under several noise seeds.
    Evaluate {
        #[arg(long)]
        trials: Option<u64>,
        /// Evaluate the training episodes instead of the test episodes.
        #[arg(long)]
        training: bool,
        /// Keep the state trace of every trial.
        #[arg(long)]
        save_traces: bool,
    },
    /// PCA, attractor and cluster analysis of saved traces.
    Analyze {
        /// Trace files; every file in the traces directory when omitted.
        traces: Vec<PathBuf>,
        /// Analyse sigmoid activations instead of internal values.
        #[arg(long)]
        activation: bool,
    },
    /// Serve interactive sessions over HTTP and WebSocket.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    /// Pattern id 1-4; enables scoring against the oracle.
    #[arg(long)]
    pub pattern: Option<u8>,
    #[arg(long)]
    pub position: u8,
    /// One instruction per subtask, e.g. L,R,U,L.
    #[arg(long, value_delimiter = ',', conflicts_with = "interactive")]
    pub schedule: Option<Vec<String>>,
    /// Ask for each instruction on the terminal.
    #[arg(long)]
    pub interactive: bool,
    /// Seed of the feature jitter.
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    /// Subtask count for interactive runs without a pattern.
    #[arg(long, default_value_t = 4)]
    pub subtasks: usize,
    /// Write a PNG of every `frame-stride`-th step into this directory.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub frame_stride: usize,
}

/// A rollout's state trace labelled with the subtask seen in each segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub label: String,
    pub steps: StepCounts,
    /// Classified subtask per segment, falling back to the expected one.
    pub subtasks: Vec<Option<SubtaskId>>,
    pub trace: StateTrace,
}

impl TraceRecord {
    pub fn from_report(label: String, steps: StepCounts, report: &RolloutReport) -> Self {
        Self {
            label,
            steps,
            subtasks: report.branches.iter().map(|b| b.classified.or(b.expected)).collect(),
            trace: report.trace.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run `switchfold rollout` to produce traces".into(),
            },
            _ => e.into(),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Config file (or defaults), then SWITCHFOLD_ARTIFACTS, then flags.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    config.apply_env();
    if let Some(root) = &cli.artifacts {
        config.artifacts = root.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

pub fn run(cli: Cli) -> Result<()> {
    let config = resolve_config(&cli)?;
    tracing::info!("resolved config:\n{}", config.to_toml_string()?);
    match cli.command {
        Command::GenData { positions, patterns } => gen_data(&config, positions, patterns).map(|_| ()),
        Command::Train { stage: Stage::Cae, epochs } => train_cae(&config, epochs),
        Command::Train { stage: Stage::Mtrnn, epochs } => train_mtrnn(&config, epochs),
        Command::Rollout(args) => cmd_rollout(&config, &args),
        Command::Evaluate { trials, training, save_traces } => cmd_evaluate(&config, trials, training, save_traces),
        Command::Analyze { traces, activation } => cmd_analyze(&config, traces, activation),
        Command::Serve { host, port } => cmd_serve(&config, host, port),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn parse_pattern(text: &str, position: u8) -> Result<EpisodeSpec> {
    match text.trim().parse::<u8>() {
        Ok(id) => EpisodeSpec::pattern(id, position),
        Err(_) => {
            let subtasks = text
                .trim()
                .chars()
                .map(|c| c.to_string().parse::<SubtaskId>())
                .collect::<Result<Vec<_>>>()?;
            EpisodeSpec::new(subtasks, position)
        }
    }
}

fn load_cae(config: &ExperimentConfig) -> Result<CaeCheckpoint> {
    let path = config.paths().cae();
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            hint: "run `switchfold train --stage cae` first".into(),
        });
    }
    CaeCheckpoint::load(&path)
}

/// Builds and saves the dataset; returns it.
pub fn gen_data(config: &ExperimentConfig, positions: Option<Vec<u8>>, patterns: Option<Vec<String>>) -> Result<Dataset> {
    let positions = positions.unwrap_or_else(|| config.data.train_positions.clone());
    let patterns = patterns.unwrap_or_else(|| config.data.train_patterns.iter().map(u8::to_string).collect());
    let mut episodes = Vec::new();
    for p in &patterns {
        for &pos in &positions {
            episodes.push(parse_pattern(p, pos)?);
        }
    }
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("no patterns or positions selected".into()));
    }
    let cae = load_cae(config)?;
    let dataset = build_dataset(&episodes, config.steps, &cae)?;
    let paths = config.paths();
    dataset.save(&paths.dataset())?;
    write_json(&paths.normalization(), &dataset.normalization)?;
    tracing::info!(sequences = dataset.samples.len(), path = %paths.dataset().display(), "dataset written");
    Ok(dataset)
}

fn train_cae(config: &ExperimentConfig, epochs: Option<usize>) -> Result<()> {
    let mut config = config.clone();
    if let Some(e) = epochs {
        config.cae.train.epochs = e;
    }
    let checkpoint = train_cae_stage(&config)?;
    let paths = config.paths();
    checkpoint.save(&paths.cae())?;
    write_json(&paths.loss_history("cae"), &checkpoint.training.loss_history)?;
    tracing::info!(
        epochs = checkpoint.training.epochs,
        final_loss = ?checkpoint.training.final_loss,
        holdout_mse = ?checkpoint.holdout_mse,
        "cae checkpoint written"
    );
    Ok(())
}

fn train_mtrnn(config: &ExperimentConfig, epochs: Option<usize>) -> Result<()> {
    let mut config = config.clone();
    if let Some(e) = epochs {
        config.mtrnn.train.max_epochs = e;
    }
    let paths = config.paths();
    let dataset = if paths.dataset().exists() {
        Dataset::load(&paths.dataset())?
    } else {
        load_cae(&config)?;
        tracing::info!("no dataset yet; building it from the configured training episodes");
        gen_data(&config, None, None)?
    };
    let normalization_ref = "dataset.bin";
    let every = config.mtrnn.checkpoint_every;
    let spec = config.mtrnn_spec()?;
    let mut history = Vec::new();
    let mut failure = None;
    let checkpoint = train_mtrnn_stage(&config, &dataset, normalization_ref, &mut |epoch, loss, params, bank| {
        history.push(loss);
        if epoch % 100 == 0 {
            tracing::info!(epoch, loss, "mtrnn");
        }
        if every > 0 && (epoch + 1) % every == 0 {
            let snapshot = MtrnnCheckpoint {
                spec,
                params: params.clone(),
                bank: bank.clone(),
                normalization_ref: normalization_ref.into(),
                training: TrainingMeta {
                    seed: config.seed,
                    epochs: epoch + 1,
                    final_loss: Some(loss),
                    loss_history: history.clone(),
                },
            };
            if let Err(e) = snapshot.save(&paths.mtrnn_intermediate(epoch + 1)) {
                failure = Some(e);
                return false;
            }
        }
        true
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    checkpoint.save(&paths.mtrnn())?;
    write_json(&paths.loss_history("mtrnn"), &checkpoint.training.loss_history)?;
    tracing::info!(epochs = checkpoint.training.epochs, final_loss = ?checkpoint.training.final_loss, "mtrnn checkpoint written");
    Ok(())
}

fn file_stem(label: &str, seed: u64) -> String {
    format!("{}-s{seed}", label.replace('@', "-p"))
}

fn cmd_rollout(config: &ExperimentConfig, args: &RolloutArgs) -> Result<()> {
    let episode = args.pattern.map(|p| EpisodeSpec::pattern(p, args.position)).transpose()?;
    let schedule = args
        .schedule
        .as_ref()
        .map(|s| s.iter().map(|x| parse_signal(x)).collect::<Result<Vec<_>>>())
        .transpose()?;
    let schedule = match (schedule, &episode, args.interactive) {
        (Some(s), _, _) => Some(s),
        (None, _, true) => None,
        (None, Some(ep), false) => Some(ep.instructions.clone()),
        (None, None, false) => {
            return Err(Error::InvalidArgument("give --pattern, --schedule or --interactive".into()));
        }
    };
    let subtasks = match (&episode, &schedule) {
        (Some(ep), _) => ep.subtasks.len(),
        (None, Some(s)) => s.len(),
        (None, None) => args.subtasks,
    };
    if let Some(s) = &schedule {
        if s.len() != subtasks {
            return Err(Error::InvalidArgument(format!("schedule has {} instructions for {subtasks} subtasks", s.len())));
        }
    }
    let model = Model::load(config)?;
    let options = RolloutOptions {
        position: args.position,
        episode: episode.clone(),
        subtasks,
        feature_jitter: config.rollout.feature_jitter,
        seed: args.noise_seed,
        cs0: config.rollout.cs0,
    };
    if let Some(dir) = &args.frames {
        std::fs::create_dir_all(dir)?;
    }
    let stride = args.frame_stride.max(1);
    let mut frame_error = None;
    let mut observer = |event: RolloutEvent<'_>| {
        let (step, world) = match event {
            RolloutEvent::Step { step, world, .. } if step % stride == 0 => (step, world),
            RolloutEvent::Awaiting { index: 0, step, world } => (step, world),
            RolloutEvent::Branch(b) => {
                tracing::info!(index = b.index, commanded = ?b.commanded, classified = ?b.classified, matched = b.matched, "branch");
                return;
            }
            _ => return,
        };
        if let (Some(dir), None) = (&args.frames, &frame_error) {
            let png = world.render().to_png().and_then(|bytes| Ok(std::fs::write(dir.join(format!("frame-{step:05}.png")), bytes)?));
            frame_error = png.err();
        }
    };
    let mut scheduled;
    let mut prompt;
    let source: &mut dyn InstructionSource = match schedule {
        Some(s) => {
            scheduled = ScheduledSource::new(s);
            &mut scheduled
        }
        None => {
            prompt = PromptSource::new(std::io::stdin().lock(), std::io::stderr());
            &mut prompt
        }
    };
    let report = rollout(&model, &options, source, &mut observer)?;
    if let Some(e) = frame_error {
        return Err(e);
    }
    let label = episode.as_ref().map(EpisodeSpec::label).unwrap_or_else(|| format!("free@{}", args.position));
    let stem = file_stem(&label, args.noise_seed);
    let paths = config.paths();
    let report_path = paths.reports().join(format!("rollout-{stem}.json"));
    report.save(&report_path)?;
    write_json(
        &paths.traces().join(format!("{stem}.json")),
        &TraceRecord::from_report(label.clone(), model.steps, &report),
    )?;
    for b in &report.branches {
        println!(
            "subtask {}: {:?} -> {} {}",
            b.index + 1,
            b.commanded,
            b.classified.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
            if b.matched { "ok" } else { "MISMATCH" }
        );
    }
    match report.motor_mse {
        Some(mse) => println!("{label}: success {}  motor MSE {mse:.5}", report.success),
        None => println!("{label}: final garment {:?}", report.final_garment),
    }
    println!("report: {}", report_path.display());
    if let Some(reason) = &report.aborted {
        return Err(Error::Instruction(format!("rollout aborted: {reason}")));
    }
    Ok(())
}

fn cmd_evaluate(config: &ExperimentConfig, trials: Option<u64>, training: bool, save_traces: bool) -> Result<()> {
    let model = Model::load(config)?;
    let episodes = if training {
        config.data.training_episodes()?
    } else {
        config.data.test_episodes()?
    };
    let trials = trials.unwrap_or(config.rollout.trials);
    let (summary, reports) = evaluate(&model, &episodes, trials, 0, config.rollout.feature_jitter, config.rollout.cs0)?;
    let paths = config.paths();
    let name = if training { "train" } else { "test" };
    write_json(&paths.reports().join(format!("evaluation-{name}.json")), &summary)?;
    if save_traces {
        for r in &reports {
            let label = r.episode.as_ref().map(EpisodeSpec::label).unwrap_or_default();
            write_json(
                &paths.traces().join(format!("{}.json", file_stem(&label, r.seed))),
                &TraceRecord::from_report(label, model.steps, r),
            )?;
        }
    }
    for t in &summary.trials {
        println!(
            "{} seed {}: {}/{} branches, motor MSE {:.5}{}",
            t.episode,
            t.seed,
            t.branches_matched,
            t.branches,
            t.motor_mse,
            if t.success { "" } else { "  FAILED" }
        );
    }
    println!("{name}: {}", summary.summary());
    Ok(())
}

fn trace_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                files.push(path);
            }
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingArtifact {
            path: dir.to_path_buf(),
            hint: "no traces; run `switchfold rollout` or pass trace files".into(),
        });
    }
    Ok(files)
}

fn cmd_analyze(config: &ExperimentConfig, files: Vec<PathBuf>, activation: bool) -> Result<()> {
    let paths = config.paths();
    let files = if files.is_empty() { trace_files(&paths.traces())? } else { files };
    let records = files.iter().map(|f| TraceRecord::load(f)).collect::<Result<Vec<_>>>()?;
    let steps = records[0].steps;
    let mut labelled = Vec::with_capacity(records.len());
    for r in &records {
        if r.steps != steps {
            return Err(Error::InvalidArgument(format!("trace {:?} uses different step counts", r.label)));
        }
        let subtasks = r
            .subtasks
            .iter()
            .map(|s| s.ok_or_else(|| Error::InvalidArgument(format!("trace {:?} has an unclassified subtask", r.label))))
            .collect::<Result<Vec<_>>>()?;
        labelled.push((r.label.clone(), &r.trace, subtasks));
    }
    let kind = if activation { StateKind::Activation } else { StateKind::Internal };
    let (report, plots) = analyze(&labelled, steps, kind)?;
    let dir = paths.analysis();
    write_json(&dir.join("metrics.json"), &report)?;
    write_json(&dir.join("plot-data.json"), &plots)?;
    let a = &report.attractor;
    println!("traces: {}", report.traces);
    println!("attractor ratio: {:.4} (anchor spread {:.4}, excursion {:.4})", a.ratio, a.anchor_spread, a.behavior_excursion);
    if let Some(onset) = a.onset_ratio {
        println!("attractor ratio at instruction onsets: {onset:.4}");
    }
    println!("Cf PCA ratios: {:.3} {:.3}", report.cf_ratios[0], report.cf_ratios[1]);
    println!("Cs PCA ratios: {:.3} {:.3}", report.cs_ratios[0], report.cs_ratios[1]);
    println!("Cf by instruction: silhouette {:.3}", report.cf_by_instruction.silhouette);
    if let (Some(be), Some(ba)) = (report.cf_by_subtask.distance("B", "E"), report.cf_by_subtask.distance("B", "A")) {
        println!("Cf centroid distance B-E {be:.4}, B-A {ba:.4}");
    }
    let cs = &report.cs_by_subtask;
    println!(
        "Cs by subtask: {} groups, min centroid distance {:.4}, mean spread {:.4}",
        cs.groups.len(),
        cs.min_between(),
        cs.mean_spread()
    );
    println!("written to {}", dir.display());
    Ok(())
}

fn cmd_serve(config: &ExperimentConfig, host: Option<String>, port: Option<u16>) -> Result<()> {
    let host = host.unwrap_or_else(|| config.serve.host.clone());
    let port = port.unwrap_or(config.serve.port);
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| Error::Config(format!("bad listen address {host}:{port}: {e}")))?;
    let model = Model::load(config)?;
    let timeout = config.rollout.instruction_timeout_secs;
    let session = SessionConfig {
        frame_stride: config.serve.frame_stride,
        reconnect_timeout: Duration::from_secs(config.serve.reconnect_timeout_secs),
        instruction_timeout: (timeout > 0).then(|| Duration::from_secs(timeout)),
        feature_jitter: config.rollout.feature_jitter,
        cs0: config.rollout.cs0,
    };
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(switchfold_service::serve(model, session, addr, |bound| {
        println!("listening on http://{bound}");
    }))?;
    Ok(())
}

