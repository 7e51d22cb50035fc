//! Dataset construction, stage-wise training and closed-loop rollout.

use std::path::Path;
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cae::{self, CaeParams, CaeSpec, ImageBatch, Mode};
use crate::checkpoint::{CaeCheckpoint, Container, MtrnnCheckpoint, TrainingMeta};
use crate::config::{Cs0Policy, ExperimentConfig};
use crate::error::{shape_mismatch, Error, Result};
use crate::mtrnn::{
    closed_loop_step, forward_sequence, train_mtrnn, Cs0Bank, IoLayout, MotorFeedback, MtrnnParams,
    MtrnnState, StateTrace,
};
use crate::numerics::{Rng, Tensor};
use crate::taskworld::{
    classify_fold, gen_episode, render, valid_subtasks, ArmState, EpisodeSpec, Frame, GarmentState,
    InstructionSignal, MotorFrame, PhaseLabel, StepCounts, SubtaskId, Trajectory, World, HOME,
};

pub const NORMALIZED_RANGE: [f64; 2] = [0.1, 0.9];

/// Per-dimension min-max scaling into [`NORMALIZED_RANGE`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSpec {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub target: [f64; 2],
}

impl NormalizationSpec {
    /// Fits bounds over `rows`. Constant dimensions get a unit-wide range so
    /// the map stays invertible.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut iter = rows.into_iter();
        let first = iter.next().ok_or(Error::Empty("normalization rows"))?;
        let mut min = first.to_vec();
        let mut max = first.to_vec();
        for row in iter {
            if row.len() != min.len() {
                return Err(shape_mismatch("normalization row", &[min.len()], &[row.len()]));
            }
            for (i, v) in row.iter().enumerate() {
                min[i] = min[i].min(*v);
                max[i] = max[i].max(*v);
            }
        }
        for (lo, hi) in min.iter().zip(max.iter_mut()) {
            if *hi - *lo < 1e-9 {
                *hi = *lo + 1.0;
            }
        }
        Ok(Self {
            min,
            max,
            target: NORMALIZED_RANGE,
        })
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.min.len() != self.max.len() {
            return Err(shape_mismatch("normalization bounds", &[self.min.len()], &[self.max.len()]));
        }
        if self.min.iter().zip(&self.max).any(|(lo, hi)| !(hi > lo)) || !(self.target[1] > self.target[0]) {
            return Err(Error::Format("normalization needs max > min in every dimension".into()));
        }
        Ok(())
    }

    pub fn normalize_value(&self, dim: usize, v: f64) -> f64 {
        let [a, b] = self.target;
        a + (v - self.min[dim]) / (self.max[dim] - self.min[dim]) * (b - a)
    }

    pub fn denormalize_value(&self, dim: usize, v: f64) -> f64 {
        let [a, b] = self.target;
        self.min[dim] + (v - a) / (b - a) * (self.max[dim] - self.min[dim])
    }

    pub fn normalize(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.check_len(raw)?;
        Ok(raw.iter().enumerate().map(|(i, v)| self.normalize_value(i, *v)).collect())
    }

    pub fn denormalize(&self, normalized: &[f64]) -> Result<Vec<f64>> {
        self.check_len(normalized)?;
        Ok(normalized
            .iter()
            .enumerate()
            .map(|(i, v)| self.denormalize_value(i, *v))
            .collect())
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dims() {
            return Err(shape_mismatch("normalization input", &[self.dims()], &[v.len()]));
        }
        Ok(())
    }
}

/// One normalized `T x io` training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub inputs: Tensor,
    pub phases: Vec<PhaseLabel>,
    pub episode: EpisodeSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub layout: IoLayout,
    pub steps: StepCounts,
    pub normalization: NormalizationSpec,
    pub samples: Vec<SequenceSample>,
}

pub const DATASET_KIND: &str = "dataset";

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    layout: IoLayout,
    steps: StepCounts,
    normalization: NormalizationSpec,
    sequences: Vec<SequenceMeta>,
}

#[derive(Serialize, Deserialize)]
struct SequenceMeta {
    episode: EpisodeSpec,
    phases: Vec<PhaseLabel>,
}

impl Dataset {
    pub fn sequences(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.inputs.clone()).collect()
    }

    /// Header carries dims, step counts, normalization and phase layout;
    /// array `seq{i}` holds sequence `i` row-major.
    pub fn to_container(&self) -> Result<Container> {
        let meta = DatasetMeta {
            layout: self.layout,
            steps: self.steps,
            normalization: self.normalization.clone(),
            sequences: self
                .samples
                .iter()
                .map(|s| SequenceMeta {
                    episode: s.episode.clone(),
                    phases: s.phases.clone(),
                })
                .collect(),
        };
        let mut c = Container::new(DATASET_KIND, serde_json::to_value(meta)?);
        for (i, s) in self.samples.iter().enumerate() {
            c.push(format!("seq{i}"), s.inputs.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: DatasetMeta = c.meta_as()?;
        meta.normalization.validate()?;
        let mut samples = Vec::with_capacity(meta.sequences.len());
        for (i, s) in meta.sequences.into_iter().enumerate() {
            let inputs = c.array(&format!("seq{i}"))?.clone();
            if inputs.shape() != [s.phases.len(), meta.layout.total()] {
                return Err(shape_mismatch(
                    "dataset sequence",
                    &[s.phases.len(), meta.layout.total()],
                    inputs.shape(),
                ));
            }
            samples.push(SequenceSample {
                inputs,
                phases: s.phases,
                episode: s.episode,
            });
        }
        Ok(Self {
            layout: meta.layout,
            steps: meta.steps,
            normalization: meta.normalization,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, DATASET_KIND)?)
    }
}

pub fn arm_of(m: MotorFrame) -> ArmState {
    ArmState {
        x: m[0],
        y: m[1],
        gripper: m[2],
    }
}

pub fn render_trajectory(traj: &Trajectory) -> Vec<Frame> {
    traj.motor
        .iter()
        .zip(&traj.garment)
        .map(|(m, g)| render(g, &arm_of(*m)))
        .collect()
}

/// Raw (unnormalized) instruction vector for every step of an episode.
pub fn instruction_track(episode: &EpisodeSpec, steps: StepCounts) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(episode.subtasks.len() * steps.subtask_len());
    for signal in &episode.instructions {
        for local in 0..steps.subtask_len() {
            out.push(if local < steps.instruction {
                signal.vector()
            } else {
                [0.0; 3]
            });
        }
    }
    out
}

/// Eval-mode CAE features for a list of frames, `N x feature_dim`.
pub fn encode_frames(frames: &[Frame], params: &CaeParams, spec: &CaeSpec) -> Result<Tensor> {
    let mut data = Vec::with_capacity(frames.len() * spec.feature_dim);
    for chunk in frames.chunks(64) {
        let refs: Vec<&Frame> = chunk.iter().collect();
        let f = cae::encode(&ImageBatch::from_frames(&refs)?, params, spec, Mode::Eval)?;
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![frames.len(), spec.feature_dim], data)
}

/// Renders each episode, encodes frames with the frozen CAE and assembles
/// normalized sequences. Normalization is fitted on these episodes only.
pub fn build_dataset(episodes: &[EpisodeSpec], steps: StepCounts, cae: &CaeCheckpoint) -> Result<Dataset> {
    if episodes.is_empty() {
        return Err(Error::Empty("dataset episodes"));
    }
    steps.validate()?;
    let layout = IoLayout {
        motor: 3,
        features: cae.spec.feature_dim,
        instruction: 3,
    };
    let mut raw = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let traj = gen_episode(ep, steps)?;
        let features = encode_frames(&render_trajectory(&traj), &cae.params, &cae.spec)?;
        let instr = instruction_track(ep, steps);
        let rows: Vec<Vec<f64>> = (0..traj.len())
            .map(|t| {
                let mut row = traj.motor[t].to_vec();
                row.extend_from_slice(features.row(t));
                row.extend_from_slice(&instr[t]);
                row
            })
            .collect();
        raw.push((ep.clone(), traj.phases, rows));
    }
    let normalization = NormalizationSpec::fit(raw.iter().flat_map(|(_, _, rows)| rows.iter().map(Vec::as_slice)))?;
    let mut samples = Vec::with_capacity(raw.len());
    for (episode, phases, rows) in raw {
        let normalized = rows
            .iter()
            .map(|r| normalization.normalize(r))
            .collect::<Result<Vec<_>>>()?;
        samples.push(SequenceSample {
            inputs: Tensor::from_rows(&normalized)?,
            phases,
            episode,
        });
    }
    Ok(Dataset {
        layout,
        steps,
        normalization,
        samples,
    })
}

/// Frames for CAE training and a held-out split, both taken from the
/// training episodes. Frames are strided, then every `holdout_every`-th one is
/// held out.
pub fn cae_frames(episodes: &[EpisodeSpec], steps: StepCounts, stride: usize, holdout_every: usize) -> Result<(ImageBatch, ImageBatch)> {
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for ep in episodes {
        let frames = render_trajectory(&gen_episode(ep, steps)?);
        for (k, f) in frames.into_iter().step_by(stride.max(1)).enumerate() {
            if holdout_every > 0 && k % holdout_every == holdout_every - 1 {
                holdout.push(f);
            } else {
                train.push(f);
            }
        }
    }
    let batch = |v: &[Frame]| ImageBatch::from_frames(&v.iter().collect::<Vec<_>>());
    Ok((batch(&train)?, batch(&holdout)?))
}

/// Trains the CAE stage described by `config`.
pub fn train_cae_stage(config: &ExperimentConfig) -> Result<CaeCheckpoint> {
    let (train, holdout) = cae_frames(
        &config.data.training_episodes()?,
        config.steps,
        config.cae.frame_stride,
        config.cae.holdout_every,
    )?;
    let mut rng = Rng::new(config.seed).fork(1);
    let out = cae::train_cae(&train, &config.cae.spec, &config.cae.train, &mut rng)?;
    let holdout_mse = cae::reconstruction_mse(&holdout, &out.params, &config.cae.spec)?;
    Ok(CaeCheckpoint {
        spec: config.cae.spec.clone(),
        params: out.params,
        training: TrainingMeta {
            seed: config.seed,
            epochs: out.loss_history.len(),
            final_loss: out.loss_history.last().copied(),
            loss_history: out.loss_history,
        },
        holdout_mse: Some(holdout_mse),
    })
}

/// Trains the MTRNN stage. `on_epoch` receives every epoch's loss and the
/// current parameters (for intermediate checkpoints); returning false stops.
pub fn train_mtrnn_stage(
    config: &ExperimentConfig,
    dataset: &Dataset,
    normalization_ref: &str,
    on_epoch: &mut dyn FnMut(usize, f64, &MtrnnParams, &Cs0Bank) -> bool,
) -> Result<MtrnnCheckpoint> {
    let spec = config.mtrnn_spec()?;
    if dataset.layout.total() != spec.io_count {
        return Err(shape_mismatch("dataset layout", &[spec.io_count], &[dataset.layout.total()]));
    }
    let mut rng = Rng::new(config.seed).fork(2);
    let out = train_mtrnn(&dataset.sequences(), &spec, &config.mtrnn.train, &mut rng, on_epoch)?;
    Ok(MtrnnCheckpoint {
        spec,
        training: TrainingMeta {
            seed: config.seed,
            epochs: out.epochs(),
            final_loss: out.final_loss(),
            loss_history: out.loss_history,
        },
        params: out.params,
        bank: out.bank,
        normalization_ref: normalization_ref.to_string(),
    })
}

/// Everything a rollout needs: both networks plus the dataset's normalization.
#[derive(Clone, Debug)]
pub struct Model {
    pub mtrnn: MtrnnCheckpoint,
    pub cae: CaeCheckpoint,
    pub normalization: NormalizationSpec,
    pub layout: IoLayout,
    pub steps: StepCounts,
}

impl Model {
    pub fn new(mtrnn: MtrnnCheckpoint, cae: CaeCheckpoint, dataset: &Dataset) -> Result<Self> {
        let model = Self {
            mtrnn,
            cae,
            normalization: dataset.normalization.clone(),
            layout: dataset.layout,
            steps: dataset.steps,
        };
        model.check()?;
        Ok(model)
    }

    pub fn check(&self) -> Result<()> {
        if self.layout.total() != self.mtrnn.spec.io_count {
            return Err(shape_mismatch("model io", &[self.mtrnn.spec.io_count], &[self.layout.total()]));
        }
        if self.layout.features != self.cae.spec.feature_dim {
            return Err(shape_mismatch("model features", &[self.cae.spec.feature_dim], &[self.layout.features]));
        }
        if self.normalization.dims() != self.layout.total() {
            return Err(shape_mismatch("model normalization", &[self.layout.total()], &[self.normalization.dims()]));
        }
        self.mtrnn.params.check(&self.mtrnn.spec)?;
        self.cae.params.check(&self.cae.spec)
    }

    /// Loads dataset, CAE and MTRNN artifacts from the configured root.
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let paths = config.paths();
        let dataset = Dataset::load(&paths.dataset())?;
        let cae = CaeCheckpoint::load(&paths.cae())?;
        let mtrnn = MtrnnCheckpoint::load(&paths.mtrnn())?;
        Self::new(mtrnn, cae, &dataset)
    }

    pub fn cs0(&self, policy: Cs0Policy) -> Result<Vec<f64>> {
        match policy {
            Cs0Policy::Mean => self.mtrnn.bank.mean(),
            Cs0Policy::Entry(i) => self.mtrnn.bank.get(i).map(<[f64]>::to_vec),
            Cs0Policy::Zeros => Ok(vec![0.0; self.mtrnn.spec.cs_count]),
        }
    }

    fn normalize_slice(&self, offset: usize, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(i, v)| self.normalization.normalize_value(offset + i, *v))
            .collect()
    }

    pub fn normalized_motor(&self, m: MotorFrame) -> Vec<f64> {
        self.normalize_slice(0, &m)
    }

    pub fn denormalized_motor(&self, m: &[f64]) -> MotorFrame {
        std::array::from_fn(|i| self.normalization.denormalize_value(i, m[i]))
    }
}

/// Supplies one instruction at the start of each subtask.
pub trait InstructionSource {
    /// Blocks until the instruction for subtask `index` is available.
    fn next_instruction(&mut self, index: usize, garment: &GarmentState) -> Result<InstructionSignal>;
}

/// Replays a fixed schedule.
#[derive(Clone, Debug)]
pub struct ScheduledSource {
    pub schedule: Vec<InstructionSignal>,
}

impl ScheduledSource {
    pub fn new(schedule: Vec<InstructionSignal>) -> Self {
        Self { schedule }
    }
}

impl InstructionSource for ScheduledSource {
    fn next_instruction(&mut self, index: usize, _garment: &GarmentState) -> Result<InstructionSignal> {
        self.schedule
            .get(index)
            .copied()
            .ok_or_else(|| Error::Instruction(format!("schedule has no entry for subtask {}", index + 1)))
    }
}

/// Receives instructions from another thread; one receive per subtask.
pub struct ChannelSource {
    rx: Receiver<InstructionSignal>,
    timeout: Option<Duration>,
}

impl ChannelSource {
    pub fn new(rx: Receiver<InstructionSignal>, timeout: Option<Duration>) -> Self {
        Self { rx, timeout }
    }
}

impl InstructionSource for ChannelSource {
    fn next_instruction(&mut self, index: usize, _garment: &GarmentState) -> Result<InstructionSignal> {
        match self.timeout {
            None => self
                .rx
                .recv()
                .map_err(|_| Error::Instruction("instruction channel closed".into())),
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => {
                    Error::Instruction(format!("no instruction for subtask {} within {t:?}", index + 1))
                }
                RecvTimeoutError::Disconnected => Error::Instruction("instruction channel closed".into()),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchResult {
    /// 0-based subtask slot within the episode.
    pub index: usize,
    pub commanded: InstructionSignal,
    /// The unique legal subtask the instruction selects, if any.
    pub expected: Option<SubtaskId>,
    pub classified: Option<SubtaskId>,
    pub matched: bool,
    /// No instruction was given and more than one subtask was legal.
    pub ambiguous: bool,
}

/// Scores one executed subtask segment (`motor` starts with the frame before
/// the segment's first command).
pub fn branch_result(index: usize, commanded: InstructionSignal, g_before: &GarmentState, motor: &[MotorFrame]) -> BranchResult {
    let valid = valid_subtasks(g_before);
    let candidates: Vec<SubtaskId> = valid.iter().copied().filter(|s| s.instruction() == commanded).collect();
    let expected = (candidates.len() == 1).then(|| candidates[0]);
    let classified = classify_fold(motor, g_before);
    BranchResult {
        index,
        commanded,
        expected,
        classified,
        matched: expected.is_some() && classified == expected,
        ambiguous: commanded == InstructionSignal::None && valid.len() > 1,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub episode: Option<EpisodeSpec>,
    pub position: u8,
    pub seed: u64,
    pub branches: Vec<BranchResult>,
    /// Normalized motor MSE against the oracle trajectory, per dim per step.
    pub motor_mse: Option<f64>,
    pub final_garment: GarmentState,
    /// Executed (clamped) motor frames, starting with home.
    pub motor: Vec<MotorFrame>,
    pub trace: StateTrace,
    pub success: bool,
    /// Set when an instruction source failed and the rollout stopped early.
    pub aborted: Option<String>,
}

impl RolloutReport {
    pub fn branch_accuracy(&self) -> f64 {
        if self.branches.is_empty() {
            return 0.0;
        }
        self.branches.iter().filter(|b| b.matched).count() as f64 / self.branches.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run a rollout first".into(),
            },
            _ => e.into(),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// What the rollout loop reports while it runs.
#[derive(Debug)]
pub enum RolloutEvent<'a> {
    /// The world is paused waiting for the instruction of subtask `index`.
    Awaiting { index: usize, step: usize, world: &'a World },
    /// One world step was taken; `step` counts completed steps.
    Step {
        index: usize,
        step: usize,
        phase: PhaseLabel,
        world: &'a World,
        cf: &'a [f64],
    },
    Branch(&'a BranchResult),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutOptions {
    pub position: u8,
    /// Target episode; enables oracle motor MSE and success scoring.
    pub episode: Option<EpisodeSpec>,
    pub subtasks: usize,
    pub feature_jitter: f64,
    pub seed: u64,
    pub cs0: Cs0Policy,
}

impl RolloutOptions {
    pub fn for_episode(episode: &EpisodeSpec, feature_jitter: f64, seed: u64, cs0: Cs0Policy) -> Self {
        Self {
            position: episode.position,
            episode: Some(episode.clone()),
            subtasks: episode.subtasks.len(),
            feature_jitter,
            seed,
            cs0,
        }
    }
}

/// Mean squared difference between executed normalized outputs and the
/// oracle's normalized motor rows shifted by one step.
fn oracle_motor_mse(model: &Model, outputs: &[Vec<f64>], oracle: &Trajectory) -> f64 {
    let pairs = outputs.len().min(oracle.len().saturating_sub(1));
    if pairs == 0 {
        return 0.0;
    }
    let mut sse = 0.0;
    for t in 0..pairs {
        let target = model.normalized_motor(oracle.motor[t + 1]);
        sse += outputs[t].iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    sse / (pairs * model.layout.motor) as f64
}

/// Closed-loop episode: render, encode, step the network, execute the motor
/// command. The world clock stops while the source is waited on.
pub fn rollout(
    model: &Model,
    options: &RolloutOptions,
    source: &mut dyn InstructionSource,
    observer: &mut dyn FnMut(RolloutEvent<'_>),
) -> Result<RolloutReport> {
    let spec = &model.mtrnn.spec;
    let layout = model.layout;
    let steps = model.steps;
    let garment0 = GarmentState::fresh(options.position)?;
    if let Some(ep) = &options.episode {
        if ep.position != options.position {
            return Err(Error::InvalidArgument("episode position differs from rollout position".into()));
        }
    }
    let mut world = World::new(garment0);
    let mut state = MtrnnState::initial(spec, &model.cs0(options.cs0)?)?;
    let mut rng = Rng::new(options.seed);
    let home = model.normalized_motor(HOME);
    let mut trace = StateTrace::default();
    let mut phases = Vec::new();
    let mut outputs: Vec<Vec<f64>> = Vec::new();
    let mut executed = vec![HOME];
    let mut branches = Vec::new();
    let mut aborted = None;
    let mut t = 0usize;
    'episode: for index in 0..options.subtasks {
        let g_before = *world.garment();
        observer(RolloutEvent::Awaiting { index, step: t, world: &world });
        let signal = match source.next_instruction(index, &g_before) {
            Ok(s) => s,
            Err(e) => {
                aborted = Some(e.to_string());
                break 'episode;
            }
        };
        let instr_raw = signal.vector();
        let instr_on = model.normalize_slice(layout.instruction_range().start, &instr_raw);
        let instr_off = model.normalize_slice(layout.instruction_range().start, &[0.0; 3]);
        let mut segment = vec![world.arm().frame()];
        for local in 0..steps.subtask_len() {
            let phase = steps.phase_at(local);
            let frame = world.render();
            let raw = cae::encode(&ImageBatch::from_frames(&[&frame])?, &model.cae.params, &model.cae.spec, Mode::Eval)?;
            let mut features = model.normalize_slice(layout.feature_range().start, raw.data());
            if options.feature_jitter > 0.0 {
                for f in &mut features {
                    *f += rng.normal(0.0, options.feature_jitter);
                }
            }
            let instruction = if phase == PhaseLabel::Instruction { &instr_on } else { &instr_off };
            let feedback = if t == 0 {
                MotorFeedback::External(&home)
            } else {
                MotorFeedback::OwnOutput
            };
            let (next, command) =
                closed_loop_step(&state, feedback, &features, instruction, &model.mtrnn.params, spec, &layout)?;
            state = next;
            trace.push(&state, spec);
            phases.push(phase);
            let outcome = world.step(model.denormalized_motor(&command));
            segment.push(outcome.arm.frame());
            executed.push(outcome.arm.frame());
            outputs.push(command);
            t += 1;
            observer(RolloutEvent::Step {
                index,
                step: t,
                phase,
                world: &world,
                cf: state.cf(spec),
            });
        }
        let result = branch_result(index, signal, &g_before, &segment);
        observer(RolloutEvent::Branch(&result));
        branches.push(result);
    }
    let trace = trace.with_phases(&phases)?;
    let (motor_mse, expected_final) = match &options.episode {
        Some(ep) => {
            let oracle = gen_episode(ep, steps)?;
            (Some(oracle_motor_mse(model, &outputs, &oracle)), Some(ep.final_garment()?))
        }
        None => (None, None),
    };
    let final_garment = *world.garment();
    let all_matched = branches.len() == options.subtasks && branches.iter().all(|b| b.matched);
    let success = aborted.is_none()
        && all_matched
        && match expected_final {
            Some(g) => final_garment.same_folds(&g),
            None => final_garment.is_complete(),
        };
    Ok(RolloutReport {
        episode: options.episode.clone(),
        position: options.position,
        seed: options.seed,
        branches,
        motor_mse,
        final_garment,
        motor: executed,
        trace,
        success,
        aborted,
    })
}

/// Convenience wrapper: scheduled rollout of an episode's own instructions.
pub fn scheduled_rollout(model: &Model, episode: &EpisodeSpec, feature_jitter: f64, seed: u64, cs0: Cs0Policy) -> Result<RolloutReport> {
    let options = RolloutOptions::for_episode(episode, feature_jitter, seed, cs0);
    let mut source = ScheduledSource::new(episode.instructions.clone());
    rollout(model, &options, &mut source, &mut |_| {})
}

/// Teacher-forced pass over a dataset sequence, for analysis of the states
/// the network visits on its training data.
pub fn open_loop_trace(model: &Model, sample: &SequenceSample, cs0: &[f64]) -> Result<StateTrace> {
    let (_, trace) = forward_sequence(&sample.inputs, cs0, &model.mtrnn.params, &model.mtrnn.spec)?;
    trace.with_phases(&sample.phases)
}

/// Scores an externally produced motor sequence against an episode: replays
/// it through a fresh world and classifies each subtask segment.
pub fn score_motor_sequence(episode: &EpisodeSpec, steps: StepCounts, motor: &[MotorFrame]) -> Result<(Vec<BranchResult>, GarmentState, bool)> {
    let len = steps.subtask_len();
    if motor.len() != episode.subtasks.len() * len + 1 {
        return Err(shape_mismatch("scored motor", &[episode.subtasks.len() * len + 1], &[motor.len()]));
    }
    let mut world = World::new(episode.initial_garment()?);
    let mut branches = Vec::new();
    for (index, signal) in episode.instructions.iter().enumerate() {
        let g_before = *world.garment();
        let segment = &motor[index * len..(index + 1) * len + 1];
        for m in &segment[1..] {
            world.step(*m);
        }
        branches.push(branch_result(index, *signal, &g_before, segment));
    }
    let final_garment = *world.garment();
    let success = branches.iter().all(|b| b.matched) && final_garment.same_folds(&episode.final_garment()?);
    Ok((branches, final_garment, success))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub episode: String,
    pub seed: u64,
    pub branches_matched: usize,
    pub branches: usize,
    pub motor_mse: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub trials: Vec<TrialSummary>,
    pub branch_accuracy: f64,
    pub success_rate: f64,
    pub mean_motor_mse: f64,
}

impl EvaluationReport {
    pub fn from_trials(trials: Vec<TrialSummary>) -> Self {
        let n = trials.len().max(1) as f64;
        let total_branches: usize = trials.iter().map(|t| t.branches).sum();
        let matched: usize = trials.iter().map(|t| t.branches_matched).sum();
        Self {
            branch_accuracy: if total_branches == 0 {
                0.0
            } else {
                matched as f64 / total_branches as f64
            },
            success_rate: trials.iter().filter(|t| t.success).count() as f64 / n,
            mean_motor_mse: trials.iter().map(|t| t.motor_mse).sum::<f64>() / n,
            trials,
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "trials {}  success {:.1}%  branch accuracy {:.1}%  motor MSE {:.5}",
            self.trials.len(),
            100.0 * self.success_rate,
            100.0 * self.branch_accuracy,
            self.mean_motor_mse
        )
    }
}

impl From<&RolloutReport> for TrialSummary {
    fn from(r: &RolloutReport) -> Self {
        Self {
            episode: r.episode.as_ref().map(EpisodeSpec::label).unwrap_or_else(|| format!("free@{}", r.position)),
            seed: r.seed,
            branches_matched: r.branches.iter().filter(|b| b.matched).count(),
            branches: r.branches.len(),
            motor_mse: r.motor_mse.unwrap_or(f64::NAN),
            success: r.success,
        }
    }
}

/// Scheduled rollouts of every episode under `trials` noise seeds
/// (`seed_base`, `seed_base + 1`, ...).
pub fn evaluate(model: &Model, episodes: &[EpisodeSpec], trials: u64, seed_base: u64, feature_jitter: f64, cs0: Cs0Policy) -> Result<(EvaluationReport, Vec<RolloutReport>)> {
    let mut reports = Vec::new();
    for ep in episodes {
        for k in 0..trials {
            reports.push(scheduled_rollout(model, ep, feature_jitter, seed_base + k, cs0)?);
        }
    }
    let summary = EvaluationReport::from_trials(reports.iter().map(TrialSummary::from).collect());
    Ok((summary, reports))
}
