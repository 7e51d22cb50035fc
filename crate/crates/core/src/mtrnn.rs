//! Multiple-timescale recurrent network.
//!
//! Neurons are laid out as `[IO | Cf | Cs]`. Each step applies the leaky
//! integration
//!
//! ```text
//! u_i(t) = (1 - 1/tau_i) u_i(t-1) + (1/tau_i) (sum_j w_ij x_j(t-1) + b_i)
//! ```
//!
//! where `x_j` is the external input for IO sources and `sigmoid(u_j)` for
//! context sources. Outputs are `sigmoid(u_io)`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::numerics::{clip_global_norm, sigmoid_grad_from_output, sigmoid_scalar, Adam, AdamConfig, Rng, Tensor};
use crate::taskworld::PhaseLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Io,
    Cf,
    Cs,
}

impl Group {
    const ALL: [Group; 3] = [Group::Io, Group::Cf, Group::Cs];

    fn index(self) -> usize {
        self as usize
    }
}

/// Which group pairs are connected, indexed `[target][source]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Connectivity(pub [[bool; 3]; 3]);

impl Connectivity {
    /// IO<->Cf, Cf<->Cs, Cf->Cf, Cs->Cs. No IO<->Cs and no IO->IO.
    pub const STANDARD: Connectivity = Connectivity([
        [false, true, false],
        [true, true, true],
        [false, true, true],
    ]);
    pub const FULL: Connectivity = Connectivity([[true; 3]; 3]);

    pub fn allows(&self, target: Group, source: Group) -> bool {
        self.0[target.index()][source.index()]
    }
}

impl Default for Connectivity {
    fn default() -> Self {
        Self::STANDARD
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtrnnSpec {
    pub io_count: usize,
    pub cf_count: usize,
    pub cs_count: usize,
    pub tau_io: f64,
    pub tau_cf: f64,
    pub tau_cs: f64,
    #[serde(default)]
    pub connectivity: Connectivity,
}

impl MtrnnSpec {
    pub fn new(io_count: usize, cf_count: usize, cs_count: usize, taus: [f64; 3]) -> Result<Self> {
        let spec = Self {
            io_count,
            cf_count,
            cs_count,
            tau_io: taus[0],
            tau_cf: taus[1],
            tau_cs: taus[2],
            connectivity: Connectivity::STANDARD,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.io_count == 0 || self.cf_count == 0 || self.cs_count == 0 {
            return Err(Error::Config(format!(
                "neuron counts must be positive, got io={} cf={} cs={}",
                self.io_count, self.cf_count, self.cs_count
            )));
        }
        let taus = [self.tau_io, self.tau_cf, self.tau_cs];
        if taus.iter().any(|t| !t.is_finite() || *t < 1.0) {
            return Err(Error::Config(format!("time constants must be >= 1, got {taus:?}")));
        }
        if !(self.tau_io <= self.tau_cf && self.tau_cf <= self.tau_cs) {
            return Err(Error::Config(format!(
                "time constants must satisfy tau_io <= tau_cf <= tau_cs, got {taus:?}"
            )));
        }
        Ok(())
    }

    pub fn neuron_count(&self) -> usize {
        self.io_count + self.cf_count + self.cs_count
    }

    pub fn range(&self, group: Group) -> std::ops::Range<usize> {
        match group {
            Group::Io => 0..self.io_count,
            Group::Cf => self.io_count..self.io_count + self.cf_count,
            Group::Cs => self.io_count + self.cf_count..self.neuron_count(),
        }
    }

    pub fn group_of(&self, neuron: usize) -> Group {
        if neuron < self.io_count {
            Group::Io
        } else if neuron < self.io_count + self.cf_count {
            Group::Cf
        } else {
            Group::Cs
        }
    }

    pub fn tau(&self, group: Group) -> f64 {
        match group {
            Group::Io => self.tau_io,
            Group::Cf => self.tau_cf,
            Group::Cs => self.tau_cs,
        }
    }

    /// Per-neuron time constants.
    pub fn taus(&self) -> Vec<f64> {
        (0..self.neuron_count()).map(|i| self.tau(self.group_of(i))).collect()
    }

    /// Row-major `n x n` mask, 1.0 where `w[target][source]` may be non-zero.
    pub fn mask(&self) -> Vec<f64> {
        let n = self.neuron_count();
        let mut mask = vec![0.0; n * n];
        for target in Group::ALL {
            for source in Group::ALL {
                if !self.connectivity.allows(target, source) {
                    continue;
                }
                for i in self.range(target) {
                    for j in self.range(source) {
                        mask[i * n + j] = 1.0;
                    }
                }
            }
        }
        mask
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtrnnParams {
    /// `n x n`, `weights[i][j]` is the weight into neuron `i` from neuron `j`.
    pub weights: Tensor,
    pub bias: Tensor,
}

impl MtrnnParams {
    pub fn zeros(spec: &MtrnnSpec) -> Self {
        let n = spec.neuron_count();
        Self {
            weights: Tensor::zeros(&[n, n]),
            bias: Tensor::zeros(&[n]),
        }
    }

    pub fn check(&self, spec: &MtrnnSpec) -> Result<()> {
        let n = spec.neuron_count();
        if self.weights.shape() != [n, n] {
            return Err(shape_mismatch("MtrnnParams weights", &[n, n], self.weights.shape()));
        }
        if self.bias.shape() != [n] {
            return Err(shape_mismatch("MtrnnParams bias", &[n], self.bias.shape()));
        }
        Ok(())
    }

    pub fn apply_mask(&mut self, spec: &MtrnnSpec) {
        let mask = spec.mask();
        for (w, m) in self.weights.data_mut().iter_mut().zip(mask) {
            if m == 0.0 {
                *w = 0.0;
            }
        }
    }
}

/// Uniform weights in `[-scale, scale]` on allowed connections, zero bias.
pub fn init_params(spec: &MtrnnSpec, rng: &mut Rng, scale: f64) -> Result<MtrnnParams> {
    spec.validate()?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("init scale must be > 0, got {scale}")));
    }
    let mut params = MtrnnParams::zeros(spec);
    let mask = spec.mask();
    for (w, m) in params.weights.data_mut().iter_mut().zip(mask) {
        // Draw for every entry so the stream does not depend on the mask.
        let v = rng.uniform(-scale, scale);
        if m != 0.0 {
            *w = v;
        }
    }
    Ok(params)
}

/// Learnable slow-context initial internal values, one per training sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cs0Bank {
    pub entries: Vec<Vec<f64>>,
}

impl Cs0Bank {
    pub fn zeros(sequences: usize, cs_count: usize) -> Self {
        Self {
            entries: vec![vec![0.0; cs_count]; sequences],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&[f64]> {
        self.entries
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("no Cs(0) entry for sequence {id}")))
    }

    /// Element-wise mean over the bank, used for episodes that were not trained.
    pub fn mean(&self) -> Result<Vec<f64>> {
        let first = self.entries.first().ok_or(Error::Empty("Cs0Bank"))?;
        let mut acc = vec![0.0; first.len()];
        for e in &self.entries {
            for (a, v) in acc.iter_mut().zip(e) {
                *a += v;
            }
        }
        let n = self.entries.len() as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtrnnState {
    /// Internal values for all neurons.
    pub u: Vec<f64>,
    /// `sigmoid(u)` for all neurons; the IO slice is the network output.
    pub x: Vec<f64>,
    pub step: usize,
}

impl MtrnnState {
    /// IO and Cf internal values start at zero, Cs at `cs0`.
    pub fn initial(spec: &MtrnnSpec, cs0: &[f64]) -> Result<Self> {
        if cs0.len() != spec.cs_count {
            return Err(shape_mismatch("initial Cs(0)", &[spec.cs_count], &[cs0.len()]));
        }
        let mut u = vec![0.0; spec.neuron_count()];
        u[spec.range(Group::Cs)].copy_from_slice(cs0);
        let x = u.iter().map(|&v| sigmoid_scalar(v)).collect();
        Ok(Self { u, x, step: 0 })
    }

    pub fn output<'a>(&'a self, spec: &MtrnnSpec) -> &'a [f64] {
        &self.x[spec.range(Group::Io)]
    }

    pub fn cf<'a>(&'a self, spec: &MtrnnSpec) -> &'a [f64] {
        &self.u[spec.range(Group::Cf)]
    }

    pub fn cs<'a>(&'a self, spec: &MtrnnSpec) -> &'a [f64] {
        &self.u[spec.range(Group::Cs)]
    }
}

/// Builds the source vector `x(t-1)`: external input on IO positions,
/// context activations elsewhere.
fn source_vector(spec: &MtrnnSpec, state_x: &[f64], input: &[f64], out: &mut [f64]) {
    out[..spec.io_count].copy_from_slice(input);
    out[spec.io_count..].copy_from_slice(&state_x[spec.io_count..]);
}

/// One leaky-integration update written into `u_next`.
fn integrate(w: &[f64], b: &[f64], taus: &[f64], u_prev: &[f64], source: &[f64], u_next: &mut [f64]) {
    let n = u_prev.len();
    for i in 0..n {
        let row = &w[i * n..(i + 1) * n];
        let drive: f64 = row.iter().zip(source).map(|(w, x)| w * x).sum::<f64>() + b[i];
        let inv = 1.0 / taus[i];
        u_next[i] = (1.0 - inv) * u_prev[i] + inv * drive;
    }
}

pub fn forward_step(
    state: &MtrnnState,
    external_input: &[f64],
    params: &MtrnnParams,
    spec: &MtrnnSpec,
) -> Result<MtrnnState> {
    params.check(spec)?;
    let n = spec.neuron_count();
    if state.u.len() != n || state.x.len() != n {
        return Err(shape_mismatch("forward_step state", &[n], &[state.u.len()]));
    }
    if external_input.len() != spec.io_count {
        return Err(shape_mismatch("forward_step input", &[spec.io_count], &[external_input.len()]));
    }
    let mut source = vec![0.0; n];
    source_vector(spec, &state.x, external_input, &mut source);
    let mut u = vec![0.0; n];
    integrate(
        params.weights.data(),
        params.bias.data(),
        &spec.taus(),
        &state.u,
        &source,
        &mut u,
    );
    let x = u.iter().map(|&v| sigmoid_scalar(v)).collect();
    Ok(MtrnnState {
        u,
        x,
        step: state.step + 1,
    })
}

/// Per-step snapshots of context internal values and outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateTrace {
    pub cf: Vec<Vec<f64>>,
    pub cs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    #[serde(default)]
    pub phases: Vec<PhaseLabel>,
}

impl StateTrace {
    pub fn len(&self) -> usize {
        self.cf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cf.is_empty()
    }

    pub fn push(&mut self, state: &MtrnnState, spec: &MtrnnSpec) {
        self.cf.push(state.cf(spec).to_vec());
        self.cs.push(state.cs(spec).to_vec());
        self.outputs.push(state.output(spec).to_vec());
    }

    pub fn with_phases(mut self, phases: &[PhaseLabel]) -> Result<Self> {
        if phases.len() != self.len() {
            return Err(shape_mismatch("StateTrace phases", &[self.len()], &[phases.len()]));
        }
        self.phases = phases.to_vec();
        Ok(self)
    }
}

/// Teacher-forced unroll. Row `t` of the output predicts input row `t + 1`.
pub fn forward_sequence(
    inputs: &Tensor,
    cs0: &[f64],
    params: &MtrnnParams,
    spec: &MtrnnSpec,
) -> Result<(Tensor, StateTrace)> {
    check_sequence(inputs, spec, 1)?;
    let mut state = MtrnnState::initial(spec, cs0)?;
    let mut trace = StateTrace::default();
    let mut outputs = Vec::with_capacity(inputs.len());
    for t in 0..inputs.rows() {
        state = forward_step(&state, inputs.row(t), params, spec)?;
        outputs.extend_from_slice(state.output(spec));
        trace.push(&state, spec);
    }
    Ok((Tensor::new(vec![inputs.rows(), spec.io_count], outputs)?, trace))
}

fn check_sequence(inputs: &Tensor, spec: &MtrnnSpec, min_len: usize) -> Result<()> {
    if inputs.shape().len() != 2 || inputs.cols() != spec.io_count {
        return Err(shape_mismatch(
            "sequence",
            &[inputs.rows(), spec.io_count],
            inputs.shape(),
        ));
    }
    if inputs.rows() < min_len {
        return Err(Error::InvalidArgument(format!(
            "sequence needs at least {min_len} steps, got {}",
            inputs.rows()
        )));
    }
    Ok(())
}

/// Gradients of `sum over sequences of MSE(outputs[0..T-1], inputs[1..T])`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Indexed by sequence id, same length as the bank.
    pub cs0: Vec<Vec<f64>>,
    /// Mean squared error per element over the whole batch.
    pub loss: f64,
}

/// Full-sequence backpropagation through time.
///
/// Each sequence contributes its own mean squared prediction error, so a
/// sequence listed twice contributes twice. Masked weights get zero gradient.
pub fn bptt(
    batch: &[(&Tensor, usize)],
    params: &MtrnnParams,
    bank: &Cs0Bank,
    spec: &MtrnnSpec,
) -> Result<Gradients> {
    let pairs: Vec<(&Tensor, &Tensor, usize)> = batch.iter().map(|&(s, id)| (s, s, id)).collect();
    bptt_denoising(&pairs, params, bank, spec)
}

/// As [`bptt`], but each sequence is fed from its first tensor while the
/// prediction error is measured against the second.
pub fn bptt_denoising(
    batch: &[(&Tensor, &Tensor, usize)],
    params: &MtrnnParams,
    bank: &Cs0Bank,
    spec: &MtrnnSpec,
) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::Empty("bptt batch"));
    }
    params.check(spec)?;
    let n = spec.neuron_count();
    let mut grads = Gradients {
        weights: vec![0.0; n * n],
        bias: vec![0.0; n],
        cs0: vec![vec![0.0; spec.cs_count]; bank.len()],
        loss: 0.0,
    };
    let mut sse = 0.0;
    let mut elements = 0usize;
    let mut work = BpttWork::new(n);
    for &(inputs, targets, id) in batch {
        check_sequence(inputs, spec, 2)?;
        if targets.shape() != inputs.shape() {
            return Err(shape_mismatch("bptt targets", inputs.shape(), targets.shape()));
        }
        let cs0 = bank.get(id)?;
        let (seq_sse, cs0_grad) = sequence_backward(inputs, targets, cs0, params, spec, &mut grads, &mut work);
        for (g, v) in grads.cs0[id].iter_mut().zip(cs0_grad) {
            *g += v;
        }
        sse += seq_sse;
        elements += (inputs.rows() - 1) * spec.io_count;
    }
    let mask = spec.mask();
    for (g, m) in grads.weights.iter_mut().zip(mask) {
        *g *= m;
    }
    grads.loss = sse / elements as f64;
    Ok(grads)
}

struct BpttWork {
    delta: Vec<f64>,
    delta_next: Vec<f64>,
    scaled: Vec<f64>,
    back: Vec<f64>,
}

impl BpttWork {
    fn new(n: usize) -> Self {
        Self {
            delta: vec![0.0; n],
            delta_next: vec![0.0; n],
            scaled: vec![0.0; n],
            back: vec![0.0; n],
        }
    }
}

/// Accumulates weight and bias gradients for one sequence; returns its SSE
/// and the Cs(0) gradient.
fn sequence_backward(
    inputs: &Tensor,
    targets: &Tensor,
    cs0: &[f64],
    params: &MtrnnParams,
    spec: &MtrnnSpec,
    grads: &mut Gradients,
    work: &mut BpttWork,
) -> (f64, Vec<f64>) {
    let n = spec.neuron_count();
    let io = spec.io_count;
    let steps = inputs.rows();
    let w = params.weights.data();
    let b = params.bias.data();
    let taus = spec.taus();
    let inv_tau: Vec<f64> = taus.iter().map(|t| 1.0 / t).collect();

    // us[t] = u(t) for t = 0..=T; sources[t] = x(t) feeding u(t+1).
    let mut us = vec![0.0; (steps + 1) * n];
    let mut xs = vec![0.0; (steps + 1) * n];
    let mut sources = vec![0.0; steps * n];
    us[spec.range(Group::Cs)].copy_from_slice(cs0);
    for i in 0..n {
        xs[i] = sigmoid_scalar(us[i]);
    }
    for t in 0..steps {
        let (head, tail) = us.split_at_mut((t + 1) * n);
        let u_prev = &head[t * n..];
        let u_next = &mut tail[..n];
        let src = &mut sources[t * n..(t + 1) * n];
        source_vector(spec, &xs[t * n..(t + 1) * n], inputs.row(t), src);
        integrate(w, b, &taus, u_prev, src, u_next);
        for i in 0..n {
            xs[(t + 1) * n + i] = sigmoid_scalar(u_next[i]);
        }
    }

    let scale = 2.0 / ((steps - 1) * io) as f64;
    let mut sse = 0.0;
    let BpttWork {
        delta,
        delta_next,
        scaled,
        back,
    } = work;
    delta_next.iter_mut().for_each(|v| *v = 0.0);
    back.iter_mut().for_each(|v| *v = 0.0);
    for t in (0..=steps).rev() {
        // delta = dJ/du(t)
        for i in 0..n {
            delta[i] = (1.0 - inv_tau[i]) * delta_next[i];
        }
        if t < steps {
            for i in io..n {
                delta[i] += back[i] * sigmoid_grad_from_output(xs[t * n + i]);
            }
        }
        if (1..steps).contains(&t) {
            let target = targets.row(t);
            for i in 0..io {
                let y = xs[t * n + i];
                let err = y - target[i];
                sse += err * err;
                delta[i] += scale * err * sigmoid_grad_from_output(y);
            }
        }
        if t == 0 {
            break;
        }
        // u(t) depends on W, b through (1/tau)(W x(t-1) + b).
        let src = &sources[(t - 1) * n..t * n];
        back.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let g = delta[i] * inv_tau[i];
            scaled[i] = g;
            if g == 0.0 {
                continue;
            }
            grads.bias[i] += g;
            let row = &mut grads.weights[i * n..(i + 1) * n];
            for (r, s) in row.iter_mut().zip(src) {
                *r += g * s;
            }
            let wrow = &w[i * n..(i + 1) * n];
            for (bk, wv) in back.iter_mut().zip(wrow) {
                *bk += g * wv;
            }
        }
        std::mem::swap(delta, delta_next);
    }
    let cs0_grad = delta[spec.range(Group::Cs)].to_vec();
    (sse, cs0_grad)
}

/// Layout of the IO vector: `[motor | features | instruction]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoLayout {
    pub motor: usize,
    pub features: usize,
    pub instruction: usize,
}

impl IoLayout {
    pub const DESK: IoLayout = IoLayout {
        motor: 3,
        features: 10,
        instruction: 3,
    };

    pub fn total(&self) -> usize {
        self.motor + self.features + self.instruction
    }

    pub fn motor_range(&self) -> std::ops::Range<usize> {
        0..self.motor
    }

    pub fn feature_range(&self) -> std::ops::Range<usize> {
        self.motor..self.motor + self.features
    }

    pub fn instruction_range(&self) -> std::ops::Range<usize> {
        self.motor + self.features..self.total()
    }
}

/// Where the motor slice of the next input comes from.
#[derive(Clone, Copy, Debug)]
pub enum MotorFeedback<'a> {
    /// The network's own previous motor output.
    OwnOutput,
    /// A measured pose, e.g. the world's arm state before the first prediction.
    External(&'a [f64]),
}

/// One online generation step. Returns the new state and its motor output
/// (normalized; the caller denormalizes).
pub fn closed_loop_step(
    state: &MtrnnState,
    feedback: MotorFeedback<'_>,
    env_features: &[f64],
    instruction: &[f64],
    params: &MtrnnParams,
    spec: &MtrnnSpec,
    layout: &IoLayout,
) -> Result<(MtrnnState, Vec<f64>)> {
    if layout.total() != spec.io_count {
        return Err(shape_mismatch("IoLayout", &[spec.io_count], &[layout.total()]));
    }
    if env_features.len() != layout.features {
        return Err(shape_mismatch("closed_loop features", &[layout.features], &[env_features.len()]));
    }
    if instruction.len() != layout.instruction {
        return Err(shape_mismatch(
            "closed_loop instruction",
            &[layout.instruction],
            &[instruction.len()],
        ));
    }
    let motor: &[f64] = match feedback {
        MotorFeedback::OwnOutput => &state.x[layout.motor_range()],
        MotorFeedback::External(m) => m,
    };
    if motor.len() != layout.motor {
        return Err(shape_mismatch("closed_loop motor", &[layout.motor], &[motor.len()]));
    }
    let mut input = Vec::with_capacity(spec.io_count);
    input.extend_from_slice(motor);
    input.extend_from_slice(env_features);
    input.extend_from_slice(instruction);
    let next = forward_step(state, &input, params, spec)?;
    let command = next.x[layout.motor_range()].to_vec();
    Ok((next, command))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtrnnTrainConfig {
    pub max_epochs: usize,
    /// Stop early once the epoch loss falls below this.
    pub loss_threshold: Option<f64>,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub init_scale: f64,
    /// Strength of a quadratic pull of every Cs(0) entry toward the bank mean.
    /// Keeps the mean a usable initial state for episodes never trained on.
    pub cs0_pull: f64,
    /// Standard deviation of Gaussian noise added to the fed inputs, drawn
    /// afresh each epoch. Targets stay clean.
    pub input_noise: f64,
}

impl Default for MtrnnTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 12000,
            loss_threshold: None,
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            clip_norm: 5.0,
            init_scale: 0.1,
            cs0_pull: 1.0,
            input_noise: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtrnnTraining {
    pub params: MtrnnParams,
    pub bank: Cs0Bank,
    /// Full-batch loss before each update.
    pub loss_history: Vec<f64>,
}

impl MtrnnTraining {
    pub fn epochs(&self) -> usize {
        self.loss_history.len()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }
}

/// Full-batch BPTT with Adam over weights, biases and the Cs(0) bank.
///
/// `sequences[i]` owns bank entry `i`. `on_epoch` sees the epoch index and the
/// pre-update loss; returning `false` stops training.
pub fn train_mtrnn(
    sequences: &[Tensor],
    spec: &MtrnnSpec,
    config: &MtrnnTrainConfig,
    rng: &mut Rng,
    on_epoch: &mut dyn FnMut(usize, f64, &MtrnnParams, &Cs0Bank) -> bool,
) -> Result<MtrnnTraining> {
    if sequences.is_empty() {
        return Err(Error::Empty("training sequences"));
    }
    for seq in sequences {
        check_sequence(seq, spec, 2)?;
    }
    let params = init_params(spec, rng, config.init_scale)?;
    let bank = Cs0Bank::zeros(sequences.len(), spec.cs_count);
    train_mtrnn_from(sequences, spec, config, params, bank, rng, on_epoch)
}

/// Continues training from existing parameters.
pub fn train_mtrnn_from(
    sequences: &[Tensor],
    spec: &MtrnnSpec,
    config: &MtrnnTrainConfig,
    mut params: MtrnnParams,
    mut bank: Cs0Bank,
    rng: &mut Rng,
    on_epoch: &mut dyn FnMut(usize, f64, &MtrnnParams, &Cs0Bank) -> bool,
) -> Result<MtrnnTraining> {
    params.check(spec)?;
    if bank.len() != sequences.len() {
        return Err(shape_mismatch("Cs0Bank", &[sequences.len()], &[bank.len()]));
    }
    if !(config.clip_norm > 0.0) {
        return Err(Error::Config("clip_norm must be positive".into()));
    }
    if !(config.cs0_pull >= 0.0) {
        return Err(Error::Config("cs0_pull must be non-negative".into()));
    }
    if !(config.input_noise >= 0.0) {
        return Err(Error::Config("input_noise must be non-negative".into()));
    }
    let n = spec.neuron_count();
    let mut flat = Vec::with_capacity(n * n + n + bank.len() * spec.cs_count);
    flat.extend_from_slice(params.weights.data());
    flat.extend_from_slice(params.bias.data());
    for e in &bank.entries {
        flat.extend_from_slice(e);
    }
    let mut adam = Adam::new(config.adam, flat.len());
    let mut fed: Vec<Tensor> = sequences.to_vec();
    let mut history = Vec::new();
    for epoch in 0..config.max_epochs {
        if config.input_noise > 0.0 {
            for (noisy, clean) in fed.iter_mut().zip(sequences) {
                for (v, c) in noisy.data_mut().iter_mut().zip(clean.data()) {
                    *v = c + rng.normal(0.0, config.input_noise);
                }
            }
        }
        let batch: Vec<(&Tensor, &Tensor, usize)> = fed.iter().zip(sequences).enumerate().map(|(i, (f, s))| (f, s, i)).collect();
        let grads = bptt_denoising(&batch, &params, &bank, spec)?;
        history.push(grads.loss);
        if !on_epoch(epoch, grads.loss, &params, &bank) {
            break;
        }
        if config.loss_threshold.is_some_and(|t| grads.loss < t) {
            break;
        }
        let mut g = grads.weights;
        g.extend(grads.bias);
        let mean = bank.mean()?;
        for (e, cs0) in grads.cs0.into_iter().zip(&bank.entries) {
            // d/dc_i of (pull/2)·Σ_j |c_j - mean|² is pull·(c_i - mean)
            g.extend(e.iter().zip(cs0.iter().zip(&mean)).map(|(g, (c, m))| g + config.cs0_pull * (c - m)));
        }
        clip_global_norm(&mut g, config.clip_norm);
        adam.step(&mut flat, &g)?;
        params.weights.data_mut().copy_from_slice(&flat[..n * n]);
        params.bias.data_mut().copy_from_slice(&flat[n * n..n * n + n]);
        for (i, e) in bank.entries.iter_mut().enumerate() {
            let start = n * n + n + i * spec.cs_count;
            e.copy_from_slice(&flat[start..start + spec.cs_count]);
        }
        params.apply_mask(spec);
    }
    Ok(MtrnnTraining {
        params,
        bank,
        loss_history: history,
    })
}
