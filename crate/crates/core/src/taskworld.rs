//! Kinematic 2-D garment-folding world.
//!
//! The garment is a short-sleeved shirt whose fold state is discrete. A
//! single end effector `(x, y, gripper)` moves in the unit square and folds
//! the garment by grasping, dragging and releasing. Coordinates are y-up with
//! the origin at the bottom-left of the workspace.

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Motor frame `[x, y, gripper]`.
pub type MotorFrame = [f64; 3];

pub const HOME: MotorFrame = [0.5, 0.85, 0.0];
pub const POSITION_COUNT: u8 = 6;
pub const IMAGE_SIZE: usize = 64;

const GARMENT_CENTER_Y: f64 = 0.35;
const POSITION_SPACING: f64 = 0.05;
const GRIP_CLOSE: f64 = 0.6;
const GRIP_OPEN: f64 = 0.4;
const GRASP_TOLERANCE: f64 = 0.08;
const MIN_DRAG_COSINE: f64 = 0.7;

/// Horizontal garment centre for a 1-based object position.
pub fn position_offset(index: u8) -> Result<f64> {
    if !(1..=POSITION_COUNT).contains(&index) {
        return Err(Error::InvalidArgument(format!(
            "object position must be in 1..={POSITION_COUNT}, got {index}"
        )));
    }
    Ok(0.5 + (index as f64 - 3.5) * POSITION_SPACING)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubtaskId {
    A,
    B,
    C,
    D,
    E,
}

impl SubtaskId {
    pub const ALL: [SubtaskId; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    pub fn instruction(self) -> InstructionSignal {
        match self {
            Self::A | Self::D => InstructionSignal::Right,
            Self::B | Self::E => InstructionSignal::Left,
            Self::C => InstructionSignal::Up,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SubtaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for SubtaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            "D" => Ok(Self::D),
            "E" => Ok(Self::E),
            other => Err(Error::InvalidArgument(format!("unknown subtask {other:?}"))),
        }
    }
}

/// Fold-direction instruction. Raw vectors are one-hot or all zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionSignal {
    Right,
    Left,
    Up,
    None,
}

impl InstructionSignal {
    pub fn vector(self) -> [f64; 3] {
        match self {
            Self::Right => [1.0, 0.0, 0.0],
            Self::Left => [0.0, 1.0, 0.0],
            Self::Up => [0.0, 0.0, 1.0],
            Self::None => [0.0, 0.0, 0.0],
        }
    }
}

impl std::str::FromStr for InstructionSignal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "r" | "right" => Ok(Self::Right),
            "l" | "left" => Ok(Self::Left),
            "u" | "up" => Ok(Self::Up),
            "n" | "none" | "-" => Ok(Self::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown instruction {other:?} (expected right, left, up or none)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalFold {
    #[default]
    None,
    Right,
    Left,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarmentState {
    pub position: f64,
    pub left_sleeve_folded: bool,
    pub right_sleeve_folded: bool,
    pub bottom_folded: bool,
    pub final_fold: FinalFold,
}

impl GarmentState {
    pub fn fresh(position_index: u8) -> Result<Self> {
        Ok(Self::fresh_at(position_offset(position_index)?))
    }

    pub fn fresh_at(position: f64) -> Self {
        Self {
            position,
            left_sleeve_folded: false,
            right_sleeve_folded: false,
            bottom_folded: false,
            final_fold: FinalFold::None,
        }
    }

    pub fn is_legal(&self) -> bool {
        let sleeves = self.left_sleeve_folded && self.right_sleeve_folded;
        (!self.bottom_folded || sleeves)
            && (self.final_fold == FinalFold::None || (sleeves && self.bottom_folded))
            && self.position.is_finite()
    }

    pub fn is_complete(&self) -> bool {
        self.final_fold != FinalFold::None
    }

    /// Flags only, ignoring placement.
    pub fn same_folds(&self, other: &GarmentState) -> bool {
        self.left_sleeve_folded == other.left_sleeve_folded
            && self.right_sleeve_folded == other.right_sleeve_folded
            && self.bottom_folded == other.bottom_folded
            && self.final_fold == other.final_fold
    }
}

impl fmt::Display for GarmentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(pos {:.3}, left {}, right {}, bottom {}, final {:?})",
            self.position,
            self.left_sleeve_folded,
            self.right_sleeve_folded,
            self.bottom_folded,
            self.final_fold
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub x: f64,
    pub y: f64,
    pub gripper: f64,
}

impl ArmState {
    pub const fn home() -> Self {
        Self {
            x: HOME[0],
            y: HOME[1],
            gripper: HOME[2],
        }
    }

    pub fn frame(&self) -> MotorFrame {
        [self.x, self.y, self.gripper]
    }
}

impl Default for ArmState {
    fn default() -> Self {
        Self::home()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseLabel {
    Instruction,
    Behavior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepCounts {
    pub instruction: usize,
    pub behavior: usize,
}

impl StepCounts {
    pub const DESK: StepCounts = StepCounts {
        instruction: 10,
        behavior: 50,
    };
    pub const ROBOT: StepCounts = StepCounts {
        instruction: 20,
        behavior: 132,
    };

    pub fn subtask_len(&self) -> usize {
        self.instruction + self.behavior
    }

    pub fn validate(&self) -> Result<()> {
        if self.instruction == 0 || self.behavior < 10 {
            return Err(Error::Config(format!(
                "step counts need instruction >= 1 and behavior >= 10, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Phase of a step inside an episode made of back-to-back subtasks.
    pub fn phase_at(&self, step: usize) -> PhaseLabel {
        if step % self.subtask_len() < self.instruction {
            PhaseLabel::Instruction
        } else {
            PhaseLabel::Behavior
        }
    }
}

impl Default for StepCounts {
    fn default() -> Self {
        Self::DESK
    }
}

/// The subtasks that may legally be executed next.
pub fn valid_subtasks(g: &GarmentState) -> Vec<SubtaskId> {
    if g.final_fold != FinalFold::None {
        return Vec::new();
    }
    if g.bottom_folded {
        return vec![SubtaskId::D, SubtaskId::E];
    }
    if g.left_sleeve_folded && g.right_sleeve_folded {
        return vec![SubtaskId::C];
    }
    let mut out = Vec::with_capacity(2);
    if !g.left_sleeve_folded {
        out.push(SubtaskId::A);
    }
    if !g.right_sleeve_folded {
        out.push(SubtaskId::B);
    }
    out
}

pub fn apply_fold(g: &GarmentState, s: SubtaskId) -> Result<GarmentState> {
    if !valid_subtasks(g).contains(&s) {
        return Err(Error::IllegalSubtask {
            subtask: s.to_string(),
            state: g.to_string(),
        });
    }
    let mut next = *g;
    match s {
        SubtaskId::A => next.left_sleeve_folded = true,
        SubtaskId::B => next.right_sleeve_folded = true,
        SubtaskId::C => next.bottom_folded = true,
        SubtaskId::D => next.final_fold = FinalFold::Right,
        SubtaskId::E => next.final_fold = FinalFold::Left,
    }
    Ok(next)
}

/// Grasp point and release point of a subtask, in workspace units.
pub fn grasp_and_release(s: SubtaskId, g: &GarmentState) -> ([f64; 2], [f64; 2]) {
    let cx = g.position;
    let cy = GARMENT_CENTER_Y;
    match s {
        SubtaskId::A => ([cx - 0.22, cy + 0.10], [cx - 0.04, cy + 0.10]),
        SubtaskId::B => ([cx + 0.22, cy + 0.10], [cx + 0.04, cy + 0.10]),
        SubtaskId::C => ([cx, cy - 0.16], [cx, cy + 0.14]),
        SubtaskId::D => ([cx - 0.12, cy + 0.07], [cx + 0.12, cy + 0.07]),
        SubtaskId::E => ([cx + 0.12, cy + 0.07], [cx - 0.12, cy + 0.07]),
    }
}

/// Minimum-jerk blend `10s^3 - 15s^4 + 6s^5` for `s` in [0, 1].
pub fn min_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
}

fn interpolate(from: MotorFrame, to: MotorFrame, s: f64) -> MotorFrame {
    let b = min_jerk(s);
    [
        from[0] + (to[0] - from[0]) * b,
        from[1] + (to[1] - from[1]) * b,
        from[2] + (to[2] - from[2]) * b,
    ]
}

/// Behaviour-phase keyframe indices: reach, close, drag, open, return.
fn behavior_keyframes(n: usize) -> [usize; 6] {
    let last = (n - 1) as f64;
    let fractions = [0.0, 0.28, 0.36, 0.64, 0.72, 1.0];
    let mut k = [0usize; 6];
    for (slot, f) in k.iter_mut().zip(fractions) {
        *slot = (f * last).round() as usize;
    }
    k
}

/// Motor frames, per-frame garment states and phase labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub motor: Vec<MotorFrame>,
    pub garment: Vec<GarmentState>,
    pub phases: Vec<PhaseLabel>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.motor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motor.is_empty()
    }

    fn extend(&mut self, other: Trajectory) {
        self.motor.extend(other.motor);
        self.garment.extend(other.garment);
        self.phases.extend(other.phases);
    }
}

/// Waypoints for one subtask in behaviour-local frame indices.
pub fn subtask_waypoints(s: SubtaskId, g: &GarmentState, behavior: usize) -> [(usize, MotorFrame); 6] {
    let (grasp, release) = grasp_and_release(s, g);
    let k = behavior_keyframes(behavior);
    [
        (k[0], HOME),
        (k[1], [grasp[0], grasp[1], 0.0]),
        (k[2], [grasp[0], grasp[1], 1.0]),
        (k[3], [release[0], release[1], 1.0]),
        (k[4], [release[0], release[1], 0.0]),
        (k[5], HOME),
    ]
}

/// Synthesises one subtask: a held instruction phase followed by a
/// minimum-jerk reach / grasp / drag / release / return motion.
pub fn gen_trajectory(s: SubtaskId, g: &GarmentState, steps: StepCounts) -> Result<Trajectory> {
    steps.validate()?;
    if !valid_subtasks(g).contains(&s) {
        return Err(Error::IllegalSubtask {
            subtask: s.to_string(),
            state: g.to_string(),
        });
    }
    let mut motor = vec![HOME; steps.instruction];
    let waypoints = subtask_waypoints(s, g, steps.behavior);
    for seg in waypoints.windows(2) {
        let (k0, f0) = seg[0];
        let (k1, f1) = seg[1];
        let start = if k0 == 0 { 0 } else { k0 + 1 };
        for k in start..=k1 {
            if k == 0 {
                motor.push(f0);
                continue;
            }
            let s = (k - k0) as f64 / (k1 - k0) as f64;
            motor.push(interpolate(f0, f1, s));
        }
    }
    debug_assert_eq!(motor.len(), steps.subtask_len());
    let mut phases = vec![PhaseLabel::Instruction; steps.instruction];
    phases.extend(std::iter::repeat_n(PhaseLabel::Behavior, steps.behavior));

    // Garment keyframes come from replaying through the world so the
    // dataset and closed-loop rollouts share one fold-update rule.
    let mut world = World::new(*g);
    let garment = motor.iter().map(|m| world.step(*m).garment).collect();
    Ok(Trajectory {
        motor,
        garment,
        phases,
    })
}

/// Ordered subtasks together with the object position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub subtasks: Vec<SubtaskId>,
    pub position: u8,
    pub instructions: Vec<InstructionSignal>,
}

impl EpisodeSpec {
    pub fn new(subtasks: Vec<SubtaskId>, position: u8) -> Result<Self> {
        let instructions = subtasks.iter().map(|s| s.instruction()).collect();
        let spec = Self {
            subtasks,
            position,
            instructions,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Patterns 1-3 are the training set, pattern 4 is the held-out test.
    pub fn pattern(id: u8, position: u8) -> Result<Self> {
        use SubtaskId::*;
        let subtasks = match id {
            1 => vec![A, B, C, D],
            2 => vec![A, B, C, E],
            3 => vec![B, A, C, D],
            4 => vec![B, A, C, E],
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown pattern {id} (expected 1-4)"
                )))
            }
        };
        Self::new(subtasks, position)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subtasks.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "an episode has exactly 4 subtasks, got {}",
                self.subtasks.len()
            )));
        }
        if self.instructions.len() != self.subtasks.len() {
            return Err(Error::InvalidArgument(
                "one instruction per subtask is required".into(),
            ));
        }
        for (s, i) in self.subtasks.iter().zip(&self.instructions) {
            if s.instruction() != *i {
                return Err(Error::InvalidArgument(format!(
                    "subtask {s} requires instruction {:?}, got {i:?}",
                    s.instruction()
                )));
            }
        }
        let mut g = GarmentState::fresh(self.position)?;
        for &s in &self.subtasks {
            g = apply_fold(&g, s)?;
        }
        Ok(())
    }

    pub fn initial_garment(&self) -> Result<GarmentState> {
        GarmentState::fresh(self.position)
    }

    /// Garment state after every subtask has been applied.
    pub fn final_garment(&self) -> Result<GarmentState> {
        let mut g = self.initial_garment()?;
        for &s in &self.subtasks {
            g = apply_fold(&g, s)?;
        }
        Ok(g)
    }

    pub fn label(&self) -> String {
        let letters: String = self.subtasks.iter().map(|s| s.to_string()).collect();
        format!("{letters}@{}", self.position)
    }
}

/// Concatenates the subtask trajectories of an episode.
pub fn gen_episode(spec: &EpisodeSpec, steps: StepCounts) -> Result<Trajectory> {
    spec.validate()?;
    let mut g = spec.initial_garment()?;
    let mut out = Trajectory {
        motor: Vec::new(),
        garment: Vec::new(),
        phases: Vec::new(),
    };
    for &s in &spec.subtasks {
        let part = gen_trajectory(s, &g, steps)?;
        g = *part.garment.last().expect("non-empty trajectory");
        out.extend(part);
    }
    Ok(out)
}

/// Grasp/release events found in a motor sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraspEvent {
    pub grasp: [f64; 2],
    pub release: [f64; 2],
}

fn window_mean(motor: &[MotorFrame], center: usize) -> [f64; 2] {
    let lo = center.saturating_sub(1);
    let hi = (center + 1).min(motor.len() - 1);
    let n = (hi - lo + 1) as f64;
    let mut acc = [0.0; 2];
    for m in &motor[lo..=hi] {
        acc[0] += m[0];
        acc[1] += m[1];
    }
    [acc[0] / n, acc[1] / n]
}

/// First closure of the gripper (with hysteresis) and the following release.
pub fn find_grasp(motor: &[MotorFrame]) -> Option<GraspEvent> {
    let close = motor.iter().position(|m| m[2] > GRIP_CLOSE)?;
    let release = motor[close..]
        .iter()
        .position(|m| m[2] < GRIP_OPEN)
        .map(|i| i + close)
        .unwrap_or(motor.len() - 1);
    Some(GraspEvent {
        grasp: window_mean(motor, close),
        release: window_mean(motor, release),
    })
}

/// Identifies which legal subtask a motor sequence performed, if any.
pub fn classify_fold(motor: &[MotorFrame], g_before: &GarmentState) -> Option<SubtaskId> {
    if motor.len() < 2 {
        return None;
    }
    let event = find_grasp(motor)?;
    let drag = [
        event.release[0] - event.grasp[0],
        event.release[1] - event.grasp[1],
    ];
    let drag_len = drag[0].hypot(drag[1]);
    let mut matches: Vec<(f64, SubtaskId)> = valid_subtasks(g_before)
        .into_iter()
        .filter_map(|s| {
            let (g0, g1) = grasp_and_release(s, g_before);
            let expected = [g1[0] - g0[0], g1[1] - g0[1]];
            let expected_len = expected[0].hypot(expected[1]);
            let dist = (event.grasp[0] - g0[0]).hypot(event.grasp[1] - g0[1]);
            if dist > GRASP_TOLERANCE || drag_len < 0.5 * expected_len {
                return None;
            }
            let cosine = (drag[0] * expected[0] + drag[1] * expected[1]) / (drag_len * expected_len);
            (cosine >= MIN_DRAG_COSINE).then_some((dist, s))
        })
        .collect();
    matches.sort_by(|a, b| a.0.total_cmp(&b.0));
    match matches.as_slice() {
        [] => None,
        [(_, s)] => Some(*s),
        [(d0, s), (d1, _), ..] if *d0 < 0.5 * *d1 => Some(*s),
        _ => None,
    }
}

/// Result of one world step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub garment: GarmentState,
    pub arm: ArmState,
    /// The command was outside the workspace and got clamped.
    pub clamped: bool,
    /// Subtask completed on this step by a grasp-drag-release.
    pub completed: Option<SubtaskId>,
}

/// Kinematic world: the arm teleports to each command and fold flags change
/// when a completed grasp-drag-release matches a legal subtask.
#[derive(Clone, Debug)]
pub struct World {
    garment: GarmentState,
    arm: ArmState,
    buffer: Vec<MotorFrame>,
    closed: bool,
}

impl World {
    pub fn new(garment: GarmentState) -> Self {
        Self {
            garment,
            arm: ArmState::home(),
            buffer: vec![HOME],
            closed: false,
        }
    }

    pub fn garment(&self) -> &GarmentState {
        &self.garment
    }

    pub fn arm(&self) -> &ArmState {
        &self.arm
    }

    pub fn render(&self) -> Frame {
        render(&self.garment, &self.arm)
    }

    pub fn step(&mut self, command: MotorFrame) -> StepOutcome {
        let (arm, clamped) = clamp_command(command);
        self.arm = arm;
        let frame = arm.frame();
        self.buffer.push(frame);
        let mut completed = None;
        if !self.closed && arm.gripper > GRIP_CLOSE {
            self.closed = true;
        } else if self.closed && arm.gripper < GRIP_OPEN {
            self.closed = false;
            if let Some(s) = classify_fold(&self.buffer, &self.garment) {
                // classify_fold only returns legal subtasks.
                self.garment = apply_fold(&self.garment, s).expect("classified subtask is legal");
                completed = Some(s);
            }
            self.buffer.clear();
            self.buffer.push(frame);
        }
        StepOutcome {
            garment: self.garment,
            arm,
            clamped,
            completed,
        }
    }
}

/// Pure form of [`World::step`] for a world with an empty grasp history.
pub fn step_world(g: &GarmentState, command: MotorFrame) -> StepOutcome {
    World::new(*g).step(command)
}

fn clamp_command(command: MotorFrame) -> (ArmState, bool) {
    let sanitize = |v: f64| if v.is_finite() { v } else { 0.0 };
    let raw = command.map(sanitize);
    let clamped_frame = raw.map(|v| v.clamp(0.0, 1.0));
    let clamped = raw != clamped_frame || command.iter().any(|v| !v.is_finite());
    (
        ArmState {
            x: clamped_frame[0],
            y: clamped_frame[1],
            gripper: clamped_frame[2],
        },
        clamped,
    )
}

/// H x W x 3 image with channel values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Format("frame buffer size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }
}

const BACKGROUND: [f64; 3] = [0.86, 0.84, 0.78];
const BODY: [f64; 3] = [0.20, 0.42, 0.80];
const SLEEVE_FLAP: [f64; 3] = [0.12, 0.27, 0.58];
const BOTTOM_FLAP: [f64; 3] = [0.38, 0.58, 0.90];
const FINAL_FLAP: [f64; 3] = [0.10, 0.62, 0.62];
const ARM_LINK: [f64; 3] = [0.45, 0.45, 0.48];
const ARM_MARKER: [f64; 3] = [0.95, 0.45, 0.10];
const GRIP_CLOSED: [f64; 3] = [0.05, 0.05, 0.05];
const SUPERSAMPLE: usize = 3;

#[derive(Clone, Debug)]
enum Shape {
    /// Convex polygon, counter-clockwise.
    Polygon(Vec<[f64; 2]>),
    Disc { center: [f64; 2], radius: f64 },
}

impl Shape {
    fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            Shape::Polygon(pts) => {
                let n = pts.len();
                (0..n).all(|i| {
                    let a = pts[i];
                    let b = pts[(i + 1) % n];
                    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
                })
            }
            Shape::Disc { center, radius } => {
                (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) <= radius * radius
            }
        }
    }
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Shape {
    Shape::Polygon(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
}

/// Garment outline as layered shapes in drawing order.
fn garment_layers(g: &GarmentState) -> Vec<(Shape, [f64; 3])> {
    let cx = g.position;
    let cy = GARMENT_CENTER_Y;
    let mut layers = Vec::new();
    match g.final_fold {
        FinalFold::Right => {
            layers.push((rect(cx, cy - 0.01, cx + 0.13, cy + 0.15), FINAL_FLAP));
            return layers;
        }
        FinalFold::Left => {
            layers.push((rect(cx - 0.13, cy - 0.01, cx, cy + 0.15), FINAL_FLAP));
            return layers;
        }
        FinalFold::None => {}
    }
    if g.bottom_folded {
        layers.push((rect(cx - 0.13, cy - 0.01, cx + 0.13, cy + 0.15), BOTTOM_FLAP));
        return layers;
    }
    layers.push((rect(cx - 0.13, cy - 0.17, cx + 0.13, cy + 0.15), BODY));
    let shoulder = 0.13;
    if g.left_sleeve_folded {
        layers.push((
            Shape::Polygon(vec![
                [cx - shoulder, cy + 0.05],
                [cx - 0.03, cy + 0.07],
                [cx - 0.03, cy + 0.13],
                [cx - shoulder, cy + 0.15],
            ]),
            SLEEVE_FLAP,
        ));
    } else {
        layers.push((
            Shape::Polygon(vec![
                [cx - 0.23, cy + 0.07],
                [cx - shoulder, cy + 0.05],
                [cx - shoulder, cy + 0.15],
                [cx - 0.23, cy + 0.13],
            ]),
            BODY,
        ));
    }
    if g.right_sleeve_folded {
        layers.push((
            Shape::Polygon(vec![
                [cx + 0.03, cy + 0.07],
                [cx + shoulder, cy + 0.05],
                [cx + shoulder, cy + 0.15],
                [cx + 0.03, cy + 0.13],
            ]),
            SLEEVE_FLAP,
        ));
    } else {
        layers.push((
            Shape::Polygon(vec![
                [cx + shoulder, cy + 0.05],
                [cx + 0.23, cy + 0.07],
                [cx + 0.23, cy + 0.13],
                [cx + shoulder, cy + 0.15],
            ]),
            BODY,
        ));
    }
    layers
}

fn arm_layers(a: &ArmState) -> Vec<(Shape, [f64; 3])> {
    let grip = a.gripper.clamp(0.0, 1.0);
    let inner = [0, 1, 2].map(|c| ARM_MARKER[c] * (1.0 - grip) + GRIP_CLOSED[c] * grip);
    vec![
        (rect(a.x - 0.012, a.y, a.x + 0.012, 1.01), ARM_LINK),
        (
            Shape::Disc {
                center: [a.x, a.y],
                radius: 0.045,
            },
            ARM_MARKER,
        ),
        (
            Shape::Disc {
                center: [a.x, a.y],
                radius: 0.022,
            },
            inner,
        ),
    ]
}

/// One filled garment polygon in workspace coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlinePolygon {
    pub points: Vec<[f64; 2]>,
    pub fill: [f64; 3],
}

/// Vector form of the garment drawing, in drawing order. Lets a client draw
/// the scene without decoding frames.
pub fn garment_outline(g: &GarmentState) -> Vec<OutlinePolygon> {
    garment_layers(g)
        .into_iter()
        .filter_map(|(shape, fill)| match shape {
            Shape::Polygon(points) => Some(OutlinePolygon { points, fill }),
            Shape::Disc { .. } => None,
        })
        .collect()
}

/// Axis-aligned bounding boxes `[x0, y0, x1, y1]` of the arm drawing.
pub fn arm_footprint(a: &ArmState) -> [[f64; 4]; 2] {
    [
        [a.x - 0.012, a.y, a.x + 0.012, 1.01],
        [a.x - 0.045, a.y - 0.045, a.x + 0.045, a.y + 0.045],
    ]
}

/// Bounding box of the left sleeve in either fold state.
pub fn left_sleeve_region(g: &GarmentState) -> [f64; 4] {
    let cx = g.position;
    let cy = GARMENT_CENTER_Y;
    [cx - 0.23, cy + 0.05, cx - 0.03, cy + 0.15]
}

/// Deterministic 64 x 64 supersampled rasterisation of the scene.
pub fn render(g: &GarmentState, a: &ArmState) -> Frame {
    let mut layers = garment_layers(g);
    layers.extend(arm_layers(a));
    let size = IMAGE_SIZE;
    let mut data = vec![0.0; size * size * 3];
    let samples = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for row in 0..size {
        for col in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (col as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / size as f64;
                    let y = 1.0 - (row as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / size as f64;
                    let color = layers
                        .iter()
                        .rev()
                        .find(|(shape, _)| shape.contains([x, y]))
                        .map(|(_, c)| *c)
                        .unwrap_or(BACKGROUND);
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            let i = (row * size + col) * 3;
            for c in 0..3 {
                data[i + c] = acc[c] / samples;
            }
        }
    }
    Frame {
        height: size,
        width: size,
        data,
    }
}

/// Structured-text replay of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReplay {
    pub format: String,
    pub episode: EpisodeSpec,
    pub steps: StepCounts,
    pub motor: Vec<MotorFrame>,
    pub phases: Vec<PhaseLabel>,
    pub garment: Vec<GarmentState>,
}

pub const REPLAY_FORMAT: &str = "switchfold-episode-replay/1";

impl EpisodeReplay {
    pub fn generate(episode: &EpisodeSpec, steps: StepCounts) -> Result<Self> {
        let traj = gen_episode(episode, steps)?;
        Ok(Self {
            format: REPLAY_FORMAT.to_string(),
            episode: episode.clone(),
            steps,
            motor: traj.motor,
            phases: traj.phases,
            garment: traj.garment,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let replay: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if replay.format != REPLAY_FORMAT {
            return Err(Error::Format(format!(
                "unsupported replay format {:?}",
                replay.format
            )));
        }
        Ok(replay)
    }
}
