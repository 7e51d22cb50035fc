//! JSON messages exchanged over a session socket.
//!
//! Every message is an object with a `type` tag. The server sends `state`,
//! `branch_result`, `done` and `error`; the client sends `instruct` and
//! `start`.

use base64::Engine;
use serde::{Deserialize, Serialize};
use switchfold::pipeline::{BranchResult, RolloutReport};
use switchfold::taskworld::{garment_outline, ArmState, GarmentState, InstructionSignal, OutlinePolygon, PhaseLabel, World};
use switchfold::Result;

/// Instructions a human may send. `none` exists in the model but is not a
/// choice offered to the instructor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Right,
    Left,
    Up,
}

impl From<Signal> for InstructionSignal {
    fn from(s: Signal) -> Self {
        match s {
            Signal::Right => InstructionSignal::Right,
            Signal::Left => InstructionSignal::Left,
            Signal::Up => InstructionSignal::Up,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmView {
    pub x: f64,
    pub y: f64,
    pub grip: f64,
}

impl From<ArmState> for ArmView {
    fn from(a: ArmState) -> Self {
        Self {
            x: a.x,
            y: a.y,
            grip: a.gripper,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    /// World steps executed so far in the episode.
    pub step: usize,
    /// Index of the current subtask, 0-based.
    pub subtask: usize,
    pub phase: PhaseLabel,
    pub arm: ArmView,
    pub garment: GarmentState,
    /// Garment polygons in workspace coordinates (y up), for clients that
    /// draw vectors instead of decoding frames.
    pub outline: Vec<OutlinePolygon>,
    /// Base64 PNG of the rendered scene, sent every `frame_stride` steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<String>,
    pub awaiting: bool,
}

impl StateMessage {
    pub fn from_world(world: &World, step: usize, subtask: usize, phase: PhaseLabel, awaiting: bool, with_frame: bool) -> Result<Self> {
        let frame = if with_frame {
            Some(base64::engine::general_purpose::STANDARD.encode(world.render().to_png()?))
        } else {
            None
        };
        Ok(Self {
            step,
            subtask,
            phase,
            arm: (*world.arm()).into(),
            garment: *world.garment(),
            outline: garment_outline(world.garment()),
            frame,
            awaiting,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchMessage {
    pub index: usize,
    pub commanded: InstructionSignal,
    /// Subtask the classifier recognised, if any.
    pub subtask: Option<switchfold::taskworld::SubtaskId>,
    #[serde(rename = "match")]
    pub matched: bool,
    pub expected: Option<switchfold::taskworld::SubtaskId>,
    pub ambiguous: bool,
}

impl From<&BranchResult> for BranchMessage {
    fn from(b: &BranchResult) -> Self {
        Self {
            index: b.index,
            commanded: b.commanded,
            subtask: b.classified,
            matched: b.matched,
            expected: b.expected,
            ambiguous: b.ambiguous,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State(StateMessage),
    BranchResult(BranchMessage),
    Done { report: Box<RolloutReport> },
    Error { message: String },
}

impl ServerMessage {
    pub fn error(message: impl Into<String>) -> Self {
        Self::Error { message: message.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("protocol messages always serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Instruct {
        signal: Signal,
    },
    /// Begins a new episode in a session whose previous episode finished.
    Start {
        #[serde(default)]
        pattern: Option<u8>,
        position: u8,
        #[serde(default)]
        seed: Option<u64>,
    },
}

/// Body of `POST /sessions`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRequest {
    pub position: u8,
    #[serde(default)]
    pub pattern: Option<u8>,
    /// Seed of the rollout's feature jitter; 0 when omitted.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: u64,
}
