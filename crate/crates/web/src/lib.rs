//! Browser bindings for the folding world and the MTRNN leaky integrator.
//!
//! Everything heavy lives in plain Rust so it can be tested natively; the
//! `#[wasm_bindgen]` items only convert errors to strings.

use switchfold::mtrnn::{forward_step, MtrnnParams, MtrnnSpec, MtrnnState};
use switchfold::pipeline::arm_of;
use switchfold::taskworld::{
    gen_trajectory, render, valid_subtasks, GarmentState, InstructionSignal, MotorFrame, StepCounts, SubtaskId, HOME,
};
use switchfold::{Error, Result};
use wasm_bindgen::prelude::*;

/// A garment on the desk plus every frame executed on it so far.
#[wasm_bindgen]
pub struct FoldSession {
    steps: StepCounts,
    garment: GarmentState,
    motor: Vec<MotorFrame>,
    garments: Vec<GarmentState>,
    done: Vec<SubtaskId>,
}

impl FoldSession {
    pub fn create(position: u8) -> Result<Self> {
        let garment = GarmentState::fresh(position)?;
        Ok(Self {
            steps: StepCounts::DESK,
            garment,
            motor: vec![HOME],
            garments: vec![garment],
            done: Vec::new(),
        })
    }

    /// Runs the unique legal subtask selected by `instruction`.
    pub fn apply(&mut self, instruction: &str) -> Result<SubtaskId> {
        let signal: InstructionSignal = instruction.parse()?;
        let candidates: Vec<SubtaskId> = valid_subtasks(&self.garment)
            .into_iter()
            .filter(|s| s.instruction() == signal)
            .collect();
        let [subtask] = candidates[..] else {
            return Err(Error::InvalidArgument(format!(
                "{signal:?} selects no fold from {}",
                self.garment
            )));
        };
        let traj = gen_trajectory(subtask, &self.garment, self.steps)?;
        self.garment = *traj.garment.last().expect("trajectories are never empty");
        self.motor.extend(traj.motor);
        self.garments.extend(traj.garment);
        self.done.push(subtask);
        Ok(subtask)
    }

    /// Legal subtasks and the instruction each needs, e.g. `"A=R B=L"`.
    pub fn options(&self) -> String {
        valid_subtasks(&self.garment)
            .into_iter()
            .map(|s| format!("{s}={}", instruction_letter(s.instruction())))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn rgba(&self, index: usize) -> Result<Vec<u8>> {
        let (m, g) = self
            .motor
            .get(index)
            .zip(self.garments.get(index))
            .ok_or_else(|| Error::InvalidArgument(format!("frame {index} of {}", self.motor.len())))?;
        let frame = render(g, &arm_of(*m));
        let mut out = Vec::with_capacity(frame.width * frame.height * 4);
        for px in frame.data.chunks_exact(3) {
            out.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            out.push(255);
        }
        Ok(out)
    }
}

fn instruction_letter(signal: InstructionSignal) -> char {
    match signal {
        InstructionSignal::Right => 'R',
        InstructionSignal::Left => 'L',
        InstructionSignal::Up => 'U',
        InstructionSignal::None => '-',
    }
}

fn js_err(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl FoldSession {
    #[wasm_bindgen(constructor)]
    pub fn new(position: u8) -> std::result::Result<FoldSession, JsError> {
        Self::create(position).map_err(js_err)
    }

    /// Returns the letter of the subtask that ran.
    pub fn instruct(&mut self, instruction: &str) -> std::result::Result<String, JsError> {
        self.apply(instruction).map(|s| s.to_string()).map_err(js_err)
    }

    #[wasm_bindgen(js_name = frameCount)]
    pub fn frame_count(&self) -> usize {
        self.motor.len()
    }

    #[wasm_bindgen(js_name = frameSize)]
    pub fn frame_size(&self) -> usize {
        switchfold::taskworld::IMAGE_SIZE
    }

    /// RGBA bytes ready for `ImageData`.
    #[wasm_bindgen(js_name = frameRgba)]
    pub fn frame_rgba(&self, index: usize) -> std::result::Result<Vec<u8>, JsError> {
        self.rgba(index).map_err(js_err)
    }

    #[wasm_bindgen(js_name = legalOptions)]
    pub fn legal_options(&self) -> String {
        self.options()
    }

    pub fn history(&self) -> String {
        self.done.iter().map(|s| s.to_string()).collect()
    }

    pub fn complete(&self) -> bool {
        self.garment.is_complete()
    }
}

/// Internal values of an IO, a Cf and a Cs unit driven from rest towards 1
/// by a constant bias, with every weight zero. Row-major `steps x 3`.
pub fn integrator_response(tau_cf: f64, tau_cs: f64, steps: usize) -> Result<Vec<f64>> {
    let spec = MtrnnSpec::new(1, 1, 1, [1.0, tau_cf, tau_cs])?;
    let mut params = MtrnnParams::zeros(&spec);
    params.bias.data_mut().fill(1.0);
    let mut state = MtrnnState::initial(&spec, &[0.0])?;
    let mut out = Vec::with_capacity(steps * 3);
    for _ in 0..steps {
        state = forward_step(&state, &[0.0], &params, &spec)?;
        out.extend_from_slice(&state.u);
    }
    Ok(out)
}

#[wasm_bindgen(js_name = timescaleResponse)]
pub fn timescale_response(tau_cf: f64, tau_cs: f64, steps: usize) -> std::result::Result<Vec<f64>, JsError> {
    integrator_response(tau_cf, tau_cs, steps).map_err(js_err)
}
