//! Terminal instruction source for `rollout --interactive`.

use std::io::{BufRead, Write};

use switchfold::pipeline::InstructionSource;
use switchfold::taskworld::{valid_subtasks, GarmentState, InstructionSignal};
use switchfold::{Error, Result};

/// Accepts `l`/`left`, `r`/`right`, `u`/`up` in any case.
pub fn parse_signal(text: &str) -> Result<InstructionSignal> {
    match text.trim().to_ascii_lowercase().as_str() {
        "l" | "left" => Ok(InstructionSignal::Left),
        "r" | "right" => Ok(InstructionSignal::Right),
        "u" | "up" => Ok(InstructionSignal::Up),
        other => Err(Error::InvalidArgument(format!("unknown instruction {other:?} (use L, R or U)"))),
    }
}

/// Asks for each instruction on `output` and reads the answer from `input`,
/// re-asking until the answer parses.
pub struct PromptSource<R, W> {
    input: R,
    output: W,
}

impl<R: BufRead, W: Write> PromptSource<R, W> {
    pub fn new(input: R, output: W) -> Self {
        Self { input, output }
    }
}

impl<R: BufRead, W: Write> InstructionSource for PromptSource<R, W> {
    fn next_instruction(&mut self, index: usize, garment: &GarmentState) -> Result<InstructionSignal> {
        let options: Vec<String> = valid_subtasks(garment)
            .into_iter()
            .map(|s| format!("{s}={:?}", s.instruction()))
            .collect();
        loop {
            write!(self.output, "subtask {} [{}] instruction (L/R/U): ", index + 1, options.join(" "))?;
            self.output.flush()?;
            let mut line = String::new();
            if self.input.read_line(&mut line)? == 0 {
                return Err(Error::Instruction("input closed before every subtask was instructed".into()));
            }
            match parse_signal(&line) {
                Ok(signal) => return Ok(signal),
                Err(e) => writeln!(self.output, "{e}")?,
            }
        }
    }
}
