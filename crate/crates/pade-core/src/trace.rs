//! Data model for attention traces: token segmentation and per-step,
//! per-layer, per-head logit rows.
//!
//! A trace records, for each generation step, the pre-softmax attention
//! logits of the query row at every (layer, head). Causally masked key
//! positions are simply absent: the row at step `t` has exactly
//! `prompt_len + t` entries, one per visible key.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::LogitRow;

/// The four token groups of a multimodal context, in context order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenGroup {
    System,
    Vision,
    Instruction,
    Output,
}

/// Contiguous half-open index ranges for the system, vision, instruction
/// and output token groups, in exactly that order over key positions.
///
/// The vision range must be non-empty; the other three may be empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSegmentation {
    system: Range<usize>,
    vision: Range<usize>,
    instruction: Range<usize>,
    output: Range<usize>,
}

impl TokenSegmentation {
    /// Build a segmentation from group lengths; contiguity holds by
    /// construction.
    pub fn new(
        system_len: usize,
        vision_len: usize,
        instruction_len: usize,
        output_len: usize,
    ) -> Result<Self> {
        let s_end = system_len;
        let v_end = s_end + vision_len;
        let i_end = v_end + instruction_len;
        let o_end = i_end + output_len;
        Self::from_ranges(0..s_end, s_end..v_end, v_end..i_end, i_end..o_end)
    }

    /// Build from explicit ranges, validating contiguity and coverage.
    pub fn from_ranges(
        system: Range<usize>,
        vision: Range<usize>,
        instruction: Range<usize>,
        output: Range<usize>,
    ) -> Result<Self> {
        let ranges = [&system, &vision, &instruction, &output];
        let names = ["system", "vision", "instruction", "output"];
        for (r, name) in ranges.iter().zip(names) {
            if r.start > r.end {
                return Err(Error::Config(format!(
                    "{name} range {}..{} is inverted",
                    r.start, r.end
                )));
            }
        }
        if system.start != 0 {
            return Err(Error::Config(format!(
                "segmentation must start at 0, system starts at {}",
                system.start
            )));
        }
        if system.end != vision.start || vision.end != instruction.start || instruction.end != output.start {
            return Err(Error::Config(
                "segmentation ranges must be contiguous in the order system, vision, instruction, output"
                    .into(),
            ));
        }
        if vision.is_empty() {
            return Err(Error::Config("vision range must be non-empty".into()));
        }
        Ok(Self {
            system,
            vision,
            instruction,
            output,
        })
    }

    pub fn system(&self) -> Range<usize> {
        self.system.clone()
    }

    pub fn vision(&self) -> Range<usize> {
        self.vision.clone()
    }

    pub fn instruction(&self) -> Range<usize> {
        self.instruction.clone()
    }

    pub fn output(&self) -> Range<usize> {
        self.output.clone()
    }

    pub fn vision_len(&self) -> usize {
        self.vision.len()
    }

    /// Total number of key positions covered, `[0, total_len)`.
    pub fn total_len(&self) -> usize {
        self.output.end
    }

    pub fn range(&self, group: TokenGroup) -> Range<usize> {
        match group {
            TokenGroup::System => self.system(),
            TokenGroup::Vision => self.vision(),
            TokenGroup::Instruction => self.instruction(),
            TokenGroup::Output => self.output(),
        }
    }

    /// Copy of this segmentation with the output range extended by `extra`
    /// positions (used while a generation loop appends tokens).
    pub fn with_output_extended(&self, extra: usize) -> Self {
        Self {
            system: self.system(),
            vision: self.vision(),
            instruction: self.instruction(),
            output: self.output.start..self.output.end + extra,
        }
    }

    /// The four group ranges clipped to one row of `row_len` keys.
    ///
    /// A row shorter than the full segmentation simply has not seen the
    /// later output keys yet; only the output range may be clipped. Errors
    /// if the row cannot hold the prompt groups or extends past the
    /// segmentation.
    pub fn slices_for_row(&self, row_len: usize) -> Result<[Range<usize>; 4]> {
        if row_len < self.output.start {
            return Err(Error::ShapeMismatch {
                context: "segmentation prompt groups vs row",
                expected: self.output.start,
                actual: row_len,
            });
        }
        if row_len > self.total_len() {
            return Err(Error::ShapeMismatch {
                context: "row extends past segmentation",
                expected: self.total_len(),
                actual: row_len,
            });
        }
        Ok([
            self.system(),
            self.vision(),
            self.instruction(),
            self.output.start..row_len,
        ])
    }
}

/// Logit rows of one generation step: `logits[layer][head]` is the query
/// row at that layer and head, all of length `query_index + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    query_index: usize,
    logits: Vec<Vec<LogitRow>>,
}

impl StepTrace {
    pub fn new(query_index: usize, logits: Vec<Vec<LogitRow>>) -> Result<Self> {
        if logits.is_empty() || logits[0].is_empty() {
            return Err(Error::InvalidInput(
                "step trace needs at least one layer and one head".into(),
            ));
        }
        let heads = logits[0].len();
        for layer in &logits {
            if layer.len() != heads {
                return Err(Error::ShapeMismatch {
                    context: "heads per layer",
                    expected: heads,
                    actual: layer.len(),
                });
            }
            for row in layer {
                if row.len() != query_index + 1 {
                    return Err(Error::ShapeMismatch {
                        context: "logit row length vs query index",
                        expected: query_index + 1,
                        actual: row.len(),
                    });
                }
            }
        }
        Ok(Self {
            query_index,
            logits,
        })
    }

    pub fn query_index(&self) -> usize {
        self.query_index
    }

    /// Row length of this step (`query_index + 1`).
    pub fn row_len(&self) -> usize {
        self.query_index + 1
    }

    pub fn num_layers(&self) -> usize {
        self.logits.len()
    }

    pub fn num_heads(&self) -> usize {
        self.logits[0].len()
    }

    /// Logit row for 1-based `layer` and 0-based `head`.
    pub fn row(&self, layer: usize, head: usize) -> Result<&LogitRow> {
        let l = layer
            .checked_sub(1)
            .filter(|l| *l < self.logits.len())
            .ok_or(Error::IndexOutOfRange {
                context: "layer",
                index: layer,
                limit: self.logits.len(),
            })?;
        self.logits[l].get(head).ok_or(Error::IndexOutOfRange {
            context: "head",
            index: head,
            limit: self.logits[l].len(),
        })
    }

    /// All head rows of a 1-based layer.
    pub fn layer_rows(&self, layer: usize) -> Result<&[LogitRow]> {
        let l = layer
            .checked_sub(1)
            .filter(|l| *l < self.logits.len())
            .ok_or(Error::IndexOutOfRange {
                context: "layer",
                index: layer,
                limit: self.logits.len(),
            })?;
        Ok(&self.logits[l])
    }

    pub fn layers(&self) -> &[Vec<LogitRow>] {
        &self.logits
    }
}

/// A full attention trace: model dimensions, token segmentation, and one
/// [`StepTrace`] per generated token.
///
/// Invariants: at least two layers (inter-layer deltas need consecutive
/// layers); step `t` has `L x H` rows of length `prompt_len + t`; the
/// segmentation covers every key any row can see, and at most one position
/// beyond (the final generated token, which never appears as a key).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    num_layers: usize,
    num_heads: usize,
    prompt_len: usize,
    segmentation: TokenSegmentation,
    steps: Vec<StepTrace>,
}

impl AttentionTrace {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        prompt_len: usize,
        segmentation: TokenSegmentation,
        steps: Vec<StepTrace>,
    ) -> Result<Self> {
        if num_layers < 2 {
            return Err(Error::InsufficientLayers {
                required: 2,
                actual: num_layers,
            });
        }
        if num_heads == 0 {
            return Err(Error::Config("trace needs at least one head".into()));
        }
        if prompt_len == 0 {
            return Err(Error::Config("prompt length must be positive".into()));
        }
        let n = steps.len();
        for (t, step) in steps.iter().enumerate() {
            if step.num_layers() != num_layers || step.num_heads() != num_heads {
                return Err(Error::ShapeMismatch {
                    context: "step layer/head grid",
                    expected: num_layers * num_heads,
                    actual: step.num_layers() * step.num_heads(),
                });
            }
            if step.row_len() != prompt_len + t {
                return Err(Error::ShapeMismatch {
                    context: "step row length (prompt_len + step)",
                    expected: prompt_len + t,
                    actual: step.row_len(),
                });
            }
        }
        let total = segmentation.total_len();
        let min_total = prompt_len + n.saturating_sub(1);
        let max_total = prompt_len + n;
        if total < min_total || total > max_total {
            return Err(Error::Config(format!(
                "segmentation covers {total} positions; {n} steps from prompt length {prompt_len} \
                 require between {min_total} and {max_total}"
            )));
        }
        if segmentation.output().start > prompt_len {
            return Err(Error::Config(format!(
                "output range starts at {} but the prompt has only {prompt_len} positions",
                segmentation.output().start
            )));
        }
        Ok(Self {
            num_layers,
            num_heads,
            prompt_len,
            segmentation,
            steps,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn segmentation(&self) -> &TokenSegmentation {
        &self.segmentation
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[StepTrace] {
        &self.steps
    }

    pub fn step(&self, index: usize) -> Result<&StepTrace> {
        self.steps.get(index).ok_or(Error::IndexOutOfRange {
            context: "step",
            index,
            limit: self.steps.len(),
        })
    }
}
