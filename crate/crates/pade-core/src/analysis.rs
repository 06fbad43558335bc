//! Analysis instruments over traces: per-layer token-group attention
//! ratios, attention-sink detection, and dynamics-vs-static recovery
//! scoring against a known core mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::softmax;
use crate::pad::PadMap;
use crate::trace::AttentionTrace;

/// How much post-softmax mass one layer puts on each token group; the four
/// fields sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRatios {
    pub system: f64,
    pub vision: f64,
    pub instruction: f64,
    pub output: f64,
}

/// Per-layer group ratios for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub step: usize,
    pub per_layer: Vec<GroupRatios>,
}

/// Head-averaged attention mass per token group and layer.
pub fn group_ratios(trace: &AttentionTrace, step: usize) -> Result<RatioReport> {
    let st = trace.step(step)?;
    let slices = trace.segmentation().slices_for_row(st.row_len())?;
    let heads = trace.num_heads() as f64;
    let mut per_layer = Vec::with_capacity(trace.num_layers());
    for layer in 1..=trace.num_layers() {
        let mut sums = [0.0f64; 4];
        for row in st.layer_rows(layer)? {
            let probs = softmax(row);
            for (sum, range) in sums.iter_mut().zip(&slices) {
                *sum += probs[range.clone()].iter().sum::<f64>();
            }
        }
        per_layer.push(GroupRatios {
            system: sums[0] / heads,
            vision: sums[1] / heads,
            instruction: sums[2] / heads,
            output: sums[3] / heads,
        });
    }
    Ok(RatioReport { step, per_layer })
}

pub const DEFAULT_SINK_TAU: f64 = 5.0;

/// Default layer-persistence requirement: half the layers, rounded up.
pub fn default_min_layers(num_layers: usize) -> usize {
    num_layers.div_ceil(2)
}

/// One detected sink position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkStats {
    pub position: usize,
    /// Head-averaged attention to this key, averaged over layers.
    pub mean_attention: f64,
    pub layers_above_threshold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub step: usize,
    pub tau: f64,
    pub min_layers: usize,
    /// Sorted by position.
    pub sinks: Vec<SinkStats>,
}

impl SinkReport {
    pub fn positions(&self) -> Vec<usize> {
        self.sinks.iter().map(|s| s.position).collect()
    }
}

/// Flag key positions whose head-averaged attention exceeds `tau` times
/// the uniform share `1/row_len` in at least `min_layers` layers.
pub fn detect_sinks(
    trace: &AttentionTrace,
    step: usize,
    tau: f64,
    min_layers: usize,
) -> Result<SinkReport> {
    if tau.is_nan() || tau <= 1.0 {
        return Err(Error::Config(format!(
            "sink threshold tau must exceed 1 (uniform attention), got {tau}"
        )));
    }
    if min_layers == 0 || min_layers > trace.num_layers() {
        return Err(Error::Config(format!(
            "min_layers must be in 1..={}, got {min_layers}",
            trace.num_layers()
        )));
    }
    let st = trace.step(step)?;
    let row_len = st.row_len();
    let threshold = tau / row_len as f64;
    let heads = trace.num_heads() as f64;

    let mut above = vec![0usize; row_len];
    let mut total = vec![0.0f64; row_len];
    for layer in 1..=trace.num_layers() {
        let mut avg = vec![0.0f64; row_len];
        for row in st.layer_rows(layer)? {
            for (a, p) in avg.iter_mut().zip(softmax(row).iter()) {
                *a += p;
            }
        }
        for (j, a) in avg.iter_mut().enumerate() {
            *a /= heads;
            total[j] += *a;
            if *a > threshold {
                above[j] += 1;
            }
        }
    }

    let layers = trace.num_layers() as f64;
    let sinks = (0..row_len)
        .filter(|j| above[*j] >= min_layers)
        .map(|j| SinkStats {
            position: j,
            mean_attention: total[j] / layers,
            layers_above_threshold: above[j],
        })
        .collect();
    Ok(SinkReport {
        step,
        tau,
        min_layers,
        sinks,
    })
}

/// Precision@k of the dynamics map and the static baseline against a
/// planted core-region mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub k: usize,
    pub pad_precision: f64,
    pub static_precision: f64,
    pub core_mask_size: usize,
}

/// Indices of the k largest values; ties break toward the lower index so
/// results are deterministic across runs.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..values.len()).collect();
    indices.sort_by(|a, b| values[*b].total_cmp(&values[*a]).then(a.cmp(b)));
    indices.truncate(k);
    indices
}

/// Score both signals by `|top-k inter mask| / k`.
pub fn recovery_precision(
    pad: &PadMap,
    static_signal: &[f64],
    core_mask: &[bool],
    k: usize,
) -> Result<RecoveryReport> {
    let n = pad.len();
    if static_signal.len() != n {
        return Err(Error::ShapeMismatch {
            context: "static signal vs pad map",
            expected: n,
            actual: static_signal.len(),
        });
    }
    if core_mask.len() != n {
        return Err(Error::ShapeMismatch {
            context: "core mask vs pad map",
            expected: n,
            actual: core_mask.len(),
        });
    }
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "k must be in 1..={n}, got {k}"
        )));
    }
    let precision = |signal: &[f64]| {
        let hits = top_k_indices(signal, k)
            .into_iter()
            .filter(|j| core_mask[*j])
            .count();
        hits as f64 / k as f64
    };
    Ok(RecoveryReport {
        k,
        pad_precision: precision(pad.values()),
        static_precision: precision(static_signal),
        core_mask_size: core_mask.iter().filter(|m| **m).count(),
    })
}
