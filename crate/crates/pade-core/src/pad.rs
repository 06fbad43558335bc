//! Positive attention dynamics over visual key positions, and the static
//! mean-attention baseline.
//!
//! Layer by layer, the head-averaged post-softmax attention to each visual
//! key is sliced from the full row without renormalizing over the vision
//! group, so mass leaving the group stays visible. Positive inter-layer
//! deltas are then averaged across layers: positions whose attention keeps
//! rising accumulate signal, positions with constant attention (however
//! high) contribute nothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{positive_diff, softmax};
use crate::trace::AttentionTrace;

/// Aggregated positive attention dynamics over visual key positions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PadMap {
    #[serde(rename = "step")]
    source_step: usize,
    normalized: bool,
    values: Vec<f64>,
}

impl PadMap {
    pub fn new(values: Vec<f64>, source_step: usize, normalized: bool) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("pad map must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "pad map element {} at index {i} must be finite and non-negative",
                values[i]
            )));
        }
        if normalized {
            let max = values.iter().copied().fold(0.0, f64::max);
            if max != 0.0 && (max - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "normalized pad map must peak at 1, max is {max}"
                )));
            }
        }
        Ok(Self {
            source_step,
            normalized,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn source_step(&self) -> usize {
        self.source_step
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

impl<'de> Deserialize<'de> for PadMap {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        struct Raw {
            step: usize,
            normalized: bool,
            values: Vec<f64>,
        }
        let raw = Raw::deserialize(deserializer)?;
        PadMap::new(raw.values, raw.step, raw.normalized).map_err(serde::de::Error::custom)
    }
}

/// Head-averaged attention to visual keys, one vector per layer, for one
/// generation step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerVisualAttention {
    step: usize,
    per_layer: Vec<Vec<f64>>,
}

impl LayerVisualAttention {
    /// Build from raw per-layer vectors (each elementwise non-negative and
    /// of equal length).
    pub fn from_rows(step: usize, per_layer: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = per_layer.first() else {
            return Err(Error::InvalidInput("no layers".into()));
        };
        let width = first.len();
        if width == 0 {
            return Err(Error::InvalidInput("empty visual attention vector".into()));
        }
        for layer in &per_layer {
            if layer.len() != width {
                return Err(Error::ShapeMismatch {
                    context: "visual attention per layer",
                    expected: width,
                    actual: layer.len(),
                });
            }
            if let Some(i) = layer.iter().position(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "visual attention element {} at index {i} must be finite and non-negative",
                    layer[i]
                )));
            }
        }
        Ok(Self { step, per_layer })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.per_layer
    }
}

/// Head-averaged post-softmax attention over the vision range, per layer,
/// for the chosen step. The vision slice is taken from the full-row softmax
/// and is not renormalized.
pub fn visual_attention_per_layer(
    trace: &AttentionTrace,
    step: usize,
) -> Result<LayerVisualAttention> {
    let st = trace.step(step)?;
    let vision = trace.segmentation().vision();
    let heads = trace.num_heads() as f64;
    let mut per_layer = Vec::with_capacity(trace.num_layers());
    for layer in 1..=trace.num_layers() {
        let mut acc = vec![0.0; vision.len()];
        for row in st.layer_rows(layer)? {
            let probs = softmax(row);
            for (a, p) in acc.iter_mut().zip(&probs[vision.clone()]) {
                *a += p;
            }
        }
        for a in &mut acc {
            *a /= heads;
        }
        per_layer.push(acc);
    }
    LayerVisualAttention::from_rows(step, per_layer)
}

/// Restriction of an LVA to the layers strictly below a 1-based target
/// layer, for hooks that must derive their signal from already-computed
/// layers only.
pub fn restrict_below(lva: &LayerVisualAttention, target_layer: usize) -> Result<LayerVisualAttention> {
    if target_layer < 2 || target_layer > lva.num_layers() + 1 {
        return Err(Error::IndexOutOfRange {
            context: "target layer",
            index: target_layer,
            limit: lva.num_layers() + 1,
        });
    }
    LayerVisualAttention::from_rows(lva.step(), lva.per_layer[..target_layer - 1].to_vec())
}

/// Aggregate positive inter-layer deltas:
/// `P = 1/(L-1) * sum over l=2..L of max(0, A_l - A_{l-1})`.
///
/// The result is unnormalized.
pub fn pad_map(lva: &LayerVisualAttention) -> Result<PadMap> {
    let layers = lva.layers();
    if layers.len() < 2 {
        return Err(Error::InsufficientLayers {
            required: 2,
            actual: layers.len(),
        });
    }
    let mut acc = vec![0.0; layers[0].len()];
    for pair in layers.windows(2) {
        let delta = positive_diff(&pair[1], &pair[0])?;
        for (a, d) in acc.iter_mut().zip(&delta) {
            *a += d;
        }
    }
    let denom = (layers.len() - 1) as f64;
    for a in &mut acc {
        *a /= denom;
    }
    PadMap::new(acc, lva.step(), false)
}

/// Scale a map so its maximum is 1. An all-zero map is returned unchanged
/// (apart from the flag). Idempotent.
pub fn normalize_pad(map: &PadMap) -> PadMap {
    let max = map.values().iter().copied().fold(0.0, f64::max);
    let values = if max == 0.0 {
        map.values().to_vec()
    } else {
        map.values().iter().map(|v| v / max).collect()
    };
    PadMap::new(values, map.source_step(), true).expect("scaling preserves pad invariants")
}

/// Elementwise mean of the per-layer visual attention: the static baseline
/// the dynamics are compared against.
pub fn static_mean_attention(lva: &LayerVisualAttention) -> Vec<f64> {
    let layers = lva.layers();
    let mut acc = vec![0.0; layers[0].len()];
    for layer in layers {
        for (a, v) in acc.iter_mut().zip(layer) {
            *a += v;
        }
    }
    let denom = layers.len() as f64;
    for a in &mut acc {
        *a /= denom;
    }
    acc
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::LogitRow;
    use crate::trace::{StepTrace, TokenSegmentation};

    fn lva(rows: &[&[f64]]) -> LayerVisualAttention {
        LayerVisualAttention::from_rows(0, rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn trace_from_rows(rows: Vec<Vec<Vec<f64>>>, seg: TokenSegmentation) -> AttentionTrace {
        let n = rows[0][0].len();
        let step = StepTrace::new(
            n - 1,
            rows.into_iter()
                .map(|layer| {
                    layer
                        .into_iter()
                        .map(|r| LogitRow::new(r).unwrap())
                        .collect()
                })
                .collect(),
        )
        .unwrap();
        AttentionTrace::new(
            step.num_layers(),
            step.num_heads(),
            n,
            seg,
            vec![step],
        )
        .unwrap()
    }

    #[test]
    fn single_head_lva_is_the_vision_slice_of_softmax() {
        let seg = TokenSegmentation::new(1, 2, 1, 0).unwrap();
        let row = vec![0.0, 1.0, 2.0, -1.0];
        let trace = trace_from_rows(vec![vec![row.clone()], vec![row.clone()]], seg);
        let lva = visual_attention_per_layer(&trace, 0).unwrap();
        let probs = softmax(&LogitRow::new(row).unwrap());
        assert_eq!(lva.layers()[0], probs[1..3].to_vec());
    }

    #[test]
    fn identical_heads_average_to_one_head() {
        let seg = TokenSegmentation::new(1, 2, 1, 0).unwrap();
        let row = vec![0.3, -0.2, 1.4, 0.0];
        let one = trace_from_rows(vec![vec![row.clone()], vec![row.clone()]], seg.clone());
        let two = trace_from_rows(
            vec![vec![row.clone(), row.clone()], vec![row.clone(), row.clone()]],
            seg,
        );
        let a = visual_attention_per_layer(&one, 0).unwrap();
        let b = visual_attention_per_layer(&two, 0).unwrap();
        for (x, y) in a.layers()[0].iter().zip(&b.layers()[0]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn two_heads_match_hand_average() {
        // 4 keys: 1 system, 2 vision, 1 instruction; single layer pair
        let seg = TokenSegmentation::new(1, 2, 1, 0).unwrap();
        let row_a = vec![0.0, 1.0, -1.0, 0.5];
        let row_b = vec![2.0, 0.0, 1.0, -0.5];
        let trace = trace_from_rows(
            vec![
                vec![row_a.clone(), row_b.clone()],
                vec![row_a.clone(), row_b.clone()],
            ],
            seg,
        );
        let lva = visual_attention_per_layer(&trace, 0).unwrap();

        // hand computation, straight from the definition
        let hand = |row: &[f64], j: usize| -> f64 {
            let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let z: f64 = exps.iter().sum();
            exps[j] / z
        };
        for j in 0..2 {
            let expected = (hand(&row_a, 1 + j) + hand(&row_b, 1 + j)) / 2.0;
            assert!((lva.layers()[0][j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_layers_give_zero_pad() {
        let l = lva(&[&[0.2, 0.3], &[0.2, 0.3], &[0.2, 0.3]]);
        let p = pad_map(&l).unwrap();
        assert_eq!(p.values(), &[0.0, 0.0]);
        assert!(!p.is_normalized());
    }

    #[test]
    fn two_layers_reduce_to_single_positive_delta() {
        let l = lva(&[&[0.1, 0.5], &[0.4, 0.2]]);
        let p = pad_map(&l).unwrap();
        assert!((p.values()[0] - 0.3).abs() < 1e-15);
        assert_eq!(p.values()[1], 0.0);
    }

    #[test]
    fn three_layer_hand_example() {
        let l = lva(&[&[0.1, 0.1], &[0.3, 0.05], &[0.2, 0.4]]);
        let p = pad_map(&l).unwrap();
        assert!((p.values()[0] - 0.1).abs() < 1e-12);
        assert!((p.values()[1] - 0.175).abs() < 1e-12);
    }

    #[test]
    fn single_layer_is_insufficient() {
        let l = lva(&[&[0.1, 0.1]]);
        assert!(pad_map(&l).is_err());
    }

    #[test]
    fn monotone_decay_gives_exactly_zero() {
        let l = lva(&[&[0.5, 0.4, 0.3], &[0.4, 0.4, 0.2], &[0.1, 0.3, 0.2]]);
        let p = pad_map(&l).unwrap();
        assert_eq!(p.values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_sink_position_contributes_zero() {
        // position 0 holds constant high attention in all layers
        let l = lva(&[&[0.8, 0.01, 0.02], &[0.8, 0.05, 0.01], &[0.8, 0.02, 0.06]]);
        let p = pad_map(&l).unwrap();
        assert_eq!(p.values()[0], 0.0);
        assert!(p.values()[1] > 0.0);
        assert!(p.values()[2] > 0.0);
    }

    #[test]
    fn normalize_examples() {
        let p = PadMap::new(vec![0.2, 0.1], 0, false).unwrap();
        let n = normalize_pad(&p);
        assert_eq!(n.values(), &[1.0, 0.5]);
        assert!(n.is_normalized());

        let zero = PadMap::new(vec![0.0, 0.0], 3, false).unwrap();
        let nz = normalize_pad(&zero);
        assert_eq!(nz.values(), &[0.0, 0.0]);
        assert!(nz.is_normalized());
        assert_eq!(nz.source_step(), 3);
    }

    #[test]
    fn static_mean_examples() {
        let single = lva(&[&[0.2, 0.8]]);
        assert_eq!(static_mean_attention(&single), vec![0.2, 0.8]);

        let same = lva(&[&[0.2, 0.8], &[0.2, 0.8]]);
        assert_eq!(static_mean_attention(&same), vec![0.2, 0.8]);

        let two = lva(&[&[0.2, 0.8], &[0.4, 0.6]]);
        let m = static_mean_attention(&two);
        assert!((m[0] - 0.3).abs() < 1e-15);
        assert!((m[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn pad_map_serializes_with_step_key() {
        let p = PadMap::new(vec![1.0, 0.5], 2, true).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, r#"{"step":2,"normalized":true,"values":[1.0,0.5]}"#);
        let back: PadMap = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn delta_decomposition_balances_endpoints() {
        // pad - negative-delta map telescopes to (A_L - A_1) / (L - 1)
        let layers = [
            vec![0.1, 0.6, 0.25],
            vec![0.4, 0.2, 0.25],
            vec![0.2, 0.5, 0.3],
        ];
        let l = lva(&[&layers[0], &layers[1], &layers[2]]);
        let pad = pad_map(&l).unwrap();
        let mut neg = [0.0; 3];
        for pair in layers.windows(2) {
            for j in 0..3 {
                neg[j] += (pair[1][j] - pair[0][j]).min(0.0);
            }
        }
        for j in 0..3 {
            let lhs = pad.values()[j] + neg[j] / 2.0;
            let rhs = (layers[2][j] - layers[0][j]) / 2.0;
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn pad_is_always_non_negative(
            layers in proptest::collection::vec(
                proptest::collection::vec(0.0f64..1.0, 4),
                2..6,
            ),
        ) {
            let rows: Vec<&[f64]> = layers.iter().map(|l| l.as_slice()).collect();
            let p = pad_map(&lva(&rows)).unwrap();
            prop_assert!(p.values().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn normalize_is_idempotent_and_preserves_argmax(
            values in proptest::collection::vec(0.0f64..10.0, 1..16),
        ) {
            let p = PadMap::new(values, 0, false).unwrap();
            let once = normalize_pad(&p);
            let twice = normalize_pad(&once);
            prop_assert_eq!(once.values(), twice.values());
            let argmax = |v: &[f64]| {
                v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i)
            };
            prop_assert_eq!(argmax(p.values()), argmax(once.values()));
        }
    }
}
