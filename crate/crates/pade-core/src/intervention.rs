//! The attention intervention pipeline: per-head MAD scaling of a
//! normalized dynamics map, lambda-weighted injection into the visual
//! logits of one target layer, and system-token compensation, followed by
//! softmax over the reassembled row.
//!
//! Exposed two ways: as pure row transforms ([`scale_pad`],
//! [`inject_visual`], [`compensate_system`], [`apply_pade_row`]) and as an
//! [`InterventionHook`] built by [`make_hook`] that plugs into the toy
//! model's forward pass.
//!
//! Injection happens at the logit level. Because instruction and output
//! logits are never touched, post-softmax ratios inside those groups are
//! exactly preserved; the compensation only spends system-token mass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mad, softmax, LogitRow, ProbRow};
use crate::pad::{normalize_pad, pad_map, LayerVisualAttention, PadMap};
use crate::toy::{HookContext, InterventionHook};
use crate::trace::TokenSegmentation;

/// Which layer receives the injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetLayer {
    /// The model's final layer, whatever its index.
    Last,
    /// An explicit 1-based layer index.
    Index(usize),
}

impl TargetLayer {
    /// Resolve to a concrete 1-based index for a model with `num_layers`
    /// layers.
    pub fn resolve(self, num_layers: usize) -> Result<usize> {
        match self {
            TargetLayer::Last => Ok(num_layers),
            TargetLayer::Index(i) if i >= 1 && i <= num_layers => Ok(i),
            TargetLayer::Index(i) => Err(Error::Config(format!(
                "target layer {i} out of range 1..={num_layers}"
            ))),
        }
    }
}

impl std::str::FromStr for TargetLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("last") {
            return Ok(TargetLayer::Last);
        }
        s.parse::<usize>()
            .ok()
            .filter(|i| *i >= 1)
            .map(TargetLayer::Index)
            .ok_or_else(|| Error::Config(format!("target layer must be 'last' or a 1-based index, got {s:?}")))
    }
}

impl std::fmt::Display for TargetLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TargetLayer::Last => write!(f, "last"),
            TargetLayer::Index(i) => write!(f, "{i}"),
        }
    }
}

/// Intervention strength and switches. The defaults are the shipped
/// method: `lambda = 0.1`, final layer, MAD scaling and system-token
/// compensation both on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub lambda: f64,
    pub target_layer: TargetLayer,
    pub mad_enabled: bool,
    pub stc_enabled: bool,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            target_layer: TargetLayer::Last,
            mad_enabled: true,
            stc_enabled: true,
        }
    }
}

impl InterventionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if let TargetLayer::Index(0) = self.target_layer {
            return Err(Error::Config("target layer index is 1-based".into()));
        }
        Ok(())
    }
}

/// Per-head scaled dynamics vectors over visual positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledPad {
    per_head: Vec<Vec<f64>>,
}

impl ScaledPad {
    pub fn num_heads(&self) -> usize {
        self.per_head.len()
    }

    pub fn head(&self, h: usize) -> &[f64] {
        &self.per_head[h]
    }

    pub fn heads(&self) -> &[Vec<f64>] {
        &self.per_head
    }
}

/// Scale a normalized map by each head's MAD of its visual logits:
/// `p_hat[h] = mad(z_v[h]) * p_tilde`.
///
/// A head with constant visual logits has MAD 0 and gets an all-zero
/// vector, disabling the intervention for that head rather than inventing
/// a scale.
pub fn scale_pad(p_tilde: &PadMap, visual_logits_per_head: &[Vec<f64>]) -> Result<ScaledPad> {
    if !p_tilde.is_normalized() {
        return Err(Error::InvalidInput(
            "scale_pad expects a normalized pad map".into(),
        ));
    }
    if visual_logits_per_head.is_empty() {
        return Err(Error::InvalidInput("no heads to scale for".into()));
    }
    let mut per_head = Vec::with_capacity(visual_logits_per_head.len());
    for z_v in visual_logits_per_head {
        if z_v.len() != p_tilde.len() {
            return Err(Error::ShapeMismatch {
                context: "visual logits vs pad map",
                expected: p_tilde.len(),
                actual: z_v.len(),
            });
        }
        let scale = mad(z_v)?;
        per_head.push(p_tilde.values().iter().map(|v| v * scale).collect());
    }
    Ok(ScaledPad { per_head })
}

/// The `w/o MAD` ablation: every head uses the normalized map as-is.
pub fn unscaled_pad(p_tilde: &PadMap, num_heads: usize) -> Result<ScaledPad> {
    if !p_tilde.is_normalized() {
        return Err(Error::InvalidInput(
            "unscaled_pad expects a normalized pad map".into(),
        ));
    }
    if num_heads == 0 {
        return Err(Error::InvalidInput("no heads to scale for".into()));
    }
    Ok(ScaledPad {
        per_head: vec![p_tilde.values().to_vec(); num_heads],
    })
}

/// Scaled pad for one head under `cfg`: MAD-scaled when `mad_enabled`,
/// otherwise the normalized map itself.
pub fn scaled_pad_for_head(
    p_tilde: &PadMap,
    visual_logits: &[f64],
    cfg: &InterventionConfig,
) -> Result<Vec<f64>> {
    if !p_tilde.is_normalized() {
        return Err(Error::InvalidInput(
            "scaled_pad_for_head expects a normalized pad map".into(),
        ));
    }
    if visual_logits.len() != p_tilde.len() {
        return Err(Error::ShapeMismatch {
            context: "visual logits vs pad map",
            expected: p_tilde.len(),
            actual: visual_logits.len(),
        });
    }
    if cfg.mad_enabled {
        let scale = mad(visual_logits)?;
        Ok(p_tilde.values().iter().map(|v| v * scale).collect())
    } else {
        Ok(p_tilde.values().to_vec())
    }
}

/// `z_v[i] + lambda * p_hat[i]` over the visual slice.
pub fn inject_visual(z_v: &[f64], p_hat: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if z_v.len() != p_hat.len() {
        return Err(Error::ShapeMismatch {
            context: "inject_visual",
            expected: z_v.len(),
            actual: p_hat.len(),
        });
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    Ok(z_v
        .iter()
        .zip(p_hat)
        .map(|(z, p)| z + lambda * p)
        .collect())
}

/// Subtract the scalar mean of `lambda * p_hat` (over visual positions)
/// from every system logit, so the injected visual mass is paid for by the
/// system tokens. An empty system slice passes through unchanged.
pub fn compensate_system(z_s: &[f64], p_hat: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    if z_s.is_empty() {
        return Ok(Vec::new());
    }
    if p_hat.is_empty() {
        return Err(Error::InvalidInput(
            "compensation needs a non-empty scaled pad".into(),
        ));
    }
    let mean = lambda * p_hat.iter().sum::<f64>() / p_hat.len() as f64;
    Ok(z_s.iter().map(|z| z - mean).collect())
}

/// Apply the full row transform for one head and softmax the result:
/// vision gets the injection, system gets the compensation when
/// `stc_enabled`, instruction and output logits pass through untouched.
pub fn apply_pade_row(
    full_logits: &LogitRow,
    seg: &TokenSegmentation,
    p_hat_head: &[f64],
    cfg: &InterventionConfig,
) -> Result<ProbRow> {
    cfg.validate()?;
    let [system, vision, instruction, output] = seg.slices_for_row(full_logits.len())?;
    if p_hat_head.len() != vision.len() {
        return Err(Error::ShapeMismatch {
            context: "scaled pad vs vision range",
            expected: vision.len(),
            actual: p_hat_head.len(),
        });
    }

    let mut row = full_logits.values().to_vec();
    let injected = inject_visual(&full_logits[vision.clone()], p_hat_head, cfg.lambda)?;
    row[vision].copy_from_slice(&injected);
    if cfg.stc_enabled {
        if system.is_empty() {
            tracing::warn!("system segment is empty, compensation degrades to a no-op");
        } else {
            let compensated =
                compensate_system(&full_logits[system.clone()], p_hat_head, cfg.lambda)?;
            row[system].copy_from_slice(&compensated);
        }
    }
    debug_assert_eq!(&row[instruction.clone()], &full_logits[instruction]);
    debug_assert_eq!(&row[output.clone()], &full_logits[output]);

    Ok(softmax(&LogitRow::new(row)?))
}

/// Supplies the normalized dynamics map a [`PadeHook`] injects at a step.
pub trait PadProvider: Send + Sync {
    fn pad_for_step(&self, ctx: &HookContext<'_>) -> Result<PadMap>;
}

/// Derives the map live from the layers below the hook's target, i.e. from
/// the rows the current pass has already produced. With fewer than two
/// lower layers there are no deltas, and the provider returns an all-zero
/// map (the intervention becomes a no-op).
pub struct LowerLayerPad;

impl PadProvider for LowerLayerPad {
    fn pad_for_step(&self, ctx: &HookContext<'_>) -> Result<PadMap> {
        let vision = ctx.segmentation.vision();
        if ctx.lower_layers.len() < 2 {
            let zeros = PadMap::new(vec![0.0; vision.len()], ctx.step, false)?;
            return Ok(normalize_pad(&zeros));
        }
        let heads = ctx.lower_layers[0].len() as f64;
        let mut per_layer = Vec::with_capacity(ctx.lower_layers.len());
        for rows in ctx.lower_layers {
            let mut acc = vec![0.0; vision.len()];
            for row in rows {
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
        let lva = LayerVisualAttention::from_rows(ctx.step, per_layer)?;
        Ok(normalize_pad(&pad_map(&lva)?))
    }
}

/// Precomputed per-step maps, e.g. taken from an earlier unintervened run.
pub struct PrecomputedPad {
    maps: Vec<PadMap>,
}

impl PrecomputedPad {
    /// Maps must be normalized and indexed by step.
    pub fn new(maps: Vec<PadMap>) -> Result<Self> {
        if maps.iter().any(|m| !m.is_normalized()) {
            return Err(Error::InvalidInput(
                "precomputed pad maps must be normalized".into(),
            ));
        }
        Ok(Self { maps })
    }
}

impl PadProvider for PrecomputedPad {
    fn pad_for_step(&self, ctx: &HookContext<'_>) -> Result<PadMap> {
        self.maps
            .get(ctx.step)
            .cloned()
            .ok_or(Error::IndexOutOfRange {
                context: "precomputed pad step",
                index: ctx.step,
                limit: self.maps.len(),
            })
    }
}

/// The intervention as a model hook: fires only at the resolved target
/// layer, scales the provider's map per head, injects into the visual
/// logits and compensates the system logits in place. All other layers are
/// untouched.
///
/// Immutable configuration plus a read-only provider, so one hook may be
/// shared across concurrent runs.
pub struct PadeHook<P: PadProvider> {
    provider: P,
    cfg: InterventionConfig,
}

impl<P: PadProvider> PadeHook<P> {
    pub fn config(&self) -> &InterventionConfig {
        &self.cfg
    }
}

/// Build a [`PadeHook`]. The configuration is validated now; the target
/// layer is range-checked when the hook is bound to a model run.
pub fn make_hook<P: PadProvider>(provider: P, cfg: InterventionConfig) -> Result<PadeHook<P>> {
    cfg.validate()?;
    Ok(PadeHook { provider, cfg })
}

impl<P: PadProvider> InterventionHook for PadeHook<P> {
    fn validate(&self, num_layers: usize) -> Result<()> {
        self.cfg.target_layer.resolve(num_layers).map(|_| ())
    }

    fn adjust(&self, ctx: &HookContext<'_>, rows: &mut [LogitRow]) -> Result<()> {
        let target = self.cfg.target_layer.resolve(ctx.num_layers)?;
        if ctx.layer != target {
            return Ok(());
        }
        let p_tilde = self.provider.pad_for_step(ctx)?;
        let [system, vision, _, _] = ctx
            .segmentation
            .slices_for_row(ctx.query_index + 1)?;
        if self.cfg.stc_enabled && system.is_empty() {
            tracing::warn!(
                step = ctx.step,
                "system segment is empty, compensation degrades to a no-op"
            );
        }
        for row in rows.iter_mut() {
            let p_hat = scaled_pad_for_head(&p_tilde, &row[vision.clone()], &self.cfg)?;
            let mut values = row.values().to_vec();
            let injected = inject_visual(&row[vision.clone()], &p_hat, self.cfg.lambda)?;
            values[vision.clone()].copy_from_slice(&injected);
            if self.cfg.stc_enabled && !system.is_empty() {
                let compensated = compensate_system(&row[system.clone()], &p_hat, self.cfg.lambda)?;
                values[system.clone()].copy_from_slice(&compensated);
            }
            *row = LogitRow::new(values)?;
        }
        Ok(())
    }
}
