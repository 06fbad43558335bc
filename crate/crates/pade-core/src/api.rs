//! Report builders and wire types for the HTTP service and CLI: each
//! function takes plain data, runs the underlying operations, and returns
//! a serializable report.

use serde::{Deserialize, Serialize};

use crate::analysis::{
    default_min_layers, detect_sinks, group_ratios, GroupRatios, SinkReport, DEFAULT_SINK_TAU,
};
use crate::error::{Error, Result};
use crate::intervention::{
    apply_pade_row, make_hook, scaled_pad_for_head, InterventionConfig, LowerLayerPad, TargetLayer,
};
use crate::metrics::{chair_i, chair_s, pope_scores, BinaryOutcome, CaptionObjects, CaptionRecord, PopeScores};
use crate::numerics::{mad, softmax};
use crate::pad::{normalize_pad, pad_map, restrict_below, visual_attention_per_layer, PadMap};
use crate::synth::{run_recovery_experiment, RecoveryAggregate, ScenarioConfig};
use crate::toy::{ToyModel, ToyModelConfig};
use crate::trace::AttentionTrace;

/// Head-averaged post-softmax attention rows, one per layer, for a step.
pub fn head_averaged_attention(trace: &AttentionTrace, step: usize) -> Result<Vec<Vec<f64>>> {
    let st = trace.step(step)?;
    let heads = trace.num_heads() as f64;
    let mut layers = Vec::with_capacity(trace.num_layers());
    for layer in 1..=trace.num_layers() {
        let mut avg = vec![0.0; st.row_len()];
        for row in st.layer_rows(layer)? {
            for (a, p) in avg.iter_mut().zip(softmax(row).iter()) {
                *a += p;
            }
        }
        for a in &mut avg {
            *a /= heads;
        }
        layers.push(avg);
    }
    Ok(layers)
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub step: Option<usize>,
    pub tau: Option<f64>,
    pub min_layers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub step: usize,
    pub ratios: Vec<GroupRatios>,
    pub sinks: SinkReport,
    /// Unnormalized dynamics map over vision positions.
    pub pad: Vec<f64>,
    /// Layer-averaged attention over vision positions.
    #[serde(rename = "static")]
    pub static_mean: Vec<f64>,
    /// Head-averaged full attention rows per layer.
    pub attention: Vec<Vec<f64>>,
}

pub fn analyze_trace(trace: &AttentionTrace, opts: &AnalyzeOptions) -> Result<AnalyzeReport> {
    let step = opts.step.unwrap_or(0);
    let tau = opts.tau.unwrap_or(DEFAULT_SINK_TAU);
    let min_layers = opts
        .min_layers
        .unwrap_or_else(|| default_min_layers(trace.num_layers()));
    let ratios = group_ratios(trace, step)?;
    let sinks = detect_sinks(trace, step, tau, min_layers)?;
    let lva = visual_attention_per_layer(trace, step)?;
    let pad = pad_map(&lva)?;
    let static_mean = crate::pad::static_mean_attention(&lva);
    Ok(AnalyzeReport {
        step,
        ratios: ratios.per_layer,
        sinks,
        pad: pad.values().to_vec(),
        static_mean,
        attention: head_averaged_attention(trace, step)?,
    })
}

// ---------------------------------------------------------------------------
// pad
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PadOptions {
    pub step: Option<usize>,
    pub normalize: Option<bool>,
}

pub fn pad_for_trace(trace: &AttentionTrace, opts: &PadOptions) -> Result<PadMap> {
    let step = opts.step.unwrap_or(0);
    let lva = visual_attention_per_layer(trace, step)?;
    let map = pad_map(&lva)?;
    Ok(if opts.normalize.unwrap_or(false) {
        normalize_pad(&map)
    } else {
        map
    })
}

// ---------------------------------------------------------------------------
// intervene
// ---------------------------------------------------------------------------

/// Which layers feed the dynamics map when intervening on a recorded
/// trace: every layer of the pass, or only those below the target (what a
/// live hook can see).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadLayerMode {
    #[default]
    All,
    Below,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InterveneOptions {
    pub lambda: Option<f64>,
    /// "last" or a 1-based layer index.
    pub layer: Option<String>,
    pub mad: Option<bool>,
    pub stc: Option<bool>,
    /// Restrict to one step; all steps when absent.
    pub step: Option<usize>,
    pub pad_layers: Option<PadLayerMode>,
}

impl InterveneOptions {
    pub fn config(&self) -> Result<InterventionConfig> {
        let defaults = InterventionConfig::default();
        let target_layer = match &self.layer {
            Some(s) => s.parse::<TargetLayer>()?,
            None => defaults.target_layer,
        };
        let cfg = InterventionConfig {
            lambda: self.lambda.unwrap_or(defaults.lambda),
            target_layer,
            mad_enabled: self.mad.unwrap_or(defaults.mad_enabled),
            stc_enabled: self.stc.unwrap_or(defaults.stc_enabled),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadIntervention {
    pub head: usize,
    /// MAD of this head's visual logits (the applied scale when MAD is on).
    pub mad: f64,
    /// Post-softmax attention row without the intervention.
    pub base: Vec<f64>,
    /// Post-softmax attention row with the intervention.
    pub intervened: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepIntervention {
    pub step: usize,
    pub target_layer: usize,
    /// The normalized dynamics map that was injected.
    pub pad: Vec<f64>,
    pub per_head: Vec<HeadIntervention>,
    pub vision_mass_base: f64,
    pub vision_mass_intervened: f64,
    pub system_mass_base: f64,
    pub system_mass_intervened: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterveneReport {
    pub lambda: f64,
    pub target_layer: String,
    pub mad_enabled: bool,
    pub stc_enabled: bool,
    pub pad_layers: PadLayerMode,
    pub steps: Vec<StepIntervention>,
}

/// Apply the row-level pipeline to the recorded rows of a trace's target
/// layer, step by step, reporting base and intervened attention.
pub fn intervene_trace(trace: &AttentionTrace, opts: &InterveneOptions) -> Result<InterveneReport> {
    let cfg = opts.config()?;
    let mode = opts.pad_layers.unwrap_or_default();
    let target = cfg.target_layer.resolve(trace.num_layers())?;
    let steps: Vec<usize> = match opts.step {
        Some(s) => {
            trace.step(s)?;
            vec![s]
        }
        None => (0..trace.num_steps()).collect(),
    };

    let seg = trace.segmentation();
    let mut reports = Vec::with_capacity(steps.len());
    for step in steps {
        let lva = visual_attention_per_layer(trace, step)?;
        let p_tilde = match mode {
            PadLayerMode::All => normalize_pad(&pad_map(&lva)?),
            PadLayerMode::Below if target >= 3 => {
                normalize_pad(&pad_map(&restrict_below(&lva, target)?)?)
            }
            // fewer than two layers below the target: no deltas to use
            PadLayerMode::Below => normalize_pad(&PadMap::new(
                vec![0.0; seg.vision_len()],
                step,
                false,
            )?),
        };

        let st = trace.step(step)?;
        let [system, vision, _, _] = seg.slices_for_row(st.row_len())?;
        let heads = trace.num_heads() as f64;
        let mut per_head = Vec::with_capacity(trace.num_heads());
        let mut masses = [0.0f64; 4];
        for (h, row) in st.layer_rows(target)?.iter().enumerate() {
            let z_v = &row[vision.clone()];
            let head_mad = mad(z_v)?;
            let p_hat = scaled_pad_for_head(&p_tilde, z_v, &cfg)?;
            let base = softmax(row);
            let intervened = apply_pade_row(row, seg, &p_hat, &cfg)?;
            masses[0] += base[vision.clone()].iter().sum::<f64>();
            masses[1] += intervened[vision.clone()].iter().sum::<f64>();
            masses[2] += base[system.clone()].iter().sum::<f64>();
            masses[3] += intervened[system.clone()].iter().sum::<f64>();
            per_head.push(HeadIntervention {
                head: h,
                mad: head_mad,
                base: base.into_values(),
                intervened: intervened.into_values(),
            });
        }
        reports.push(StepIntervention {
            step,
            target_layer: target,
            pad: p_tilde.values().to_vec(),
            per_head,
            vision_mass_base: masses[0] / heads,
            vision_mass_intervened: masses[1] / heads,
            system_mass_base: masses[2] / heads,
            system_mass_intervened: masses[3] / heads,
        });
    }

    Ok(InterveneReport {
        lambda: cfg.lambda,
        target_layer: cfg.target_layer.to_string(),
        mad_enabled: cfg.mad_enabled,
        stc_enabled: cfg.stc_enabled,
        pad_layers: mode,
        steps: reports,
    })
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateRequest {
    #[serde(default)]
    pub config: Option<ScenarioConfig>,
    pub seeds: usize,
    #[serde(default)]
    pub k: Option<usize>,
}

pub fn run_simulate(req: &SimulateRequest) -> Result<RecoveryAggregate> {
    let cfg = req.config.unwrap_or_default();
    let k = req.k.unwrap_or_else(|| cfg.core_count());
    run_recovery_experiment(&cfg, req.seeds, k)
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub chair_i: f64,
    pub chair_s: f64,
    pub captions: usize,
    pub mentioned_total: usize,
    pub hallucinated_total: usize,
}

pub fn chair_report(records: &[CaptionRecord]) -> Result<ChairReport> {
    let corpus: Vec<CaptionObjects> = records.iter().map(CaptionObjects::from).collect();
    let mentioned_total = corpus.iter().map(|c| c.mentioned().len()).sum();
    let hallucinated_total = corpus.iter().map(CaptionObjects::hallucinated_count).sum();
    Ok(ChairReport {
        chair_i: chair_i(&corpus)?,
        chair_s: chair_s(&corpus)?,
        captions: corpus.len(),
        mentioned_total,
        hallucinated_total,
    })
}

pub fn pope_report(outcomes: &[BinaryOutcome]) -> Result<PopeScores> {
    pope_scores(outcomes)
}

// ---------------------------------------------------------------------------
// demo
// ---------------------------------------------------------------------------

/// Parameters of the end-to-end toy run; the model shape is fixed small
/// (4 layers, 2 heads) so the demo is instant and reproducible.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoRequest {
    pub seed: u64,
    pub steps: usize,
    pub lambda: f64,
}

impl Default for DemoRequest {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 4,
            lambda: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoModelInfo {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStepMass {
    pub step: usize,
    pub vision_mass_base: f64,
    pub vision_mass_intervened: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub seed: u64,
    pub model: DemoModelInfo,
    pub prompt_len: usize,
    pub base_tokens: Vec<u32>,
    pub intervened_tokens: Vec<u32>,
    /// Unnormalized per-step dynamics maps from the unintervened run.
    pub pad_per_step: Vec<PadMap>,
    pub ratios: Vec<GroupRatios>,
    pub sinks: SinkReport,
    /// Head-averaged vision mass at the target (last) layer, per step.
    pub vision_mass: Vec<DemoStepMass>,
}

/// One seeded end-to-end run: toy model, trace, dynamics maps, hooked
/// regeneration, plus ratio and sink reports on the base trace.
pub fn run_demo(req: &DemoRequest) -> Result<DemoReport> {
    if req.steps == 0 {
        return Err(Error::Config("demo needs at least one step".into()));
    }
    let model_cfg = ToyModelConfig {
        num_layers: 4,
        num_heads: 2,
        head_dim: 8,
        vocab_size: 32,
        seed: req.seed,
    };
    let model = ToyModel::new(model_cfg)?;
    let seg = crate::trace::TokenSegmentation::new(2, 6, 4, 0)?;
    let prompt: Vec<u32> = (0..seg.total_len())
        .map(|i| ((i * 7 + 3) % model_cfg.vocab_size) as u32)
        .collect();

    let (base_tokens, base_trace) = model.generate(&prompt, &seg, req.steps, None)?;

    let cfg = InterventionConfig {
        lambda: req.lambda,
        ..InterventionConfig::default()
    };
    let hook = make_hook(LowerLayerPad, cfg)?;
    let (intervened_tokens, hooked_trace) = model.generate(&prompt, &seg, req.steps, Some(&hook))?;

    let mut pad_per_step = Vec::with_capacity(req.steps);
    let mut vision_mass = Vec::with_capacity(req.steps);
    let target = trace_last_layer(&base_trace);
    for step in 0..req.steps {
        let lva = visual_attention_per_layer(&base_trace, step)?;
        pad_per_step.push(pad_map(&lva)?);

        vision_mass.push(DemoStepMass {
            step,
            vision_mass_base: vision_mass_at(&base_trace, step, target)?,
            vision_mass_intervened: vision_mass_at(&hooked_trace, step, target)?,
        });
    }

    let ratios = group_ratios(&base_trace, 0)?;
    let sinks = detect_sinks(
        &base_trace,
        0,
        DEFAULT_SINK_TAU,
        default_min_layers(base_trace.num_layers()),
    )?;

    Ok(DemoReport {
        seed: req.seed,
        model: DemoModelInfo {
            num_layers: model_cfg.num_layers,
            num_heads: model_cfg.num_heads,
            head_dim: model_cfg.head_dim,
            vocab_size: model_cfg.vocab_size,
        },
        prompt_len: prompt.len(),
        base_tokens,
        intervened_tokens,
        pad_per_step,
        ratios: ratios.per_layer,
        sinks,
        vision_mass,
    })
}

/// Trace produced by the demo's unintervened run, for `--emit-trace`.
pub fn demo_trace(req: &DemoRequest) -> Result<AttentionTrace> {
    if req.steps == 0 {
        return Err(Error::Config("demo needs at least one step".into()));
    }
    let model_cfg = ToyModelConfig {
        num_layers: 4,
        num_heads: 2,
        head_dim: 8,
        vocab_size: 32,
        seed: req.seed,
    };
    let model = ToyModel::new(model_cfg)?;
    let seg = crate::trace::TokenSegmentation::new(2, 6, 4, 0)?;
    let prompt: Vec<u32> = (0..seg.total_len())
        .map(|i| ((i * 7 + 3) % model_cfg.vocab_size) as u32)
        .collect();
    let (_, trace) = model.generate(&prompt, &seg, req.steps, None)?;
    Ok(trace)
}

fn trace_last_layer(trace: &AttentionTrace) -> usize {
    trace.num_layers()
}

fn vision_mass_at(trace: &AttentionTrace, step: usize, layer: usize) -> Result<f64> {
    let st = trace.step(step)?;
    let vision = trace.segmentation().vision();
    let heads = trace.num_heads() as f64;
    let mut mass = 0.0;
    for row in st.layer_rows(layer)? {
        mass += softmax(row)[vision.clone()].iter().sum::<f64>();
    }
    Ok(mass / heads)
}

// ---------------------------------------------------------------------------
// shared wire plumbing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorInfo {
    pub kind: String,
    pub message: String,
}

/// JSON body every error response carries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorInfo,
}

impl ErrorBody {
    pub fn from_error(err: &Error) -> Self {
        Self {
            error: ErrorInfo {
                kind: err.kind().to_string(),
                message: err.to_string(),
            },
        }
    }
}
