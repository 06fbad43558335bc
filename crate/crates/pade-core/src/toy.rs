//! A deterministic toy multi-head causal transformer that produces real
//! attention traces end to end.
//!
//! The model is attention-only: per-layer scaled dot-product attention with
//! value mixing and residual connections, no MLP blocks and no learned
//! normalization. It exists to exercise trace extraction and logit-level
//! intervention, not to model language.
//!
//! Decoding is greedy and the whole pipeline is seeded, so identical inputs
//! give bit-identical traces.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::numerics::{softmax, LogitRow};
use crate::trace::{AttentionTrace, StepTrace, TokenSegmentation};

/// Dimensions and seed for [`ToyModel::new`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ToyModelConfig {
    fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::Config(format!(
                "toy model needs at least 2 layers, got {}",
                self.num_layers
            )));
        }
        if self.num_heads == 0 || self.head_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "toy model dimensions must all be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn model_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

/// Everything a hook may inspect when it fires at one (layer, step).
///
/// `lower_layers` holds the logit rows this query already produced at
/// layers `1..layer`, exactly as the model used them, so a hook can derive
/// signals from the layers below its target. The segmentation covers
/// exactly `query_index + 1` keys.
pub struct HookContext<'a> {
    /// 1-based layer the hook is being offered.
    pub layer: usize,
    pub num_layers: usize,
    /// Generation step, 0-based.
    pub step: usize,
    pub query_index: usize,
    pub segmentation: &'a TokenSegmentation,
    pub lower_layers: &'a [Vec<LogitRow>],
}

/// Mutates the per-head pre-softmax logit rows of a query before the model
/// applies softmax. Offered at every layer; implementations decide where to
/// act. Row lengths must be preserved.
pub trait InterventionHook: Send + Sync {
    /// Called once when the hook is bound to a model run.
    fn validate(&self, num_layers: usize) -> Result<()> {
        let _ = num_layers;
        Ok(())
    }

    fn adjust(&self, ctx: &HookContext<'_>, rows: &mut [LogitRow]) -> Result<()>;
}

/// A hook that leaves every row untouched.
pub struct IdentityHook;

impl InterventionHook for IdentityHook {
    fn adjust(&self, _ctx: &HookContext<'_>, _rows: &mut [LogitRow]) -> Result<()> {
        Ok(())
    }
}

struct LayerWeights {
    wq: Vec<Vec<f64>>,
    wk: Vec<Vec<f64>>,
    wv: Vec<Vec<f64>>,
    wo: Vec<Vec<f64>>,
}

/// The toy transformer. Immutable after construction; `forward` and
/// `generate` are pure given their inputs, so traces may be produced
/// concurrently from the same model.
pub struct ToyModel {
    cfg: ToyModelConfig,
    embed: Vec<Vec<f64>>,
    layers: Vec<LayerWeights>,
    unembed: Vec<Vec<f64>>,
}

impl ToyModel {
    /// Initialize weights from a seeded xoshiro256++ generator.
    ///
    /// The seed expands to generator state via `seed_from_u64` (SplitMix64).
    /// Draws are standard-normal scaled by `1/sqrt(model_dim)`, consumed in
    /// a fixed order: embedding row-major, then per layer the matrices
    /// `wq, wk, wv, wo` row-major, then the unembedding row-major.
    pub fn new(cfg: ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid stddev");
        let mut draw_matrix = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| (0..cols).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        };

        let embed = draw_matrix(cfg.vocab_size, d);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights {
                wq: draw_matrix(d, d),
                wk: draw_matrix(d, d),
                wv: draw_matrix(d, d),
                wo: draw_matrix(d, d),
            })
            .collect();
        let unembed = draw_matrix(d, cfg.vocab_size);

        Ok(Self {
            cfg,
            embed,
            layers,
            unembed,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    /// Order-sensitive checksum over all weight bits; equal seeds give
    /// equal checksums.
    pub fn weight_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |v: f64| {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x100000001b3);
        };
        for row in &self.embed {
            row.iter().copied().for_each(&mut mix);
        }
        for layer in &self.layers {
            for m in [&layer.wq, &layer.wk, &layer.wv, &layer.wo] {
                for row in m {
                    row.iter().copied().for_each(&mut mix);
                }
            }
        }
        for row in &self.unembed {
            row.iter().copied().for_each(&mut mix);
        }
        h
    }

    fn embedding(&self, token: u32, position: usize) -> Vec<f64> {
        let d = self.cfg.model_dim();
        let mut x = self.embed[token as usize].clone();
        // fixed sinusoidal position encoding
        for (i, slot) in x.iter_mut().enumerate() {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
            let angle = position as f64 * freq;
            *slot += if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
        x
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.cfg.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "token id {t} out of range (vocab size {})",
                    self.cfg.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Single forward pass over `tokens`: trace of the last query row at
    /// every (layer, head), plus next-token logits.
    ///
    /// If a hook is supplied it is offered that last query's rows at every
    /// layer; the rows the model softmaxes (and the trace stores) are the
    /// hook-adjusted ones.
    pub fn forward(
        &self,
        tokens: &[u32],
        segmentation: &TokenSegmentation,
        hook: Option<&dyn InterventionHook>,
    ) -> Result<(AttentionTrace, Vec<f64>)> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("token sequence is empty".into()));
        }
        if tokens.len() != segmentation.total_len() {
            return Err(Error::ShapeMismatch {
                context: "tokens vs segmentation",
                expected: segmentation.total_len(),
                actual: tokens.len(),
            });
        }
        self.check_tokens(tokens)?;
        if let Some(h) = hook {
            h.validate(self.cfg.num_layers)?;
        }

        let mut state = RunState::new(self);
        for &t in &tokens[..tokens.len() - 1] {
            state.advance(t, None, 0, segmentation)?;
        }
        let (rows, hidden) = state.advance(*tokens.last().unwrap(), hook, 0, segmentation)?;
        let step = StepTrace::new(tokens.len() - 1, rows)?;
        let trace = AttentionTrace::new(
            self.cfg.num_layers,
            self.cfg.num_heads,
            tokens.len(),
            segmentation.clone(),
            vec![step],
        )?;
        Ok((trace, self.next_token_logits(&hidden)))
    }

    /// Greedy decoding for `steps` tokens from `prompt`. Returns the
    /// generated token ids and a trace with one [`StepTrace`] per step; the
    /// trace segmentation's output range grows by one per generated token.
    ///
    /// The hook (if any) is offered every generation step's query rows.
    pub fn generate(
        &self,
        prompt: &[u32],
        segmentation: &TokenSegmentation,
        steps: usize,
        hook: Option<&dyn InterventionHook>,
    ) -> Result<(Vec<u32>, AttentionTrace)> {
        if steps == 0 {
            return Err(Error::Config("generate needs at least one step".into()));
        }
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt is empty".into()));
        }
        if prompt.len() != segmentation.total_len() {
            return Err(Error::ShapeMismatch {
                context: "prompt vs segmentation",
                expected: segmentation.total_len(),
                actual: prompt.len(),
            });
        }
        self.check_tokens(prompt)?;
        if let Some(h) = hook {
            h.validate(self.cfg.num_layers)?;
        }

        let prompt_len = prompt.len();
        let mut state = RunState::new(self);
        for &t in &prompt[..prompt_len - 1] {
            state.advance(t, None, 0, segmentation)?;
        }

        let mut generated = Vec::with_capacity(steps);
        let mut step_traces = Vec::with_capacity(steps);
        let mut next_input = prompt[prompt_len - 1];
        for t in 0..steps {
            let seg_now = segmentation.with_output_extended(t);
            let (rows, hidden) = state.advance(next_input, hook, t, &seg_now)?;
            step_traces.push(StepTrace::new(prompt_len - 1 + t, rows)?);
            let logits = self.next_token_logits(&hidden);
            let token = argmax_lowest(&logits);
            generated.push(token);
            next_input = token;
        }

        let trace = AttentionTrace::new(
            self.cfg.num_layers,
            self.cfg.num_heads,
            prompt_len,
            segmentation.with_output_extended(steps),
            step_traces,
        )?;
        Ok((generated, trace))
    }

    fn next_token_logits(&self, hidden: &[f64]) -> Vec<f64> {
        let d = self.cfg.model_dim();
        let mut out = vec![0.0; self.cfg.vocab_size];
        for (i, row) in self.unembed.iter().enumerate().take(d) {
            let x = hidden[i];
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        out
    }
}

/// Greedy argmax; ties break toward the lowest token id.
fn argmax_lowest(logits: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, v) in logits.iter().enumerate().skip(1) {
        if *v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Incremental per-layer key/value cache, mirroring how a decoder would
/// run: each position's rows are computed exactly once, when that position
/// is the query, and its keys/values are frozen from then on.
struct RunState<'m> {
    model: &'m ToyModel,
    // keys[layer][head][pos] and values[layer][head][pos], each head_dim wide
    keys: Vec<Vec<Vec<Vec<f64>>>>,
    values: Vec<Vec<Vec<Vec<f64>>>>,
    len: usize,
}

impl<'m> RunState<'m> {
    fn new(model: &'m ToyModel) -> Self {
        let l = model.cfg.num_layers;
        let h = model.cfg.num_heads;
        Self {
            model,
            keys: vec![vec![Vec::new(); h]; l],
            values: vec![vec![Vec::new(); h]; l],
            len: 0,
        }
    }

    /// Feed one token; returns the per-layer per-head logit rows actually
    /// used (post-hook at hooked layers) and the final hidden state.
    fn advance(
        &mut self,
        token: u32,
        hook: Option<&dyn InterventionHook>,
        step: usize,
        segmentation: &TokenSegmentation,
    ) -> Result<(Vec<Vec<LogitRow>>, Vec<f64>)> {
        let cfg = self.model.cfg;
        let d = cfg.model_dim();
        let hd = cfg.head_dim;
        let scale = (hd as f64).sqrt();
        let position = self.len;

        let mut x = self.model.embedding(token, position);
        let mut used_rows: Vec<Vec<LogitRow>> = Vec::with_capacity(cfg.num_layers);

        for (l, w) in self.model.layers.iter().enumerate() {
            let q = matvec(&w.wq, &x, d);
            let k = matvec(&w.wk, &x, d);
            let v = matvec(&w.wv, &x, d);
            for h in 0..cfg.num_heads {
                self.keys[l][h].push(k[h * hd..(h + 1) * hd].to_vec());
                self.values[l][h].push(v[h * hd..(h + 1) * hd].to_vec());
            }

            let mut rows: Vec<LogitRow> = Vec::with_capacity(cfg.num_heads);
            for h in 0..cfg.num_heads {
                let qh = &q[h * hd..(h + 1) * hd];
                let logits: Vec<f64> = self.keys[l][h]
                    .iter()
                    .map(|key| dot(qh, key) / scale)
                    .collect();
                rows.push(LogitRow::new(logits)?);
            }

            if let Some(hk) = hook {
                let ctx = HookContext {
                    layer: l + 1,
                    num_layers: cfg.num_layers,
                    step,
                    query_index: position,
                    segmentation,
                    lower_layers: &used_rows,
                };
                hk.adjust(&ctx, &mut rows)?;
                for row in &rows {
                    if row.len() != position + 1 {
                        return Err(Error::ShapeMismatch {
                            context: "hook changed row length",
                            expected: position + 1,
                            actual: row.len(),
                        });
                    }
                }
            }

            let mut concat = vec![0.0; d];
            for h in 0..cfg.num_heads {
                let weights = softmax(&rows[h]);
                let out = &mut concat[h * hd..(h + 1) * hd];
                for (j, wgt) in weights.iter().enumerate() {
                    for (o, vv) in out.iter_mut().zip(&self.values[l][h][j]) {
                        *o += wgt * vv;
                    }
                }
            }
            let mixed = matvec(&w.wo, &concat, d);
            for (xi, mi) in x.iter_mut().zip(&mixed) {
                *xi += mi;
            }
            used_rows.push(rows);
        }

        self.len += 1;
        Ok((used_rows, x))
    }
}

/// `x^T · m` for a row-major `rows x cols` matrix indexed `m[row][col]`.
fn matvec(m: &[Vec<f64>], x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (xi, row) in x.iter().zip(m) {
        for (o, w) in out.iter_mut().zip(row) {
            *o += xi * w;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
