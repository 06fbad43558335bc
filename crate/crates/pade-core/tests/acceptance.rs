//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Run with
//! `cargo test -p pade-core --test acceptance -- --nocapture`.
//!
//! The oracle helpers at the bottom are straight-line re-implementations
//! kept independent of the library code paths they check.

use std::panic::{catch_unwind, resume_unwind, UnwindSafe};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use pade_core::intervention::{
    apply_pade_row, make_hook, InterventionConfig, LowerLayerPad, TargetLayer,
};
use pade_core::metrics::{pope_scores, Answer, BinaryOutcome, CaptionObjects};
use pade_core::numerics::{softmax, LogitRow};
use pade_core::pad::{pad_map, LayerVisualAttention};
use pade_core::synth::{generate_scenario, run_recovery_experiment, ScenarioConfig};
use pade_core::toy::{HookContext, InterventionHook, ToyModel, ToyModelConfig};
use pade_core::trace::{AttentionTrace, StepTrace, TokenSegmentation};
use pade_core::traceio::{trace_from_bytes, trace_to_bytes};

fn criterion(name: &str, body: impl FnOnce() + UnwindSafe) {
    match catch_unwind(body) {
        Ok(()) => println!("acceptance[PASS] {name}"),
        Err(cause) => {
            println!("acceptance[FAIL] {name}");
            resume_unwind(cause);
        }
    }
}

/// Random row + segmentation + config generator shared by the randomized
/// criteria. `min_tail` forces at least that many instruction+output
/// positions.
fn random_case(
    rng: &mut Xoshiro256PlusPlus,
    min_tail: usize,
) -> (LogitRow, TokenSegmentation, Vec<f64>, InterventionConfig) {
    let system = rng.random_range(0..4usize);
    let vision = rng.random_range(1..24usize);
    let instruction = rng.random_range(0..6usize);
    let mut output = rng.random_range(0..4usize);
    if instruction + output < min_tail {
        output = min_tail - instruction;
    }
    let seg = TokenSegmentation::new(system, vision, instruction, output).unwrap();
    let n = seg.total_len();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        // wide spread with occasional outliers
        let base: f64 = rng.random_range(-8.0..8.0);
        let spike = if rng.random_bool(0.05) { 40.0 } else { 0.0 };
        values.push(base + spike);
    }
    let row = LogitRow::new(values).unwrap();
    let p_hat: Vec<f64> = (0..vision).map(|_| rng.random_range(0.0..4.0)).collect();
    let cfg = InterventionConfig {
        lambda: match rng.random_range(0..4u8) {
            0 => 0.0,
            1 => 0.1,
            2 => 1.0,
            _ => rng.random_range(0.0..10.0),
        },
        target_layer: TargetLayer::Last,
        mad_enabled: rng.random_bool(0.5),
        stc_enabled: rng.random_bool(0.5),
    };
    (row, seg, p_hat, cfg)
}

#[test]
fn normalization_suite() {
    criterion("normalization: 1000 random interventions sum to 1 +/- 1e-6", || {
        let start = Instant::now();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0xA11CE);
        for _ in 0..1000 {
            let (row, seg, p_hat, cfg) = random_case(&mut rng, 0);
            let out = apply_pade_row(&row, &seg, &p_hat, &cfg).unwrap();
            let sum: f64 = out.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6, "sum {sum}");
            assert!(out.iter().all(|v| *v >= 0.0));
        }
        assert!(start.elapsed().as_secs_f64() < 5.0);
    });
}

#[test]
fn noop_equivalence() {
    criterion("no-op: lambda 0 or zero pad reproduces base softmax within 1e-12", || {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0xBEE5);
        for i in 0..1000 {
            let (row, seg, mut p_hat, mut cfg) = random_case(&mut rng, 0);
            if i % 2 == 0 {
                cfg.lambda = 0.0;
            } else {
                p_hat.iter_mut().for_each(|v| *v = 0.0);
            }
            let base = softmax(&row);
            let out = apply_pade_row(&row, &seg, &p_hat, &cfg).unwrap();
            for (a, b) in out.iter().zip(base.iter()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Hook pipeline vs straight-line oracle
// ---------------------------------------------------------------------------

struct TargetRecord {
    step: usize,
    lower: Vec<Vec<Vec<f64>>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

struct RecordingHook<H> {
    inner: H,
    records: Mutex<Vec<TargetRecord>>,
}

impl<H: InterventionHook> InterventionHook for RecordingHook<H> {
    fn validate(&self, num_layers: usize) -> pade_core::Result<()> {
        self.inner.validate(num_layers)
    }

    fn adjust(&self, ctx: &HookContext<'_>, rows: &mut [LogitRow]) -> pade_core::Result<()> {
        if ctx.layer != ctx.num_layers {
            return self.inner.adjust(ctx, rows);
        }
        let pre: Vec<Vec<f64>> = rows.iter().map(|r| r.values().to_vec()).collect();
        let lower: Vec<Vec<Vec<f64>>> = ctx
            .lower_layers
            .iter()
            .map(|layer| layer.iter().map(|r| r.values().to_vec()).collect())
            .collect();
        self.inner.adjust(ctx, rows)?;
        let post: Vec<Vec<f64>> = rows.iter().map(|r| r.values().to_vec()).collect();
        self.records.lock().unwrap().push(TargetRecord {
            step: ctx.step,
            lower,
            pre,
            post,
        });
        Ok(())
    }
}

#[test]
fn oracle_equivalence_hook_pipeline() {
    criterion("oracle: hooked toy run matches straight-line composition within 1e-9", || {
        let model = ToyModel::new(ToyModelConfig {
            num_layers: 4,
            num_heads: 2,
            head_dim: 8,
            vocab_size: 32,
            seed: 0,
        })
        .unwrap();
        // 16-token prompt: 3 system, 8 vision, 5 instruction
        let seg = TokenSegmentation::new(3, 8, 5, 0).unwrap();
        let prompt: Vec<u32> = (0..16).map(|i| (i * 11 + 5) as u32 % 32).collect();
        let steps = 4;
        let cfg = InterventionConfig::default();

        let hook = RecordingHook {
            inner: make_hook(LowerLayerPad, cfg).unwrap(),
            records: Mutex::new(Vec::new()),
        };
        let (_, _trace) = model.generate(&prompt, &seg, steps, Some(&hook)).unwrap();
        let records = hook.records.into_inner().unwrap();
        assert_eq!(records.len(), steps);

        let vision = seg.vision();
        for record in &records {
            assert!(record.step < steps);
            let row_len = record.pre[0].len();
            let system = seg.system();

            // straight-line map from the lower layers the hook saw
            let p_tilde =
                oracle_normalized_pad(&record.lower, vision.clone());

            for (h, pre) in record.pre.iter().enumerate() {
                let scale = oracle_mad(&pre[vision.clone()]);
                let p_hat: Vec<f64> = p_tilde.iter().map(|v| v * scale).collect();

                let mut expected = pre.clone();
                for (slot, p) in expected[vision.clone()].iter_mut().zip(&p_hat) {
                    *slot += cfg.lambda * p;
                }
                let mean = cfg.lambda * p_hat.iter().sum::<f64>() / p_hat.len() as f64;
                for slot in &mut expected[system.clone()] {
                    *slot -= mean;
                }
                let expected_attn = oracle_softmax(&expected);

                // what the model actually used: softmax of the post-hook row
                let actual_attn = softmax(&LogitRow::new(record.post[h].clone()).unwrap());
                assert_eq!(actual_attn.len(), row_len);
                for (a, b) in actual_attn.iter().zip(&expected_attn) {
                    assert!(
                        (a - b).abs() < 1e-9,
                        "step {} head {h}: {a} vs {b}",
                        record.step
                    );
                }
            }
        }
    });
}

#[test]
fn instruction_output_ratio_invariance() {
    criterion("ratio invariance: instruction/output ratios preserved to 1e-9 relative", || {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0xC0FFEE);
        for _ in 0..1000 {
            let (row, seg, p_hat, cfg) = random_case(&mut rng, 2);
            let base = softmax(&row);
            let out = apply_pade_row(&row, &seg, &p_hat, &cfg).unwrap();
            let tail = seg.instruction().start..seg.output().end;
            for i in tail.clone() {
                for j in tail.clone() {
                    let lhs = out[i] / out[j];
                    let rhs = base[i] / base[j];
                    assert!(
                        (lhs / rhs - 1.0).abs() <= 1e-9,
                        "positions {i},{j}: {lhs} vs {rhs}"
                    );
                }
            }
        }
    });
}

#[test]
fn mad_robustness_property() {
    criterion("robust scale: one 1e6 outlier blows up stddev >= 1e3x but MAD < 2x", || {
        for seed in 0..100u64 {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let values: Vec<f64> = (0..101)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                })
                .collect();
            let mut poisoned = values.clone();
            let idx = rng.random_range(0..poisoned.len());
            poisoned[idx] = 1e6;

            let sd_clean = oracle_stddev(&values);
            let sd_dirty = oracle_stddev(&poisoned);
            assert!(
                sd_dirty >= 1e3 * sd_clean,
                "seed {seed}: stddev {sd_clean} -> {sd_dirty}"
            );

            let mad_clean = pade_core::numerics::mad(&values).unwrap();
            let mad_dirty = pade_core::numerics::mad(&poisoned).unwrap();
            let ratio = mad_dirty / mad_clean;
            assert!(
                ratio < 2.0 && ratio > 0.5,
                "seed {seed}: MAD {mad_clean} -> {mad_dirty}"
            );
        }
    });
}

#[test]
fn pad_null_and_identity_laws() {
    criterion("dynamics laws: identical layers, L=2 reduction, constant sink (all exact)", || {
        // identical layers -> exactly zero
        let same = LayerVisualAttention::from_rows(
            0,
            vec![vec![0.3, 0.1, 0.25]; 5],
        )
        .unwrap();
        assert!(pad_map(&same).unwrap().values().iter().all(|v| *v == 0.0));

        // L=2 -> exactly max(0, A2 - A1)
        let a1 = vec![0.10, 0.50, 0.00, 0.30];
        let a2 = vec![0.25, 0.20, 0.40, 0.30];
        let two = LayerVisualAttention::from_rows(0, vec![a1.clone(), a2.clone()]).unwrap();
        let p = pad_map(&two).unwrap();
        for j in 0..4 {
            assert_eq!(p.values()[j], (a2[j] - a1[j]).max(0.0));
        }

        // a position with constant attention across layers contributes 0
        let layers = vec![
            vec![0.70, 0.02, 0.10],
            vec![0.70, 0.25, 0.03],
            vec![0.70, 0.01, 0.20],
        ];
        let sinky = LayerVisualAttention::from_rows(0, layers).unwrap();
        let p = pad_map(&sinky).unwrap();
        assert_eq!(p.values()[0], 0.0);
        assert!(p.values()[1] > 0.0 && p.values()[2] > 0.0);
    });
}

#[test]
fn synthetic_recovery_regression() {
    criterion("recovery: default scenario, 100 seeds, gap > 0 and win rate >= 0.9", || {
        let start = Instant::now();
        let cfg = ScenarioConfig::default();
        let k = cfg.core_count();
        let agg = run_recovery_experiment(&cfg, 100, k).unwrap();
        assert!(
            agg.mean_pad_precision - agg.mean_static_precision > 0.0,
            "gap: {} vs {}",
            agg.mean_pad_precision,
            agg.mean_static_precision
        );
        assert!(agg.win_rate >= 0.9, "win rate {}", agg.win_rate);
        // frozen regression values from the first measured run of the
        // shipped configuration (seeds 0..100, k = 8)
        assert_eq!(agg.mean_pad_precision, 0.62125);
        assert_eq!(agg.mean_static_precision, 0.3);
        assert_eq!(agg.win_rate, 0.99);
        assert!(start.elapsed().as_secs_f64() < 30.0);
    });
}

#[test]
fn ablation_directionality() {
    criterion("ablation: full pipeline shifts vision mass >= the w/o-MAD variant in >= 90% of seeds", || {
        let base_cfg = ScenarioConfig::default();
        let mut holds = 0usize;
        for seed in 0..100u64 {
            let scenario = generate_scenario(&ScenarioConfig { seed, ..base_cfg }).unwrap();
            let full = vision_mass_shift(&scenario.trace, &InterventionConfig::default());
            let womad = vision_mass_shift(
                &scenario.trace,
                &InterventionConfig {
                    mad_enabled: false,
                    ..InterventionConfig::default()
                },
            );
            if full >= womad {
                holds += 1;
            }
        }
        assert!(holds >= 90, "held in {holds}/100 seeds");
    });
}

/// Head-averaged increase of post-softmax vision mass at the last layer
/// when the given intervention is applied to a recorded trace.
fn vision_mass_shift(trace: &AttentionTrace, cfg: &InterventionConfig) -> f64 {
    use pade_core::intervention::scaled_pad_for_head;
    use pade_core::pad::{normalize_pad, visual_attention_per_layer};

    let lva = visual_attention_per_layer(trace, 0).unwrap();
    let p_tilde = normalize_pad(&pad_map(&lva).unwrap());
    let seg = trace.segmentation();
    let vision = seg.vision();
    let st = trace.step(0).unwrap();
    let target = trace.num_layers();

    let mut shift = 0.0;
    for row in st.layer_rows(target).unwrap() {
        let p_hat = scaled_pad_for_head(&p_tilde, &row[vision.clone()], cfg).unwrap();
        let base = softmax(row);
        let out = apply_pade_row(row, seg, &p_hat, cfg).unwrap();
        shift += out[vision.clone()].iter().sum::<f64>() - base[vision.clone()].iter().sum::<f64>();
    }
    shift / trace.num_heads() as f64
}

#[test]
fn trace_format_roundtrip_and_fuzz() {
    criterion("trace format: 100 bit-exact round-trips, 100k fuzz inputs without a crash", || {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0xD15C);

        // 100 random f32-valued traces round-trip bit-exactly
        for _ in 0..100 {
            let trace = random_trace(&mut rng);
            let bytes = trace_to_bytes(&trace);
            let back = trace_from_bytes(&bytes).unwrap();
            assert_eq!(back, trace);
            assert_eq!(trace_to_bytes(&back), bytes);
        }

        // fuzz: random buffers and mutations of a valid file, all must
        // come back as typed errors or valid traces, never a panic
        let valid = trace_to_bytes(&random_trace(&mut rng));
        let mut parsed_ok = 0usize;
        let mut errored = 0usize;
        for i in 0..100_000usize {
            let input: Vec<u8> = if i % 2 == 0 {
                let len = rng.random_range(0..300usize);
                (0..len).map(|_| rng.random::<u8>()).collect()
            } else {
                let mut m = valid.clone();
                match rng.random_range(0..4u8) {
                    0 => {
                        let cut = rng.random_range(0..=m.len());
                        m.truncate(cut);
                    }
                    1 => {
                        let extra = rng.random_range(1..16usize);
                        m.extend((0..extra).map(|_| rng.random::<u8>()));
                    }
                    _ => {
                        for _ in 0..rng.random_range(1..8usize) {
                            let pos = rng.random_range(0..m.len());
                            m[pos] ^= 1 << rng.random_range(0..8u8);
                        }
                    }
                }
                m
            };
            match trace_from_bytes(&input) {
                Ok(_) => parsed_ok += 1,
                Err(e) => {
                    // every failure is one of the typed kinds
                    let kind = e.kind();
                    assert!(
                        matches!(
                            kind,
                            "bad_magic"
                                | "unsupported_version"
                                | "trace_length"
                                | "trace_validation"
                        ),
                        "unexpected error kind {kind}"
                    );
                    errored += 1;
                }
            }
        }
        assert_eq!(parsed_ok + errored, 100_000);
        assert!(errored > 0);
    });
}

fn random_trace(rng: &mut Xoshiro256PlusPlus) -> AttentionTrace {
    let layers = rng.random_range(2..5usize);
    let heads = rng.random_range(1..4usize);
    let system = rng.random_range(0..3usize);
    let vision = rng.random_range(1..6usize);
    let instruction = rng.random_range(0..3usize);
    let steps = rng.random_range(0..4usize);
    let prompt_len = system + vision + instruction;
    let seg = TokenSegmentation::new(system, vision, instruction, steps).unwrap();
    let step_traces = (0..steps)
        .map(|t| {
            let row_len = prompt_len + t;
            let grid = (0..layers)
                .map(|_| {
                    (0..heads)
                        .map(|_| {
                            LogitRow::new(
                                (0..row_len)
                                    .map(|_| rng.random_range(-8.0f32..8.0) as f64)
                                    .collect(),
                            )
                            .unwrap()
                        })
                        .collect()
                })
                .collect();
            StepTrace::new(row_len - 1, grid).unwrap()
        })
        .collect();
    AttentionTrace::new(layers, heads, prompt_len, seg, step_traces).unwrap()
}

#[test]
fn metrics_oracles_and_defaults() {
    criterion("metrics: 20 fixed fixtures match hand oracles exactly; shipped defaults pinned", || {
        // ten caption fixtures: (mentioned, truth, expected hallucinated)
        let chair_fixtures: [(&[&str], &[&str], usize); 10] = [
            (&["dog"], &["dog"], 0),
            (&["dog", "cat"], &["dog"], 1),
            (&["car", "bus", "bike"], &[], 3),
            (&["apple"], &["apple", "pear"], 0),
            (&["apple", "pear", "fig"], &["fig"], 2),
            (&["a", "b", "c", "d"], &["a", "b"], 2),
            (&["x"], &["y"], 1),
            (&["tree", "sky"], &["sky", "tree"], 0),
            (&["boat", "dock"], &["boat"], 1),
            (&["sun"], &["sun", "moon", "star"], 0),
        ];
        let corpus: Vec<CaptionObjects> = chair_fixtures
            .iter()
            .map(|(m, g, _)| CaptionObjects::new(m.iter().copied(), g.iter().copied()))
            .collect();
        let total_mentioned: usize = chair_fixtures.iter().map(|(m, _, _)| m.len()).sum();
        let total_hallucinated: usize = chair_fixtures.iter().map(|(_, _, h)| h).sum();
        let captions_with_hallucination =
            chair_fixtures.iter().filter(|(_, _, h)| *h > 0).count();

        let ci = pade_core::metrics::chair_i(&corpus).unwrap();
        assert_eq!(ci, total_hallucinated as f64 / total_mentioned as f64);
        let cs = pade_core::metrics::chair_s(&corpus).unwrap();
        assert_eq!(cs, captions_with_hallucination as f64 / chair_fixtures.len() as f64);

        // ten confusion-matrix fixtures: (tp, fp, fn, tn)
        let pope_fixtures: [(usize, usize, usize, usize); 10] = [
            (3, 1, 1, 5),
            (4, 0, 0, 4),
            (0, 0, 4, 4),
            (0, 4, 0, 4),
            (1, 1, 1, 1),
            (5, 2, 3, 0),
            (0, 0, 0, 6),
            (2, 5, 1, 2),
            (6, 1, 0, 3),
            (0, 2, 2, 1),
        ];
        for (tp, fp, fn_, tn) in pope_fixtures {
            let mut outcomes = Vec::new();
            let mut push = |n: usize, pred, label| {
                for _ in 0..n {
                    outcomes.push(BinaryOutcome { pred, label });
                }
            };
            push(tp, Answer::Yes, Answer::Yes);
            push(fp, Answer::Yes, Answer::No);
            push(fn_, Answer::No, Answer::Yes);
            push(tn, Answer::No, Answer::No);
            let s = pope_scores(&outcomes).unwrap();

            let n = tp + fp + fn_ + tn;
            assert_eq!(s.accuracy, (tp + tn) as f64 / n as f64);
            let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
            let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
            assert_eq!(s.precision, precision);
            assert_eq!(s.recall, recall);
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            assert_eq!(s.f1, f1);
        }

        // shipped defaults: lambda 0.1, final layer, both components on
        let cfg = InterventionConfig::default();
        assert_eq!(cfg.lambda, 0.1);
        assert_eq!(cfg.target_layer, TargetLayer::Last);
        assert!(cfg.mad_enabled && cfg.stc_enabled);
    });
}

// ---------------------------------------------------------------------------
// straight-line oracle helpers (independent of the library kernels)
// ---------------------------------------------------------------------------

fn oracle_softmax(values: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        if v > max {
            max = v;
        }
    }
    let mut exps = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for &v in values {
        let e = (v - max).exp();
        exps.push(e);
        sum += e;
    }
    exps.iter().map(|e| e / sum).collect()
}

fn oracle_median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn oracle_mad(values: &[f64]) -> f64 {
    let m = oracle_median(values);
    let devs: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    oracle_median(&devs)
}

fn oracle_stddev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Max-normalized positive-delta aggregate over head-averaged vision
/// attention, from raw lower-layer rows.
fn oracle_normalized_pad(
    lower: &[Vec<Vec<f64>>],
    vision: std::ops::Range<usize>,
) -> Vec<f64> {
    let width = vision.len();
    if lower.len() < 2 {
        return vec![0.0; width];
    }
    let heads = lower[0].len() as f64;
    let per_layer: Vec<Vec<f64>> = lower
        .iter()
        .map(|rows| {
            let mut acc = vec![0.0; width];
            for row in rows {
                let probs = oracle_softmax(row);
                for (a, p) in acc.iter_mut().zip(&probs[vision.clone()]) {
                    *a += p / heads;
                }
            }
            acc
        })
        .collect();
    let mut pad = vec![0.0; width];
    for pair in per_layer.windows(2) {
        for j in 0..width {
            let d = pair[1][j] - pair[0][j];
            if d > 0.0 {
                pad[j] += d;
            }
        }
    }
    let denom = (per_layer.len() - 1) as f64;
    for p in &mut pad {
        *p /= denom;
    }
    let mut max = 0.0f64;
    for &p in &pad {
        if p > max {
            max = p;
        }
    }
    if max > 0.0 {
        for p in &mut pad {
            *p /= max;
        }
    }
    pad
}
