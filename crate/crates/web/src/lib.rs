//! Browser demo. Each operation has a plain Rust function returning a
//! serializable result and a `wasm_bindgen` wrapper returning JSON text.

use dfl_core::data::{gen_biased_classification, gen_biased_with_composition, gen_toy_sdr, split, toy_directions, BALANCED_COMPOSITION};
use dfl_core::dependence::{dc_fast, SampleMatrix};
use dfl_core::metrics::{evaluate, ks_distance, EvalOptions};
use dfl_core::network::NetworkSpec;
use dfl_core::training::{train, train_standard, EpochRecord, LossWeights, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AngleCurve {
    pub angles: Vec<f64>,
    pub dc: Vec<f64>,
}

/// DC between the toy sensitive attribute and `X·u(θ)`, where `u(θ)`
/// rotates from β₁ (θ = 0, drives Z) to β₃ (θ = π/2, fair).
pub fn dc_angle_curve(n: usize, noise_sd: f64, seed: u64, steps: usize) -> dfl_core::Result<AngleCurve> {
    let ds = gen_toy_sdr(n, noise_sd, seed)?;
    let b = toy_directions();
    let steps = steps.max(2);
    let mut angles = Vec::with_capacity(steps);
    let mut dc = Vec::with_capacity(steps);
    for s in 0..steps {
        let theta = std::f64::consts::PI * s as f64 / (steps - 1) as f64;
        let u: Vec<f64> = (0..4).map(|j| theta.cos() * b[0][j] + theta.sin() * b[2][j]).collect();
        let proj = (0..ds.n())
            .map(|i| ds.x.row(i).iter().zip(&u).map(|(x, w)| x * w).sum())
            .collect();
        angles.push(theta);
        dc.push(dc_fast(&ds.z, &SampleMatrix::column(proj)?)?.value);
    }
    Ok(AngleCurve { angles, dc })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsDemo {
    /// Sorted scores of the two groups.
    pub group_a: Vec<f64>,
    pub group_b: Vec<f64>,
    pub ks: f64,
    /// A score where the CDF gap reaches `ks`.
    pub at: f64,
}

/// Two groups of sigmoid scores; group B's logits are shifted by `shift`.
pub fn ks_demo(n: usize, shift: f64, seed: u64) -> KsDemo {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |offset: f64| -> Vec<f64> {
        let mut v: Vec<f64> = (0..n.max(1))
            .map(|_| 1.0 / (1.0 + (-(rng.sample::<f64, _>(StandardNormal) + offset)).exp()))
            .collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let group_a = draw(0.0);
    let group_b = draw(shift);
    let cdf = |s: &[f64], t: f64| s.partition_point(|v| *v <= t) as f64 / s.len() as f64;
    let at = group_a
        .iter()
        .chain(&group_b)
        .copied()
        .max_by(|x, y| (cdf(&group_a, *x) - cdf(&group_b, *x)).abs().total_cmp(&(cdf(&group_a, *y) - cdf(&group_b, *y)).abs()))
        .unwrap_or(0.0);
    KsDemo {
        ks: ks_distance(&group_a, &group_b),
        group_a,
        group_b,
        at,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reference {
    pub accuracy: f64,
    pub tpr_gap: f64,
    pub mcdp_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingDemo {
    pub alpha: f64,
    pub trajectory: Vec<EpochRecord>,
    pub standard: Reference,
}

/// Trains a small separation-criterion model on biased synthetic data
/// (balanced test set) and an unconstrained baseline for comparison.
pub fn training_demo(alpha: f64, epochs: usize, seed: u64) -> dfl_core::Result<TrainingDemo> {
    let ds = gen_biased_classification(1600, 4, 2.0, seed)?;
    let mut splits = split(&ds, [0.8, 0.1, 0.1], seed, true)?;
    splits.test = gen_biased_with_composition(800, 4, 2.0, seed.wrapping_add(1), BALANCED_COMPOSITION)?;
    splits.standardize();
    let cfg = TrainConfig {
        weights: LossWeights::Alpha {
            alpha,
            retain_target: true,
        },
        epochs,
        batch_size: 64,
        seed,
        ..TrainConfig::default()
    };
    let spec = NetworkSpec {
        input_dim: 4,
        output_classes: 2,
        growth_rate: 4,
        depth: 7,
        reduction: 0.5,
    };
    let fair = train(&splits, spec, &cfg)?;
    let base = train_standard(&splits, 16, &cfg)?;
    let r = evaluate(&base.model, &splits.test, EvalOptions::default())?;
    Ok(TrainingDemo {
        alpha,
        trajectory: fair.trajectory,
        standard: Reference {
            accuracy: r.accuracy,
            tpr_gap: r.tpr_gap,
            mcdp_gap: r.mcdp_gap,
        },
    })
}

fn to_js<T: Serialize>(v: dfl_core::Result<T>) -> Result<String, JsError> {
    let v = v.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = dcAngleCurve)]
pub fn dc_angle_curve_js(n: usize, noise_sd: f64, seed: u32, steps: usize) -> Result<String, JsError> {
    to_js(dc_angle_curve(n, noise_sd, u64::from(seed), steps))
}

#[wasm_bindgen(js_name = ksDemo)]
pub fn ks_demo_js(n: usize, shift: f64, seed: u32) -> Result<String, JsError> {
    to_js(Ok(ks_demo(n, shift, u64::from(seed))))
}

#[wasm_bindgen(js_name = trainingDemo)]
pub fn training_demo_js(alpha: f64, epochs: usize, seed: u32) -> Result<String, JsError> {
    to_js(training_demo(alpha, epochs, u64::from(seed)))
}
