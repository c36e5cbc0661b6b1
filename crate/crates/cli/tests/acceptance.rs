//! Acceptance suite: one line per criterion. Criterion 11 is advisory and
//! never fails the run; it runs only when `DFL_ADULT_CSV` points at a copy
//! of the Adult data. `DFL_ACCEPTANCE_SEED` reruns criteria 9, 10 and 12
//! under another training seed.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use dfl_cli::commands::load_splits;
use dfl_cli::config::RunConfig;
use dfl_core::autodiff::{Graph, Mode};
use dfl_core::data::{gen_biased_with_composition, gen_toy_sdr, toy_directions, LabeledDataset, BALANCED_COMPOSITION};
use dfl_core::dependence::{dc_conditional, dc_fast, dc_naive, partition_by_class, SampleMatrix};
use dfl_core::metrics::{audit, evaluate, ks_distance, mcdp_gap, tpr_gap, EvalOptions, PredictionSet};
use dfl_core::network::{build, ModelParams, NetworkSpec};
use dfl_core::training::{loss, train_standard, Criterion, LossWeights, Objective};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> SampleMatrix {
    SampleMatrix::new(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Mean and standard error of the mean.
fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn c1_oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(4..=16);
        let (d, p) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let z = normal_matrix(&mut rng, n, d);
        let x = normal_matrix(&mut rng, n, p);
        let naive = dc_naive(&z, &x).map_err(|e| e.to_string())?.value;
        let fast = dc_fast(&z, &x).map_err(|e| e.to_string())?.value;
        let rel = (fast - naive).abs() / naive.abs().max(1e-300);
        worst = worst.max(if naive == 0.0 { fast.abs() } else { rel });
    }
    ensure(worst < 1e-9, format!("max relative error {worst:e}"))?;
    Ok(format!("50 fixtures, max relative error {worst:.1e}"))
}

fn c2_unbiased() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let est: Vec<f64> = (0..2000)
        .map(|_| {
            let z = normal_matrix(&mut rng, 16, 2);
            let x = normal_matrix(&mut rng, 16, 3);
            dc_fast(&z, &x).unwrap().value
        })
        .collect();
    let (m, se) = mean_se(&est);
    ensure(m.abs() <= 3.0 * se, format!("mean {m:.4e}, se {se:.4e}"))?;
    Ok(format!("mean {m:.2e} = {:.2} SE", m / se))
}

fn c3_detection() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let est: Vec<f64> = (0..500)
        .map(|_| {
            let x = normal_matrix(&mut rng, 64, 3);
            let z = x.select_columns(&[0]);
            dc_fast(&z, &x).unwrap().value
        })
        .collect();
    let (m, se) = mean_se(&est);
    ensure(m > 5.0 * se, format!("mean {m:.4} only {:.2} SE", m / se))?;
    Ok(format!("mean {m:.4} = {:.1} SE above 0", m / se))
}

/// Rows of a random 2×4 matrix with orthonormal rows (a 1-Lipschitz map).
fn random_projection(rng: &mut ChaCha8Rng) -> [[f64; 4]; 2] {
    let mut rows = [[0.0; 4]; 2];
    for r in 0..2 {
        let mut v: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        for prev in &rows[..r] {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        rows[r] = v.map(|a| a / norm);
    }
    rows
}

fn c4_data_processing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let g = random_projection(&mut rng);
    let n = 32;
    let mut full = Vec::new();
    let mut reduced = Vec::new();
    for _ in 0..2000 {
        let x = normal_matrix(&mut rng, n, 4);
        let z: Vec<f64> = (0..n)
            .map(|i| {
                let r = x.row(i);
                r[0] * r[1] + r[2].sin() + 0.5 * r[3] + 0.3 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let z = SampleMatrix::column(z).unwrap();
        let gx: Vec<f64> = (0..n)
            .flat_map(|i| {
                let r = x.row(i);
                g.map(|w| w.iter().zip(r).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect();
        let gx = SampleMatrix::new(n, 2, gx).unwrap();
        full.push(dc_fast(&z, &x).unwrap().value);
        reduced.push(dc_fast(&z, &gx).unwrap().value);
    }
    let (mf, sf) = mean_se(&full);
    let (mr, sr) = mean_se(&reduced);
    let bound = mf + 3.0 * (sf * sf + sr * sr).sqrt();
    ensure(mr <= bound, format!("mean DC(Z,gX) {mr:.4} > bound {bound:.4}"))?;
    Ok(format!("mean DC(Z,gX) {mr:.4} <= mean DC(Z,X) {mf:.4} + 3 SE"))
}

fn balanced_batch(per_class: usize, seed: u64) -> LabeledDataset {
    let ds = gen_biased_with_composition(8 * per_class, 4, 2.0, seed, BALANCED_COMPOSITION).unwrap();
    let mut idx = Vec::new();
    for class in 0..2 {
        idx.extend((0..ds.n()).filter(|&i| ds.y[i] == class).take(per_class));
    }
    ds.subset(&idx)
}

fn loss_value(model: &ModelParams, batch: &LabeledDataset, obj: Objective) -> f64 {
    let mut g = Graph::new();
    loss(&mut g, model, batch, obj, Mode::Train).unwrap().parts.total
}

fn gradient_error(model: &ModelParams, batch: &LabeledDataset, obj: Objective) -> f64 {
    let mut g = Graph::new();
    let out = loss(&mut g, model, batch, obj, Mode::Train).unwrap();
    g.backward(out.loss).unwrap();
    let h = 1e-6;
    let (mut diff, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (pi, v) in out.forward.param_vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap().data();
        let mut probe = model.clone();
        for (j, a) in analytic.iter().enumerate() {
            let orig = model.params[pi].value.data()[j];
            probe.params[pi].value.data_mut()[j] = orig + h;
            let up = loss_value(&probe, batch, obj);
            probe.params[pi].value.data_mut()[j] = orig - h;
            let down = loss_value(&probe, batch, obj);
            probe.params[pi].value.data_mut()[j] = orig;
            let num = (up - down) / (2.0 * h);
            diff += (a - num).powi(2);
            na += a * a;
            nb += num * num;
        }
    }
    diff.sqrt() / na.max(nb).sqrt()
}

fn c5_gradients() -> Check {
    let spec = NetworkSpec {
        input_dim: 4,
        output_classes: 2,
        growth_rate: 4,
        depth: 7,
        reduction: 0.5,
    };
    let model = build(spec, 5).map_err(|e| e.to_string())?;
    let batch = balanced_batch(8, 11);
    let weights = LossWeights::LambdaMu { lambda: 2.0, mu: 0.5 };
    let mut report = Vec::new();
    for criterion in [Criterion::Independence, Criterion::Separation] {
        let err = gradient_error(&model, &batch, Objective { criterion, weights });
        ensure(err < 1e-4, format!("{criterion:?}: relative error {err:e}"))?;
        report.push(format!("{criterion:?} {err:.1e}"));
    }
    Ok(format!("{} parameters; {}", model.parameter_count(), report.join(", ")))
}

fn c6_conditional_weights() -> Check {
    let weights = |sizes: &[usize]| -> Vec<f64> {
        let y: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &m)| vec![c; m]).collect();
        partition_by_class(&y, sizes.len()).unwrap().included.iter().map(|c| c.1).collect()
    };
    ensure(weights(&[5, 5]) == vec![0.5, 0.5], format!("(5,5) -> {:?}", weights(&[5, 5])))?;
    ensure(
        weights(&[6, 4]) == vec![15.0 / 16.0, 1.0 / 16.0],
        format!("(6,4) -> {:?}", weights(&[6, 4])),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let z = normal_matrix(&mut rng, 12, 2);
    let x = normal_matrix(&mut rng, 12, 3);
    let cond = dc_conditional(&z, &x, &[0; 12], 1).map_err(|e| e.to_string())?.value;
    let plain = dc_fast(&z, &x).map_err(|e| e.to_string())?.value;
    ensure(cond == plain, format!("K=1 gives {cond} vs {plain}"))?;
    Ok("(5,5) -> (1/2, 1/2); (6,4) -> (15/16, 1/16); K=1 exact".into())
}

fn binary_preds(scores: &[f64], labels: &[usize], groups: &[f64]) -> PredictionSet {
    let probs = scores.iter().flat_map(|&s| [1.0 - s, s]).collect();
    PredictionSet::new(2, probs, labels.to_vec(), SampleMatrix::column(groups.to_vec()).unwrap()).unwrap()
}

/// Largest CDF gap evaluated on the union of both samples.
fn ks_union_grid(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |s: &[f64], t: f64| s.iter().filter(|v| **v <= t).count() as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&t| (cdf(a, t) - cdf(b, t)).abs())
        .fold(0.0, f64::max)
}

fn c7_metrics() -> Check {
    let hand = binary_preds(
        &[0.1, 0.2, 0.9, 0.2, 0.1, 0.9, 0.9, 0.2],
        &[0, 0, 1, 1, 0, 0, 1, 1],
        &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
    );
    let tpr = audit(&hand, &[]).map_err(|e| e.to_string())?.tpr_gap;
    ensure((tpr - 35.36).abs() < 0.01, format!("TPR aggregate {tpr}"))?;
    let disjoint = binary_preds(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0], &[1.0, 1.0, 0.0, 0.0]);
    let m1 = mcdp_gap(&disjoint, 0).map_err(|e| e.to_string())?.per_class[1];
    ensure(m1 == 1.0, format!("disjoint MCDP {m1}"))?;
    let inter = binary_preds(&[0.1, 0.9, 0.5], &[0, 1, 0], &[1.0, 1.0, 0.0]);
    let m2 = mcdp_gap(&inter, 0).map_err(|e| e.to_string())?.per_class[1];
    ensure(m2 == 0.5, format!("interleaved MCDP {m2}"))?;
    ensure(tpr_gap(&disjoint, 0).is_err(), "TPR on label-disjoint groups should be undefined")?;

    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for _ in 0..500 {
        let na = rng.random_range(1..40);
        let nb = rng.random_range(1..40);
        let a: Vec<f64> = (0..na).map(|_| rng.random_range(0..15) as f64 / 15.0).collect();
        let b: Vec<f64> = (0..nb).map(|_| rng.random_range(0..15) as f64 / 15.0).collect();
        let (fast, brute) = (ks_distance(&a, &b), ks_union_grid(&a, &b));
        ensure(fast == brute, format!("KS {fast} vs brute force {brute} on {a:?} / {b:?}"))?;
    }
    Ok(format!("TPR {tpr:.2}, MCDP 1.0 and 0.5, KS exact on 500 tied samples"))
}

fn c8_toy_subspace() -> Check {
    let ds = gen_toy_sdr(5000, 0.1, 808).map_err(|e| e.to_string())?;
    let b = toy_directions();
    let proj: Vec<f64> = (0..ds.n())
        .flat_map(|i| {
            let r = ds.x.row(i);
            [2, 3].map(|k| b[k].iter().zip(r).map(|(u, v)| u * v).sum::<f64>())
        })
        .collect();
    let fair = SampleMatrix::new(ds.n(), 2, proj).unwrap();
    let observed_fair = dc_fast(&ds.z, &fair).unwrap().value;
    let observed_full = dc_fast(&ds.z, &ds.x).unwrap().value;

    let mut rng = ChaCha8Rng::seed_from_u64(809);
    let mut idx: Vec<usize> = (0..ds.n()).collect();
    let mut null_fair = Vec::new();
    let mut null_full = Vec::new();
    for _ in 0..12 {
        idx.shuffle(&mut rng);
        let zp = ds.z.select_rows(&idx);
        null_fair.push(dc_fast(&zp, &fair).unwrap().value);
        null_full.push(dc_fast(&zp, &ds.x).unwrap().value);
    }
    let sd = |v: &[f64]| mean_se(v).1 * (v.len() as f64).sqrt();
    let (mf, sf) = (mean_se(&null_fair).0, sd(&null_fair));
    let (mx, sx) = (mean_se(&null_full).0, sd(&null_full));
    ensure(
        (observed_fair - mf).abs() <= 3.0 * sf,
        format!("DC(Z, fair projection) {observed_fair:.2e} vs null {mf:.2e} ± {sf:.2e}"),
    )?;
    ensure(
        observed_full > mx + 3.0 * sx,
        format!("DC(Z, X) {observed_full:.2e} not above null {mx:.2e} ± {sx:.2e}"),
    )?;
    Ok(format!(
        "DC(Z, fair) {observed_fair:.1e} = {:.2} null SD; DC(Z, X) {observed_full:.3} = {:.0} null SD",
        (observed_fair - mf) / sf,
        (observed_full - mx) / sx
    ))
}

fn biased_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/biased.conf")
}

fn seed_override() -> Option<String> {
    std::env::var("DFL_ACCEPTANCE_SEED").ok()
}

fn dfl(args: &[&str]) -> Result<Value, String> {
    let seed: Vec<String> = seed_override().map(|s| vec!["--seed".into(), s]).unwrap_or_default();
    let out = Command::new(env!("CARGO_BIN_EXE_dfl"))
        .args(&seed)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "dfl {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn num(v: &Value, key: &str) -> Result<f64, String> {
    v[key].as_f64().ok_or_else(|| format!("{key} missing from {v}"))
}

struct Reference {
    std_accuracy: f64,
    std_tpr: f64,
    std_mcdp: f64,
    dc_epoch0: f64,
}

struct FairRun {
    dir: PathBuf,
    metrics: Value,
    reference: Reference,
}

fn scratch() -> PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("dfl-acceptance-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    })
    .clone()
}

fn fair_run() -> Result<&'static FairRun, String> {
    static RUN: OnceLock<Result<FairRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg_path = biased_config();
        let dir = scratch().join("run-a");
        let metrics = dfl(&[
            "--config",
            cfg_path.to_str().unwrap(),
            "--deterministic",
            "--out",
            dir.to_str().unwrap(),
            "train",
        ])?;
        let mut cfg = RunConfig::load(&cfg_path).map_err(|e| e.to_string())?;
        if let Some(seed) = seed_override() {
            cfg = cfg.with_override("seed", &seed).map_err(|e| e.to_string())?;
        }
        let splits = load_splits(&cfg).map_err(|e| e.to_string())?;
        let standard = train_standard(&splits, cfg.hidden, &cfg.train).map_err(|e| e.to_string())?;
        let std_report = evaluate(&standard.model, &splits.test, EvalOptions::default()).map_err(|e| e.to_string())?;
        let initial = build(cfg.network_spec(splits.train.p(), splits.train.k), cfg.seed).map_err(|e| e.to_string())?;
        let opts = EvalOptions {
            with_dc: true,
            dc_max_samples: cfg.dc_max_samples,
        };
        let init_report = evaluate(&initial, &splits.test, opts).map_err(|e| e.to_string())?;
        Ok(FairRun {
            dir,
            metrics,
            reference: Reference {
                std_accuracy: std_report.accuracy,
                std_tpr: std_report.tpr_gap,
                std_mcdp: std_report.mcdp_gap,
                dc_epoch0: init_report.dc_z_latent_given_y.ok_or("epoch-0 conditional DC undefined")?,
            },
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn c9_end_to_end() -> Check {
    let run = fair_run()?;
    let r = &run.reference;
    let (acc, tpr, mcdp) = (num(&run.metrics, "accuracy")?, num(&run.metrics, "tpr_gap")?, num(&run.metrics, "mcdp_gap")?);
    let dc = num(&run.metrics, "dc_z_latent_given_y")?;
    let tpr_cut = 1.0 - tpr / r.std_tpr;
    let mcdp_cut = 1.0 - mcdp / r.std_mcdp;
    let dc_ratio = dc / r.dc_epoch0;
    let summary = format!(
        "Standard acc {:.2} TPR {:.2} MCDP {:.2}; DFL acc {acc:.2} TPR {tpr:.2} (-{:.0}%) MCDP {mcdp:.2} (-{:.0}%); DC ratio {:.3}",
        r.std_accuracy,
        r.std_tpr,
        r.std_mcdp,
        100.0 * tpr_cut,
        100.0 * mcdp_cut,
        dc_ratio
    );
    ensure(tpr_cut >= 0.6, format!("TPR reduction below 60%: {summary}"))?;
    ensure(mcdp_cut >= 0.5, format!("MCDP reduction below 50%: {summary}"))?;
    ensure((acc - r.std_accuracy).abs() <= 5.0, format!("accuracy gap above 5: {summary}"))?;
    ensure(dc_ratio <= 0.2, format!("held-out DC above 20% of epoch 0: {summary}"))?;
    Ok(summary)
}

fn c10_probe() -> Check {
    let run = fair_run()?;
    let r = &run.reference;
    let model = run.dir.join("model.dflm");
    let probe = dfl(&[
        "--config",
        biased_config().to_str().unwrap(),
        "probe",
        model.to_str().unwrap(),
    ])?;
    let (acc, tpr, mcdp) = (num(&probe, "accuracy")?, num(&probe, "tpr_gap")?, num(&probe, "mcdp_gap")?);
    let (dacc, dtpr, dmcdp) = (num(&run.metrics, "accuracy")?, num(&run.metrics, "tpr_gap")?, num(&run.metrics, "mcdp_gap")?);
    let summary = format!("probe acc {acc:.2} TPR {tpr:.2} MCDP {mcdp:.2}; DFL acc {dacc:.2} TPR {dtpr:.2} MCDP {dmcdp:.2}");
    ensure((acc - dacc).abs() <= 2.0, format!("probe accuracy off by more than 2: {summary}"))?;
    ensure(tpr <= 1.5 * dtpr && mcdp <= 1.5 * dmcdp, format!("probe gaps above 1.5x DFL: {summary}"))?;
    ensure(
        tpr <= 0.4 * r.std_tpr && mcdp <= 0.4 * r.std_mcdp,
        format!("probe gaps above 40% of Standard: {summary}"),
    )?;
    Ok(summary)
}

fn c11_adult() -> Check {
    let Some(csv) = std::env::var_os("DFL_ADULT_CSV") else {
        return Err("skipped: set DFL_ADULT_CSV to a headered, ?-free Adult CSV".into());
    };
    let cfg_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/adult.conf");
    let cfg = RunConfig::load(&cfg_path)
        .and_then(|c| c.with_override("data.path", &PathBuf::from(csv).display().to_string()))
        .and_then(|c| c.with_override("out", &scratch().join("adult").display().to_string()))
        .map_err(|e| e.to_string())?;
    let out = dfl_cli::commands::train(&cfg).map_err(|e| e.to_string())?;
    let v: Value = serde_json::from_str(&out.stdout).map_err(|e| e.to_string())?;
    let (acc, mcdp) = (num(&v, "accuracy")?, num(&v, "mcdp_gap")?);
    let summary = format!("accuracy {acc:.2} (target 79.24 ± 3), MCDP {mcdp:.2} (target 7.31 ± 3)");
    ensure((acc - 79.24).abs() <= 3.0 && (mcdp - 7.31).abs() <= 3.0, summary.clone())?;
    Ok(summary)
}

fn c12_determinism() -> Check {
    let run = fair_run()?;
    let dir = scratch().join("run-b");
    dfl(&[
        "--config",
        biased_config().to_str().unwrap(),
        "--deterministic",
        "--out",
        dir.to_str().unwrap(),
        "train",
    ])?;
    let a = std::fs::read(run.dir.join("trajectory.csv")).map_err(|e| e.to_string())?;
    let b = std::fs::read(dir.join("trajectory.csv")).map_err(|e| e.to_string())?;
    ensure(a == b, "trajectory CSVs differ")?;
    Ok(format!("trajectory.csv byte-identical ({} bytes)", a.len()))
}

struct Entry {
    id: u32,
    name: &'static str,
    limit: Duration,
    gating: bool,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let criteria = [
        Entry { id: 1, name: "estimator oracle equivalence", limit: secs(5), gating: true, run: c1_oracle_equivalence },
        Entry { id: 2, name: "unbiasedness under independence", limit: secs(30), gating: true, run: c2_unbiased },
        Entry { id: 3, name: "dependence detection", limit: secs(30), gating: true, run: c3_detection },
        Entry { id: 4, name: "data-processing property", limit: secs(60), gating: true, run: c4_data_processing },
        Entry { id: 5, name: "gradient correctness", limit: secs(60), gating: true, run: c5_gradients },
        Entry { id: 6, name: "conditional DC weights", limit: secs(1), gating: true, run: c6_conditional_weights },
        Entry { id: 7, name: "metric fixtures", limit: secs(1), gating: true, run: c7_metrics },
        Entry { id: 8, name: "toy subspace ground truth", limit: secs(60), gating: true, run: c8_toy_subspace },
        Entry { id: 9, name: "end-to-end fairness trade-off", limit: secs(600), gating: true, run: c9_end_to_end },
        Entry { id: 10, name: "representation-level fairness", limit: secs(300), gating: true, run: c10_probe },
        Entry { id: 11, name: "Adult reproduction (advisory)", limit: secs(3600), gating: false, run: c11_adult },
        Entry { id: 12, name: "determinism", limit: secs(600), gating: true, run: c12_determinism },
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.contains(&c.id)) {
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(_) if elapsed > c.limit => Err(format!("took {elapsed:.1?}, limit {:?}", c.limit)),
            other => other,
        };
        let (status, detail) = match (&result, c.gating) {
            (Ok(d), true) => ("PASS", d),
            (Ok(d), false) => ("PASS (advisory)", d),
            (Err(d), true) => ("FAIL", d),
            (Err(d), false) => ("ADVISORY", d),
        };
        if result.is_err() && c.gating {
            failed += 1;
        }
        println!("criterion {:>2} {status}: {} [{elapsed:.1?}] {detail}", c.id, c.name);
    }
    let _ = std::fs::remove_dir_all(scratch());
    if failed == 0 {
        println!("acceptance: all gating criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} gating criteria failed");
        ExitCode::FAILURE
    }
}
