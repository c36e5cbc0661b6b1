//! Accuracy, TPR gap and MCDP for binary sensitive attributes.
//!
//! For class `j` and binary attribute `z`:
//!
//! * `TPR_{z,j} = P(argmax = j | Z = z, Y = j)`; the per-class gap is
//!   `TPR_{1,j} − TPR_{0,j}` and the aggregate is
//!   `100·sqrt(mean_j gap_j²)` over classes where both groups have positives.
//! * `MCDP_j` is the two-sample Kolmogorov–Smirnov distance between the
//!   group-wise distributions of predicted probability for class `j`; the
//!   aggregate is `100·sqrt(Σ_{j<K−1} MCDP_j² / (K−1))`.

use serde::Serialize;

use crate::data::LabeledDataset;
use crate::dependence::{dc_conditional, dc_fast, SampleMatrix};
use crate::error::{Error, Result};
use crate::network::ModelParams;

/// Predicted class probabilities with true labels and sensitive attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    n: usize,
    k: usize,
    probs: Vec<f64>,
    labels: Vec<usize>,
    sensitive: SampleMatrix,
}

impl PredictionSet {
    pub fn new(k: usize, probs: Vec<f64>, labels: Vec<usize>, sensitive: SampleMatrix) -> Result<Self> {
        let n = labels.len();
        if n == 0 || k < 2 {
            return Err(Error::dim(format!("need n ≥ 1 and K ≥ 2, got n={n}, K={k}")));
        }
        if probs.len() != n * k || sensitive.n() != n {
            return Err(Error::dim("probabilities, labels and sensitive rows disagree in size"));
        }
        for i in 0..n {
            let s: f64 = probs[i * k..(i + 1) * k].iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("probability row {i} sums to {s}")));
            }
            if labels[i] >= k {
                return Err(Error::Encoding(format!("label {} at row {i} is outside 0..{k}", labels[i])));
            }
        }
        Ok(PredictionSet {
            n,
            k,
            probs,
            labels,
            sensitive,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sensitive(&self) -> &SampleMatrix {
        &self.sensitive
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.k + j]
    }

    /// Arg-max class of row `i`, ties to the lowest index.
    pub fn predicted(&self, i: usize) -> usize {
        let row = &self.probs[i * self.k..(i + 1) * self.k];
        let mut best = 0;
        for j in 1..self.k {
            if row[j] > row[best] {
                best = j;
            }
        }
        best
    }

    /// Group membership (0/1) for attribute column `col`.
    fn groups(&self, col: usize) -> Result<Vec<u8>> {
        if col >= self.sensitive.d() {
            return Err(Error::dim(format!(
                "sensitive column {col} out of {}",
                self.sensitive.d()
            )));
        }
        (0..self.n)
            .map(|i| match self.sensitive.get(i, col) {
                0.0 => Ok(0),
                1.0 => Ok(1),
                v => Err(Error::MetricUndefined(format!(
                    "sensitive column {col} has non-binary value {v} at row {i}"
                ))),
            })
            .collect()
    }
}

/// Top-1 accuracy in percent.
pub fn accuracy(preds: &PredictionSet) -> f64 {
    let correct = (0..preds.n).filter(|&i| preds.predicted(i) == preds.labels[i]).count();
    100.0 * correct as f64 / preds.n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TprGap {
    /// Signed gap per class, `None` where a group has no positives.
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
    /// Percent.
    pub aggregate: f64,
}

pub fn tpr_gap(preds: &PredictionSet, col: usize) -> Result<TprGap> {
    let groups = preds.groups(col)?;
    let k = preds.k;
    let mut pos = vec![[0usize; 2]; k];
    let mut hit = vec![[0usize; 2]; k];
    for i in 0..preds.n {
        let (y, z) = (preds.labels[i], groups[i] as usize);
        pos[y][z] += 1;
        if preds.predicted(i) == y {
            hit[y][z] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(k);
    let mut excluded = Vec::new();
    for j in 0..k {
        if pos[j][0] == 0 || pos[j][1] == 0 {
            per_class.push(None);
            excluded.push(j);
        } else {
            let t1 = hit[j][1] as f64 / pos[j][1] as f64;
            let t0 = hit[j][0] as f64 / pos[j][0] as f64;
            per_class.push(Some(t1 - t0));
        }
    }
    if !excluded.is_empty() {
        log::warn!("TPR gap: classes {excluded:?} lack positives in one group and are excluded");
    }
    let gaps: Vec<f64> = per_class.iter().flatten().copied().collect();
    if gaps.is_empty() {
        return Err(Error::MetricUndefined(format!(
            "TPR gap: no class has positives in both groups of column {col}"
        )));
    }
    Ok(TprGap {
        aggregate: rms_percent(&gaps),
        per_class,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McdpGap {
    /// KS distance per class (all K classes).
    pub per_class: Vec<f64>,
    /// Percent, over the first K−1 classes.
    pub aggregate: f64,
}

pub fn mcdp_gap(preds: &PredictionSet, col: usize) -> Result<McdpGap> {
    let groups = preds.groups(col)?;
    let count1 = groups.iter().filter(|g| **g == 1).count();
    if count1 == 0 || count1 == preds.n {
        return Err(Error::MetricUndefined(format!(
            "MCDP: sensitive column {col} has an empty group"
        )));
    }
    let per_class: Vec<f64> = (0..preds.k)
        .map(|j| {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for i in 0..preds.n {
                if groups[i] == 1 {
                    a.push(preds.prob(i, j));
                } else {
                    b.push(preds.prob(i, j));
                }
            }
            ks_distance(&a, &b)
        })
        .collect();
    Ok(McdpGap {
        aggregate: rms_percent(&per_class[..preds.k - 1]),
        per_class,
    })
}

fn rms_percent(v: &[f64]) -> f64 {
    100.0 * (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Exact two-sample Kolmogorov–Smirnov statistic `sup_y |F_a(y) − F_b(y)|`
/// by a merge over the sorted samples. Both samples must be non-empty.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "KS distance of an empty sample");
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut best: f64 = 0.0;
    while i < na && j < nb {
        // advance past every copy of the smallest remaining value in both samples
        let y = a[i].min(b[j]);
        while i < na && a[i] <= y {
            i += 1;
        }
        while j < nb && b[j] <= y {
            j += 1;
        }
        let gap = (i as f64 / na as f64 - j as f64 / nb as f64).abs();
        best = best.max(gap);
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassBreakdown {
    pub class: usize,
    pub tpr_gap: Option<f64>,
    pub mcdp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeReport {
    pub column: usize,
    pub tpr_gap: f64,
    pub mcdp_gap: f64,
    pub per_class: Vec<ClassBreakdown>,
    pub excluded_classes: Vec<usize>,
}

/// Utility and fairness summary. Top-level gaps refer to sensitive column 0;
/// `per_attribute` has every column audited independently.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FairnessReport {
    pub accuracy: f64,
    pub tpr_gap: f64,
    pub mcdp_gap: f64,
    pub per_class: Vec<ClassBreakdown>,
    pub per_attribute: Vec<AttributeReport>,
    pub dc_z_latent: Option<f64>,
    pub dc_z_latent_given_y: Option<f64>,
}

impl FairnessReport {
    /// Recomputes the aggregates from the per-class values.
    pub fn recomputed_aggregates(&self) -> (f64, f64) {
        let tpr: Vec<f64> = self.per_class.iter().filter_map(|c| c.tpr_gap).collect();
        let k = self.per_class.len();
        let mcdp: Vec<f64> = self.per_class[..k - 1].iter().map(|c| c.mcdp).collect();
        (rms_percent(&tpr), rms_percent(&mcdp))
    }
}

/// Audits every sensitive column of `preds`. `columns` selects which
/// columns to audit (all when empty).
pub fn audit(preds: &PredictionSet, columns: &[usize]) -> Result<FairnessReport> {
    let all: Vec<usize> = (0..preds.sensitive.d()).collect();
    let columns = if columns.is_empty() { &all[..] } else { columns };
    let mut per_attribute = Vec::with_capacity(columns.len());
    for &col in columns {
        let tpr = tpr_gap(preds, col)?;
        let mcdp = mcdp_gap(preds, col)?;
        let per_class = (0..preds.k)
            .map(|j| ClassBreakdown {
                class: j,
                tpr_gap: tpr.per_class[j],
                mcdp: mcdp.per_class[j],
            })
            .collect();
        per_attribute.push(AttributeReport {
            column: col,
            tpr_gap: tpr.aggregate,
            mcdp_gap: mcdp.aggregate,
            per_class,
            excluded_classes: tpr.excluded,
        });
    }
    let first = per_attribute
        .first()
        .ok_or_else(|| Error::MetricUndefined("no sensitive column to audit".into()))?;
    Ok(FairnessReport {
        accuracy: accuracy(preds),
        tpr_gap: first.tpr_gap,
        mcdp_gap: first.mcdp_gap,
        per_class: first.per_class.clone(),
        per_attribute,
        dc_z_latent: None,
        dc_z_latent_given_y: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Attach DC(Z, latent) and DC(Z, latent | Y).
    pub with_dc: bool,
    /// DC terms use at most this many leading rows (memory is quadratic).
    pub dc_max_samples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            with_dc: false,
            dc_max_samples: 2000,
        }
    }
}

/// Eval-mode predictions of `model` on `data`.
pub fn predictions(model: &ModelParams, data: &LabeledDataset) -> Result<(SampleMatrix, PredictionSet)> {
    let (latent, probs) = model.predict(&data.x.to_tensor())?;
    let latent = SampleMatrix::from_tensor(&latent)?;
    let preds = PredictionSet::new(data.k, probs.into_data(), data.y.clone(), data.z.clone())?;
    Ok((latent, preds))
}

/// Runs the model in eval mode on `data` and audits the predictions.
pub fn evaluate(model: &ModelParams, data: &LabeledDataset, opts: EvalOptions) -> Result<FairnessReport> {
    let (latent, preds) = predictions(model, data)?;
    let mut report = audit(&preds, &[])?;
    if opts.with_dc {
        let m = data.n().min(opts.dc_max_samples);
        let idx: Vec<usize> = (0..m).collect();
        let lat = latent.select_rows(&idx);
        let z = data.z.select_rows(&idx);
        report.dc_z_latent = Some(dc_fast(&z, &lat)?.value);
        report.dc_z_latent_given_y = dc_conditional(&z, &lat, &data.y[..m], data.k)
            .ok()
            .map(|c| c.value);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary_preds(scores: &[f64], labels: &[usize], groups: &[f64]) -> PredictionSet {
        let probs = scores.iter().flat_map(|&s| [1.0 - s, s]).collect();
        PredictionSet::new(
            2,
            probs,
            labels.to_vec(),
            SampleMatrix::column(groups.to_vec()).unwrap(),
        )
        .unwrap()
    }

    /// |F_a − F_b| evaluated on every observed value.
    fn ks_brute(a: &[f64], b: &[f64]) -> f64 {
        let cdf = |s: &[f64], y: f64| s.iter().filter(|v| **v <= y).count() as f64 / s.len() as f64;
        a.iter()
            .chain(b)
            .map(|&y| (cdf(a, y) - cdf(b, y)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn accuracy_cases() {
        let p = binary_preds(&[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0], &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(accuracy(&p), 100.0);
        let p = binary_preds(&[0.9, 0.9, 0.9, 0.1], &[1, 0, 0, 1], &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(accuracy(&p), 25.0);
        let p = binary_preds(&[0.5], &[0], &[0.0]);
        assert_eq!(accuracy(&p), 100.0);
    }

    #[test]
    fn tpr_gap_hand_fixture() {
        // group 1: class0 2/2 hit, class1 1/2 hit; group 0: class0 1/2, class1 1/2
        let scores = [0.1, 0.2, 0.9, 0.2, 0.1, 0.9, 0.9, 0.2];
        let labels = [0, 0, 1, 1, 0, 0, 1, 1];
        let groups = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let p = binary_preds(&scores, &labels, &groups);
        let t = tpr_gap(&p, 0).unwrap();
        assert_eq!(t.per_class, vec![Some(0.5), Some(0.0)]);
        assert!((t.aggregate - 0.125f64.sqrt() * 100.0).abs() < 1e-12);
        assert!((t.aggregate - 35.36).abs() < 0.01);

        let swapped: Vec<f64> = groups.iter().map(|g| 1.0 - g).collect();
        let s = tpr_gap(&binary_preds(&scores, &labels, &swapped), 0).unwrap();
        assert_eq!(s.per_class, vec![Some(-0.5), Some(0.0)]);
        assert_eq!(s.aggregate, t.aggregate);
    }

    #[test]
    fn identical_groups_have_zero_gaps() {
        let scores = [0.1, 0.7, 0.4, 0.1, 0.7, 0.4];
        let labels = [0, 1, 1, 0, 1, 1];
        let groups = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let p = binary_preds(&scores, &labels, &groups);
        assert_eq!(tpr_gap(&p, 0).unwrap().aggregate, 0.0);
        assert_eq!(mcdp_gap(&p, 0).unwrap().aggregate, 0.0);
    }

    #[test]
    fn tpr_excludes_classes_without_positives() {
        let p = binary_preds(&[0.9, 0.8, 0.1, 0.7], &[1, 1, 0, 1], &[1.0, 0.0, 1.0, 0.0]);
        let t = tpr_gap(&p, 0).unwrap();
        assert_eq!(t.excluded, vec![0]);
        assert_eq!(t.per_class[0], None);
        let p = binary_preds(&[0.9, 0.8], &[1, 1], &[1.0, 1.0]);
        assert!(matches!(tpr_gap(&p, 0), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn mcdp_fixtures() {
        let p = binary_preds(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0], &[1.0, 1.0, 0.0, 0.0]);
        let m = mcdp_gap(&p, 0).unwrap();
        assert_eq!(m.per_class[1], 1.0);
        assert_eq!(m.aggregate, 100.0);

        let p = binary_preds(&[0.1, 0.9, 0.5], &[0, 1, 0], &[1.0, 1.0, 0.0]);
        let m = mcdp_gap(&p, 0).unwrap();
        assert_eq!(m.per_class[1], 0.5);
        assert_eq!(ks_brute(&[0.1, 0.9], &[0.5]), 0.5);

        let p = binary_preds(&[0.1, 0.9], &[0, 1], &[1.0, 1.0]);
        assert!(matches!(mcdp_gap(&p, 0), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn multiclass_mcdp_uses_first_k_minus_one() {
        let probs = vec![
            0.7, 0.2, 0.1, //
            0.6, 0.3, 0.1, //
            0.1, 0.2, 0.7, //
            0.2, 0.1, 0.7,
        ];
        let z = SampleMatrix::column(vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let p = PredictionSet::new(3, probs, vec![0, 1, 2, 2], z).unwrap();
        let m = mcdp_gap(&p, 0).unwrap();
        let expect = 100.0 * ((m.per_class[0].powi(2) + m.per_class[1].powi(2)) / 2.0).sqrt();
        assert_eq!(m.aggregate, expect);
    }

    #[test]
    fn non_binary_sensitive_column_is_rejected() {
        let p = binary_preds(&[0.1, 0.9], &[0, 1], &[0.0, 0.5]);
        assert!(matches!(mcdp_gap(&p, 0), Err(Error::MetricUndefined(_))));
    }

    #[test]
    fn audit_aggregates_recompute() {
        let scores = [0.1, 0.2, 0.9, 0.2, 0.1, 0.9, 0.9, 0.2, 0.6, 0.4];
        let labels = [0, 0, 1, 1, 0, 0, 1, 1, 1, 0];
        let z = SampleMatrix::new(
            10,
            2,
            vec![1., 0., 1., 1., 1., 0., 1., 1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 0., 0., 1.],
        )
        .unwrap();
        let probs = scores.iter().flat_map(|&s| [1.0 - s, s]).collect();
        let p = PredictionSet::new(2, probs, labels.to_vec(), z).unwrap();
        let r = audit(&p, &[]).unwrap();
        assert_eq!(r.per_attribute.len(), 2);
        let (t, m) = r.recomputed_aggregates();
        assert!((t - r.tpr_gap).abs() < 1e-9);
        assert!((m - r.mcdp_gap).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn ks_merge_equals_brute_force(
            a in proptest::collection::vec(0u8..20, 1..30),
            b in proptest::collection::vec(0u8..20, 1..30),
        ) {
            let a: Vec<f64> = a.iter().map(|v| *v as f64 / 20.0).collect();
            let b: Vec<f64> = b.iter().map(|v| *v as f64 / 20.0).collect();
            prop_assert_eq!(ks_distance(&a, &b), ks_brute(&a, &b));
        }

        #[test]
        fn ks_is_invariant_under_monotone_maps(
            a in proptest::collection::vec(0.0f64..1.0, 1..30),
            b in proptest::collection::vec(0.0f64..1.0, 1..30),
        ) {
            let f = |v: &f64| (3.0 * v).exp() - 0.5;
            let fa: Vec<f64> = a.iter().map(f).collect();
            let fb: Vec<f64> = b.iter().map(f).collect();
            prop_assert_eq!(ks_distance(&a, &b), ks_distance(&fa, &fb));
        }

        #[test]
        fn metrics_are_permutation_invariant_and_bounded(
            rows in proptest::collection::vec((0.0f64..1.0, 0usize..2, 0u8..2), 4..40),
            shift in 0usize..40,
        ) {
            let scores: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
            let groups: Vec<f64> = rows.iter().map(|r| r.2 as f64).collect();
            let n = rows.len();
            let rot = |v: &[f64]| -> Vec<f64> { (0..n).map(|i| v[(i + shift) % n]).collect() };
            let p = binary_preds(&scores, &labels, &groups);
            let lab_r: Vec<usize> = (0..n).map(|i| labels[(i + shift) % n]).collect();
            let q = binary_preds(&rot(&scores), &lab_r, &rot(&groups));
            prop_assert_eq!(accuracy(&p), accuracy(&q));
            if let Ok(m) = mcdp_gap(&p, 0) {
                prop_assert_eq!(m.clone(), mcdp_gap(&q, 0).unwrap());
                prop_assert!(m.per_class.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!((0.0..=100.0).contains(&m.aggregate));
            }
            if let Ok(t) = tpr_gap(&p, 0) {
                let u = tpr_gap(&q, 0).unwrap();
                prop_assert_eq!(t.per_class.clone(), u.per_class);
                prop_assert!(t.per_class.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
                prop_assert!((0.0..=100.0).contains(&t.aggregate));
            }
        }
    }
}
