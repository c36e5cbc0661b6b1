//! Unbiased distance covariance and its class-weighted conditional form.
//!
//! [`dc_naive`] averages the order-4 U-statistic kernel over every 4-subset
//! and is kept as the reference. [`dc_fast`] is the O(n²) U-centered form
//! used everywhere else; the two agree to rounding error. [`dc_fast_node`]
//! and [`dc_conditional_node`] compute the same quantities inside an
//! autodiff graph so they can serve as training penalties.
//!
//! Estimates can be negative. Nothing is clamped.

use serde::Serialize;

use crate::autodiff::tensor::{distance_matrix, inner, u_center_in_place};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Largest sample the O(n⁴) reference estimator accepts.
pub const NAIVE_MAX_SAMPLES: usize = 64;

/// n observations of a d-dimensional variable, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl SampleMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::dim(format!("sample matrix must be non-empty, got {n}x{d}")));
        }
        if values.len() != n * d {
            return Err(Error::dim(format!(
                "{n}x{d} sample matrix needs {} values, got {}",
                n * d,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("sample matrix contains non-finite values".into()));
        }
        Ok(SampleMatrix { n, d, values })
    }

    /// A single-column matrix.
    pub fn column(values: Vec<f64>) -> Result<Self> {
        Self::new(values.len(), 1, values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.d + j]
    }

    /// Rows at `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> SampleMatrix {
        let mut values = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        SampleMatrix {
            n: idx.len(),
            d: self.d,
            values,
        }
    }

    /// Columns at `cols`, in that order.
    pub fn select_columns(&self, cols: &[usize]) -> SampleMatrix {
        let mut values = Vec::with_capacity(self.n * cols.len());
        for i in 0..self.n {
            for &c in cols {
                values.push(self.get(i, c));
            }
        }
        SampleMatrix {
            n: self.n,
            d: cols.len(),
            values,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::raw(vec![self.n, self.d], self.values.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, d) = t.expect_matrix("sample matrix")?;
        Self::new(n, d, t.data().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DcMethod {
    Naive,
    Fast,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DcEstimate {
    pub value: f64,
    pub n_used: usize,
    pub method: DcMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassTerm {
    pub class: usize,
    pub n_k: usize,
    pub weight: f64,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalDcEstimate {
    pub value: f64,
    pub per_class: Vec<ClassTerm>,
    pub skipped_classes: Vec<usize>,
}

/// One-hot encoding of integer labels in `0..k`.
pub fn one_hot(labels: &[usize], k: usize) -> Result<SampleMatrix> {
    if k == 0 {
        return Err(Error::Encoding("class count must be positive".into()));
    }
    let mut values = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Encoding(format!(
                "label {y} at position {i} is outside 0..{k}"
            )));
        }
        values[i * k + y] = 1.0;
    }
    SampleMatrix::new(labels.len(), k, values)
}

fn check_pair(z: &SampleMatrix, x_n: usize) -> Result<usize> {
    if z.n() != x_n {
        return Err(Error::dim(format!(
            "paired samples differ in length: {} vs {x_n}",
            z.n()
        )));
    }
    if x_n < 4 {
        return Err(Error::InsufficientSamples(format!(
            "distance covariance needs at least 4 samples, got {x_n}"
        )));
    }
    Ok(x_n)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Kernel of the order-4 U-statistic on four points with distance matrices
/// `a` (first variable) and `b` (second), both 4×4.
fn kernel4(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> f64 {
    let mut paired = 0.0;
    let mut sum_a = 0.0;
    let mut sum_b = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                paired += a[i][j] * b[i][j];
                sum_a += a[i][j];
                sum_b += b[i][j];
            }
        }
    }
    let mut rows = 0.0;
    for i in 0..4 {
        let ra: f64 = (0..4).filter(|&j| j != i).map(|j| a[i][j]).sum();
        let rb: f64 = (0..4).filter(|&j| j != i).map(|j| b[i][j]).sum();
        rows += ra * rb;
    }
    paired / 4.0 + sum_a * sum_b / 24.0 - rows / 4.0
}

fn binom4(n: usize) -> f64 {
    if n < 4 {
        return 0.0;
    }
    let n = n as u128;
    (n * (n - 1) * (n - 2) * (n - 3) / 24) as f64
}

/// Reference estimator: the kernel averaged over all C(n,4) subsets.
pub fn dc_naive(z: &SampleMatrix, x: &SampleMatrix) -> Result<DcEstimate> {
    let n = check_pair(z, x.n())?;
    if n > NAIVE_MAX_SAMPLES {
        return Err(Error::OracleSize {
            max: NAIVE_MAX_SAMPLES,
            got: n,
        });
    }
    let mut total = 0.0;
    let mut idx = [0usize; 4];
    let mut a = [[0.0; 4]; 4];
    let mut b = [[0.0; 4]; 4];
    for i1 in 0..n {
        idx[0] = i1;
        for i2 in (i1 + 1)..n {
            idx[1] = i2;
            for i3 in (i2 + 1)..n {
                idx[2] = i3;
                for i4 in (i3 + 1)..n {
                    idx[3] = i4;
                    for p in 0..4 {
                        for q in 0..4 {
                            a[p][q] = euclid(z.row(idx[p]), z.row(idx[q]));
                            b[p][q] = euclid(x.row(idx[p]), x.row(idx[q]));
                        }
                    }
                    total += kernel4(&a, &b);
                }
            }
        }
    }
    Ok(DcEstimate {
        value: total / binom4(n),
        n_used: n,
        method: DcMethod::Naive,
    })
}

fn dc_scale(n: usize) -> f64 {
    let nf = n as f64;
    1.0 / (nf * (nf - 3.0))
}

fn centered_distances(m: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut a = distance_matrix(m, n, d);
    u_center_in_place(&mut a, n);
    a
}

/// O(n²) estimator via U-centered distance matrices.
pub fn dc_fast(z: &SampleMatrix, x: &SampleMatrix) -> Result<DcEstimate> {
    let n = check_pair(z, x.n())?;
    let a = centered_distances(z.values(), n, z.d());
    let b = centered_distances(x.values(), n, x.d());
    Ok(DcEstimate {
        value: inner(&a, &b) * dc_scale(n),
        n_used: n,
        method: DcMethod::Fast,
    })
}

/// Differentiable estimate of DC(z, x) with `z` held constant.
pub fn dc_fast_node(g: &mut Graph, z: &SampleMatrix, x: Var) -> Result<Var> {
    let (n, _) = g.value(x).expect_matrix("dc_fast_node")?;
    check_pair(z, n)?;
    let zc = centered_distances(z.values(), n, z.d());
    let zc = g.constant(Tensor::raw(vec![n, n], zc));
    let dx = g.pairwise_distances(x)?;
    let xc = g.u_center(dx)?;
    let prod = g.mul(xc, zc)?;
    let s = g.sum(prod)?;
    g.scale(s, dc_scale(n))
}

/// Per-class sample indices and the weights `C(n_k,4)/Σ_j C(n_j,4)` over
/// classes with at least 4 members.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPartition {
    pub members: Vec<Vec<usize>>,
    pub included: Vec<(usize, f64)>,
    pub skipped: Vec<usize>,
}

pub fn partition_by_class(y: &[usize], k: usize) -> Result<ClassPartition> {
    let mut members = vec![Vec::new(); k];
    for (i, &label) in y.iter().enumerate() {
        if label >= k {
            return Err(Error::Encoding(format!("label {label} is outside 0..{k}")));
        }
        members[label].push(i);
    }
    let total: f64 = members.iter().map(|m| binom4(m.len())).sum();
    if total == 0.0 {
        let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
        return Err(Error::InsufficientSamples(format!(
            "every class has fewer than 4 samples (class sizes {sizes:?})"
        )));
    }
    let mut included = Vec::new();
    let mut skipped = Vec::new();
    for (c, m) in members.iter().enumerate() {
        if m.len() >= 4 {
            included.push((c, binom4(m.len()) / total));
        } else {
            skipped.push(c);
        }
    }
    Ok(ClassPartition {
        members,
        included,
        skipped,
    })
}

/// Weighted conditional distance covariance DC(z, x | y).
pub fn dc_conditional(
    z: &SampleMatrix,
    x: &SampleMatrix,
    y: &[usize],
    k: usize,
) -> Result<ConditionalDcEstimate> {
    if z.n() != x.n() || y.len() != x.n() {
        return Err(Error::dim("z, x and y must have the same number of samples"));
    }
    let part = partition_by_class(y, k)?;
    let mut value = 0.0;
    let mut per_class = Vec::with_capacity(part.included.len());
    for &(c, w) in &part.included {
        let idx = &part.members[c];
        let est = dc_fast(&z.select_rows(idx), &x.select_rows(idx))?.value;
        value += w * est;
        per_class.push(ClassTerm {
            class: c,
            n_k: idx.len(),
            weight: w,
            estimate: est,
        });
    }
    Ok(ConditionalDcEstimate {
        value,
        per_class,
        skipped_classes: part.skipped,
    })
}

/// Differentiable DC(z, x | y); also returns the class partition used.
pub fn dc_conditional_node(
    g: &mut Graph,
    z: &SampleMatrix,
    x: Var,
    y: &[usize],
    k: usize,
) -> Result<(Var, ClassPartition)> {
    let (n, _) = g.value(x).expect_matrix("dc_conditional_node")?;
    if z.n() != n || y.len() != n {
        return Err(Error::dim("z, x and y must have the same number of samples"));
    }
    let part = partition_by_class(y, k)?;
    let mut acc: Option<Var> = None;
    for &(c, w) in &part.included {
        let idx = &part.members[c];
        let xs = g.select_rows(x, idx)?;
        let term = dc_fast_node(g, &z.select_rows(idx), xs)?;
        let term = g.scale(term, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    // partition_by_class guarantees at least one included class
    Ok((acc.expect("non-empty partition"), part))
}
