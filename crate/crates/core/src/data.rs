//! Datasets: CSV and representation-matrix ingestion, splits, minibatches,
//! and synthetic generators with known structure.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::dependence::SampleMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    pub params: BTreeMap<String, f64>,
    /// Named ground-truth directions in feature space.
    pub directions: BTreeMap<String, Vec<f64>>,
}

/// Features `x` (n×p), labels `y` in `0..k`, sensitive attributes `z` (n×d).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub x: SampleMatrix,
    pub y: Vec<usize>,
    pub z: SampleMatrix,
    pub k: usize,
    /// Columns rescaled by [`Splits::standardize`]: all of them, except
    /// that CSV ingestion keeps only the schema's numeric columns.
    pub numeric_columns: Vec<usize>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(x: SampleMatrix, y: Vec<usize>, z: SampleMatrix, k: usize) -> Result<Self> {
        if x.n() != y.len() || z.n() != y.len() {
            return Err(Error::dim(format!(
                "x has {} rows, y {} labels, z {} rows",
                x.n(),
                y.len(),
                z.n()
            )));
        }
        if let Some(bad) = y.iter().find(|&&v| v >= k) {
            return Err(Error::Encoding(format!("label {bad} is outside 0..{k}")));
        }
        Ok(LabeledDataset {
            numeric_columns: (0..x.d()).collect(),
            x,
            y,
            z,
            k,
            provenance: Provenance::default(),
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.d()
    }

    pub fn d(&self) -> usize {
        self.z.d()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            z: self.z.select_rows(idx),
            k: self.k,
            numeric_columns: self.numeric_columns.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Same labels and attributes with replaced features.
    pub fn with_features(&self, x: SampleMatrix) -> Result<LabeledDataset> {
        let mut out = LabeledDataset::new(x, self.y.clone(), self.z.clone(), self.k)?;
        out.provenance = self.provenance.clone();
        Ok(out)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion

#[derive(Debug, Clone, PartialEq)]
pub enum SensitiveEncoding {
    /// 1.0 when the value equals `positive`, else 0.0.
    Binary { positive: String },
    OneHot { vocab: Vec<String> },
    Numeric,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnRole {
    Numeric,
    Categorical { vocab: Vec<String> },
    Target { vocab: Vec<String> },
    Sensitive(SensitiveEncoding),
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSpec {
    pub name: String,
    pub role: ColumnRole,
}

/// Column roles for a CSV file, in file order.
///
/// Text form, one column per line (`#` comments allowed):
///
/// ```text
/// numeric age
/// categorical workclass Private,Self-emp-not-inc,...
/// target income <=50K,>50K
/// sensitive sex binary Male
/// sensitive race onehot White,Black,Other
/// ignore fnlwgt
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn parse(text: &str) -> Result<Schema> {
        let mut columns = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let vocab = |s: &str| -> Vec<String> { s.split(',').map(|v| v.trim().to_string()).collect() };
            let bad = || Error::Config(format!("schema line {}: cannot parse {line:?}", lineno + 1));
            let (name, role) = match f.as_slice() {
                ["numeric", name] => (name, ColumnRole::Numeric),
                ["ignore", name] => (name, ColumnRole::Ignore),
                ["categorical", name, v] => (name, ColumnRole::Categorical { vocab: vocab(v) }),
                ["target", name, v] => (name, ColumnRole::Target { vocab: vocab(v) }),
                ["sensitive", name, "binary", pos] => (
                    name,
                    ColumnRole::Sensitive(SensitiveEncoding::Binary {
                        positive: pos.to_string(),
                    }),
                ),
                ["sensitive", name, "onehot", v] => {
                    (name, ColumnRole::Sensitive(SensitiveEncoding::OneHot { vocab: vocab(v) }))
                }
                ["sensitive", name, "numeric"] => (name, ColumnRole::Sensitive(SensitiveEncoding::Numeric)),
                _ => return Err(bad()),
            };
            columns.push(ColumnSpec {
                name: name.to_string(),
                role,
            });
        }
        let schema = Schema { columns };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let targets = self
            .columns
            .iter()
            .filter(|c| matches!(c.role, ColumnRole::Target { .. }))
            .count();
        if targets != 1 {
            return Err(Error::Config(format!("schema needs exactly one target column, found {targets}")));
        }
        if !self.columns.iter().any(|c| matches!(c.role, ColumnRole::Sensitive(_))) {
            return Err(Error::Config("schema needs at least one sensitive column".into()));
        }
        for c in &self.columns {
            let empty = match &c.role {
                ColumnRole::Categorical { vocab } | ColumnRole::Target { vocab } => vocab.is_empty(),
                ColumnRole::Sensitive(SensitiveEncoding::OneHot { vocab }) => vocab.is_empty(),
                _ => false,
            };
            if empty || c.role_vocab().is_some_and(|v| v.iter().any(String::is_empty)) {
                return Err(Error::Config(format!("column {:?} has an empty vocabulary entry", c.name)));
            }
        }
        Ok(())
    }

    /// Width of the expanded feature matrix.
    pub fn feature_width(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match &c.role {
                ColumnRole::Numeric => 1,
                ColumnRole::Categorical { vocab } => vocab.len(),
                _ => 0,
            })
            .sum()
    }
}

impl ColumnSpec {
    fn role_vocab(&self) -> Option<&[String]> {
        match &self.role {
            ColumnRole::Categorical { vocab } | ColumnRole::Target { vocab } => Some(vocab),
            ColumnRole::Sensitive(SensitiveEncoding::OneHot { vocab }) => Some(vocab),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CsvOptions {
    /// Standardize numeric columns with whole-file statistics. For split
    /// data prefer [`Splits::standardize`], which uses train statistics.
    pub standardize: bool,
    /// Unknown categories become all-zero rows (with a warning) instead of errors.
    pub lenient: bool,
}

fn is_missing(v: &str) -> bool {
    v.is_empty() || v == "?" || v.eq_ignore_ascii_case("na") || v.eq_ignore_ascii_case("nan")
}

/// Reads a headered CSV according to `schema`. Rows keep file order.
pub fn ingest_csv_reader(input: impl Read, schema: &Schema, opts: CsvOptions, source: &str) -> Result<LabeledDataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers()?.clone();
    let mut positions = Vec::with_capacity(schema.columns.len());
    for c in &schema.columns {
        let pos = header
            .iter()
            .position(|h| h == c.name)
            .ok_or_else(|| Error::Config(format!("CSV has no column {:?}", c.name)))?;
        positions.push(pos);
    }
    let p = schema.feature_width();
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut z = Vec::new();
    let mut k = 0;
    let mut numeric_columns = Vec::new();
    {
        let mut off = 0;
        for c in &schema.columns {
            match &c.role {
                ColumnRole::Numeric => {
                    numeric_columns.push(off);
                    off += 1;
                }
                ColumnRole::Categorical { vocab } => off += vocab.len(),
                ColumnRole::Target { vocab } => k = vocab.len(),
                _ => {}
            }
        }
    }
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (c, &pos) in schema.columns.iter().zip(&positions) {
            let v = rec.get(pos).unwrap_or("");
            if matches!(c.role, ColumnRole::Ignore) {
                continue;
            }
            if is_missing(v) {
                return Err(Error::MissingValue {
                    column: c.name.clone(),
                    row,
                });
            }
            let lookup = |vocab: &[String]| vocab.iter().position(|w| w == v);
            let unknown = || Error::Vocabulary {
                column: c.name.clone(),
                value: v.to_string(),
            };
            match &c.role {
                ColumnRole::Numeric => x.push(
                    v.parse::<f64>()
                        .map_err(|_| Error::Format(format!("row {row}, column {:?}: {v:?} is not a number", c.name)))?,
                ),
                ColumnRole::Categorical { vocab } => {
                    let mut block = vec![0.0; vocab.len()];
                    match lookup(vocab) {
                        Some(i) => block[i] = 1.0,
                        None if opts.lenient => {
                            log::warn!("row {row}: unknown category {v:?} in column {:?}", c.name)
                        }
                        None => return Err(unknown()),
                    }
                    x.extend(block);
                }
                ColumnRole::Target { vocab } => y.push(lookup(vocab).ok_or_else(unknown)?),
                ColumnRole::Sensitive(SensitiveEncoding::Binary { positive }) => {
                    z.push(if v == positive { 1.0 } else { 0.0 })
                }
                ColumnRole::Sensitive(SensitiveEncoding::OneHot { vocab }) => {
                    let mut block = vec![0.0; vocab.len()];
                    match lookup(vocab) {
                        Some(i) => block[i] = 1.0,
                        None if opts.lenient => {
                            log::warn!("row {row}: unknown category {v:?} in column {:?}", c.name)
                        }
                        None => return Err(unknown()),
                    }
                    z.extend(block);
                }
                ColumnRole::Sensitive(SensitiveEncoding::Numeric) => z.push(
                    v.parse::<f64>()
                        .map_err(|_| Error::Format(format!("row {row}, column {:?}: {v:?} is not a number", c.name)))?,
                ),
                ColumnRole::Ignore => unreachable!(),
            }
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::Format("CSV has no data rows".into()));
    }
    let d = z.len() / n;
    let mut ds = LabeledDataset::new(SampleMatrix::new(n, p, x)?, y, SampleMatrix::new(n, d, z)?, k)?;
    ds.numeric_columns = numeric_columns;
    ds.provenance.source = source.to_string();
    if opts.standardize {
        let stats = ColumnStats::fit(&ds.x, &ds.numeric_columns);
        stats.apply(&mut ds.x);
    }
    Ok(ds)
}

pub fn ingest_csv(path: &Path, schema: &Schema, opts: CsvOptions) -> Result<LabeledDataset> {
    let f = std::fs::File::open(path)?;
    ingest_csv_reader(f, schema, opts, &format!("csv:{}", path.display()))
}

/// Per-column mean and standard deviation for a subset of columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub columns: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    pub fn fit(x: &SampleMatrix, columns: &[usize]) -> ColumnStats {
        let n = x.n() as f64;
        let mut mean = Vec::with_capacity(columns.len());
        let mut std = Vec::with_capacity(columns.len());
        for &c in columns {
            let m = (0..x.n()).map(|i| x.get(i, c)).sum::<f64>() / n;
            let v = (0..x.n()).map(|i| (x.get(i, c) - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            // constant columns are centered only
            std.push(if v > 0.0 { v.sqrt() } else { 1.0 });
        }
        ColumnStats {
            columns: columns.to_vec(),
            mean,
            std,
        }
    }

    pub fn apply(&self, x: &mut SampleMatrix) {
        let (n, d) = (x.n(), x.d());
        let mut values = x.values().to_vec();
        for (k, &c) in self.columns.iter().enumerate() {
            for i in 0..n {
                values[i * d + c] = (values[i * d + c] - self.mean[k]) / self.std[k];
            }
        }
        *x = SampleMatrix::new(n, d, values).expect("same shape");
    }
}

// ---------------------------------------------------------------------------
// Representation-matrix files

/// Writes `DFLMAT v1 n=.. p=.. d=.. K=..\n` followed by little-endian X (f64),
/// Z (f64) and Y (i32).
pub fn write_matrix(ds: &LabeledDataset, mut out: impl Write) -> Result<()> {
    let header = format!("DFLMAT v1 n={} p={} d={} K={}\n", ds.n(), ds.p(), ds.d(), ds.k);
    let mut buf = header.into_bytes();
    buf.reserve(8 * (ds.x.values().len() + ds.z.values().len()) + 4 * ds.n());
    for v in ds.x.values().iter().chain(ds.z.values()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.y {
        let y = i32::try_from(y).map_err(|_| Error::Format(format!("label {y} does not fit in i32")))?;
        buf.extend_from_slice(&y.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix(mut input: impl Read) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let f: Vec<&str> = header.split(' ').collect();
    let field = |s: &str, key: &str| -> Result<usize> {
        s.strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad header field {s:?}, expected {key}=<int>")))
    };
    let (n, p, d, k) = match f.as_slice() {
        ["DFLMAT", "v1", n, p, d, k] => (field(n, "n")?, field(p, "p")?, field(d, "d")?, field(k, "K")?),
        _ => return Err(Error::Format(format!("bad header {header:?}"))),
    };
    let body = &bytes[nl + 1..];
    let expected = 8 * n * (p + d) + 4 * n;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, header n={n} p={p} d={d} implies {expected}",
            body.len()
        )));
    }
    let f64s = |b: &[u8]| -> Vec<f64> {
        b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let x = f64s(&body[..8 * n * p]);
    let z = f64s(&body[8 * n * p..8 * n * (p + d)]);
    let mut y = Vec::with_capacity(n);
    for c in body[8 * n * (p + d)..].chunks_exact(4) {
        let v = i32::from_le_bytes(c.try_into().unwrap());
        if v < 0 {
            return Err(Error::Format(format!("negative label {v}")));
        }
        y.push(v as usize);
    }
    let mut ds = LabeledDataset::new(SampleMatrix::new(n, p, x)?, y, SampleMatrix::new(n, d, z)?, k)
        .map_err(|e| Error::Format(e.to_string()))?;
    ds.provenance.source = "matrix".into();
    Ok(ds)
}

pub fn ingest_matrix(path: &Path) -> Result<LabeledDataset> {
    let mut ds = read_matrix(std::fs::File::open(path)?)?;
    ds.provenance.source = format!("matrix:{}", path.display());
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Splits and batches

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl Splits {
    /// Standardizes numeric feature columns of every split with train statistics.
    pub fn standardize(&mut self) -> ColumnStats {
        let stats = ColumnStats::fit(&self.train.x, &self.train.numeric_columns);
        for part in [&mut self.train, &mut self.val, &mut self.test] {
            stats.apply(&mut part.x);
        }
        stats
    }
}

fn split_sizes(n: usize, f: [f64; 3]) -> [usize; 3] {
    let a = (n as f64 * f[0]).round() as usize;
    let b = ((n as f64 * f[1]).round() as usize).min(n - a.min(n));
    let a = a.min(n);
    [a, b, n - a - b]
}

/// Seeded shuffle then contiguous train/val/test partition. With `stratify`,
/// each class is partitioned separately so class proportions carry over.
pub fn split(ds: &LabeledDataset, fractions: [f64; 3], seed: u64, stratify: bool) -> Result<Splits> {
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    if stratify {
        let mut by_class = vec![Vec::new(); ds.k];
        for (i, &y) in ds.y.iter().enumerate() {
            by_class[y].push(i);
        }
        for mut members in by_class {
            members.shuffle(&mut rng);
            let s = split_sizes(members.len(), fractions);
            parts[0].extend_from_slice(&members[..s[0]]);
            parts[1].extend_from_slice(&members[s[0]..s[0] + s[1]]);
            parts[2].extend_from_slice(&members[s[0] + s[1]..]);
        }
        for p in &mut parts {
            p.shuffle(&mut rng);
        }
    } else {
        let mut idx: Vec<usize> = (0..ds.n()).collect();
        idx.shuffle(&mut rng);
        let s = split_sizes(ds.n(), fractions);
        parts[0] = idx[..s[0]].to_vec();
        parts[1] = idx[s[0]..s[0] + s[1]].to_vec();
        parts[2] = idx[s[0] + s[1]..].to_vec();
    }
    if parts.iter().any(Vec::is_empty) {
        return Err(Error::Config(format!(
            "split of {} samples by {fractions:?} leaves an empty part",
            ds.n()
        )));
    }
    Ok(Splits {
        train: ds.subset(&parts[0]),
        val: ds.subset(&parts[1]),
        test: ds.subset(&parts[2]),
    })
}

/// One epoch of minibatch index lists.
///
/// Indices are a seeded permutation of `0..n`. With `stratified`, classes
/// are interleaved in proportion so every batch mirrors the class mix. A
/// final short batch is kept only if some class has at least 4 members in it.
pub fn batches(labels: &[usize], k: usize, batch_size: usize, seed: u64, stratified: bool) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
    }
    if batch_size > n {
        return Err(Error::Config(format!("batch size {batch_size} exceeds {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<usize> = if stratified {
        let mut by_class = vec![Vec::new(); k];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
        for (c, members) in by_class.iter_mut().enumerate() {
            members.shuffle(&mut rng);
            let m = members.len() as f64;
            for (j, &i) in members.iter().enumerate() {
                keyed.push(((j as f64 + 0.5) / m, c, i));
            }
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        keyed.into_iter().map(|(_, _, i)| i).collect()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    };
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if let Some(last) = out.last() {
        if last.len() < batch_size {
            let mut counts = vec![0usize; k];
            for &i in last {
                counts[labels[i]] += 1;
            }
            if counts.iter().all(|&c| c < 4) {
                out.pop();
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic generators

/// The four orthogonal directions of the toy model in ℝ⁴.
pub fn toy_directions() -> [[f64; 4]; 4] {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    [
        [h, h, 0.0, 0.0],
        [h, -h, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sensitive value of the toy model without noise:
/// `sin(β₁ᵀx) + exp(−β₂ᵀx)`.
pub fn toy_signal(x: &[f64]) -> f64 {
    let b = toy_directions();
    dot(&b[0], x).sin() + (-dot(&b[1], x)).exp()
}

/// X ~ N(0, I₄); Z = sin(β₁ᵀX) + exp(−β₂ᵀX) + ε with ε ~ N(0, noise_sd²);
/// Y = 1[β₃ᵀX + β₄ᵀX > 0], a rule living entirely in the fair subspace.
pub fn gen_toy_sdr(n: usize, noise_sd: f64, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::Config("toy generator needs n ≥ 1".into()));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::Config(format!("noise_sd must be non-negative, got {noise_sd}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = toy_directions();
    let mut x = Vec::with_capacity(4 * n);
    let mut z = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let eps: f64 = StandardNormal.sample(&mut rng);
        z.push(toy_signal(&row) + noise_sd * eps);
        y.push(usize::from(dot(&b[2], &row) + dot(&b[3], &row) > 0.0));
        x.extend_from_slice(&row);
    }
    let mut ds = LabeledDataset::new(SampleMatrix::new(n, 4, x)?, y, SampleMatrix::column(z)?, 2)?;
    ds.provenance = Provenance {
        source: "synth:toy".into(),
        seed: Some(seed),
        params: BTreeMap::from([("n".into(), n as f64), ("noise_sd".into(), noise_sd)]),
        directions: (0..4).map(|i| (format!("beta{}", i + 1), b[i].to_vec())).collect(),
    };
    Ok(ds)
}

/// Joint probabilities of (Z, Y) cells, ordered
/// `[(z=1,y=1), (z=0,y=1), (z=1,y=0), (z=0,y=0)]`.
pub const BIASED_COMPOSITION: [f64; 4] = [0.4, 0.1, 0.1, 0.4];
pub const BALANCED_COMPOSITION: [f64; 4] = [0.25; 4];

/// Mean shift of the label coordinate.
pub const LABEL_SIGNAL: f64 = 1.0;

/// Binary Y and Z drawn with the 40/10/10/40 joint composition.
/// Feature 0 is `LABEL_SIGNAL·(2y−1) + N(0,1)`, feature 1 is
/// `bias_strength·(2z−1) + N(0,1)`, the rest are pure noise.
pub fn gen_biased_classification(n: usize, p: usize, bias_strength: f64, seed: u64) -> Result<LabeledDataset> {
    gen_biased_with_composition(n, p, bias_strength, seed, BIASED_COMPOSITION)
}

/// [`gen_biased_classification`] with an explicit (Z, Y) composition.
pub fn gen_biased_with_composition(
    n: usize,
    p: usize,
    bias_strength: f64,
    seed: u64,
    composition: [f64; 4],
) -> Result<LabeledDataset> {
    if p < 4 {
        return Err(Error::Config(format!("biased generator needs p ≥ 4, got {p}")));
    }
    if n == 0 {
        return Err(Error::Config("biased generator needs n ≥ 1".into()));
    }
    if composition.iter().any(|c| *c < 0.0) || (composition.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("composition {composition:?} is not a distribution")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = [(1u8, 1usize), (0, 1), (1, 0), (0, 0)];
    let mut x = Vec::with_capacity(n * p);
    let mut z = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut cell = cells[3];
        for (c, &w) in cells.iter().zip(&composition) {
            acc += w;
            if u < acc {
                cell = *c;
                break;
            }
        }
        let (zi, yi) = cell;
        for j in 0..p {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let shift = match j {
                0 => LABEL_SIGNAL * (2.0 * yi as f64 - 1.0),
                1 => bias_strength * (2.0 * zi as f64 - 1.0),
                _ => 0.0,
            };
            x.push(shift + noise);
        }
        z.push(zi as f64);
        y.push(yi);
    }
    let mut ds = LabeledDataset::new(SampleMatrix::new(n, p, x)?, y, SampleMatrix::column(z)?, 2)?;
    let unit = |i: usize| -> Vec<f64> { (0..p).map(|j| if j == i { 1.0 } else { 0.0 }).collect() };
    ds.provenance = Provenance {
        source: "synth:biased".into(),
        seed: Some(seed),
        params: BTreeMap::from([
            ("n".into(), n as f64),
            ("p".into(), p as f64),
            ("bias_strength".into(), bias_strength),
            ("label_signal".into(), LABEL_SIGNAL),
            ("share_z1_y1".into(), composition[0]),
            ("share_z0_y1".into(), composition[1]),
            ("share_z1_y0".into(), composition[2]),
            ("share_z0_y0".into(), composition[3]),
        ]),
        directions: BTreeMap::from([("label".into(), unit(0)), ("sensitive".into(), unit(1))]),
    };
    Ok(ds)
}
