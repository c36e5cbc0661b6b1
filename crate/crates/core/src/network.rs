//! The representation network and classifier head, plus the one-hidden-layer
//! probe network, and the binary model file format.
//!
//! Layout of the dense network for a [`NetworkSpec`] with growth rate `g`:
//!
//! ```text
//! stem      Linear(p → 2g)
//! block b   L × [ Linear(w → 4g) → ReLU → Linear(4g → g) ], each appended to the features
//! trans b   BatchNorm(w) → Linear(w → ceil(w·reduction))      (after blocks 1 and 2)
//! final     BatchNorm(w) → Linear(w → p)                       latent representation
//! head      Linear(p → K) → log-softmax
//! ```
//!
//! with `L = max(1, floor((depth − 4)/3))` layers per block.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchMoments, BnState, Graph, Mode, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_classes: usize,
    pub growth_rate: usize,
    pub depth: usize,
    pub reduction: f64,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 {
            return fail("input_dim must be positive".into());
        }
        if self.output_classes < 2 {
            return fail(format!("need at least 2 output classes, got {}", self.output_classes));
        }
        if self.growth_rate == 0 {
            return fail("growth_rate must be positive".into());
        }
        if self.depth < 4 {
            return fail(format!("depth must be at least 4, got {}", self.depth));
        }
        if !(self.reduction > 0.0 && self.reduction <= 1.0) {
            return fail(format!("reduction must lie in (0, 1], got {}", self.reduction));
        }
        Ok(())
    }

    pub fn layers_per_block(&self) -> usize {
        (self.depth.saturating_sub(4) / 3).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Architecture {
    Dense(NetworkSpec),
    /// One hidden ReLU layer; the latent representation is the input itself.
    Probe {
        input_dim: usize,
        hidden: usize,
        classes: usize,
    },
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        match self {
            Architecture::Dense(s) => s.input_dim,
            Architecture::Probe { input_dim, .. } => *input_dim,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Architecture::Dense(s) => s.output_classes,
            Architecture::Probe { classes, .. } => *classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    /// Representation network parameters.
    Theta,
    /// Classifier parameters.
    Phi,
}

impl Group {
    fn as_str(self) -> &'static str {
        match self {
            Group::Theta => "theta",
            Group::Phi => "phi",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnSite {
    pub name: String,
    pub state: BnState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    /// θ parameters first, then φ, in construction order.
    pub params: Vec<Param>,
    pub bn: Vec<BnSite>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub latent: Var,
    pub logprobs: Var,
    /// One leaf per entry of [`ModelParams::params`].
    pub param_vars: Vec<Var>,
    /// Batch moments per batch-norm site (train mode only).
    pub moments: Vec<BatchMoments>,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
    bn: Vec<BnSite>,
}

impl Builder {
    fn linear(&mut self, name: &str, group: Group, fan_in: usize, fan_out: usize) {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(&mut self.rng)).collect();
        self.params.push(Param {
            name: format!("{name}.weight"),
            group,
            value: Tensor::raw(vec![fan_in, fan_out], w),
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            group,
            value: Tensor::zeros(&[fan_out]),
        });
    }

    fn batch_norm(&mut self, name: &str, width: usize) {
        self.params.push(Param {
            name: format!("{name}.gamma"),
            group: Group::Theta,
            value: Tensor::filled(&[width], 1.0),
        });
        self.params.push(Param {
            name: format!("{name}.beta"),
            group: Group::Theta,
            value: Tensor::zeros(&[width]),
        });
        self.bn.push(BnSite {
            name: name.to_string(),
            state: BnState::new(width),
        });
    }
}

/// Builds the dense representation network and classifier head.
///
/// Weights are drawn from Normal(0, 2/fan_in), biases and batch-norm shifts
/// start at 0, batch-norm scales at 1.
pub fn build(spec: NetworkSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
        bn: Vec::new(),
    };
    let g = spec.growth_rate;
    let mut width = 2 * g;
    b.linear("stem", Group::Theta, spec.input_dim, width);
    for block in 1..=3 {
        for layer in 1..=spec.layers_per_block() {
            let prefix = format!("block{block}.layer{layer}");
            b.linear(&format!("{prefix}.fc1"), Group::Theta, width, 4 * g);
            b.linear(&format!("{prefix}.fc2"), Group::Theta, 4 * g, g);
            width += g;
        }
        if block < 3 {
            let out = transition_width(width, spec.reduction);
            b.batch_norm(&format!("trans{block}.bn"), width);
            b.linear(&format!("trans{block}.fc"), Group::Theta, width, out);
            width = out;
        }
    }
    b.batch_norm("final.bn", width);
    b.linear("final.fc", Group::Theta, width, spec.input_dim);
    b.linear("head", Group::Phi, spec.input_dim, spec.output_classes);
    Ok(ModelParams {
        arch: Architecture::Dense(spec),
        params: b.params,
        bn: b.bn,
    })
}

fn transition_width(width: usize, reduction: f64) -> usize {
    ((width as f64 * reduction).ceil() as usize).max(1)
}

/// One-hidden-layer ReLU classifier `p → hidden → K`.
pub fn build_probe(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> Result<ModelParams> {
    if input_dim == 0 || hidden == 0 || classes < 2 {
        return Err(Error::Config(format!(
            "probe needs positive input and hidden widths and ≥2 classes, got {input_dim}/{hidden}/{classes}"
        )));
    }
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
        bn: Vec::new(),
    };
    b.linear("hidden", Group::Phi, input_dim, hidden);
    b.linear("out", Group::Phi, hidden, classes);
    Ok(ModelParams {
        arch: Architecture::Probe {
            input_dim,
            hidden,
            classes,
        },
        params: b.params,
        bn: b.bn,
    })
}

impl ModelParams {
    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Builds the forward pass for a batch `x` (n × input_dim).
    ///
    /// Train mode normalizes with batch statistics and reports them in
    /// [`Forward::moments`]; nothing in `self` is modified. Use
    /// [`ModelParams::commit_moments`] to fold them into the running state.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Forward> {
        let (_, width) = g.value(x).expect_matrix("forward input")?;
        if width != self.arch.input_dim() {
            return Err(Error::dim(format!(
                "input width {width} does not match network input {}",
                self.arch.input_dim()
            )));
        }
        let param_vars: Vec<Var> = self.params.iter().map(|p| g.leaf(p.value.clone())).collect();
        let mut cursor = ParamCursor {
            vars: &param_vars,
            params: &self.params,
            next: 0,
        };
        let mut moments = Vec::new();
        let (latent, logits) = match self.arch {
            Architecture::Dense(spec) => {
                let mut bn_sites = self.bn.iter();
                let mut h = cursor.linear(g, x, "stem")?;
                for block in 1..=3 {
                    for _ in 0..spec.layers_per_block() {
                        let t = cursor.linear(g, h, "fc1")?;
                        let t = g.relu(t)?;
                        let t = cursor.linear(g, t, "fc2")?;
                        h = g.concat(&[h, t])?;
                    }
                    if block < 3 {
                        let site = bn_sites.next().expect("transition batch norm");
                        h = cursor.batch_norm(g, h, &site.state, mode, &mut moments)?;
                        h = cursor.linear(g, h, "trans")?;
                    }
                }
                let site = bn_sites.next().expect("final batch norm");
                h = cursor.batch_norm(g, h, &site.state, mode, &mut moments)?;
                let latent = cursor.linear(g, h, "final")?;
                let logits = cursor.linear(g, latent, "head")?;
                (latent, logits)
            }
            Architecture::Probe { .. } => {
                let h = cursor.linear(g, x, "hidden")?;
                let h = g.relu(h)?;
                let logits = cursor.linear(g, h, "out")?;
                (x, logits)
            }
        };
        debug_assert_eq!(cursor.next, self.params.len());
        let logprobs = g.log_softmax(logits)?;
        Ok(Forward {
            latent,
            logprobs,
            param_vars,
            moments,
        })
    }

    /// Folds train-mode batch moments into the running batch-norm state.
    pub fn commit_moments(&mut self, moments: &[BatchMoments]) {
        for (site, m) in self.bn.iter_mut().zip(moments) {
            site.state.update(m);
        }
    }

    /// Eval-mode forward on plain data; returns (latent, class probabilities).
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, Mode::Eval)?;
        let probs = g.value(out.logprobs).map(f64::exp);
        Ok((g.value(out.latent).clone(), probs))
    }
}

struct ParamCursor<'a> {
    vars: &'a [Var],
    params: &'a [Param],
    next: usize,
}

impl ParamCursor<'_> {
    fn take(&mut self, suffix: &str) -> Var {
        let p = &self.params[self.next];
        debug_assert!(p.name.ends_with(suffix), "{} !~ {suffix}", p.name);
        let v = self.vars[self.next];
        self.next += 1;
        v
    }

    fn linear(&mut self, g: &mut Graph, x: Var, _label: &str) -> Result<Var> {
        let w = self.take(".weight");
        let b = self.take(".bias");
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn batch_norm(
        &mut self,
        g: &mut Graph,
        x: Var,
        state: &BnState,
        mode: Mode,
        moments: &mut Vec<BatchMoments>,
    ) -> Result<Var> {
        let gamma = self.take(".gamma");
        let beta = self.take(".beta");
        let (y, m) = g.batch_norm(x, gamma, beta, state, mode)?;
        moments.extend(m);
        Ok(y)
    }
}

const MODEL_MAGIC: &str = "DFLMODEL v1";

/// Serializes a model: a UTF-8 header terminated by a line `end`, then raw
/// little-endian f64 data in manifest order.
///
/// ```text
/// DFLMODEL v1
/// arch dense p=4 K=2 growth=4 depth=7 reduction=0.5
/// param theta stem.weight 4x8 offset=0
/// ...
/// bn trans1.bn 12 momentum=0.1 eps=0.00001 mean_offset=... var_offset=...
/// end
/// ```
///
/// Offsets count bytes from the start of the data section.
pub fn save(model: &ModelParams, mut out: impl Write) -> Result<()> {
    let mut header = String::new();
    writeln!(header, "{MODEL_MAGIC}").unwrap();
    match model.arch {
        Architecture::Dense(s) => writeln!(
            header,
            "arch dense p={} K={} growth={} depth={} reduction={:?}",
            s.input_dim, s.output_classes, s.growth_rate, s.depth, s.reduction
        ),
        Architecture::Probe {
            input_dim,
            hidden,
            classes,
        } => writeln!(header, "arch probe p={input_dim} hidden={hidden} K={classes}"),
    }
    .unwrap();
    let mut offset = 0usize;
    let mut payload: Vec<f64> = Vec::new();
    for p in &model.params {
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        writeln!(
            header,
            "param {} {} {} offset={offset}",
            p.group.as_str(),
            p.name,
            shape.join("x")
        )
        .unwrap();
        payload.extend_from_slice(p.value.data());
        offset += 8 * p.value.len();
    }
    for site in &model.bn {
        let w = site.state.width();
        writeln!(
            header,
            "bn {} {w} momentum={:?} eps={:?} mean_offset={offset} var_offset={}",
            site.name,
            site.state.momentum,
            site.state.eps,
            offset + 8 * w
        )
        .unwrap();
        payload.extend_from_slice(&site.state.running_mean);
        payload.extend_from_slice(&site.state.running_var);
        offset += 16 * w;
    }
    header.push_str("end\n");
    out.write_all(header.as_bytes())?;
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

pub fn save_to_vec(model: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    save(model, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

fn kv<'a>(field: &'a str, key: &str) -> Result<&'a str> {
    field
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| Error::Format(format!("expected {key}=..., found {field:?}")))
}

fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad {what}: {s:?}")))
}

/// Reads a model written by [`save`].
pub fn load(mut input: impl Read) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let end = find_header_end(&bytes)?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Format("model header is not UTF-8".into()))?;
    let data = &bytes[end..];
    if data.len() % 8 != 0 {
        return Err(Error::Format("model payload is not a whole number of f64".into()));
    }
    let floats: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let slice = |offset: usize, len: usize| -> Result<Vec<f64>> {
        if !offset.is_multiple_of(8) || offset / 8 + len > floats.len() {
            return Err(Error::Format(format!("offset {offset} (+{len}) out of range")));
        }
        Ok(floats[offset / 8..offset / 8 + len].to_vec())
    };

    let mut lines = header.lines();
    if lines.next() != Some(MODEL_MAGIC) {
        return Err(Error::Format("missing DFLMODEL v1 header".into()));
    }
    let arch_line = lines.next().ok_or_else(|| Error::Format("missing arch line".into()))?;
    let f: Vec<&str> = arch_line.split_whitespace().collect();
    let arch = match f.as_slice() {
        ["arch", "dense", p, k, gr, d, r] => Architecture::Dense(NetworkSpec {
            input_dim: num(kv(p, "p")?, "p")?,
            output_classes: num(kv(k, "K")?, "K")?,
            growth_rate: num(kv(gr, "growth")?, "growth")?,
            depth: num(kv(d, "depth")?, "depth")?,
            reduction: num(kv(r, "reduction")?, "reduction")?,
        }),
        ["arch", "probe", p, h, k] => Architecture::Probe {
            input_dim: num(kv(p, "p")?, "p")?,
            hidden: num(kv(h, "hidden")?, "hidden")?,
            classes: num(kv(k, "K")?, "K")?,
        },
        _ => return Err(Error::Format(format!("bad arch line {arch_line:?}"))),
    };
    let mut params = Vec::new();
    let mut bn = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["end"] => break,
            ["param", group, name, shape, offset] => {
                let group = match *group {
                    "theta" => Group::Theta,
                    "phi" => Group::Phi,
                    other => return Err(Error::Format(format!("unknown group {other:?}"))),
                };
                let shape: Vec<usize> = shape
                    .split('x')
                    .map(|d| num(d, "shape"))
                    .collect::<Result<_>>()?;
                let len = shape.iter().product();
                let values = slice(num(kv(offset, "offset")?, "offset")?, len)?;
                params.push(Param {
                    name: name.to_string(),
                    group,
                    value: Tensor::from_parts(shape, values)?,
                });
            }
            ["bn", name, width, mom, eps, mo, vo] => {
                let w: usize = num(width, "bn width")?;
                bn.push(BnSite {
                    name: name.to_string(),
                    state: BnState {
                        running_mean: slice(num(kv(mo, "mean_offset")?, "offset")?, w)?,
                        running_var: slice(num(kv(vo, "var_offset")?, "offset")?, w)?,
                        momentum: num(kv(mom, "momentum")?, "momentum")?,
                        eps: num(kv(eps, "eps")?, "eps")?,
                    },
                });
            }
            _ => return Err(Error::Format(format!("bad header line {line:?}"))),
        }
    }
    let model = ModelParams { arch, params, bn };
    check_layout(&model)?;
    Ok(model)
}

fn find_header_end(bytes: &[u8]) -> Result<usize> {
    let marker = b"\nend\n";
    bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .map(|p| p + marker.len())
        .ok_or_else(|| Error::Format("model header has no end marker".into()))
}

/// Verifies that parameter names and shapes are the ones the architecture builds.
fn check_layout(model: &ModelParams) -> Result<()> {
    let reference = match model.arch {
        Architecture::Dense(spec) => build(spec, 0)?,
        Architecture::Probe {
            input_dim,
            hidden,
            classes,
        } => build_probe(input_dim, hidden, classes, 0)?,
    };
    let same = reference.params.len() == model.params.len()
        && reference.bn.len() == model.bn.len()
        && reference.params.iter().zip(&model.params).all(|(a, b)| {
            a.name == b.name && a.group == b.group && a.value.shape() == b.value.shape()
        })
        && reference
            .bn
            .iter()
            .zip(&model.bn)
            .all(|(a, b)| a.name == b.name && a.state.width() == b.state.width());
    if same {
        Ok(())
    } else {
        Err(Error::Format("parameter manifest does not match the architecture".into()))
    }
}
