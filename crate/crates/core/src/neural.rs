//! Hand-written networks with analytic gradients.
//!
//! Three fixed architectures share one flat parameter vector format:
//!
//! * `PgacPolicy`: conv (1×3, features→features) → act → conv (1×(d−2),
//!   features→1) → act → concat previous weights → dense 2n→n → tanh.
//! * `PgacValue`: the same convolutional trunk → dense n→1, linear output.
//! * `EsMlp`: flattened state ⊕ previous weights → dense → act → dense → tanh.
//!
//! Parameters are stored block by block in the order returned by
//! [`ArchSpec::layout`]; weight blocks are row-major with the output index
//! outermost.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::market_data::StateTensor;
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("state shape {got:?} does not match architecture {expected:?}")]
    StateShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("expected {expected} previous weights, got {got}")]
    PrevWeights { expected: usize, got: usize },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("{op} requires a {expected:?} network, got {got:?}")]
    WrongArch {
        op: &'static str,
        expected: ArchTag,
        got: ArchTag,
    },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("upstream gradient has length {got}, expected {expected}")]
    Upstream { expected: usize, got: usize },
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("checkpoint format version {0} is not supported")]
    Version(u32),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchTag {
    PgacPolicy,
    PgacValue,
    EsMlp,
}

/// Activation for interior layers. Output layers are fixed by architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub tag: ArchTag,
    pub assets: usize,
    pub horizon: usize,
    pub features: usize,
    /// Hidden width; used by `EsMlp` only.
    #[serde(default)]
    pub hidden: usize,
    #[serde(default)]
    pub activation: Activation,
}

/// One parameter block in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: &'static str,
    pub offset: usize,
    pub len: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub is_bias: bool,
}

impl ArchSpec {
    pub fn policy(assets: usize, horizon: usize, features: usize) -> Self {
        Self {
            tag: ArchTag::PgacPolicy,
            assets,
            horizon,
            features,
            hidden: 0,
            activation: Activation::Tanh,
        }
    }

    pub fn value(assets: usize, horizon: usize, features: usize) -> Self {
        Self {
            tag: ArchTag::PgacValue,
            ..Self::policy(assets, horizon, features)
        }
    }

    pub fn es_mlp(assets: usize, horizon: usize, features: usize, hidden: usize) -> Self {
        Self {
            tag: ArchTag::EsMlp,
            hidden,
            ..Self::policy(assets, horizon, features)
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.assets == 0 || self.features == 0 || self.horizon == 0 {
            return Err(NetError::InvalidArch("dimensions must be positive".into()));
        }
        match self.tag {
            ArchTag::PgacPolicy | ArchTag::PgacValue if self.horizon < 3 => {
                Err(NetError::InvalidArch("convolutional nets need horizon >= 3".into()))
            }
            ArchTag::EsMlp if self.hidden == 0 => Err(NetError::InvalidArch("hidden width must be positive".into())),
            _ => Ok(()),
        }
    }

    /// Length of the output vector.
    pub fn output_len(&self) -> usize {
        match self.tag {
            ArchTag::PgacValue => 1,
            ArchTag::PgacPolicy | ArchTag::EsMlp => self.assets,
        }
    }

    fn conv_len(&self) -> usize {
        self.horizon - 2
    }

    fn mlp_input_len(&self) -> usize {
        self.assets * self.horizon * self.features + self.assets
    }

    pub fn layout(&self) -> Vec<Block> {
        let n = self.assets;
        let m = self.features;
        // (name, len, fan_in, fan_out, is_bias)
        let blocks: Vec<(&'static str, usize, usize, usize, bool)> = match self.tag {
            ArchTag::PgacPolicy | ArchTag::PgacValue => {
                let l = self.conv_len();
                let (fc_in, fc_out) = if self.tag == ArchTag::PgacPolicy {
                    (2 * n, n)
                } else {
                    (n, 1)
                };
                vec![
                    ("conv1.weight", m * m * 3, 3 * m, 3 * m, false),
                    ("conv1.bias", m, 0, 0, true),
                    ("conv2.weight", m * l, m * l, l, false),
                    ("conv2.bias", 1, 0, 0, true),
                    ("fc.weight", fc_in * fc_out, fc_in, fc_out, false),
                    ("fc.bias", fc_out, 0, 0, true),
                ]
            }
            ArchTag::EsMlp => {
                let i = self.mlp_input_len();
                let h = self.hidden;
                vec![
                    ("fc1.weight", h * i, i, h, false),
                    ("fc1.bias", h, 0, 0, true),
                    ("fc2.weight", n * h, h, n, false),
                    ("fc2.bias", n, 0, 0, true),
                ]
            }
        };
        let mut offset = 0;
        blocks
            .into_iter()
            .map(|(name, len, fan_in, fan_out, is_bias)| {
                let b = Block {
                    name,
                    offset,
                    len,
                    fan_in,
                    fan_out,
                    is_bias,
                };
                offset += len;
                b
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|b| b.len).sum()
    }
}

/// Network parameters: an architecture and its flat value vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    arch: ArchSpec,
    values: Vec<f64>,
}

impl NetworkParams {
    pub fn from_flat(arch: ArchSpec, values: Vec<f64>) -> Result<Self, NetError> {
        arch.validate()?;
        let expected = arch.param_count();
        if values.len() != expected {
            return Err(NetError::ParamCount {
                expected,
                got: values.len(),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(NetError::NonFinite(k));
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: ArchSpec) -> Result<Self, NetError> {
        Self::from_flat(arch, vec![0.0; arch.param_count()])
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Named views of each parameter block.
    pub fn layers(&self) -> Vec<(&'static str, &[f64])> {
        self.arch
            .layout()
            .into_iter()
            .map(|b| (b.name, &self.values[b.offset..b.offset + b.len]))
            .collect()
    }

    /// `θ ← θ + step · g`.
    pub fn add_scaled(&mut self, step: f64, g: &GradientVector) {
        for (v, d) in self.values.iter_mut().zip(&g.0) {
            *v += step * d;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Gradient aligned with [`NetworkParams::flat`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn add_scaled(&mut self, scale: f64, other: &GradientVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Glorot-uniform weights, zero biases; deterministic in `seed`.
pub fn init_params(arch: ArchSpec, seed: u64) -> Result<NetworkParams, NetError> {
    arch.validate()?;
    let mut rng = seed::rng(seed);
    let mut values = Vec::with_capacity(arch.param_count());
    for b in arch.layout() {
        if b.is_bias {
            values.extend(std::iter::repeat_n(0.0, b.len));
        } else {
            let bound = (6.0 / (b.fan_in + b.fan_out) as f64).sqrt();
            values.extend((0..b.len).map(|_| rng.random_range(-bound..bound)));
        }
    }
    NetworkParams::from_flat(arch, values)
}

/// Intermediate values of one forward pass, sufficient for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    arch: ArchSpec,
    input: Vec<f64>,
    prev: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    output: Vec<f64>,
}

impl ForwardRecord {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }
}

fn check_state(arch: &ArchSpec, state: &StateTensor) -> Result<(), NetError> {
    let expected = (arch.assets, arch.horizon, arch.features);
    if state.shape() != expected {
        return Err(NetError::StateShape {
            expected,
            got: state.shape(),
        });
    }
    Ok(())
}

fn check_prev(arch: &ArchSpec, prev: &[f64]) -> Result<(), NetError> {
    if prev.len() != arch.assets {
        return Err(NetError::PrevWeights {
            expected: arch.assets,
            got: prev.len(),
        });
    }
    Ok(())
}

fn expect_tag(op: &'static str, params: &NetworkParams, tag: ArchTag) -> Result<(), NetError> {
    if params.arch.tag != tag {
        return Err(NetError::WrongArch {
            op,
            expected: tag,
            got: params.arch.tag,
        });
    }
    Ok(())
}

/// Shared convolutional trunk; fills z1/a1 (n×L×m) and z2/a2 (n).
fn cnn_trunk(params: &NetworkParams, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let arch = &params.arch;
    let (n, d, m) = (arch.assets, arch.horizon, arch.features);
    let l = arch.conv_len();
    let act = arch.activation;
    let lay = arch.layout();
    let w1 = &params.values[lay[0].offset..lay[0].offset + lay[0].len];
    let b1 = &params.values[lay[1].offset..lay[1].offset + lay[1].len];
    let w2 = &params.values[lay[2].offset..lay[2].offset + lay[2].len];
    let b2 = params.values[lay[3].offset];

    let mut z1 = vec![0.0; n * l * m];
    for i in 0..n {
        for t in 0..l {
            for o in 0..m {
                let mut s = b1[o];
                for k in 0..3 {
                    let xrow = &x[(i * d + t + k) * m..(i * d + t + k + 1) * m];
                    for (c, xv) in xrow.iter().enumerate() {
                        s += w1[(o * m + c) * 3 + k] * xv;
                    }
                }
                z1[(i * l + t) * m + o] = s;
            }
        }
    }
    let a1: Vec<f64> = z1.iter().map(|&z| act.apply(z)).collect();

    let mut z2 = vec![0.0; n];
    for (i, zi) in z2.iter_mut().enumerate() {
        let mut s = b2;
        for t in 0..l {
            for o in 0..m {
                s += w2[o * l + t] * a1[(i * l + t) * m + o];
            }
        }
        *zi = s;
    }
    let a2: Vec<f64> = z2.iter().map(|&z| act.apply(z)).collect();
    (z1, a1, z2, a2)
}

fn dense(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(r, &bias)| {
            bias + w[r * x.len()..(r + 1) * x.len()]
                .iter()
                .zip(x)
                .map(|(a, c)| a * c)
                .sum::<f64>()
        })
        .collect()
}

/// Policy CNN: mean action of length `assets`, each component in `[-1, 1]`.
pub fn policy_cnn_forward(
    state: &StateTensor,
    prev_weights: &[f64],
    params: &NetworkParams,
) -> Result<ForwardRecord, NetError> {
    expect_tag("policy_cnn_forward", params, ArchTag::PgacPolicy)?;
    let arch = params.arch;
    check_state(&arch, state)?;
    check_prev(&arch, prev_weights)?;
    let x = state.entries();
    let (z1, a1, z2, a2) = cnn_trunk(params, x);
    let lay = arch.layout();
    let w3 = &params.values[lay[4].offset..lay[4].offset + lay[4].len];
    let b3 = &params.values[lay[5].offset..lay[5].offset + lay[5].len];
    let u: Vec<f64> = a2.iter().chain(prev_weights).copied().collect();
    let output = dense(w3, b3, &u).into_iter().map(f64::tanh).collect();
    Ok(ForwardRecord {
        arch,
        input: x.to_vec(),
        prev: prev_weights.to_vec(),
        z1,
        a1,
        z2,
        a2,
        output,
    })
}

/// Value CNN: a single unbounded scalar.
pub fn value_cnn_forward(state: &StateTensor, params: &NetworkParams) -> Result<ForwardRecord, NetError> {
    expect_tag("value_cnn_forward", params, ArchTag::PgacValue)?;
    let arch = params.arch;
    check_state(&arch, state)?;
    let x = state.entries();
    let (z1, a1, z2, a2) = cnn_trunk(params, x);
    let lay = arch.layout();
    let w3 = &params.values[lay[4].offset..lay[4].offset + lay[4].len];
    let b3 = &params.values[lay[5].offset..lay[5].offset + lay[5].len];
    let output = dense(w3, b3, &a2);
    Ok(ForwardRecord {
        arch,
        input: x.to_vec(),
        prev: Vec::new(),
        z1,
        a1,
        z2,
        a2,
        output,
    })
}

/// Flat MLP for the evolution strategy.
pub fn es_mlp_forward(
    state: &StateTensor,
    prev_weights: &[f64],
    params: &NetworkParams,
) -> Result<ForwardRecord, NetError> {
    expect_tag("es_mlp_forward", params, ArchTag::EsMlp)?;
    let arch = params.arch;
    check_state(&arch, state)?;
    check_prev(&arch, prev_weights)?;
    let lay = arch.layout();
    let v = &params.values;
    let u: Vec<f64> = state.entries().iter().chain(prev_weights).copied().collect();
    let z1 = dense(
        &v[lay[0].offset..lay[0].offset + lay[0].len],
        &v[lay[1].offset..lay[1].offset + lay[1].len],
        &u,
    );
    let a1: Vec<f64> = z1.iter().map(|&z| arch.activation.apply(z)).collect();
    let z2 = dense(
        &v[lay[2].offset..lay[2].offset + lay[2].len],
        &v[lay[3].offset..lay[3].offset + lay[3].len],
        &a1,
    );
    let output = z2.iter().map(|z| z.tanh()).collect();
    Ok(ForwardRecord {
        arch,
        input: u,
        prev: prev_weights.to_vec(),
        z1,
        a1,
        z2,
        a2: Vec::new(),
        output,
    })
}

/// Dispatches on the architecture tag. `prev_weights` is ignored by the value net.
pub fn forward(state: &StateTensor, prev_weights: &[f64], params: &NetworkParams) -> Result<ForwardRecord, NetError> {
    match params.arch.tag {
        ArchTag::PgacPolicy => policy_cnn_forward(state, prev_weights, params),
        ArchTag::PgacValue => value_cnn_forward(state, params),
        ArchTag::EsMlp => es_mlp_forward(state, prev_weights, params),
    }
}

/// Gradient of `upstream · output` with respect to every parameter.
pub fn backward(params: &NetworkParams, record: &ForwardRecord, upstream: &[f64]) -> Result<GradientVector, NetError> {
    let arch = record.arch;
    if params.arch != arch {
        return Err(NetError::WrongArch {
            op: "backward",
            expected: arch.tag,
            got: params.arch.tag,
        });
    }
    if upstream.len() != arch.output_len() {
        return Err(NetError::Upstream {
            expected: arch.output_len(),
            got: upstream.len(),
        });
    }
    let mut grad = vec![0.0; params.values.len()];
    let lay = arch.layout();
    let v = &params.values;
    let n = arch.assets;
    let act = arch.activation;

    match arch.tag {
        ArchTag::EsMlp => {
            let u = &record.input;
            let h = arch.hidden;
            let dz2: Vec<f64> = upstream
                .iter()
                .zip(&record.output)
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            let (w2o, b2o) = (lay[2].offset, lay[3].offset);
            let mut da1 = vec![0.0; h];
            for r in 0..n {
                grad[b2o + r] = dz2[r];
                for q in 0..h {
                    grad[w2o + r * h + q] = dz2[r] * record.a1[q];
                    da1[q] += v[w2o + r * h + q] * dz2[r];
                }
            }
            let (w1o, b1o) = (lay[0].offset, lay[1].offset);
            let il = u.len();
            for q in 0..h {
                let dz = da1[q] * act.derivative(record.z1[q], record.a1[q]);
                grad[b1o + q] = dz;
                if dz != 0.0 {
                    for (g, x) in grad[w1o + q * il..w1o + (q + 1) * il].iter_mut().zip(u) {
                        *g = dz * x;
                    }
                }
            }
        }
        ArchTag::PgacPolicy | ArchTag::PgacValue => {
            let (d, m) = (arch.horizon, arch.features);
            let l = arch.conv_len();
            let (w3o, b3o) = (lay[4].offset, lay[5].offset);
            let mut da2 = vec![0.0; n];
            if arch.tag == ArchTag::PgacPolicy {
                let dz3: Vec<f64> = upstream
                    .iter()
                    .zip(&record.output)
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                let u: Vec<f64> = record.a2.iter().chain(&record.prev).copied().collect();
                let width = 2 * n;
                for r in 0..n {
                    grad[b3o + r] = dz3[r];
                    for q in 0..width {
                        grad[w3o + r * width + q] = dz3[r] * u[q];
                    }
                    for (i, da) in da2.iter_mut().enumerate() {
                        *da += v[w3o + r * width + i] * dz3[r];
                    }
                }
            } else {
                let dv = upstream[0];
                grad[b3o] = dv;
                for i in 0..n {
                    grad[w3o + i] = dv * record.a2[i];
                    da2[i] = v[w3o + i] * dv;
                }
            }

            let dz2: Vec<f64> = (0..n)
                .map(|i| da2[i] * act.derivative(record.z2[i], record.a2[i]))
                .collect();
            let (w2o, b2o) = (lay[2].offset, lay[3].offset);
            grad[b2o] = dz2.iter().sum();
            let mut dz1 = vec![0.0; n * l * m];
            for (i, &d) in dz2.iter().enumerate().take(n) {
                for t in 0..l {
                    for o in 0..m {
                        let idx = (i * l + t) * m + o;
                        grad[w2o + o * l + t] += d * record.a1[idx];
                        let da1 = v[w2o + o * l + t] * d;
                        dz1[idx] = da1 * act.derivative(record.z1[idx], record.a1[idx]);
                    }
                }
            }

            let (w1o, b1o) = (lay[0].offset, lay[1].offset);
            let x = &record.input;
            for i in 0..n {
                for t in 0..l {
                    for o in 0..m {
                        let g = dz1[(i * l + t) * m + o];
                        if g == 0.0 {
                            continue;
                        }
                        grad[b1o + o] += g;
                        for k in 0..3 {
                            let xrow = &x[(i * d + t + k) * m..(i * d + t + k + 1) * m];
                            for (c, xv) in xrow.iter().enumerate() {
                                grad[w1o + (o * m + c) * 3 + k] += g * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(GradientVector(grad))
}

/// Which trainer produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Pgac,
    Es,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized trained agent. JSON output is byte-stable for equal contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub agent: AgentKind,
    pub policy: NetworkParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<NetworkParams>,
    /// Final exploration scale (PGAC).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    /// Master seed the run was derived from.
    pub seed: u64,
    /// Number of parameter updates applied.
    pub updates: usize,
    /// Free-form provenance, typically the resolved run configuration.
    #[serde(default)]
    pub context: serde_json::Value,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, NetError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, NetError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(NetError::Version(ck.format_version));
        }
        // Re-validate shapes.
        NetworkParams::from_flat(ck.policy.arch, ck.policy.values.clone())?;
        if let Some(v) = &ck.value {
            NetworkParams::from_flat(v.arch, v.values.clone())?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
