use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::{Arch, ModulationParams};
use crate::numcore::{Matrix, ParamSet, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// No nonlinearity; makes the generator affine in `z` (used by tests and oracles).
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    /// Gaussian(0, gain^2 / fan_in) weights, zero bias.
    pub fn random(fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Self {
        let mut layer = Self::zeros(fan_in, fan_out);
        let std = gain / (fan_in as f64).sqrt();
        for v in layer.weight.as_mut_slice() {
            *v = std * rng.gaussian();
        }
        layer
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub(crate) fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.as_slice().to_vec();
        for (k, &xk) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.weight.row(k)) {
                *o += xk * w;
            }
        }
        out
    }

    /// Accumulates the layer gradient for input `x` and output cotangent
    /// `dy` into `grad`, returning the input cotangent `dy W^T`.
    pub(crate) fn pullback(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            for (g, d) in grad.weight.row_mut(k).iter_mut().zip(dy) {
                *g += xk * d;
            }
        }
        for (g, d) in grad.bias.as_mut_slice().iter_mut().zip(dy) {
            *g += d;
        }
        (0..self.fan_in())
            .map(|k| self.weight.row(k).iter().zip(dy).map(|(w, d)| w * d).sum())
            .collect()
    }
}

/// Shape of the generator network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperNetConfig {
    /// Client-embedding dimension `D`.
    pub embed_dim: usize,
    /// Hidden width `D_h`.
    pub hidden: usize,
    /// Number of hidden trunk layers.
    pub depth: usize,
    pub activation: Activation,
    /// Rank of the low-rank conditioned variant; `None` generates full projections.
    pub rank: Option<usize>,
}

impl Default for HyperNetConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 100,
            depth: 2,
            activation: Activation::Relu,
            rank: None,
        }
    }
}

impl HyperNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 {
            return config_err("hypernet.embed_dim and hypernet.hidden must be positive");
        }
        if self.depth == 0 {
            return config_err("hypernet.depth must be at least 1");
        }
        Ok(())
    }

    /// Trunk scalars: `D*D_h + D_h + (depth-1)*(D_h^2 + D_h)`.
    pub fn trunk_scalars(&self) -> usize {
        let (d, h) = (self.embed_dim, self.hidden);
        d * h + h + (self.depth - 1) * (h * h + h)
    }
}

pub(crate) struct TrunkTrace {
    /// Layer inputs, `inputs[0] = z`.
    pub inputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

pub(crate) fn trunk_forward(trunk: &[Dense], act: Activation, z: &[f64]) -> TrunkTrace {
    let mut inputs = Vec::with_capacity(trunk.len());
    let mut pre = Vec::with_capacity(trunk.len());
    let mut h = z.to_vec();
    for layer in trunk {
        let a = layer.apply(&h);
        let next: Vec<f64> = a.iter().map(|&v| act.apply(v)).collect();
        inputs.push(std::mem::replace(&mut h, next));
        pre.push(a);
    }
    TrunkTrace {
        inputs,
        pre,
        output: h,
    }
}

/// Backpropagates `dh` (cotangent of the trunk output) into `grads`; returns `dz`.
pub(crate) fn trunk_pullback(
    trunk: &[Dense],
    act: Activation,
    trace: &TrunkTrace,
    mut dh: Vec<f64>,
    grads: &mut [Dense],
) -> Vec<f64> {
    for l in (0..trunk.len()).rev() {
        let da: Vec<f64> = dh
            .iter()
            .zip(&trace.pre[l])
            .map(|(d, &a)| d * act.derivative(a))
            .collect();
        dh = trunk[l].pullback(&trace.inputs[l], &da, &mut grads[l]);
    }
    dh
}

/// Gain applied to every trunk layer's initial weights.
///
/// The server step moves a generated projection by roughly
/// `beta * |h|^2` times the client's own change, where `h` is the trunk
/// output. With unit-gain layers a ReLU trunk halves `|h|^2` per layer and
/// the generator barely moves at `beta = 0.01`; a gain of 3 makes one
/// server step comparable to the client's local progress. The heads are
/// shrunk by the same factor (see [`head_init_scale`]) so the generated
/// projections start at the usual scale.
pub const TRUNK_INIT_GAIN: f64 = 3.0;

/// Multiplier of a head's unit-gain initial weights: `TRUNK_INIT_GAIN^-depth`,
/// undoing the trunk gain so the initial output scale does not depend on it.
pub(crate) fn head_init_scale(cfg: &HyperNetConfig) -> f64 {
    TRUNK_INIT_GAIN.powi(-(cfg.depth as i32))
}

pub(crate) fn random_trunk(cfg: &HyperNetConfig, rng: &mut Rng) -> Vec<Dense> {
    (0..cfg.depth)
        .map(|l| {
            let fan_in = if l == 0 { cfg.embed_dim } else { cfg.hidden };
            Dense::random(fan_in, cfg.hidden, TRUNK_INIT_GAIN, rng)
        })
        .collect()
}

/// Full-rank generator: an MLP trunk followed by one linear head per
/// (block, projection) emitting the `d x d` matrix row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperNet {
    pub arch: Arch,
    pub config: HyperNetConfig,
    pub trunk: Vec<Dense>,
    /// `blocks * 3` heads, ordered block-major as query, context, value.
    pub heads: Vec<Dense>,
}

impl HyperNet {
    pub fn zeros(arch: &Arch, config: &HyperNetConfig) -> Self {
        let d2 = arch.width * arch.width;
        Self {
            arch: *arch,
            config: *config,
            trunk: (0..config.depth)
                .map(|l| {
                    let fan_in = if l == 0 {
                        config.embed_dim
                    } else {
                        config.hidden
                    };
                    Dense::zeros(fan_in, config.hidden)
                })
                .collect(),
            heads: (0..arch.blocks * 3)
                .map(|_| Dense::zeros(config.hidden, d2))
                .collect(),
        }
    }

    pub fn random(arch: &Arch, config: &HyperNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d2 = arch.width * arch.width;
        let trunk = random_trunk(config, rng);
        // Generated entries start with standard deviation about 1/(2 sqrt(d)),
        // half that of a directly initialized projection: the product
        // Q * (A Pv) is cubic in the projection scale.
        let gain = head_init_scale(config) / (arch.width as f64).sqrt();
        let heads = (0..arch.blocks * 3)
            .map(|_| Dense::random(config.hidden, d2, gain, rng))
            .collect();
        Ok(Self {
            arch: *arch,
            config: *config,
            trunk,
            heads,
        })
    }

    fn check_embedding(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.config.embed_dim {
            return config_err(format!(
                "embedding has length {}, generator expects {}",
                z.len(),
                self.config.embed_dim
            ));
        }
        Ok(())
    }

    /// `P = h(phi; z)`.
    pub fn generate(&self, z: &[f64]) -> Result<ModulationParams> {
        self.check_embedding(z)?;
        let trace = trunk_forward(&self.trunk, self.config.activation, z);
        let mut p = ModulationParams::zeros(&self.arch);
        for (head, m) in self.heads.iter().zip(p.tensors_mut()) {
            m.as_mut_slice().copy_from_slice(&head.apply(&trace.output));
        }
        Ok(p)
    }

    /// Vector-Jacobian products `((dP/dphi)^T c, (dP/dz)^T c)` for a cotangent `c`
    /// shaped like the generated projections.
    pub fn pullback(&self, z: &[f64], cot: &ModulationParams) -> Result<(HyperNet, Vec<f64>)> {
        self.check_embedding(z)?;
        cot.check(&self.arch)?;
        let trace = trunk_forward(&self.trunk, self.config.activation, z);
        let mut grad = HyperNet::zeros(&self.arch, &self.config);
        let mut dh = vec![0.0; self.config.hidden];
        for ((head, ghead), c) in self.heads.iter().zip(&mut grad.heads).zip(cot.tensors()) {
            let back = head.pullback(&trace.output, c.as_slice(), ghead);
            dh.iter_mut().zip(back).for_each(|(a, b)| *a += b);
        }
        let dz = trunk_pullback(
            &self.trunk,
            self.config.activation,
            &trace,
            dh,
            &mut grad.trunk,
        );
        Ok((grad, dz))
    }

    /// Scalars sent to a client per round for its generated projections.
    pub fn transmitted_scalars(&self) -> usize {
        self.arch.modulation_scalars()
    }
}

impl ParamSet for HyperNet {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.trunk.iter().enumerate() {
            out.push((format!("phi.trunk.{l}.weight"), &layer.weight));
            out.push((format!("phi.trunk.{l}.bias"), &layer.bias));
        }
        for (h, head) in self.heads.iter().enumerate() {
            let (b, kind) = (h / 3, ["query", "context", "value"][h % 3]);
            out.push((format!("phi.head.{b}.{kind}.weight"), &head.weight));
            out.push((format!("phi.head.{b}.{kind}.bias"), &head.bias));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in self.trunk.iter_mut().chain(self.heads.iter_mut()) {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }
}
