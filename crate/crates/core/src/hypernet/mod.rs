//! Server-side projection generator `h(phi; z)`.
//!
//! The generator maps a client embedding `z` to that client's modulation
//! projections. [`pullback`](Generator::pullback) returns the
//! vector-Jacobian products with respect to `phi` and `z` for a
//! projection-shaped cotangent, which is all the server needs to turn a
//! client's parameter change `Delta P = P_end - P_start` into generator and
//! embedding updates.
//!
//! # Step direction
//!
//! `Delta P` already points downhill for the client (it is minus the
//! learning rate times the accumulated loss gradient), so its pullback is
//! the negative of a loss gradient with respect to `phi`. Under
//! [`StepRule::Descent`] (the default) the server therefore *adds*
//! `beta * J^T Delta P`, moving the generator toward the locally trained
//! projections. [`StepRule::Literal`] subtracts it instead, matching the
//! update as it is usually written; that direction moves generated
//! projections away from the client's progress and is kept for comparison.

mod full;
mod lowrank;

pub use full::{Activation, Dense, HyperNet, HyperNetConfig};
pub use lowrank::LowRankHyperNet;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::{Arch, ModulationParams};
use crate::numcore::{Matrix, ParamSet, Rng};

/// A full-rank or low-rank generator behind one interface.
#[derive(Clone, Debug, PartialEq)]
pub enum Generator {
    Full(HyperNet),
    LowRank(LowRankHyperNet),
}

impl Generator {
    /// Random generator; `config.rank` selects the low-rank variant.
    pub fn random(arch: &Arch, config: &HyperNetConfig, rng: &mut Rng) -> Result<Self> {
        match config.rank {
            None => Ok(Generator::Full(HyperNet::random(arch, config, rng)?)),
            Some(r) => Ok(Generator::LowRank(LowRankHyperNet::random(
                arch, config, r, rng,
            )?)),
        }
    }

    /// All-zero generator with the layout `config` describes; used as a
    /// template when loading checkpoints.
    pub fn zeros(arch: &Arch, config: &HyperNetConfig) -> Result<Self> {
        config.validate()?;
        match config.rank {
            None => Ok(Generator::Full(HyperNet::zeros(arch, config))),
            Some(r) => Ok(Generator::LowRank(LowRankHyperNet::zeros(arch, config, r)?)),
        }
    }

    pub fn arch(&self) -> &Arch {
        match self {
            Generator::Full(h) => &h.arch,
            Generator::LowRank(h) => &h.arch,
        }
    }

    pub fn config(&self) -> &HyperNetConfig {
        match self {
            Generator::Full(h) => &h.config,
            Generator::LowRank(h) => &h.config,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.config().embed_dim
    }

    pub fn generate(&self, z: &[f64]) -> Result<ModulationParams> {
        match self {
            Generator::Full(h) => h.generate(z),
            Generator::LowRank(h) => h.generate(z),
        }
    }

    /// `((dP/dphi)^T c, (dP/dz)^T c)`.
    pub fn pullback(&self, z: &[f64], cot: &ModulationParams) -> Result<(Generator, Vec<f64>)> {
        match self {
            Generator::Full(h) => h.pullback(z, cot).map(|(g, dz)| (Generator::Full(g), dz)),
            Generator::LowRank(h) => h
                .pullback(z, cot)
                .map(|(g, dz)| (Generator::LowRank(g), dz)),
        }
    }

    /// Smallest `|pre-activation|` in the trunk at `z`, or infinity when the
    /// trunk is affine. Finite differences are only trustworthy when a step
    /// cannot carry a unit across the ReLU kink.
    pub fn kink_margin(&self, z: &[f64]) -> f64 {
        let (trunk, act) = match self {
            Generator::Full(h) => (&h.trunk, h.config.activation),
            Generator::LowRank(h) => (&h.trunk, h.config.activation),
        };
        if act == Activation::Identity {
            return f64::INFINITY;
        }
        full::trunk_forward(trunk, act, z)
            .pre
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// Per-client, per-round downstream scalars for the personalized block.
    pub fn transmitted_scalars(&self) -> usize {
        match self {
            Generator::Full(h) => h.transmitted_scalars(),
            Generator::LowRank(h) => h.transmitted_scalars(),
        }
    }

    /// Client-independent scalars a low-rank client must hold (the base), sent
    /// alongside the shared weights. Zero for the full generator.
    pub fn broadcast_scalars(&self) -> usize {
        match self {
            Generator::Full(_) => 0,
            Generator::LowRank(h) => h.base.num_scalars(),
        }
    }
}

impl ParamSet for Generator {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        match self {
            Generator::Full(h) => h.named_tensors(),
            Generator::LowRank(h) => h.named_tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Generator::Full(h) => h.tensors_mut(),
            Generator::LowRank(h) => h.tensors_mut(),
        }
    }
}

/// `N x D` table of client embeddings, Gaussian(0, 1) per coordinate.
pub fn random_embeddings(clients: usize, dim: usize, rng: &mut Rng) -> Matrix {
    let mut z = Matrix::zeros(clients, dim);
    for v in z.as_mut_slice() {
        *v = rng.gaussian();
    }
    z
}

/// Normalizer for the generator gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// `w_i = m_i / sum_{j in cohort} m_j`; weights sum to one every round.
    #[default]
    Cohort,
    /// `w_i = m_i / S` with `S` the sample count over all clients.
    Global,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// `phi += beta * sum_i w_i J_phi^T Delta P_i` (moves toward trained projections).
    #[default]
    Descent,
    /// `phi -= beta * sum_i w_i J_phi^T Delta P_i`.
    Literal,
}

/// One cohort member's contribution to a server step.
#[derive(Clone, Debug)]
pub struct ClientDelta {
    pub client: usize,
    pub samples: usize,
    /// `P_end - P_start` of the client's local training.
    pub delta: ModulationParams,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ServerStep {
    pub beta: f64,
    pub weighting: Weighting,
    pub rule: StepRule,
    /// Samples over all clients, used by [`Weighting::Global`].
    pub total_samples: usize,
}

/// Aggregation weights for a cohort given in client-id order.
pub fn cohort_weights(
    samples: &[usize],
    weighting: Weighting,
    total_samples: usize,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Protocol("empty cohort".into()));
    }
    let denom = match weighting {
        Weighting::Cohort => samples.iter().sum::<usize>(),
        Weighting::Global => total_samples,
    };
    if denom == 0 {
        return Err(Error::Protocol("cohort holds no samples".into()));
    }
    Ok(samples.iter().map(|&m| m as f64 / denom as f64).collect())
}

/// Applies one round's generator and embedding update.
///
/// All pullbacks are evaluated at the pre-update `phi` and embeddings, then
/// reduced in increasing client id, so the result does not depend on the
/// order in which `deltas` were produced. Only cohort rows of `embeddings`
/// are written, and their step is not weighted. Returns the weights used.
pub fn server_update(
    generator: &mut Generator,
    embeddings: &mut Matrix,
    deltas: &[ClientDelta],
    step: &ServerStep,
) -> Result<Vec<f64>> {
    if !(step.beta >= 0.0) || !step.beta.is_finite() {
        return config_err(format!(
            "generator learning rate must be >= 0, got {}",
            step.beta
        ));
    }
    let mut order: Vec<&ClientDelta> = deltas.iter().collect();
    order.sort_by_key(|d| d.client);
    if order.windows(2).any(|w| w[0].client == w[1].client) {
        return Err(Error::Protocol("duplicate client in cohort".into()));
    }
    if let Some(d) = order.iter().find(|d| d.client >= embeddings.rows()) {
        return Err(Error::Protocol(format!("unknown client {}", d.client)));
    }
    let samples: Vec<usize> = order.iter().map(|d| d.samples).collect();
    let weights = cohort_weights(&samples, step.weighting, step.total_samples)?;

    let sign = match step.rule {
        StepRule::Descent => 1.0,
        StepRule::Literal => -1.0,
    };
    let mut phi_grad = generator.zeros_like();
    let mut z_steps = Vec::with_capacity(order.len());
    for (d, &w) in order.iter().zip(&weights) {
        let (g_phi, g_z) = generator.pullback(embeddings.row(d.client), &d.delta)?;
        phi_grad.axpy(w, &g_phi);
        z_steps.push((d.client, g_z));
    }
    generator.axpy(sign * step.beta, &phi_grad);
    for (client, g_z) in z_steps {
        for (z, g) in embeddings.row_mut(client).iter_mut().zip(g_z) {
            *z += sign * step.beta * g;
        }
    }
    if !generator.is_finite() || !embeddings.is_finite() {
        return Err(Error::NonFinite("generator update".into()));
    }
    Ok(weights)
}
