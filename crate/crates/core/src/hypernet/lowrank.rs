use crate::error::{config_err, Result};
use crate::model::{Arch, ModulationParams};
use crate::numcore::{Matrix, ParamSet, Rng};

use super::full::{
    head_init_scale, random_trunk, trunk_forward, trunk_pullback, Dense, HyperNetConfig,
};

/// Low-rank conditioned generator.
///
/// Every client shares a trained `base` set of projections; the generator
/// only emits a rank-`r` correction per projection, `P = base + U V` with
/// `U: d x r` and `V: r x d` produced by linear heads on the trunk output.
/// The server transmits the factors (`2 d r` scalars per projection) and
/// the client reconstructs `P` against its copy of the base, which is
/// broadcast together with the shared weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankHyperNet {
    pub arch: Arch,
    pub config: HyperNetConfig,
    pub rank: usize,
    pub trunk: Vec<Dense>,
    pub base: ModulationParams,
    /// `blocks * 3` heads emitting `U` row-major (`d * r` outputs each).
    pub left: Vec<Dense>,
    /// `blocks * 3` heads emitting `V` row-major (`r * d` outputs each).
    pub right: Vec<Dense>,
}

impl LowRankHyperNet {
    fn check_rank(arch: &Arch, rank: usize) -> Result<()> {
        if rank == 0 || rank >= arch.width {
            return config_err(format!(
                "low-rank generator needs 1 <= rank < width, got rank {rank} for width {}",
                arch.width
            ));
        }
        Ok(())
    }

    pub fn zeros(arch: &Arch, config: &HyperNetConfig, rank: usize) -> Result<Self> {
        Self::check_rank(arch, rank)?;
        config.validate()?;
        let factor = arch.width * rank;
        let heads = || {
            (0..arch.blocks * 3)
                .map(|_| Dense::zeros(config.hidden, factor))
                .collect::<Vec<_>>()
        };
        Ok(Self {
            arch: *arch,
            config: *config,
            rank,
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
            base: ModulationParams::zeros(arch),
            left: heads(),
            right: heads(),
        })
    }

    pub fn random(
        arch: &Arch,
        config: &HyperNetConfig,
        rank: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut net = Self::zeros(arch, config, rank)?;
        net.trunk = random_trunk(config, rng);
        net.base = ModulationParams::random(arch, rng);
        let factor = arch.width * rank;
        // Factor entries of standard deviation s give U V entries of about
        // sqrt(r) s^2; aim for the generated-projection scale 1/(2 sqrt(d)).
        let s = (2.0 * (arch.width as f64).sqrt() * (rank as f64).sqrt()).powf(-0.5);
        let gain = 2.0 * s * head_init_scale(config);
        for head in net.left.iter_mut().chain(net.right.iter_mut()) {
            *head = Dense::random(config.hidden, factor, gain, rng);
        }
        Ok(net)
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

    /// Per-projection factors `(U, V)` for embedding `z`, in head order.
    pub fn factors(&self, z: &[f64]) -> Result<Vec<(Matrix, Matrix)>> {
        self.check_embedding(z)?;
        let h = trunk_forward(&self.trunk, self.config.activation, z).output;
        Ok(self.factors_from_hidden(&h))
    }

    fn factors_from_hidden(&self, h: &[f64]) -> Vec<(Matrix, Matrix)> {
        let (d, r) = (self.arch.width, self.rank);
        self.left
            .iter()
            .zip(&self.right)
            .map(|(l, rt)| {
                let u = Matrix::from_vec(d, r, l.apply(h)).expect("head width d*r");
                let v = Matrix::from_vec(r, d, rt.apply(h)).expect("head width r*d");
                (u, v)
            })
            .collect()
    }

    /// Rebuilds `P = base + U V` from transmitted factors.
    pub fn assemble(&self, factors: &[(Matrix, Matrix)]) -> ModulationParams {
        let mut p = self.base.clone();
        for (m, (u, v)) in p.tensors_mut().into_iter().zip(factors) {
            m.axpy(1.0, &u.mm(v));
        }
        p
    }

    pub fn generate(&self, z: &[f64]) -> Result<ModulationParams> {
        Ok(self.assemble(&self.factors(z)?))
    }

    pub fn pullback(
        &self,
        z: &[f64],
        cot: &ModulationParams,
    ) -> Result<(LowRankHyperNet, Vec<f64>)> {
        self.check_embedding(z)?;
        cot.check(&self.arch)?;
        let trace = trunk_forward(&self.trunk, self.config.activation, z);
        let factors = self.factors_from_hidden(&trace.output);
        let mut grad = Self::zeros(&self.arch, &self.config, self.rank)?;
        grad.base = cot.clone();
        let mut dh = vec![0.0; self.config.hidden];
        for (j, ((u, v), c)) in factors.iter().zip(cot.tensors()).enumerate() {
            // d(UV) = dU V + U dV  =>  dU = C V^T, dV = U^T C.
            let du = c.mmt(v);
            let dv = u.tmm(c);
            let back_l = self.left[j].pullback(&trace.output, du.as_slice(), &mut grad.left[j]);
            let back_r = self.right[j].pullback(&trace.output, dv.as_slice(), &mut grad.right[j]);
            for ((a, bl), br) in dh.iter_mut().zip(back_l).zip(back_r) {
                *a += bl + br;
            }
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

    /// Scalars sent to one client per round: `B * 3 * 2 * d * r` factor entries.
    pub fn transmitted_scalars(&self) -> usize {
        self.arch.blocks * 3 * 2 * self.arch.width * self.rank
    }
}

impl ParamSet for LowRankHyperNet {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.trunk.iter().enumerate() {
            out.push((format!("phi.trunk.{l}.weight"), &layer.weight));
            out.push((format!("phi.trunk.{l}.bias"), &layer.bias));
        }
        for (name, m) in self.base.named_tensors() {
            out.push((format!("phi.base.{name}"), m));
        }
        for (h, (l, r)) in self.left.iter().zip(&self.right).enumerate() {
            let (b, kind) = (h / 3, ["query", "context", "value"][h % 3]);
            out.push((format!("phi.left.{b}.{kind}.weight"), &l.weight));
            out.push((format!("phi.left.{b}.{kind}.bias"), &l.bias));
            out.push((format!("phi.right.{b}.{kind}.weight"), &r.weight));
            out.push((format!("phi.right.{b}.{kind}.bias"), &r.bias));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in &mut self.trunk {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.extend(self.base.tensors_mut());
        for (l, r) in self.left.iter_mut().zip(self.right.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            out.push(&mut r.weight);
            out.push(&mut r.bias);
        }
        out
    }
}
