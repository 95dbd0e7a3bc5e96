use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::numcore::{Matrix, ParamSet, Rng};

/// Architecture of the focal-modulation classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Arch {
    pub input_dim: usize,
    /// Token width `d`.
    pub width: usize,
    pub blocks: usize,
    /// Number of windowed focal levels `F`; a global level is always added.
    pub focal_levels: usize,
    pub tokens: usize,
    pub num_classes: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            input_dim: 32,
            width: 16,
            blocks: 8,
            focal_levels: 2,
            tokens: 4,
            num_classes: 10,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("input_dim", self.input_dim),
            ("width", self.width),
            ("blocks", self.blocks),
            ("tokens", self.tokens),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = nonzero.iter().find(|(_, v)| *v == 0) {
            return config_err(format!("arch.{name} must be positive"));
        }
        if !self.input_dim.is_multiple_of(self.tokens) {
            return config_err(format!(
                "arch.input_dim ({}) must be divisible by arch.tokens ({})",
                self.input_dim, self.tokens
            ));
        }
        Ok(())
    }

    /// Input features per token.
    pub fn segment(&self) -> usize {
        self.input_dim / self.tokens
    }

    /// Levels mixed by the gates: `F` windowed levels plus the global one.
    pub fn levels(&self) -> usize {
        self.focal_levels + 1
    }

    /// Scalars in one client's modulation projections, `B * 3 * d^2`.
    pub fn modulation_scalars(&self) -> usize {
        self.blocks * 3 * self.width * self.width
    }

    pub fn shared_scalars(&self) -> usize {
        let d = self.width;
        self.input_dim * d
            + self.blocks * (d * self.levels() + d * d + 2 * d)
            + d * self.num_classes
            + self.num_classes
    }
}

/// The three projections of one focal block.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub query: Matrix,
    pub context: Matrix,
    pub value: Matrix,
}

impl ProjectionSet {
    pub fn zeros(width: usize) -> Self {
        Self {
            query: Matrix::zeros(width, width),
            context: Matrix::zeros(width, width),
            value: Matrix::zeros(width, width),
        }
    }

    pub fn as_array(&self) -> [&Matrix; 3] {
        [&self.query, &self.context, &self.value]
    }

    pub fn as_array_mut(&mut self) -> [&mut Matrix; 3] {
        [&mut self.query, &mut self.context, &mut self.value]
    }
}

/// The personalized block `P`: per focal block, the query, context (key) and
/// value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationParams {
    pub blocks: Vec<ProjectionSet>,
}

impl ModulationParams {
    pub fn zeros(arch: &Arch) -> Self {
        Self {
            blocks: (0..arch.blocks)
                .map(|_| ProjectionSet::zeros(arch.width))
                .collect(),
        }
    }

    pub fn random(arch: &Arch, rng: &mut Rng) -> Self {
        let std = 1.0 / (arch.width as f64).sqrt();
        let mut p = Self::zeros(arch);
        for m in p.tensors_mut() {
            fill_gaussian(m, std, rng);
        }
        p
    }

    pub fn width(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.query.rows())
    }

    pub fn check(&self, arch: &Arch) -> Result<()> {
        if self.blocks.len() != arch.blocks {
            return config_err(format!(
                "modulation params have {} blocks, expected {}",
                self.blocks.len(),
                arch.blocks
            ));
        }
        let d = arch.width;
        for (b, set) in self.blocks.iter().enumerate() {
            if set.as_array().iter().any(|m| m.shape() != (d, d)) {
                return config_err(format!("block {b}: projections must be {d}x{d}"));
            }
        }
        Ok(())
    }
}

impl ParamSet for ModulationParams {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(self.blocks.len() * 3);
        for (b, set) in self.blocks.iter().enumerate() {
            out.push((format!("p.{b}.query"), &set.query));
            out.push((format!("p.{b}.context"), &set.context));
            out.push((format!("p.{b}.value"), &set.value));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.blocks
            .iter_mut()
            .flat_map(|s| s.as_array_mut())
            .collect()
    }
}

/// Shared (non-personalized) weights of one focal block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockShared {
    /// `d x (F + 1)` gate logits.
    pub gate: Matrix,
    /// `d x d` output projection.
    pub out: Matrix,
    pub norm_scale: Matrix,
    pub norm_shift: Matrix,
}

/// The shared remainder `xi`: token embedding, per-block gates, output
/// projections and layer norms, and the classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedParams {
    pub arch: Arch,
    /// `input_dim x d`; token `t` reads rows `t*s..(t+1)*s` where `s = input_dim / T`.
    pub embed: Matrix,
    pub blocks: Vec<BlockShared>,
    pub head: Matrix,
    pub head_bias: Matrix,
}

impl SharedParams {
    pub fn zeros(arch: &Arch) -> Self {
        let d = arch.width;
        Self {
            arch: *arch,
            embed: Matrix::zeros(arch.input_dim, d),
            blocks: (0..arch.blocks)
                .map(|_| BlockShared {
                    gate: Matrix::zeros(d, arch.levels()),
                    out: Matrix::zeros(d, d),
                    norm_scale: Matrix::zeros(1, d),
                    norm_shift: Matrix::zeros(1, d),
                })
                .collect(),
            head: Matrix::zeros(d, arch.num_classes),
            head_bias: Matrix::zeros(1, arch.num_classes),
        }
    }

    /// Gaussian(0, 1/fan_in) weights, unit norm scales, zero shifts and bias.
    pub fn random(arch: &Arch, rng: &mut Rng) -> Self {
        let mut xi = Self::zeros(arch);
        let d = arch.width as f64;
        fill_gaussian(&mut xi.embed, 1.0 / (arch.segment() as f64).sqrt(), rng);
        for b in &mut xi.blocks {
            fill_gaussian(&mut b.gate, 1.0 / d.sqrt(), rng);
            fill_gaussian(&mut b.out, 1.0 / d.sqrt(), rng);
            b.norm_scale.as_mut_slice().fill(1.0);
        }
        fill_gaussian(&mut xi.head, 1.0 / d.sqrt(), rng);
        xi
    }
}

impl ParamSet for SharedParams {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("xi.embed".to_string(), &self.embed)];
        for (b, blk) in self.blocks.iter().enumerate() {
            out.push((format!("xi.{b}.gate"), &blk.gate));
            out.push((format!("xi.{b}.out"), &blk.out));
            out.push((format!("xi.{b}.norm_scale"), &blk.norm_scale));
            out.push((format!("xi.{b}.norm_shift"), &blk.norm_shift));
        }
        out.push(("xi.head".to_string(), &self.head));
        out.push(("xi.head_bias".to_string(), &self.head_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embed];
        for blk in &mut self.blocks {
            out.push(&mut blk.gate);
            out.push(&mut blk.out);
            out.push(&mut blk.norm_scale);
            out.push(&mut blk.norm_shift);
        }
        out.push(&mut self.head);
        out.push(&mut self.head_bias);
        out
    }
}

/// Full classifier parameters `theta = (P, xi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub p: ModulationParams,
    pub xi: SharedParams,
}

impl ModelParams {
    pub fn random(arch: &Arch, rng: &mut Rng) -> Self {
        let xi = SharedParams::random(arch, rng);
        let p = ModulationParams::random(arch, rng);
        Self { p, xi }
    }

    pub fn zeros(arch: &Arch) -> Self {
        Self {
            p: ModulationParams::zeros(arch),
            xi: SharedParams::zeros(arch),
        }
    }

    pub fn arch(&self) -> &Arch {
        &self.xi.arch
    }

    /// Splits a flat `flatten(P) ++ flatten(xi)` vector into its two blocks.
    pub fn join(arch: &Arch, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(arch);
        params.assign_flat(flat)?;
        Ok(params)
    }

    pub fn split(self) -> (ModulationParams, SharedParams) {
        (self.p, self.xi)
    }
}

impl ParamSet for ModelParams {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.p.named_tensors();
        out.extend(self.xi.named_tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.p.tensors_mut();
        out.extend(self.xi.tensors_mut());
        out
    }
}

pub(crate) fn fill_gaussian(m: &mut Matrix, std: f64, rng: &mut Rng) {
    for v in m.as_mut_slice() {
        *v = std * rng.gaussian();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;
    use proptest::prelude::*;

    fn small() -> Arch {
        Arch {
            input_dim: 8,
            width: 4,
            blocks: 2,
            focal_levels: 1,
            tokens: 2,
            num_classes: 3,
        }
    }

    #[test]
    fn scalar_counts_match_tensors() {
        for arch in [small(), Arch::default()] {
            let mut rng = Rng::new(1);
            let theta = ModelParams::random(&arch, &mut rng);
            assert_eq!(theta.p.num_scalars(), arch.modulation_scalars());
            assert_eq!(theta.xi.num_scalars(), arch.shared_scalars());
        }
        assert_eq!(Arch::default().modulation_scalars(), 8 * 3 * 256);
    }

    #[test]
    fn arch_validation() {
        let mut arch = small();
        arch.tokens = 3;
        assert!(arch.validate().is_err());
        arch.tokens = 0;
        assert!(arch.validate().is_err());
        assert!(small().validate().is_ok());
    }

    proptest! {
        #[test]
        fn split_join_round_trip_is_bitwise(seed in any::<u64>()) {
            let arch = small();
            let theta = ModelParams::random(&arch, &mut Rng::new(seed));
            let flat = theta.flatten();
            let joined = ModelParams::join(&arch, &flat).unwrap();
            prop_assert!(joined.bitwise_eq(&theta));
            let (p, xi) = joined.split();
            let mut concat = p.flatten();
            concat.extend(xi.flatten());
            prop_assert_eq!(concat, flat);
        }
    }
}
