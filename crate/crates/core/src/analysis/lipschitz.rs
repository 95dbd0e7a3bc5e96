use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::hypernet::Generator;
use crate::model::ModulationParams;
use crate::numcore::{ParamSet, Rng};

/// Where and how hard to probe the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzProbe {
    /// Center of the embedding ball (also the fixed embedding when probing `phi`).
    pub center: Vec<f64>,
    pub z_radius: f64,
    pub phi_radius: f64,
    /// Starting pairs per estimate.
    pub samples: usize,
    /// Power-iteration steps that turn each random direction toward the
    /// locally most-stretched one before the pair is measured.
    pub power_steps: usize,
}

/// Largest observed `|h(a) - h(b)| / |a - b|` over the sampled pairs.
/// These are measurements, not bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub l_z: f64,
    pub l_phi: f64,
    pub pairs: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Uniform point in the ball of `radius` around `center`.
fn in_ball(center: &[f64], radius: f64, rng: &mut Rng) -> Vec<f64> {
    let dir = random_unit(center.len(), rng);
    let r = radius * rng.uniform().powf(1.0 / center.len() as f64);
    center.iter().zip(dir).map(|(c, d)| c + r * d).collect()
}

fn shifted(x: &[f64], v: &[f64], t: f64) -> Vec<f64> {
    x.iter().zip(v).map(|(a, b)| a + t * b).collect()
}

/// Pair search for a map `f` with vector-Jacobian product `vjp`: pick a
/// start in the ball of radius `radius / 2`, refine a random direction by
/// power iteration on `J^T J` (Jacobian-vector products by central
/// differences), and measure the pair `(x, x + radius/2 * v)`.
fn search<F, V>(
    center: &[f64],
    radius: f64,
    probe: &LipschitzProbe,
    rng: &mut Rng,
    f: F,
    vjp: V,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
    V: Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    let mut best = 0.0f64;
    let half = 0.5 * radius;
    let eps = 1e-4 * radius.max(1e-3);
    for _ in 0..probe.samples {
        let x = in_ball(center, half, rng);
        let mut v = random_unit(center.len(), rng);
        for _ in 0..probe.power_steps {
            let (hi, lo) = (f(&shifted(&x, &v, eps))?, f(&shifted(&x, &v, -eps))?);
            let jv: Vec<f64> = hi
                .iter()
                .zip(&lo)
                .map(|(a, b)| (a - b) / (2.0 * eps))
                .collect();
            let next = vjp(&x, &jv)?;
            let n = norm(&next);
            if n == 0.0 || !n.is_finite() {
                break;
            }
            v = next.into_iter().map(|c| c / n).collect();
        }
        let y = shifted(&x, &v, half);
        let ratio = distance(&f(&y)?, &f(&x)?) / distance(&y, &x);
        best = best.max(ratio);
    }
    Ok(best)
}

fn as_projections(template: &ModulationParams, flat: &[f64]) -> Result<ModulationParams> {
    let mut p = template.clone();
    p.assign_flat(flat)?;
    Ok(p)
}

/// Estimates the generator's Lipschitz constants in `z` (with `phi` fixed)
/// and in `phi` (with `z = probe.center`), over balls of the given radii.
pub fn empirical_lipschitz(
    generator: &Generator,
    probe: &LipschitzProbe,
    rng: &mut Rng,
) -> Result<LipschitzEstimate> {
    if probe.center.len() != generator.embed_dim() {
        return config_err(format!(
            "probe center has length {}, generator expects {}",
            probe.center.len(),
            generator.embed_dim()
        ));
    }
    if !(probe.z_radius > 0.0) || !(probe.phi_radius > 0.0) || probe.samples == 0 {
        return config_err("Lipschitz probe needs positive radii and at least one sample");
    }
    let template = ModulationParams::zeros(generator.arch());

    let l_z = search(
        &probe.center,
        probe.z_radius,
        probe,
        rng,
        |z| Ok(generator.generate(z)?.flatten()),
        |z, cot| Ok(generator.pullback(z, &as_projections(&template, cot)?)?.1),
    )?;

    let z = &probe.center;
    let with_phi = |phi: &[f64]| -> Result<Generator> {
        let mut g = generator.clone();
        g.assign_flat(phi)?;
        Ok(g)
    };
    let l_phi = search(
        &generator.flatten(),
        probe.phi_radius,
        probe,
        rng,
        |phi| Ok(with_phi(phi)?.generate(z)?.flatten()),
        |phi, cot| {
            Ok(with_phi(phi)?
                .pullback(z, &as_projections(&template, cot)?)?
                .0
                .flatten())
        },
    )?;

    Ok(LipschitzEstimate {
        l_z,
        l_phi,
        pairs: 2 * probe.samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypernet::{Activation, HyperNet, HyperNetConfig};
    use crate::model::Arch;
    use crate::numcore::Matrix;

    fn arch() -> Arch {
        Arch {
            input_dim: 8,
            width: 3,
            blocks: 2,
            focal_levels: 1,
            tokens: 2,
            num_classes: 3,
        }
    }

    fn probe(dim: usize) -> LipschitzProbe {
        LipschitzProbe {
            center: vec![0.0; dim],
            z_radius: 1.0,
            phi_radius: 0.1,
            samples: 4,
            power_steps: 30,
        }
    }

    #[test]
    fn zero_generator_is_flat_in_z() {
        let cfg = HyperNetConfig {
            embed_dim: 4,
            hidden: 5,
            ..HyperNetConfig::default()
        };
        for rank in [None, Some(2)] {
            let g = Generator::zeros(&arch(), &HyperNetConfig { rank, ..cfg }).unwrap();
            let est = empirical_lipschitz(&g, &probe(4), &mut Rng::new(0)).unwrap();
            assert_eq!(est.l_z, 0.0);
        }
    }

    /// Spectral norm of the stacked Jacobian of a linear generator, by power
    /// iteration on the explicitly multiplied weight matrices.
    fn spectral_norm_oracle(net: &HyperNet) -> f64 {
        let mut trunk = Matrix::identity(net.config.embed_dim);
        for layer in &net.trunk {
            trunk = trunk.matmul(&layer.weight).unwrap();
        }
        let blocks: Vec<Matrix> = net
            .heads
            .iter()
            .map(|h| trunk.matmul(&h.weight).unwrap())
            .collect();
        // J J^T (D x D) = sum over heads of B_k B_k^T.
        let d = net.config.embed_dim;
        let mut gram = Matrix::zeros(d, d);
        for b in &blocks {
            gram.axpy(1.0, &b.matmul(&b.transpose()).unwrap());
        }
        let mut v = Matrix::filled(d, 1, 1.0);
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = gram.matmul(&v).unwrap();
            lambda = w.frobenius_norm();
            v = w;
            v.scale(1.0 / lambda);
        }
        lambda.sqrt()
    }

    #[test]
    fn linear_generator_agrees_with_the_spectral_norm() {
        for seed in 0..3 {
            let cfg = HyperNetConfig {
                embed_dim: 5,
                hidden: 7,
                depth: 2,
                activation: Activation::Identity,
                rank: None,
            };
            let net = HyperNet::random(&arch(), &cfg, &mut Rng::new(seed)).unwrap();
            let oracle = spectral_norm_oracle(&net);
            let est =
                empirical_lipschitz(&Generator::Full(net), &probe(5), &mut Rng::new(10 + seed))
                    .unwrap();
            assert!(
                (est.l_z - oracle).abs() <= 0.05 * oracle,
                "{} vs {oracle}",
                est.l_z
            );
            assert!(est.l_z <= oracle * (1.0 + 1e-6));
        }
    }

    #[test]
    fn estimates_are_finite_on_the_default_generators() {
        let arch = Arch::default();
        for rank in [None, Some(2)] {
            let cfg = HyperNetConfig {
                rank,
                ..HyperNetConfig::default()
            };
            let g = Generator::random(&arch, &cfg, &mut Rng::new(1)).unwrap();
            let probe = LipschitzProbe {
                samples: 2,
                power_steps: 2,
                ..probe(cfg.embed_dim)
            };
            let est = empirical_lipschitz(&g, &probe, &mut Rng::new(2)).unwrap();
            assert!(est.l_z.is_finite() && est.l_z > 0.0);
            assert!(est.l_phi.is_finite() && est.l_phi > 0.0);
        }
    }

    #[test]
    fn probe_must_match_the_embedding_size() {
        let g = Generator::zeros(&arch(), &HyperNetConfig::default()).unwrap();
        assert!(empirical_lipschitz(&g, &probe(3), &mut Rng::new(0)).is_err());
    }
}
