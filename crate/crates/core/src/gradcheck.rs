//! Gradient suites comparing every hand-written backward pass against
//! central finite differences on small random instances.
//!
//! Each suite reports the worst relative error
//! `|analytic - numeric| / (|analytic| + 1e-8)` over all coordinates. The
//! numeric side is a Richardson-extrapolated central difference at step
//! `3e-4`: the hypernetwork path has derivatives down to `1e-9`, where a
//! plain central difference is roundoff-bound at any step. Embeddings are
//! drawn away from the trunk's ReLU kinks so that no perturbation crosses one.

use serde::Serialize;

use crate::error::{config_err, Result};
use crate::federation::embedding_loss_and_grad;
use crate::hypernet::{Generator, HyperNetConfig};
use crate::model::{
    backward, forward, loss, loss_and_grad, Arch, Batch, ModelParams, SharedParams,
};
use crate::numcore::{finite_diff_grad, Matrix, ParamSet, Rng};

/// Threshold a suite must stay under to pass.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 3e-4;
const FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub suite: String,
    pub seed: u64,
    pub scalars: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

/// `d = 4`, `B = 2` instance used by every suite.
pub fn gradcheck_arch() -> Arch {
    Arch {
        input_dim: 8,
        width: 4,
        blocks: 2,
        focal_levels: 2,
        tokens: 4,
        num_classes: 3,
    }
}

fn gradcheck_hyper(rank: Option<usize>) -> HyperNetConfig {
    HyperNetConfig {
        embed_dim: 3,
        hidden: 6,
        depth: 2,
        rank,
        ..HyperNetConfig::default()
    }
}

/// Pre-activations closer to zero than this are re-drawn; it leaves room
/// for a step to move a unit by `STEP` times an O(10) input.
const KINK_MARGIN: f64 = 50.0 * STEP;

/// Richardson-extrapolated central difference, `(4 D(h/2) - D(h)) / 3`,
/// which cancels the `h^2` error term so a step large enough to keep
/// roundoff small stays accurate on derivatives near the `1e-8` floor.
fn numeric_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let coarse = finite_diff_grad(&mut f, x, h)?;
    let fine = finite_diff_grad(&mut f, x, h / 2.0)?;
    Ok(fine
        .iter()
        .zip(&coarse)
        .map(|(a, b)| (4.0 * a - b) / 3.0)
        .collect())
}

fn smooth_embedding(generator: &Generator, rng: &mut Rng) -> Result<Vec<f64>> {
    for _ in 0..1000 {
        let z: Vec<f64> = (0..generator.embed_dim()).map(|_| rng.gaussian()).collect();
        if generator.kink_margin(&z) > KINK_MARGIN {
            return Ok(z);
        }
    }
    config_err("no embedding found away from the trunk's kinks")
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + FLOOR))
        .fold(0.0, f64::max)
}

fn random_batch(arch: &Arch, n: usize, rng: &mut Rng) -> Result<Batch> {
    let data = (0..n * arch.input_dim).map(|_| rng.gaussian()).collect();
    let labels = (0..n).map(|_| rng.below(arch.num_classes)).collect();
    Batch::new(Matrix::from_vec(n, arch.input_dim, data)?, labels)
}

fn check(suite: &str, seed: u64, analytic: &[f64], numeric: &[f64]) -> GradCheck {
    GradCheck {
        suite: suite.to_string(),
        seed,
        scalars: analytic.len(),
        max_rel_err: max_rel_err(analytic, numeric),
    }
}

/// All model parameters (`P` and `xi`).
pub fn check_model(seed: u64) -> Result<GradCheck> {
    let arch = gradcheck_arch();
    let mut rng = Rng::new(seed);
    let theta = ModelParams::random(&arch, &mut rng);
    let batch = random_batch(&arch, 3, &mut rng)?;
    let (_, grad) = loss_and_grad(&theta, &batch)?;
    let numeric = numeric_grad(
        |x| {
            ModelParams::join(&arch, x)
                .and_then(|t| loss(&t, &batch))
                .unwrap_or(f64::NAN)
        },
        &theta.flatten(),
        STEP,
    )?;
    Ok(check("model", seed, &grad.flatten(), &numeric))
}

/// Loss of the generated model with respect to the generator weights and
/// the embedding: the model backward pass chained into the pullback.
fn check_generator(suite: &str, rank: Option<usize>, seed: u64) -> Result<GradCheck> {
    let arch = gradcheck_arch();
    let mut rng = Rng::new(seed);
    let generator = Generator::random(&arch, &gradcheck_hyper(rank), &mut rng)?;
    let xi = SharedParams::random(&arch, &mut rng);
    let z = smooth_embedding(&generator, &mut rng)?;
    let batch = random_batch(&arch, 3, &mut rng)?;

    let params = ModelParams {
        p: generator.generate(&z)?,
        xi: xi.clone(),
    };
    let (_, cache) = forward(&params, &batch)?;
    let (_, dlogits) = crate::model::cross_entropy(&cache.probs, &batch.labels);
    let grad = backward(&params, &cache, &dlogits);
    let (g_phi, g_z) = generator.pullback(&z, &grad.p)?;

    let objective = |g: &Generator, z: &[f64]| -> f64 {
        g.generate(z)
            .and_then(|p| loss(&ModelParams { p, xi: xi.clone() }, &batch))
            .unwrap_or(f64::NAN)
    };
    let mut probe = generator.clone();
    let num_phi = numeric_grad(
        |flat| {
            probe.assign_flat(flat).expect("same layout");
            objective(&probe, &z)
        },
        &generator.flatten(),
        STEP,
    )?;
    let num_z = numeric_grad(|zz| objective(&generator, zz), &z, STEP)?;

    let mut analytic = g_phi.flatten();
    analytic.extend(&g_z);
    let mut numeric = num_phi;
    numeric.extend(num_z);
    Ok(check(suite, seed, &analytic, &numeric))
}

pub fn check_hypernet_full(seed: u64) -> Result<GradCheck> {
    check_generator("hypernet-full", None, seed)
}

pub fn check_hypernet_lowrank(seed: u64) -> Result<GradCheck> {
    check_generator("hypernet-lowrank", Some(2), seed)
}

/// The novel-client path: loss with respect to the embedding alone.
pub fn check_embedding(seed: u64) -> Result<GradCheck> {
    let arch = gradcheck_arch();
    let mut rng = Rng::new(seed);
    let generator = Generator::random(&arch, &gradcheck_hyper(None), &mut rng)?;
    let xi = SharedParams::random(&arch, &mut rng);
    let z = smooth_embedding(&generator, &mut rng)?;
    let batch = random_batch(&arch, 4, &mut rng)?;
    let (_, dz) = embedding_loss_and_grad(&generator, &xi, &z, &batch)?;
    let numeric = numeric_grad(
        |zz| embedding_loss_and_grad(&generator, &xi, zz, &batch).map_or(f64::NAN, |r| r.0),
        &z,
        STEP,
    )?;
    Ok(check("embedding", seed, &dz, &numeric))
}

/// Every suite on `instances` consecutive seeds starting at `seed`.
pub fn run_gradient_suites(seed: u64, instances: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for s in seed..seed + instances {
        out.push(check_model(s)?);
        out.push(check_hypernet_full(s)?);
        out.push(check_hypernet_lowrank(s)?);
        out.push(check_embedding(s)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_the_floor() {
        assert_eq!(max_rel_err(&[0.0], &[0.0]), 0.0);
        assert!((max_rel_err(&[1e-9], &[2e-9]) - 1.0 / 11.0).abs() < 1e-12);
        assert!((max_rel_err(&[2.0], &[1.0]) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn extrapolation_cancels_the_second_order_term() {
        // d/dx x^5 at 1.5 is 25.3125; a plain central difference at h = 0.01
        // is off by 10 x^3 h^2 / 6 ~ 5.6e-4, the extrapolated one by O(h^4).
        let f = |x: &[f64]| x[0].powi(5);
        let plain = finite_diff_grad(f, &[1.5], 0.01).unwrap()[0];
        let extrapolated = numeric_grad(f, &[1.5], 0.01).unwrap()[0];
        assert!((plain - 25.3125).abs() > 1e-4);
        assert!((extrapolated - 25.3125).abs() < 1e-7);
    }

    #[test]
    fn embeddings_avoid_kinks() {
        let arch = gradcheck_arch();
        let mut rng = Rng::new(9);
        let generator = Generator::random(&arch, &gradcheck_hyper(None), &mut rng).unwrap();
        for _ in 0..20 {
            let z = smooth_embedding(&generator, &mut rng).unwrap();
            assert!(generator.kink_margin(&z) > KINK_MARGIN);
        }
    }

    #[test]
    fn suites_pass_and_detect_a_broken_gradient() {
        for c in run_gradient_suites(0, 1).unwrap() {
            assert!(c.passed(), "{c:?}");
            assert!(c.scalars > 0);
        }
        let wrong: Vec<f64> = vec![1.0, 2.0];
        assert!(max_rel_err(&wrong, &[1.0, 2.1]) > GRADCHECK_TOLERANCE);
    }
}
