use serde::{Deserialize, Serialize};

use super::state::{ClientState, ServerState};
use crate::error::{config_err, Error, Result};
use crate::hypernet::Generator;
use crate::model::{evaluate_batch, forward, Batch, ModelParams, SharedParams};
use crate::numcore::{Matrix, Rng};

/// Embedding-only fine-tuning schedule for an unseen client.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.05,
            batch_size: 32,
        }
    }
}

/// Trajectory of a novel-client adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptResult {
    pub embedding: Vec<f64>,
    /// Test accuracy after each epoch; entry 0 is the starting embedding.
    pub accuracy: Vec<f64>,
    pub loss: Vec<f64>,
}

/// Mean of the trained embeddings, used as the starting point for a new client.
pub fn prior_mean_embedding(embeddings: &Matrix) -> Vec<f64> {
    embeddings
        .column_sums()
        .as_slice()
        .iter()
        .map(|s| s / embeddings.rows() as f64)
        .collect()
}

/// Loss of the generated model on `batch` and its gradient with respect to
/// the embedding only: the model's projection gradient pulled back through
/// the generator.
pub fn embedding_loss_and_grad(
    generator: &Generator,
    xi: &SharedParams,
    z: &[f64],
    batch: &Batch,
) -> Result<(f64, Vec<f64>)> {
    let params = ModelParams {
        p: generator.generate(z)?,
        xi: xi.clone(),
    };
    let (_, cache) = forward(&params, batch)?;
    let (loss, dlogits) = crate::model::cross_entropy(&cache.probs, &batch.labels);
    let grad = crate::model::backward(&params, &cache, &dlogits);
    let (_, dz) = generator.pullback(z, &grad.p)?;
    Ok((loss, dz))
}

/// Trains only a new embedding against the frozen generator and shared
/// weights, reporting test accuracy per epoch.
pub fn adapt_new_client(
    server: &ServerState,
    client: &ClientState,
    config: &AdaptConfig,
    rng: &mut Rng,
) -> Result<AdaptResult> {
    let Some((generator, embeddings)) = server.generator() else {
        return Err(Error::Protocol(format!(
            "novel-client adaptation needs a generator, strategy is {}",
            server.strategy
        )));
    };
    if client.train.is_empty() {
        return config_err("novel client has an empty shard");
    }
    if !(config.lr >= 0.0) || config.batch_size == 0 {
        return config_err("adapt needs lr >= 0 and a positive batch size");
    }
    let mut z = prior_mean_embedding(embeddings);
    let evaluate = |z: &[f64]| -> Result<(f64, f64)> {
        let params = ModelParams {
            p: generator.generate(z)?,
            xi: server.xi.clone(),
        };
        evaluate_batch(&params, &client.test)
    };
    let (loss0, acc0) = evaluate(&z)?;
    let (mut loss, mut accuracy) = (vec![loss0], vec![acc0]);
    let mut order: Vec<usize> = (0..client.train.len()).collect();
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let batch = client.train.select(chunk);
            let (_, dz) = embedding_loss_and_grad(generator, &server.xi, &z, &batch)?;
            for (zj, g) in z.iter_mut().zip(dz) {
                *zj -= config.lr * g;
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("novel-client embedding".into()));
        }
        let (l, a) = evaluate(&z)?;
        loss.push(l);
        accuracy.push(a);
    }
    Ok(AdaptResult {
        embedding: z,
        accuracy,
        loss,
    })
}
