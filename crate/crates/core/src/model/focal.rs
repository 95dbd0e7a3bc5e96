//! Reference focal block: forward and reverse-mode passes.
//!
//! Per block, with token matrix `X` (`n*T x d`):
//!
//! ```text
//! Q  = X Pq            C  = X Pk
//! C_l = windowed mean of C over radius l (l = 1..F), plus the global mean
//! G  = softmax_rows(X Wg)                (one gate per level and token)
//! A  = sum_l G[:, l] * C_l
//! Y  = X + (Q ⊙ (A Pv)) Wo
//! out = LayerNorm(Y)
//! ```
//!
//! After the last block the tokens of each sample are mean-pooled and fed to
//! a linear head.

use super::params::{Arch, BlockShared, ModelParams, ProjectionSet};
use super::Batch;
use crate::error::{config_err, Error, Result};
use crate::numcore::{Matrix, ParamSet};

const NORM_EPS: f64 = 1e-5;

struct BlockCache {
    input: Matrix,
    query: Matrix,
    levels: Vec<Matrix>,
    gates: Matrix,
    aggregate: Matrix,
    modulator: Matrix,
    interaction: Matrix,
    normed: Matrix,
    inv_std: Vec<f64>,
}

/// Activations retained by [`forward`] for the backward pass.
pub struct ForwardCache {
    inputs: Matrix,
    blocks: Vec<BlockCache>,
    pooled: Matrix,
    /// Row-wise softmax of the logits.
    pub probs: Matrix,
}

/// Radii of the focal levels: `1..=F`, then `T` for the global level.
fn level_radii(arch: &Arch) -> Vec<usize> {
    (1..=arch.focal_levels)
        .chain(std::iter::once(arch.tokens))
        .collect()
}

fn window(t: usize, radius: usize, tokens: usize) -> (usize, usize) {
    (t.saturating_sub(radius), (t + radius).min(tokens - 1))
}

fn window_means(c: &Matrix, tokens: usize, radius: usize) -> Matrix {
    let d = c.cols();
    let n = c.rows() / tokens;
    let mut out = Matrix::zeros(c.rows(), d);
    for r in 0..n {
        for t in 0..tokens {
            let (lo, hi) = window(t, radius, tokens);
            let inv = 1.0 / (hi - lo + 1) as f64;
            let row = out.row_mut(r * tokens + t);
            for s in lo..=hi {
                for (o, v) in row.iter_mut().zip(c.row(r * tokens + s)) {
                    *o += v * inv;
                }
            }
        }
    }
    out
}

/// Adjoint of [`window_means`], accumulated into `dc`.
fn window_means_backward(dlevel: &Matrix, tokens: usize, radius: usize, dc: &mut Matrix) {
    let n = dlevel.rows() / tokens;
    for r in 0..n {
        for t in 0..tokens {
            let (lo, hi) = window(t, radius, tokens);
            let inv = 1.0 / (hi - lo + 1) as f64;
            let src = dlevel.row(r * tokens + t);
            for s in lo..=hi {
                for (o, v) in dc.row_mut(r * tokens + s).iter_mut().zip(src) {
                    *o += v * inv;
                }
            }
        }
    }
}

pub(crate) fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn embed_tokens(arch: &Arch, embed: &Matrix, inputs: &Matrix) -> Matrix {
    let (t_count, seg, d) = (arch.tokens, arch.segment(), arch.width);
    let mut x = Matrix::zeros(inputs.rows() * t_count, d);
    for r in 0..inputs.rows() {
        let sample = inputs.row(r);
        for t in 0..t_count {
            let row = x.row_mut(r * t_count + t);
            for j in t * seg..(t + 1) * seg {
                let a = sample[j];
                for (o, e) in row.iter_mut().zip(embed.row(j)) {
                    *o += a * e;
                }
            }
        }
    }
    x
}

fn block_forward(
    arch: &Arch,
    x: Matrix,
    proj: &ProjectionSet,
    shared: &BlockShared,
    radii: &[usize],
) -> (Matrix, BlockCache) {
    let query = x.mm(&proj.query);
    let context = x.mm(&proj.context);
    let levels: Vec<Matrix> = radii
        .iter()
        .map(|&r| window_means(&context, arch.tokens, r))
        .collect();
    let gates = softmax_rows(&x.mm(&shared.gate));

    let mut aggregate = Matrix::zeros(x.rows(), arch.width);
    for i in 0..x.rows() {
        let g = gates.row(i).to_vec();
        let row = aggregate.row_mut(i);
        for (l, level) in levels.iter().enumerate() {
            for (o, c) in row.iter_mut().zip(level.row(i)) {
                *o += g[l] * c;
            }
        }
    }
    let modulator = aggregate.mm(&proj.value);
    let interaction = query.hadamard(&modulator);
    let mut y = interaction.mm(&shared.out);
    y.axpy(1.0, &x);

    let d = arch.width;
    let mut normed = Matrix::zeros(y.rows(), d);
    let mut out = Matrix::zeros(y.rows(), d);
    let mut inv_std = Vec::with_capacity(y.rows());
    let (scale, shift) = (shared.norm_scale.as_slice(), shared.norm_shift.as_slice());
    for i in 0..y.rows() {
        let row = y.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(is);
        let nrow = normed.row_mut(i);
        for (nv, v) in nrow.iter_mut().zip(row) {
            *nv = (v - mean) * is;
        }
        let nrow = normed.row(i).to_vec();
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = scale[k] * nrow[k] + shift[k];
        }
    }
    let cache = BlockCache {
        input: x,
        query,
        levels,
        gates,
        aggregate,
        modulator,
        interaction,
        normed,
        inv_std,
    };
    (out, cache)
}

fn check_inputs(params: &ModelParams, batch: &Batch) -> Result<()> {
    let arch = params.arch();
    arch.validate()?;
    params.p.check(arch)?;
    if batch.inputs.cols() != arch.input_dim {
        return config_err(format!(
            "batch has {} features, model expects {}",
            batch.inputs.cols(),
            arch.input_dim
        ));
    }
    if batch.labels.iter().any(|&y| y >= arch.num_classes) {
        return config_err("label out of range");
    }
    Ok(())
}

/// Logits (`n x num_classes`) and the activations needed by [`backward`].
pub fn forward(params: &ModelParams, batch: &Batch) -> Result<(Matrix, ForwardCache)> {
    check_inputs(params, batch)?;
    let arch = *params.arch();
    let radii = level_radii(&arch);
    let mut x = embed_tokens(&arch, &params.xi.embed, &batch.inputs);
    let mut caches = Vec::with_capacity(arch.blocks);
    for (b, (proj, shared)) in params.p.blocks.iter().zip(&params.xi.blocks).enumerate() {
        let (out, cache) = block_forward(&arch, x, proj, shared, &radii);
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("activation in focal block {b}")));
        }
        caches.push(cache);
        x = out;
    }
    let n = batch.len();
    let mut pooled = Matrix::zeros(n, arch.width);
    let inv_t = 1.0 / arch.tokens as f64;
    for r in 0..n {
        for t in 0..arch.tokens {
            let src = x.row(r * arch.tokens + t).to_vec();
            for (o, v) in pooled.row_mut(r).iter_mut().zip(&src) {
                *o += v * inv_t;
            }
        }
    }
    let mut logits = pooled.mm(&params.xi.head);
    let bias = params.xi.head_bias.as_slice();
    for r in 0..n {
        for (o, b) in logits.row_mut(r).iter_mut().zip(bias) {
            *o += b;
        }
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let probs = softmax_rows(&logits);
    Ok((
        logits,
        ForwardCache {
            inputs: batch.inputs.clone(),
            blocks: caches,
            pooled,
            probs,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn block_backward(
    arch: &Arch,
    cache: &BlockCache,
    proj: &ProjectionSet,
    shared: &BlockShared,
    radii: &[usize],
    dout: &Matrix,
    gproj: &mut ProjectionSet,
    gshared: &mut BlockShared,
) -> Matrix {
    let d = arch.width;
    let rows = dout.rows();
    let scale = shared.norm_scale.as_slice();

    // Layer norm.
    let mut dy = Matrix::zeros(rows, d);
    {
        let gs = gshared.norm_scale.as_mut_slice();
        for i in 0..rows {
            let (g, nrm) = (dout.row(i), cache.normed.row(i));
            for k in 0..d {
                gs[k] += g[k] * nrm[k];
            }
        }
        let gb = gshared.norm_shift.as_mut_slice();
        for i in 0..rows {
            for (o, g) in gb.iter_mut().zip(dout.row(i)) {
                *o += g;
            }
        }
        let mut dn = vec![0.0; d];
        for i in 0..rows {
            let (g, nrm) = (dout.row(i), cache.normed.row(i));
            for k in 0..d {
                dn[k] = g[k] * scale[k];
            }
            let mean_dn = dn.iter().sum::<f64>() / d as f64;
            let mean_dn_n = dn.iter().zip(nrm).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let is = cache.inv_std[i];
            for (k, o) in dy.row_mut(i).iter_mut().enumerate() {
                *o = is * (dn[k] - mean_dn - nrm[k] * mean_dn_n);
            }
        }
    }

    // Residual and output projection.
    let mut dx = dy.clone();
    gshared.out.axpy(1.0, &cache.interaction.tmm(&dy));
    let dinter = dy.mmt(&shared.out);

    let dquery = dinter.hadamard(&cache.modulator);
    let dmod = dinter.hadamard(&cache.query);
    gproj.value.axpy(1.0, &cache.aggregate.tmm(&dmod));
    let dagg = dmod.mmt(&proj.value);

    // Gated level sum.
    let levels = cache.levels.len();
    let mut dgate_logits = Matrix::zeros(rows, levels);
    let mut dlevels: Vec<Matrix> = (0..levels).map(|_| Matrix::zeros(rows, d)).collect();
    let mut dg = vec![0.0; levels];
    for i in 0..rows {
        let g = cache.gates.row(i);
        let da = dagg.row(i);
        for l in 0..levels {
            dg[l] = da
                .iter()
                .zip(cache.levels[l].row(i))
                .map(|(a, c)| a * c)
                .sum();
            for (o, a) in dlevels[l].row_mut(i).iter_mut().zip(da) {
                *o += g[l] * a;
            }
        }
        let inner: f64 = g.iter().zip(&dg).map(|(a, b)| a * b).sum();
        for (l, o) in dgate_logits.row_mut(i).iter_mut().enumerate() {
            *o = g[l] * (dg[l] - inner);
        }
    }
    gshared.gate.axpy(1.0, &cache.input.tmm(&dgate_logits));
    dx.axpy(1.0, &dgate_logits.mmt(&shared.gate));

    let mut dcontext = Matrix::zeros(rows, d);
    for (dl, &r) in dlevels.iter().zip(radii) {
        window_means_backward(dl, arch.tokens, r, &mut dcontext);
    }
    gproj.context.axpy(1.0, &cache.input.tmm(&dcontext));
    dx.axpy(1.0, &dcontext.mmt(&proj.context));

    gproj.query.axpy(1.0, &cache.input.tmm(&dquery));
    dx.axpy(1.0, &dquery.mmt(&proj.query));
    dx
}

/// Reverse pass: gradient of a scalar loss with respect to every parameter,
/// given the cotangent `dlogits` of that loss with respect to the logits.
pub fn backward(params: &ModelParams, cache: &ForwardCache, dlogits: &Matrix) -> ModelParams {
    let arch = *params.arch();
    let radii = level_radii(&arch);
    let mut grad = params.zeros_like();
    let n = dlogits.rows();

    grad.xi.head = cache.pooled.tmm(dlogits);
    grad.xi.head_bias = dlogits.column_sums();
    let dpooled = dlogits.mmt(&params.xi.head);

    let inv_t = 1.0 / arch.tokens as f64;
    let mut dx = Matrix::zeros(n * arch.tokens, arch.width);
    for r in 0..n {
        for t in 0..arch.tokens {
            for (o, g) in dx
                .row_mut(r * arch.tokens + t)
                .iter_mut()
                .zip(dpooled.row(r))
            {
                *o = g * inv_t;
            }
        }
    }

    for b in (0..arch.blocks).rev() {
        dx = block_backward(
            &arch,
            &cache.blocks[b],
            &params.p.blocks[b],
            &params.xi.blocks[b],
            &radii,
            &dx,
            &mut grad.p.blocks[b],
            &mut grad.xi.blocks[b],
        );
    }

    let seg = arch.segment();
    for r in 0..n {
        let sample = cache.inputs.row(r);
        for t in 0..arch.tokens {
            let g = dx.row(r * arch.tokens + t).to_vec();
            for j in t * seg..(t + 1) * seg {
                let a = sample[j];
                if a == 0.0 {
                    continue;
                }
                for (o, v) in grad.xi.embed.row_mut(j).iter_mut().zip(&g) {
                    *o += a * v;
                }
            }
        }
    }
    grad
}

/// Mean cross-entropy of `probs` against `labels`, and its logit cotangent.
pub(crate) fn cross_entropy(probs: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs.get(i, y).max(f64::MIN_POSITIVE).ln();
        let row = dlogits.row_mut(i);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }
    (loss / n, dlogits)
}

/// Mean cross-entropy loss and its exact gradient.
pub fn loss_and_grad(params: &ModelParams, batch: &Batch) -> Result<(f64, ModelParams)> {
    let (_, cache) = forward(params, batch)?;
    let (loss, dlogits) = cross_entropy(&cache.probs, &batch.labels);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, backward(params, &cache, &dlogits)))
}

/// Mean cross-entropy loss only.
pub fn loss(params: &ModelParams, batch: &Batch) -> Result<f64> {
    let (_, cache) = forward(params, batch)?;
    Ok(cross_entropy(&cache.probs, &batch.labels).0)
}

/// `theta <- theta - lr * grad`, on both the `P` and `xi` blocks.
pub fn sgd_step(params: &mut ModelParams, grad: &ModelParams, lr: f64) {
    params.axpy(-lr, grad);
}

/// Gate distributions of every block (each row sums to one), for inspection.
pub fn gate_distributions(params: &ModelParams, batch: &Batch) -> Result<Vec<Matrix>> {
    let (_, cache) = forward(params, batch)?;
    Ok(cache.blocks.into_iter().map(|b| b.gates).collect())
}
