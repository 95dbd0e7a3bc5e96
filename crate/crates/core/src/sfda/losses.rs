use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::{argmax, backward, forward, softmax_rows, Batch, ModelParams};
use crate::numcore::Matrix;

/// Per-feature first and second moments of a set of inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleDescriptor {
    pub mean: Vec<f64>,
    /// Population standard deviation, `>= 0`.
    pub std: Vec<f64>,
}

pub fn extract_style(inputs: &Matrix) -> Result<StyleDescriptor> {
    let n = inputs.rows();
    if n == 0 {
        return config_err("cannot extract a style from an empty shard");
    }
    let mean: Vec<f64> = inputs
        .column_sums()
        .as_slice()
        .iter()
        .map(|s| s / n as f64)
        .collect();
    let mut var = vec![0.0; inputs.cols()];
    for i in 0..n {
        for ((v, x), m) in var.iter_mut().zip(inputs.row(i)).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.into_iter().map(|v| (v / n as f64).sqrt()).collect();
    Ok(StyleDescriptor { mean, std })
}

/// Re-styles source inputs: each feature is standardized with the source
/// moments and rescaled to the target moments. Features whose source
/// standard deviation is zero are passed through unchanged.
pub fn apply_style(
    inputs: &Matrix,
    source: &StyleDescriptor,
    target: &StyleDescriptor,
) -> Result<Matrix> {
    let dim = inputs.cols();
    if [
        source.mean.len(),
        source.std.len(),
        target.mean.len(),
        target.std.len(),
    ]
    .iter()
    .any(|&l| l != dim)
    {
        return config_err(format!("style descriptors must have {dim} features"));
    }
    let mut out = inputs.clone();
    for i in 0..out.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            if source.std[j] > 0.0 {
                *v = target.std[j] * (*v - source.mean[j]) / source.std[j] + target.mean[j];
            }
        }
    }
    Ok(out)
}

/// Samples whose largest teacher probability reaches `tau`, with their
/// argmax labels (lowest index wins ties).
pub fn pseudo_labels_from_logits(teacher_logits: &Matrix, tau: f64) -> (Vec<usize>, Vec<usize>) {
    let probs = softmax_rows(teacher_logits);
    let mut kept = Vec::new();
    let mut labels = Vec::new();
    for i in 0..probs.rows() {
        let row = probs.row(i);
        let best = argmax(row);
        if row[best] >= tau {
            kept.push(i);
            labels.push(best);
        }
    }
    (kept, labels)
}

/// Forward pass on unlabeled inputs (the model never reads the labels).
pub(crate) fn logits_of(params: &ModelParams, inputs: &Matrix) -> Result<Matrix> {
    let batch = unlabeled(inputs)?;
    Ok(forward(params, &batch)?.0)
}

fn unlabeled(inputs: &Matrix) -> Result<Batch> {
    Batch::new(inputs.clone(), vec![0; inputs.rows()])
}

/// Pseudo-labels for `inputs` from the teacher model.
pub fn pseudo_labels(
    teacher: &ModelParams,
    inputs: &Matrix,
    tau: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    Ok(pseudo_labels_from_logits(&logits_of(teacher, inputs)?, tau))
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return config_err(format!(
            "distillation temperature must be positive, got {temperature}"
        ));
    }
    Ok(())
}

fn scaled(logits: &Matrix, temperature: f64) -> Matrix {
    let mut out = logits.clone();
    out.scale(1.0 / temperature);
    out
}

/// `T^2 KL(softmax(teacher / T) || softmax(student / T))`, averaged over rows,
/// and its gradient with respect to the student logits.
pub fn kd_loss_and_grad(
    student: &Matrix,
    teacher: &Matrix,
    temperature: f64,
) -> Result<(f64, Matrix)> {
    check_temperature(temperature)?;
    if student.shape() != teacher.shape() || student.rows() == 0 {
        return config_err(format!(
            "distillation needs equal non-empty logit shapes, got {:?} and {:?}",
            student.shape(),
            teacher.shape()
        ));
    }
    let n = student.rows() as f64;
    let p = softmax_rows(&scaled(teacher, temperature));
    let q = softmax_rows(&scaled(student, temperature));
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(student.rows(), student.cols());
    for i in 0..student.rows() {
        for ((g, &pi), &qi) in grad.row_mut(i).iter_mut().zip(p.row(i)).zip(q.row(i)) {
            if pi > 0.0 {
                loss += pi * (pi.ln() - qi.ln());
            }
            *g = temperature * (qi - pi) / n;
        }
    }
    Ok((temperature * temperature * loss / n, grad))
}

pub fn kd_loss(student: &Matrix, teacher: &Matrix, temperature: f64) -> Result<f64> {
    Ok(kd_loss_and_grad(student, teacher, temperature)?.0)
}

/// The adaptation objective's hyperparameters and schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfdaConfig {
    /// Weight of the distillation term.
    pub lambda_kd: f64,
    /// Confidence threshold for keeping a pseudo-label.
    pub tau: f64,
    pub temperature: f64,
    /// Rounds between teacher snapshots.
    pub omega: usize,
    /// First round at which the teacher takes a snapshot.
    pub t_start: usize,
    /// Adaptation rounds after pre-training.
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Server-side epochs over the styled source pool.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for SfdaConfig {
    fn default() -> Self {
        Self {
            lambda_kd: 1.0,
            tau: 0.9,
            temperature: 2.0,
            omega: 5,
            t_start: 10,
            rounds: 100,
            local_epochs: 2,
            lr: 0.1,
            batch_size: 32,
            pretrain_epochs: 20,
            pretrain_lr: 0.02,
        }
    }
}

impl SfdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kd >= 0.0) || !self.lambda_kd.is_finite() {
            return config_err(format!(
                "sfda.lambda_kd must be finite and >= 0, got {}",
                self.lambda_kd
            ));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return config_err(format!("sfda.tau must lie in [0, 1], got {}", self.tau));
        }
        check_temperature(self.temperature)?;
        if self.omega == 0 {
            return config_err("sfda.omega must be positive");
        }
        if self.batch_size == 0 {
            return config_err("sfda.batch_size must be positive");
        }
        for (name, v) in [("lr", self.lr), ("pretrain_lr", self.pretrain_lr)] {
            if !(v >= 0.0) || !v.is_finite() {
                return config_err(format!("sfda.{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Value and gradient of `L_pseudo + lambda_kd * L_kd` on one batch.
#[derive(Clone, Debug)]
pub struct SfdaLoss {
    pub total: f64,
    /// Cross-entropy on the pseudo-labeled subset (0 when nothing is kept).
    pub pseudo: f64,
    pub kd: f64,
    pub kept: usize,
    pub grad: ModelParams,
}

/// Student loss against a fixed teacher on unlabeled `inputs`.
pub fn sfda_loss_and_grad(
    student: &ModelParams,
    teacher: &ModelParams,
    inputs: &Matrix,
    cfg: &SfdaConfig,
) -> Result<SfdaLoss> {
    let teacher_logits = logits_of(teacher, inputs)?;
    let (kept, labels) = pseudo_labels_from_logits(&teacher_logits, cfg.tau);
    let batch = unlabeled(inputs)?;
    let (student_logits, cache) = forward(student, &batch)?;

    let mut dlogits = Matrix::zeros(student_logits.rows(), student_logits.cols());
    let mut pseudo = 0.0;
    if !kept.is_empty() {
        let m = kept.len() as f64;
        for (&i, &y) in kept.iter().zip(&labels) {
            let probs = cache.probs.row(i);
            pseudo -= probs[y].max(f64::MIN_POSITIVE).ln() / m;
            for (k, (g, p)) in dlogits.row_mut(i).iter_mut().zip(probs).enumerate() {
                *g += (p - if k == y { 1.0 } else { 0.0 }) / m;
            }
        }
    }
    let (kd, kd_grad) = kd_loss_and_grad(&student_logits, &teacher_logits, cfg.temperature)?;
    dlogits.axpy(cfg.lambda_kd, &kd_grad);
    let grad = backward(student, &cache, &dlogits);
    Ok(SfdaLoss {
        total: pseudo + cfg.lambda_kd * kd,
        pseudo,
        kd,
        kept: kept.len(),
        grad,
    })
}
