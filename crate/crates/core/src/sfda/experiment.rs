use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{apply_style, extract_style, sfda_loss_and_grad, SfdaConfig, StyleDescriptor};
use super::teacher::TeacherState;
use crate::datagen::{random_rotation, LabeledPool};
use crate::error::{config_err, Error, Result};
use crate::federation::{worker_pool, MetricRecord, Strategy, METRICS_SCHEMA_VERSION};
use crate::model::{evaluate_batch, loss_and_grad, sgd_step, Arch, Batch, ModelParams};
use crate::numcore::{Matrix, ParamSet, Rng, Stream};

/// A labeled source domain and unlabeled target clients whose inputs went
/// through a shared domain rotation plus a per-client affine "style".
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoDomainSpec {
    pub num_clients: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub source_samples: usize,
    pub samples_per_client: usize,
    pub class_separation: f64,
    /// Angle (radians) of the source-to-target rotation in each plane.
    pub rotation: f64,
    /// Standard deviation of the per-feature log-scale of a client's style.
    pub style_scale: f64,
    /// Standard deviation of the per-feature offset of a client's style.
    pub style_shift: f64,
    /// Standard deviation of extra isotropic noise on target inputs.
    pub target_noise: f64,
    pub test_fraction: f64,
}

impl Default for TwoDomainSpec {
    fn default() -> Self {
        Self {
            num_clients: 4,
            num_classes: 10,
            input_dim: 32,
            source_samples: 3000,
            samples_per_client: 500,
            class_separation: 6.0,
            rotation: 0.6,
            style_scale: 0.3,
            style_shift: 1.0,
            target_noise: 0.0,
            test_fraction: 0.2,
        }
    }
}

/// A target client: unlabeled training inputs and a labeled test split that
/// is used for evaluation only.
#[derive(Clone, Debug)]
pub struct TargetClient {
    pub id: usize,
    pub unlabeled: Matrix,
    pub test: Batch,
}

#[derive(Clone, Debug)]
pub struct TwoDomainTask {
    pub source: LabeledPool,
    pub clients: Vec<TargetClient>,
}

/// Rotation by `angle` in `dim / 2` orthogonal planes of a random basis.
fn plane_rotation(dim: usize, angle: f64, rng: &mut Rng) -> Result<Matrix> {
    let basis = random_rotation(dim, rng);
    let mut planes = Matrix::identity(dim);
    let (c, s) = (angle.cos(), angle.sin());
    for p in 0..dim / 2 {
        let (i, j) = (2 * p, 2 * p + 1);
        planes.set(i, i, c);
        planes.set(i, j, -s);
        planes.set(j, i, s);
        planes.set(j, j, c);
    }
    basis.transpose().matmul(&planes)?.matmul(&basis)
}

pub fn make_two_domain(spec: &TwoDomainSpec, seed: u64) -> Result<TwoDomainTask> {
    if spec.num_clients == 0 || spec.num_classes < 2 || spec.input_dim == 0 {
        return config_err("two-domain task needs clients, >= 2 classes and a positive input_dim");
    }
    if spec.source_samples < spec.num_classes || spec.samples_per_client < 2 {
        return config_err(
            "two-domain task needs every class in the source and >= 2 samples per client",
        );
    }
    let mut world = Rng::derive(seed, Stream::Sfda, u64::MAX);
    let (k, dim) = (spec.num_classes, spec.input_dim);
    let spread = spec.class_separation / (2.0 * dim as f64).sqrt();
    let mut means = Matrix::zeros(k, dim);
    for v in means.as_mut_slice() {
        *v = spread * world.gaussian();
    }
    let rotation = plane_rotation(dim, spec.rotation, &mut world)?;

    let sample = |n: usize, rng: &mut Rng| -> (Matrix, Vec<usize>) {
        let mut labels: Vec<usize> = (0..n).map(|j| j % k).collect();
        rng.shuffle(&mut labels);
        let mut x = Matrix::zeros(n, dim);
        for (j, &l) in labels.iter().enumerate() {
            for (v, m) in x.row_mut(j).iter_mut().zip(means.row(l)) {
                *v = m + rng.gaussian();
            }
        }
        (x, labels)
    };

    let mut rng = Rng::derive(seed, Stream::Sfda, u64::MAX - 1);
    let (x, y) = sample(spec.source_samples, &mut rng);
    let source = LabeledPool::new(x, y, k)?;

    let mut clients = Vec::with_capacity(spec.num_clients);
    for id in 0..spec.num_clients {
        let mut rng = Rng::derive(seed, Stream::Sfda, id as u64);
        let scale: Vec<f64> = (0..dim)
            .map(|_| (spec.style_scale * rng.gaussian()).exp())
            .collect();
        let shift: Vec<f64> = (0..dim)
            .map(|_| spec.style_shift * rng.gaussian())
            .collect();
        let (x, y) = sample(spec.samples_per_client, &mut rng);
        let mut x = x.matmul(&rotation)?;
        for i in 0..x.rows() {
            for ((v, a), b) in x.row_mut(i).iter_mut().zip(&scale).zip(&shift) {
                *v = a * (*v + spec.target_noise * rng.gaussian()) + b;
            }
        }
        let n = x.rows();
        let n_test = ((n as f64 * spec.test_fraction).round() as usize).clamp(1, n - 1);
        let train: Vec<usize> = (0..n - n_test).collect();
        let test: Vec<usize> = (n - n_test..n).collect();
        let pool = LabeledPool::new(x, y, k)?;
        clients.push(TargetClient {
            id,
            unlabeled: pool.subset(&train).inputs,
            test: pool.subset(&test).to_batch()?,
        });
    }
    Ok(TwoDomainTask { source, clients })
}

/// Server-side pre-training on the source pool, each sample re-styled with a
/// randomly chosen client style (or left as is). Consumes the pool: nothing
/// downstream of this call can reach the source data.
pub fn pretrain(
    arch: &Arch,
    source: LabeledPool,
    styles: &[StyleDescriptor],
    cfg: &SfdaConfig,
    seed: u64,
) -> Result<ModelParams> {
    let mut params = ModelParams::random(arch, &mut Rng::derive(seed, Stream::ModelInit, 0));
    let source_style = extract_style(&source.inputs)?;
    let styled: Vec<Matrix> = styles
        .iter()
        .map(|s| apply_style(&source.inputs, &source_style, s))
        .collect::<Result<_>>()?;
    let mut rng = Rng::derive(seed, Stream::Sfda, u64::MAX - 2);
    let mut order: Vec<usize> = (0..source.len()).collect();
    for _ in 0..cfg.pretrain_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Matrix::zeros(chunk.len(), source.input_dim());
            for (r, &j) in chunk.iter().enumerate() {
                let pick = rng.below(styles.len() + 1);
                let row = if pick == styles.len() {
                    source.inputs.row(j)
                } else {
                    styled[pick].row(j)
                };
                x.row_mut(r).copy_from_slice(row);
            }
            let labels = chunk.iter().map(|&j| source.labels[j]).collect();
            let (_, grad) = loss_and_grad(&params, &Batch::new(x, labels)?)?;
            sgd_step(&mut params, &grad, cfg.pretrain_lr);
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("pre-training diverged".into()));
    }
    Ok(params)
}

/// Statistics of one client's local adaptation phase.
#[derive(Clone, Debug, PartialEq)]
pub struct SfdaRoundStats {
    pub pseudo_loss: f64,
    pub kd_loss: f64,
    pub kept_frac: f64,
}

/// One client's local phase: `local_epochs` of SGD on
/// `L_pseudo + lambda_kd * L_kd` against the current teacher (pseudo-labels
/// are recomputed from it on every batch), then a teacher snapshot if round
/// `t` is due.
pub fn sfda_round(
    student: &mut ModelParams,
    teacher: &mut TeacherState,
    inputs: &Matrix,
    cfg: &SfdaConfig,
    t: usize,
    rng: &mut Rng,
) -> Result<SfdaRoundStats> {
    let mut order: Vec<usize> = (0..inputs.rows()).collect();
    let (mut pseudo, mut kd, mut kept, mut seen, mut steps) = (0.0, 0.0, 0usize, 0usize, 0usize);
    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Matrix::zeros(chunk.len(), inputs.cols());
            for (r, &j) in chunk.iter().enumerate() {
                x.row_mut(r).copy_from_slice(inputs.row(j));
            }
            let loss = sfda_loss_and_grad(student, &teacher.weights, &x, cfg)?;
            sgd_step(student, &loss.grad, cfg.lr);
            pseudo += loss.pseudo;
            kd += loss.kd;
            kept += loss.kept;
            seen += chunk.len();
            steps += 1;
        }
    }
    if !student.is_finite() {
        return Err(Error::NonFinite(format!(
            "adaptation diverged at round {t}"
        )));
    }
    if teacher.is_due(t) {
        teacher.swa_update(student, t)?;
    }
    let per_step = |v: f64| if steps == 0 { 0.0 } else { v / steps as f64 };
    Ok(SfdaRoundStats {
        pseudo_loss: per_step(pseudo),
        kd_loss: per_step(kd),
        kept_frac: if seen == 0 {
            0.0
        } else {
            kept as f64 / seen as f64
        },
    })
}

/// Everything the adaptation phase holds. There is deliberately no field
/// that can carry source data.
#[derive(Clone, Debug)]
pub struct SfdaPhase {
    pub global: ModelParams,
    pub teachers: Vec<TeacherState>,
    pub clients: Vec<TargetClient>,
    pub config: SfdaConfig,
    pub seed: u64,
}

/// Result of comparing every input row the phase holds against fingerprints
/// of the source pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SourceAudit {
    pub rows_checked: usize,
    pub source_rows_found: usize,
}

impl SourceAudit {
    pub fn isolated(&self) -> bool {
        self.source_rows_found == 0
    }
}

fn row_key(row: &[f64]) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

/// Bit patterns of every source row, taken before the pool is handed to
/// pre-training.
pub fn source_fingerprints(source: &LabeledPool) -> HashSet<Vec<u64>> {
    (0..source.len())
        .map(|i| row_key(source.inputs.row(i)))
        .collect()
}

impl SfdaPhase {
    pub fn audit(&self, fingerprints: &HashSet<Vec<u64>>) -> SourceAudit {
        let mut audit = SourceAudit {
            rows_checked: 0,
            source_rows_found: 0,
        };
        for c in &self.clients {
            for m in [&c.unlabeled, &c.test.inputs] {
                for i in 0..m.rows() {
                    audit.rows_checked += 1;
                    if fingerprints.contains(&row_key(m.row(i))) {
                        audit.source_rows_found += 1;
                    }
                }
            }
        }
        audit
    }

    /// Test accuracy of each client's teacher.
    pub fn teacher_accuracy(&self) -> Result<Vec<f64>> {
        self.clients
            .iter()
            .zip(&self.teachers)
            .map(|(c, t)| Ok(evaluate_batch(&t.weights, &c.test)?.1))
            .collect()
    }

    /// One federated adaptation round: every client adapts a copy of the
    /// global student, updates its own teacher, and the server averages the
    /// students weighted by unlabeled-shard size.
    pub fn run_round(
        &mut self,
        t: usize,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<Vec<SfdaRoundStats>> {
        let global = &self.global;
        let cfg = &self.config;
        let seed = self.seed;
        let job = |(c, teacher): (&TargetClient, &mut TeacherState)| -> Result<(ModelParams, SfdaRoundStats)> {
            let mut student = global.clone();
            let mut rng = Rng::derive2(seed, Stream::Sfda, t as u64, c.id as u64);
            let stats = sfda_round(&mut student, teacher, &c.unlabeled, cfg, t, &mut rng)?;
            Ok((student, stats))
        };
        let pairs: Vec<(&TargetClient, &mut TeacherState)> =
            self.clients.iter().zip(self.teachers.iter_mut()).collect();
        let results: Vec<Result<(ModelParams, SfdaRoundStats)>> = match pool {
            Some(pool) => pool.install(|| pairs.into_par_iter().map(job).collect()),
            None => pairs.into_iter().map(job).collect(),
        };
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let total: usize = self.clients.iter().map(|c| c.unlabeled.rows()).sum();
        let mut step = self.global.zeros_like();
        for ((student, _), c) in results.iter().zip(&self.clients) {
            let mut diff = student.clone();
            diff.axpy(-1.0, &self.global);
            step.axpy(c.unlabeled.rows() as f64 / total as f64, &diff);
        }
        self.global.axpy(1.0, &step);
        Ok(results.into_iter().map(|(_, s)| s).collect())
    }
}

/// Outcome of a full source-free adaptation experiment.
#[derive(Clone, Debug)]
pub struct SfdaReport {
    /// Per-client target accuracy of the frozen pre-trained model.
    pub pretrained_acc: Vec<f64>,
    /// Per-client target accuracy of the teachers after the last round.
    pub adapted_acc: Vec<f64>,
    /// Per-client target accuracy of the averaged student after the last round.
    pub student_acc: Vec<f64>,
    pub records: Vec<MetricRecord>,
    pub audit: SourceAudit,
}

impl SfdaReport {
    pub fn mean_gain(&self) -> f64 {
        let n = self.adapted_acc.len() as f64;
        self.adapted_acc
            .iter()
            .zip(&self.pretrained_acc)
            .map(|(a, p)| a - p)
            .sum::<f64>()
            / n
    }
}

/// Styles go up, the server pre-trains on its source pool (which is then
/// dropped), and clients adapt without labels. Metric records use the
/// `fedavg` strategy tag because students are averaged FedAvg-style.
pub fn run_sfda_experiment(
    arch: &Arch,
    task: TwoDomainTask,
    cfg: &SfdaConfig,
    seed: u64,
    workers: usize,
) -> Result<SfdaReport> {
    cfg.validate()?;
    let TwoDomainTask { source, clients } = task;
    let fingerprints = source_fingerprints(&source);
    let styles: Vec<StyleDescriptor> = clients
        .iter()
        .map(|c| extract_style(&c.unlabeled))
        .collect::<Result<_>>()?;
    let pretrained = pretrain(arch, source, &styles, cfg, seed)?;

    let teachers = clients
        .iter()
        .map(|_| TeacherState::new(pretrained.clone(), cfg.omega, cfg.t_start))
        .collect::<Result<Vec<_>>>()?;
    let mut phase = SfdaPhase {
        global: pretrained.clone(),
        teachers,
        clients,
        config: *cfg,
        seed,
    };
    let pretrained_acc = phase.teacher_accuracy()?;
    let pool = worker_pool(workers)?;
    let mut records = Vec::new();
    // Each client sends its style once and exchanges the whole student every round.
    let style_scalars = 2 * arch.input_dim as u64;
    let model_scalars = pretrained.num_scalars() as u64;
    for t in 1..=cfg.rounds {
        let stats = phase.run_round(t, pool.as_ref())?;
        for ((c, teacher), s) in phase.clients.iter().zip(&phase.teachers).zip(&stats) {
            let (loss, acc) = evaluate_batch(&teacher.weights, &c.test)?;
            records.push(MetricRecord {
                schema_version: METRICS_SCHEMA_VERSION,
                round: t,
                client: c.id,
                strategy: Strategy::Fedavg,
                loss,
                acc,
                tx_scalars: style_scalars + 2 * model_scalars * t as u64,
                pseudo_kept_frac: Some(s.kept_frac),
                kd_loss: Some(s.kd_loss),
                pseudo_loss: Some(s.pseudo_loss),
            });
        }
    }
    let adapted_acc = phase.teacher_accuracy()?;
    let student_acc = phase
        .clients
        .iter()
        .map(|c| Ok(evaluate_batch(&phase.global, &c.test)?.1))
        .collect::<Result<Vec<_>>>()?;
    let audit = phase.audit(&fingerprints);
    Ok(SfdaReport {
        pretrained_acc,
        adapted_acc,
        student_acc,
        records,
        audit,
    })
}
