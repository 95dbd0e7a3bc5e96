use serde::{Deserialize, Serialize};

use super::partition::{
    dirichlet_partition, pachinko_partition, pathological_partition, LabeledPool, PartitionPlan,
};
use crate::error::{config_err, Result};
use crate::numcore::{Matrix, Rng, Stream};

/// How client distributions differ from one another.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Shift {
    /// All clients sample the same distribution.
    None,
    /// Each client group sees its own permutation of the label-to-cluster map.
    LabelSkew,
    /// Each client group sees its inputs through its own orthogonal rotation.
    Rotation,
    /// Each client adds Gaussian noise with its own standard deviation,
    /// drawn uniformly from `[0, max_std)`.
    Noise { max_std: f64 },
}

/// Non-IID partition of a global pool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionScheme {
    Pathological,
    Dirichlet {
        alpha: f64,
    },
    /// Fine classes are split into `coarse_classes` contiguous coarse groups.
    Pachinko {
        alpha: f64,
        beta: f64,
        coarse_classes: usize,
    },
}

/// Synthetic classification task with controllable client heterogeneity.
///
/// Inputs are drawn from class-conditional unit-variance Gaussian clusters
/// whose means are spread so that two means lie `class_separation` apart on
/// average. Client `i` belongs to group `i % groups`; group 0 is always
/// unshifted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub num_clients: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    /// Samples per client before the train/test split; with a partition
    /// scheme, the global pool holds `num_clients * samples_per_client`.
    pub samples_per_client: usize,
    pub groups: usize,
    pub shift: Shift,
    pub class_separation: f64,
    pub test_fraction: f64,
    pub partition: Option<PartitionScheme>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            num_clients: 50,
            num_classes: 10,
            input_dim: 32,
            samples_per_client: 200,
            groups: 4,
            shift: Shift::LabelSkew,
            class_separation: 6.0,
            test_fraction: 0.2,
            partition: None,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.num_classes < 2 || self.input_dim == 0 {
            return config_err("task needs >= 1 client, >= 2 classes and a positive input_dim");
        }
        if self.samples_per_client < 2 {
            return config_err("task.samples_per_client must be at least 2");
        }
        if self.groups == 0 {
            return config_err("task.groups must be positive");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return config_err("task.test_fraction must lie in (0, 1)");
        }
        if !(self.class_separation >= 0.0) || !self.class_separation.is_finite() {
            return config_err("task.class_separation must be finite and >= 0");
        }
        if let Shift::Noise { max_std } = self.shift {
            if !(max_std >= 0.0) || !max_std.is_finite() {
                return config_err("task.shift.max_std must be finite and >= 0");
            }
        }
        if let Some(PartitionScheme::Pachinko { coarse_classes, .. }) = self.partition {
            if coarse_classes == 0 || coarse_classes > self.num_classes {
                return config_err("pachinko coarse_classes must lie in 1..=num_classes");
            }
        }
        Ok(())
    }

    pub fn group_of(&self, client: usize) -> usize {
        client % self.groups
    }
}

/// One client's data.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub id: usize,
    pub group: usize,
    pub train: LabeledPool,
    pub test: LabeledPool,
}

/// The fixed random structure of a task: cluster means and the per-group
/// shifts. Clients (including ones created after training) are sampled
/// from it on demand.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: TaskSpec,
    pub seed: u64,
    pub means: Matrix,
    pub permutations: Vec<Vec<usize>>,
    pub rotations: Vec<Matrix>,
}

const WORLD_INDEX: u64 = u64::MAX;
const POOL_INDEX: u64 = u64::MAX - 1;

impl SyntheticWorld {
    pub fn new(spec: &TaskSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::derive(seed, Stream::Data, WORLD_INDEX);
        let (k, dim) = (spec.num_classes, spec.input_dim);
        let spread = spec.class_separation / (2.0 * dim as f64).sqrt();
        let mut means = Matrix::zeros(k, dim);
        for v in means.as_mut_slice() {
            *v = spread * rng.gaussian();
        }
        let mut permutations = vec![(0..k).collect::<Vec<_>>()];
        let mut rotations = vec![Matrix::identity(dim)];
        for _ in 1..spec.groups {
            let mut perm: Vec<usize> = (0..k).collect();
            rng.shuffle(&mut perm);
            permutations.push(perm);
            rotations.push(random_rotation(dim, &mut rng));
        }
        Ok(Self {
            spec: *spec,
            seed,
            means,
            permutations,
            rotations,
        })
    }

    /// Unshifted samples: `labels[j]` drawn from cluster `labels[j]`.
    fn sample_clusters(&self, labels: &[usize], rng: &mut Rng) -> Matrix {
        let dim = self.spec.input_dim;
        let mut x = Matrix::zeros(labels.len(), dim);
        for (j, &l) in labels.iter().enumerate() {
            for (v, m) in x.row_mut(j).iter_mut().zip(self.means.row(l)) {
                *v = m + rng.gaussian();
            }
        }
        x
    }

    /// Applies client `client`'s shift to unshifted samples.
    pub fn apply_shift(&self, client: usize, pool: &mut LabeledPool, rng: &mut Rng) {
        let group = self.spec.group_of(client);
        match self.spec.shift {
            Shift::None => {}
            Shift::LabelSkew => {
                // Re-center each sample on the cluster its label maps to.
                let perm = &self.permutations[group];
                for (j, &l) in pool.labels.iter().enumerate() {
                    let (from, to) = (self.means.row(l), self.means.row(perm[l]));
                    for ((v, a), b) in pool.inputs.row_mut(j).iter_mut().zip(from).zip(to) {
                        *v += b - a;
                    }
                }
            }
            Shift::Rotation => {
                pool.inputs = rotate(&pool.inputs, &self.rotations[group]);
            }
            Shift::Noise { max_std } => {
                let std = max_std * rng.uniform();
                for v in pool.inputs.as_mut_slice() {
                    *v += std * rng.gaussian();
                }
            }
        }
    }

    /// Freshly sampled data for client `client` (any index, so unseen
    /// clients can be created after training).
    pub fn client(&self, client: usize) -> Result<ClientData> {
        let spec = &self.spec;
        let mut rng = Rng::derive(self.seed, Stream::Data, client as u64);
        let mut labels: Vec<usize> = (0..spec.samples_per_client)
            .map(|j| j % spec.num_classes)
            .collect();
        rng.shuffle(&mut labels);
        let inputs = self.sample_clusters(&labels, &mut rng);
        let mut pool = LabeledPool::new(inputs, labels, spec.num_classes)?;
        self.apply_shift(client, &mut pool, &mut rng);
        Ok(self.split(client, pool))
    }

    fn split(&self, client: usize, pool: LabeledPool) -> ClientData {
        let n = pool.len();
        let n_test =
            ((n as f64 * self.spec.test_fraction).round() as usize).min(n.saturating_sub(1));
        let n_train = n - n_test;
        let idx: Vec<usize> = (0..n).collect();
        ClientData {
            id: client,
            group: self.spec.group_of(client),
            train: pool.subset(&idx[..n_train]),
            test: pool.subset(&idx[n_train..]),
        }
    }

    fn coarse_map(&self, coarse_classes: usize) -> Vec<usize> {
        let k = self.spec.num_classes;
        (0..k).map(|f| f * coarse_classes / k).collect()
    }
}

/// Uniformly random orthogonal matrix (Gram–Schmidt on a Gaussian matrix).
pub fn random_rotation(dim: usize, rng: &mut Rng) -> Matrix {
    let mut q = Matrix::zeros(dim, dim);
    for v in q.as_mut_slice() {
        *v = rng.gaussian();
    }
    for i in 0..dim {
        for j in 0..i {
            let proj: f64 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
            let prev = q.row(j).to_vec();
            for (a, b) in q.row_mut(i).iter_mut().zip(&prev) {
                *a -= proj * b;
            }
        }
        let norm = q.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
        q.row_mut(i).iter_mut().for_each(|a| *a /= norm);
    }
    q
}

/// Row-wise rotation `x R`.
pub fn rotate(inputs: &Matrix, rotation: &Matrix) -> Matrix {
    inputs
        .matmul(rotation)
        .expect("rotation matches input width")
}

/// A generated task.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub world: SyntheticWorld,
    pub clients: Vec<ClientData>,
    /// The global pool and its plan when a partition scheme was used.
    pub partition: Option<(LabeledPool, PartitionPlan)>,
}

/// Builds every client's train/test data (80/20 by default) for `spec`.
pub fn make_synthetic(spec: &TaskSpec, seed: u64) -> Result<SyntheticTask> {
    let world = SyntheticWorld::new(spec, seed)?;
    let Some(scheme) = spec.partition else {
        let clients = (0..spec.num_clients)
            .map(|i| world.client(i))
            .collect::<Result<Vec<_>>>()?;
        return Ok(SyntheticTask {
            world,
            clients,
            partition: None,
        });
    };

    let total = spec.num_clients * spec.samples_per_client;
    let mut rng = Rng::derive(seed, Stream::Data, POOL_INDEX);
    let mut labels: Vec<usize> = (0..total).map(|j| j % spec.num_classes).collect();
    rng.shuffle(&mut labels);
    let inputs = world.sample_clusters(&labels, &mut rng);
    let mut pool = LabeledPool::new(inputs, labels, spec.num_classes)?;

    let mut prng = Rng::derive(seed, Stream::Partition, 0);
    let n = spec.num_clients;
    let plan = match scheme {
        PartitionScheme::Pathological => pathological_partition(&pool, n, &mut prng)?,
        PartitionScheme::Dirichlet { alpha } => dirichlet_partition(&pool, n, alpha, &mut prng)?,
        PartitionScheme::Pachinko {
            alpha,
            beta,
            coarse_classes,
        } => {
            pool = pool.with_coarse(world.coarse_map(coarse_classes))?;
            pachinko_partition(&pool, n, alpha, beta, &mut prng)?
        }
    };
    let clients = plan
        .client_indices()
        .iter()
        .enumerate()
        .map(|(i, idx)| {
            let mut shard = pool.subset(idx);
            let mut crng = Rng::derive(seed, Stream::Data, i as u64);
            world.apply_shift(i, &mut shard, &mut crng);
            world.split(i, shard)
        })
        .collect();
    Ok(SyntheticTask {
        world,
        clients,
        partition: Some((pool, plan)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Softmax-regression probe trained by full-batch gradient descent;
    /// returns the fitted weights (`(dim + 1) x K`, last row is the bias).
    fn fit_probe(pool: &LabeledPool, steps: usize, lr: f64) -> Matrix {
        let (n, dim, k) = (pool.len(), pool.input_dim(), pool.num_classes);
        let mut w = Matrix::zeros(dim + 1, k);
        for _ in 0..steps {
            let mut grad = Matrix::zeros(dim + 1, k);
            for i in 0..n {
                let x = pool.inputs.row(i);
                let mut logits: Vec<f64> = (0..k)
                    .map(|c| w.get(dim, c) + (0..dim).map(|j| x[j] * w.get(j, c)).sum::<f64>())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                logits.iter_mut().for_each(|l| *l = (*l - max).exp());
                let z: f64 = logits.iter().sum();
                for c in 0..k {
                    let g = logits[c] / z - if pool.labels[i] == c { 1.0 } else { 0.0 };
                    for j in 0..dim {
                        grad.set(j, c, grad.get(j, c) + g * x[j] / n as f64);
                    }
                    grad.set(dim, c, grad.get(dim, c) + g / n as f64);
                }
            }
            w.axpy(-lr, &grad);
        }
        w
    }

    fn probe_accuracy(w: &Matrix, pool: &LabeledPool) -> f64 {
        let dim = pool.input_dim();
        let correct = (0..pool.len())
            .filter(|&i| {
                let x = pool.inputs.row(i);
                let scores: Vec<f64> = (0..pool.num_classes)
                    .map(|c| w.get(dim, c) + (0..dim).map(|j| x[j] * w.get(j, c)).sum::<f64>())
                    .collect();
                crate::model::argmax(&scores) == pool.labels[i]
            })
            .count();
        correct as f64 / pool.len() as f64
    }

    fn spec(shift: Shift, clients: usize) -> TaskSpec {
        TaskSpec {
            num_clients: clients,
            shift,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn identity_rotation_is_a_no_op() {
        let mut rng = Rng::new(1);
        let x = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gaussian()).collect()).unwrap();
        assert_eq!(rotate(&x, &Matrix::identity(4)), x);
    }

    #[test]
    fn random_rotation_is_orthogonal() {
        let q = random_rotation(6, &mut Rng::new(4));
        let qqt = q.mm(&q.transpose());
        for i in 0..6 {
            for j in 0..6 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((qqt.get(i, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clients_get_an_80_20_split() {
        let task = make_synthetic(&spec(Shift::LabelSkew, 3), 0).unwrap();
        for c in &task.clients {
            assert_eq!(c.train.len(), 160);
            assert_eq!(c.test.len(), 40);
            assert_eq!(c.group, c.id % 4);
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let s = spec(Shift::Noise { max_std: 0.5 }, 4);
        let a = make_synthetic(&s, 11).unwrap();
        let b = make_synthetic(&s, 11).unwrap();
        for (x, y) in a.clients.iter().zip(&b.clients) {
            assert_eq!(x.train, y.train);
            assert_eq!(x.test, y.test);
        }
    }

    #[test]
    fn group_zero_is_unshifted_under_label_skew() {
        let skew = make_synthetic(&spec(Shift::LabelSkew, 2), 5).unwrap();
        let none = make_synthetic(&spec(Shift::None, 2), 5).unwrap();
        assert_eq!(skew.clients[0].train, none.clients[0].train);
        assert_ne!(skew.clients[1].train, none.clients[1].train);
    }

    #[test]
    fn each_client_task_is_linearly_separable() {
        for shift in [Shift::LabelSkew, Shift::Rotation] {
            let task = make_synthetic(&spec(shift, 4), 2).unwrap();
            for c in &task.clients {
                let w = fit_probe(&c.train, 200, 0.5);
                let acc = probe_accuracy(&w, &c.train);
                assert!(acc > 0.95, "client {} probe accuracy {acc}", c.id);
            }
        }
    }

    #[test]
    fn iid_clients_match_a_global_model() {
        // Well-separated clusters keep the Bayes error near zero, so any gap
        // between pooled and per-client fits would come from non-IID data.
        let s = TaskSpec {
            class_separation: 8.0,
            ..spec(Shift::None, 6)
        };
        let task = make_synthetic(&s, 3).unwrap();
        let mut global_train = task.clients[0].train.clone();
        for c in &task.clients[1..] {
            let d = global_train.input_dim();
            let mut data = global_train.inputs.clone().into_vec();
            data.extend_from_slice(c.train.inputs.as_slice());
            global_train.labels.extend_from_slice(&c.train.labels);
            global_train.inputs = Matrix::from_vec(global_train.labels.len(), d, data).unwrap();
        }
        let global = fit_probe(&global_train, 200, 0.5);
        let (mut g_acc, mut l_acc) = (0.0, 0.0);
        for c in &task.clients {
            g_acc += probe_accuracy(&global, &c.test);
            l_acc += probe_accuracy(&fit_probe(&c.train, 200, 0.5), &c.test);
        }
        let n = task.clients.len() as f64;
        let (g_acc, l_acc) = (g_acc / n, l_acc / n);
        assert!(
            (g_acc - l_acc).abs() <= 0.02,
            "global {g_acc} vs local {l_acc}"
        );
    }

    #[test]
    fn partitioned_task_conserves_the_pool() {
        let s = TaskSpec {
            num_clients: 10,
            shift: Shift::None,
            partition: Some(PartitionScheme::Dirichlet { alpha: 0.3 }),
            ..TaskSpec::default()
        };
        let task = make_synthetic(&s, 8).unwrap();
        let (pool, plan) = task.partition.as_ref().unwrap();
        let held: usize = task
            .clients
            .iter()
            .map(|c| c.train.len() + c.test.len())
            .sum();
        assert_eq!(held, pool.len());
        assert_eq!(plan.counts().iter().sum::<usize>(), 2000);
    }

    #[test]
    fn pachinko_task_builds_coarse_map() {
        let s = TaskSpec {
            num_clients: 5,
            partition: Some(PartitionScheme::Pachinko {
                alpha: 0.4,
                beta: 10.0,
                coarse_classes: 2,
            }),
            ..TaskSpec::default()
        };
        let task = make_synthetic(&s, 1).unwrap();
        let (pool, _) = task.partition.as_ref().unwrap();
        assert_eq!(
            pool.coarse_of.as_deref(),
            Some(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1][..])
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let s = TaskSpec {
            test_fraction: 1.0,
            ..TaskSpec::default()
        };
        assert!(make_synthetic(&s, 0).is_err());
        let s = TaskSpec {
            groups: 0,
            ..TaskSpec::default()
        };
        assert!(make_synthetic(&s, 0).is_err());
    }
}
