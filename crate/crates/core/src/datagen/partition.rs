use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::Batch;
use crate::numcore::{sample_dirichlet, sample_uniform, Matrix, Rng};

/// Retries allowed when a draw leaves some client without samples.
pub const MAX_EMPTY_SHARD_RETRIES: usize = 100;

/// A labeled sample pool, optionally with a coarse grouping of its classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPool {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Coarse class of every fine class (length `num_classes`), if any.
    pub coarse_of: Option<Vec<usize>>,
}

impl LabeledPool {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return config_err(format!(
                "pool has {} input rows but {} labels",
                inputs.rows(),
                labels.len()
            ));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return config_err(format!("label {l} out of range for {num_classes} classes"));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            coarse_of: None,
        })
    }

    /// Attaches a coarse grouping; it must cover every fine class with
    /// contiguous coarse ids `0..C`.
    pub fn with_coarse(mut self, coarse_of: Vec<usize>) -> Result<Self> {
        if coarse_of.len() != self.num_classes {
            return config_err("coarse map must name a coarse class for every fine class");
        }
        let n_coarse = coarse_of.iter().max().map_or(0, |m| m + 1);
        if (0..n_coarse).any(|c| !coarse_of.contains(&c)) {
            return config_err("coarse class ids must be contiguous from 0");
        }
        self.coarse_of = Some(coarse_of);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Indices of the samples of each class, in pool order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledPool {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        LabeledPool {
            inputs: Matrix::from_vec(idx.len(), d, data).expect("subset shape"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            coarse_of: self.coarse_of.clone(),
        }
    }

    pub fn to_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.labels.clone())
    }

    /// CSV with a header `label,x0,...`, one row per sample.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = (0..self.input_dim()).map(|j| format!("x{j}")).collect();
        writeln!(out, "label,{}", header.join(","))?;
        for (i, l) in self.labels.iter().enumerate() {
            let row: Vec<String> = self
                .inputs
                .row(i)
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            writeln!(out, "{l},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Assignment of every pool sample to a client (0-based ids).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub num_clients: usize,
    pub assignments: Vec<usize>,
    /// Per class, the probability of each client receiving a sample of that
    /// class. Reusing these for a second pool gives consistent splits.
    pub shares: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct PlanExport<'a> {
    schema_version: u32,
    num_clients: usize,
    counts: Vec<usize>,
    clients: Vec<Vec<usize>>,
    shares: &'a [Vec<f64>],
}

impl PartitionPlan {
    /// Samples per client, `m_i`.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_clients];
        for &c in &self.assignments {
            counts[c] += 1;
        }
        counts
    }

    /// Pool indices of each client's samples, increasing.
    pub fn client_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clients];
        for (i, &c) in self.assignments.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// `clients x classes` sample counts.
    pub fn class_histogram(&self, pool: &LabeledPool) -> Vec<Vec<usize>> {
        let mut hist = vec![vec![0; pool.num_classes]; self.num_clients];
        for (&c, &l) in self.assignments.iter().zip(&pool.labels) {
            hist[c][l] += 1;
        }
        hist
    }

    /// Shannon entropy (nats) of each client's label distribution; 0 for empty clients.
    pub fn label_entropies(&self, pool: &LabeledPool) -> Vec<f64> {
        self.class_histogram(pool)
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                if total == 0 {
                    return 0.0;
                }
                row.iter()
                    .filter(|&&n| n > 0)
                    .map(|&n| {
                        let p = n as f64 / total as f64;
                        -p * p.ln()
                    })
                    .sum()
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&PlanExport {
            schema_version: 1,
            num_clients: self.num_clients,
            counts: self.counts(),
            clients: self.client_indices(),
            shares: &self.shares,
        })?)
    }

    /// Assigns another pool with this plan's class shares (used to give each
    /// client a test split with the same label mix as its training split).
    pub fn reassign(&self, pool: &LabeledPool, rng: &mut Rng) -> Result<PartitionPlan> {
        if self.shares.len() != pool.num_classes {
            return config_err("pool and plan disagree on the number of classes");
        }
        Ok(PartitionPlan {
            num_clients: self.num_clients,
            assignments: assign(pool, &self.shares, rng),
            shares: self.shares.clone(),
        })
    }
}

fn assign(pool: &LabeledPool, shares: &[Vec<f64>], rng: &mut Rng) -> Vec<usize> {
    pool.labels
        .iter()
        .map(|&l| rng.categorical(&shares[l]))
        .collect()
}

fn check_request(pool: &LabeledPool, n: usize) -> Result<()> {
    if n == 0 {
        return config_err("partition needs at least one client");
    }
    if pool.len() < n {
        return config_err(format!(
            "cannot give {n} clients a sample each from a pool of {}",
            pool.len()
        ));
    }
    Ok(())
}

/// Draws shares and assigns samples, redrawing everything when a client ends
/// up empty.
fn plan_with_retries(
    pool: &LabeledPool,
    n: usize,
    rng: &mut Rng,
    mut draw_shares: impl FnMut(&mut Rng) -> Result<Vec<Vec<f64>>>,
) -> Result<PartitionPlan> {
    check_request(pool, n)?;
    for _ in 0..=MAX_EMPTY_SHARD_RETRIES {
        let shares = draw_shares(rng)?;
        let plan = PartitionPlan {
            num_clients: n,
            assignments: assign(pool, &shares, rng),
            shares,
        };
        if plan.counts().iter().all(|&m| m > 0) {
            return Ok(plan);
        }
    }
    Err(Error::Config(format!(
        "partition left a client empty after {MAX_EMPTY_SHARD_RETRIES} redraws"
    )))
}

/// Per class, client rates `a_ic ~ U(0.4, 0.6)`; a sample of class `c` goes
/// to client `i` with probability `a_ic / sum_j a_jc`.
pub fn pathological_partition(
    pool: &LabeledPool,
    n: usize,
    rng: &mut Rng,
) -> Result<PartitionPlan> {
    plan_with_retries(pool, n, rng, |rng| {
        (0..pool.num_classes)
            .map(|_| {
                let a = sample_uniform(rng, 0.4, 0.6, n)?;
                let total: f64 = a.iter().sum();
                Ok(a.iter().map(|v| v / total).collect())
            })
            .collect()
    })
}

/// Per class, client shares `~ Dirichlet(alpha * 1_N)`.
pub fn dirichlet_partition(
    pool: &LabeledPool,
    n: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<PartitionPlan> {
    plan_with_retries(pool, n, rng, |rng| {
        (0..pool.num_classes)
            .map(|_| sample_dirichlet(rng, &vec![alpha; n]))
            .collect()
    })
}

/// Two-stage allocation: each client draws coarse-class proportions from
/// `Dirichlet(alpha)` and, within every coarse class, fine-class proportions
/// from `Dirichlet(beta)`. A client's weight for fine class `f` is the
/// product; per fine class the weights are normalized over clients.
pub fn pachinko_partition(
    pool: &LabeledPool,
    n: usize,
    alpha: f64,
    beta: f64,
    rng: &mut Rng,
) -> Result<PartitionPlan> {
    let Some(coarse_of) = pool.coarse_of.clone() else {
        return config_err("pachinko partition needs coarse labels");
    };
    let n_coarse = coarse_of.iter().max().map_or(0, |m| m + 1);
    let members: Vec<Vec<usize>> = (0..n_coarse)
        .map(|c| {
            (0..pool.num_classes)
                .filter(|&f| coarse_of[f] == c)
                .collect()
        })
        .collect();
    plan_with_retries(pool, n, rng, |rng| {
        let mut weights = vec![vec![0.0; n]; pool.num_classes];
        for i in 0..n {
            let coarse = draw_simplex(rng, alpha, n_coarse)?;
            for (c, fines) in members.iter().enumerate() {
                let fine = draw_simplex(rng, beta, fines.len())?;
                for (&f, s) in fines.iter().zip(fine) {
                    weights[f][i] = coarse[c] * s;
                }
            }
        }
        for row in &mut weights {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= total);
        }
        Ok(weights)
    })
}

/// Symmetric Dirichlet draw; a single category needs no randomness.
fn draw_simplex(rng: &mut Rng, conc: f64, k: usize) -> Result<Vec<f64>> {
    if k == 1 {
        if !(conc > 0.0) {
            return config_err(format!(
                "dirichlet concentrations must be positive, got {conc}"
            ));
        }
        return Ok(vec![1.0]);
    }
    sample_dirichlet(rng, &vec![conc; k])
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `per_class` samples of each of `k` classes, 1-D inputs equal to the index.
    fn pool(k: usize, per_class: usize) -> LabeledPool {
        let n = k * per_class;
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let inputs = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        LabeledPool::new(inputs, labels, k).unwrap()
    }

    #[test]
    fn single_client_takes_everything() {
        let p = pool(4, 25);
        let plan = pathological_partition(&p, 1, &mut Rng::new(0)).unwrap();
        assert!(plan.assignments.iter().all(|&c| c == 0));
        assert_eq!(plan.counts(), vec![100]);
    }

    #[test]
    fn pathological_shares_concentrate_within_three_sigma() {
        // One class, 10^4 samples, 5 clients. Given the drawn rates the
        // counts are multinomial, so each share lies within 3 binomial sds.
        let p = pool(1, 10_000);
        let n = 5;
        let plan = pathological_partition(&p, n, &mut Rng::new(21)).unwrap();
        let lo = 0.4 / (0.6 * n as f64 - 0.2);
        let hi = 0.6 / (0.4 * n as f64 + 0.2);
        for (i, &m) in plan.counts().iter().enumerate() {
            let q = plan.shares[0][i];
            assert!((lo..=hi).contains(&q), "share {q} outside [{lo}, {hi}]");
            let sd = (q * (1.0 - q) / 10_000.0).sqrt();
            let emp = m as f64 / 10_000.0;
            assert!((emp - q).abs() < 3.0 * sd, "client {i}: {emp} vs {q}");
        }
    }

    #[test]
    fn pathological_seed_fixture() {
        let p = pool(3, 4);
        let plan = pathological_partition(&p, 3, &mut Rng::new(42)).unwrap();
        assert_eq!(plan.assignments, PATHOLOGICAL_SEED_42);
    }

    // Frozen output for the 12-sample, 3-class, 3-client pool with seed 42.
    const PATHOLOGICAL_SEED_42: [usize; 12] = [0, 1, 2, 2, 1, 2, 0, 1, 0, 1, 0, 0];

    #[test]
    fn dirichlet_concentration_limit_is_uniform() {
        let p = pool(1, 10_000);
        let n = 4;
        let plan = dirichlet_partition(&p, n, 1e6, &mut Rng::new(3)).unwrap();
        for &m in &plan.counts() {
            let share = m as f64 / 10_000.0;
            assert!((share - 0.25).abs() < 0.01, "share {share}");
        }
    }

    #[test]
    fn small_alpha_reduces_distinct_classes() {
        let p = pool(10, 500);
        let distinct = |alpha: f64| {
            let plan = dirichlet_partition(&p, 100, alpha, &mut Rng::new(5)).unwrap();
            let hist = plan.class_histogram(&p);
            hist.iter()
                .map(|r| r.iter().filter(|&&c| c > 0).count())
                .sum::<usize>() as f64
                / 100.0
        };
        assert!(distinct(0.3) < distinct(1e6));
    }

    #[test]
    fn partitions_conserve_samples() {
        let p = pool(6, 40).with_coarse(vec![0, 0, 1, 1, 2, 2]).unwrap();
        let mut rng = Rng::new(9);
        let plans = [
            pathological_partition(&p, 7, &mut rng).unwrap(),
            dirichlet_partition(&p, 7, 0.3, &mut rng).unwrap(),
            pachinko_partition(&p, 7, 0.4, 10.0, &mut rng).unwrap(),
        ];
        for plan in &plans {
            assert_eq!(plan.counts().iter().sum::<usize>(), p.len());
            assert!(plan.counts().iter().all(|&m| m > 0));
            assert_eq!(
                plan.client_indices().iter().map(Vec::len).sum::<usize>(),
                p.len()
            );
        }
    }

    #[test]
    fn partitions_are_deterministic() {
        let p = pool(5, 30);
        let a = dirichlet_partition(&p, 6, 0.5, &mut Rng::new(77)).unwrap();
        let b = dirichlet_partition(&p, 6, 0.5, &mut Rng::new(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pachinko_with_one_coarse_class_ignores_alpha() {
        let p = pool(4, 50).with_coarse(vec![0; 4]).unwrap();
        let a = pachinko_partition(&p, 5, 0.4, 10.0, &mut Rng::new(1)).unwrap();
        let b = pachinko_partition(&p, 5, 7.0, 10.0, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pachinko_fine_shares_flatten_with_large_beta() {
        let p = pool(6, 100).with_coarse(vec![0, 0, 0, 1, 1, 1]).unwrap();
        // Spread of fine-class counts within each coarse class, per client.
        let within_variance = |beta: f64| {
            let mut total = 0.0;
            for seed in 0..3 {
                let plan = pachinko_partition(&p, 10, 0.4, beta, &mut Rng::new(seed)).unwrap();
                for row in plan.class_histogram(&p) {
                    for group in row.chunks(3) {
                        let s: usize = group.iter().sum();
                        if s == 0 {
                            continue;
                        }
                        let fr: Vec<f64> = group.iter().map(|&c| c as f64 / s as f64).collect();
                        total += fr.iter().map(|f| (f - 1.0 / 3.0).powi(2)).sum::<f64>();
                    }
                }
            }
            total
        };
        assert!(within_variance(10.0) < within_variance(0.1));
    }

    #[test]
    fn pachinko_requires_coarse_labels() {
        assert!(pachinko_partition(&pool(4, 5), 2, 0.4, 10.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn too_many_clients_is_an_error() {
        assert!(dirichlet_partition(&pool(2, 2), 5, 0.3, &mut Rng::new(0)).is_err());
        assert!(pathological_partition(&pool(2, 2), 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn plan_json_lists_every_sample_once() {
        let p = pool(3, 10);
        let plan = dirichlet_partition(&p, 4, 1.0, &mut Rng::new(2)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&plan.to_json().unwrap()).unwrap();
        let mut all: Vec<u64> = v["clients"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|c| c.as_array().unwrap().iter().map(|x| x.as_u64().unwrap()))
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<u64>>());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let p = pool(2, 2);
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "label,x0");
        assert_eq!(lines[2], "1,1.0");
        assert_eq!(lines.len(), 5);
    }
}
