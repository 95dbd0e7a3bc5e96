use std::io::Write;

use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use super::simulation::{Evaluation, Simulation, Split};
use super::state::Strategy;
use crate::error::{config_err, Result};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// One line of `metrics.jsonl`: a client's evaluation at an evaluation round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub schema_version: u32,
    pub round: usize,
    pub client: usize,
    pub strategy: Strategy,
    pub loss: f64,
    pub acc: f64,
    /// Cumulative scalars exchanged by this client so far.
    pub tx_scalars: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_kept_frac: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_loss: Option<f64>,
}

/// Everything an experiment produced.
#[derive(Clone, Debug, Default)]
pub struct ExperimentLog {
    pub records: Vec<MetricRecord>,
    pub evaluations: Vec<Evaluation>,
}

impl ExperimentLog {
    pub fn final_evaluation(&self) -> Option<&Evaluation> {
        self.evaluations.last()
    }
}

/// Thread pool for `workers > 1`; `None` runs everything on the caller's thread.
pub fn worker_pool(workers: usize) -> Result<Option<ThreadPool>> {
    if workers == 0 {
        return config_err("workers must be at least 1");
    }
    if workers == 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| crate::Error::Config(format!("cannot start {workers} workers: {e}")))
}

fn record_evaluation(sim: &Simulation, eval: &Evaluation, log: &mut ExperimentLog) {
    for e in &eval.clients {
        log.records.push(MetricRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            round: eval.round,
            client: e.client,
            strategy: sim.strategy(),
            loss: e.loss,
            acc: e.acc,
            tx_scalars: sim.tx[e.client],
            pseudo_kept_frac: None,
            kd_loss: None,
            pseudo_loss: None,
        });
    }
    log.evaluations.push(eval.clone());
}

/// Runs the configured number of rounds, evaluating on the test split at
/// round 0, every `eval_every` rounds, and after the last round.
pub fn run_experiment(sim: &mut Simulation, workers: usize) -> Result<ExperimentLog> {
    let pool = worker_pool(workers)?;
    let mut log = ExperimentLog::default();
    let eval = sim.evaluate(Split::Test, pool.as_ref())?;
    record_evaluation(sim, &eval, &mut log);
    let rounds = sim.config.rounds;
    for c in 1..=rounds {
        sim.run_round(pool.as_ref())?;
        if c % sim.config.eval_every == 0 || c == rounds {
            let eval = sim.evaluate(Split::Test, pool.as_ref())?;
            record_evaluation(sim, &eval, &mut log);
        }
    }
    Ok(log)
}

pub fn write_metrics_jsonl<W: Write>(records: &[MetricRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// `schema_version,round,strategy,weighted_loss,weighted_acc,tx_scalars`.
pub fn write_summary_csv<W: Write>(
    log: &ExperimentLog,
    strategy: Strategy,
    mut out: W,
) -> Result<()> {
    writeln!(
        out,
        "schema_version,round,strategy,weighted_loss,weighted_acc,tx_scalars"
    )?;
    for e in &log.evaluations {
        let tx: u64 = log
            .records
            .iter()
            .filter(|r| r.round == e.round)
            .map(|r| r.tx_scalars)
            .sum();
        writeln!(
            out,
            "{METRICS_SCHEMA_VERSION},{},{strategy},{:?},{:?},{tx}",
            e.round, e.weighted_loss, e.weighted_acc
        )?;
    }
    Ok(())
}
