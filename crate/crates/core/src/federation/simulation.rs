use rayon::prelude::*;
use rayon::ThreadPool;

use super::state::{
    compose, initial_projections, transfer_per_round, ClientState, Personalization, RoundConfig,
    ServerState, Strategy,
};
use crate::error::{config_err, Error, Result};
use crate::hypernet::{cohort_weights, server_update, ClientDelta, HyperNetConfig, ServerStep};
use crate::model::{
    evaluate_batch, loss_and_grad, sgd_step, Arch, Batch, ModelParams, ModulationParams,
};
use crate::numcore::{ParamSet, Rng, Stream};

/// `epochs` passes of mini-batch SGD over `data`, reshuffled every epoch.
/// Returns the mean mini-batch loss.
pub fn local_train(
    params: &mut ModelParams,
    data: &Batch,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let (mut total, mut steps) = (0.0, 0usize);
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let batch = data.select(chunk);
            let (loss, grad) = loss_and_grad(params, &batch)?;
            sgd_step(params, &grad, lr);
            total += loss;
            steps += 1;
        }
    }
    Ok(if steps == 0 {
        0.0
    } else {
        total / steps as f64
    })
}

/// Outcome of one cohort member's local phase.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client: usize,
    pub start: Option<ModulationParams>,
    pub end: ModelParams,
    pub train_loss: f64,
}

/// Summary of a completed round.
#[derive(Clone, Debug)]
pub struct RoundReport {
    pub round: usize,
    pub cohort: Vec<usize>,
    pub weights: Vec<f64>,
    pub train_loss: Vec<f64>,
}

/// Per-client evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientEval {
    pub client: usize,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub round: usize,
    pub clients: Vec<ClientEval>,
    /// `sum_i (m_i / S) loss_i` over all clients.
    pub weighted_loss: f64,
    pub weighted_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A server, its clients, and the client-held models of local-only training.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    /// Whole models kept by local-only clients (empty for other strategies).
    pub local_models: Vec<ModelParams>,
    /// Cumulative scalars each client has sent and received.
    pub tx: Vec<u64>,
    pub config: RoundConfig,
    pub hyper: HyperNetConfig,
    pub seed: u64,
}

impl Simulation {
    /// Seeded initial state (see [`ServerState::initial`]).
    pub fn new(
        arch: &Arch,
        hyper: &HyperNetConfig,
        strategy: Strategy,
        config: &RoundConfig,
        clients: Vec<ClientState>,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        config.validate()?;
        if clients.is_empty() {
            return config_err("simulation needs at least one client");
        }
        if let Some(c) = clients.iter().enumerate().find(|(i, c)| c.id != *i) {
            return config_err(format!(
                "client ids must be 0..N in order; found {} at {}",
                c.1.id, c.0
            ));
        }
        let n = clients.len();
        let server = ServerState::initial(arch, hyper, strategy, n, seed)?;
        let local_models = match strategy {
            Strategy::LocalOnly => vec![compose(initial_projections(arch, seed), &server.xi); n],
            _ => Vec::new(),
        };
        Ok(Self {
            server,
            clients,
            local_models,
            tx: vec![0; n],
            config: *config,
            hyper: *hyper,
            seed,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.server.strategy
    }

    pub fn total_samples(&self) -> usize {
        self.clients.iter().map(ClientState::samples).sum()
    }

    /// The model client `client` would use right now.
    pub fn client_params(&self, client: usize) -> Result<ModelParams> {
        match self.server.projections_for(client)? {
            Some(p) => Ok(compose(p, &self.server.xi)),
            None => Ok(self.local_models[client].clone()),
        }
    }

    /// Cohort of round `round` (1-based): `ceil(f N)` clients drawn without
    /// replacement, in increasing id.
    pub fn cohort(&self, round: usize) -> Vec<usize> {
        let n = self.clients.len();
        let k = self.config.cohort_size(n);
        Rng::derive(self.seed, Stream::Cohort, round as u64).sample_without_replacement(n, k)
    }

    fn train_client(&self, client: usize, round: usize) -> Result<ClientUpdate> {
        let start = self.server.projections_for(client)?;
        let mut params = match &start {
            Some(p) => compose(p.clone(), &self.server.xi),
            None => self.local_models[client].clone(),
        };
        let mut rng = Rng::derive2(self.seed, Stream::Batching, round as u64, client as u64);
        let cfg = &self.config;
        let train_loss = local_train(
            &mut params,
            &self.clients[client].train,
            cfg.local_epochs,
            cfg.local_lr,
            cfg.batch_size,
            &mut rng,
        )
        .map_err(|e| match e {
            Error::NonFinite(what) => {
                Error::NonFinite(format!("{what} (client {client}, round {round})"))
            }
            other => other,
        })?;
        if !train_loss.is_finite() || !params.is_finite() {
            return Err(Error::NonFinite(format!(
                "training diverged (client {client}, round {round})"
            )));
        }
        Ok(ClientUpdate {
            client,
            start,
            end: params,
            train_loss,
        })
    }

    /// Runs one communication round. Local phases may run on `pool`; all
    /// reductions happen afterwards in increasing client id.
    pub fn run_round(&mut self, pool: Option<&ThreadPool>) -> Result<RoundReport> {
        let round = self.server.round + 1;
        let cohort = self.cohort(round);
        let job = |&i: &usize| self.train_client(i, round);
        let results: Vec<Result<ClientUpdate>> = match pool {
            Some(pool) => pool.install(|| cohort.par_iter().map(job).collect()),
            None => cohort.iter().map(job).collect(),
        };
        let updates = results.into_iter().collect::<Result<Vec<_>>>()?;
        let report = self.apply_updates(round, cohort, updates)?;
        Ok(report)
    }

    /// Aggregation and server update for a finished cohort (sorted by id).
    pub fn apply_updates(
        &mut self,
        round: usize,
        cohort: Vec<usize>,
        updates: Vec<ClientUpdate>,
    ) -> Result<RoundReport> {
        if updates.is_empty() {
            return Err(Error::Protocol(format!("round {round}: empty cohort")));
        }
        let samples: Vec<usize> = updates
            .iter()
            .map(|u| self.clients[u.client].samples())
            .collect();
        let total = self.total_samples();
        let weights = cohort_weights(&samples, self.config.weighting, total)?;
        let strategy = self.server.strategy;
        let transfer = transfer_per_round(strategy, self.server.arch(), &self.hyper);

        if strategy != Strategy::LocalOnly {
            // xi_bar + sum_i w_i (xi_i - xi_bar): equals sum_i w_i xi_i when the
            // weights sum to one, leaves xi_bar bitwise unchanged when every
            // client returns it untouched, and under global weighting lets
            // non-cohort clients contribute xi_bar itself.
            let mut step = self.server.xi.zeros_like();
            for (u, &w) in updates.iter().zip(&weights) {
                let mut diff = u.end.xi.clone();
                diff.axpy(-1.0, &self.server.xi);
                step.axpy(w, &diff);
            }
            self.server.xi.axpy(1.0, &step);
        }

        match &mut self.server.personal {
            Personalization::Hyper {
                generator,
                embeddings,
            } => {
                let deltas: Vec<ClientDelta> = updates
                    .iter()
                    .map(|u| {
                        let mut delta = u.end.p.clone();
                        delta.axpy(-1.0, u.start.as_ref().expect("generated start"));
                        ClientDelta {
                            client: u.client,
                            samples: self.clients[u.client].samples(),
                            delta,
                        }
                    })
                    .collect();
                let step = ServerStep {
                    beta: self.config.global_lr,
                    weighting: self.config.weighting,
                    rule: self.config.step_rule,
                    total_samples: total,
                };
                server_update(generator, embeddings, &deltas, &step)?;
            }
            Personalization::Vanilla { projections } => {
                for u in &updates {
                    projections[u.client] = u.end.p.clone();
                }
            }
            Personalization::Global { projections } => {
                let mut step = projections.zeros_like();
                for (u, &w) in updates.iter().zip(&weights) {
                    let mut diff = u.end.p.clone();
                    diff.axpy(-1.0, projections);
                    step.axpy(w, &diff);
                }
                projections.axpy(1.0, &step);
            }
            Personalization::None => {}
        }
        let train_loss = updates.iter().map(|u| u.train_loss).collect();
        for u in updates {
            self.tx[u.client] += transfer.total() as u64;
            if strategy == Strategy::LocalOnly {
                self.local_models[u.client] = u.end;
            }
        }
        if !self.server.is_finite() {
            return Err(Error::NonFinite(format!(
                "server state after round {round}"
            )));
        }
        self.server.round = round;
        Ok(RoundReport {
            round,
            cohort,
            weights,
            train_loss,
        })
    }

    /// Evaluates every client with its own parameters.
    pub fn evaluate(&self, split: Split, pool: Option<&ThreadPool>) -> Result<Evaluation> {
        let job = |c: &ClientState| -> Result<ClientEval> {
            let params = self.client_params(c.id)?;
            let data = match split {
                Split::Train => &c.train,
                Split::Test => &c.test,
            };
            let (loss, acc) = evaluate_batch(&params, data)?;
            Ok(ClientEval {
                client: c.id,
                loss,
                acc,
            })
        };
        let results: Vec<Result<ClientEval>> = match pool {
            Some(pool) => pool.install(|| self.clients.par_iter().map(job).collect()),
            None => self.clients.iter().map(job).collect(),
        };
        let clients = results.into_iter().collect::<Result<Vec<_>>>()?;
        let total = self.total_samples() as f64;
        let (mut weighted_loss, mut weighted_acc) = (0.0, 0.0);
        for (e, c) in clients.iter().zip(&self.clients) {
            let w = c.samples() as f64 / total;
            weighted_loss += w * e.loss;
            weighted_acc += w * e.acc;
        }
        Ok(Evaluation {
            round: self.server.round,
            clients,
            weighted_loss,
            weighted_acc,
        })
    }
}
