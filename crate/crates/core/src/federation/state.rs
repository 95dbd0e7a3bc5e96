use serde::{Deserialize, Serialize};

use crate::datagen::ClientData;
use crate::error::{config_err, Result};
use crate::hypernet::{random_embeddings, Generator, HyperNetConfig, StepRule, Weighting};
use crate::model::{Arch, Batch, ModelParams, ModulationParams, SharedParams};
use crate::numcore::{Matrix, ParamSet, Rng, Stream};

/// Which parameters are personalized and how the server handles them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Generated projections `P_i = h(phi; z_i)`; `xi` averaged.
    Adaptfed,
    /// Persisted per-client projections trained only by their client; `xi` averaged.
    VanillaTailored,
    /// Everything averaged.
    Fedavg,
    /// No communication; each client trains its own model.
    LocalOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Adaptfed,
        Strategy::VanillaTailored,
        Strategy::Fedavg,
        Strategy::LocalOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Adaptfed => "adaptfed",
            Strategy::VanillaTailored => "vanilla-tailored",
            Strategy::Fedavg => "fedavg",
            Strategy::LocalOnly => "local-only",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Protocol hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    /// Communication rounds `C`.
    pub rounds: usize,
    /// Local epochs `L` per participation.
    pub local_epochs: usize,
    /// Client learning rate `alpha`.
    pub local_lr: f64,
    /// Generator / embedding learning rate `beta`.
    pub global_lr: f64,
    /// Fraction `f` of clients sampled per round; the cohort has `ceil(f N)` members.
    pub sample_fraction: f64,
    pub batch_size: usize,
    pub weighting: Weighting,
    pub step_rule: StepRule,
    /// Evaluate every this many rounds (plus round 0 and the final round).
    pub eval_every: usize,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            local_epochs: 5,
            local_lr: 0.01,
            global_lr: 0.01,
            sample_fraction: 0.1,
            batch_size: 32,
            weighting: Weighting::Cohort,
            step_rule: StepRule::Descent,
            eval_every: 10,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return config_err(format!(
                "rounds.sample_fraction must lie in (0, 1], got {}",
                self.sample_fraction
            ));
        }
        for (name, v) in [("local_lr", self.local_lr), ("global_lr", self.global_lr)] {
            if !(v >= 0.0) || !v.is_finite() {
                return config_err(format!("rounds.{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return config_err("rounds.batch_size must be positive");
        }
        if self.eval_every == 0 {
            return config_err("rounds.eval_every must be positive");
        }
        Ok(())
    }

    /// `ceil(f N)`, guarded against `f N` landing a rounding error above an integer.
    pub fn cohort_size(&self, clients: usize) -> usize {
        let raw = self.sample_fraction * clients as f64;
        ((raw - 1e-9).ceil() as usize).clamp(1, clients)
    }
}

/// One client: its shards and identity. The embedding handle is the id.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    /// Synthetic group label (for analysis only; never seen by the protocol).
    pub group: usize,
    pub train: Batch,
    pub test: Batch,
}

impl ClientState {
    pub fn from_data(data: &ClientData) -> Result<Self> {
        Ok(Self {
            id: data.id,
            group: data.group,
            train: data.train.to_batch()?,
            test: data.test.to_batch()?,
        })
    }

    /// `m_i`, the training-shard size.
    pub fn samples(&self) -> usize {
        self.train.len()
    }
}

/// Server-side personalization state. There is one per simulation, so the
/// uneven variant sizes do not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum Personalization {
    /// The generator and the embedding table (`N x D`); no projections persist.
    Hyper {
        generator: Generator,
        embeddings: Matrix,
    },
    /// One persisted projection set per client.
    Vanilla { projections: Vec<ModulationParams> },
    /// A single averaged projection set.
    Global { projections: ModulationParams },
    /// Nothing: local-only clients keep their whole model.
    None,
}

/// Everything the server holds between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub strategy: Strategy,
    /// Rounds completed.
    pub round: usize,
    /// Shared parameters `xi_bar`.
    pub xi: SharedParams,
    pub personal: Personalization,
}

/// Initial projections shared by every strategy that does not generate them.
pub(crate) fn initial_projections(arch: &Arch, seed: u64) -> ModulationParams {
    ModulationParams::random(arch, &mut Rng::derive(seed, Stream::ModelInit, 1))
}

impl ServerState {
    /// Seeded round-0 state for `clients` clients. Every strategy starts from
    /// the same shared weights and, where projections are not generated, the
    /// same initial projections.
    pub fn initial(
        arch: &Arch,
        hyper: &HyperNetConfig,
        strategy: Strategy,
        clients: usize,
        seed: u64,
    ) -> Result<Self> {
        let xi = SharedParams::random(arch, &mut Rng::derive(seed, Stream::ModelInit, 0));
        let personal = match strategy {
            Strategy::Adaptfed => Personalization::Hyper {
                generator: Generator::random(
                    arch,
                    hyper,
                    &mut Rng::derive(seed, Stream::HypernetInit, 0),
                )?,
                embeddings: random_embeddings(
                    clients,
                    hyper.embed_dim,
                    &mut Rng::derive(seed, Stream::Embedding, 0),
                ),
            },
            Strategy::VanillaTailored => Personalization::Vanilla {
                projections: vec![initial_projections(arch, seed); clients],
            },
            Strategy::Fedavg => Personalization::Global {
                projections: initial_projections(arch, seed),
            },
            Strategy::LocalOnly => Personalization::None,
        };
        Ok(Self {
            strategy,
            round: 0,
            xi,
            personal,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.xi.arch
    }

    /// Projections client `client` starts a round with (or is evaluated with),
    /// except under local-only, where they live on the client.
    pub fn projections_for(&self, client: usize) -> Result<Option<ModulationParams>> {
        Ok(match &self.personal {
            Personalization::Hyper {
                generator,
                embeddings,
            } => Some(generator.generate(embeddings.row(client))?),
            Personalization::Vanilla { projections } => Some(projections[client].clone()),
            Personalization::Global { projections } => Some(projections.clone()),
            Personalization::None => None,
        })
    }

    pub fn generator(&self) -> Option<(&Generator, &Matrix)> {
        match &self.personal {
            Personalization::Hyper {
                generator,
                embeddings,
            } => Some((generator, embeddings)),
            _ => None,
        }
    }
}

impl ParamSet for ServerState {
    fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.xi.named_tensors();
        match &self.personal {
            Personalization::Hyper {
                generator,
                embeddings,
            } => {
                out.extend(generator.named_tensors());
                out.push(("z".to_string(), embeddings));
            }
            Personalization::Vanilla { projections } => {
                for (i, p) in projections.iter().enumerate() {
                    out.extend(
                        p.named_tensors()
                            .into_iter()
                            .map(|(n, m)| (format!("client.{i}.{n}"), m)),
                    );
                }
            }
            Personalization::Global { projections } => out.extend(projections.named_tensors()),
            Personalization::None => {}
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.xi.tensors_mut();
        match &mut self.personal {
            Personalization::Hyper {
                generator,
                embeddings,
            } => {
                out.extend(generator.tensors_mut());
                out.push(embeddings);
            }
            Personalization::Vanilla { projections } => {
                for p in projections {
                    out.extend(p.tensors_mut());
                }
            }
            Personalization::Global { projections } => out.extend(projections.tensors_mut()),
            Personalization::None => {}
        }
        out
    }
}

/// Scalars moved per participating client per round, split by direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Transfer {
    /// Server to client: shared weights plus the personalized block.
    pub down: usize,
    /// Client to server.
    pub up: usize,
    /// Down-link scalars that are specific to the receiving client.
    pub personalized_down: usize,
}

impl Transfer {
    pub fn total(&self) -> usize {
        self.down + self.up
    }
}

/// Per-round transfer for one cohort member.
///
/// The shared block `xi` goes both ways for every communicating strategy.
/// A generator client receives its generated projections (or, for the
/// low-rank variant, its factors plus the shared base) and returns
/// `Delta P`; vanilla clients download and return their persisted
/// projections; FedAvg moves the global projections both ways.
pub fn transfer_per_round(strategy: Strategy, arch: &Arch, hyper: &HyperNetConfig) -> Transfer {
    let xi = arch.shared_scalars();
    let p = arch.modulation_scalars();
    match strategy {
        Strategy::Adaptfed => {
            let (personal, broadcast) = match hyper.rank {
                None => (p, 0),
                Some(r) => (arch.blocks * 3 * 2 * arch.width * r, p),
            };
            Transfer {
                down: xi + broadcast + personal,
                up: xi + p,
                personalized_down: personal,
            }
        }
        Strategy::VanillaTailored => Transfer {
            down: xi + p,
            up: xi + p,
            personalized_down: p,
        },
        Strategy::Fedavg => Transfer {
            down: xi + p,
            up: xi + p,
            personalized_down: 0,
        },
        Strategy::LocalOnly => Transfer {
            down: 0,
            up: 0,
            personalized_down: 0,
        },
    }
}

/// Full parameters of one client: shared `xi` plus its projections.
pub(crate) fn compose(p: ModulationParams, xi: &SharedParams) -> ModelParams {
    ModelParams { p, xi: xi.clone() }
}
