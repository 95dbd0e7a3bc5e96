use std::io::Write;

use serde::Serialize;

use crate::checkpoint::write_params;
use crate::error::{config_err, Result};
use crate::federation::{transfer_per_round, ServerState, Strategy};
use crate::hypernet::HyperNetConfig;
use crate::model::Arch;

/// Parameter and communication counts for one strategy, in scalars.
///
/// "Server-resident" counts everything the server keeps between rounds,
/// which is exactly what a server checkpoint serializes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub strategy: Strategy,
    pub clients: usize,
    /// Client-independent weights: `xi`, plus the global projections under FedAvg.
    pub common_scalars: usize,
    /// Generator weights `phi` (including the low-rank base), adaptfed only.
    pub generator_scalars: usize,
    /// Per-client storage on the server, summed over clients.
    pub personalization_scalars: usize,
    /// Per-client storage on the server for one client.
    pub per_client_server_scalars: usize,
    pub server_resident_scalars: usize,
    /// What each client must keep between rounds (local-only keeps its model).
    pub per_client_resident_scalars: usize,
    /// Per participating client per round.
    pub down_scalars: usize,
    pub up_scalars: usize,
    /// Client-specific part of `down_scalars`.
    pub personalized_down_scalars: usize,
}

fn generator_scalars(arch: &Arch, hyper: &HyperNetConfig) -> usize {
    let (d, heads) = (arch.width, arch.blocks * 3);
    let trunk = hyper.trunk_scalars();
    match hyper.rank {
        None => trunk + heads * (hyper.hidden * d * d + d * d),
        Some(r) => trunk + arch.modulation_scalars() + 2 * heads * (hyper.hidden * d * r + d * r),
    }
}

pub fn cost_report(
    arch: &Arch,
    hyper: &HyperNetConfig,
    clients: usize,
    strategy: Strategy,
) -> Result<CostReport> {
    arch.validate()?;
    hyper.validate()?;
    if clients == 0 {
        return config_err("cost report needs at least one client");
    }
    let xi = arch.shared_scalars();
    let p = arch.modulation_scalars();
    let (common, generator, per_client, client_resident) = match strategy {
        Strategy::Adaptfed => (xi, generator_scalars(arch, hyper), hyper.embed_dim, 0),
        Strategy::VanillaTailored => (xi, 0, p, 0),
        Strategy::Fedavg => (xi + p, 0, 0, 0),
        // The server keeps only the common initialization it hands out.
        Strategy::LocalOnly => (xi, 0, 0, xi + p),
    };
    let transfer = transfer_per_round(strategy, arch, hyper);
    Ok(CostReport {
        strategy,
        clients,
        common_scalars: common,
        generator_scalars: generator,
        personalization_scalars: clients * per_client,
        per_client_server_scalars: per_client,
        server_resident_scalars: common + generator + clients * per_client,
        per_client_resident_scalars: client_resident,
        down_scalars: transfer.down,
        up_scalars: transfer.up,
        personalized_down_scalars: transfer.personalized_down,
    })
}

/// Smallest client count at which the generator is strictly smaller than
/// vanilla per-client projection storage, `phi < N * B * 3 * d^2`.
pub fn generator_crossover(arch: &Arch, hyper: &HyperNetConfig) -> usize {
    generator_scalars(arch, hyper) / arch.modulation_scalars() + 1
}

/// Serializes a freshly initialized server state and returns its payload
/// size divided by 8: the number of scalars actually stored.
pub fn serialized_server_scalars(
    arch: &Arch,
    hyper: &HyperNetConfig,
    strategy: Strategy,
    clients: usize,
    seed: u64,
) -> Result<usize> {
    let state = ServerState::initial(arch, hyper, strategy, clients, seed)?;
    let mut sink = Vec::new();
    let bytes = write_params(&state, serde_json::Value::Null, &mut sink)?;
    Ok(bytes / 8)
}

pub fn write_cost_csv<W: Write>(reports: &[CostReport], mut out: W) -> Result<()> {
    writeln!(
        out,
        "strategy,clients,common,generator,personalization,per_client_server,server_resident,\
         per_client_resident,down,up,personalized_down"
    )?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.strategy.name(),
            r.clients,
            r.common_scalars,
            r.generator_scalars,
            r.personalization_scalars,
            r.per_client_server_scalars,
            r.server_resident_scalars,
            r.per_client_resident_scalars,
            r.down_scalars,
            r.up_scalars,
            r.personalized_down_scalars
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Arch {
        Arch {
            width: 16,
            blocks: 8,
            ..Arch::default()
        }
    }

    fn hyper() -> HyperNetConfig {
        HyperNetConfig {
            embed_dim: 32,
            hidden: 100,
            depth: 2,
            ..HyperNetConfig::default()
        }
    }

    #[test]
    fn crossover_matches_a_hand_count() {
        // Trunk: 32*100 + 100 + 100*100 + 100 = 13_400.
        // Heads: 24 * (100*256 + 256) = 620_544. Total 633_944.
        let report = cost_report(&arch(), &hyper(), 1, Strategy::Adaptfed).unwrap();
        assert_eq!(report.generator_scalars, 633_944);
        let vanilla = cost_report(&arch(), &hyper(), 1, Strategy::VanillaTailored).unwrap();
        assert_eq!(vanilla.per_client_server_scalars, 6144);
        let n_star = generator_crossover(&arch(), &hyper());
        assert_eq!(n_star, 104); // ceil(633_944 / 6144)
        for n in [1, 50, 103, 104, 105, 500] {
            let vanilla = cost_report(&arch(), &hyper(), n, Strategy::VanillaTailored).unwrap();
            assert_eq!(
                report.generator_scalars < vanilla.personalization_scalars,
                n >= n_star,
                "n = {n}"
            );
        }
    }

    #[test]
    fn a_single_client_pays_for_the_generator() {
        let a = cost_report(&arch(), &hyper(), 1, Strategy::Adaptfed).unwrap();
        let v = cost_report(&arch(), &hyper(), 1, Strategy::VanillaTailored).unwrap();
        assert!(v.personalization_scalars <= a.generator_scalars);
    }

    #[test]
    fn personalization_storage_is_one_embedding_per_client() {
        for n in [1, 7, 50] {
            let a = cost_report(&arch(), &hyper(), n, Strategy::Adaptfed).unwrap();
            let v = cost_report(&arch(), &hyper(), n, Strategy::VanillaTailored).unwrap();
            assert_eq!(a.per_client_server_scalars, 32);
            assert_eq!(a.personalization_scalars, n * 32);
            assert_eq!(v.personalization_scalars, n * 8 * 3 * 256);
        }
    }

    #[test]
    fn low_rank_transmits_the_factors_only() {
        let lr = HyperNetConfig {
            rank: Some(2),
            ..hyper()
        };
        let low = cost_report(&arch(), &lr, 10, Strategy::Adaptfed).unwrap();
        let full = cost_report(&arch(), &hyper(), 10, Strategy::Adaptfed).unwrap();
        assert_eq!(low.personalized_down_scalars, 1536);
        assert_eq!(full.personalized_down_scalars, 6144);
        for r in 1..8 {
            let cfg = HyperNetConfig {
                rank: Some(r),
                ..hyper()
            };
            let c = cost_report(&arch(), &cfg, 10, Strategy::Adaptfed).unwrap();
            assert_eq!(c.personalized_down_scalars, 2 * 16 * r * 3 * 8);
            assert!(c.personalized_down_scalars < full.personalized_down_scalars);
        }
    }

    #[test]
    fn accounting_matches_serialized_state() {
        let small = Arch {
            width: 6,
            blocks: 2,
            ..Arch::default()
        };
        let configs = [
            hyper(),
            HyperNetConfig {
                rank: Some(2),
                depth: 3,
                ..hyper()
            },
        ];
        for cfg in configs {
            for strategy in Strategy::ALL {
                for n in [1, 5] {
                    let report = cost_report(&small, &cfg, n, strategy).unwrap();
                    let stored = serialized_server_scalars(&small, &cfg, strategy, n, 0).unwrap();
                    assert_eq!(
                        report.server_resident_scalars, stored,
                        "{strategy:?} n={n} {cfg:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn csv_has_one_row_per_report() {
        let reports: Vec<CostReport> = Strategy::ALL
            .iter()
            .map(|&s| cost_report(&arch(), &hyper(), 50, s).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_cost_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().all(|l| l.split(',').count() == 11));
    }
}
