//! Trains all four strategies on a small label-skewed federation and
//! prints their test-accuracy curves.
//!
//! ```text
//! cargo run --release --example federated_training
//! ```

use adaptfed::datagen::{make_synthetic, TaskSpec};
use adaptfed::federation::{run_experiment, ClientState, RoundConfig, Simulation, Strategy};
use adaptfed::hypernet::HyperNetConfig;
use adaptfed::model::Arch;

fn main() -> adaptfed::Result<()> {
    let spec = TaskSpec {
        num_clients: 16,
        samples_per_client: 100,
        ..TaskSpec::default()
    };
    let arch = Arch {
        width: 8,
        blocks: 2,
        ..Arch::default()
    };
    let hyper = HyperNetConfig {
        embed_dim: 8,
        hidden: 32,
        ..HyperNetConfig::default()
    };
    let config = RoundConfig {
        rounds: 60,
        sample_fraction: 0.5,
        local_lr: 0.05,
        global_lr: 0.05,
        eval_every: 10,
        ..RoundConfig::default()
    };
    let task = make_synthetic(&spec, 1)?;
    for strategy in Strategy::ALL {
        let clients = task
            .clients
            .iter()
            .map(ClientState::from_data)
            .collect::<adaptfed::Result<Vec<_>>>()?;
        let mut sim = Simulation::new(&arch, &hyper, strategy, &config, clients, 1)?;
        let log = run_experiment(&mut sim, 1)?;
        let curve: Vec<String> = log
            .evaluations
            .iter()
            .map(|e| format!("{:.3}", e.weighted_acc))
            .collect();
        println!("{:<17} {}", strategy.name(), curve.join(" "));
    }
    Ok(())
}
