//! Trains a federation, then brings in clients it never saw and fits only
//! their embeddings against the frozen generator.

use adaptfed::datagen::{make_synthetic, TaskSpec};
use adaptfed::federation::{
    adapt_new_client, run_experiment, AdaptConfig, ClientState, RoundConfig, Simulation, Strategy,
};
use adaptfed::hypernet::HyperNetConfig;
use adaptfed::model::Arch;
use adaptfed::numcore::{Rng, Stream};

fn main() -> adaptfed::Result<()> {
    let seed = 2;
    let spec = TaskSpec {
        num_clients: 16,
        samples_per_client: 100,
        ..TaskSpec::default()
    };
    let task = make_synthetic(&spec, seed)?;
    let clients = task
        .clients
        .iter()
        .map(ClientState::from_data)
        .collect::<adaptfed::Result<Vec<_>>>()?;
    let config = RoundConfig {
        rounds: 80,
        sample_fraction: 0.5,
        local_lr: 0.05,
        global_lr: 0.05,
        eval_every: 80,
        ..RoundConfig::default()
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
    let mut sim = Simulation::new(&arch, &hyper, Strategy::Adaptfed, &config, clients, seed)?;
    let log = run_experiment(&mut sim, 1)?;
    println!(
        "trained clients: {:.3}",
        log.final_evaluation().unwrap().weighted_acc
    );

    let adapt = AdaptConfig {
        lr: 0.5,
        ..AdaptConfig::default()
    };
    for id in spec.num_clients..spec.num_clients + spec.groups {
        let novel = ClientState::from_data(&task.world.client(id)?)?;
        let mut rng = Rng::derive(seed, Stream::NovelClient, id as u64);
        let result = adapt_new_client(&sim.server, &novel, &adapt, &mut rng)?;
        let curve: Vec<String> = result.accuracy.iter().map(|a| format!("{a:.3}")).collect();
        println!(
            "novel client {id} (group {}): {}",
            spec.group_of(id),
            curve.join(" ")
        );
    }
    Ok(())
}
