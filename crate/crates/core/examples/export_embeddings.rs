//! Trains a small federation and writes the learned client embeddings as
//! CSV, with each client's group, for plotting.
//!
//! ```text
//! cargo run --release --example export_embeddings -- embeddings.csv
//! ```

use std::fs::File;
use std::io::BufWriter;

use adaptfed::analysis::{export_embeddings, group_distances, parse_embeddings};
use adaptfed::datagen::{make_synthetic, TaskSpec};
use adaptfed::federation::{run_experiment, ClientState, RoundConfig, Simulation, Strategy};
use adaptfed::hypernet::HyperNetConfig;
use adaptfed::model::Arch;

fn main() -> adaptfed::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "embeddings.csv".into());
    let spec = TaskSpec {
        num_clients: 16,
        samples_per_client: 80,
        ..TaskSpec::default()
    };
    let task = make_synthetic(&spec, 11)?;
    let clients = task
        .clients
        .iter()
        .map(ClientState::from_data)
        .collect::<adaptfed::Result<Vec<_>>>()?;
    let config = RoundConfig {
        rounds: 60,
        sample_fraction: 0.5,
        local_lr: 0.05,
        global_lr: 0.05,
        eval_every: 60,
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
    let mut sim = Simulation::new(&arch, &hyper, Strategy::Adaptfed, &config, clients, 11)?;
    run_experiment(&mut sim, 1)?;

    let groups: Vec<usize> = (0..spec.num_clients).map(|c| spec.group_of(c)).collect();
    export_embeddings(&sim.server, &groups, BufWriter::new(File::create(&path)?))?;
    let rows = parse_embeddings(std::io::BufReader::new(File::open(&path)?))?;
    let d = group_distances(&rows)?;
    println!(
        "wrote {path}: mean distance within groups {:.3}, across groups {:.3}",
        d.within, d.across
    );
    Ok(())
}
