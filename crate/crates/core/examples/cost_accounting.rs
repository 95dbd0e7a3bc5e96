//! Server storage and per-round traffic for each strategy, and the client
//! count past which a shared generator is cheaper than per-client layers.

use adaptfed::analysis::{cost_report, generator_crossover};
use adaptfed::federation::Strategy;
use adaptfed::hypernet::HyperNetConfig;
use adaptfed::model::Arch;

fn main() -> adaptfed::Result<()> {
    let arch = Arch::default();
    let hyper = HyperNetConfig::default();
    println!(
        "crossover: generator pays off from N = {}",
        generator_crossover(&arch, &hyper)
    );
    for n in [10, 100, 1000] {
        for strategy in Strategy::ALL {
            let r = cost_report(&arch, &hyper, n, strategy)?;
            println!(
                "N={n:<5} {:<17} server {:>9} scalars  down {:>6}  up {:>6}",
                strategy.name(),
                r.server_resident_scalars,
                r.down_scalars,
                r.up_scalars
            );
        }
    }
    Ok(())
}
