//! Low-rank generators: projections are built from `U V` factors, so a
//! client downloads `2 d r` scalars per projection instead of `d^2`.

use adaptfed::analysis::cost_report;
use adaptfed::federation::Strategy;
use adaptfed::hypernet::{Generator, HyperNetConfig};
use adaptfed::model::Arch;
use adaptfed::numcore::{ParamSet, Rng};

fn main() -> adaptfed::Result<()> {
    let arch = Arch::default();
    let mut rng = Rng::new(0);
    let z: Vec<f64> = (0..HyperNetConfig::default().embed_dim)
        .map(|_| rng.gaussian())
        .collect();
    for rank in [None, Some(1), Some(2), Some(4)] {
        let hyper = HyperNetConfig {
            rank,
            ..HyperNetConfig::default()
        };
        let generator = Generator::random(&arch, &hyper, &mut rng)?;
        let p = generator.generate(&z)?;
        let report = cost_report(&arch, &hyper, 50, Strategy::Adaptfed)?;
        println!(
            "rank {:>4}: generator {:>7} scalars, projections {:>5} scalars, personalized download {:>5}",
            rank.map_or("full".to_string(), |r| r.to_string()),
            generator.num_scalars(),
            p.num_scalars(),
            report.personalized_down_scalars
        );
    }
    Ok(())
}
