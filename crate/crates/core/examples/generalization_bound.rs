//! Evaluates the generalization bound and shows how each term moves.

use adaptfed::analysis::{theorem1_rhs, BoundInputs};

fn main() -> adaptfed::Result<()> {
    let base = BoundInputs::counting(1000.0, 10.0, 50.0, 0.05);
    let t = theorem1_rhs(&base)?;
    println!(
        "M=1000 N=10 d=50 delta=0.05: sample {:.6} capacity {:.6} total {:.6}",
        t.sample, t.capacity, t.total
    );

    let with_generator = BoundInputs {
        l_h: 1.0,
        l_phi: 2.0,
        l_z: 1.5,
        l_xi: 1.0,
        r_h: 0.5,
        r_t: 0.5,
        ..base
    };
    for n in [2.0, 10.0, 50.0, 200.0] {
        let t = theorem1_rhs(&BoundInputs {
            n,
            ..with_generator
        })?;
        println!(
            "N={n:>5}: sample {:>8.4} capacity {:>8.4} generator {:>8.4} shared {:>8.4} total {:>8.4}",
            t.sample, t.capacity, t.generator, t.shared, t.total
        );
    }
    Ok(())
}
