use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Inputs of the generalization bound. The VC dimension is supplied by the
/// user; nothing here tries to derive it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    /// Total number of samples across clients.
    pub m: f64,
    /// Number of clients.
    pub n: f64,
    pub d_vc: f64,
    pub delta: f64,
    #[serde(default)]
    pub l_h: f64,
    #[serde(default)]
    pub l_phi: f64,
    #[serde(default)]
    pub l_z: f64,
    #[serde(default)]
    pub l_xi: f64,
    #[serde(default)]
    pub r_h: f64,
    #[serde(default)]
    pub r_t: f64,
}

impl BoundInputs {
    /// Only the counting terms; every Lipschitz constant and radius zero.
    pub fn counting(m: f64, n: f64, d_vc: f64, delta: f64) -> Self {
        Self {
            m,
            n,
            d_vc,
            delta,
            l_h: 0.0,
            l_phi: 0.0,
            l_z: 0.0,
            l_xi: 0.0,
            r_h: 0.0,
            r_t: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("M", self.m), ("N", self.n), ("d_vc", self.d_vc)] {
            if !(v > 0.0) || !v.is_finite() {
                return config_err(format!(
                    "bound input {name} must be positive and finite, got {v}"
                ));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return config_err(format!(
                "bound input delta must lie in (0, 1), got {}",
                self.delta
            ));
        }
        if self.n / self.delta <= 1.0 {
            return config_err(format!(
                "sample term: ln(N/delta) must be positive, got N={} delta={}",
                self.n, self.delta
            ));
        }
        if std::f64::consts::E * self.m / self.d_vc <= 1.0 {
            return config_err(format!(
                "capacity term: ln(e*M/d_vc) must be positive, got M={} d_vc={}",
                self.m, self.d_vc
            ));
        }
        let lipschitz = [
            ("L_h", self.l_h),
            ("L_phi", self.l_phi),
            ("L_z", self.l_z),
            ("L_xi", self.l_xi),
            ("R_h", self.r_h),
            ("R_t", self.r_t),
        ];
        for (name, v) in lipschitz {
            if !(v >= 0.0) || !v.is_finite() {
                return config_err(format!(
                    "bound input {name} must be finite and >= 0, got {v}"
                ));
            }
        }
        Ok(())
    }
}

/// The four terms of the bound and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundTerms {
    /// `sqrt(M/2 * ln(N/delta))`.
    pub sample: f64,
    /// `sqrt(d N / M * ln(e M / d))`.
    pub capacity: f64,
    /// `L_h R_h (L_phi + L_z)`.
    pub generator: f64,
    /// `L_xi R_t`.
    pub shared: f64,
    pub total: f64,
}

/// Evaluates the right-hand side exactly as written, with natural logs.
pub fn theorem1_rhs(b: &BoundInputs) -> Result<BoundTerms> {
    b.validate()?;
    let sample = (b.m / 2.0 * (b.n / b.delta).ln()).sqrt();
    let capacity = (b.d_vc * b.n / b.m * (std::f64::consts::E * b.m / b.d_vc).ln()).sqrt();
    let generator = b.l_h * b.r_h * (b.l_phi + b.l_z);
    let shared = b.l_xi * b.r_t;
    Ok(BoundTerms {
        sample,
        capacity,
        generator,
        shared,
        total: sample + capacity + generator + shared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> BoundInputs {
        BoundInputs::counting(1000.0, 10.0, 50.0, 0.05)
    }

    fn full() -> BoundInputs {
        BoundInputs {
            l_h: 1.5,
            l_phi: 0.7,
            l_z: 0.4,
            l_xi: 2.0,
            r_h: 3.0,
            r_t: 0.5,
            ..fixture()
        }
    }

    #[test]
    fn counting_fixture_matches_reference_values() {
        // Reference values from an arbitrary-precision evaluation of
        // sqrt(500 ln 200) and sqrt(0.5 (1 + ln 20)).
        let t = theorem1_rhs(&fixture()).unwrap();
        assert!((t.sample - 51.469_978_465_839_8).abs() < 1e-9);
        assert!((t.capacity - 1.413_458_926_455_592_3).abs() < 1e-9);
        assert!((t.total - 52.883_437_392_295_4).abs() < 1e-9);
        assert_eq!((t.generator, t.shared), (0.0, 0.0));
    }

    #[test]
    fn lipschitz_terms_add_as_written() {
        let t = theorem1_rhs(&full()).unwrap();
        assert!((t.generator - 1.5 * 3.0 * 1.1).abs() < 1e-12);
        assert!((t.shared - 1.0).abs() < 1e-12);
        let base = theorem1_rhs(&fixture()).unwrap();
        assert!((t.total - base.total - t.generator - t.shared).abs() < 1e-12);
    }

    fn sweep(set: impl Fn(&mut BoundInputs, f64), values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .map(|&v| {
                let mut b = full();
                set(&mut b, v);
                theorem1_rhs(&b).unwrap().total
            })
            .collect()
    }

    fn strictly_increasing(xs: &[f64]) -> bool {
        xs.windows(2).all(|w| w[1] > w[0])
    }

    type Setter = fn(&mut BoundInputs, f64);

    #[test]
    fn total_increases_in_every_lipschitz_constant_and_radius() {
        let values = [0.1, 0.5, 1.0, 2.0, 8.0];
        let setters: [(&str, Setter); 6] = [
            ("l_h", |b, v| b.l_h = v),
            ("l_phi", |b, v| b.l_phi = v),
            ("l_z", |b, v| b.l_z = v),
            ("l_xi", |b, v| b.l_xi = v),
            ("r_h", |b, v| b.r_h = v),
            ("r_t", |b, v| b.r_t = v),
        ];
        for (name, set) in setters {
            assert!(strictly_increasing(&sweep(set, &values)), "{name}");
        }
    }

    #[test]
    fn both_counting_terms_increase_in_client_count() {
        let terms: Vec<BoundTerms> = [2.0, 5.0, 10.0, 50.0, 200.0]
            .iter()
            .map(|&n| theorem1_rhs(&BoundInputs { n, ..fixture() }).unwrap())
            .collect();
        assert!(strictly_increasing(
            &terms.iter().map(|t| t.sample).collect::<Vec<_>>()
        ));
        assert!(strictly_increasing(
            &terms.iter().map(|t| t.capacity).collect::<Vec<_>>()
        ));
    }

    #[test]
    fn domain_violations_name_the_offending_term() {
        let bad_delta = BoundInputs {
            delta: 1.0,
            ..fixture()
        };
        assert!(theorem1_rhs(&bad_delta)
            .unwrap_err()
            .to_string()
            .contains("delta"));
        let bad_capacity = BoundInputs {
            d_vc: 5000.0,
            ..fixture()
        };
        assert!(theorem1_rhs(&bad_capacity)
            .unwrap_err()
            .to_string()
            .contains("capacity"));
        let negative = BoundInputs {
            l_z: -1.0,
            ..fixture()
        };
        assert!(theorem1_rhs(&negative)
            .unwrap_err()
            .to_string()
            .contains("L_z"));
        let zero_m = BoundInputs {
            m: 0.0,
            ..fixture()
        };
        assert!(theorem1_rhs(&zero_m).is_err());
    }

    #[test]
    fn inputs_parse_from_json_and_reject_unknown_keys() {
        let b: BoundInputs =
            serde_json::from_str(r#"{"m": 1000, "n": 10, "d_vc": 50, "delta": 0.05}"#).unwrap();
        assert_eq!(b, fixture());
        assert!(serde_json::from_str::<BoundInputs>(
            r#"{"m": 1, "n": 1, "d_vc": 1, "delta": 0.5, "x": 0}"#
        )
        .is_err());
    }
}
