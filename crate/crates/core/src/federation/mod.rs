//! The round protocol, its baselines, and novel-client adaptation.
//!
//! A round samples a cohort, broadcasts the shared weights, runs local SGD
//! on every cohort member (optionally on a worker pool), and then reduces
//! the results serially in increasing client id:
//!
//! | strategy           | client starts from            | server keeps after the round            |
//! |--------------------|-------------------------------|-----------------------------------------|
//! | `adaptfed`         | `(h(phi; z_i), xi_bar)`       | averaged `xi`, updated `phi` and `z_i`  |
//! | `vanilla-tailored` | `(P_i, xi_bar)`               | averaged `xi`, each trained `P_i`       |
//! | `fedavg`           | `(P_bar, xi_bar)`             | averaged `xi` and `P`                   |
//! | `local-only`       | the client's own model        | nothing                                 |
//!
//! Because every random draw comes from a stream derived from the seed, the
//! round number and the client id, and because reductions never depend on
//! completion order, results are identical for any worker count.

mod experiment;
mod novel;
mod simulation;
mod state;

pub use experiment::{
    run_experiment, worker_pool, write_metrics_jsonl, write_summary_csv, ExperimentLog,
    MetricRecord, METRICS_SCHEMA_VERSION,
};
pub use novel::{
    adapt_new_client, embedding_loss_and_grad, prior_mean_embedding, AdaptConfig, AdaptResult,
};
pub use simulation::{
    local_train, ClientEval, ClientUpdate, Evaluation, RoundReport, Simulation, Split,
};
pub use state::{
    transfer_per_round, ClientState, Personalization, RoundConfig, ServerState, Strategy, Transfer,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_synthetic, Shift, TaskSpec};
    use crate::hypernet::HyperNetConfig;
    use crate::model::Arch;
    use crate::numcore::{finite_diff_grad, ParamSet, Rng};

    fn arch() -> Arch {
        Arch {
            input_dim: 8,
            width: 4,
            blocks: 2,
            focal_levels: 2,
            tokens: 4,
            num_classes: 10,
        }
    }

    fn hyper() -> HyperNetConfig {
        HyperNetConfig {
            embed_dim: 3,
            hidden: 6,
            ..HyperNetConfig::default()
        }
    }

    fn clients(n: usize, seed: u64) -> Vec<ClientState> {
        let spec = TaskSpec {
            num_clients: n,
            input_dim: 8,
            samples_per_client: 50,
            shift: Shift::LabelSkew,
            ..TaskSpec::default()
        };
        make_synthetic(&spec, seed)
            .unwrap()
            .clients
            .iter()
            .map(|c| ClientState::from_data(c).unwrap())
            .collect()
    }

    fn config() -> RoundConfig {
        RoundConfig {
            rounds: 3,
            local_epochs: 1,
            local_lr: 0.05,
            global_lr: 0.05,
            sample_fraction: 0.5,
            batch_size: 16,
            eval_every: 1,
            ..RoundConfig::default()
        }
    }

    fn sim(strategy: Strategy, cfg: &RoundConfig) -> Simulation {
        Simulation::new(&arch(), &hyper(), strategy, cfg, clients(6, 1), 7).unwrap()
    }

    #[test]
    fn frozen_dynamics_leave_the_server_bitwise_unchanged() {
        let cfg = RoundConfig {
            local_lr: 0.0,
            global_lr: 0.0,
            ..config()
        };
        for strategy in Strategy::ALL {
            let mut s = sim(strategy, &cfg);
            let before = s.server.clone();
            let locals = s.local_models.clone();
            s.run_round(None).unwrap();
            assert!(s.server.bitwise_eq(&before), "{strategy}");
            for (a, b) in s.local_models.iter().zip(&locals) {
                assert!(a.bitwise_eq(b));
            }
        }
    }

    #[test]
    fn full_participation_samples_everyone() {
        let cfg = RoundConfig {
            sample_fraction: 1.0,
            ..config()
        };
        let s = sim(Strategy::Fedavg, &cfg);
        for round in 1..5 {
            assert_eq!(s.cohort(round), (0..6).collect::<Vec<_>>());
        }
        assert_eq!(config().cohort_size(6), 3);
        assert_eq!(
            RoundConfig {
                sample_fraction: 0.2,
                ..config()
            }
            .cohort_size(50),
            10
        );
    }

    #[test]
    fn cohort_weights_sum_to_one() {
        let mut s = sim(Strategy::Adaptfed, &config());
        for _ in 0..3 {
            let report = s.run_round(None).unwrap();
            assert!((report.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_hands_every_cohort_member_the_shared_weights() {
        let cfg = RoundConfig {
            local_epochs: 0,
            ..config()
        };
        let s = sim(Strategy::Adaptfed, &cfg);
        let cohort = s.cohort(1);
        for &i in &cohort {
            let p = s.client_params(i).unwrap();
            assert!(p.xi.bitwise_eq(&s.server.xi));
        }
    }

    #[test]
    fn non_cohort_state_is_untouched() {
        for strategy in [Strategy::Adaptfed, Strategy::VanillaTailored] {
            let mut s = sim(strategy, &config());
            let before = s.server.clone();
            let report = s.run_round(None).unwrap();
            for i in (0..6).filter(|i| !report.cohort.contains(i)) {
                match (&s.server.personal, &before.personal) {
                    (
                        Personalization::Hyper { embeddings: a, .. },
                        Personalization::Hyper { embeddings: b, .. },
                    ) => assert_eq!(a.row(i), b.row(i)),
                    (
                        Personalization::Vanilla { projections: a },
                        Personalization::Vanilla { projections: b },
                    ) => assert!(a[i].bitwise_eq(&b[i])),
                    _ => unreachable!(),
                }
            }
        }
    }

    #[test]
    fn local_only_never_touches_the_server() {
        let mut s = sim(Strategy::LocalOnly, &config());
        let before = s.server.clone();
        run_experiment(&mut s, 1).unwrap();
        assert!(s.server.xi.bitwise_eq(&before.xi));
        assert!(s.tx.iter().all(|&t| t == 0));
    }

    #[test]
    fn random_model_is_at_chance() {
        // A single random network may happen to align with the clusters, so
        // average over initializations.
        let data = clients(40, 3);
        let seeds = 10;
        let acc = (0..seeds)
            .map(|seed| {
                let s = Simulation::new(
                    &arch(),
                    &hyper(),
                    Strategy::Fedavg,
                    &config(),
                    data.clone(),
                    seed,
                )
                .unwrap();
                s.evaluate(Split::Test, None).unwrap().weighted_acc
            })
            .sum::<f64>()
            / seeds as f64;
        assert!((acc - 0.1).abs() <= 0.03, "accuracy {acc}");
    }

    #[test]
    fn equal_sample_counts_give_the_arithmetic_mean() {
        let s = sim(Strategy::Adaptfed, &config());
        let e = s.evaluate(Split::Test, None).unwrap();
        let mean = e.clients.iter().map(|c| c.acc).sum::<f64>() / e.clients.len() as f64;
        assert!((e.weighted_acc - mean).abs() < 1e-12);
    }

    #[test]
    fn zero_rounds_reports_the_initial_state_only() {
        let cfg = RoundConfig {
            rounds: 0,
            ..config()
        };
        let mut s = sim(Strategy::Adaptfed, &cfg);
        let log = run_experiment(&mut s, 1).unwrap();
        assert_eq!(log.evaluations.len(), 1);
        assert_eq!(log.records.len(), 6);
        assert!(log
            .records
            .iter()
            .all(|r| r.round == 0 && r.tx_scalars == 0));
    }

    #[test]
    fn reruns_and_worker_counts_agree() {
        for strategy in Strategy::ALL {
            let mut a = sim(strategy, &config());
            let mut b = sim(strategy, &config());
            let mut c = sim(strategy, &config());
            let la = run_experiment(&mut a, 1).unwrap();
            let lb = run_experiment(&mut b, 1).unwrap();
            let lc = run_experiment(&mut c, 3).unwrap();
            assert_eq!(la.records, lb.records);
            assert_eq!(la.records, lc.records);
            assert!(a.server.bitwise_eq(&c.server));
        }
    }

    #[test]
    fn adaptfed_server_size_grows_only_by_the_embedding_table() {
        let cfg = config();
        let small = Simulation::new(
            &arch(),
            &hyper(),
            Strategy::Adaptfed,
            &cfg,
            clients(4, 1),
            0,
        )
        .unwrap();
        let large = Simulation::new(
            &arch(),
            &hyper(),
            Strategy::Adaptfed,
            &cfg,
            clients(9, 1),
            0,
        )
        .unwrap();
        let d = hyper().embed_dim;
        assert_eq!(
            large.server.num_scalars() - small.server.num_scalars(),
            5 * d
        );

        let small = Simulation::new(
            &arch(),
            &hyper(),
            Strategy::VanillaTailored,
            &cfg,
            clients(4, 1),
            0,
        )
        .unwrap();
        let large = Simulation::new(
            &arch(),
            &hyper(),
            Strategy::VanillaTailored,
            &cfg,
            clients(9, 1),
            0,
        )
        .unwrap();
        assert_eq!(
            large.server.num_scalars() - small.server.num_scalars(),
            5 * arch().modulation_scalars()
        );
    }

    #[test]
    fn zero_epoch_adaptation_reports_the_prior_mean() {
        let mut s = sim(Strategy::Adaptfed, &config());
        run_experiment(&mut s, 1).unwrap();
        let novel = &clients(7, 1)[6];
        let cfg = AdaptConfig {
            epochs: 0,
            ..AdaptConfig::default()
        };
        let out = adapt_new_client(&s.server, novel, &cfg, &mut Rng::new(0)).unwrap();
        let (generator, embeddings) = s.server.generator().unwrap();
        let z0 = prior_mean_embedding(embeddings);
        assert_eq!(out.embedding, z0);
        let params = crate::model::ModelParams {
            p: generator.generate(&z0).unwrap(),
            xi: s.server.xi.clone(),
        };
        let (_, acc) = crate::model::evaluate_batch(&params, &novel.test).unwrap();
        assert_eq!(out.accuracy, vec![acc]);
    }

    #[test]
    fn adaptation_requires_a_generator() {
        let s = sim(Strategy::Fedavg, &config());
        let novel = &clients(7, 1)[6];
        assert!(
            adapt_new_client(&s.server, novel, &AdaptConfig::default(), &mut Rng::new(0)).is_err()
        );
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let s = sim(Strategy::Adaptfed, &config());
        let (generator, embeddings) = s.server.generator().unwrap();
        let batch = s.clients[0].train.select(&[0, 1, 2, 3, 4]);
        let z = embeddings.row(2).to_vec();
        let (_, dz) = embedding_loss_and_grad(generator, &s.server.xi, &z, &batch).unwrap();
        let num = finite_diff_grad(
            |zz: &[f64]| {
                embedding_loss_and_grad(generator, &s.server.xi, zz, &batch)
                    .unwrap()
                    .0
            },
            &z,
            1e-6,
        )
        .unwrap();
        for (a, n) in dz.iter().zip(&num) {
            assert!((a - n).abs() / (a.abs() + 1e-8) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn metrics_round_trip_through_jsonl() {
        let mut s = sim(Strategy::VanillaTailored, &config());
        let log = run_experiment(&mut s, 1).unwrap();
        let mut buf = Vec::new();
        write_metrics_jsonl(&log.records, &mut buf).unwrap();
        let parsed: Vec<MetricRecord> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(parsed, log.records);
        let mut csv = Vec::new();
        write_summary_csv(&log, s.strategy(), &mut csv).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap().lines().count(),
            1 + log.evaluations.len()
        );
    }
}
