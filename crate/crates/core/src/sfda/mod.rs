//! Source-free domain adaptation.
//!
//! Clients send only per-feature moments of their unlabeled inputs (their
//! "style"). The server pre-trains on its labeled source pool with each
//! sample re-styled as a random client, then gives the pool up. From there
//! each client adapts without labels, minimizing
//!
//! ```text
//! L = L_pseudo + lambda_kd * L_kd
//! ```
//!
//! where `L_pseudo` is cross-entropy on the teacher's confident predictions
//! and `L_kd = T^2 KL(teacher_T || student_T)`. Each client keeps its own
//! teacher, the running mean of its student snapshots every `omega` rounds
//! from `t_start` on; students are averaged across clients after each round.

mod experiment;
mod losses;
mod teacher;

pub use experiment::{
    make_two_domain, pretrain, run_sfda_experiment, sfda_round, source_fingerprints, SfdaPhase,
    SfdaReport, SfdaRoundStats, SourceAudit, TargetClient, TwoDomainSpec, TwoDomainTask,
};
pub use losses::{
    apply_style, extract_style, kd_loss, kd_loss_and_grad, pseudo_labels,
    pseudo_labels_from_logits, sfda_loss_and_grad, SfdaConfig, SfdaLoss, StyleDescriptor,
};
pub use teacher::TeacherState;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, ModelParams};
    use crate::numcore::{finite_diff_grad, Matrix, ParamSet, Rng};
    use proptest::prelude::*;

    fn arch() -> Arch {
        Arch {
            input_dim: 8,
            width: 4,
            blocks: 2,
            focal_levels: 1,
            tokens: 2,
            num_classes: 3,
        }
    }

    fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gaussian()).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn own_style_is_a_fixed_point() {
        let x = gaussian_matrix(50, 6, &mut Rng::new(1));
        let style = extract_style(&x).unwrap();
        let y = apply_style(&x, &style, &style).unwrap();
        for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn restyled_inputs_take_the_target_moments() {
        let mut rng = Rng::new(2);
        let x = gaussian_matrix(200, 5, &mut rng);
        let mut other = gaussian_matrix(300, 5, &mut rng);
        for i in 0..other.rows() {
            for (j, v) in other.row_mut(i).iter_mut().enumerate() {
                *v = (j as f64 + 0.5) * *v - 3.0 + j as f64;
            }
        }
        let (src, target) = (extract_style(&x).unwrap(), extract_style(&other).unwrap());
        let got = extract_style(&apply_style(&x, &src, &target).unwrap()).unwrap();
        for j in 0..5 {
            assert!((got.mean[j] - target.mean[j]).abs() < 1e-9);
            assert!((got.std[j] - target.std[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_features_pass_through() {
        let x = Matrix::from_rows(&[&[1.0, 5.0], &[2.0, 5.0], &[3.0, 5.0]]).unwrap();
        let style = extract_style(&x).unwrap();
        assert_eq!(style.std[1], 0.0);
        let target = StyleDescriptor {
            mean: vec![0.0, 10.0],
            std: vec![2.0, 3.0],
        };
        let y = apply_style(&x, &style, &target).unwrap();
        assert!(y.is_finite());
        assert_eq!(y.get(1, 1), 5.0);
    }

    #[test]
    fn pseudo_label_thresholds() {
        let logits = Matrix::from_rows(&[&[2.0, 0.0], &[0.1, 0.0]]).unwrap();
        // softmax maxima: 0.881 and 0.525
        assert_eq!(pseudo_labels_from_logits(&logits, 0.7), (vec![0], vec![0]));
        assert_eq!(
            pseudo_labels_from_logits(&logits, 0.0),
            (vec![0, 1], vec![0, 0])
        );
        assert_eq!(
            pseudo_labels_from_logits(&logits, 1.0 + 1e-12),
            (vec![], vec![])
        );
    }

    #[test]
    fn kd_fixture_matches_hand_value() {
        let s = Matrix::from_rows(&[&[0.0, 1.0]]).unwrap();
        let t = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        // p = (e, 1)/(e + 1), q = (1, e)/(e + 1): KL = (p1 - p2) ln(p1/p2) = (e - 1)/(e + 1).
        let e = std::f64::consts::E;
        let expected = (e - 1.0) / (e + 1.0);
        let got = kd_loss(&s, &t, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got}");
        assert!((got - 0.462).abs() < 1e-3);
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let s = gaussian_matrix(3, 4, &mut rng);
        let t = gaussian_matrix(3, 4, &mut rng);
        let (_, grad) = kd_loss_and_grad(&s, &t, 2.0).unwrap();
        let num = finite_diff_grad(
            |v: &[f64]| kd_loss(&Matrix::from_vec(3, 4, v.to_vec()).unwrap(), &t, 2.0).unwrap(),
            s.as_slice(),
            1e-6,
        )
        .unwrap();
        for (a, n) in grad.as_slice().iter().zip(&num) {
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }

    proptest! {
        #[test]
        fn kd_is_nonnegative_and_vanishes_exactly_on_row_shifts(
            s in prop::collection::vec(-5.0f64..5.0, 6),
            t in prop::collection::vec(-5.0f64..5.0, 6),
            shift in prop::collection::vec(-3.0f64..3.0, 2),
            temperature in 0.5f64..4.0,
        ) {
            let sm = Matrix::from_vec(2, 3, s.clone()).unwrap();
            let tm = Matrix::from_vec(2, 3, t).unwrap();
            prop_assert!(kd_loss(&sm, &tm, temperature).unwrap() >= 0.0);
            let mut shifted = sm.clone();
            for (i, c) in shift.iter().enumerate() {
                shifted.row_mut(i).iter_mut().for_each(|v| *v += c);
            }
            prop_assert!(kd_loss(&shifted, &sm, temperature).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn kd_is_positive_when_logits_differ_beyond_a_shift() {
        let s = Matrix::from_rows(&[&[0.0, 1.0, 2.0]]).unwrap();
        let t = Matrix::from_rows(&[&[0.0, 1.0, 2.5]]).unwrap();
        assert!(kd_loss(&s, &t, 2.0).unwrap() > 1e-6);
    }

    fn filled(value: f64) -> ModelParams {
        let mut p = ModelParams::zeros(&arch());
        for m in p.tensors_mut() {
            m.as_mut_slice().fill(value);
        }
        p
    }

    #[test]
    fn swa_fixtures() {
        let student = ModelParams::random(&arch(), &mut Rng::new(1));
        let mut teacher = TeacherState::new(filled(9.0), 5, 10).unwrap();
        assert!(teacher.swa_update(&student, 11).is_err());
        teacher.swa_update(&student, 10).unwrap();
        assert!(teacher.weights.bitwise_eq(&student));

        let mut teacher = TeacherState {
            weights: filled(2.0),
            count: 1,
            omega: 5,
            t_start: 10,
        };
        teacher.swa_update(&filled(4.0), 15).unwrap();
        assert!(teacher.weights.flatten().iter().all(|&v| v == 3.0));
        assert_eq!(teacher.count, 2);
    }

    #[test]
    fn swa_teacher_is_the_mean_of_its_snapshots() {
        let mut rng = Rng::new(8);
        for k in 1..=20 {
            let mut teacher = TeacherState::new(ModelParams::zeros(&arch()), 3, 2).unwrap();
            let mut sum = ModelParams::zeros(&arch()).flatten();
            for s in 0..k {
                let snap = ModelParams::random(&arch(), &mut rng);
                for (a, b) in sum.iter_mut().zip(snap.flatten()) {
                    *a += b;
                }
                teacher.swa_update(&snap, 2 + 3 * s).unwrap();
            }
            for (w, s) in teacher.weights.flatten().iter().zip(&sum) {
                assert!((w - s / k as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_pseudo_set_without_distillation_changes_nothing() {
        let mut rng = Rng::new(3);
        let mut student = ModelParams::random(&arch(), &mut rng);
        let before = student.clone();
        let mut teacher =
            TeacherState::new(ModelParams::random(&arch(), &mut rng), 5, 100).unwrap();
        let inputs = gaussian_matrix(20, 8, &mut rng);
        let cfg = SfdaConfig {
            lambda_kd: 0.0,
            tau: 1.0,
            ..SfdaConfig::default()
        };
        let loss = sfda_loss_and_grad(&student, &teacher.weights, &inputs, &cfg).unwrap();
        assert_eq!((loss.total, loss.kept), (0.0, 0));
        let stats = sfda_round(&mut student, &mut teacher, &inputs, &cfg, 1, &mut rng).unwrap();
        assert_eq!(stats.pseudo_loss, 0.0);
        assert!(student.bitwise_eq(&before));
    }

    #[test]
    fn adaptation_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let mut rng = Rng::new(seed);
            let student = ModelParams::random(&arch(), &mut rng);
            let teacher = ModelParams::random(&arch(), &mut rng);
            let inputs = gaussian_matrix(4, 8, &mut rng);
            // Threshold between the second and third most confident samples.
            let probs = crate::model::softmax_rows(&losses::logits_of(&teacher, &inputs).unwrap());
            let mut conf: Vec<f64> = (0..4)
                .map(|i| probs.row(i).iter().cloned().fold(0.0, f64::max))
                .collect();
            conf.sort_by(|a, b| b.total_cmp(a));
            let cfg = SfdaConfig {
                tau: 0.5 * (conf[1] + conf[2]),
                ..SfdaConfig::default()
            };
            let loss = sfda_loss_and_grad(&student, &teacher, &inputs, &cfg).unwrap();
            assert!(
                loss.kept > 0 && loss.kept < 4,
                "fixture should keep some samples"
            );
            let num = finite_diff_grad(
                |v: &[f64]| {
                    let mut p = student.clone();
                    p.assign_flat(v).unwrap();
                    sfda_loss_and_grad(&p, &teacher, &inputs, &cfg)
                        .unwrap()
                        .total
                },
                &student.flatten(),
                1e-6,
            )
            .unwrap();
            for (a, n) in loss.grad.flatten().iter().zip(&num) {
                assert!(
                    (a - n).abs() / (a.abs() + 1e-8) < 1e-4 || (a - n).abs() < 1e-9,
                    "{a} vs {n}"
                );
            }
        }
    }

    #[test]
    fn strong_distillation_pulls_the_student_to_the_teacher() {
        let mut rng = Rng::new(4);
        let mut student = ModelParams::random(&arch(), &mut rng);
        let teacher = ModelParams::random(&arch(), &mut rng);
        let inputs = gaussian_matrix(16, 8, &mut rng);
        let cfg = SfdaConfig {
            lambda_kd: 50.0,
            tau: 1.0,
            ..SfdaConfig::default()
        };
        let mut kd = Vec::new();
        for _ in 0..50 {
            let loss = sfda_loss_and_grad(&student, &teacher, &inputs, &cfg).unwrap();
            kd.push(loss.kd);
            crate::model::sgd_step(&mut student, &loss.grad, 0.002);
        }
        let rises = kd.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(kd[49] < 0.5 * kd[0], "{} -> {}", kd[0], kd[49]);
        assert!(rises <= 2, "{rises} increases");
    }

    fn tiny_task() -> TwoDomainTask {
        let spec = TwoDomainSpec {
            num_clients: 2,
            input_dim: 8,
            num_classes: 3,
            source_samples: 60,
            samples_per_client: 30,
            ..TwoDomainSpec::default()
        };
        make_two_domain(&spec, 1).unwrap()
    }

    fn tiny_config() -> SfdaConfig {
        SfdaConfig {
            rounds: 4,
            omega: 1,
            t_start: 2,
            pretrain_epochs: 2,
            ..SfdaConfig::default()
        }
    }

    #[test]
    fn experiment_never_holds_source_rows_and_is_worker_independent() {
        let a = run_sfda_experiment(&arch(), tiny_task(), &tiny_config(), 3, 1).unwrap();
        let b = run_sfda_experiment(&arch(), tiny_task(), &tiny_config(), 3, 2).unwrap();
        assert!(a.audit.isolated());
        assert_eq!(a.audit.rows_checked, 60);
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 8);
        assert!(a.records.iter().all(|r| r.pseudo_kept_frac.is_some()));
    }

    #[test]
    fn audit_detects_a_leaked_source_row() {
        let mut task = tiny_task();
        let fingerprints = source_fingerprints(&task.source);
        let leaked = task.source.inputs.row(0).to_vec();
        task.clients[0]
            .unlabeled
            .row_mut(0)
            .copy_from_slice(&leaked);
        let phase = SfdaPhase {
            global: ModelParams::zeros(&arch()),
            teachers: vec![],
            clients: task.clients,
            config: tiny_config(),
            seed: 0,
        };
        assert_eq!(phase.audit(&fingerprints).source_rows_found, 1);
    }
}
