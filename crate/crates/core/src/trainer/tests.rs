use super::*;
use crate::estimator::{mse_masked_loss, Tensor};
use crate::synthdata::{generate_dataset, load_dataset, GenerateConfig, DEFAULT_IMAGE_DIMS};

fn tiny_dataset(seed: u64) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenerateConfig {
        n_labeled: 10,
        n_unlabeled: 12,
        n_test: 6,
        seed,
        image_dims: DEFAULT_IMAGE_DIMS,
    };
    generate_dataset(&cfg, dir.path()).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    (dir, data)
}

fn quick(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 2,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn zero_head(p: &mut EstimatorParams<f32>) {
    let head = p.layers.last_mut().unwrap();
    head.weight.iter_mut().for_each(|w| *w = 0.0);
    head.bias.iter_mut().for_each(|b| *b = 0.0);
}

#[test]
fn config_validation() {
    TrainConfig::default().validate().unwrap();
    for bad in [
        TrainConfig {
            beta: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            tau: 1.5,
            ..TrainConfig::default()
        },
        TrainConfig {
            hard_aug: AugRange {
                max_rotation: 60.0,
                scale: (1.2, 0.8),
            },
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    assert_eq!("dual".parse::<Method>().unwrap(), Method::Dual);
    assert!("mean-teacher".parse::<Method>().is_err());
}

#[test]
fn supervised_run_has_no_unsupervised_losses() {
    let (_d, data) = tiny_dataset(1);
    let run = run_training(&quick(Method::Supervised), &data).unwrap();
    let r = &run.report;
    assert_eq!(r.rows.len(), 2);
    for row in &r.rows {
        assert_eq!((row.l_unsup1, row.l_unsup2, row.l_unsup3), (0.0, 0.0, 0.0));
        assert!(row.pck_a.is_nan() && row.pck_b.is_nan());
        assert!(row.pck_c.is_finite());
        assert!(row.l_sup.is_finite() && row.l_sup > 0.0);
    }
    assert_eq!(r.reported_net, NetId::C);
    assert!(run.net(NetId::A).is_none());
    let csv = r.metrics_csv();
    assert!(csv.starts_with("epoch,lr,l_sup,l_unsup1,l_unsup2,l_unsup3,pck_a,pck_b,pck_c\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(!csv.contains('\r'));
}

#[test]
fn logged_total_matches_aggregation() {
    let (_d, data) = tiny_dataset(2);
    let cfg = TrainConfig {
        beta: 0.7,
        ..quick(Method::Sspcm)
    };
    let run = run_training(&cfg, &data).unwrap();
    // 12 unlabeled samples in batches of 4.
    assert_eq!(run.report.batches.len(), 2 * 3);
    for b in &run.report.batches {
        let expect = b.l_sup + 0.7 * (b.l_unsup1 + b.l_unsup2 + b.l_unsup3);
        assert!((b.l_final - expect).abs() <= 1e-12);
        assert!(b.l_unsup1 > 0.0 && b.l_unsup2 > 0.0);
    }
    let c = &run.report.counters;
    assert_eq!(c.teacher_mutations, 0);
    assert_eq!(c.step4_calls, 6);
    assert_eq!(c.pcm_calls, 2 * 12);
    assert_eq!(c.cache_promotions, 2);
    assert_eq!(c.frozen_checks, 6 * 6);
}

#[test]
fn runs_are_deterministic() {
    let (_d, data) = tiny_dataset(3);
    let cfg = quick(Method::Sspcm);
    let a = run_training(&cfg, &data).unwrap();
    let b = run_training(&cfg, &data).unwrap();
    assert_eq!(a.report.metrics_csv(), b.report.metrics_csv());
    for id in NetId::ALL {
        assert_eq!(a.net(id), b.net(id));
    }
}

#[test]
fn zero_beta_matches_supervised_net_c() {
    let (_d, data) = tiny_dataset(4);
    let sup = run_training(&quick(Method::Supervised), &data).unwrap();
    let cfg = TrainConfig {
        beta: 0.0,
        ..quick(Method::Sspcm)
    };
    let ss = run_training(&cfg, &data).unwrap();
    assert_eq!(sup.net(NetId::C), ss.net(NetId::C));
    let col = |r: &RunReport| r.rows.iter().map(|x| x.pck_c.to_bits()).collect::<Vec<_>>();
    assert_eq!(col(&sup.report), col(&ss.report));
}

#[test]
fn swapping_roles_swaps_learning_curves() {
    let (_d, data) = tiny_dataset(5);
    for method in [Method::Dual, Method::Sspcm] {
        let cfg = quick(method);
        let plain = run_training(&cfg, &data).unwrap();
        let swapped = run_training_with(
            &cfg,
            &data,
            RunOptions {
                swap_roles: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        for (p, s) in plain.report.rows.iter().zip(&swapped.report.rows) {
            assert_eq!(p.pck_a.to_bits(), s.pck_b.to_bits());
            assert_eq!(p.pck_b.to_bits(), s.pck_a.to_bits());
            assert_eq!(p.l_unsup1.to_bits(), s.l_unsup2.to_bits());
            assert_eq!(p.l_unsup2.to_bits(), s.l_unsup1.to_bits());
            // Net C reads its occlusion keypoints from net A, so its share
            // of the supervised loss is not symmetric.
            if method == Method::Dual {
                assert_eq!(p.l_sup.to_bits(), s.l_sup.to_bits());
            }
        }
        assert_eq!(plain.net(NetId::A), swapped.net(NetId::B));
        assert_eq!(plain.net(NetId::B), swapped.net(NetId::A));
    }
}

#[test]
fn dual_mode_never_touches_net_c_or_pcm() {
    let (_d, data) = tiny_dataset(6);
    let run = run_training(&quick(Method::Dual), &data).unwrap();
    let c = &run.report.counters;
    assert_eq!(c.step4_calls, 0);
    assert_eq!(c.pcm_calls, 0);
    assert_eq!(c.cache_updates, 0);
    assert_eq!(c.cache_promotions, 0);
    assert_eq!(c.net_c_forwards, 0);
    assert_eq!(c.teacher_mutations, 0);
    assert!(c.frozen_checks > 0);
    assert!(run.net(NetId::C).is_none());
    assert_eq!(run.report.reported_net, NetId::A);
    assert!(run.report.rows.iter().all(|r| r.l_unsup3 == 0.0 && r.pck_c.is_nan()));
}

#[test]
fn snapshots_are_written() {
    let (_d, data) = tiny_dataset(7);
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        snapshot_interval: 2,
        ..quick(Method::Dual)
    };
    let run = run_training_with(
        &cfg,
        &data,
        RunOptions {
            snapshot_dir: Some(out.path().to_path_buf()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    for e in [0, 2, 3] {
        assert!(snapshot_path(out.path(), NetId::A, e).exists(), "epoch {e}");
        assert!(snapshot_path(out.path(), NetId::B, e).exists());
        assert!(!snapshot_path(out.path(), NetId::C, e).exists());
    }
    assert!(!snapshot_path(out.path(), NetId::A, 1).exists());
    let last = crate::estimator::snapshot::load_params(&snapshot_path(out.path(), NetId::A, 3)).unwrap();
    assert_eq!(Some(&last), run.net(NetId::A));
}

#[test]
fn silent_teacher_leaves_student_unchanged() {
    let (_d, data) = tiny_dataset(8);
    let mut t = Trainer::new(&quick(Method::Sspcm), &data, false).unwrap();
    zero_head(t.params_mut(NetId::A).unwrap());
    let before = t.params(NetId::B).unwrap().clone();
    let batch: Vec<&Sample> = t.unlabeled()[..4].to_vec();
    let loss = t.train_step_cross(NetId::A, NetId::B, &batch).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(t.params(NetId::B).unwrap(), &before);
}

#[test]
fn identity_views_target_raw_teacher_output() {
    let (_d, data) = tiny_dataset(9);
    let none = AugRange {
        max_rotation: 0.0,
        scale: (1.0, 1.0),
    };
    let cfg = TrainConfig {
        easy_aug: none,
        hard_aug: none,
        ssco: SscoConfig {
            n_patches: 0,
            ..SscoConfig::default()
        },
        mask_steps: MaskSteps::Step4Only,
        ..quick(Method::Sspcm)
    };
    let mut t = Trainer::new(&cfg, &data, false).unwrap();
    let batch: Vec<&Sample> = t.unlabeled()[..3].to_vec();
    let b = t.cross_targets(NetId::A, NetId::B, &batch).unwrap();
    let imgs: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let raw = t.params(NetId::A).unwrap().forward(&Tensor::from_images(&imgs));
    assert_eq!(b.targets, raw);
    assert_eq!(b.inputs, Tensor::from_images(&imgs));
}

#[test]
fn occlusion_does_not_change_targets() {
    let (_d, data) = tiny_dataset(10);
    let with = |n: usize| {
        let cfg = TrainConfig {
            ssco: SscoConfig {
                n_patches: n,
                ..SscoConfig::default()
            },
            tau: 0.0,
            ..quick(Method::Sspcm)
        };
        let mut t = Trainer::new(&cfg, &data, false).unwrap();
        let batch: Vec<&Sample> = t.unlabeled()[..4].to_vec();
        t.cross_targets(NetId::A, NetId::B, &batch).unwrap()
    };
    let (plain, occluded) = (with(0), with(2));
    assert_eq!(plain.targets, occluded.targets);
    assert_eq!(plain.mask, occluded.mask);
    assert_ne!(plain.inputs, occluded.inputs);
}

#[test]
fn identical_teachers_agree_exactly() {
    let (_d, data) = tiny_dataset(11);
    let mut t = Trainer::new(&TrainConfig { tau: 0.0, ..quick(Method::Sspcm) }, &data, false).unwrap();
    let a = t.params(NetId::A).unwrap().clone();
    *t.params_mut(NetId::B).unwrap() = a;
    let batch: Vec<&Sample> = t.unlabeled()[..4].to_vec();
    let out = t.train_step4_pcm(&batch).unwrap();
    for r in &out.pcm {
        for (m, pi) in r.keypoint_mask.iter().zip(&r.pi) {
            if *m {
                assert_eq!(*pi, Some(0.0));
            }
        }
    }
    // The cache is staged, not yet visible.
    assert!(t.cache().is_empty());
}

#[test]
fn unconfident_teachers_freeze_step4() {
    let (_d, data) = tiny_dataset(12);
    let mut t = Trainer::new(&quick(Method::Sspcm), &data, false).unwrap();
    zero_head(t.params_mut(NetId::A).unwrap());
    zero_head(t.params_mut(NetId::B).unwrap());
    let before = t.params(NetId::C).unwrap().clone();
    let batch: Vec<&Sample> = t.unlabeled()[..4].to_vec();
    let out = t.train_step4_pcm(&batch).unwrap();
    assert_eq!(out.loss, 0.0);
    assert!(out.pcm.iter().all(|r| r.keypoint_mask.iter().all(|m| !m)));
    assert_eq!(t.params(NetId::C).unwrap(), &before);
}

#[test]
fn supervised_step_overfits_small_set() {
    let (_d, data) = tiny_dataset(13);
    let cfg = TrainConfig {
        easy_aug: AugRange {
            max_rotation: 0.0,
            scale: (1.0, 1.0),
        },
        lr: LrSchedule {
            base_lr: 3e-3,
            ..LrSchedule::default()
        },
        ..quick(Method::Supervised)
    };
    let mut t = Trainer::new(&cfg, &data, false).unwrap();
    t.lr = 3e-3;
    let batch: Vec<&Sample> = t.train_labeled()[..4].to_vec();
    let first = t.train_step1_supervised(&batch).unwrap();
    let mut last = first;
    for _ in 0..20 {
        last = t.train_step1_supervised(&batch).unwrap();
    }
    assert!(last < 0.7 * first, "{first} -> {last}");
}

#[test]
fn non_finite_loss_reports_context() {
    let (_d, data) = tiny_dataset(14);
    let mut t = Trainer::new(&quick(Method::Supervised), &data, false).unwrap();
    t.params_mut(NetId::C).unwrap().layers[4].bias[0] = f32::NAN;
    let batch: Vec<&Sample> = t.train_labeled()[..2].to_vec();
    match t.train_step1_supervised(&batch) {
        Err(Error::NonFiniteLoss { epoch: 1, batch: 0, step: "step1" }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn step1_loss_is_sum_over_nets() {
    let (_d, data) = tiny_dataset(15);
    let cfg = quick(Method::Sspcm);
    let mut t = Trainer::new(&cfg, &data, false).unwrap();
    let mut probe = Trainer::new(&cfg, &data, false).unwrap();
    let batch: Vec<&Sample> = t.train_labeled()[..1].to_vec();
    zero_head(t.params_mut(NetId::A).unwrap());
    zero_head(probe.params_mut(NetId::A).unwrap());
    let total = t.train_step1_supervised(&batch).unwrap();
    // Rebuild the same targets by hand: the zeroed net's loss is the mean
    // square of the target over visible channels.
    let s = batch[0];
    let e = cfg.easy_aug.sample(&mut probe.step1_rng, probe.image_dims, Frame::Easy);
    let img = crate::geometry::warp_image(&s.image, &e, probe.image_dims, s.image.mean() as f32).unwrap();
    let pts = crate::geometry::warp_points(s.pose.as_ref().unwrap(), &e).image_to_heatmap(HEATMAP_STRIDE);
    let hm = crate::geometry::render_gaussian_heatmaps(&pts, cfg.sigma, probe.hm_dims).unwrap();
    let mask = crate::estimator::KeypointMask::from_rows(vec![pts
        .keypoints
        .iter()
        .map(|k| k.is_valid() && probe.hm_dims.contains(k.x, k.y))
        .collect()]);
    let x = Tensor::from_images(&[&img]);
    let target = Tensor::from_heatmaps(&[&hm]);
    let mut expect = 0.0;
    for id in NetId::ALL {
        let y = probe.params(id).unwrap().forward(&x);
        expect += mse_masked_loss(&y, &target, &mask);
    }
    assert!((total - expect).abs() < 1e-9, "{total} vs {expect}");
}
