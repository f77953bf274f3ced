mod common;

use common::*;
use lpcl::model::*;
use lpcl::objectives::CohortRole;
use lpcl::synth::Subject;
use lpcl::training::*;
use lpcl::Tensor;
use rand::Rng;

/// Zero background; positives carry a bright 3-voxel cube.
fn blob_subject(i: usize, positive: bool, visits: usize) -> Subject {
    let volumes = (0..visits)
        .map(|_| {
            Tensor::from_fn(vec![1, 8, 8, 8], |ix| {
                let (z, y, x) = (ix / 64, ix / 8 % 8, ix % 8);
                if positive && (2..5).contains(&z) && (2..5).contains(&y) && (2..5).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            })
        })
        .collect();
    Subject {
        id: format!("t{i:03}"),
        role: if positive {
            CohortRole::Positive
        } else {
            CohortRole::Control
        },
        volumes,
        labels: vec![positive; visits],
        progression_rate: 0.0,
        onset: 0,
    }
}

fn noisy_subject(r: &mut impl Rng, i: usize, role: CohortRole, visits: usize) -> Subject {
    Subject {
        id: format!("n{i:03}"),
        role,
        volumes: toy_volumes(r, visits, 8),
        labels: vec![role.label(); visits],
        progression_rate: 0.0,
        onset: 0,
    }
}

fn toy_cfg(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        pretrain_batch: 4,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_toy_reaches_full_training_accuracy() {
    let train: Vec<Subject> = (0..16).map(|i| blob_subject(i, i % 2 == 0, 1)).collect();
    let cfg = TrainConfig {
        pretrain_epochs: 20,
        ..toy_cfg(Variant::Cnn)
    };
    let mut log = TrainLog::in_memory();
    let params = pretrain_encoder(&toy_arch(), &train, &cfg, &mut log).unwrap();
    let first = log.rows.iter().position(|r| r.train_bacc == 1.0);
    assert!(
        first.is_some(),
        "{:?}",
        log.rows.iter().map(|r| r.train_bacc).collect::<Vec<_>>()
    );
    for s in &train {
        let p = predict_sequence(&params, &s.volumes).unwrap()[0];
        assert_eq!(p > 0.5, s.labels[0], "{} {p}", s.id);
    }
}

#[test]
fn pretrain_loss_decreases_over_moving_windows() {
    let mut r = rng(4);
    let train: Vec<Subject> = (0..24)
        .map(|i| {
            let mut s = blob_subject(i, i % 2 == 0, 1);
            s.volumes[0]
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += 0.3 * r.gen_range(-1.0f32..1.0));
            s
        })
        .collect();
    let cfg = TrainConfig {
        pretrain_epochs: 30,
        ..toy_cfg(Variant::Cnn)
    };
    let mut log = TrainLog::in_memory();
    pretrain_encoder(&toy_arch(), &train, &cfg, &mut log).unwrap();
    let totals: Vec<f64> = log.rows.iter().map(|r| r.values.total).collect();
    let windows: Vec<f64> = totals
        .windows(10)
        .map(|w| w.iter().sum::<f64>() / 10.0)
        .collect();
    assert!(windows.last() < windows.first(), "{windows:?}");
    let rises = windows.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises * 4 <= windows.len(), "{windows:?}");
}

#[test]
fn identical_seeds_give_identical_weights() {
    let mut r = rng(6);
    let train: Vec<Subject> = (0..8)
        .map(|i| {
            noisy_subject(
                &mut r,
                i,
                [CohortRole::Control, CohortRole::Positive][i % 2],
                1 + i % 3,
            )
        })
        .collect();
    let val: Vec<Subject> = (8..12)
        .map(|i| {
            noisy_subject(
                &mut r,
                i,
                [CohortRole::Control, CohortRole::Positive][i % 2],
                2,
            )
        })
        .collect();
    let run = || {
        let cfg = TrainConfig {
            pretrain_epochs: 2,
            joint_epochs: 3,
            ..toy_cfg(Variant::CnnRnnLp)
        };
        let pre = pretrain_encoder(&toy_arch(), &train, &cfg, &mut TrainLog::in_memory()).unwrap();
        let out = joint_train(
            &toy_arch(),
            &pre,
            &train,
            &val,
            &cfg,
            &mut TrainLog::in_memory(),
        )
        .unwrap();
        (pre, out.params, out.input_digest)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn joint_init_copies_conv_blocks_only() {
    let mut r = rng(2);
    let train: Vec<Subject> = (0..6)
        .map(|i| {
            noisy_subject(
                &mut r,
                i,
                [CohortRole::Control, CohortRole::Positive][i % 2],
                2,
            )
        })
        .collect();
    let cfg = TrainConfig {
        pretrain_epochs: 1,
        ..toy_cfg(Variant::CnnRnnLp)
    };
    let pre = pretrain_encoder(&toy_arch(), &train, &cfg, &mut TrainLog::in_memory()).unwrap();
    let init = joint_init(&toy_arch(), &pre, &cfg).unwrap();
    let mut conv = 0;
    for (i, e) in init.layout.entries.iter().enumerate() {
        match pre.layout.entries.iter().position(|p| p.name == e.name) {
            Some(j) if e.group.is_conv_block() => {
                assert_eq!(init.tensors[i], pre.tensors[j], "{}", e.name);
                conv += 1;
            }
            Some(j) if e.shape == pre.layout.entries[j].shape && e.group.is_penalized() => {
                assert_ne!(init.tensors[i], pre.tensors[j], "{}", e.name)
            }
            _ => {}
        }
    }
    assert_eq!(conv, 4 * 3 * 2);
}

#[test]
fn frozen_conv_blocks_stay_bitwise_fixed() {
    let mut r = rng(3);
    let roles = [CohortRole::Control, CohortRole::Positive];
    let train: Vec<Subject> = (0..8)
        .map(|i| noisy_subject(&mut r, i, roles[i % 2], 2))
        .collect();
    let val: Vec<Subject> = (8..12)
        .map(|i| noisy_subject(&mut r, i, roles[i % 2], 2))
        .collect();
    let cfg = TrainConfig {
        pretrain_epochs: 1,
        joint_epochs: 3,
        patience: 5,
        freeze_conv: true,
        ..toy_cfg(Variant::CnnRnnLp)
    };
    let pre = pretrain_encoder(&toy_arch(), &train, &cfg, &mut TrainLog::in_memory()).unwrap();
    let out = joint_train(
        &toy_arch(),
        &pre,
        &train,
        &val,
        &cfg,
        &mut TrainLog::in_memory(),
    )
    .unwrap();
    let start = joint_init(&toy_arch(), &pre, &cfg).unwrap();
    for (i, e) in out.params.layout.entries.iter().enumerate() {
        if e.group.is_conv_block() {
            assert_eq!(out.params.tensors[i], start.tensors[i], "{}", e.name);
        }
    }
    assert_eq!(out.params.norms, start.norms);
}

#[test]
fn all_control_runs_ignore_lambda_cons() {
    let mut r = rng(8);
    let roles = [CohortRole::Control, CohortRole::Positive];
    let train: Vec<Subject> = (0..8)
        .map(|i| noisy_subject(&mut r, i, CohortRole::Control, 1 + i % 3))
        .collect();
    let val: Vec<Subject> = (8..12)
        .map(|i| noisy_subject(&mut r, i, roles[i % 2], 2))
        .collect();
    let pre = ModelParams::init(Variant::Cnn, &toy_arch(), 1).unwrap();
    let run = |consistency: bool, lambda_cons: f32| {
        let cfg = TrainConfig {
            consistency,
            lambda_cons,
            joint_epochs: 4,
            patience: 10,
            ..toy_cfg(Variant::CnnRnnLp)
        };
        let mut log = TrainLog::in_memory();
        let out = joint_train(&toy_arch(), &pre, &train, &val, &cfg, &mut log).unwrap();
        (
            out.params,
            log.rows
                .iter()
                .map(|r| (r.values.total, r.val_bacc))
                .collect::<Vec<_>>(),
        )
    };
    let (a, b) = (run(false, 0.0), run(true, 2.0));
    assert_eq!(a, b);
}

#[test]
fn batch_gradient_matches_finite_differences_downstream_of_trunk() {
    // conv parameters sit behind ReLU and max-pool kinks; every tensor after
    // the trunk only sees smooth operations
    let mut r = rng(12);
    let subjects = [
        (CohortRole::Positive, 3),
        (CohortRole::Control, 2),
        (CohortRole::ConsistencyOnly, 2),
    ];
    let data: Vec<Subject> = subjects
        .iter()
        .enumerate()
        .map(|(i, &(role, m))| noisy_subject(&mut r, i, role, m))
        .collect();
    let inputs: Vec<Inputs> = data.iter().map(|s| Inputs::Volumes(&s.volumes)).collect();
    let roles: Vec<CohortRole> = data.iter().map(|s| s.role).collect();
    let weights = lpcl::objectives::LossWeights {
        lambda_cons: 2.0,
        lambda_reg: 0.02,
        w_pos: 1.5,
    };
    let params = ModelParams::init(Variant::CnnRnnLp, &toy_arch(), 5).unwrap();
    let loss = |p: &ModelParams| -> f64 {
        batch_step(p, &inputs, &roles, &weights, true, &mut rng(77))
            .unwrap()
            .values
            .total
    };
    let res = batch_step(&params, &inputs, &roles, &weights, true, &mut rng(77)).unwrap();
    let eps = 1e-2f32;
    let mut checked = 0;
    for (i, e) in params.layout.entries.iter().enumerate() {
        if e.group.is_conv_block() {
            continue;
        }
        let mut worst = 0.0f64;
        let scale = res.grads[i].max_abs().max(1e-3) as f64;
        for k in 0..params.tensors[i].len() {
            let mut q = params.clone();
            q.tensors[i].data_mut()[k] += eps;
            let up = loss(&q);
            q.tensors[i].data_mut()[k] -= 2.0 * eps;
            let fd = (up - loss(&q)) / (2.0 * eps as f64);
            worst = worst.max((fd - res.grads[i].data()[k] as f64).abs() / scale);
        }
        assert!(worst <= 5e-3, "{} {worst}", e.name);
        checked += 1;
    }
    assert!(checked >= 8, "{checked}");
}

#[test]
fn validation_subjects_never_enter_the_gradient_digest() {
    let mut r = rng(9);
    let roles = [CohortRole::Control, CohortRole::Positive];
    let train: Vec<Subject> = (0..8)
        .map(|i| noisy_subject(&mut r, i, roles[i % 2], 2))
        .collect();
    let val_a: Vec<Subject> = (8..12)
        .map(|i| noisy_subject(&mut r, i, roles[i % 2], 2))
        .collect();
    let val_b: Vec<Subject> = (12..18)
        .map(|i| noisy_subject(&mut r, i, roles[i % 2], 3))
        .collect();
    let pre = ModelParams::init(Variant::Cnn, &toy_arch(), 1).unwrap();
    let cfg = TrainConfig {
        joint_epochs: 2,
        patience: 5,
        ..toy_cfg(Variant::CnnRnnLp)
    };
    let digest = |t: &[Subject], v: &[Subject]| {
        joint_train(&toy_arch(), &pre, t, v, &cfg, &mut TrainLog::in_memory())
            .unwrap()
            .input_digest
    };
    assert_eq!(digest(&train, &val_a), digest(&train, &val_b));
    assert_ne!(digest(&train, &val_a), digest(&train[1..], &val_a));
}
