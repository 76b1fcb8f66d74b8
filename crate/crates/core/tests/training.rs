use advforge::attacks::{ensemble_attack_lenient, linf_distances, AttackConfig};
use advforge::models::{accuracy, build_model};
use advforge::nn::{self, Mode};
use advforge::training::{
    self, loss_alpha_kl, loss_fixed_alpha, loss_plain, pgd_loss, vat_loss, vat_perturbation, Batch,
    DefenseVariant, KlGradient, TrainConfig,
};
use advforge::{LabeledDataset, Model, ModelSpec, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two classes: a bright bar in the left or the right half of an 8x8 image.
fn toy(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        for _r in 0..8 {
            for c in 0..8 {
                let on = (c < 4) == (y == 0);
                let base = if on { 170.0 } else { 60.0 };
                px.push((base + rng.random_range(-40.0..40.0f32)).round());
            }
        }
        labels.push(y);
    }
    LabeledDataset::new(Tensor::new(&[n, 1, 8, 8], px).unwrap(), labels, 2).unwrap()
}

fn small_vgg(seed: u64) -> Model {
    let mut spec = ModelSpec::minivgg([1, 8, 8], 2);
    spec.width = 4;
    spec.depth = 2;
    let mut m = build_model(&spec, seed).unwrap();
    m.set_input_normalization(vec![115.0], vec![60.0]).unwrap();
    m
}

fn loss_of(
    model: &Model,
    f: impl FnOnce(&Model, &mut Tape, &[advforge::Var]) -> training::Objective,
) -> f64 {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let obj = f(model, &mut tape, &params);
    tape.value(obj.loss).data()[0] as f64
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 20,
        ..TrainConfig::default()
    }
}

#[test]
fn plain_training_fits_separable_toy() {
    let train = toy(200, 1);
    let val = toy(40, 2);
    let mut model = small_vgg(0);
    let report = training::train(&mut model, &train, &val, &quick_cfg(20)).unwrap();
    assert_eq!(report.epochs.len(), 20);
    let acc = accuracy(&model, &train).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
    assert_eq!(model.meta.epochs, 20);
}

#[test]
fn training_is_deterministic() {
    let train = toy(60, 3);
    let val = toy(20, 4);
    let cfg = TrainConfig {
        defense: DefenseVariant::flagship(),
        ..quick_cfg(2)
    };
    let mut a = small_vgg(5);
    let mut b = small_vgg(5);
    training::train(&mut a, &train, &val, &cfg).unwrap();
    training::train(&mut b, &train, &val, &cfg).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn report_epoch_count_matches_config() {
    let train = toy(40, 3);
    let val = toy(10, 4);
    for epochs in [1, 3] {
        let mut m = small_vgg(1);
        let r = training::train(&mut m, &train, &val, &quick_cfg(epochs)).unwrap();
        assert_eq!(r.epochs.len(), epochs);
        assert!(r.best_epoch >= 1 && r.best_epoch <= epochs);
        let json = r.to_json().unwrap();
        assert_eq!(training::TrainReport::from_json(&json).unwrap(), r);
    }
}

#[test]
fn invalid_configs_rejected() {
    let bad = [
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            defense: DefenseVariant::FixedAlpha { alpha: 0.5 },
            ..TrainConfig::default()
        },
        TrainConfig {
            defense: DefenseVariant::FixedAlphaKl {
                alpha: 0.2,
                lambda: -1.0,
            },
            ..TrainConfig::default()
        },
        TrainConfig {
            defense: DefenseVariant::Vat {
                epsilon: 0.0,
                iterations: 1,
                lambda: 1.0,
            },
            ..TrainConfig::default()
        },
        TrainConfig {
            defense: DefenseVariant::Pgd {
                epsilon: 8.0,
                step_size: 2.0,
                iterations: 0,
            },
            ..TrainConfig::default()
        },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    for d in [
        DefenseVariant::flagship(),
        DefenseVariant::vat_default(),
        DefenseVariant::pgd_default(3),
        DefenseVariant::pgd_default(7),
        DefenseVariant::FixedAlpha { alpha: 0.4 },
    ] {
        d.validate().unwrap();
    }
}

fn batch_data(seed: u64) -> (Tensor, Vec<usize>, Tensor) {
    let ds = toy(16, seed);
    let partners = toy(16, seed + 100);
    (
        ds.images().clone(),
        ds.labels().to_vec(),
        partners.images().clone(),
    )
}

#[test]
fn alpha_to_zero_matches_plain() {
    let model = small_vgg(2);
    let (x, y, xr) = batch_data(7);
    let batch = Batch {
        images: &x,
        labels: &y,
        partners: Some(&xr),
    };
    let plain = loss_of(&model, |m, t, p| loss_plain(m, t, p, &batch).unwrap());
    let mixed = loss_of(&model, |m, t, p| {
        loss_fixed_alpha(m, t, p, &batch, 1e-7).unwrap()
    });
    assert!((plain - mixed).abs() < 1e-4, "{plain} vs {mixed}");
    let kl = loss_of(&model, |m, t, p| {
        loss_alpha_kl(m, t, p, &batch, &[1e-7; 16], 10.0, KlGradient::Mixed).unwrap()
    });
    assert!((plain - kl).abs() < 1e-4, "{plain} vs {kl}");
}

#[test]
fn self_mix_matches_plain() {
    let model = small_vgg(2);
    let (x, y, _) = batch_data(8);
    let batch = Batch {
        images: &x,
        labels: &y,
        partners: Some(&x),
    };
    let plain = loss_of(&model, |m, t, p| loss_plain(m, t, p, &batch).unwrap());
    let mixed = loss_of(&model, |m, t, p| {
        loss_fixed_alpha(m, t, p, &batch, 0.4).unwrap()
    });
    assert!((plain - mixed).abs() < 1e-4, "{plain} vs {mixed}");
}

#[test]
fn zero_weight_terms_give_plain_loss() {
    let model = small_vgg(3);
    let (x, y, xr) = batch_data(9);
    let batch = Batch {
        images: &x,
        labels: &y,
        partners: Some(&xr),
    };
    let plain = loss_of(&model, |m, t, p| loss_plain(m, t, p, &batch).unwrap());
    let kl = loss_of(&model, |m, t, p| {
        loss_alpha_kl(m, t, p, &batch, &[0.3; 16], 0.0, KlGradient::Mixed).unwrap()
    });
    assert_eq!(plain, kl);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vat = loss_of(&model, |m, t, p| {
        vat_loss(m, t, p, &batch, 15.0, 1, 0.0, &mut rng).unwrap()
    });
    assert_eq!(plain, vat);
    let pgd = loss_of(&model, |m, t, p| {
        pgd_loss(m, t, p, &batch, 0.0, 2.0, 7, false, &mut rng).unwrap()
    });
    assert_eq!(plain, pgd);
}

#[test]
fn alpha_kl_two_forwards_one_backward() {
    let model = small_vgg(4);
    let (x, y, xr) = batch_data(10);
    let batch = Batch {
        images: &x,
        labels: &y,
        partners: Some(&xr),
    };
    for g in [KlGradient::Mixed, KlGradient::Clean] {
        let before = model.forward_passes();
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let obj = loss_alpha_kl(&model, &mut tape, &params, &batch, &[0.25; 16], 10.0, g).unwrap();
        tape.backward(obj.loss).unwrap();
        assert_eq!(model.forward_passes() - before, 2);
        assert_eq!(tape.backward_passes(), 1);
    }
}

#[test]
fn defense_losses_nonnegative_and_finite() {
    let model = small_vgg(6);
    let (x, y, xr) = batch_data(11);
    let batch = Batch {
        images: &x,
        labels: &y,
        partners: Some(&xr),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let losses = [
        loss_of(&model, |m, t, p| loss_plain(m, t, p, &batch).unwrap()),
        loss_of(&model, |m, t, p| {
            loss_fixed_alpha(m, t, p, &batch, 0.4).unwrap()
        }),
        loss_of(&model, |m, t, p| {
            loss_alpha_kl(m, t, p, &batch, &[0.1; 16], 10.0, KlGradient::Mixed).unwrap()
        }),
        loss_of(&model, |m, t, p| {
            vat_loss(m, t, p, &batch, 15.0, 3, 1.0, &mut rng).unwrap()
        }),
        loss_of(&model, |m, t, p| {
            pgd_loss(m, t, p, &batch, 8.0, 2.0, 3, true, &mut rng).unwrap()
        }),
    ];
    for l in losses {
        assert!(l.is_finite() && l >= 0.0, "{l}");
    }
}

fn kl_rows(p: &Tensor, q: &Tensor) -> Vec<f64> {
    let (sp, sq) = (nn::softmax(p).unwrap(), nn::softmax(q).unwrap());
    let c = p.shape()[1];
    sp.data()
        .chunks(c)
        .zip(sq.data().chunks(c))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&pa, &qb)| {
                    let (pa, qb) = (pa as f64, (qb as f64).max(1e-30));
                    if pa > 0.0 {
                        pa * (pa / qb).ln()
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

#[test]
fn vat_direction_beats_random_directions() {
    let train = toy(200, 12);
    let val = toy(100, 13);
    let mut model = small_vgg(7);
    training::train(&mut model, &train, &val, &quick_cfg(4)).unwrap();
    let x = val.images();
    let eps = 15.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r_adv = vat_perturbation(&model, x, eps, 3, Mode::Eval, &mut rng).unwrap();
    let p = model.logits(x).unwrap();
    let add = |r: &Tensor| {
        Tensor::new(
            x.shape(),
            x.data().iter().zip(r.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap()
    };
    let adv_kl = kl_rows(&p, &model.logits(&add(&r_adv)).unwrap());
    let row = 64;
    let mut rand_kl = vec![0.0f64; x.shape()[0]];
    for _ in 0..32 {
        let mut d: Vec<f32> = (0..x.len())
            .map(|_| rng.random_range(-1.0..1.0f32))
            .collect();
        for r in d.chunks_mut(row) {
            let n = r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v = (eps * *v as f64 / n) as f32);
        }
        let kl = kl_rows(
            &p,
            &model
                .logits(&add(&Tensor::new(x.shape(), d).unwrap()))
                .unwrap(),
        );
        for (acc, k) in rand_kl.iter_mut().zip(kl) {
            *acc += k / 32.0;
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&adv_kl) >= mean(&rand_kl),
        "{} < {}",
        mean(&adv_kl),
        mean(&rand_kl)
    );
    let norms: Vec<f64> = r_adv
        .data()
        .chunks(row)
        .map(|r| r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    assert!(norms.iter().all(|n| (n - eps).abs() < 1e-3 * eps));
}

#[test]
fn pgd_adversaries_stay_in_budget() {
    let train = toy(100, 14);
    let val = toy(20, 15);
    let mut model = small_vgg(8);
    training::train(&mut model, &train, &val, &quick_cfg(2)).unwrap();
    let x = val.images();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let start_data = x
        .data()
        .iter()
        .map(|&v| (v + rng.random_range(-8.0..=8.0f32)).clamp(0.0, 255.0))
        .collect();
    let start = Tensor::new(x.shape(), start_data).unwrap();
    for iters in [3, 7] {
        let cfg = AttackConfig::new(8.0, 2.0, iters, (0.0, 255.0)).unwrap();
        for s in [x, &start] {
            let adv = ensemble_attack_lenient(&[&model], s, x, val.labels(), &cfg).unwrap();
            assert!(linf_distances(&adv, x).unwrap().iter().all(|&d| d <= 8.0));
            assert!(adv.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
        }
    }
}

#[test]
fn pgd_and_vat_training_run() {
    let train = toy(40, 16);
    let val = toy(10, 17);
    for d in [
        DefenseVariant::pgd_default(3),
        DefenseVariant::vat_default(),
    ] {
        let mut m = small_vgg(9);
        let r = training::train(
            &mut m,
            &train,
            &val,
            &TrainConfig {
                defense: d,
                pgd_random_start: true,
                ..quick_cfg(1)
            },
        )
        .unwrap();
        assert_eq!(r.defense, d);
        assert_eq!(m.meta.defense, d.name());
    }
}

#[test]
fn model_ends_in_best_val_state() {
    let train = toy(60, 18);
    let val = toy(20, 19);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("best.advf");
    let mut m = small_vgg(10);
    training::train(
        &mut m,
        &train,
        &val,
        &TrainConfig {
            checkpoint: Some(ckpt.clone()),
            ..quick_cfg(3)
        },
    )
    .unwrap();
    assert!(Model::load(&ckpt).unwrap().bit_eq(&m));
}

#[test]
fn divergence_is_reported() {
    let train = toy(40, 20);
    let val = toy(10, 21);
    let mut m = small_vgg(11);
    let err = training::train(
        &mut m,
        &train,
        &val,
        &TrainConfig {
            learning_rate: 1e30,
            schedule: training::Schedule::Constant,
            ..quick_cfg(5)
        },
    )
    .unwrap_err();
    assert!(matches!(err, advforge::Error::Divergence { .. }), "{err}");
}
