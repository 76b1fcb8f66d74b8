use advforge::analysis::fmt_sig6;
use advforge::attacks::{
    craft_adversaries, ensemble_attack, extract_adversarial_set, iteration_count, AdversarialSet,
    AttackConfig,
};
use advforge::data::{self, encode_idx, parse_idx, MixConfig};
use advforge::models::build_model;
use advforge::nn::{self, cross_entropy_rows, softmax};
use advforge::{Architecture, LabeledDataset, Model, ModelSpec, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pixels(n: usize, len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0u8..=255, n * len).prop_map(|v| v.into_iter().map(f32::from).collect())
}

fn probe_model(seed: u64, arch: Architecture, width: usize) -> Model {
    let shape = [1, 8, 8];
    let mut spec = match arch {
        Architecture::Minivgg => ModelSpec::minivgg(shape, 3),
        Architecture::Miniresnet => ModelSpec::miniresnet(shape, 3),
        Architecture::Linear => ModelSpec::linear(shape, 3),
    };
    spec.width = width;
    spec.depth = 1;
    let mut m = build_model(&spec, seed).unwrap();
    m.set_input_normalization(vec![127.5], vec![64.0]).unwrap();
    m
}

fn arch() -> impl Strategy<Value = Architecture> {
    prop_oneof![
        Just(Architecture::Minivgg),
        Just(Architecture::Miniresnet),
        Just(Architecture::Linear)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ce_is_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 12), shift in -50.0f64..50.0, y in 0usize..4) {
        let a = Tensor::new(&[3, 4], logits.clone()).unwrap();
        let b = a.map(|v| v + shift);
        let la = cross_entropy_rows(&a, &[y; 3]).unwrap();
        let lb = cross_entropy_rows(&b, &[y; 3]).unwrap();
        for (u, v) in la.iter().zip(&lb) {
            prop_assert!((u - v).abs() < 1e-9 * (1.0 + u.abs()));
            prop_assert!(*u >= 0.0);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(logits in prop::collection::vec(-80.0f32..80.0, 20)) {
        let s = softmax(&Tensor::new(&[4, 5], logits).unwrap()).unwrap();
        for r in s.data().chunks(5) {
            prop_assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn kl_is_nonnegative(p in prop::collection::vec(-10.0f64..10.0, 10), q in prop::collection::vec(-10.0f64..10.0, 10)) {
        let mut tape: Tape<f64> = Tape::new();
        let pv = tape.constant(Tensor::new(&[2, 5], p.clone()).unwrap());
        let qv = tape.constant(Tensor::new(&[2, 5], q).unwrap());
        let kl = nn::kl_divergence_logits(&mut tape, pv, qv).unwrap();
        prop_assert!(tape.value(kl).data()[0] >= -1e-12);
        let pv2 = tape.constant(Tensor::new(&[2, 5], p).unwrap());
        let same = nn::kl_divergence_logits(&mut tape, pv, pv2).unwrap();
        prop_assert!(tape.value(same).data()[0].abs() < 1e-12);
    }

    #[test]
    fn mix_is_convex(x in pixels(2, 16), r in pixels(2, 16), alpha in 0.001f64..0.499) {
        let xt = Tensor::new(&[2, 1, 4, 4], x.clone()).unwrap();
        let rt = Tensor::new(&[2, 1, 4, 4], r.clone()).unwrap();
        let m = data::mix_images(&xt, &rt, alpha).unwrap();
        for ((&a, &b), &v) in x.iter().zip(&r).zip(m.data()) {
            prop_assert!(v >= a.min(b) - 1e-3 && v <= a.max(b) + 1e-3);
            prop_assert!((v as f64 - ((1.0 - alpha) * a as f64 + alpha * b as f64)).abs() < 1e-3);
        }
        let batch = data::mix_batch(&xt, &rt, &[alpha, alpha]).unwrap();
        prop_assert_eq!(batch, m);
    }

    #[test]
    fn beta_alpha_in_open_interval(p in 0.5f64..6.0, q in 0.5f64..6.0, seed in any::<u64>()) {
        let cfg = MixConfig::beta(p, q, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let a = data::sample_alpha(&cfg, &mut rng).unwrap();
            prop_assert!(a > 0.0 && a < 0.5);
        }
    }

    #[test]
    fn idx_round_trip(px in pixels(6, 12), labels in prop::collection::vec(0usize..5, 6)) {
        let mut labels = labels;
        labels[0] = 4;
        let ds = LabeledDataset::new(Tensor::new(&[6, 1, 3, 4], px).unwrap(), labels, 5).unwrap();
        let (i, l) = encode_idx(&ds).unwrap();
        prop_assert_eq!(parse_idx(&i, &l).unwrap(), ds);
    }

    #[test]
    fn holdout_split_partitions(per_class in 2usize..12, classes in 2usize..5, frac in 0.1f64..0.9, seed in any::<u64>()) {
        let n = per_class * classes;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let px: Vec<f32> = (0..n).map(|i| i as f32 % 256.0).collect();
        let ds = LabeledDataset::new(Tensor::new(&[n, 1, 1, 1], px).unwrap(), labels, classes).unwrap();
        match data::holdout_split(&ds, frac, seed) {
            Ok((tr, va)) => {
                prop_assert_eq!(tr.len() + va.len(), n);
                let mut all: Vec<f32> = tr.images().data().iter().chain(va.images().data()).copied().collect();
                all.sort_by(f32::total_cmp);
                let mut want = ds.images().data().to_vec();
                want.sort_by(f32::total_cmp);
                prop_assert_eq!(all, want);
                let expect = (frac * per_class as f64).floor() as usize;
                prop_assert!(tr.class_counts().iter().all(|&c| c == expect));
            }
            Err(_) => prop_assert!((frac * per_class as f64).floor() as usize == 0 || (frac * per_class as f64).floor() as usize == per_class),
        }
    }

    #[test]
    fn sig6_round_trips(v in prop::num::f64::NORMAL) {
        let s = fmt_sig6(v);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - v).abs() <= 5e-6 * v.abs());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn attack_respects_budget(
        px in pixels(4, 64),
        eps in prop_oneof![Just(4.0f32), Just(8.0), Just(16.0)],
        members in 1usize..3,
        seed in 0u64..1000,
    ) {
        let x = Tensor::new(&[4, 1, 8, 8], px).unwrap();
        let y = vec![0, 1, 2, 0];
        let models: Vec<Model> = (0..members).map(|k| probe_model(seed + k as u64, Architecture::Minivgg, 4)).collect();
        let refs: Vec<&Model> = models.iter().collect();
        let cfg = AttackConfig::with_schedule(eps).unwrap();
        prop_assert_eq!(cfg.iterations, iteration_count(eps as f64));
        if let Ok(adv) = ensemble_attack(&refs, &x, &y, &cfg) {
            for (&a, &o) in adv.data().iter().zip(x.data()) {
                prop_assert!((a - o).abs() <= eps);
                prop_assert!((0.0..=255.0).contains(&a));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), arch in arch(), width in 2usize..6) {
        let m = probe_model(seed, arch, width);
        let back = Model::from_bytes(&m.to_bytes()).unwrap();
        prop_assert!(back.bit_eq(&m));
        prop_assert_eq!(back.to_bytes(), m.to_bytes());
    }

    #[test]
    fn adversarial_set_round_trip(px in pixels(6, 64), seed in 0u64..1000) {
        let x = Tensor::new(&[6, 1, 8, 8], px).unwrap();
        let y = vec![0, 1, 2, 0, 1, 2];
        let m = probe_model(seed, Architecture::Linear, 4);
        let cfg = AttackConfig::with_schedule(8.0).unwrap();
        let cand = craft_adversaries(&[&m], &x, &y, &cfg, 1);
        prop_assume!(cand.is_ok());
        let set = extract_adversarial_set(&[&m], &["m".to_string()], &x, &cand.unwrap(), &y, &cfg).unwrap();
        let (json, bytes) = set.encode("p.advf").unwrap();
        let back = AdversarialSet::decode(&json, &bytes).unwrap();
        prop_assert!(back.bit_eq(&set));
    }
}
