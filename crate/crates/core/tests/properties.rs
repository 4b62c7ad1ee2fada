use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rct::attacks::{fgsm, pgd, AttackSpec};
use rct::data::{load_csv, save_csv, Dataset};
use rct::harness::stats::{sign_test, spearman};
use rct::harness::PipelineConfig;
use rct::ndgrad::{Tape, Tensor};
use rct::nets::{MlpSpec, Network};
use rct::objectives::{js_div, kl_div};

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("all zero", |v| {
        let s: f64 = v.iter().sum();
        (s > 0.0).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..8).prop_flat_map(|k| (simplex(k), simplex(k)))
}

fn divergences(p: &[f64], q: &[f64]) -> (f64, f64, f64) {
    let tape = Tape::new();
    let pv = tape.constant(Tensor::from_rows(&[p]).unwrap());
    let qv = tape.constant(Tensor::from_rows(&[q]).unwrap());
    (
        kl_div(pv, qv).unwrap().item().unwrap(),
        js_div(pv, qv).unwrap().item().unwrap(),
        js_div(qv, pv).unwrap().item().unwrap(),
    )
}

proptest! {
    #[test]
    fn divergence_ranges((p, q) in pair()) {
        let (kl, js, js_rev) = divergences(&p, &q);
        prop_assert!(kl >= 0.0);
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&js));
        prop_assert!((js - js_rev).abs() <= 1e-12);
    }

    #[test]
    fn divergence_of_a_distribution_with_itself_is_zero(p in (2usize..8).prop_flat_map(simplex)) {
        let (kl, js, _) = divergences(&p, &p);
        prop_assert_eq!(kl, 0.0);
        prop_assert_eq!(js, 0.0);
    }

    #[test]
    fn attacks_stay_feasible(
        seed in any::<u64>(),
        x in prop::collection::vec(0.0f64..=1.0, 6),
        eps in 0.0f64..0.5,
        steps in 1usize..6,
        random_start in any::<bool>(),
    ) {
        let net = Network::init(&MlpSpec::new(vec![3, 5, 3], seed)).unwrap();
        let x = Tensor::new(vec![2, 3], x).unwrap();
        let y = [0, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = AttackSpec::pgd(eps.max(1e-9), eps.max(1e-9) / 2.0, steps).with_random_start(random_start);
        for adv in [pgd(&net, &x, &y, &spec, &mut rng).unwrap(), fgsm(&net, &x, &y, &AttackSpec::fgsm(eps)).unwrap()] {
            prop_assert!(adv.max_abs_diff(&x) <= eps.max(1e-9) + 1e-12);
            prop_assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn overridden_config_round_trips(l1 in 0.0f64..100.0, eps in 0.0f64..0.5, seed in any::<u64>()) {
        let mut cfg = PipelineConfig::default();
        cfg.set("annotation.cotrain.lambda1", &l1.to_string()).unwrap();
        cfg.set("trainer.attack.epsilon", &eps.to_string()).unwrap();
        cfg.seed = seed;
        let back: PipelineConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(&back, &cfg);
        let json: PipelineConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        prop_assert_eq!(json, cfg);
    }

    #[test]
    fn dataset_csv_round_trips(rows in prop::collection::vec((0.0f64..=1.0, prop_oneof![0.0f64..=1.0, 0.0f64..1e-300], 0usize..3), 1..20)) {
        let features = Tensor::new(vec![rows.len(), 2], rows.iter().flat_map(|r| [r.0, r.1]).collect()).unwrap();
        let labels = rows.iter().map(|r| r.2).collect();
        let ds = Dataset::labeled(features, labels, 3, "prop").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        prop_assert_eq!(back.features(), ds.features());
        prop_assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn spearman_is_bounded_and_self_correlated(x in prop::collection::vec(-10.0f64..10.0, 2..30), y in prop::collection::vec(-10.0f64..10.0, 30)) {
        let y = &y[..x.len()];
        if let Some(r) = spearman(&x, y) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
        if let Some(r) = spearman(&x, &x) {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sign_test_is_antisymmetric(a in prop::collection::vec(0.0f64..1.0, 1..40), b in prop::collection::vec(0.0f64..1.0, 40)) {
        let b = &b[..a.len()];
        let fwd = sign_test(&a, b);
        let rev = sign_test(b, &a);
        prop_assert_eq!((fwd.wins, fwd.losses, fwd.ties), (rev.losses, rev.wins, rev.ties));
        prop_assert!((0.0..=1.0).contains(&fwd.p_value));
        if fwd.wins > 0 && rev.wins > 0 {
            prop_assert!(fwd.p_value + rev.p_value >= 1.0 - 1e-12);
        }
    }
}
