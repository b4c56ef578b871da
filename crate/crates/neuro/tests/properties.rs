use chauffeur_neuro::model::{forward, init_params};
use chauffeur_neuro::{HeadMode, ModelConfig, TokenInput};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn beta_parameters_exceed_one(
        values in prop::collection::vec(-200.0f64..200.0, 7..=56),
        seed in 0u64..4,
    ) {
        let cfg = ModelConfig { init_seed: seed, init_std: 0.5, ..ModelConfig::default() };
        let params = init_params(&cfg).unwrap();
        let n = values.len() / 7;
        let mask = vec![true; n];
        let out = forward(&params, &cfg, &[TokenInput { rows: &values[..n * 7], mask: &mask }], HeadMode::Rl).unwrap();
        let b = out[0].beta.as_ref().unwrap();
        for v in b.alpha.iter().chain(&b.beta) {
            prop_assert!(*v > 1.0 && v.is_finite());
        }
        prop_assert!(out[0].value.unwrap().is_finite());
    }

    #[test]
    fn padding_content_is_ignored(
        values in prop::collection::vec(-50.0f64..50.0, 21),
        junk in prop::collection::vec(-1e3f64..1e3, 14),
    ) {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg).unwrap();
        let mask = [true, true, true, false, false];
        let mut a = values.clone();
        a.extend([0.0; 14]);
        let mut b = values;
        b.extend(junk);
        let la = forward(&params, &cfg, &[TokenInput { rows: &a, mask: &mask }], HeadMode::Rl).unwrap();
        let lb = forward(&params, &cfg, &[TokenInput { rows: &b, mask: &mask }], HeadMode::Rl).unwrap();
        prop_assert_eq!(la, lb);
    }
}
