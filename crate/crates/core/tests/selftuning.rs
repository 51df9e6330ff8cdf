use qavat::network::{build_lenet5, infer, ForwardOptions, Mode, Params};
use qavat::selftuning::{gtm_measure, ltm_measure, MvmGeom, StConfig, StState, StType};
use qavat::training::quant_state;
use qavat::variability::{sample_chip, ChipDomain, VariabilityConfig, VarianceModel};
use qavat::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn std_dev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn gtm_errors(n_gtm: usize, chips: u64) -> Vec<f64> {
    let var = VariabilityConfig::new(VarianceModel::LayerFixed, 0.5, 0.2).unwrap();
    let cfg = StConfig { st_type: StType::GtmOnly, n_gtm, ..StConfig::default() };
    (0..chips)
        .map(|c| {
            let chip = sample_chip(&var, 21, ChipDomain::Deployment, c);
            gtm_measure(&chip, &cfg) - chip.eps_b
        })
        .collect()
}

#[test]
fn gtm_is_unbiased_with_shrinking_spread() {
    let mut stds = Vec::new();
    for n in [100, 1000, 10_000] {
        let e = gtm_errors(n, 1000);
        let (m, s) = std_dev(&e);
        let expect = 0.5 / (n as f64).sqrt();
        assert!(m.abs() < 3.0 * s / (e.len() as f64).sqrt(), "n={n}: bias {m}");
        assert!((s / expect - 1.0).abs() < 0.1, "n={n}: std {s} vs {expect}");
        stds.push(s);
    }
    for w in stds.windows(2) {
        let ratio = w[0] / w[1];
        assert!((ratio / 10f64.sqrt() - 1.0).abs() < 0.15, "{ratio}");
    }
}

#[test]
fn gtm_exact_without_within_chip_variation() {
    for eps_b in [-0.4, 0.3, 0.5] {
        let mut chip = sample_chip(
            &VariabilityConfig::new(VarianceModel::WeightProportional, 0.0, 0.1).unwrap(),
            0,
            ChipDomain::Deployment,
            0,
        );
        chip.eps_b = eps_b;
        let e = gtm_measure(&chip, &StConfig::default());
        assert!((e - eps_b).abs() < 1e-12, "{e} vs {eps_b}");
    }
}

#[test]
fn ltm_noise_shrinks_with_columns() {
    let var = VariabilityConfig::within_chip(VarianceModel::LayerFixed, 0.5);
    let d_in = 64;
    let x = Tensor::from_fn([1, d_in], |i| 0.2 + 0.01 * i as f64);
    let sum_x: f64 = x.data().iter().sum();
    let spread = |m: usize| {
        let cfg = StConfig { st_type: StType::GtmPlusLtm, ltm_columns: m, ..StConfig::default() };
        let errs: Vec<f64> = (0..2000)
            .map(|c| {
                let chip = sample_chip(&var, 3, ChipDomain::Deployment, c);
                ltm_measure(&x, MvmGeom::Linear { d_in }, &chip, &cfg, 0, 1.0).unwrap()[0] - sum_x
            })
            .collect();
        std_dev(&errs).1
    };
    let (s1, s16) = (spread(1), spread(16));
    assert!((s1 / s16 / 4.0 - 1.0).abs() < 0.1, "{s1} {s16}");
}

#[test]
fn corrections_recover_clean_quantized_lenet_outputs() {
    let net = build_lenet5();
    let params = Params::<f64>::init(&net, 4).unwrap();
    // Continuous inputs: lattice-valued ones put pre-activations exactly on a 2-bit rounding edge.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::from_fn([4, 1, 28, 28], |_| rng.sample::<f64, _>(StandardNormal));
    let quant = quant_state(&net, &params, std::slice::from_ref(&x)).unwrap();
    let clean = infer(&net, &params, &quant, &x, &ForwardOptions::new(Mode::QuantOnly)).unwrap();
    for model in [VarianceModel::LayerFixed, VarianceModel::WeightProportional] {
        for eps_b in [-0.4, 0.3, 0.5] {
            let var = VariabilityConfig::new(model, 0.0, 0.1).unwrap();
            let mut chip = sample_chip(&var, 0, ChipDomain::Deployment, 1);
            chip.eps_b = eps_b;
            let st = StState::deploy(&chip, &StConfig::with_type(StType::matching(model))).unwrap();
            let opts = ForwardOptions::new(Mode::QuantPerturbed(&chip)).with_st(Some(&st));
            let y = infer(&net, &params, &quant, &x, &opts).unwrap();
            let scale = clean.max_abs();
            for (a, b) in y.data().iter().zip(clean.data()) {
                assert!((a - b).abs() <= 1e-9 * scale, "{model:?} eps_b={eps_b}: {a} vs {b}");
            }
            let raw = infer(&net, &params, &quant, &x, &ForwardOptions::new(Mode::QuantPerturbed(&chip))).unwrap();
            assert_ne!(raw, clean);
        }
    }
}
