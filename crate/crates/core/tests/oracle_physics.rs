use metafap::data::random_design;
use metafap::oracle::{evaluate_circuit, response_unchecked, unit_cell_response, OracleConfig, Polarization};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_designs_are_passive_and_closed() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for pol in [Polarization::Te, Polarization::Tm] {
        let cfg = OracleConfig {
            polarization: pol,
            ..OracleConfig::default()
        };
        for _ in 0..2_000 {
            let d = random_design(&mut rng);
            let sol = evaluate_circuit(&d, &cfg).unwrap();
            assert!((sol.matrix.det() - 1.0).norm() < 1e-9, "{d:?}");
            let r = unit_cell_response(&d, &cfg).unwrap();
            assert!(r.transmittance + r.reflectance <= 1.0 + 1e-9);
            assert_eq!(r.sum(), 1.0);
            assert!(r.to_array().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn lossless_overrides_absorb_nothing() {
    let cfg = OracleConfig {
        bottom_r_ohm: 0.0,
        substrate_tand: 0.0,
        ..OracleConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..500 {
        let mut d = random_design(&mut rng);
        d.rv_ohm = 0.0;
        assert!(response_unchecked(&d, &cfg).unwrap().absorbance <= 1e-9);
        assert!(evaluate_circuit(&d, &cfg).unwrap().raw_absorbance.abs() <= 1e-9);
    }
}

#[test]
fn out_of_domain_designs_are_rejected() {
    let mut d = random_design(&mut ChaCha8Rng::seed_from_u64(1));
    d.freq_ghz = 13.0;
    assert!(unit_cell_response(&d, &OracleConfig::default()).is_err());
    d.freq_ghz = 20.0;
    d.array_n = 7;
    assert!(unit_cell_response(&d, &OracleConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normal_incidence_is_polarization_blind(seed in any::<u64>()) {
        let mut d = random_design(&mut ChaCha8Rng::seed_from_u64(seed));
        d.theta_deg = 0.0;
        let te = unit_cell_response(&d, &OracleConfig::default()).unwrap();
        let tm = unit_cell_response(&d, &OracleConfig { polarization: Polarization::Tm, ..OracleConfig::default() }).unwrap();
        for (a, b) in te.to_array().iter().zip(tm.to_array()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
