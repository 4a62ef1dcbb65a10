use metafap::checkpoint::Checkpoint;
use metafap::data::{generate_dataset, preset_split, read_csv, write_csv, SplitPools};
use metafap::metatrain::{meta_evaluate, meta_train, MetaConfig};
use metafap::OracleConfig;

fn small_cfg(split: &str) -> MetaConfig {
    MetaConfig {
        epochs: 3,
        tasks_per_epoch: 3,
        n_support: 64,
        n_query: 32,
        val_tasks: 2,
        test_tasks: 3,
        split: preset_split(split).unwrap(),
        ..MetaConfig::default()
    }
}

#[test]
fn every_split_trains_and_evaluates() {
    let data = generate_dataset(10_000, &OracleConfig::default(), 11).unwrap();
    for split in ["primary", "easy", "hard"] {
        let cfg = small_cfg(split);
        let pools = SplitPools::build(&data, &cfg.split).unwrap();
        let (ck, rep) = meta_train(&cfg, &pools).unwrap();
        assert_eq!(rep.split, split);
        assert!(rep.test.mse.is_finite() && rep.test.mse > 0.0);
        assert!((-1.0..=1.0).contains(&rep.test.cc));
        let again = meta_evaluate(&ck, &pools.test, &cfg).unwrap();
        assert_eq!(again.metrics, rep.test);
    }
}

#[test]
fn checkpoint_and_csv_survive_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate_dataset(6_000, &OracleConfig::default(), 12).unwrap();
    let csv = tmp.path().join("d.csv");
    write_csv(&data, &csv).unwrap();
    let reloaded = read_csv(&csv).unwrap();

    let cfg = small_cfg("primary");
    let (ck, rep) = meta_train(&cfg, &SplitPools::build(&data, &cfg.split).unwrap()).unwrap();
    let path = tmp.path().join("ck.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load_expecting(&path, &cfg.architecture).unwrap();
    assert_eq!(back, ck);

    // the CSV keeps 17 significant digits, so the reloaded data scores the same
    let pools = SplitPools::build(&reloaded, &cfg.split).unwrap();
    let m = meta_evaluate(&back, &pools.test, &cfg).unwrap().metrics;
    assert!((m.mse - rep.test.mse).abs() <= 1e-9 * rep.test.mse);
}

#[test]
fn too_little_data_names_the_region() {
    let data = generate_dataset(300, &OracleConfig::default(), 13).unwrap();
    let cfg = MetaConfig {
        epochs: 1,
        ..MetaConfig::default()
    };
    let pools = SplitPools::build(&data, &cfg.split).unwrap();
    let err = meta_train(&cfg, &pools).unwrap_err().to_string();
    assert!(err.contains("region"), "{err}");
}
