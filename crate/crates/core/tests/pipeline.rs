use mimoloc::config::ExperimentConfig;
use mimoloc::fingerprint::MetricScheme;
use mimoloc::pipeline::{self, Manifest};
use num_complex::Complex64;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 9;
    cfg.channel.test_points = 15;
    cfg.fingerprint.grid = 6;
    cfg.fingerprint.schemes = vec![MetricScheme::AOA];
    cfg.fingerprint.search.trials = 3;
    cfg.fingerprint.search.folds = 3;
    cfg
}

fn manifest(dir: &std::path::Path) -> Manifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn small_run_reports_every_method() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = pipeline::run_pipeline(&small(), tmp.path()).unwrap();
    let methods: Vec<_> = bundle.results.iter().map(|r| r.label()).collect();
    assert_eq!(
        methods,
        ["fingerprint_aoa", "triangulation-aoa_aoa", "trilateration-tof_tof", "trilateration-amp_amp"]
    );
    for r in &bundle.results {
        assert_eq!(r.predictions.len(), r.sample_ids.len());
        assert!(r.report.mae.is_finite() && r.report.mae > 0.0);
    }
    assert!(bundle.calibration.is_some());
    let m = manifest(tmp.path());
    assert_eq!(m, bundle.manifest);
    assert!(m.failure.is_none());
    for f in &m.files {
        let bytes = std::fs::read(tmp.path().join(&f.path)).unwrap();
        assert_eq!(bytes.len(), f.bytes, "{}", f.path);
        assert_eq!(f.sha256.len(), 64);
    }
    assert!(m.files.iter().any(|f| f.path == pipeline::model_file(MetricScheme::AOA)));
}

#[test]
fn geometric_baselines_can_be_disabled() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.geo.enabled = false;
    cfg.calibration.enabled = false;
    let bundle = pipeline::run_pipeline(&cfg, tmp.path()).unwrap();
    assert_eq!(bundle.results.len(), 1);
    assert!(bundle.calibration.is_none());
    assert!(!tmp.path().join("calibration.json").exists());
}

#[test]
fn failure_is_recorded_in_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    let mut ds = pipeline::generate(&cfg).unwrap();
    ds.test.samples[4].csi.values[[0, 0]] = Complex64::new(f64::NAN, 0.0);
    let err = pipeline::run_pipeline_with(&cfg, tmp.path(), Some(ds)).unwrap_err();
    let m = manifest(tmp.path());
    let failure = m.failure.expect("failure recorded");
    assert_eq!(failure.stage, "extract", "{err}");
    assert_eq!(failure.sample, Some(4));
    assert!(failure.message.contains("non-finite"));
    assert!(m.stages_completed.contains(&"calibrate".to_string()));
    assert!(!m.stages_completed.contains(&"train".to_string()), "{failure:?} {:?}", m.stages_completed);
}

#[test]
fn saved_datasets_reload_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    let ds = pipeline::generate(&cfg).unwrap();
    let mut out = pipeline::OutputDir::create(tmp.path()).unwrap();
    pipeline::save_datasets(&mut out, &ds).unwrap();
    let back = pipeline::load_datasets(tmp.path()).unwrap();
    assert_eq!(back.train, ds.train);
    assert_eq!(back.test, ds.test);
    assert_eq!(back.reference, ds.reference);
    assert_eq!(back.noise_std, ds.noise_std);
}
