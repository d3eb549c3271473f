use prefixquant::calibrate::CalibConfig;
use prefixquant::corpus::windows;
use prefixquant::finetune::TrainConfig;
use prefixquant::harness::{
    error_table, run_pipeline, schema, toy_corpus, Bits, ErrorTable, PipelineConfig, Report, SampleSpec, Scheme, Stage,
    SCHEMAS,
};
use prefixquant::model::{ModelConfig, ToyModel};
use prefixquant::outlier::OutlierThresholds;
use prefixquant::planted::{planted_model, PlantedConfig};
use prefixquant::tensor::Rng;
use serde::Serialize;
use serde_json::Value;

fn planted(seed: u64) -> ToyModel {
    planted_model(ModelConfig::tiny(), PlantedConfig::default(), &mut Rng::seed(seed)).unwrap()
}

fn small_config(scheme: Scheme, bits: Bits, seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(scheme, bits, seed);
    cfg.detect = SampleSpec { n: 4, len: 64 };
    cfg.calib = CalibConfig {
        n_samples: 2,
        seq_len: 64,
        ..CalibConfig::max_min()
    };
    cfg.train = TrainConfig {
        epochs: 1,
        n_samples: 2,
        seq_len: 32,
        batch: 2,
        seed,
        ..TrainConfig::default()
    };
    cfg.eval.sample = SampleSpec { n: 2, len: 64 };
    cfg
}

fn activation_table(m: &ToyModel) -> ErrorTable {
    let seqs = windows(&toy_corpus(), 4, 128);
    error_table(
        m,
        &seqs,
        Scheme::O1,
        Bits::new(16, 4, 16),
        &CalibConfig::max_min(),
        &OutlierThresholds::default(),
        1,
        0,
    )
    .unwrap()
}

fn validate<T: Serialize>(kind: &str, report: &Report<T>) -> Value {
    let value: Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    let schema: Value = serde_json::from_str(schema(kind).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&value).map(|e| format!("{e} at {}", e.instance_path())).collect();
    assert!(errors.is_empty(), "{kind}: {errors:#?}");
    value
}

fn rejects(kind: &str, value: &Value) -> bool {
    let schema: Value = serde_json::from_str(schema(kind).unwrap()).unwrap();
    !jsonschema::validator_for(&schema).unwrap().is_valid(value)
}

#[test]
fn every_report_matches_its_schema() {
    let m = planted(1);
    let cfg = small_config(Scheme::O2, Bits::new(4, 4, 4), 7);
    let out = run_pipeline(&m, &toy_corpus(), &cfg).unwrap();
    let r = &out.report;
    let seed = cfg.seed;

    validate("outlier_report", &Report::new("outlier_report", seed, &cfg.thresholds, &out.outliers));
    validate("prefix_plan", &Report::new("prefix_plan", seed, &cfg, r.prefix.as_ref().unwrap()));
    validate("calibration_report", &Report::new("calibration_report", seed, &cfg.calib, &r.calibration));
    validate("finetune_report", &Report::new("finetune_report", seed, &cfg.train, r.finetune.as_ref().unwrap()));
    validate("eval_report", &Report::new("eval_report", seed, &cfg.eval, &r.eval));
    let mut full = validate("pipeline_report", &Report::new("pipeline_report", seed, &cfg, r));
    validate("error_table", &Report::new("error_table", seed, &cfg, &activation_table(&m)));

    // The schemas are not vacuous.
    full["kind"] = "eval_report".into();
    assert!(rejects("pipeline_report", &full));
    full["kind"] = "pipeline_report".into();
    full["data"]["eval"].as_object_mut().unwrap().remove("ppl_quant");
    assert!(rejects("pipeline_report", &full));
    full["data"]["eval"]["ppl_quant"] = Value::Null;
    assert!(rejects("pipeline_report", &full));
    assert_eq!(SCHEMAS.len(), 7);
}

#[test]
fn planted_outliers_dominate_and_stages_are_ordered() {
    let t = activation_table(&planted(1));
    for s in &t.stages {
        let b = &s.breakdown;
        assert!((b.outlier_share + b.remaining_share - 100.0).abs() < 0.1);
        assert_eq!(s.per_block.len(), 2);
    }
    let mse = |st| t.stage(st).unwrap().breakdown.mse;
    let none = t.stage(Stage::None).unwrap();
    assert!(none.breakdown.outlier_share > 80.0, "{}", none.breakdown.outlier_share);
    // BOS and the first '.' of each window.
    assert_eq!(none.breakdown.outlier_positions, 8);
    assert!(mse(Stage::RotationPrefix) <= 0.1 * mse(Stage::Rotation));
    assert!(mse(Stage::None) > mse(Stage::Rotation), "{} {}", mse(Stage::None), mse(Stage::Rotation));
    assert!(mse(Stage::Rotation) > mse(Stage::RotationPrefix));
    let plan = t.stage(Stage::RotationPrefix).unwrap().plan.as_ref().unwrap();
    assert_eq!(plan.token_ids, vec![b'.' as u32, prefixquant::model::BOS]);

    let csv = t.to_csv();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("stage,mse,outlier_share"));
    assert_eq!(t.per_block_csv().lines().count(), 1 + 3 * 2);
}

#[test]
fn no_outliers_means_no_outlier_share() {
    let m = ToyModel::init_random(ModelConfig::tiny(), &mut Rng::seed(2)).unwrap();
    let t = activation_table(&m);
    let none = &t.stage(Stage::None).unwrap().breakdown;
    assert_eq!(none.outlier_positions, 0);
    assert!(none.outlier_share < 1.0 && none.remaining_share > 99.0);
    assert!(none.mse > 0.0);
}

#[test]
fn pipeline_is_deterministic_and_reports_every_stage() {
    let m = planted(3);
    let cfg = small_config(Scheme::O1, Bits::new(4, 8, 4), 11);
    let a = run_pipeline(&m, &toy_corpus(), &cfg).unwrap();
    let b = run_pipeline(&m, &toy_corpus(), &cfg).unwrap();
    let json = |o: &prefixquant::harness::PipelineOutput| Report::new("pipeline_report", 11, &cfg, &o.report).to_json().unwrap();
    assert_eq!(json(&a), json(&b));
    assert_eq!(a.model, b.model);

    let r = &a.report;
    assert!(r.rotation.r1 && r.rotation.r4);
    let iso = r.prefix.as_ref().unwrap();
    assert_eq!(iso.residual_with_prefix, 0);
    assert!(iso.residual_without_prefix > 0);
    let cache = a.prefix.as_ref().unwrap();
    assert_eq!(cache.fingerprint, a.model.fingerprint());
    assert!(r.eval.prefixed);
    assert!(r.eval.ppl_quant.is_finite() && r.eval.ppl_fp.is_finite());
    assert_eq!(r.finetune.as_ref().unwrap().blocks.len(), 2);

    // A different seed changes the hash and the sampled windows.
    let other = small_config(Scheme::O1, Bits::new(4, 8, 4), 12);
    assert_ne!(cfg.hash(), other.hash());
}

#[test]
fn pipeline_stages_can_be_switched_off() {
    let m = planted(4);
    let mut cfg = small_config(Scheme::WeightOnly, Bits::new(4, 16, 16), 5);
    cfg.rotation = false;
    cfg.prefix = false;
    cfg.train.epochs = 0;
    let out = run_pipeline(&m, &toy_corpus(), &cfg).unwrap();
    assert!(out.prefix.is_none() && out.report.prefix.is_none() && out.report.finetune.is_none());
    assert_eq!(out.model, m);
    assert!(!out.report.eval.prefixed);
    assert_eq!(out.hooks.len(), 2 * 7);

    cfg.eval.sample.n = 0;
    assert!(run_pipeline(&m, &toy_corpus(), &cfg).is_err());
    let short: Vec<u32> = toy_corpus()[..40].to_vec();
    assert!(run_pipeline(&m, &short, &small_config(Scheme::O2, Bits::new(4, 4, 4), 1)).is_err());
}

#[test]
fn scheme_and_bits_parse() {
    assert_eq!("o1".parse::<Scheme>().unwrap(), Scheme::O1);
    assert_eq!("weight_only".parse::<Scheme>().unwrap(), Scheme::WeightOnly);
    assert!("O3".parse::<Scheme>().is_err());
    assert_eq!("4,4,16".parse::<Bits>().unwrap(), Bits::new(4, 4, 16));
    assert!("4;4;4".parse::<Bits>().is_err());
    assert_eq!(serde_json::to_string(&Scheme::WeightOnly).unwrap(), "\"weight_only\"");
}
