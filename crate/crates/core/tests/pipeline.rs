//! End-to-end runs on synthetic and CSV data.

mod common;

use std::fs;

use common::{cicids_config, reference_config, write_cicids_fixture};
use fedsa_core::data::{self, normalize, split, synth_generate, SynthSpec};
use fedsa_core::experiment::{
    prepare_data, run_driver, run_experiment, Precision, SplitMode, CONFIG_ECHO_FILE, RECORDS_FILE, SUMMARY_FILE,
};
use fedsa_core::federation::{local_update, train_steps};
use fedsa_core::metrics::{rounds_to_accuracy, Phase, RoundRecord};
use fedsa_core::nn::{evaluate, init_params, NetworkSpec, ParameterVector};
use fedsa_core::Dataset;

fn accuracy(params: &ParameterVector<f64>, data: &Dataset) -> f64 {
    let eval = evaluate(params, &data.samples).unwrap();
    let hits = eval.predictions.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    hits as f64 / data.len() as f64
}

fn final_loss(records: &[RoundRecord]) -> f64 {
    records.last().unwrap().loss
}

#[test]
fn centralized_mlp_separates_synthetic_clusters_in_200_steps() {
    let spec = SynthSpec {
        n_samples: 4000,
        n_features: 10,
        class_ratio: 0.5,
        separation: 6.0,
        seed: 21,
    };
    let ds: Dataset = synth_generate(&spec).unwrap();
    let (train, validation) = split(&ds, 0.7, 22).unwrap();
    let (train, others, _) = normalize(&train, &[validation]).unwrap();
    let init = init_params(&NetworkSpec::new(10, 2), 23).unwrap();
    let trained = train_steps(&init, &train.samples, 200, 0.2, 32, 24).unwrap();
    let acc = accuracy(&trained.params, &others[0]);
    assert!(acc >= 0.99, "validation accuracy {acc}");
}

#[test]
fn fedavg_reaches_95_percent_within_ten_rounds() {
    let parsed = reference_config("fedavg", 1, "");
    let data = prepare_data::<f64>(&parsed.config).unwrap();
    let run = run_driver(&parsed.config, &data, &mut |_| Ok(())).unwrap();
    assert_eq!(run.records.len(), 30);
    let reached = rounds_to_accuracy(&run.records, 0.95);
    assert_eq!(reached, Some(8), "pinned fixture");
    assert!(run.records.iter().all(|r| r.phase == Phase::Fedavg));
}

#[test]
fn fedsa_needs_fewer_rounds_than_fedavg_on_reference_data() {
    let sa = reference_config("fedsa", 1, "");
    let avg = reference_config("fedavg", 1, "");
    let data = prepare_data::<f64>(&sa.config).unwrap();
    let sa = run_driver(&sa.config, &data, &mut |_| Ok(())).unwrap();
    let avg = run_driver(&avg.config, &data, &mut |_| Ok(())).unwrap();
    let sa_rounds = rounds_to_accuracy(&sa.records, 0.95).unwrap();
    let avg_rounds = rounds_to_accuracy(&avg.records, 0.95).unwrap();
    assert_eq!((sa_rounds, avg_rounds), (1, 8), "pinned fixture");
    assert_eq!(sa.records.len(), 31);
}

#[test]
fn centralized_training_beats_fedavg_on_loss() {
    let cen = reference_config("centralized", 1, "");
    let avg = reference_config("fedavg", 1, "");
    let data = prepare_data::<f64>(&cen.config).unwrap();
    let cen = run_driver(&cen.config, &data, &mut |_| Ok(())).unwrap();
    let avg = run_driver(&avg.config, &data, &mut |_| Ok(())).unwrap();
    assert_eq!(cen.records.len(), avg.records.len());
    assert!(cen.records.iter().all(|r| r.phase == Phase::Centralized));
    let (c, a) = (final_loss(&cen.records), final_loss(&avg.records));
    assert!(c <= a, "centralized {c} vs fedavg {a}");
}

#[test]
fn centralized_with_zero_rate_is_flat() {
    let parsed = reference_config("centralized", 2, "");
    let mut cfg = parsed.config.clone();
    cfg.fedavg.as_mut().unwrap().eta0 = 0.0;
    cfg.fedavg.as_mut().unwrap().rounds = 6;
    let data = prepare_data::<f64>(&cfg).unwrap();
    let run = run_driver(&cfg, &data, &mut |_| Ok(())).unwrap();
    assert_eq!(run.records.len(), 6);
    let first = &run.records[0];
    for r in &run.records {
        assert_eq!((r.loss, r.accuracy, r.f1), (first.loss, first.accuracy, first.f1));
    }
}

#[test]
fn more_local_steps_lower_the_shard_loss() {
    let parsed = reference_config("fedavg", 4, "");
    let data = prepare_data::<f64>(&parsed.config).unwrap();
    let shard = &data.shards[3];
    let init = init_params(&NetworkSpec::new(10, 2), 5).unwrap();
    let loss_after = |tau| {
        let update = local_update(&init, shard, tau, 0.05, 32, 6).unwrap();
        evaluate(&update.params, &shard.samples.samples).unwrap().loss
    };
    let (one, twenty) = (loss_after(1), loss_after(20));
    assert!(twenty <= one, "tau=20 loss {twenty} vs tau=1 loss {one}");
}

#[test]
fn cicids_format_csv_runs_through_every_driver() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("flows.csv");
    let clean = write_cicids_fixture(&csv, 1500, 3);
    for driver in ["fedsa", "fedavg", "centralized"] {
        let mut parsed = cicids_config(&csv, driver, 20, 5, "");
        parsed.config.output = dir.path().join(driver);
        let run = run_experiment(&parsed).unwrap();
        let report = run.summary.data.load_report.clone().unwrap();
        assert_eq!(report.rows_read, 1500);
        assert_eq!(report.rows_read - report.rows_dropped, clean);
        assert_eq!(run.summary.data.n_features, 12);
        assert!(report.columns_dropped.iter().any(|c| c == "Source IP"));
        assert!(report.columns_dropped.iter().any(|c| c == "Flow ID"));
        let last = run.records.last().unwrap();
        assert!(last.accuracy > 0.9, "{driver}: accuracy {}", last.accuracy);
    }
}

#[test]
fn balanced_split_equalizes_classes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = reference_config("fedavg", 1, "").config;
    cfg.balanced_split = true;
    if let fedsa_core::experiment::DataSource::Synthetic { class_ratio, .. } = &mut cfg.data {
        *class_ratio = 0.2;
    }
    cfg.output = dir.path().join("balanced");
    let data = prepare_data::<f64>(&cfg).unwrap();
    let summary = data.summary();
    assert_eq!(summary.split_mode, SplitMode::Balanced);
    assert_eq!(summary.train_rows + summary.validation_rows, 1600);
    assert!((summary.train_attack_fraction - 0.5).abs() < 1e-9);
    assert!((summary.validation_attack_fraction - 0.5).abs() < 1e-9);
}

#[test]
fn run_directory_layout_and_no_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let mut parsed = reference_config("fedsa", 2, "");
    parsed.config.fedsa.as_mut().unwrap().epochs = 2;
    parsed.config.output = dir.path().join("run");
    parsed.config.dump_normalized = true;
    let first = run_experiment(&parsed).unwrap();
    let second = run_experiment(&parsed).unwrap();
    assert_eq!(first.dir, dir.path().join("run"));
    assert_ne!(first.dir, second.dir);
    for run in [&first, &second] {
        for f in [CONFIG_ECHO_FILE, RECORDS_FILE, SUMMARY_FILE] {
            assert!(run.dir.join(f).is_file(), "{} missing", f);
        }
    }

    let text = fs::read_to_string(first.dir.join(RECORDS_FILE)).unwrap();
    let parsed_records: Vec<RoundRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed_records.len(), 5);
    assert!(parsed_records.windows(2).all(|w| w[1].round_index == w[0].round_index + 1));

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(first.dir.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary["total_aggregation_rounds"], 5);
    assert!(summary["best_round"]["accuracy"].is_number());
    assert!(summary["final_metrics"]["f1"].is_number());
    assert!(summary["wall_time_secs"].as_f64().unwrap() >= 0.0);
    assert_eq!(summary["fedsa"]["cooling_events"], summary["fedsa"]["worse_acceptances"]);

    let echo = fs::read_to_string(first.dir.join(CONFIG_ECHO_FILE)).unwrap();
    assert!(echo.contains("# default applied: fedsa.alpha = 0.05"));
    assert!(echo.contains("epochs = 2"));

    let normalized = data::load_csv::<f64>(
        &first.dir.join("train_normalized.csv"),
        &data::CsvSchema::default(),
    )
    .unwrap()
    .0;
    assert_eq!(normalized.len(), first.summary.data.train_rows);
    assert!(normalized.samples.features().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn single_precision_tracks_double_precision() {
    let parsed = reference_config("fedavg", 1, "");
    let mut cfg32 = parsed.config.clone();
    cfg32.precision = Precision::F32;
    let d64 = prepare_data::<f64>(&parsed.config).unwrap();
    let d32 = prepare_data::<f32>(&cfg32).unwrap();
    let r64 = run_driver(&parsed.config, &d64, &mut |_| Ok(())).unwrap();
    let r32 = run_driver(&cfg32, &d32, &mut |_| Ok(())).unwrap();
    let (a, b) = (r64.records.last().unwrap(), r32.records.last().unwrap());
    assert!((a.accuracy - b.accuracy).abs() < 0.02, "{} vs {}", a.accuracy, b.accuracy);
    assert!((a.loss - b.loss).abs() < 0.02, "{} vs {}", a.loss, b.loss);
}

#[test]
fn unreadable_csv_cells_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "a, b, Label\n1,2,BENIGN\n3,oops,DDoS\n").unwrap();
    let mut parsed = cicids_config(&csv, "fedavg", 1, 1, "");
    parsed.config.output = dir.path().join("out");
    let err = run_experiment(&parsed).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    assert!(err.to_string().contains('b'), "{err}");
}
