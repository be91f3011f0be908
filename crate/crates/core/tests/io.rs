use mtfqi::analysis::{evaluate, EvaluateOptions, EvaluationReport};
use mtfqi::data::{bundle_from_jsonl, bundle_to_jsonl, collect_bundle, load_bundle, save_bundle, BehaviorKind};
use mtfqi::ensemble::{generate_ensemble, EnsembleFile, EnsembleSpec};
use mtfqi::features::build_encoder_class;
use mtfqi::fqi::{run_mtfqi, LearnedModel, SolverConfig};
use mtfqi::harness::{ExperimentConfig, SweepAxis};
use mtfqi::Error;

fn fixture() -> (EnsembleFile, mtfqi::data::DatasetBundle) {
    let ens = generate_ensemble(EnsembleSpec::new(4, 2, 3, 2, 3).with_w_max(100.0), 5).unwrap();
    let class = build_encoder_class(ens.features(), 3, 1.0, 6).unwrap();
    let bundle = collect_bundle(&ens, BehaviorKind::Uniform, 20, 7).unwrap();
    (
        EnsembleFile {
            ensemble: ens,
            encoder_class: Some(class),
        },
        bundle,
    )
}

fn bump_version(text: &str) -> String {
    text.replacen("\"schema_version\":1", "\"schema_version\":2", 1)
        .replacen("\"schema_version\": 1", "\"schema_version\": 2", 1)
}

#[test]
fn future_schema_versions_are_refused() {
    let (file, bundle) = fixture();
    let text = bump_version(&file.to_json().unwrap());
    assert!(matches!(EnsembleFile::from_json(&text), Err(Error::SchemaVersion { found: 2, expected: 1 })));

    let jsonl = bump_version(&bundle_to_jsonl(&bundle).unwrap());
    assert!(matches!(bundle_from_jsonl(&jsonl), Err(Error::SchemaVersion { found: 2, .. })));

    let class = file.encoder_class.clone().unwrap();
    let (model, _) = run_mtfqi(&bundle, &class, &SolverConfig::default()).unwrap();
    let text = bump_version(&model.to_json().unwrap());
    assert!(matches!(LearnedModel::from_json(&text), Err(Error::SchemaVersion { .. })));

    let report = evaluate(&model, &file.ensemble, &bundle, &class, &EvaluateOptions::default()).unwrap();
    let text = bump_version(&report.to_json().unwrap());
    assert!(matches!(EvaluationReport::from_json(&text), Err(Error::SchemaVersion { .. })));

    let cfg = ExperimentConfig::new(SweepAxis::T, vec![1, 2], 5);
    let text = bump_version(&cfg.to_json().unwrap());
    assert!(matches!(ExperimentConfig::from_json(&text), Err(Error::SchemaVersion { .. })));
}

#[test]
fn documents_of_the_wrong_kind_are_refused() {
    let (file, bundle) = fixture();
    let (model, _) = run_mtfqi(&bundle, file.encoder_class.as_ref().unwrap(), &SolverConfig::default()).unwrap();
    let err = EnsembleFile::from_json(&model.to_json().unwrap()).unwrap_err();
    assert!(matches!(err, Error::Schema(ref m) if m.contains("model")), "{err}");
}

#[test]
fn truncated_datasets_report_an_offset() {
    let (_, bundle) = fixture();
    let jsonl = bundle_to_jsonl(&bundle).unwrap();

    let lines: Vec<&str> = jsonl.lines().collect();
    let short = lines[..lines.len() - 3].join("\n") + "\n";
    assert!(matches!(bundle_from_jsonl(&short), Err(Error::Parse { .. })));

    let cut = &jsonl[..jsonl.len() - 10];
    match bundle_from_jsonl(cut) {
        Err(Error::Parse { offset, .. }) => {
            let last_line_start = cut.rfind('\n').unwrap() as u64 + 1;
            assert!(offset >= last_line_start && offset <= cut.len() as u64, "{offset}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }

    assert!(matches!(bundle_from_jsonl(""), Err(Error::Parse { offset: 0, .. })));
}

#[test]
fn save_and_load_through_the_filesystem() {
    let (file, bundle) = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ens_path = dir.path().join("ensemble.json");
    let data_path = dir.path().join("data.jsonl");
    file.save(&ens_path).unwrap();
    save_bundle(&bundle, &data_path).unwrap();
    assert_eq!(EnsembleFile::load(&ens_path).unwrap(), file);
    assert_eq!(load_bundle(&data_path).unwrap(), bundle);
    assert_eq!(bundle.ensemble_hash, file.ensemble.content_hash());

    let missing = dir.path().join("nope.json");
    match EnsembleFile::load(&missing) {
        Err(Error::Io { path, .. }) => assert_eq!(path, missing),
        other => panic!("expected an io error, got {other:?}"),
    }
}

#[test]
fn model_round_trip_preserves_q_values() {
    let (file, bundle) = fixture();
    let (model, _) = run_mtfqi(&bundle, file.encoder_class.as_ref().unwrap(), &SolverConfig::default()).unwrap();
    let back = LearnedModel::from_json(&model.to_json().unwrap()).unwrap();
    assert_eq!(back, model);
    for t in 0..2 {
        assert_eq!(back.q_table(t), model.q_table(t));
    }
}
