use dreamcatcher_core::config::{load_config, ConfigError};
use dreamcatcher_core::corpus::{load_activations, load_generations, load_gold, load_questions, validate_corpus};
use dreamcatcher_core::synth::{write_fixture, SynthConfig};

#[test]
fn synth_fixture_loads_through_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        questions: 40,
        seed: 3,
        ..SynthConfig::default()
    };
    write_fixture(dir.path(), &cfg).unwrap();
    let pc = load_config(&dir.path().join("config.json")).unwrap();
    assert_eq!(pc.seed, 3);
    assert_eq!(pc.paths.output_dir, dir.path().join("out"));

    let questions = load_questions(&pc.paths.questions).unwrap();
    let generations = load_generations(&pc.paths.generations, pc.k).unwrap();
    let gold = load_gold(pc.paths.gold.as_ref().unwrap()).unwrap();
    let store = load_activations(
        pc.paths.activations_manifest.as_ref().unwrap(),
        pc.paths.activations_bin.as_ref().unwrap(),
    )
    .unwrap();
    assert_eq!(questions.len(), 40);
    assert_eq!(store.question_ids().len(), 40);
    let report = validate_corpus(&questions, &generations, Some(&store), Some(&gold), pc.k);
    assert!(report.is_empty(), "{report:?}");
}

#[test]
fn bad_config_file_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(&path, r#"{"rm": {"lambda": "x"}}"#).unwrap();
    match load_config(&path) {
        Err(ConfigError::Parse { key, .. }) => assert_eq!(key, "rm.lambda"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        load_config(&dir.path().join("missing.json")),
        Err(ConfigError::Io { .. })
    ));
}
