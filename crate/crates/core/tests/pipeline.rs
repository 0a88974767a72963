use netclus::datagen::{generate, SynthSpec};
use netclus::eval::{cluster_purity, macro_prf, scored_pairs, truth_map};
use netclus::ingest::{DatasetManifest, Split};
use netclus::pipeline::{all_fallback, infer, InferConfig, OracleConfig, TeacherOracle};
use netclus::student::{train_cfe, TrainConfig, TrainingData};

fn spec() -> SynthSpec {
    SynthSpec {
        num_classes: 4,
        flows_per_class: 150,
        test_flows_per_class: 100,
        feature_dim: 16,
        embedding_dim: 8,
        noise: 0.02,
        modes_per_class: 8,
        mode_spread: 0.5,
        seed: 5,
        ..SynthSpec::default()
    }
}

#[test]
fn generated_files_drive_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    generate(&spec(), dir.path()).unwrap();
    let (manifest, base) = DatasetManifest::load(dir.path()).unwrap();
    let train = manifest.load_split(&base, Split::Train).unwrap();
    let test = manifest.load_split(&base, Split::Test).unwrap();

    let config = TrainConfig {
        hidden_dims: [64, 64, 64],
        seed: 2,
        ..TrainConfig::default()
    };
    let model = config.init_model(16, 8, 4).unwrap();
    let (model, _) = train_cfe(model, &TrainingData::labeled(&train).unwrap(), &config).unwrap();

    let oracle = TeacherOracle::from_config(&OracleConfig::Recorded { teacher: None }, |p| {
        assert!(p.is_none());
        Ok(test.teacher.clone().unwrap())
    })
    .unwrap();
    let infer_config = InferConfig::for_classes(4);
    let anchors = train.anchors(infer_config.anchors_per_class);
    let outcome = infer(&model, &test.flows, &anchors, &oracle, &infer_config).unwrap();
    let s = &outcome.summary;
    assert_eq!(s.fast_path + s.fallback + s.novel_candidate + s.errored, test.len());
    assert_eq!(s.errored, 0);
    assert!(s.fast_path_fraction >= 0.8, "{s:?}");

    let truth = truth_map(&test.flows);
    let (p, t, _) = scored_pairs(&outcome.decisions, &truth);
    let report = macro_prf(&p, &t, 4).unwrap();
    assert!(report.macro_f1 > 0.99, "{}", report.macro_f1);

    let (answers, _) = all_fallback(&test.flows, &oracle, 128);
    assert!(answers.iter().all(|a| a.is_ok()));

    // Purity over inference flows and anchors together.
    let labels: Vec<Option<usize>> = test.flows.iter().chain(anchors.iter().copied()).map(|f| f.label).collect();
    let prepared = netclus::pipeline::prepare(&model, &test.flows, &anchors, &infer_config).unwrap();
    let purity = cluster_purity(&prepared.clustering.clusters, &labels).unwrap();
    assert!(purity.weighted >= 0.95, "{}", purity.weighted);
}
