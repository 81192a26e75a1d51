use blindsep::cluster::separate;
use blindsep::container::{network_from_container, tv_from_container, ModelContainer};
use blindsep::pipeline::*;
use blindsep::Error;

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.corpus = CorpusSpec {
        n_speakers: 3,
        utterances_per_speaker: 14,
        utterance_seconds: 0.8,
        enrollment_per_speaker: 2,
        test_per_speaker: 2,
        train_mixtures: 6,
        validation_mixtures: 2,
        test_mixtures: 3,
        seed: 5,
        ..Default::default()
    };
    c.net = NetConfig {
        hidden: 4,
        embedding_dim: 3,
        ..Default::default()
    };
    c.trainer.max_epochs = 1;
    c.trainer.batch_size = 4;
    c.trainer.validation_interval_batches = 1;
    c.trainer.curriculum_segment_frames = 0;
    c.speaker.ubm_components = 4;
    c.speaker.ubm_iterations = 3;
    c.speaker.tv_rank = 3;
    c.speaker.tv_iterations = 3;
    c.pipeline.kmeans_restarts = 2;
    c
}

struct Fixture {
    config: ExperimentConfig,
    corpus: Corpus,
    speaker: SpeakerModels,
}

fn fixture() -> Fixture {
    let config = tiny();
    let corpus = generate_corpus(&config.corpus).unwrap();
    let speaker = SpeakerModels::train(&corpus, &config.speaker, 0).unwrap();
    Fixture {
        config,
        corpus,
        speaker,
    }
}

#[test]
fn level_zero_matches_the_standalone_chain() {
    let f = fixture();
    let exp = Experiment::new(&f.config, &f.corpus, f.speaker.clone()).unwrap();
    let l0 = exp.run_level(0, None, None, None).unwrap();
    assert_eq!(l0.params.shape.ivector_width, 0);
    assert!(l0.inputs.is_empty());
    for (&i, est) in l0.test_index.iter().zip(&l0.test_estimates) {
        let m = &f.corpus.mixtures[i];
        let s = separate(
            &l0.params,
            Some(&exp.data.stats),
            m.mixture(),
            None,
            2,
            &f.config.separation(),
        )
        .unwrap();
        assert_eq!(&s.estimates, est);
    }
}

#[test]
fn adapted_inputs_come_from_the_right_place() {
    let f = fixture();
    let exp = Experiment::new(&f.config, &f.corpus, f.speaker.clone()).unwrap();
    let l0 = exp.run_level(0, None, None, None).unwrap();
    let oracle = exp
        .run_level(1, Some(Mode::Oracle), Some(&l0), None)
        .unwrap();
    let realistic = exp
        .run_level(1, Some(Mode::Realistic), Some(&l0), None)
        .unwrap();
    let sep = f.config.separation();
    for (i, m) in f.corpus.mixtures.iter().enumerate() {
        // realistic: a standalone extraction pass over the level-0 estimates
        let s = separate(
            &l0.params,
            Some(&exp.data.stats),
            m.mixture(),
            None,
            2,
            &sep,
        )
        .unwrap();
        let ivs: Vec<_> = s
            .estimates
            .iter()
            .map(|e| f.speaker.ivector(e).unwrap())
            .collect();
        assert_eq!(
            realistic.inputs[i],
            order_ivectors(&s.estimates, &ivs).unwrap()
        );
        // oracle: the scaled references
        let ivs: Vec<_> = m
            .sources
            .iter()
            .map(|e| f.speaker.ivector(e).unwrap())
            .collect();
        assert_eq!(oracle.inputs[i], order_ivectors(&m.sources, &ivs).unwrap());
    }
    assert_eq!(oracle.params.shape.ivector_width, 2 * 3);
}

#[test]
fn modes_differ_only_in_their_inputs() {
    let f = fixture();
    let exp = Experiment::new(&f.config, &f.corpus, f.speaker.clone()).unwrap();
    let l0 = exp.run_level(0, None, None, None).unwrap();
    let a = exp
        .run_level_with(
            1,
            Some(Mode::Oracle),
            Some(l0.ivectors.clone()),
            Some(&l0.params),
        )
        .unwrap();
    let b = exp
        .run_level_with(
            1,
            Some(Mode::Realistic),
            Some(l0.ivectors.clone()),
            Some(&l0.params),
        )
        .unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.test_estimates, b.test_estimates);
    assert_eq!(a.reports, b.reports);
}

#[test]
fn speaker_block_is_constant_across_frames() {
    let f = fixture();
    let exp = Experiment::new(&f.config, &f.corpus, f.speaker.clone()).unwrap();
    let l0 = exp.run_level(0, None, None, None).unwrap();
    let p = l0.params.with_ivector_inputs(6);
    let x = p
        .build_input(exp.data.train[0].features.view(), Some(&l0.ivectors[0]))
        .unwrap();
    let flat: Vec<f64> = l0.ivectors[0].iter().cloned().collect();
    for row in x.rows() {
        assert_eq!(row.slice(ndarray::s![256..]).to_vec(), flat);
    }
}

#[test]
fn level_dependencies_are_enforced() {
    let f = fixture();
    let exp = Experiment::new(&f.config, &f.corpus, f.speaker.clone()).unwrap();
    assert!(matches!(
        exp.run_level(1, Some(Mode::Realistic), None, None),
        Err(Error::MissingDependency(_))
    ));
    let l0 = exp.run_level(0, None, None, None).unwrap();
    assert!(exp.run_level(0, None, Some(&l0), None).is_err());
}

#[test]
fn experiment_is_deterministic_and_writes_its_artifacts() {
    let f = fixture();
    let a = run_experiment(&f.config, &f.corpus).unwrap();
    let b = run_experiment(&f.config, &f.corpus).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.levels.len(), 3);
    assert_eq!(a.report.representation.len(), 1);
    assert_eq!(
        a.report.separation_tsv().lines().next().unwrap(),
        "config\tlevel0_baseline\tlevel1_oracle\tlevel1_realistic"
    );

    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path(), &f.corpus).unwrap();
    let root = dir.path();
    for rel in [
        "models/speaker/ubm.bsm",
        "models/speaker/tv.bsm",
        "models/level0/baseline/training_log.jsonl",
        "models/level1/realistic/network.bsm",
        "ivectors/level0/baseline.tsv",
        "reports/report.json",
        "reports/representation.tsv",
        "reports/level1_oracle.json",
    ] {
        assert!(root.join(rel).exists(), "{rel}");
    }
    let test_id = &f.corpus.mixtures[a.levels[0].test_index[0]].id;
    assert!(root
        .join("estimates/level1/oracle")
        .join(test_id)
        .join("est_1.wav")
        .exists());
    let (params, stats) = network_from_container(
        &ModelContainer::load(&root.join("models/level1/oracle/network.bsm")).unwrap(),
    )
    .unwrap();
    assert_eq!(params, a.levels[1].params);
    assert_eq!(stats.unwrap(), a.stats);
    let tv = ModelContainer::load(&root.join("models/speaker/tv.bsm")).unwrap();
    let ubm = ModelContainer::load(&root.join("models/speaker/ubm.bsm")).unwrap();
    assert_eq!(tv.meta("ubm_sha256").unwrap(), ubm.sha256_hex());
    assert_eq!(tv_from_container(&tv).unwrap(), a.speaker.tv);
    let text = std::fs::read_to_string(root.join("ivectors/level0/baseline.tsv")).unwrap();
    let back = ivectors_from_tsv(&text).unwrap();
    for (m, block) in f.corpus.mixtures.iter().zip(&a.levels[0].ivectors) {
        assert_eq!(&back[&m.id], block);
    }
}
