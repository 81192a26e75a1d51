use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use blindsep::container::{file_sha256, ModelContainer};

const TINY: &str = r#"
[corpus]
n_speakers = 3
utterances_per_speaker = 14
utterance_seconds = 0.8
enrollment_per_speaker = 2
test_per_speaker = 2
train_mixtures = 6
validation_mixtures = 2
test_mixtures = 3
seed = 5

[net]
hidden = 4
embedding_dim = 3

[trainer]
max_epochs = 1
batch_size = 4
validation_interval_batches = 1
curriculum_segment_frames = 0

[speaker]
ubm_components = 4
ubm_iterations = 3
tv_rank = 3
tv_iterations = 3

[pipeline]
kmeans_restarts = 2
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn raw(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_blindsep"))
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }

    fn run(&self, args: &[&str]) -> Output {
        self.raw(&[&["--config", "tiny.toml", "--jobs", "2"], args].concat())
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree_hashes(root: &Path) -> Vec<(PathBuf, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    file_sha256(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn corpus_refuses_to_overwrite_and_regenerates_identically() {
    let env = Env::new();
    env.ok(&["corpus", "--out", "a"]);
    let again = env.run(&["corpus", "--out", "a"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("exists"), "{}", stderr(&again));
    env.ok(&["corpus", "--out", "b"]);
    let a = tree_hashes(&env.path("a"));
    assert!(a.len() > 40);
    assert_eq!(a, tree_hashes(&env.path("b")));
    env.ok(&["corpus", "--out", "a", "--force"]);
    assert_eq!(a, tree_hashes(&env.path("a")));
}

#[test]
fn missing_dependencies_are_named() {
    let env = Env::new();
    let out = env.run(&["train", "--stage", "ubm"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("manifest.json"));
    env.ok(&["corpus"]);
    let out = env.run(&["train", "--stage", "tv"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("UBM"), "{}", stderr(&out));
    env.ok(&["train", "--stage", "ubm"]);
    env.ok(&["train", "--stage", "tv"]);
    let out = env.run(&[
        "train", "--stage", "net", "--level", "1", "--mode", "oracle",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(
        stderr(&out).contains("level0/baseline network"),
        "{}",
        stderr(&out)
    );
    let out = env.run(&[
        "separate",
        "corpus/mixtures/test/test_0000/mix.wav",
        "--out",
        "sep",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let out = env.run(&["train", "--stage", "lda"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn staged_chain_matches_the_experiment_command() {
    let env = Env::new();
    env.ok(&["corpus"]);
    env.ok(&["train", "--stage", "ubm"]);
    env.ok(&["train", "--stage", "tv"]);
    let tv = ModelContainer::load(&env.path("run/models/speaker/tv.bsm")).unwrap();
    assert_eq!(
        tv.meta("ubm_sha256").unwrap(),
        file_sha256(&env.path("run/models/speaker/ubm.bsm")).unwrap()
    );
    env.ok(&["train", "--stage", "net", "--level", "0"]);
    let out = env.run(&[
        "train",
        "--stage",
        "net",
        "--level",
        "1",
        "--mode",
        "realistic",
    ]);
    // realistic networks start from the oracle ones
    assert_eq!(out.status.code(), Some(3));
    assert!(
        stderr(&out).contains("level1/oracle network"),
        "{}",
        stderr(&out)
    );
    env.ok(&[
        "train", "--stage", "net", "--level", "1", "--mode", "oracle",
    ]);
    env.ok(&[
        "train",
        "--stage",
        "net",
        "--level",
        "1",
        "--mode",
        "realistic",
    ]);

    let tables = env.ok(&["experiment", "--work", "full"]);
    let tables = String::from_utf8(tables.stdout).unwrap();
    assert!(
        tables.starts_with("config\tlevel0_baseline\tlevel1_oracle\tlevel1_realistic\n"),
        "{tables}"
    );
    for rel in [
        "models/speaker/ubm.bsm",
        "models/speaker/tv.bsm",
        "models/level0/baseline/network.bsm",
        "models/level1/oracle/network.bsm",
        "models/level1/realistic/network.bsm",
        "ivectors/level1/realistic.tsv",
        "reports/level0_baseline.json",
        "reports/level1_oracle.json",
        "reports/level1_realistic.json",
    ] {
        let staged = std::fs::read(env.path("run").join(rel)).unwrap();
        assert_eq!(
            staged,
            std::fs::read(env.path("full").join(rel)).unwrap(),
            "{rel}"
        );
    }

    // separating a test mixture reproduces the stored estimates
    let mix = "corpus/mixtures/test/test_0001/mix.wav";
    let out = env.ok(&["separate", mix, "--level", "1", "--out", "sep1"]);
    let log = stderr(&out);
    assert!(log.contains("level0/baseline pass"), "{log}");
    assert!(
        log.contains("extracted 2 i-vectors from the level0/baseline estimates"),
        "{log}"
    );
    assert!(log.contains("level1/realistic pass"), "{log}");
    for k in 0..2 {
        let name = format!("est_{k}.wav");
        assert_eq!(
            std::fs::read(env.path("sep1").join(&name)).unwrap(),
            std::fs::read(
                env.path("run/estimates/level1/realistic/test_0001")
                    .join(&name)
            )
            .unwrap()
        );
    }
    let masks = ModelContainer::load(&env.path("sep1/masks.bsm")).unwrap();
    let (m0, m1) = (
        masks.tensor("mask_0").unwrap(),
        masks.tensor("mask_1").unwrap(),
    );
    assert_eq!(m0.shape, m1.shape);
    assert!(m0.data.iter().zip(&m1.data).all(|(a, b)| a * b == 0.0));
    env.ok(&["separate", mix, "--level", "1", "--out", "sep2"]);
    assert_eq!(
        tree_hashes(&env.path("sep1")),
        tree_hashes(&env.path("sep2"))
    );
    let out = env.run(&[
        "separate", mix, "--level", "1", "--mode", "oracle", "--out", "sep3",
    ]);
    assert_eq!(out.status.code(), Some(3));
    env.ok(&[
        "separate",
        mix,
        "--level",
        "1",
        "--mode",
        "oracle",
        "--reference",
        "corpus/mixtures/test/test_0001/s0.wav",
        "--reference",
        "corpus/mixtures/test/test_0001/s1.wav",
        "--out",
        "sep3",
    ]);

    // scoring the stored estimates reproduces the level report up to 16-bit rounding of the files
    env.ok(&[
        "evaluate",
        "run/estimates/level1/realistic",
        "corpus/mixtures/test",
        "--out",
        "eval.json",
    ]);
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(env.path("eval.json")).unwrap()).unwrap();
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(env.path("run/reports/level1_realistic.json")).unwrap(),
    )
    .unwrap();
    let close = |a: &serde_json::Value, b: &serde_json::Value| {
        (a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-3
    };
    assert!(close(
        &eval["mean_sdr_improvement"],
        &report["metrics"]["mean_sdr_improvement"]
    ));
    let mixtures = report["mixtures"].as_array().unwrap();
    assert_eq!(eval["mixtures"].as_object().unwrap().len(), mixtures.len());
    for (id, r) in mixtures.iter().map(|p| (p[0].as_str().unwrap(), &p[1])) {
        let e = &eval["mixtures"][id];
        assert_eq!(e["permutation"], r["permutation"]);
        assert_eq!(e["mixture_sdr"], r["mixture_sdr"]);
        for j in 0..2 {
            assert!(close(&e["sdr"][j], &r["sdr"][j]), "{id}");
        }
    }
}

#[test]
fn evaluate_scores_references_at_the_cap_and_names_missing_files() {
    let env = Env::new();
    env.ok(&["corpus"]);
    let src = env.path("corpus/mixtures/test/test_0000");
    let est = env.path("est/test_0000");
    std::fs::create_dir_all(&est).unwrap();
    for k in 0..2 {
        std::fs::copy(
            src.join(format!("s{k}.wav")),
            est.join(format!("est_{k}.wav")),
        )
        .unwrap();
    }
    let out = env.ok(&["evaluate", "est", "corpus/mixtures/test"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(
        table
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("test_0000\t100.000,100.000\t"),
        "{table}"
    );
    assert!(env.path("est/evaluation.json").exists());

    std::fs::create_dir_all(env.path("refs/test_0000")).unwrap();
    std::fs::copy(src.join("s0.wav"), env.path("refs/test_0000/s0.wav")).unwrap();
    let out = env.run(&["evaluate", "est", "refs"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("s1.wav"), "{}", stderr(&out));
}

#[test]
fn config_flags_override_the_file() {
    let env = Env::new();
    let out = env.ok(&["--set", "net.hidden=5", "--seed", "8", "config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let c = blindsep::pipeline::ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(c.net.hidden, 5);
    assert_eq!(c.net.embedding_dim, 3);
    assert_eq!((c.trainer.seed, c.pipeline.seed), (8, 8));
    assert_eq!(
        env.run(&["--set", "net.hiden=5", "config"]).status.code(),
        Some(2)
    );
    assert_eq!(env.run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(env.raw(&["--jobs", "0", "config"]).status.code(), Some(2));
}
