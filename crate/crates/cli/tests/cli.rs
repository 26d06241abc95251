//! End-to-end tests that drive the compiled binary the way a user would.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fusedec"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary must launch")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        stdout(out),
        stderr(out)
    );
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("paths in tests are valid UTF-8")
}

/// Generates one small dataset and one trained checkpoint, shared by the
/// read-only tests below so the binary is exercised without retraining per
/// test.
struct SharedRun {
    _dir: TempDir,
    train_manifest: PathBuf,
    eval_manifest: PathBuf,
    checkpoint: PathBuf,
    surrogate: PathBuf,
    pseudo: PathBuf,
}

fn shared() -> &'static SharedRun {
    static SHARED: OnceLock<SharedRun> = OnceLock::new();
    SHARED.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir");
        let data = dir.path().join("data");
        let out = run(&[
            "synth",
            "--out",
            path_str(&data),
            "--seed",
            "11",
            "--train",
            "32",
            "--eval",
            "12",
            "--classes",
            "3",
            "--global-rows",
            "2",
            "--local-slots",
            "10",
            "--text-slots",
            "5",
            "--d-global",
            "24",
            "--d-local",
            "16",
            "--d-text",
            "24",
        ]);
        assert_ok(&out);
        let train_manifest = data.join("train/manifest.json");
        let eval_manifest = data.join("eval/manifest.json");
        let pseudo = data.join("train/pseudo.json");

        let model = dir.path().join("run");
        let out = run(&[
            "train",
            "--manifest",
            path_str(&train_manifest),
            "--out",
            path_str(&model),
            "--epochs",
            "2",
            "--batch",
            "16",
            "--d-model",
            "24",
            "--heads",
            "4",
            "--dropout",
            "0.1",
            "--k",
            "2",
        ]);
        assert_ok(&out);
        let checkpoint = model.join("main.ckpt");

        let out = run(&[
            "refine",
            "--manifest",
            path_str(&train_manifest),
            "--pseudo",
            path_str(&pseudo),
            "--out",
            path_str(&model),
            "--epochs",
            "2",
            "--batch",
            "16",
            "--d-model",
            "24",
        ]);
        assert_ok(&out);
        let surrogate = model.join("surrogate.ckpt");

        SharedRun {
            _dir: dir,
            train_manifest,
            eval_manifest,
            checkpoint,
            surrogate,
            pseudo,
        }
    })
}

#[test]
fn train_reports_epochs_and_writes_checkpoint() {
    let s = shared();
    assert!(s.checkpoint.is_file());
    assert!(s.checkpoint.with_file_name("history.json").is_file());
    let history = std::fs::read_to_string(s.checkpoint.with_file_name("history.json")).unwrap();
    let records: serde_json::Value = serde_json::from_str(&history).unwrap();
    assert_eq!(records.as_array().unwrap().len(), 2);
}

#[test]
fn eval_prints_summary_and_table() {
    let s = shared();
    let out = run(&[
        "eval",
        "--manifest",
        path_str(&s.eval_manifest),
        "--checkpoint",
        path_str(&s.checkpoint),
    ]);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("samples=12"), "{text}");
    assert!(text.contains("mode=full"), "{text}");
    assert!(text.contains("refined=false"), "{text}");
    assert!(text.contains("macro_f1="), "{text}");
    assert!(text.contains("precision"), "{text}");
}

#[test]
fn eval_json_flag_emits_parseable_report() {
    let s = shared();
    let out = run(&[
        "eval",
        "--manifest",
        path_str(&s.eval_manifest),
        "--checkpoint",
        path_str(&s.checkpoint),
        "--json",
    ]);
    assert_ok(&out);
    let text = stdout(&out);
    let json_start = text.find('{').expect("json object in output");
    let report: serde_json::Value = serde_json::from_str(&text[json_start..]).unwrap();
    assert_eq!(report["samples"], 12);
    assert_eq!(report["per_class"].as_array().unwrap().len(), 3);
}

#[test]
fn eval_with_surrogate_reports_refined() {
    let s = shared();
    let out = run(&[
        "eval",
        "--manifest",
        path_str(&s.eval_manifest),
        "--checkpoint",
        path_str(&s.checkpoint),
        "--surrogate",
        path_str(&s.surrogate),
    ]);
    assert_ok(&out);
    assert!(stdout(&out).contains("refined=true"));

    let out = run(&[
        "eval",
        "--manifest",
        path_str(&s.eval_manifest),
        "--checkpoint",
        path_str(&s.checkpoint),
        "--surrogate",
        path_str(&s.surrogate),
        "--no-refine",
    ]);
    assert_ok(&out);
    assert!(stdout(&out).contains("refined=false"));
}

#[test]
fn explain_emits_decision_json_for_sample() {
    let s = shared();
    let out = run(&[
        "explain",
        "--manifest",
        path_str(&s.eval_manifest),
        "--checkpoint",
        path_str(&s.checkpoint),
        "--sample",
        "eval-000001",
    ]);
    assert_ok(&out);
    let decision: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(decision["sample_id"], "eval-000001");
    assert_eq!(decision["logits"].as_array().unwrap().len(), 3);
    assert_eq!(decision["decisions"].as_array().unwrap().len(), 3);
    assert!(decision["vision_explanation"].is_array());
    assert_eq!(decision["refined"], false);
}

#[test]
fn explain_unknown_sample_is_a_data_error() {
    let s = shared();
    let out = run(&[
        "explain",
        "--manifest",
        path_str(&s.eval_manifest),
        "--checkpoint",
        path_str(&s.checkpoint),
        "--sample",
        "no-such-sample",
    ]);
    assert_exit(&out, 3);
    assert!(stderr(&out).contains("no-such-sample"));
}

#[test]
fn surrogate_checkpoint_is_rejected_as_main_model() {
    let s = shared();
    let out = run(&[
        "eval",
        "--manifest",
        path_str(&s.eval_manifest),
        "--checkpoint",
        path_str(&s.surrogate),
    ]);
    assert_exit(&out, 4);
    assert!(stderr(&out).contains("refinement"));
}

#[test]
fn eval_on_mismatched_dataset_is_a_config_error() {
    let s = shared();
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("other");
    let out = run(&[
        "synth",
        "--out",
        path_str(&data),
        "--train",
        "4",
        "--eval",
        "4",
        "--classes",
        "3",
        "--global-rows",
        "2",
        "--local-slots",
        "10",
        "--text-slots",
        "5",
        "--d-global",
        "32",
        "--d-local",
        "16",
        "--d-text",
        "24",
    ]);
    assert_ok(&out);
    let out = run(&[
        "eval",
        "--manifest",
        path_str(&data.join("eval/manifest.json")),
        "--checkpoint",
        path_str(&s.checkpoint),
    ]);
    assert_exit(&out, 2);
    assert!(stderr(&out).contains("dims"));
}

#[test]
fn missing_manifest_is_an_io_error() {
    let out = run(&[
        "eval",
        "--manifest",
        "/nonexistent/manifest.json",
        "--checkpoint",
        "/nonexistent/main.ckpt",
    ]);
    assert_exit(&out, 1);
}

#[test]
fn corrupt_manifest_is_a_parse_error() {
    let dir = TempDir::new().unwrap();
    let manifest = dir.path().join("manifest.json");
    std::fs::write(&manifest, b"{ not json").unwrap();
    let out = run(&["bag", "--manifest", path_str(&manifest)]);
    assert_exit(&out, 4);
}

#[test]
fn conflicting_mode_flags_are_a_usage_error() {
    let s = shared();
    let out = run(&[
        "eval",
        "--manifest",
        path_str(&s.eval_manifest),
        "--checkpoint",
        path_str(&s.checkpoint),
        "--no-vision",
        "--no-text",
    ]);
    assert_exit(&out, 2);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert_exit(&out, 2);
}

#[test]
fn synth_is_deterministic_in_the_seed() {
    let dir = TempDir::new().unwrap();
    let synth = |out: &Path| {
        run(&[
            "synth",
            "--out",
            path_str(out),
            "--seed",
            "42",
            "--train",
            "6",
            "--eval",
            "3",
            "--classes",
            "3",
            "--global-rows",
            "2",
            "--local-slots",
            "10",
            "--text-slots",
            "5",
            "--d-global",
            "24",
            "--d-local",
            "16",
            "--d-text",
            "24",
        ])
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_ok(&synth(&a));
    assert_ok(&synth(&b));

    for rel in [
        "train/manifest.json",
        "train/pseudo.json",
        "train/truth.json",
        "train/bundles/train-000000.fdb",
        "eval/manifest.json",
        "eval/bundles/eval-000002.fdb",
    ] {
        let left = std::fs::read(a.join(rel)).unwrap();
        let right = std::fs::read(b.join(rel)).unwrap();
        assert_eq!(left, right, "{rel} differs between identical seeds");
    }
}

#[test]
fn train_is_deterministic_in_the_seed() {
    let s = shared();
    let dir = TempDir::new().unwrap();
    let train = |out: &Path| {
        run(&[
            "train",
            "--manifest",
            path_str(&s.train_manifest),
            "--out",
            path_str(out),
            "--epochs",
            "1",
            "--batch",
            "16",
            "--d-model",
            "24",
            "--heads",
            "4",
            "--dropout",
            "0.1",
            "--k",
            "2",
            "--seed",
            "5",
        ])
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out_a = train(&a);
    let out_b = train(&b);
    assert_ok(&out_a);
    assert_ok(&out_b);
    // The final line names the output path, which differs by construction.
    let strip_path = |out: &Output| {
        stdout(out)
            .lines()
            .filter(|l| !l.starts_with("checkpoint="))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip_path(&out_a), strip_path(&out_b));
    assert_eq!(
        std::fs::read(a.join("main.ckpt")).unwrap(),
        std::fs::read(b.join("main.ckpt")).unwrap(),
        "checkpoints differ between identical seeds"
    );
}

#[test]
fn ablation_flags_change_the_evaluated_mode() {
    let s = shared();
    for (flag, expect) in [
        ("--no-text", "mode=vision-only"),
        ("--no-vision", "mode=text-only"),
        ("--global-only", "mode=global-only"),
    ] {
        let out = run(&[
            "eval",
            "--manifest",
            path_str(&s.eval_manifest),
            "--checkpoint",
            path_str(&s.checkpoint),
            flag,
        ]);
        assert_ok(&out);
        assert!(stdout(&out).contains(expect), "{flag}: {}", stdout(&out));
    }
}

#[test]
fn gradcheck_small_passes_and_reports_probes() {
    let out = run(&["gradcheck", "--small", "--samples", "4"]);
    assert_ok(&out);
    let text = stdout(&out);
    assert_eq!(text.matches("param=").count(), 4);
    assert!(text.contains("status=ok"), "{text}");
}

#[test]
fn gradcheck_fails_loudly_when_tolerance_is_unattainable() {
    let out = run(&["gradcheck", "--small", "--samples", "4", "--tol", "1e-18"]);
    assert_exit(&out, 3);
    assert!(stderr(&out).contains("exceeds tolerance"));
}

fn write_fixture(dir: &Path, sample: &str, key: &str, text: &str) {
    let sample_dir = dir.join(sample);
    std::fs::create_dir_all(&sample_dir).unwrap();
    std::fs::write(sample_dir.join(format!("{key}.txt")), text).unwrap();
}

#[test]
fn enrich_caches_transcripts_and_reruns_without_backend_calls() {
    let s = shared();
    let dir = TempDir::new().unwrap();
    let fixtures = dir.path().join("fixtures");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&s.eval_manifest).unwrap()).unwrap();
    for sample in manifest["samples"].as_array().unwrap() {
        let id = sample["id"].as_str().unwrap();
        write_fixture(&fixtures, id, "q1", "1. car\n2. traffic light\n");
        write_fixture(&fixtures, id, "q2", "The traffic light matters most.");
        write_fixture(&fixtures, id, "q3", "traffic light: red above the junction");
    }
    let cache = dir.path().join("cache");
    let enriched = dir.path().join("enrich.json");
    let args = [
        "enrich",
        "--manifest",
        path_str(&s.eval_manifest),
        "--out",
        path_str(&enriched),
        "--cache",
        path_str(&cache),
        "--mock-dir",
        path_str(&fixtures),
    ];
    let first = run(&args);
    assert_ok(&first);
    assert!(
        stdout(&first).contains("backend_calls=36"),
        "{}",
        stdout(&first)
    );
    let bytes_after_first = std::fs::read(&enriched).unwrap();

    let second = run(&args);
    assert_ok(&second);
    assert!(
        stdout(&second).contains("backend_calls=0"),
        "{}",
        stdout(&second)
    );
    assert_eq!(bytes_after_first, std::fs::read(&enriched).unwrap());

    let parsed: serde_json::Value =
        serde_json::from_str(std::str::from_utf8(&bytes_after_first).unwrap()).unwrap();
    let first_sample = &parsed.as_array().unwrap()[0];
    assert!(first_sample["objects"]
        .as_array()
        .unwrap()
        .iter()
        .any(|o| o == "traffic light"));
    assert_eq!(first_sample["relevant"][0], "traffic light");
}

#[test]
fn pseudo_writes_relevance_tables_usable_by_refine() {
    let s = shared();
    let dir = TempDir::new().unwrap();
    let fixtures = dir.path().join("fixtures");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&s.train_manifest).unwrap()).unwrap();
    for sample in manifest["samples"].as_array().unwrap() {
        let id = sample["id"].as_str().unwrap();
        for class in 0..3 {
            write_fixture(&fixtures, id, &format!("pseudo-{class}"), "1");
        }
    }
    let pseudo = dir.path().join("pseudo.json");
    let out = run(&[
        "pseudo",
        "--manifest",
        path_str(&s.train_manifest),
        "--out",
        path_str(&pseudo),
        "--cache",
        path_str(&dir.path().join("cache")),
        "--mock-dir",
        path_str(&fixtures),
    ]);
    assert_ok(&out);
    assert!(stdout(&out).contains("samples=32"), "{}", stdout(&out));

    let out = run(&[
        "refine",
        "--manifest",
        path_str(&s.train_manifest),
        "--pseudo",
        path_str(&pseudo),
        "--out",
        path_str(&dir.path().join("run")),
        "--epochs",
        "1",
        "--batch",
        "16",
        "--d-model",
        "24",
    ]);
    assert_ok(&out);
    assert!(dir.path().join("run/surrogate.ckpt").is_file());
}

#[test]
fn enrich_requires_an_endpoint_or_mock_dir() {
    let s = shared();
    let out = run(&[
        "enrich",
        "--manifest",
        path_str(&s.eval_manifest),
        "--out",
        "/tmp/unused.json",
        "--cache",
        "/tmp/unused-cache",
    ]);
    assert_exit(&out, 2);
}

#[test]
fn generated_pseudo_tables_train_the_surrogate() {
    let s = shared();
    assert!(s.pseudo.is_file());
}
