use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use xdistil_core::checkpoint::encode;
use xdistil_core::Tensor;

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn xdistil(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_xdistil"));
    c.args(args).env_remove("XDISTIL_SEED");
    if let Some(s) = env_seed {
        c.env("XDISTIL_SEED", s);
    }
    c.output().expect("binary runs")
}

fn summary(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().unwrap_or_else(|| panic!("no output; stderr: {}", String::from_utf8_lossy(&out.stderr)));
    serde_json::from_str(line).expect("summary is JSON")
}

fn set(kv: String) -> [String; 2] {
    ["--set".to_string(), kv]
}

fn args<'a>(cmd: &'a str, extra: &'a [String]) -> Vec<&'a str> {
    std::iter::once(cmd).chain(extra.iter().map(String::as_str)).collect()
}

/// Tiny synthetic run settings.
fn small(dir: &Path) -> Vec<String> {
    [
        format!("output_dir={:?}", dir.display().to_string()),
        "data.labeled=40".into(),
        "data.test=20".into(),
        "finetune.model.num_layers=1".into(),
        "finetune.model.hidden_dim=8".into(),
        "finetune.model.ff_dim=16".into(),
        "finetune.train.epochs=1".into(),
        "finetune.train.batch_size=8".into(),
    ]
    .into_iter()
    .flat_map(set)
    .collect()
}

#[test]
fn gradcheck_exit_codes_follow_the_result() {
    let dir = tempfile::tempdir().unwrap();
    let mut extra = small(dir.path()).to_vec();
    extra.extend(set(r#"gradcheck.suites=["add", "softmax"]"#.into()));
    let out = xdistil(&args("gradcheck", &extra), None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(summary(&out)["passed"], true);

    extra.extend(set("gradcheck.tolerance=1e-300".into()));
    let out = xdistil(&args("gradcheck", &extra), None);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(summary(&out)["passed"], false);
}

#[test]
fn bad_invocations_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(xdistil(&["no-such-command"], None).status.code(), Some(2));
    let out = xdistil(&["eval", "--set", "eval.checkpint=x"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let missing = dir.path().join("absent.xdtc");
    let mut extra = small(dir.path());
    extra.extend(set(format!("eval.checkpoint={:?}", missing.display().to_string())));
    assert_eq!(xdistil(&args("eval", &extra), None).status.code(), Some(2));
    assert_eq!(xdistil(&["eval", "--config", "/nonexistent/run.toml"], None).status.code(), Some(2));
}

#[test]
fn the_bundled_config_parses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo_file("configs/synthetic.toml");
    let out = xdistil(
        &[
            "gradcheck",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            &format!("output_dir={:?}", dir.path().display().to_string()),
            "--set",
            r#"gradcheck.suites=["add"]"#,
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn select_task_reads_the_bundled_matrix_and_writes_no_steps() {
    let dir = tempfile::tempdir().unwrap();
    let mut extra = small(dir.path());
    extra.extend(set(format!("select.matrix={:?}", repo_file("data/transfer_scores.csv").display().to_string())));
    let out = xdistil(&args("select-task", &extra), None);
    assert_eq!(out.status.code(), Some(0));
    let s = summary(&out);
    assert_eq!(s["best"], "MNLI");
    assert_eq!(fs::read_to_string(dir.path().join("report.jsonl")).unwrap(), "");
}

#[test]
fn finetune_reports_one_line_per_step_and_eval_reads_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let extra = small(dir.path());
    let out = xdistil(&args("finetune", &extra), None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out);
    let report = fs::read_to_string(dir.path().join("report.jsonl")).unwrap();
    assert_eq!(report.lines().count() as u64, s["steps"].as_u64().unwrap());
    assert!(report.lines().all(|l| serde_json::from_str::<Value>(l).unwrap()["loss_ce"].is_number()));

    let ckpt = dir.path().join("model.xdtc");
    let mut e = small(&dir.path().join("eval"));
    e.extend(set(format!("eval.checkpoint={:?}", ckpt.display().to_string())));
    let out = xdistil(&args("eval", &e), None);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(summary(&out)["test"]["examples"], 20);
    assert_eq!(summary(&out)["test"], s["test"]);
}

#[test]
fn seed_precedence_is_file_then_environment_then_set() {
    let base = tempfile::tempdir().unwrap();
    let run = |name: &str, env: Option<&str>, seed_set: Option<&str>| -> Vec<u8> {
        let dir = base.path().join(name);
        let mut extra = small(&dir);
        if let Some(s) = seed_set {
            extra.extend(set(format!("seed={s}")));
        }
        let out = xdistil(&args("finetune", &extra), env);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(dir.join("model.xdtc")).unwrap()
    };
    let env1 = run("a", Some("1"), None);
    let env2 = run("b", Some("2"), None);
    let set1 = run("c", Some("2"), Some("1"));
    assert_ne!(env1, env2);
    assert_eq!(env1, set1);
    assert_eq!(xdistil(&["finetune"], Some("not-a-number")).status.code(), Some(2));
}

#[test]
fn double_precision_runs_produce_loadable_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut extra = small(dir.path());
    extra.push("--precision".into());
    extra.push("f64".into());
    let out = xdistil(&args("finetune", &extra), None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = xdistil_core::checkpoint::load_checkpoint::<f32>(dir.path().join("model.xdtc")).unwrap();
    assert_eq!(m.config().hidden_dim, 8);
}

#[test]
fn augment_writes_at_most_k_squared_pairs_per_source_pair() {
    let dir = tempfile::tempdir().unwrap();
    let corpus: Vec<String> = (0..30).map(|i| format!("w{} w{} w{}", i % 7, i % 5, i)).collect();
    fs::write(dir.path().join("corpus.txt"), corpus.join("\n")).unwrap();
    fs::write(dir.path().join("pairs.tsv"), "w1 w2\tw3 w4\nw0 w0 w0\tw6 w1 w2\n").unwrap();
    for k in [1usize, 3] {
        let mut extra = small(dir.path());
        for kv in [
            format!("augment.pairs={:?}", dir.path().join("pairs.tsv").display().to_string()),
            format!("augment.corpus={:?}", dir.path().join("corpus.txt").display().to_string()),
            format!("augment.k={k}"),
            "augment.dim=64".into(),
        ] {
            extra.extend(set(kv));
        }
        let out = xdistil(&args("augment", &extra), None);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let s = summary(&out);
        let n = s["pairs"].as_u64().unwrap() as usize;
        assert!(n >= 1 && n <= 2 * k * k);
        let written = fs::read_to_string(dir.path().join("augmented.tsv")).unwrap();
        assert_eq!(written.lines().count(), n);
        assert!(written.lines().all(|l| l.split('\t').count() == 2));
    }
}

#[test]
fn swap_embeddings_keeps_the_encoder_and_rejects_mismatched_tables() {
    let dir = tempfile::tempdir().unwrap();
    let extra = small(dir.path());
    assert_eq!(xdistil(&args("finetune", &extra), None).status.code(), Some(0));
    let vocab: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..20).map(|i| format!("tok{i}")))
        .collect();
    fs::write(dir.path().join("vocab.txt"), vocab.join("\n") + "\n").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let write_table = |rows: usize, name: &str, rng: &mut ChaCha8Rng| {
        let t = Tensor::<f32>::from_fn(&[rows, 16], |_| rng.random::<f32>() - 0.5);
        fs::write(dir.path().join(name), encode("", [("table", &t)]).unwrap()).unwrap();
    };
    write_table(vocab.len(), "good.xdtc", &mut rng);
    write_table(vocab.len() + 1, "bad.xdtc", &mut rng);

    let swap = |table: &str| {
        let mut e = small(&dir.path().join("swap"));
        for kv in [
            format!("swap.checkpoint={:?}", dir.path().join("model.xdtc").display().to_string()),
            format!("swap.vocab={:?}", dir.path().join("vocab.txt").display().to_string()),
            format!("swap.embeddings={:?}", dir.path().join(table).display().to_string()),
        ] {
            e.extend(set(kv));
        }
        xdistil(&args("swap-embeddings", &e), None)
    };
    let out = swap("good.xdtc");
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out);
    assert_eq!(s["encoder_hash_before"], s["encoder_hash_after"]);
    assert_eq!(s["vocab_size"], vocab.len());
    let m = xdistil_core::checkpoint::load_checkpoint::<f32>(dir.path().join("swap/swapped.xdtc")).unwrap();
    assert!(m.params().get("embeddings.word").unwrap().frozen);

    let out = swap("bad.xdtc");
    assert_eq!(out.status.code(), Some(1), "a contract violation exits with 1");
}

#[test]
fn token_classification_files_train_and_report_span_f1() {
    let dir = tempfile::tempdir().unwrap();
    let ner = "anna\tB-PER\nlives\tO\nin\tO\nparis\tB-LOC\n\nbob\tB-PER\nsmiles\tO\n";
    fs::write(dir.path().join("train.tsv"), ner).unwrap();
    fs::write(dir.path().join("test.tsv"), ner).unwrap();
    let vocab = "[PAD]\n[UNK]\n[CLS]\n[SEP]\nanna\nlives\nin\nparis\nbob\nsmiles\n";
    fs::write(dir.path().join("vocab.txt"), vocab).unwrap();
    let mut extra = small(dir.path());
    for kv in [
        "data.source=\"files\"".to_string(),
        "data.format=\"ner\"".into(),
        format!("data.vocab={:?}", dir.path().join("vocab.txt").display().to_string()),
        format!("data.train={:?}", dir.path().join("train.tsv").display().to_string()),
        format!("data.test_file={:?}", dir.path().join("test.tsv").display().to_string()),
        "data.max_seq_len=16".into(),
        "finetune.train.epochs=80".into(),
        "finetune.train.lr=1e-2".into(),
        "finetune.train.batch_size=2".into(),
        "finetune.train.validation_fraction=0.0".into(),
    ] {
        extra.extend(set(kv));
    }
    let out = xdistil(&args("finetune", &extra), None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out);
    assert_eq!(s["test"]["span_f1"], 1.0, "{s}");

    fs::write(dir.path().join("train.tsv"), "anna\tPERSON\n").unwrap();
    let out = xdistil(&args("finetune", &extra), None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("parse error at byte"));
}
