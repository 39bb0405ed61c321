use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protoep::training::{read_grid_csv, read_trace_csv, GridRow};

const SMALL: &str = "\
# tiny synthetic run
data.kind = synthetic
data.synth.num_relations = 5
data.synth.per_relation = 30
data.synth.vocab_size = 200
train.iterations = 20
train.eval_iterations = 20
train.encoder.hidden = 16
train.encoder.pos_dim = 3
";

fn protoep(args: &[&str]) -> Output {
    protoep_env(args, &[])
}

fn protoep_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_protoep"));
    cmd.args(args).env_remove("PROTOEP_JOBS").env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.conf", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = protoep(&["train", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        for f in ["checkpoint.json", "loss_trace.csv", "config.resolved.json"] {
            assert!(out.join(f).exists(), "{f}");
        }
    }
    let ta = std::fs::read(a.join("loss_trace.csv")).unwrap();
    assert_eq!(ta, std::fs::read(b.join("loss_trace.csv")).unwrap());
    assert_eq!(read_trace_csv(&a.join("loss_trace.csv")).unwrap().len(), 20);

    // the resolved config reproduces itself
    let resolved = a.join("config.resolved.json");
    let c = dir.path().join("c");
    let o = protoep(&["train", "--config", s(&resolved), "--out", s(&c)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = |p: &Path| std::fs::read_to_string(p).unwrap();
    assert_eq!(
        text(&resolved).replace(s(&a), ""),
        text(&c.join("config.resolved.json")).replace(s(&c), "")
    );
    assert_eq!(ta, std::fs::read(c.join("loss_trace.csv")).unwrap());
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let missing = write_config(
        dir.path(),
        "fewrel.conf",
        "data.kind = fewrel\ndata.embeddings_path = e.txt\n",
    );
    let o = protoep(&["train", "--config", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.train_path"), "{}", stderr(&o));

    let typo = write_config(dir.path(), "typo.conf", "train.iteratons = 3\n");
    let o = protoep(&["train", "--config", s(&typo)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("iteratons"));

    let bad = write_config(dir.path(), "bad.conf", "train.learning_rate = -1\n");
    let o = protoep(&["train", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"));

    let cfg = write_config(dir.path(), "run.conf", SMALL);
    let o = protoep_env(&["train", "--config", s(&cfg)], &[("PROTOEP_JOBS", "0")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_rejects_checkpoint_of_another_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.conf", SMALL);
    let out = dir.path().join("t");
    assert!(protoep(&["train", "--config", s(&cfg), "--out", s(&out)])
        .status
        .success());
    let ck = out.join("checkpoint.json");

    let o = protoep(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["eval_report.json", "eval_report.csv", "eval_report.md"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let wider = write_config(dir.path(), "wider.conf", &SMALL.replace("hidden = 16", "hidden = 20"));
    let wide_out = dir.path().join("w");
    assert!(protoep(&["train", "--config", s(&wider), "--out", s(&wide_out)])
        .status
        .success());
    let fingerprint = |p: &Path| -> String {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        v["fingerprint"].as_str().unwrap().to_string()
    };
    let (have, want) = (fingerprint(&ck), fingerprint(&wide_out.join("checkpoint.json")));
    assert_ne!(have, want);
    let o = protoep(&["eval", "--config", s(&wider), "--checkpoint", s(&ck)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains(&have) && err.contains(&want), "{err}");
}

#[test]
fn gradcheck_passes() {
    let o = protoep(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    for loss in ["ce", "dist", "cl", "combined"] {
        assert!(out.lines().any(|l| l.starts_with(loss) && l.ends_with("(ok)")), "{out}");
    }
}

const TABLE3: &str = "\
data.kind = synthetic
data.synth.num_relations = 20
data.synth.per_relation = 20
data.synth.vocab_size = 200
train.iterations = 2
train.eval_iterations = 3
train.encoder.hidden = 8
train.encoder.pos_dim = 2
grid.preset = inconsistent_n
grid.variants = [\"proto\"]
";

fn grid_rows(dir: &Path, jobs: &str, name: &str) -> Vec<GridRow> {
    let cfg = write_config(dir, "table3.conf", TABLE3);
    let out = dir.join(name);
    let o = protoep_env(
        &[
            "grid",
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "--format",
            "csv,markdown",
        ],
        &[("PROTOEP_JOBS", jobs)],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("grid.md").exists() && !out.join("grid.json").exists());
    read_grid_csv(&out.join("grid.csv")).unwrap()
}

#[test]
fn inconsistent_way_grid_has_twelve_rows_regardless_of_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let one = grid_rows(dir.path(), "1", "one");
    let two = grid_rows(dir.path(), "2", "two");
    assert_eq!(one.len(), 12);
    assert!(one.iter().all(GridRow::is_ok));
    let key = |rows: &[GridRow]| {
        rows.iter()
            .map(|r| {
                (
                    r.cell_id.clone(),
                    r.n1,
                    r.n2,
                    r.k1,
                    r.k2,
                    r.accuracy_mean,
                    r.accuracy_std,
                )
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(key(&one), key(&two));
}

#[test]
fn trend_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let row = |k2: usize, acc: f64| GridRow {
        cell_id: format!("proto/5-5-5-{k2}@s1"),
        n1: 5,
        k1: 5,
        n2: 5,
        k2,
        q_per_class: 5,
        model_variant: "proto".into(),
        iterations: 10,
        seed: 1,
        accuracy_mean: Some(acc),
        accuracy_std: Some(0.01),
        wall_seconds: 0.0,
        status: "ok".into(),
    };
    let table = dir.path().join("grid.csv");
    protoep::training::write_grid_csv(&[row(1, 0.7), row(5, 0.6)], &table).unwrap();
    let o = protoep(&[
        "trend",
        "--table",
        s(&table),
        "--axis",
        "k2",
        "--direction",
        "increasing",
    ]);
    assert_eq!(o.status.code(), Some(3));
    let out = dir.path().join("trend");
    let o = protoep(&[
        "trend",
        "--table",
        s(&table),
        "--axis",
        "k2",
        "--direction",
        "decreasing",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("+0.1000"));
    assert!(out.join("trend.json").exists());
}

#[test]
fn synthetic_dump_trains_and_beats_chance() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = write_config(
        dir.path(),
        "synth.conf",
        &format!(
            "{}data.holdout_relations = 0\ntrain.iterations = 150\ntrain.eval_iterations = 100\nout = {}\n",
            SMALL
                .replace("train.iterations = 20\n", "")
                .replace("train.eval_iterations = 20\n", ""),
            s(&data)
        ),
    );
    let o = protoep(&["synth", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let follow = data.join("fewrel_config.json");
    let run = dir.path().join("run");
    let o = protoep(&["train", "--config", s(&follow), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = protoep(&[
        "eval",
        "--config",
        s(&follow),
        "--checkpoint",
        s(&run.join("checkpoint.json")),
        "--out",
        s(&run),
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("eval_report.json")).unwrap()).unwrap();
    let acc = report["accuracy_mean"].as_f64().unwrap();
    assert!(acc > 0.5, "accuracy {acc}");
    assert!(!run.join("eval_report.csv").exists());
}
