use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_denerd");

fn denerd(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("DENERD_SERVER").output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"
corpus_size = 8
recurrences = 3

[training]
epochs = 1

[registration]
max_iterations = 30

[preprocess]
max_side = 80

[dataset.brain]
width = 160
height = 120

[dataset.generator]
sections = 2
"#;

#[test]
fn help_lists_every_verb() {
    let text = stdout(&denerd(&["--help"]));
    for verb in ["generate", "annotate-serve", "export-gt", "train", "detect", "register", "quantify", "stats", "run-all", "report"] {
        assert!(text.contains(verb), "missing {verb}");
    }
}

#[test]
fn ranksum_in_process() {
    let v: serde_json::Value = serde_json::from_str(&stdout(&denerd(&["ranksum", "--x", "1,2,3", "--y", "4,5,6"]))).unwrap();
    assert!((v["p_two_sided"].as_f64().unwrap() - 0.1).abs() < 1e-12);
}

#[test]
fn bad_config_and_missing_files_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "recurrences = 0\n").unwrap();
    let o = denerd(&["--config", p(&cfg), "health"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("recurrences"));
    let o = denerd(&["report", "--out", p(&dir.path().join("none"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn run_all_twice_gives_identical_tables_and_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let text = stdout(&denerd(&["--config", p(&cfg), "run-all", "--work-dir", p(&a)]));
    assert!(text.contains("sections: 6 ok, 0 failed of 6"), "{text}");
    stdout(&denerd(&["--config", p(&cfg), "run-all", "--work-dir", p(&b)]));
    for t in denerd_api::core::workbench::REPORT_TABLES {
        assert_eq!(fs::read(a.join("out").join(t)).unwrap(), fs::read(b.join("out").join(t)).unwrap(), "{t}");
    }
    let report = stdout(&denerd(&["report", "--out", p(&a.join("out"))]));
    assert!(report.contains("clusters.tsv"));

    // The stages also run one at a time on the generated data.
    let section = a.join("data/sections").join("P4-GAD1-00.png");
    let det = a.join("det");
    stdout(&denerd(&["--config", p(&cfg), "detect", "--model", p(&a.join("model.ckpt")), "--image", p(&section), "--out", p(&det)]));
    assert!(det.join("P4-GAD1-00.png").is_file());
    let warped = a.join("warped.png");
    let reg = stdout(&denerd(&[
        "--config",
        p(&cfg),
        "register",
        "--fixed",
        p(&section),
        "--moving",
        p(&a.join("data/atlases/P4/nissl.png")),
        "--atlas-labels",
        p(&a.join("data/atlases/P4/labels.png")),
        "--atlas-out",
        p(&warped),
    ]));
    let v: serde_json::Value = serde_json::from_str(&reg).unwrap();
    assert_eq!(v["records"].as_array().unwrap().len(), 3);
    let dens = a.join("one.tsv");
    stdout(&denerd(&[
        "quantify",
        "--map",
        p(&det.join("P4-GAD1-00.png")),
        "--labels",
        p(&warped),
        "--regions",
        p(&a.join("data/atlases/P4/regions.tsv")),
        "--section",
        "P4-GAD1-00",
        "--age",
        "P4",
        "--out",
        p(&dens),
    ]));
    assert!(fs::read_to_string(&dens).unwrap().lines().count() > 1);
    let stats = stdout(&denerd(&["stats", "--densities", p(&a.join("out/densities.tsv"))]));
    let v: serde_json::Value = serde_json::from_str(&stats).unwrap();
    assert!(!v["clusters"].as_array().unwrap().is_empty());
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn annotate_serve_and_remote_export() {
    let dir = tempfile::tempdir().unwrap();
    stdout(&denerd(&["generate", "corpus", "--count", "4", "--out", p(dir.path())]));
    let port = free_port();
    let _server = Server(
        Command::new(BIN)
            .args(["annotate-serve", "--dir", p(dir.path())])
            .env("DENERD_PORT", port.to_string())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let url = format!("http://127.0.0.1:{port}");
    let start = Instant::now();
    while !denerd(&["--server", &url, "health"]).status.success() {
        assert!(start.elapsed() < Duration::from_secs(20), "server did not come up");
        sleep(Duration::from_millis(100));
    }
    // Import the generated truth, then export it through the server.
    let client = denerd_client::Client::new(&url);
    let rt = tokio::runtime::Runtime::new().unwrap();
    let imp = rt
        .block_on(client.import(&denerd_api::ImportRequest {
            gt_path: dir.path().join("gt.jsonl"),
            annotator: "gt".into(),
        }))
        .unwrap();
    assert_eq!(imp.images, 4);
    let out = dir.path().join("split");
    let text = stdout(&denerd(&["--server", &url, "export-gt", "--out", p(&out), "--seed", "3"]));
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!((v["train"].as_u64(), v["test"].as_u64()), (Some(2), Some(2)));
    assert!(out.join("train.jsonl").is_file() && out.join("test.jsonl").is_file());
    let v: serde_json::Value = serde_json::from_str(&stdout(&denerd(&["--server", &url, "ranksum", "--x", "1,2,3", "--y", "4,5,6"]))).unwrap();
    assert_eq!(v["method"], "exact");
}
