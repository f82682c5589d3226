mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{builder, tree};
use layer_inject::bundle::{flatten, load_bundle, open_store, save_bundle};
use layer_inject::dockerfile::parse_dockerfile;
use tempfile::TempDir;

const DF: &str = "FROM python:3\nWORKDIR /app\nCOPY . .\nRUN pip install flask\nCMD [\"python\", \"app.py\"]\n";

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ctx = tree(&[("app.py", b"print('v1')\n"), ("util.py", b"X = 1\n")]);
        let image = builder().build(&parse_dockerfile(DF).unwrap(), &ctx).unwrap();
        save_bundle(&image, &dir.path().join("image.tar")).unwrap();
        fs::create_dir(dir.path().join("ctx")).unwrap();
        fs::write(dir.path().join("ctx/app.py"), b"print('v2')\n").unwrap();
        fs::write(dir.path().join("ctx/util.py"), b"X = 1\n").unwrap();
        fs::write(dir.path().join("Dockerfile"), DF).unwrap();
        tar::Archive::new(image.to_archive_bytes().as_slice())
            .unpack(dir.path().join("store"))
            .unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn change_args(&self, new_df: &Path) -> Vec<String> {
        vec![
            "--context".into(),
            self.path("ctx").display().to_string(),
            "--dockerfile-old".into(),
            self.path("Dockerfile").display().to_string(),
            "--dockerfile-new".into(),
            new_df.display().to_string(),
            "--assume-interpreted".into(),
        ]
    }
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layer-inject")).args(args).output().unwrap()
}

fn run_owned(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layer-inject")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn with(head: &[&str], tail: Vec<String>) -> Vec<String> {
    head.iter().map(|s| s.to_string()).chain(tail).collect()
}

#[test]
fn inspect_lists_layers() {
    let ws = Workspace::new();
    let bundle = ws.path("image.tar").display().to_string();
    let o = run(&["inspect", "--bundle", &bundle]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("COPY . .") && text.contains("RUN pip install flask"));

    let o = run(&["inspect", "--bundle", &bundle, "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.is_object() || v.is_array());
}

#[test]
fn plan_then_inject_archive() {
    let ws = Workspace::new();
    let bundle = ws.path("image.tar").display().to_string();
    let df = ws.path("Dockerfile");

    let o = run_owned(&with(&["plan", "--format", "json", "--bundle", &bundle], ws.change_args(&df)));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.to_string().contains("app/app.py"));

    // an archive is never overwritten implicitly
    let o = run_owned(&with(&["inject", "--bundle", &bundle], ws.change_args(&df)));
    assert_eq!(code(&o), 2);

    let out = ws.path("out.tar").display().to_string();
    let o = run_owned(&with(&["inject", "--bundle", &bundle, "--output", &out], ws.change_args(&df)));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&run(&["verify", "--bundle", &out])), 0);

    let injected = load_bundle(Path::new(&out)).unwrap();
    let top = flatten(&injected, injected.layer_count() - 1).unwrap();
    assert_eq!(top.get("app/app.py").unwrap().content, b"print('v2')\n");

    // already up to date
    let o = run_owned(&with(&["inject", "--bundle", &out, "--output", &out], ws.change_args(&df)));
    assert_eq!(code(&o), 0);
}

#[test]
fn inject_into_store() {
    let ws = Workspace::new();
    let store = ws.path("store").display().to_string();
    let o = run_owned(&with(
        &["inject", "--store-root", &store, "--mode", "inplace"],
        ws.change_args(&ws.path("Dockerfile")),
    ));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&run(&["verify", "--store-root", &store])), 0);
    let reopened = open_store(Path::new(&store)).unwrap();
    let top = flatten(&reopened, reopened.layer_count() - 1).unwrap();
    assert_eq!(top.get("app/app.py").unwrap().content, b"print('v2')\n");
}

fn corrupt_store(ws: &Workspace) {
    let image = load_bundle(&ws.path("image.tar")).unwrap();
    let id = &image.layer_order()[1];
    let path = ws.path(&format!("store/{id}/layer.tar"));
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
}

#[test]
fn integrity_failures() {
    let ws = Workspace::new();
    corrupt_store(&ws);
    let store = ws.path("store").display().to_string();
    let o = run(&["verify", "--store-root", &store]);
    assert_eq!(code(&o), 1);
    let o = run_owned(&with(&["inject", "--store-root", &store], ws.change_args(&ws.path("Dockerfile"))));
    assert_eq!(code(&o), 4);
}

#[test]
fn rebuild_required_changes() {
    let ws = Workspace::new();
    let bundle = ws.path("image.tar").display().to_string();
    let out = ws.path("out.tar").display().to_string();
    for edited in [DF.replace("flask", "django"), DF.replace("app.py\"]", "main.py\"]")] {
        let df = ws.path("Dockerfile.new");
        fs::write(&df, edited).unwrap();
        let o = run_owned(&with(&["inject", "--bundle", &bundle, "--output", &out], ws.change_args(&df)));
        assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(!Path::new(&out).exists());
    }
}

#[test]
fn input_errors() {
    let ws = Workspace::new();
    let missing = ws.path("nope.tar").display().to_string();
    assert_eq!(code(&run(&["verify", "--bundle", &missing])), 2);
    assert_eq!(code(&run(&["verify"])), 2);
    let store = ws.path("store").display().to_string();
    let bundle = ws.path("image.tar").display().to_string();
    assert_eq!(code(&run(&["verify", "--bundle", &bundle, "--store-root", &store])), 2);
    assert_eq!(code(&run(&["bench", "--scenario", "nine", "--trials", "2"])), 2);
    let o = run_owned(&with(&["plan", "--bundle", &bundle], ws.change_args(&ws.path("missing.Dockerfile"))));
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.json").display().to_string();
    let o = run(&["bench", "--scenario", "1", "--trials", "5", "--seed", "3", "--format", "json", "--output", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    let s = &v["scenario1"];
    assert_eq!(s["inject"]["n"], 5);
    assert_eq!(s["full_rebuild"]["n"], 5);
    let h = &s["hypothesis"];
    assert!(h["h0"].is_number() && h["z"].is_number() && h["p"].is_number() && h["reject"].is_boolean());
    let stdout: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stdout, v);
}

#[test]
fn inspect_row_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let df = parse_dockerfile("FROM debian:12\nCOPY a.txt /a.txt\nRUN make all\nCMD [\"/a\"]").unwrap();
    let image = builder().build(&df, &tree(&[("a.txt", b"a")])).unwrap();
    let path = save_bundle(&image, &dir.path().join("i.tar")).unwrap();
    let o = run(&["inspect", "--format", "json", "--bundle", &path.display().to_string()]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = v["layers"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r["empty_layer"] == true).count(), 1);
    assert!(rows.iter().filter(|r| r["empty_layer"] == false).all(|r| r["digest"].is_string()));
}
