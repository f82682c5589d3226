//! Browser demo. Every export takes plain strings and returns a JSON string,
//! `{"error": ...}` on failure.

use layer_inject::bench::{hypothesis_test, inject_path};
use layer_inject::builder::{SimCosts, SimulatedBuilder};
use layer_inject::bundle::{flatten, FileTree, ImageBundle};
use layer_inject::digest::verify_integrity;
use layer_inject::dockerfile::{parse_dockerfile, DockerfileModel};
use layer_inject::injector::InjectMode;
use layer_inject::planner::plan;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

type Out = Result<Value, String>;

fn render(r: Out) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

/// Parses `{"path": "content", ...}`.
fn files(raw: &str) -> Result<FileTree, String> {
    let map: serde_json::Map<String, Value> = serde_json::from_str(raw).map_err(|e| format!("files: {e}"))?;
    let mut t = FileTree::new();
    for (path, content) in map {
        let text = content.as_str().ok_or_else(|| format!("{path}: content must be a string"))?;
        t.insert_file(&path, text.as_bytes().to_vec()).map_err(|e| e.to_string())?;
    }
    Ok(t)
}

fn builder() -> SimulatedBuilder {
    SimulatedBuilder {
        costs: SimCosts::NONE,
        dep_layer_size: 2048,
        repo_tag: "demo:latest".into(),
        ..SimulatedBuilder::default()
    }
}

struct Setup {
    old_df: DockerfileModel,
    new_df: DockerfileModel,
    image: ImageBundle,
    context: FileTree,
}

fn setup(old_df: &str, new_df: &str, old_files: &str, new_files: &str) -> Result<Setup, String> {
    let old = parse_dockerfile(old_df).map_err(|e| format!("old Dockerfile: {e}"))?;
    let new = parse_dockerfile(new_df).map_err(|e| format!("new Dockerfile: {e}"))?;
    let image = builder().build(&old, &files(old_files)?).map_err(|e| e.to_string())?;
    Ok(Setup {
        old_df: old,
        new_df: new,
        image,
        context: files(new_files)?,
    })
}

fn plan_json(old_df: &str, new_df: &str, old_files: &str, new_files: &str, interpreted: bool) -> Out {
    let s = setup(old_df, new_df, old_files, new_files)?;
    let p = plan(&s.old_df, &s.new_df, &s.image, &s.context, interpreted).map_err(|e| e.to_string())?;
    let rows: Vec<Value> = s
        .new_df
        .instructions
        .iter()
        .enumerate()
        .map(|(i, instr)| {
            json!({
                "line": instr.line_no,
                "instruction": instr.to_string(),
                "baseline": p.baseline[i].label(),
                "inject": p.actions[i],
            })
        })
        .collect();
    let count = |a: &[layer_inject::planner::LayerAction]| a.iter().filter(|x| x.is_rebuild()).count();
    Ok(json!({
        "rows": rows,
        "noop": p.is_noop(),
        "rebuilt_baseline": count(&p.baseline),
        "rebuilt_inject": count(&p.actions),
        "dropped": p.dropped,
    }))
}

/// Stock caching and injection side by side for a Dockerfile/context edit.
#[wasm_bindgen]
pub fn plan_demo(old_dockerfile: &str, new_dockerfile: &str, old_files: &str, new_files: &str, interpreted: bool) -> String {
    render(plan_json(old_dockerfile, new_dockerfile, old_files, new_files, interpreted))
}

fn inject_json(dockerfile: &str, old_files: &str, new_files: &str, interpreted: bool, clone: bool) -> Out {
    let s = setup(dockerfile, dockerfile, old_files, new_files)?;
    let mode = if clone { InjectMode::CloneFirst } else { InjectMode::InPlace };
    let (bundle, receipt) =
        inject_path(&builder(), &s.image, &s.old_df, &s.new_df, &s.context, interpreted, mode).map_err(|e| e.to_string())?;
    let Some(receipt) = receipt else {
        return Ok(json!({ "receipt": null, "note": "nothing to do" }));
    };
    let report = verify_integrity(&bundle);
    let top = flatten(&bundle, bundle.layer_count() - 1).map_err(|e| e.to_string())?;
    let tree: Vec<Value> = top
        .contents()
        .into_iter()
        .filter(|(p, _)| !p.starts_with("opt/deps/") && !p.starts_with("var/log/"))
        .map(|(p, c)| json!({ "path": p, "bytes": c.len() }))
        .collect();
    Ok(json!({
        "receipt": receipt,
        "integrity": report,
        "files": tree,
    }))
}

/// Injects the edit into the image and reports the checksum rewrite.
#[wasm_bindgen]
pub fn inject_demo(dockerfile: &str, old_files: &str, new_files: &str, interpreted: bool, clone: bool) -> String {
    render(inject_json(dockerfile, old_files, new_files, interpreted, clone))
}

fn hypothesis_json(samples: &str, h0: f64) -> Out {
    let xs = samples
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t}")))
        .collect::<Result<Vec<_>, _>>()?;
    let r = hypothesis_test(&xs, h0).map_err(|e| e.to_string())?;
    serde_json::to_value(r).map_err(|e| e.to_string())
}

/// One-sided z test that mean speedup exceeds `h0`; samples are comma or
/// whitespace separated.
#[wasm_bindgen]
pub fn hypothesis(samples: &str, h0: f64) -> String {
    render(hypothesis_json(samples, h0))
}
