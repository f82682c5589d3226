//! Command-line front end.
//!
//! Exit codes: 0 success, 1 integrity failure, 2 input error, 3 change not
//! injectable, 4 injection or rewrite failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::bench::{self, ScenarioResult, SCENARIO_NAMES};
use crate::builder::SimCosts;
use crate::bundle::{self, flush_store, load_bundle, open_store, save_bundle, FileTree, ImageBundle};
use crate::digest::{verify_integrity, IntegrityReport};
use crate::dockerfile::{parse_dockerfile, DockerfileModel};
use crate::error::Error;
use crate::injector::{apply_changeset, InjectMode, InjectionReceipt};
use crate::planner::{plan, LayerAction, RebuildPlan, CONFIG_DELEGATED};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INTEGRITY: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NOT_INJECTABLE: u8 = 3;
pub const EXIT_PIPELINE: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Format {
    Json,
    #[default]
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum ModeArg {
    Inplace,
    #[default]
    Clone,
}

impl From<ModeArg> for InjectMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Inplace => InjectMode::InPlace,
            ModeArg::Clone => InjectMode::CloneFirst,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "layer-inject", version, about = "Inject source changes into saved container image layers")]
pub struct Cli {
    /// Output format.
    #[arg(long, value_enum, global = true, default_value_t = Format::Text)]
    pub format: Format,
    /// More diagnostics on stderr.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Source {
    /// Image archive as written by `docker save`.
    #[arg(long, value_name = "PATH")]
    pub bundle: Option<PathBuf>,
    /// Directory with the archive layout unpacked; edited in place.
    #[arg(long, value_name = "DIR")]
    pub store_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Change {
    /// Build context holding the current sources.
    #[arg(long, value_name = "DIR")]
    pub context: PathBuf,
    /// Dockerfile the image was built from.
    #[arg(long, value_name = "PATH")]
    pub dockerfile_old: PathBuf,
    /// Dockerfile to build now (often the same file).
    #[arg(long, value_name = "PATH")]
    pub dockerfile_new: PathBuf,
    /// Sources run as-is (no compile step consumes them), so layers above
    /// the injected one stay valid.
    #[arg(long)]
    pub assume_interpreted: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List the image's history and layers.
    Inspect {
        #[command(flatten)]
        source: Source,
    },
    /// Compare stock caching with injection for a change.
    Plan {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        change: Change,
    },
    /// Inject a change and rewrite the image's checksums.
    Inject {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        change: Change,
        #[arg(long, value_enum, default_value_t = ModeArg::Clone)]
        mode: ModeArg,
        /// Where to write the updated archive (required with --bundle).
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Recompute every layer checksum and compare with the recorded ones.
    Verify {
        #[command(flatten)]
        source: Source,
    },
    /// Time full rebuilds against injection on the built-in scenarios.
    Bench {
        /// scenario1..scenario4 (or 1..4); repeatable; all when omitted.
        #[arg(long, value_name = "NAME")]
        scenario: Vec<String>,
        #[arg(long, default_value_t = 100, value_name = "N")]
        trials: usize,
        #[arg(long, default_value_t = 0, value_name = "N")]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
}

/// A command's outcome: exit code plus what to print.
struct Outcome {
    code: u8,
    stdout: String,
    stderr: String,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Outcome { code: EXIT_OK, stdout, stderr: String::new() }
    }

    fn fail(code: u8, message: impl Into<String>) -> Self {
        Outcome { code, stdout: String::new(), stderr: message.into() }
    }
}

type Step<T> = std::result::Result<T, Outcome>;

fn at(code: u8, context: &str) -> impl Fn(Error) -> Outcome + '_ {
    move |e| Outcome::fail(code, format!("{context}: {e}"))
}

pub fn main() -> ExitCode {
    ExitCode::from(run(Cli::parse()))
}

pub fn run(cli: Cli) -> u8 {
    let format = cli.format;
    let verbose = cli.verbose;
    let outcome = match cli.command {
        Command::Inspect { source } => cmd_inspect(&source, format),
        Command::Plan { source, change } => cmd_plan(&source, &change, format, verbose),
        Command::Inject { source, change, mode, output } => {
            cmd_inject(&source, &change, mode.into(), output.as_deref(), format, verbose)
        }
        Command::Verify { source } => cmd_verify(&source, format),
        Command::Bench { scenario, trials, seed, output } => {
            cmd_bench(&scenario, trials, seed, output.as_deref(), format, verbose)
        }
    };
    let outcome = outcome.unwrap_or_else(|o| o);
    print!("{}", outcome.stdout);
    if !outcome.stderr.is_empty() {
        eprintln!("{}", outcome.stderr.trim_end());
    }
    outcome.code
}

fn load(source: &Source) -> Step<ImageBundle> {
    match (&source.bundle, &source.store_root) {
        (Some(p), _) => load_bundle(p).map_err(at(EXIT_INPUT, &format!("cannot load {}", p.display()))),
        (_, Some(d)) => open_store(d).map_err(at(EXIT_INPUT, &format!("cannot open store {}", d.display()))),
        (None, None) => Err(Outcome::fail(EXIT_INPUT, "one of --bundle or --store-root is required")),
    }
}

fn read_dockerfile(path: &Path, verbose: u8, notes: &mut String) -> Step<DockerfileModel> {
    let text = fs::read_to_string(path)
        .map_err(|e| Outcome::fail(EXIT_INPUT, format!("cannot read {}: {e}", path.display())))?;
    let model = parse_dockerfile(&text).map_err(at(EXIT_INPUT, &path.display().to_string()))?;
    if verbose > 0 {
        for w in &model.warnings {
            let _ = writeln!(notes, "{}: {w}", path.display());
        }
    }
    Ok(model)
}

struct Planned {
    new: DockerfileModel,
    plan: RebuildPlan,
}

fn make_plan(bundle: &ImageBundle, change: &Change, verbose: u8, notes: &mut String) -> Step<Planned> {
    let old = read_dockerfile(&change.dockerfile_old, verbose, notes)?;
    let new = read_dockerfile(&change.dockerfile_new, verbose, notes)?;
    let context = FileTree::from_dir(&change.context).map_err(at(EXIT_INPUT, "cannot read build context"))?;
    let plan = plan(&old, &new, bundle, &context, change.assume_interpreted).map_err(|e| match e {
        Error::MultiContentChange(_) => Outcome::fail(EXIT_NOT_INJECTABLE, format!("not injectable: {e}")),
        other => Outcome::fail(EXIT_INPUT, format!("cannot plan: {other}")),
    })?;
    Ok(Planned { new, plan })
}

fn short(id: &str) -> &str {
    &id[..id.len().min(12)]
}

fn cmd_inspect(source: &Source, format: Format) -> Step<Outcome> {
    let bundle = load(source)?;
    let config = bundle.config();
    let mut rows = Vec::new();
    let mut next = 0;
    let entries: Vec<(String, bool)> = if config.history.is_empty() {
        bundle.layer_order().iter().map(|_| (String::new(), false)).collect()
    } else {
        config.history.iter().map(|h| (h.created_by.clone(), h.empty_layer)).collect()
    };
    for (i, (created_by, empty)) in entries.into_iter().enumerate() {
        let layer = if empty {
            None
        } else {
            next += 1;
            Some(bundle.layer_at(next - 1).map_err(at(EXIT_INPUT, "history does not match layers"))?)
        };
        rows.push(json!({
            "index": i,
            "layer_id": layer.map(|l| l.id.clone()),
            "instruction": created_by,
            "size": layer.map(|l| l.payload().len()),
            "digest": layer.map(|l| l.payload_digest().prefixed()),
            "empty_layer": empty,
        }));
    }
    let out = match format {
        Format::Json => json!({"repo_tags": bundle.manifest()[0].repo_tags, "layers": rows}).to_string() + "\n",
        Format::Text => {
            let mut s = format!("{:>3}  {:<12}  {:>10}  {:<19}  {}\n", "#", "LAYER", "SIZE", "DIGEST", "CREATED BY");
            for r in &rows {
                let id = r["layer_id"].as_str().map_or("<empty>", short);
                let size = r["size"].as_u64().map_or("-".to_string(), |n| n.to_string());
                let digest = r["digest"].as_str().map_or("-", |d| &d[..19]);
                let _ = writeln!(s, "{:>3}  {:<12}  {:>10}  {:<19}  {}", r["index"], id, size, digest, r["instruction"].as_str().unwrap_or(""));
            }
            s
        }
    };
    Ok(Outcome::ok(out))
}

fn render_plan(p: &Planned, format: Format) -> String {
    let plan = &p.plan;
    match format {
        Format::Json => {
            let steps: Vec<_> = p
                .new
                .instructions
                .iter()
                .enumerate()
                .map(|(i, instr)| {
                    json!({
                        "line": instr.line_no,
                        "instruction": instr.to_string(),
                        "layer": plan.layer_slots[i],
                        "invalidated": plan.invalidated[i],
                        "baseline": plan.baseline[i],
                        "injection": plan.actions[i],
                    })
                })
                .collect();
            json!({
                "interpreted": plan.interpreted_mode,
                "noop": plan.is_noop(),
                "injectable": !plan.needs_rebuild(),
                "dropped_instructions": plan.dropped,
                "steps": steps,
            })
            .to_string()
                + "\n"
        }
        Format::Text => {
            let mut s = String::new();
            if plan.is_noop() {
                s.push_str("nothing to do: every layer is reused from cache\n");
                return s;
            }
            let _ = writeln!(s, "{:>4}  {:<40}  {:<28}  WITH INJECTION", "LINE", "INSTRUCTION", "DOCKER CACHE");
            for (i, instr) in p.new.instructions.iter().enumerate() {
                let mut text = instr.to_string();
                if text.chars().count() > 40 {
                    text = text.chars().take(37).collect::<String>() + "...";
                }
                let _ = writeln!(s, "{:>4}  {:<40}  {:<28}  {}", instr.line_no, text, plan.baseline[i].to_string(), plan.actions[i]);
            }
            if plan.dropped > 0 {
                let _ = writeln!(s, "{} instruction(s) removed from the end", plan.dropped);
            }
            if let Some((_, layer, deltas)) = plan.injection() {
                let _ = writeln!(s, "\nlayer {layer}:");
                for d in deltas {
                    let _ = writeln!(s, "  {:<6} {} ({} bytes)", format!("{:?}", d.op).to_lowercase(), d.path, d.content_len());
                }
            }
            s
        }
    }
}

fn not_injectable(plan: &RebuildPlan) -> String {
    let config = plan.actions.iter().any(|a| matches!(a, LayerAction::Rebuild(r) if r == CONFIG_DELEGATED));
    if config {
        "delegating config change — rebuild required".to_string()
    } else {
        "change cannot be injected, rebuild required".to_string()
    }
}

fn cmd_plan(source: &Source, change: &Change, format: Format, verbose: u8) -> Step<Outcome> {
    let bundle = load(source)?;
    let mut notes = String::new();
    let planned = make_plan(&bundle, change, verbose, &mut notes)?;
    let mut out = Outcome::ok(render_plan(&planned, format));
    out.stderr = notes;
    if planned.plan.needs_rebuild() {
        out.code = EXIT_NOT_INJECTABLE;
        let _ = writeln!(out.stderr, "{}", not_injectable(&planned.plan));
    }
    Ok(out)
}

fn render_integrity(report: &IntegrityReport, format: Format) -> String {
    match format {
        Format::Json => json!({"ok": report.all_ok(), "layers": report.rows}).to_string() + "\n",
        Format::Text => {
            let mut s = format!("{:>5}  {:<12}  {:<19}  {:<19}  {}\n", "INDEX", "LAYER", "RECORDED", "ACTUAL", "STATUS");
            for r in &report.rows {
                let index = r.index.map_or("-".into(), |i| i.to_string());
                let recorded = r.recorded.as_ref().map_or("-".to_string(), |d| d.prefixed()[..19].to_string());
                let _ = writeln!(
                    s,
                    "{:>5}  {:<12}  {:<19}  {:<19}  {}",
                    index,
                    short(&r.layer_id),
                    recorded,
                    &r.actual.prefixed()[..19],
                    if r.ok { "ok" } else { "MISMATCH" }
                );
            }
            s
        }
    }
}

fn cmd_verify(source: &Source, format: Format) -> Step<Outcome> {
    let bundle = load(source)?;
    let report = verify_integrity(&bundle);
    let mut out = Outcome::ok(render_integrity(&report, format));
    if !report.all_ok() {
        out.code = EXIT_INTEGRITY;
        out.stderr = "integrity check failed".into();
    }
    Ok(out)
}

fn render_receipt(r: &InjectionReceipt, written: &[PathBuf], format: Format) -> String {
    let written: Vec<String> = written.iter().map(|p| p.display().to_string()).collect();
    match format {
        Format::Json => json!({"receipt": r, "written": written}).to_string() + "\n",
        Format::Text => {
            let mut s = String::new();
            let _ = writeln!(s, "injected {} file(s), {} bytes, into layer {}", r.files_touched, r.bytes_written, r.layer_index);
            let _ = writeln!(s, "layer id   {} -> {}", short(&r.old_layer_id), short(&r.new_layer_id));
            let _ = writeln!(s, "digest     {} -> {}", r.old_digest.prefixed(), r.new_digest.prefixed());
            for (doc, n) in &r.id_rewrites {
                let _ = writeln!(s, "  id       {doc} ({n})");
            }
            for (doc, n) in &r.digest_rewrites.occurrences {
                let _ = writeln!(s, "  checksum {doc} ({n})");
            }
            for w in &written {
                let _ = writeln!(s, "wrote {w}");
            }
            s
        }
    }
}

fn cmd_inject(
    source: &Source,
    change: &Change,
    mode: InjectMode,
    output: Option<&Path>,
    format: Format,
    verbose: u8,
) -> Step<Outcome> {
    if source.bundle.is_some() && output.is_none() {
        return Err(Outcome::fail(EXIT_INPUT, "--output is required with --bundle"));
    }
    let bundle = load(source)?;
    if !verify_integrity(&bundle).all_ok() {
        return Err(Outcome::fail(EXIT_PIPELINE, "input image fails its integrity check; refusing to inject"));
    }
    let mut notes = String::new();
    let planned = make_plan(&bundle, change, verbose, &mut notes)?;
    let plan = &planned.plan;
    if plan.needs_rebuild() {
        let mut o = Outcome::fail(EXIT_NOT_INJECTABLE, not_injectable(plan));
        o.stdout = render_plan(&planned, format);
        return Err(o);
    }
    let Some((_, layer_index, deltas)) = plan.injection() else {
        let mut o = Outcome::ok(match format {
            Format::Json => json!({"receipt": null, "written": []}).to_string() + "\n",
            Format::Text => "nothing to do: every layer is reused from cache\n".into(),
        });
        o.stderr = notes;
        return Ok(o);
    };

    let (mut updated, receipt) =
        apply_changeset(&bundle, layer_index, deltas, mode).map_err(at(EXIT_PIPELINE, "injection failed"))?;
    let report = verify_integrity(&updated);
    if !report.all_ok() {
        let mut o = Outcome::fail(EXIT_PIPELINE, "integrity check failed after injection");
        o.stdout = render_integrity(&report, format);
        return Err(o);
    }

    let mut written = Vec::new();
    if updated.is_store_backed() {
        written.extend(flush_store(&mut updated).map_err(at(EXIT_PIPELINE, "cannot update store"))?);
    }
    if let Some(out_path) = output {
        // A standalone archive carries only what its image references.
        let mut exported = updated.clone();
        exported.prune_retained();
        written.push(save_bundle(&exported, out_path).map_err(at(EXIT_PIPELINE, "cannot write output"))?);
    }
    let mut o = Outcome::ok(render_receipt(&receipt, &written, format));
    o.stderr = notes;
    Ok(o)
}

fn cmd_bench(
    names: &[String],
    trials: usize,
    seed: u64,
    output: Option<&Path>,
    format: Format,
    verbose: u8,
) -> Step<Outcome> {
    if trials == 0 {
        return Err(Outcome::fail(EXIT_INPUT, "--trials must be at least 1"));
    }
    let names: Vec<String> = if names.is_empty() {
        SCENARIO_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        names.to_vec()
    };
    let scenarios = names
        .iter()
        .map(|n| bench::builtin(n))
        .collect::<Result<Vec<_>, _>>()
        .map_err(at(EXIT_INPUT, "unknown scenario"))?;
    let mut results = Vec::new();
    let mut notes = String::new();
    for s in &scenarios {
        if verbose > 0 {
            eprintln!("running {} ({trials} trials)", s.name);
        }
        let samples = bench::run_scenario(s, trials, seed, SimCosts::default())
            .map_err(at(EXIT_INPUT, &format!("{} failed", s.name)))?;
        results.push(ScenarioResult { name: s.name.clone(), h0: s.h0, samples });
    }
    let report = bench::report(&results).map_err(at(EXIT_INPUT, "cannot build report"))?;
    let doc = report.to_json();
    if let Some(path) = output {
        bundle::write_atomic(path, |w| std::io::Write::write_all(w, doc.as_bytes()))
            .map_err(at(EXIT_INPUT, "cannot write report"))?;
        let _ = writeln!(notes, "report written to {}", path.display());
    }
    let mut o = Outcome::ok(match format {
        Format::Json => doc + "\n",
        Format::Text => report.to_text(),
    });
    o.stderr = notes;
    Ok(o)
}
