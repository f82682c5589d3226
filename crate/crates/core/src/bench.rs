//! Full rebuild vs. injection timings and the speedup hypothesis test.
//!
//! Each scenario builds its fixture image once, then times both ways of
//! getting from the old image to one that reflects a source change:
//! re-executing every instruction from the first cache miss onward, or
//! planning and injecting the change into the existing layer. Methods
//! alternate within a trial so drift affects both equally.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::builder::{SimCosts, SimulatedBuilder};
use crate::bundle::{flatten, FileTree, ImageBundle};
use crate::dockerfile::{parse_dockerfile, DockerfileModel, Keyword};
use crate::error::{Error, Result};
use crate::injector::{apply_changeset, replace_layer_payload, InjectMode, InjectionReceipt};
use crate::planner::{apply_deltas, plan, workdir_before, FileDelta, LayerAction};

pub const SIGNIFICANCE: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FullRebuild,
    Inject,
}

impl Method {
    pub fn key(self) -> &'static str {
        match self {
            Method::FullRebuild => "full_rebuild",
            Method::Inject => "inject",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialSample {
    pub method: Method,
    /// Seconds on a monotonic clock.
    pub duration: f64,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub dockerfile: String,
    pub project: FileTree,
    /// Edits to the project, context-relative.
    pub change: Vec<FileDelta>,
    pub interpreted: bool,
    pub dep_layer_size: usize,
    /// Hypothesized mean speedup for the test.
    pub h0: f64,
}

impl Scenario {
    pub fn changed_project(&self) -> Result<FileTree> {
        let mut t = self.project.clone();
        apply_deltas(&mut t, &self.change)?;
        Ok(t)
    }
}

fn text_file(lines: impl IntoIterator<Item = String>) -> Vec<u8> {
    let mut s = String::new();
    for l in lines {
        s.push_str(&l);
        s.push('\n');
    }
    s.into_bytes()
}

fn pseudo_jar(len: usize, salt: u8) -> Vec<u8> {
    let mut out = b"PK\x03\x04".to_vec();
    let mut x: u32 = 0x9e37_79b9 ^ u32::from(salt);
    while out.len() < len {
        x ^= x << 13;
        x ^= x >> 17;
        x ^= x << 5;
        out.push(x as u8);
    }
    out
}

pub const SCENARIO_NAMES: [&str; 4] = ["scenario1", "scenario2", "scenario3", "scenario4"];

/// The built-in scenarios. `"2"` and `"scenario2"` name the same one.
pub fn builtin(name: &str) -> Result<Scenario> {
    let key = name.strip_prefix("scenario").unwrap_or(name);
    let file = |p: &str, c: Vec<u8>| {
        let mut t = FileTree::new();
        t.insert_file(p, c).map(|_| t)
    };
    let s = match key {
        "1" => Scenario {
            name: "scenario1".into(),
            dockerfile: "FROM python:3.12-alpine\nWORKDIR /app\nCOPY app.py .\nCMD [\"python\", \"app.py\"]\n".into(),
            project: file("app.py", b"print('hello')\n".to_vec())?,
            change: vec![FileDelta::modify("app.py", b"print('hello')\nprint('world')\n".to_vec())],
            interpreted: true,
            dep_layer_size: 0,
            h0: 2.0,
        },
        "2" => {
            let main: Vec<String> = (0..200).map(|i| format!("def f{i}(x):\n    return x + {i}")).collect();
            let mut project = file("main.py", text_file(main.clone()))?;
            project.insert_file("requirements.txt", b"numpy\npandas\ntorch\n".to_vec())?;
            for m in 0..8 {
                project.insert_file(&format!("pkg/mod{m}.py"), text_file((0..50).map(|i| format!("V{i} = {}", i * m))))?;
            }
            let appended = main.into_iter().chain((0..1000).map(|i| format!("print(f{}({i}))", i % 200)));
            Scenario {
                name: "scenario2".into(),
                dockerfile: "FROM python:3.12-slim\nWORKDIR /app\nCOPY . .\nRUN pip install -r requirements.txt\nCMD [\"python\", \"main.py\"]\n".into(),
                project,
                change: vec![FileDelta::modify("main.py", text_file(appended))],
                interpreted: true,
                dep_layer_size: 100 << 20,
                h0: 10.0,
            }
        }
        "3" => Scenario {
            name: "scenario3".into(),
            dockerfile: "FROM eclipse-temurin:17-jre\nWORKDIR /app\nCOPY app.jar .\nRUN java -Xshare:dump -jar app.jar\nCMD [\"java\", \"-jar\", \"app.jar\"]\n".into(),
            project: file("app.jar", pseudo_jar(2 << 20, 1))?,
            change: vec![FileDelta::modify("app.jar", pseudo_jar(2 << 20, 2))],
            interpreted: true,
            dep_layer_size: 1 << 20,
            h0: 1.0,
        },
        "4" => {
            let src = |body: &str| format!("public class Main {{\n  public static void main(String[] a) {{\n    {body}\n  }}\n}}\n").into_bytes();
            let mut project = file("src/Main.java", src("System.out.println(1);"))?;
            project.insert_file("src/Util.java", b"class Util { static int two() { return 2; } }\n".to_vec())?;
            Scenario {
                name: "scenario4".into(),
                dockerfile: "FROM ubuntu:22.04\nRUN apt-get update && apt-get install -y openjdk-17-jdk-headless\nWORKDIR /app\nCOPY src/ src/\nRUN javac -d . src/Main.java src/Util.java\nCMD [\"java\", \"Main\"]\n".into(),
                project,
                change: vec![FileDelta::modify("src/Main.java", src("System.out.println(Util.two());"))],
                interpreted: false,
                dep_layer_size: 8 << 20,
                h0: 0.7,
            }
        }
        _ => return Err(Error::UnknownScenario(name.to_string())),
    };
    Ok(s)
}

/// Baseline: re-executes every instruction from the first cache miss on.
pub fn full_rebuild_path(
    builder: &SimulatedBuilder,
    fixture: &ImageBundle,
    old_df: &DockerfileModel,
    new_df: &DockerfileModel,
    context: &FileTree,
) -> Result<ImageBundle> {
    let p = plan(old_df, new_df, fixture, context, true)?;
    match p.baseline.iter().position(LayerAction::is_rebuild) {
        Some(from) => builder.rebuild(fixture, new_df, context, from),
        None => Ok(fixture.clone()),
    }
}

/// Injection: plan, inject, and for compiled sources re-run the compile
/// steps above the injected layer.
pub fn inject_path(
    builder: &SimulatedBuilder,
    fixture: &ImageBundle,
    old_df: &DockerfileModel,
    new_df: &DockerfileModel,
    context: &FileTree,
    interpreted: bool,
    mode: InjectMode,
) -> Result<(ImageBundle, Option<InjectionReceipt>)> {
    let p = plan(old_df, new_df, fixture, context, interpreted)?;
    let Some((inject_at, layer_index, deltas)) = p.injection() else {
        if p.needs_rebuild() {
            return Err(Error::InvalidPlan("change cannot be injected".into()));
        }
        return Ok((fixture.clone(), None));
    };
    let (mut bundle, receipt) = apply_changeset(fixture, layer_index, deltas, mode)?;
    for (i, action) in p.actions.iter().enumerate() {
        if !action.is_rebuild() {
            continue;
        }
        let instr = &new_df.instructions[i];
        let slot = p.layer_slots[i];
        let (true, Keyword::Run, Some(slot)) = (i > inject_at && !p.invalidated[i], &instr.keyword, slot) else {
            return Err(Error::InvalidPlan(format!("line {} needs a full rebuild", instr.line_no)));
        };
        crate::builder::pause(builder.costs.per_step);
        let below = flatten(&bundle, slot - 1)?;
        let payload = builder.run_payload(instr, &below, &workdir_before(new_df, i)?)?;
        bundle = replace_layer_payload(&bundle, slot, payload)?.0;
    }
    Ok((bundle, Some(receipt)))
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE))
}

/// Builds the scenario's fixture once and times both methods `trials` times.
pub fn run_scenario(s: &Scenario, trials: usize, seed: u64, costs: SimCosts) -> Result<Vec<TrialSample>> {
    if trials == 0 {
        return Err(Error::InvalidPlan("at least one trial is required".into()));
    }
    let builder = SimulatedBuilder {
        costs,
        seed,
        dep_layer_size: s.dep_layer_size,
        repo_tag: format!("{}:latest", s.name),
    };
    let df = parse_dockerfile(&s.dockerfile)?;
    let fixture = SimulatedBuilder { costs: SimCosts::NONE, ..builder.clone() }.build(&df, &s.project)?;
    let context = s.changed_project()?;

    let mut samples = Vec::with_capacity(2 * trials);
    for t in 0..trials {
        let full = || timed(|| full_rebuild_path(&builder, &fixture, &df, &df, &context));
        let inject = || timed(|| inject_path(&builder, &fixture, &df, &df, &context, s.interpreted, InjectMode::CloneFirst));
        let (f, i) = if t % 2 == 0 {
            let f = full()?;
            (f, inject()?)
        } else {
            let i = inject()?;
            (full()?, i)
        };
        samples.push(TrialSample { method: Method::FullRebuild, duration: f });
        samples.push(TrialSample { method: Method::Inject, duration: i });
    }
    Ok(samples)
}

fn durations(samples: &[TrialSample], method: Method) -> Vec<f64> {
    samples.iter().filter(|s| s.method == method).map(|s| s.duration).collect()
}

/// Per-trial ratios full rebuild / inject, paired by trial order.
pub fn speedup_samples(samples: &[TrialSample]) -> Result<Vec<f64>> {
    let full = durations(samples, Method::FullRebuild);
    let inject = durations(samples, Method::Inject);
    if full.len() != inject.len() {
        return Err(Error::MethodCountMismatch {
            full: full.len(),
            inject: inject.len(),
        });
    }
    Ok(full.iter().zip(&inject).map(|(f, i)| f / i).collect())
}

/// Mean and sample standard deviation (n - 1 denominator).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HypothesisResult {
    pub h0: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub z: f64,
    pub p: f64,
    pub reject: bool,
}

/// One-sided z test of mean <= h0 against mean > h0. `p` is the upper tail
/// of the standard normal at z.
pub fn hypothesis_test(samples: &[f64], h0: f64) -> Result<HypothesisResult> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::DegenerateSample(format!("{n} sample(s)")));
    }
    let (mean, std) = mean_std(samples);
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::DegenerateSample(format!("standard deviation {std}")));
    }
    let z = (mean - h0) / (std / (n as f64).sqrt());
    let p = 0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2);
    Ok(HypothesisResult {
        h0,
        mean,
        std,
        n,
        z,
        p,
        reject: p < SIGNIFICANCE,
    })
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub name: String,
    pub h0: f64,
    pub samples: Vec<TrialSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodStats {
    pub mean_s: f64,
    pub std_s: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpeedupStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HypothesisSummary {
    pub h0: f64,
    pub z: f64,
    pub p: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Machine {
    pub os: &'static str,
    pub arch: &'static str,
    pub cpus: usize,
}

impl Machine {
    pub fn current() -> Self {
        Machine {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioBlock {
    #[serde(flatten)]
    pub methods: BTreeMap<&'static str, MethodStats>,
    pub speedup: SpeedupStats,
    /// Absent when the speedups cannot be tested (fewer than two trials or
    /// no spread).
    pub hypothesis: Option<HypothesisSummary>,
    pub machine: Machine,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct BenchReport {
    pub scenarios: BTreeMap<String, ScenarioBlock>,
}

pub fn report(results: &[ScenarioResult]) -> Result<BenchReport> {
    if results.is_empty() {
        return Err(Error::EmptyReport);
    }
    let mut scenarios = BTreeMap::new();
    for r in results {
        let mut methods = BTreeMap::new();
        for m in [Method::FullRebuild, Method::Inject] {
            let d = durations(&r.samples, m);
            let (mean_s, std_s) = mean_std(&d);
            methods.insert(m.key(), MethodStats { mean_s, std_s, n: d.len() });
        }
        let ratios = speedup_samples(&r.samples)?;
        let (mean, std) = mean_std(&ratios);
        let hypothesis = hypothesis_test(&ratios, r.h0).ok().map(|h| HypothesisSummary {
            h0: h.h0,
            z: h.z,
            p: h.p,
            reject: h.reject,
        });
        scenarios.insert(
            r.name.clone(),
            ScenarioBlock {
                methods,
                speedup: SpeedupStats { mean, std },
                hypothesis,
                machine: Machine::current(),
            },
        );
    }
    Ok(BenchReport { scenarios })
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("json")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>14} {:>14} {:>14} {:>14} {:>10} {:>8} {:>10} {:>10} {:>7}",
            "scenario", "full mean s", "full std s", "inject mean s", "inject std s", "speedup", "H0", "z", "p", "reject"
        );
        for (name, b) in &self.scenarios {
            let full = b.methods["full_rebuild"];
            let inj = b.methods["inject"];
            let (h0, z, p, reject) = match &b.hypothesis {
                Some(h) => (format!("{}", h.h0), format!("{:.2}", h.z), format!("{:.2e}", h.p), h.reject.to_string()),
                None => ("-".into(), "-".into(), "-".into(), "-".into()),
            };
            let _ = writeln!(
                out,
                "{:<12} {:>14.6} {:>14.6} {:>14.6} {:>14.6} {:>10.2} {:>8} {:>10} {:>10} {:>7}",
                name, full.mean_s, full.std_s, inj.mean_s, inj.std_s, b.speedup.mean, h0, z, p, reject
            );
        }
        out
    }
}
