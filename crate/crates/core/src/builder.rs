//! A daemon-free image builder.
//!
//! Produces save-format bundles from a Dockerfile and a build context so that
//! fixtures and the full-rebuild baseline need no container runtime. `FROM`
//! yields one synthetic base layer. `COPY`/`ADD` archive the resolved context
//! files. A `RUN` that invokes a Java compiler writes a `.class` file for
//! every `.java` source below the working directory; any other `RUN` is an
//! install step producing `dep_layer_size` bytes of seeded pseudo-random
//! payload. Sleeps stand in for per-step and per-command overhead.

use std::time::Duration;

use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use serde_json::{json, Value};

use crate::bundle::{apply_layer, FileTree, ImageBundle, LayerRecord, RawManifestEntry, TreeEntry};
use crate::digest::{sha256, sha256_bytes, Digest};
use crate::dockerfile::{DockerfileModel, Instruction, Keyword, LayerKind};
use crate::error::{Error, Result};
use crate::planner::{resolve_copy, workdir_before};
use crate::tarball;

const EPOCH: &str = "1970-01-01T00:00:00Z";
const DEP_CHUNK: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimCosts {
    /// Every instruction that is executed rather than taken from cache.
    pub per_step: Duration,
    /// Every install `RUN`.
    pub per_run: Duration,
    /// Every compile `RUN`.
    pub per_compile: Duration,
}

/// Sleeps for a simulated cost; zero costs never touch the clock, so
/// cost-free builds also run where threads cannot sleep.
pub(crate) fn pause(d: Duration) {
    if !d.is_zero() {
        std::thread::sleep(d);
    }
}

impl SimCosts {
    pub const NONE: SimCosts = SimCosts {
        per_step: Duration::ZERO,
        per_run: Duration::ZERO,
        per_compile: Duration::ZERO,
    };
}

impl Default for SimCosts {
    fn default() -> Self {
        SimCosts {
            per_step: Duration::from_millis(1),
            per_run: Duration::from_millis(10),
            per_compile: Duration::from_millis(20),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedBuilder {
    pub costs: SimCosts,
    pub seed: u64,
    pub dep_layer_size: usize,
    pub repo_tag: String,
}

impl Default for SimulatedBuilder {
    fn default() -> Self {
        SimulatedBuilder {
            costs: SimCosts::NONE,
            seed: 0,
            dep_layer_size: 4096,
            repo_tag: "app:latest".into(),
        }
    }
}

pub fn is_compile(command: &str) -> bool {
    command
        .split(|c: char| c.is_whitespace() || c == ';' || c == '&' || c == '|')
        .any(|w| matches!(w.rsplit('/').next(), Some("javac" | "mvn" | "gradle")))
}

fn with_parents(files: FileTree) -> FileTree {
    let mut out = FileTree::new();
    for (path, entry) in files.iter() {
        let mut acc = String::new();
        let segments: Vec<&str> = path.split('/').collect();
        for seg in &segments[..segments.len() - 1] {
            if !acc.is_empty() {
                acc.push('/');
            }
            acc.push_str(seg);
            if !out.contains(&acc) && !files.contains(&acc) {
                out.insert_normalized(acc.clone(), TreeEntry::dir(0o755));
            }
        }
        out.insert_normalized(path.clone(), entry.clone());
    }
    out
}

fn chain_id(parent: Option<&str>, diff_id: &Digest) -> String {
    match parent {
        Some(p) => sha256(format!("{p} {}", diff_id.prefixed()).as_bytes()).hex().to_string(),
        None => sha256(diff_id.prefixed().as_bytes()).hex().to_string(),
    }
}

fn metadata(id: &str, parent: Option<&str>, checksum: &Digest) -> Vec<u8> {
    let mut doc = json!({"id": id, "checksum": checksum.prefixed(), "created": EPOCH});
    if let Some(p) = parent {
        doc["parent"] = Value::from(p);
    }
    serde_json::to_vec(&doc).expect("json")
}

impl SimulatedBuilder {
    pub fn build(&self, df: &DockerfileModel, context: &FileTree) -> Result<ImageBundle> {
        self.assemble(df, context, None)
    }

    /// Rebuilds with the layers of instructions before `from` taken from
    /// `cached` (an image this builder produced from a Dockerfile that agrees
    /// with `df` up to `from`); everything from `from` on is executed again.
    pub fn rebuild(&self, cached: &ImageBundle, df: &DockerfileModel, context: &FileTree, from: usize) -> Result<ImageBundle> {
        self.assemble(df, context, Some((cached, from)))
    }

    /// Files a `FROM` places in the image.
    pub fn base_tree(&self, image: &str) -> FileTree {
        let mut t = FileTree::new();
        t.insert_normalized("etc/os-release".into(), TreeEntry::file(format!("NAME={image}\n").into_bytes(), 0o644));
        t.insert_normalized("bin/sh".into(), TreeEntry::file(sha256_bytes(image.as_bytes()).to_vec(), 0o755));
        with_parents(t)
    }

    /// Files a `RUN` adds on top of `below`.
    pub fn run_tree(&self, instr: &Instruction, below: &FileTree, workdir: &str) -> Result<FileTree> {
        let command = instr.arguments.as_str();
        let digest = sha256(command.as_bytes());
        let tag = &digest.hex()[..12];
        let mut out = FileTree::new();
        if is_compile(command) {
            pause(self.costs.per_compile);
            let prefix = if workdir.is_empty() { String::new() } else { format!("{workdir}/") };
            for (path, entry) in below.iter() {
                let Some(stem) = path.strip_suffix(".java") else { continue };
                if !path.starts_with(&prefix) || entry.kind != crate::bundle::EntryKind::File {
                    continue;
                }
                let mut class = vec![0xca, 0xfe, 0xba, 0xbe];
                class.extend_from_slice(&sha256_bytes(&entry.content));
                class.extend_from_slice(&(entry.content.len() as u64).to_be_bytes());
                out.insert_normalized(format!("{stem}.class"), TreeEntry::file(class, 0o644));
            }
        } else {
            pause(self.costs.per_run);
            let mut seed = [0u8; 8];
            seed.copy_from_slice(&sha256_bytes(command.as_bytes())[..8]);
            let mut rng = StdRng::seed_from_u64(self.seed ^ u64::from_le_bytes(seed));
            let mut left = self.dep_layer_size;
            let mut part = 0;
            while left > 0 {
                let n = left.min(DEP_CHUNK);
                let mut chunk = vec![0u8; n];
                rng.fill_bytes(&mut chunk);
                out.insert_normalized(format!("opt/deps/{tag}/part-{part:04}.bin"), TreeEntry::file(chunk, 0o644));
                left -= n;
                part += 1;
            }
            out.insert_normalized(format!("var/log/run-{tag}.log"), TreeEntry::file(format!("{command}\n").into_bytes(), 0o644));
        }
        Ok(with_parents(out))
    }

    /// Layer payload a `RUN` produces on top of `below`.
    pub fn run_payload(&self, instr: &Instruction, below: &FileTree, workdir: &str) -> Result<Vec<u8>> {
        Ok(tarball::encode_tree(&self.run_tree(instr, below, workdir)?))
    }

    fn assemble(&self, df: &DockerfileModel, context: &FileTree, cached: Option<(&ImageBundle, usize)>) -> Result<ImageBundle> {
        let instrs = &df.instructions;
        match instrs.first() {
            Some(i) if i.keyword == Keyword::From => {}
            _ => return Err(Error::InvalidPlan("Dockerfile must start with FROM".into())),
        }
        let mut layers: Vec<LayerRecord> = Vec::new();
        let mut history = vec![json!({"created": EPOCH, "created_by": format!("base image {}", instrs[0].arguments)})];
        let mut env: Vec<String> = Vec::new();
        let mut config = serde_json::Map::new();

        for (i, instr) in instrs.iter().enumerate() {
            if i > 0 {
                let mut h = json!({"created": EPOCH, "created_by": instr.to_string()});
                if instr.kind == LayerKind::Configuration {
                    h["empty_layer"] = Value::Bool(true);
                }
                history.push(h);
            }
            if instr.kind == LayerKind::Configuration {
                let args = instr.arguments.clone();
                match instr.keyword {
                    Keyword::Env => env.push(args.replacen(' ', "=", usize::from(!args.contains('=')))),
                    Keyword::Cmd => {
                        config.insert("Cmd".into(), Value::from(args));
                    }
                    Keyword::Entrypoint => {
                        config.insert("Entrypoint".into(), Value::from(args));
                    }
                    Keyword::Workdir => {
                        config.insert("WorkingDir".into(), Value::from(format!("/{}", workdir_before(df, i + 1)?)));
                    }
                    _ => {}
                }
                continue;
            }

            let slot = layers.len();
            let parent = layers.last().map(|l| l.id.clone());
            if let Some((c, from)) = cached {
                if i < from {
                    let layer = c.layer_at(slot)?.clone();
                    layers.push(layer);
                    continue;
                }
            }
            pause(self.costs.per_step);
            let tree = match instr.keyword {
                Keyword::From => self.base_tree(&instr.arguments),
                Keyword::Run => {
                    let mut below = FileTree::new();
                    if is_compile(&instr.arguments) {
                        for l in &layers {
                            apply_layer(&mut below, l)?;
                        }
                    }
                    self.run_tree(instr, &below, &workdir_before(df, i)?)?
                }
                _ => with_parents(resolve_copy(instr, context, &workdir_before(df, i)?)?),
            };
            let payload = tarball::encode_tree(&tree);
            let diff_id = sha256(&payload);
            let id = chain_id(parent.as_deref(), &diff_id);
            let meta = metadata(&id, parent.as_deref(), &diff_id);
            layers.push(LayerRecord::new(id, meta, payload)?);
        }

        if !env.is_empty() {
            config.insert("Env".into(), Value::from(env));
        }
        let diff_ids: Vec<String> = layers.iter().map(|l| l.payload_digest().prefixed()).collect();
        let config_doc = json!({
            "architecture": "amd64",
            "os": "linux",
            "created": EPOCH,
            "config": config,
            "history": history,
            "rootfs": {"type": "layers", "diff_ids": diff_ids},
        });
        let config_raw = serde_json::to_vec(&config_doc).expect("json");
        let config_path = format!("{}.json", sha256(&config_raw).hex());
        let manifest = vec![RawManifestEntry {
            config: config_path,
            repo_tags: Some(vec![self.repo_tag.clone()]),
            layers: layers.iter().map(LayerRecord::payload_path).collect(),
        }];
        let manifest_raw = serde_json::to_vec(&manifest).expect("json");
        let (repo, tag) = self.repo_tag.rsplit_once(':').unwrap_or((&self.repo_tag, "latest"));
        let top = layers.last().map(|l| l.id.clone()).unwrap_or_default();
        let mut tags = serde_json::Map::new();
        tags.insert(tag.to_string(), Value::from(top));
        let mut repos = serde_json::Map::new();
        repos.insert(repo.to_string(), Value::Object(tags));
        let repositories = serde_json::to_vec(&repos).expect("json");
        ImageBundle::from_parts(manifest_raw, config_raw, Some(repositories), layers)
    }
}

/// Index of the layer an instruction of a builder-produced image maps to.
pub fn layer_slot(df: &DockerfileModel, instruction: usize) -> Option<usize> {
    let instr = df.instructions.get(instruction)?;
    (instr.kind == LayerKind::Content).then(|| {
        df.instructions[..instruction]
            .iter()
            .filter(|i| i.kind == LayerKind::Content)
            .count()
    })
}
