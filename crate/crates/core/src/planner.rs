//! Cache decisions and rebuild planning.
//!
//! Two plans are produced per Dockerfile revision. The baseline models stock
//! layer caching: the first invalidated instruction and everything after it
//! is rebuilt. The injection plan patches a changed ADD/COPY layer in place
//! and keeps later layers cached when the sources are interpreted.

use std::fmt;

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::bundle::tree::join;
use crate::bundle::{normalize_path, EntryKind, FileTree, ImageBundle};
use crate::dockerfile::{align_layers, DockerfileModel, Instruction, Keyword, LayerAlignment, LayerKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaOp {
    Add,
    Modify,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileDelta {
    pub path: String,
    pub op: DeltaOp,
    /// Absent for deletions. Symlink targets for `kind == Symlink`.
    pub new_content: Option<Vec<u8>>,
    pub kind: EntryKind,
}

impl FileDelta {
    pub fn add(path: impl Into<String>, content: Vec<u8>) -> Self {
        FileDelta {
            path: path.into(),
            op: DeltaOp::Add,
            new_content: Some(content),
            kind: EntryKind::File,
        }
    }

    pub fn modify(path: impl Into<String>, content: Vec<u8>) -> Self {
        FileDelta {
            path: path.into(),
            op: DeltaOp::Modify,
            new_content: Some(content),
            kind: EntryKind::File,
        }
    }

    pub fn delete(path: impl Into<String>) -> Self {
        FileDelta {
            path: path.into(),
            op: DeltaOp::Delete,
            new_content: None,
            kind: EntryKind::File,
        }
    }

    pub fn content_len(&self) -> usize {
        self.new_content.as_ref().map_or(0, Vec::len)
    }
}

impl Serialize for FileDelta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("FileDelta", 3)?;
        st.serialize_field("path", &self.path)?;
        st.serialize_field("op", &self.op)?;
        st.serialize_field("bytes", &self.content_len())?;
        st.end()
    }
}

/// Applies deltas to a tree (the reference semantics injection must match).
pub fn apply_deltas(tree: &mut FileTree, deltas: &[FileDelta]) -> Result<()> {
    for d in deltas {
        match d.op {
            DeltaOp::Delete => {
                tree.remove(&d.path);
            }
            DeltaOp::Add | DeltaOp::Modify => {
                let content = d.new_content.clone().unwrap_or_default();
                let entry = match d.kind {
                    EntryKind::Symlink => crate::bundle::TreeEntry::symlink(content),
                    _ => crate::bundle::TreeEntry::file(content, 0o644),
                };
                tree.insert(&d.path, entry)?;
            }
        }
    }
    Ok(())
}

/// Differences between two trees by content. Directories, modes and
/// timestamps are not compared. Sorted by path.
///
/// Contents are compared byte for byte, which decides the same as comparing
/// their SHA-256 digests without hashing every file.
pub fn diff_tree(old: &FileTree, new: &FileTree) -> Vec<FileDelta> {
    let same = |a: &crate::bundle::TreeEntry, b: &crate::bundle::TreeEntry| a.kind == b.kind && a.content == b.content;
    let mut out = Vec::new();
    for (path, entry) in new.iter().filter(|(_, e)| e.kind != EntryKind::Dir) {
        let op = match old.get(path).filter(|e| e.kind != EntryKind::Dir) {
            None => DeltaOp::Add,
            Some(prev) if !same(prev, entry) => DeltaOp::Modify,
            Some(_) => continue,
        };
        out.push(FileDelta {
            path: path.clone(),
            op,
            new_content: Some(entry.content.clone()),
            kind: entry.kind,
        });
    }
    for (path, entry) in old.iter().filter(|(_, e)| e.kind != EntryKind::Dir) {
        if new.get(path).is_none_or(|e| e.kind == EntryKind::Dir) {
            out.push(FileDelta {
                path: path.clone(),
                op: DeltaOp::Delete,
                new_content: None,
                kind: entry.kind,
            });
        }
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CacheDecision {
    UseCache,
    Invalidate,
}

/// Stock cache check for one instruction. ADD/COPY compare file checksums
/// (timestamps ignored); every other instruction compares its literal text.
pub fn dlc_decision(
    old_instr: &Instruction,
    new_instr: &Instruction,
    old_files: Option<&FileTree>,
    new_files: Option<&FileTree>,
) -> Result<CacheDecision> {
    if !old_instr.same_text(new_instr) {
        return Ok(CacheDecision::Invalidate);
    }
    if new_instr.keyword.copies_files() {
        let (Some(old), Some(new)) = (old_files, new_files) else {
            return Err(Error::MissingContext(new_instr.keyword.to_string()));
        };
        if !diff_tree(old, new).is_empty() {
            return Ok(CacheDecision::Invalidate);
        }
    }
    Ok(CacheDecision::UseCache)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ChangeType {
    ContentChange,
    ConfigChange,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerAction {
    UseCache,
    Inject(Vec<FileDelta>),
    Rebuild(String),
}

impl LayerAction {
    pub fn is_rebuild(&self) -> bool {
        matches!(self, LayerAction::Rebuild(_))
    }

    pub fn label(&self) -> &'static str {
        match self {
            LayerAction::UseCache => "use-cache",
            LayerAction::Inject(_) => "inject",
            LayerAction::Rebuild(_) => "rebuild",
        }
    }
}

impl fmt::Display for LayerAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerAction::UseCache => f.write_str("use cache"),
            LayerAction::Inject(d) => write!(f, "inject {} file(s)", d.len()),
            LayerAction::Rebuild(reason) => write!(f, "rebuild ({reason})"),
        }
    }
}

impl Serialize for LayerAction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("LayerAction", 2)?;
        st.serialize_field("action", self.label())?;
        match self {
            LayerAction::UseCache => st.skip_field("detail")?,
            LayerAction::Inject(d) => st.serialize_field("deltas", d)?,
            LayerAction::Rebuild(r) => st.serialize_field("reason", r)?,
        }
        st.end()
    }
}

pub const CONFIG_DELEGATED: &str = "config — delegate to Docker";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RebuildPlan {
    /// One action per instruction of the new Dockerfile.
    pub actions: Vec<LayerAction>,
    /// Stock caching: `UseCache* Rebuild*`.
    pub baseline: Vec<LayerAction>,
    pub interpreted_mode: bool,
    /// Whether each instruction failed its own cache check.
    pub invalidated: Vec<bool>,
    /// Layer index per instruction, where the instruction has one.
    pub layer_slots: Vec<Option<usize>>,
    /// Trailing instructions of the old Dockerfile that no longer exist.
    pub dropped: usize,
}

impl RebuildPlan {
    /// Nothing changed: every layer is reused and no instruction was removed.
    pub fn is_noop(&self) -> bool {
        self.dropped == 0 && self.actions.iter().chain(&self.baseline).all(|a| *a == LayerAction::UseCache)
    }

    pub fn needs_rebuild(&self) -> bool {
        self.actions.iter().any(LayerAction::is_rebuild)
    }

    /// The single injection in the plan: (instruction index, layer index, deltas).
    pub fn injection(&self) -> Option<(usize, usize, &[FileDelta])> {
        self.actions.iter().enumerate().find_map(|(i, a)| match a {
            LayerAction::Inject(d) => Some((i, self.layer_slots[i]?, d.as_slice())),
            _ => None,
        })
    }
}

/// Working directory in effect before instruction `index`.
pub fn workdir_before(model: &DockerfileModel, index: usize) -> Result<String> {
    let mut wd = String::new();
    for instr in model.instructions.iter().take(index) {
        if instr.keyword == Keyword::Workdir {
            let arg = instr.arguments.trim().trim_matches('"');
            wd = if arg.starts_with('/') {
                normalize_path(arg)?
            } else {
                join(&wd, arg)?
            };
        }
    }
    Ok(wd)
}

fn copy_operands(instr: &Instruction) -> Result<(Vec<String>, String)> {
    let unsupported = |reason: &str| Error::UnsupportedSyntax {
        line: instr.line_no,
        reason: reason.to_string(),
    };
    let args = instr.arguments.trim();
    let mut tokens: Vec<String> = if args.starts_with('[') {
        serde_json::from_str(args).map_err(|_| unsupported("malformed JSON operand list"))?
    } else {
        args.split_whitespace()
            .skip_while(|t| t.starts_with("--"))
            .map(str::to_string)
            .collect()
    };
    if tokens.len() < 2 {
        return Err(unsupported("ADD/COPY needs a source and a destination"));
    }
    let dst = tokens.pop().unwrap();
    for src in &tokens {
        if src.contains(['*', '?', '[']) {
            return Err(unsupported("wildcard sources are not supported"));
        }
        if src.contains("://") {
            return Err(unsupported("remote ADD sources are not supported"));
        }
    }
    Ok((tokens, dst))
}

/// Resolves an ADD/COPY against the build context: the files it places in
/// the image, keyed by image path. Sources are literal paths; `.` is the
/// whole context.
pub fn resolve_copy(instr: &Instruction, context: &FileTree, workdir: &str) -> Result<FileTree> {
    let (srcs, dst) = copy_operands(instr)?;
    let dst_norm = if dst.starts_with('/') {
        normalize_path(&dst)?
    } else {
        join(workdir, &dst)?
    };
    let dst_is_dir = dst.ends_with('/') || dst == "." || srcs.len() > 1;

    let mut out = FileTree::new();
    for src in &srcs {
        let src_norm = normalize_path(src)?;
        let entry = context.get(&src_norm).filter(|e| e.kind != EntryKind::Dir);
        if entry.is_none() {
            let below = context.subtree(&src_norm);
            if below.is_empty() && !context.contains(&src_norm) {
                return Err(Error::PathNotFound(src.clone()));
            }
            for (rel, entry) in below.iter() {
                out.insert_normalized(join(&dst_norm, rel)?, entry.clone());
            }
        } else if let Some(entry) = entry {
            let target = if dst_is_dir {
                let base = src_norm.rsplit('/').next().unwrap_or(&src_norm);
                join(&dst_norm, base)?
            } else {
                dst_norm.clone()
            };
            if target.is_empty() {
                return Err(Error::InvalidPath(dst.clone()));
            }
            out.insert_normalized(target, entry.clone());
        }
    }
    Ok(out)
}

struct Evaluation {
    alignment: LayerAlignment,
    divergence: usize,
    dropped: usize,
    invalidated: Vec<bool>,
    deltas: Vec<Option<Vec<FileDelta>>>,
}

/// Runs the stock cache check on every instruction of `new_df`.
fn evaluate(
    old_df: &DockerfileModel,
    new_df: &DockerfileModel,
    bundle: &ImageBundle,
    context: &FileTree,
) -> Result<Evaluation> {
    let alignment = align_layers(old_df, bundle)?;
    let old = &old_df.instructions;
    let new = &new_df.instructions;
    let n = new.len();

    // Instructions added, removed or swapped for another keyword: nothing
    // from here on can be matched against an existing layer.
    let divergence = (0..n)
        .find(|&i| i >= old.len() || old[i].keyword != new[i].keyword)
        .unwrap_or(n);
    let dropped = old.len().saturating_sub(n.max(divergence));

    let mut invalidated = vec![true; n];
    let mut deltas: Vec<Option<Vec<FileDelta>>> = vec![None; n];
    for i in 0..divergence {
        let (files_old, files_new) = if new[i].keyword.copies_files() {
            let layer_index = alignment.layer_of(i).ok_or_else(|| {
                Error::AlignmentMismatch(format!("line {}: no layer for {}", old[i].line_no, old[i].keyword))
            })?;
            let layer_tree = bundle.layer_at(layer_index)?.tree()?;
            let resolved = resolve_copy(&new[i], context, &workdir_before(new_df, i)?)?;
            (Some(layer_tree), Some(resolved))
        } else {
            (None, None)
        };
        let decision = dlc_decision(&old[i], &new[i], files_old.as_ref(), files_new.as_ref())?;
        invalidated[i] = decision == CacheDecision::Invalidate;
        if invalidated[i] && old[i].same_text(&new[i]) {
            if let (Some(o), Some(n)) = (&files_old, &files_new) {
                deltas[i] = Some(diff_tree(o, n));
            }
        }
    }
    Ok(Evaluation {
        alignment,
        divergence,
        dropped,
        invalidated,
        deltas,
    })
}

fn baseline_actions(new_df: &DockerfileModel, invalidated: &[bool]) -> Vec<LayerAction> {
    let new = &new_df.instructions;
    let n = new.len();
    let first_invalid = invalidated.iter().position(|&x| x).unwrap_or(n);
    (0..n)
        .map(|i| {
            if i < first_invalid {
                LayerAction::UseCache
            } else if i == first_invalid {
                LayerAction::Rebuild(format!("cache invalidated at line {}", new[i].line_no))
            } else {
                LayerAction::Rebuild(format!("falls through from line {}", new[first_invalid].line_no))
            }
        })
        .collect()
}

/// Stock caching alone: every instruction from the first cache miss on is
/// rebuilt. Defined for any change, injectable or not.
pub fn baseline_plan(
    old_df: &DockerfileModel,
    new_df: &DockerfileModel,
    bundle: &ImageBundle,
    context: &FileTree,
) -> Result<Vec<LayerAction>> {
    let eval = evaluate(old_df, new_df, bundle, context)?;
    Ok(baseline_actions(new_df, &eval.invalidated))
}

/// Plans the rebuild of `bundle` (built from `old_df`) for `new_df` and the
/// current build context.
pub fn plan(
    old_df: &DockerfileModel,
    new_df: &DockerfileModel,
    bundle: &ImageBundle,
    context: &FileTree,
    interpreted_mode: bool,
) -> Result<RebuildPlan> {
    let Evaluation {
        alignment,
        divergence,
        dropped,
        invalidated,
        mut deltas,
    } = evaluate(old_df, new_df, bundle, context)?;
    let new = &new_df.instructions;
    let n = new.len();
    let baseline = baseline_actions(new_df, &invalidated);

    let mut actions = Vec::with_capacity(n);
    let mut injected: Vec<usize> = Vec::new();
    let mut delegated: Option<usize> = None;
    for i in 0..n {
        let action = if i >= divergence {
            delegated.get_or_insert(i);
            LayerAction::Rebuild("instruction added or replaced".into())
        } else if let Some(from) = delegated {
            LayerAction::Rebuild(format!("falls through from line {}", new[from].line_no))
        } else if invalidated[i] {
            match deltas[i].take() {
                Some(d) if !d.is_empty() => {
                    injected.push(i);
                    LayerAction::Inject(d)
                }
                _ => {
                    delegated = Some(i);
                    if new[i].kind == LayerKind::Configuration {
                        LayerAction::Rebuild(CONFIG_DELEGATED.into())
                    } else {
                        LayerAction::Rebuild(format!("{} changed", new[i].keyword))
                    }
                }
            }
        } else if !injected.is_empty() && !interpreted_mode && new[i].keyword == Keyword::Run {
            LayerAction::Rebuild("depends on injected sources (not interpreted)".into())
        } else {
            LayerAction::UseCache
        };
        actions.push(action);
    }
    if injected.len() > 1 {
        return Err(Error::MultiContentChange(injected));
    }

    let layer_slots = (0..n)
        .map(|i| if i < divergence { alignment.layer_of(i) } else { None })
        .collect();

    Ok(RebuildPlan {
        actions,
        baseline,
        interpreted_mode,
        invalidated,
        layer_slots,
        dropped,
    })
}

/// Type of the change at an invalidated instruction.
pub fn classify_change(action_index: usize, plan: &RebuildPlan, model: &DockerfileModel) -> Result<ChangeType> {
    if !plan.invalidated.get(action_index).copied().unwrap_or(false) {
        return Err(Error::NotInvalidated(action_index));
    }
    let instr = &model.instructions[action_index];
    match instr.kind {
        LayerKind::Configuration => Ok(ChangeType::ConfigChange),
        LayerKind::Content if instr.keyword.copies_files() => Ok(ChangeType::ContentChange),
        LayerKind::Content => Err(Error::OperationChange {
            index: action_index,
            keyword: instr.keyword.to_string(),
        }),
    }
}
