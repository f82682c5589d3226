//! Writing file changes directly into an existing layer.
//!
//! The layer's tar payload is edited member by member: untouched members are
//! copied byte for byte, modified files keep their original header (mode,
//! owner, timestamps) with a new size and checksum, new files are appended.
//! The changed payload digest is then rewritten wherever the image records it.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::bundle::{DocumentRef, EntryKind, ImageBundle, LayerRecord, TreeEntry};
use crate::digest::{replace_token, rewrite_digest, rewrite_token, sha256, Digest, RewriteReport};
use crate::error::{Error, Result};
use crate::planner::{DeltaOp, FileDelta};
use crate::tarball::{self, MemberKind, BLOCK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectMode {
    /// Patch the layer under its existing id.
    InPlace,
    /// Patch a copy under a new id and re-point the image at it. The
    /// original stays in the bundle for anything else that references it.
    #[default]
    CloneFirst,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InjectionReceipt {
    pub mode: InjectMode,
    pub layer_index: usize,
    pub old_layer_id: String,
    pub new_layer_id: String,
    pub old_digest: Digest,
    pub new_digest: Digest,
    pub files_touched: usize,
    pub bytes_written: usize,
    /// Documents whose layer id references were re-pointed.
    pub id_rewrites: Vec<(String, usize)>,
    pub digest_rewrites: RewriteReport,
}

/// Id for a patched copy of a layer: sha256 over the old id followed by the
/// new payload digest, both as lowercase hex text.
pub fn derive_layer_id(old_id: &str, payload_digest: &Digest) -> String {
    sha256(format!("{old_id}{}", payload_digest.hex()).as_bytes()).hex().to_string()
}

fn new_entry(delta: &FileDelta) -> TreeEntry {
    let content = delta.new_content.clone().unwrap_or_default();
    match delta.kind {
        EntryKind::Symlink => TreeEntry::symlink(content),
        _ => TreeEntry::file(content, 0o644),
    }
}

/// Applies `deltas` to a layer payload. Empty deltas return the layer as is.
pub fn inject_files(layer: &LayerRecord, deltas: &[FileDelta]) -> Result<LayerRecord> {
    if deltas.is_empty() {
        return Ok(layer.clone());
    }
    let payload = layer.payload();
    let scan = tarball::scan(payload).map_err(|_| Error::CorruptPayload(layer.id.clone()))?;

    let present: BTreeMap<&str, MemberKind> = scan
        .members
        .iter()
        .map(|m| (m.path.as_str(), m.kind))
        .collect();
    let mut changes: BTreeMap<&str, &FileDelta> = BTreeMap::new();
    let mut adds: Vec<&FileDelta> = Vec::new();
    for d in deltas {
        match (d.op, present.get(d.path.as_str())) {
            (DeltaOp::Add, Some(_)) => return Err(Error::PathExists(d.path.clone())),
            (DeltaOp::Add, None) => adds.push(d),
            (_, None | Some(MemberKind::Dir)) => return Err(Error::PathNotFound(d.path.clone())),
            (_, Some(_)) => {
                changes.insert(&d.path, d);
            }
        }
    }

    let mut out = Vec::with_capacity(payload.len() + deltas.iter().map(|d| d.content_len() + 2 * BLOCK).sum::<usize>());
    for m in &scan.members {
        let Some(delta) = changes.get(m.path.as_str()) else {
            out.extend_from_slice(&payload[m.span.clone()]);
            continue;
        };
        if delta.op == DeltaOp::Delete {
            continue;
        }
        let content = delta.new_content.as_deref().unwrap_or_default();
        // Extension records before the header may carry their own size; only
        // GNU long names are safe to keep verbatim.
        let plain_prefix = payload[m.span.start..m.header_at]
            .chunks(BLOCK)
            .next()
            .is_none_or(|h| h[156] == b'L');
        if m.kind == MemberKind::File && delta.kind == EntryKind::File && plain_prefix {
            out.extend_from_slice(&payload[m.span.start..m.header_at]);
            out.extend_from_slice(&tarball::resized_header(payload, m, content.len() as u64));
            out.extend_from_slice(content);
            out.resize(tarball::padded(out.len()), 0);
        } else {
            let mode = (m.kind == MemberKind::File).then_some(m.mode);
            out.extend_from_slice(&tarball::encode_member(&m.path, &new_entry(delta), mode));
        }
    }

    let dirs: BTreeSet<&str> = scan
        .members
        .iter()
        .filter(|m| m.kind == MemberKind::Dir)
        .map(|m| m.path.as_str())
        .collect();
    let mut created: BTreeSet<String> = BTreeSet::new();
    for d in adds {
        let mut parent = String::new();
        let segments: Vec<&str> = d.path.split('/').collect();
        for seg in &segments[..segments.len() - 1] {
            if !parent.is_empty() {
                parent.push('/');
            }
            parent.push_str(seg);
            if !dirs.contains(parent.as_str()) && created.insert(parent.clone()) {
                out.extend_from_slice(&tarball::encode_member(&parent, &TreeEntry::dir(0o755), None));
            }
        }
        out.extend_from_slice(&tarball::encode_member(&d.path, &new_entry(d), None));
    }

    let trailer = &payload[scan.trailer_at..];
    out.extend_from_slice(trailer);
    if trailer.len() < 2 * BLOCK {
        out.resize(out.len() + 2 * BLOCK - trailer.len(), 0);
    }
    Ok(layer.with_payload(out))
}

fn copy_under_id(layer: &LayerRecord, new_id: &str) -> Result<LayerRecord> {
    let (metadata, _) = replace_token(layer.metadata_raw(), &layer.id, new_id);
    let mut copy = LayerRecord::new(new_id.to_string(), metadata, layer.payload_arc())?;
    copy.version = layer.version.clone();
    Ok(copy)
}

/// Adds a byte-identical copy of a layer under a fresh id. Nothing points at
/// the copy yet.
pub fn clone_layer(bundle: &ImageBundle, layer_id: &str) -> Result<(ImageBundle, String)> {
    let layer = bundle
        .layer(layer_id)
        .ok_or_else(|| Error::UnknownLayer(layer_id.to_string()))?;
    let new_id = derive_layer_id(layer_id, layer.payload_digest());
    if bundle.layer(&new_id).is_some() {
        return Err(Error::InvalidPlan(format!("layer {new_id} already exists")));
    }
    let mut out = bundle.clone();
    out.insert_layer(copy_under_id(layer, &new_id)?);
    Ok((out, new_id))
}

fn ensure_unshared_digest(bundle: &ImageBundle, index: usize, digest: &Digest) -> Result<()> {
    let shared = bundle
        .config()
        .diff_ids
        .iter()
        .enumerate()
        .any(|(i, d)| i != index && d == digest);
    if shared {
        return Err(Error::InvalidPlan(format!(
            "layer {index} shares its digest {} with another layer",
            digest.short()
        )));
    }
    Ok(())
}

/// Injects `deltas` into the layer at `layer_index` and rewrites every
/// recorded checksum so the image verifies again.
pub fn apply_changeset(
    bundle: &ImageBundle,
    layer_index: usize,
    deltas: &[FileDelta],
    mode: InjectMode,
) -> Result<(ImageBundle, InjectionReceipt)> {
    if deltas.is_empty() {
        return Err(Error::InvalidPlan("nothing to inject".into()));
    }
    let old = bundle.layer_at(layer_index)?;
    let old_digest = old.payload_digest().clone();
    ensure_unshared_digest(bundle, layer_index, &old_digest)?;
    let patched = inject_files(old, deltas)?;
    let new_digest = patched.payload_digest().clone();
    if new_digest == old_digest {
        return Err(Error::InvalidPlan("deltas leave the layer unchanged".into()));
    }

    let mut out = bundle.clone();
    let (new_id, id_rewrites) = match mode {
        InjectMode::InPlace => {
            out.replace_layer(patched)?;
            (old.id.clone(), Vec::new())
        }
        InjectMode::CloneFirst => {
            let new_id = derive_layer_id(&old.id, &new_digest);
            out.insert_layer(copy_under_id(&patched, &new_id)?);
            let docs: Vec<DocumentRef> = out
                .live_documents()
                .into_iter()
                .filter(|d| *d != DocumentRef::LayerMetadata(old.id.clone()))
                .collect();
            let hits = rewrite_token(&mut out, docs, &old.id, &new_id)?;
            if out.layer_order().get(layer_index) != Some(&new_id) {
                return Err(Error::RewriteMiss(old.id.clone()));
            }
            (new_id, hits)
        }
    };
    let (out, digest_rewrites) = rewrite_digest(&out, &old_digest, &new_digest)?;

    let layer = out.layer_at(layer_index)?;
    let recorded = &out.config().diff_ids[layer_index];
    if recorded != layer.payload_digest() || layer.metadata.checksum.as_ref().is_some_and(|c| c != recorded) {
        return Err(Error::RewriteMiss(old_digest.to_string()));
    }

    let receipt = InjectionReceipt {
        mode,
        layer_index,
        old_layer_id: old.id.clone(),
        new_layer_id: new_id,
        old_digest,
        new_digest,
        files_touched: deltas.len(),
        bytes_written: deltas.iter().map(FileDelta::content_len).sum(),
        id_rewrites,
        digest_rewrites,
    };
    Ok((out, receipt))
}

/// Swaps the whole payload of a layer (a re-run instruction) under its
/// existing id and rewrites its checksum.
pub fn replace_layer_payload(
    bundle: &ImageBundle,
    layer_index: usize,
    payload: Vec<u8>,
) -> Result<(ImageBundle, Option<RewriteReport>)> {
    let old = bundle.layer_at(layer_index)?;
    let next = old.with_payload(payload);
    if next.payload_digest() == old.payload_digest() {
        return Ok((bundle.clone(), None));
    }
    ensure_unshared_digest(bundle, layer_index, old.payload_digest())?;
    let old_digest = old.payload_digest().clone();
    let new_digest = next.payload_digest().clone();
    let mut out = bundle.clone();
    out.replace_layer(next)?;
    let (out, report) = rewrite_digest(&out, &old_digest, &new_digest)?;
    Ok((out, Some(report)))
}
