//! In-memory model of a `docker save` archive.
//!
//! Layout:
//!
//! ```text
//! manifest.json        [{"Config": "<hex>.json", "RepoTags": [...], "Layers": ["<id>/layer.tar", ...]}]
//! repositories         {"repo": {"tag": "<top layer id>"}}
//! <hex>.json           image config (history, rootfs.diff_ids)
//! <id>/VERSION         "1.0"
//! <id>/json            layer metadata (id, parent, checksum)
//! <id>/layer.tar       uncompressed layer payload
//! ```
//!
//! JSON documents are kept as raw bytes next to their parsed view. Edits go
//! through [`ImageBundle::set_document`], which swaps the bytes and re-parses,
//! so unmodified documents re-serialize byte-for-byte.

mod store;
pub mod tree;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use self::store::{flush_store, open_store};
pub use self::tree::{normalize_path, EntryKind, FileTree, TreeEntry};
pub use crate::digest::Digest;
use crate::digest::sha256;
use crate::error::{Error, Result};
use crate::tarball;

pub const MANIFEST_PATH: &str = "manifest.json";
pub const REPOSITORIES_PATH: &str = "repositories";
pub const LAYER_VERSION: &str = "1.0";
pub const WHITEOUT_PREFIX: &str = ".wh.";
pub const OPAQUE_WHITEOUT: &str = ".wh..wh..opq";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub config_path: String,
    pub repo_tags: Vec<String>,
    pub layer_paths: Vec<String>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct RawManifestEntry {
    #[serde(rename = "Config")]
    pub config: String,
    #[serde(rename = "RepoTags")]
    pub repo_tags: Option<Vec<String>>,
    #[serde(rename = "Layers")]
    pub layers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    pub created_by: String,
    pub empty_layer: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageConfig {
    pub architecture: String,
    pub history: Vec<HistoryEntry>,
    pub diff_ids: Vec<Digest>,
    raw: Vec<u8>,
}

impl ImageConfig {
    pub fn parse(path: &str, raw: Vec<u8>) -> Result<Self> {
        let doc: Value = serde_json::from_slice(&raw).map_err(|e| Error::json(path, e))?;
        let malformed = |reason: &str| Error::MalformedJson {
            path: path.to_string(),
            reason: reason.to_string(),
        };
        let architecture = doc
            .get("architecture")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let history = match doc.get("history") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(items)) => items
                .iter()
                .map(|h| HistoryEntry {
                    created_by: h
                        .get("created_by")
                        .and_then(Value::as_str)
                        .unwrap_or_default()
                        .to_string(),
                    empty_layer: h.get("empty_layer").and_then(Value::as_bool).unwrap_or(false),
                })
                .collect(),
            Some(_) => return Err(malformed("history is not an array")),
        };
        let diff_ids = doc
            .pointer("/rootfs/diff_ids")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("missing rootfs.diff_ids"))?
            .iter()
            .map(|v| {
                v.as_str()
                    .ok_or_else(|| malformed("diff_id is not a string"))
                    .and_then(Digest::parse)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageConfig {
            architecture,
            history,
            diff_ids,
            raw,
        })
    }

    pub fn raw(&self) -> &[u8] {
        &self.raw
    }

    pub fn non_empty_history(&self) -> usize {
        self.history.iter().filter(|h| !h.empty_layer).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMetadata {
    pub id: Option<String>,
    pub parent: Option<String>,
    pub checksum: Option<Digest>,
}

impl LayerMetadata {
    fn parse(path: &str, raw: &[u8]) -> Result<Self> {
        let doc: Value = serde_json::from_slice(raw).map_err(|e| Error::json(path, e))?;
        let field = |k: &str| doc.get(k).and_then(Value::as_str).map(str::to_string);
        let checksum = field("checksum").map(|s| Digest::parse(&s)).transpose()?;
        Ok(LayerMetadata {
            id: field("id"),
            parent: field("parent"),
            checksum,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRecord {
    pub id: String,
    pub version: String,
    pub metadata: LayerMetadata,
    metadata_raw: Vec<u8>,
    payload: Arc<[u8]>,
    payload_digest: Digest,
}

impl LayerRecord {
    pub fn new(id: String, metadata_raw: Vec<u8>, payload: impl Into<Arc<[u8]>>) -> Result<Self> {
        let payload = payload.into();
        let metadata = LayerMetadata::parse(&format!("{id}/json"), &metadata_raw)?;
        let payload_digest = sha256(&payload);
        Ok(LayerRecord {
            id,
            version: LAYER_VERSION.to_string(),
            metadata,
            metadata_raw,
            payload,
            payload_digest,
        })
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub(crate) fn payload_arc(&self) -> Arc<[u8]> {
        self.payload.clone()
    }

    pub fn payload_digest(&self) -> &Digest {
        &self.payload_digest
    }

    pub fn metadata_raw(&self) -> &[u8] {
        &self.metadata_raw
    }

    pub fn with_payload(&self, payload: Vec<u8>) -> LayerRecord {
        LayerRecord {
            payload_digest: sha256(&payload),
            payload: payload.into(),
            ..self.clone()
        }
    }

    pub(crate) fn set_metadata_raw(&mut self, raw: Vec<u8>) -> Result<()> {
        self.metadata = LayerMetadata::parse(&format!("{}/json", self.id), &raw)?;
        self.metadata_raw = raw;
        Ok(())
    }

    /// The files this layer itself carries (no lower layers, whiteouts kept).
    pub fn tree(&self) -> Result<FileTree> {
        tarball::layer_tree(&self.payload).map_err(|_| Error::CorruptPayload(self.id.clone()))
    }

    pub fn payload_path(&self) -> String {
        format!("{}/layer.tar", self.id)
    }
}

/// A JSON document of the image that may carry digests or layer ids.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum DocumentRef {
    Manifest,
    Repositories,
    Config,
    LayerMetadata(String),
}

#[derive(Debug, Clone)]
pub struct ImageBundle {
    manifest: Vec<ManifestEntry>,
    manifest_raw: Vec<u8>,
    config_path: String,
    config: ImageConfig,
    repositories: Option<BTreeMap<String, BTreeMap<String, String>>>,
    repositories_raw: Option<Vec<u8>>,
    layers: BTreeMap<String, LayerRecord>,
    layer_order: Vec<String>,
    extras: BTreeMap<String, Vec<u8>>,
    store: Option<store::StoreLink>,
}

/// Structural equality; where a bundle was loaded from is not part of it.
impl PartialEq for ImageBundle {
    fn eq(&self, other: &Self) -> bool {
        self.manifest == other.manifest
            && self.manifest_raw == other.manifest_raw
            && self.config_path == other.config_path
            && self.config == other.config
            && self.repositories_raw == other.repositories_raw
            && self.layers == other.layers
            && self.layer_order == other.layer_order
            && self.extras == other.extras
    }
}

fn parse_manifest(raw: &[u8]) -> Result<Vec<ManifestEntry>> {
    let entries: Vec<RawManifestEntry> =
        serde_json::from_slice(raw).map_err(|e| Error::json(MANIFEST_PATH, e))?;
    Ok(entries
        .into_iter()
        .map(|e| ManifestEntry {
            config_path: e.config,
            repo_tags: e.repo_tags.unwrap_or_default(),
            layer_paths: e.layers,
        })
        .collect())
}

fn layer_id_of(path: &str) -> Result<String> {
    let norm = normalize_path(path)?;
    match norm.rsplit_once('/') {
        Some((dir, "layer.tar")) if !dir.contains('/') => Ok(dir.to_string()),
        _ => Err(Error::DanglingLayerPointer(path.to_string())),
    }
}

impl ImageBundle {
    /// Assembles a bundle from archive members (path -> bytes) and checks
    /// every structural invariant.
    pub(crate) fn from_members(mut members: BTreeMap<String, Vec<u8>>) -> Result<Self> {
        let manifest_raw = members.remove(MANIFEST_PATH).ok_or(Error::MissingManifest)?;
        let manifest = parse_manifest(&manifest_raw)?;
        let first = manifest
            .first()
            .ok_or_else(|| Error::InconsistentConfig("manifest lists no images".into()))?
            .clone();
        let config_path = normalize_path(&first.config_path)?;
        let config_raw = members
            .remove(&config_path)
            .ok_or_else(|| Error::MalformedJson {
                path: config_path.clone(),
                reason: "config document missing from archive".into(),
            })?;
        let config = ImageConfig::parse(&config_path, config_raw)?;

        let repositories_raw = members.remove(REPOSITORIES_PATH);
        let repositories = repositories_raw
            .as_deref()
            .map(|raw| serde_json::from_slice(raw).map_err(|e| Error::json(REPOSITORIES_PATH, e)))
            .transpose()?;

        // Referenced layers first: missing pieces are hard errors for them.
        let mut layers = BTreeMap::new();
        let mut referenced: Vec<String> = Vec::new();
        for entry in &manifest {
            for p in &entry.layer_paths {
                let id = layer_id_of(p)?;
                if !members.contains_key(&format!("{id}/layer.tar")) {
                    return Err(Error::DanglingLayerPointer(p.clone()));
                }
                if !referenced.contains(&id) {
                    referenced.push(id);
                }
            }
        }
        // Retained layers: any other directory holding a complete layer.
        let retained: Vec<String> = members
            .keys()
            .filter_map(|k| k.strip_suffix("/layer.tar"))
            .filter(|d| !d.contains('/') && !referenced.iter().any(|r| r == d))
            .filter(|d| {
                members.contains_key(&format!("{d}/VERSION"))
                    && members.contains_key(&format!("{d}/json"))
            })
            .map(str::to_string)
            .collect();
        for id in referenced.iter().chain(&retained) {
            let version_raw = members
                .remove(&format!("{id}/VERSION"))
                .ok_or_else(|| Error::BadVersionMarker(id.clone()))?;
            let version = String::from_utf8(version_raw)
                .map_err(|_| Error::BadVersionMarker(id.clone()))?;
            if version.trim_end() != LAYER_VERSION {
                return Err(Error::BadVersionMarker(id.clone()));
            }
            let meta_path = format!("{id}/json");
            let metadata_raw = members.remove(&meta_path).ok_or_else(|| Error::MalformedJson {
                path: meta_path.clone(),
                reason: "layer metadata missing".into(),
            })?;
            let payload = members.remove(&format!("{id}/layer.tar")).unwrap();
            let mut record = LayerRecord::new(id.clone(), metadata_raw, payload)?;
            record.version = version;
            layers.insert(id.clone(), record);
        }

        let layer_order = first
            .layer_paths
            .iter()
            .map(|p| layer_id_of(p))
            .collect::<Result<Vec<_>>>()?;

        let bundle = ImageBundle {
            manifest,
            manifest_raw,
            config_path,
            config,
            repositories,
            repositories_raw,
            layers,
            layer_order,
            extras: members,
            store: None,
        };
        bundle.check()?;
        Ok(bundle)
    }

    fn check(&self) -> Result<()> {
        let first = &self.manifest[0];
        for entry in &self.manifest {
            if !entry.config_path.ends_with(".json") {
                return Err(Error::InconsistentConfig(format!(
                    "config path {} does not end in .json",
                    entry.config_path
                )));
            }
            if entry.layer_paths.is_empty() {
                return Err(Error::InconsistentConfig("manifest entry lists no layers".into()));
            }
            if entry.config_path != first.config_path || entry.layer_paths != first.layer_paths {
                return Err(Error::InconsistentConfig(
                    "archives holding more than one image are not supported".into(),
                ));
            }
        }
        for id in &self.layer_order {
            if !self.layers.contains_key(id) {
                return Err(Error::DanglingLayerPointer(format!("{id}/layer.tar")));
            }
        }
        let non_empty = self.config.non_empty_history();
        let diff_ids = self.config.diff_ids.len();
        if diff_ids != self.layer_order.len() || (!self.config.history.is_empty() && non_empty != diff_ids) {
            return Err(Error::InconsistentConfig(format!(
                "{non_empty} non-empty history entries, {diff_ids} diff_ids, {} layers",
                self.layer_order.len()
            )));
        }
        Ok(())
    }

    /// Builds a bundle from freshly generated documents and layers. Payloads
    /// are shared with the given records, not copied or re-hashed.
    pub fn from_parts(
        manifest_raw: Vec<u8>,
        config_raw: Vec<u8>,
        repositories_raw: Option<Vec<u8>>,
        layers: Vec<LayerRecord>,
    ) -> Result<Self> {
        let manifest = parse_manifest(&manifest_raw)?;
        let first = manifest
            .first()
            .ok_or_else(|| Error::InconsistentConfig("manifest lists no images".into()))?;
        let config_path = normalize_path(&first.config_path)?;
        let config = ImageConfig::parse(&config_path, config_raw)?;
        let repositories = repositories_raw
            .as_deref()
            .map(|raw| serde_json::from_slice(raw).map_err(|e| Error::json(REPOSITORIES_PATH, e)))
            .transpose()?;
        let layer_order = first
            .layer_paths
            .iter()
            .map(|p| layer_id_of(p))
            .collect::<Result<Vec<_>>>()?;
        let bundle = ImageBundle {
            manifest_raw,
            config_path,
            config,
            repositories,
            repositories_raw,
            layers: layers.into_iter().map(|l| (l.id.clone(), l)).collect(),
            layer_order,
            extras: BTreeMap::new(),
            store: None,
            manifest,
        };
        bundle.check()?;
        Ok(bundle)
    }

    pub fn manifest(&self) -> &[ManifestEntry] {
        &self.manifest
    }

    pub fn config(&self) -> &ImageConfig {
        &self.config
    }

    pub fn config_path(&self) -> &str {
        &self.config_path
    }

    pub fn repositories(&self) -> Option<&BTreeMap<String, BTreeMap<String, String>>> {
        self.repositories.as_ref()
    }

    pub fn layers(&self) -> &BTreeMap<String, LayerRecord> {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&LayerRecord> {
        self.layers.get(id)
    }

    /// Layer ids of the image, base first.
    pub fn layer_order(&self) -> &[String] {
        &self.layer_order
    }

    pub fn layer_count(&self) -> usize {
        self.layer_order.len()
    }

    pub fn layer_at(&self, index: usize) -> Result<&LayerRecord> {
        self.layer_order
            .get(index)
            .map(|id| &self.layers[id])
            .ok_or(Error::LayerIndexOutOfRange {
                index,
                count: self.layer_order.len(),
            })
    }

    /// Layers kept in the bundle that the image no longer references, such as
    /// the original of a cloned layer.
    pub fn retained_layers(&self) -> impl Iterator<Item = &LayerRecord> {
        self.layers
            .values()
            .filter(|l| !self.layer_order.contains(&l.id))
    }

    /// Drops retained layers, leaving only what the image references.
    pub fn prune_retained(&mut self) {
        let live = self.layer_order.clone();
        self.layers.retain(|id, _| live.contains(id));
    }

    pub fn is_store_backed(&self) -> bool {
        self.store.is_some()
    }

    /// Documents belonging to the image: manifest, repositories, config and
    /// the metadata of every referenced layer.
    pub fn live_documents(&self) -> Vec<DocumentRef> {
        let mut docs = vec![DocumentRef::Manifest];
        if self.repositories_raw.is_some() {
            docs.push(DocumentRef::Repositories);
        }
        docs.push(DocumentRef::Config);
        docs.extend(self.layer_order.iter().cloned().map(DocumentRef::LayerMetadata));
        docs
    }

    pub fn document_path(&self, doc: &DocumentRef) -> String {
        match doc {
            DocumentRef::Manifest => MANIFEST_PATH.to_string(),
            DocumentRef::Repositories => REPOSITORIES_PATH.to_string(),
            DocumentRef::Config => self.config_path.clone(),
            DocumentRef::LayerMetadata(id) => format!("{id}/json"),
        }
    }

    pub fn document(&self, doc: &DocumentRef) -> Option<&[u8]> {
        match doc {
            DocumentRef::Manifest => Some(&self.manifest_raw),
            DocumentRef::Repositories => self.repositories_raw.as_deref(),
            DocumentRef::Config => Some(self.config.raw()),
            DocumentRef::LayerMetadata(id) => self.layers.get(id).map(|l| l.metadata_raw()),
        }
    }

    /// Replaces a document's bytes and re-derives its parsed view. The bundle
    /// is left untouched if the new bytes do not parse or break an invariant.
    pub fn set_document(&mut self, doc: &DocumentRef, raw: Vec<u8>) -> Result<()> {
        let mut next = self.clone();
        match doc {
            DocumentRef::Manifest => {
                next.manifest = parse_manifest(&raw)?;
                let first = next.manifest.first().ok_or_else(|| {
                    Error::InconsistentConfig("manifest lists no images".into())
                })?;
                next.config_path = normalize_path(&first.config_path)?;
                if next.config_path != self.config_path {
                    return Err(Error::InconsistentConfig("config path cannot be re-pointed".into()));
                }
                next.layer_order = first
                    .layer_paths
                    .iter()
                    .map(|p| layer_id_of(p))
                    .collect::<Result<_>>()?;
                next.manifest_raw = raw;
            }
            DocumentRef::Repositories => {
                next.repositories = Some(
                    serde_json::from_slice(&raw).map_err(|e| Error::json(REPOSITORIES_PATH, e))?,
                );
                next.repositories_raw = Some(raw);
            }
            DocumentRef::Config => {
                next.config = ImageConfig::parse(&self.config_path, raw)?;
            }
            DocumentRef::LayerMetadata(id) => {
                next.layers
                    .get_mut(id)
                    .ok_or_else(|| Error::UnknownLayer(id.clone()))?
                    .set_metadata_raw(raw)?;
            }
        }
        next.check()?;
        *self = next;
        Ok(())
    }

    pub(crate) fn insert_layer(&mut self, record: LayerRecord) {
        self.layers.insert(record.id.clone(), record);
    }

    /// Swaps the payload of an existing layer, keeping its id and metadata.
    pub(crate) fn replace_layer(&mut self, record: LayerRecord) -> Result<()> {
        match self.layers.get_mut(&record.id) {
            Some(slot) => {
                *slot = record;
                Ok(())
            }
            None => Err(Error::UnknownLayer(record.id)),
        }
    }

    /// All archive members as (path, bytes), sorted by path.
    pub(crate) fn members(&self) -> Vec<(String, &[u8])> {
        let mut out: Vec<(String, &[u8])> = Vec::new();
        out.push((MANIFEST_PATH.to_string(), &self.manifest_raw));
        if let Some(r) = &self.repositories_raw {
            out.push((REPOSITORIES_PATH.to_string(), r));
        }
        out.push((self.config_path.clone(), self.config.raw()));
        for l in self.layers.values() {
            out.push((format!("{}/VERSION", l.id), l.version.as_bytes()));
            out.push((format!("{}/json", l.id), &l.metadata_raw));
            out.push((l.payload_path(), &l.payload));
        }
        for (p, b) in &self.extras {
            out.push((p.clone(), b));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Serializes the bundle as an archive. Members appear in lexicographic
    /// path order, each directory right before its contents.
    pub fn write_archive<W: Write>(&self, out: W) -> std::io::Result<W> {
        let members = self.members();
        let mut dirs: Vec<String> = Vec::new();
        for (path, _) in &members {
            let mut acc = String::new();
            for seg in path.split('/').collect::<Vec<_>>().split_last().unwrap().1 {
                if !acc.is_empty() {
                    acc.push('/');
                }
                acc.push_str(seg);
                dirs.push(acc.clone());
            }
        }
        dirs.sort();
        dirs.dedup();

        let mut entries: Vec<(String, Option<&[u8]>)> = members
            .into_iter()
            .map(|(p, b)| (p, Some(b)))
            .chain(dirs.into_iter().map(|d| (format!("{d}/"), None)))
            .collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));

        let mut builder = tar::Builder::new(out);
        for (path, body) in entries {
            let mut header = tar::Header::new_gnu();
            header.set_mtime(0);
            header.set_uid(0);
            header.set_gid(0);
            match body {
                Some(bytes) => {
                    header.set_entry_type(tar::EntryType::Regular);
                    header.set_mode(0o644);
                    header.set_size(bytes.len() as u64);
                    builder.append_data(&mut header, &path, bytes)?;
                }
                None => {
                    header.set_entry_type(tar::EntryType::Directory);
                    header.set_mode(0o755);
                    header.set_size(0);
                    builder.append_data(&mut header, &path, std::io::empty())?;
                }
            }
        }
        builder.into_inner()
    }

    pub fn to_archive_bytes(&self) -> Vec<u8> {
        self.write_archive(Vec::new()).expect("in-memory archive")
    }
}

/// Reads a `docker save` archive.
pub fn load_bundle(archive_path: &Path) -> Result<ImageBundle> {
    let file = File::open(archive_path).map_err(|e| Error::io(archive_path, e))?;
    read_bundle(BufReader::new(file)).map_err(|e| match e {
        Error::IoFailure { source, .. } => Error::io(archive_path, source),
        other => other,
    })
}

pub fn read_bundle<R: std::io::Read>(reader: R) -> Result<ImageBundle> {
    let io_err = |e| Error::io("<archive>", e);
    let mut archive = tar::Archive::new(reader);
    let mut members = BTreeMap::new();
    for entry in archive.entries().map_err(io_err)? {
        let entry = entry.map_err(io_err)?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let path = normalize_path(&entry.path().map_err(io_err)?.to_string_lossy())?;
        let bytes = tarball::read_all(entry).map_err(io_err)?;
        members.insert(path, bytes);
    }
    ImageBundle::from_members(members)
}

/// Writes `bundle` to `out_path`. The archive is written beside the target
/// and renamed into place, so a failed save never leaves a partial file.
pub fn save_bundle(bundle: &ImageBundle, out_path: &Path) -> Result<PathBuf> {
    write_atomic(out_path, |w| bundle.write_archive(w).map(drop))?;
    Ok(out_path.to_path_buf())
}

pub(crate) fn write_atomic(
    path: &Path,
    fill: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidPath(path.display().to_string()))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        fill(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Applies layers `0..=upto` base-first. A `.wh.<name>` member deletes
/// `<name>` (and anything below it) from the lower layers; `.wh..wh..opq`
/// empties its directory. Whiteouts only affect lower layers and are not
/// emitted themselves.
pub fn flatten(bundle: &ImageBundle, upto: usize) -> Result<FileTree> {
    if upto >= bundle.layer_count() {
        return Err(Error::LayerIndexOutOfRange {
            index: upto,
            count: bundle.layer_count(),
        });
    }
    let mut acc = FileTree::new();
    for index in 0..=upto {
        apply_layer(&mut acc, bundle.layer_at(index)?)?;
    }
    Ok(acc)
}

pub(crate) fn apply_layer(acc: &mut FileTree, layer: &LayerRecord) -> Result<()> {
    let tree = layer.tree()?;
    let mut additions = Vec::new();
    for (path, entry) in tree.iter() {
        let (dir, name) = match path.rsplit_once('/') {
            Some((d, n)) => (d, n),
            None => ("", path.as_str()),
        };
        if name == OPAQUE_WHITEOUT {
            acc.clear_below(dir);
        } else if let Some(hidden) = name.strip_prefix(WHITEOUT_PREFIX) {
            acc.remove_recursive(&tree::join(dir, hidden)?);
        } else {
            additions.push((path.clone(), entry.clone()));
        }
    }
    for (path, entry) in additions {
        // A non-directory replacing a directory hides everything under it.
        if entry.kind != EntryKind::Dir {
            acc.clear_below(&path);
        }
        acc.insert_normalized(path, entry);
    }
    Ok(())
}
