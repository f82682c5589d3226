//! Directory-backed bundles: the archive layout unpacked on disk, edited in
//! place with no export/import cycle.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{write_atomic, ImageBundle, MANIFEST_PATH};
use crate::digest::{sha256, Digest};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct StoreLink {
    root: PathBuf,
    /// Digest of every file as last seen on disk.
    on_disk: BTreeMap<String, Digest>,
}

pub fn open_store(store_root: &Path) -> Result<ImageBundle> {
    let meta = fs::metadata(store_root).map_err(|e| Error::io(store_root, e))?;
    if !meta.is_dir() {
        return Err(Error::NotADirectory(store_root.to_path_buf()));
    }
    if !store_root.join(MANIFEST_PATH).is_file() {
        return Err(Error::MissingManifest);
    }
    let mut members = BTreeMap::new();
    collect(store_root, "", &mut members)?;
    let mut bundle = ImageBundle::from_members(members)?;
    let on_disk = digests(&bundle);
    bundle.store = Some(StoreLink {
        root: store_root.to_path_buf(),
        on_disk,
    });
    Ok(bundle)
}

fn digests(bundle: &ImageBundle) -> BTreeMap<String, Digest> {
    bundle
        .members()
        .into_iter()
        .map(|(path, bytes)| {
            // Payload digests are already known; don't hash large layers twice.
            let digest = path
                .strip_suffix("/layer.tar")
                .and_then(|id| bundle.layers.get(id))
                .map(|l| l.payload_digest().clone())
                .unwrap_or_else(|| sha256(bytes));
            (path, digest)
        })
        .collect()
}

fn collect(dir: &Path, rel: &str, out: &mut BTreeMap<String, Vec<u8>>) -> Result<()> {
    for dirent in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let dirent = dirent.map_err(|e| Error::io(dir, e))?;
        let name = dirent.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') && name.contains(".tmp-") {
            continue;
        }
        let rel_path = if rel.is_empty() {
            name
        } else {
            format!("{rel}/{name}")
        };
        let path = dirent.path();
        let ft = dirent.file_type().map_err(|e| Error::io(&path, e))?;
        if ft.is_dir() {
            collect(&path, &rel_path, out)?;
        } else if ft.is_file() {
            out.insert(rel_path, fs::read(&path).map_err(|e| Error::io(&path, e))?);
        }
    }
    Ok(())
}

/// Writes every changed or new file of a store-backed bundle back to its
/// directory and returns the paths written. Files of layers the image no
/// longer references are left where they are.
pub fn flush_store(bundle: &mut ImageBundle) -> Result<Vec<PathBuf>> {
    let link = bundle
        .store
        .clone()
        .ok_or_else(|| Error::InvalidPlan("bundle is not backed by a layer store".into()))?;
    let current = digests(bundle);
    let mut written = Vec::new();
    for (path, bytes) in bundle.members() {
        if link.on_disk.get(&path) == current.get(&path) {
            continue;
        }
        let target = link.root.join(&path);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_atomic(&target, |w| std::io::Write::write_all(w, bytes))?;
        written.push(target);
    }
    bundle.store = Some(StoreLink {
        root: link.root,
        on_disk: current,
    });
    Ok(written)
}
