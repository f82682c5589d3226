use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    File,
    Dir,
    Symlink,
}

/// One path in a [`FileTree`]. For symlinks `content` holds the link target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeEntry {
    pub content: Vec<u8>,
    pub mode: u32,
    pub kind: EntryKind,
}

impl TreeEntry {
    pub fn file(content: Vec<u8>, mode: u32) -> Self {
        TreeEntry {
            content,
            mode,
            kind: EntryKind::File,
        }
    }

    pub fn dir(mode: u32) -> Self {
        TreeEntry {
            content: Vec::new(),
            mode,
            kind: EntryKind::Dir,
        }
    }

    pub fn symlink(target: Vec<u8>) -> Self {
        TreeEntry {
            content: target,
            mode: 0o777,
            kind: EntryKind::Symlink,
        }
    }
}

/// Normalized path -> entry map. Paths never start with `/` and contain no
/// `.` or `..` segments.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FileTree {
    entries: BTreeMap<String, TreeEntry>,
}

/// Collapses `.`/`..`/empty segments and strips leading and trailing slashes.
/// The archive root normalizes to the empty string.
pub fn normalize_path(raw: &str) -> Result<String> {
    let mut parts: Vec<&str> = Vec::new();
    for seg in raw.split('/') {
        match seg {
            "" | "." => {}
            ".." => {
                if parts.pop().is_none() {
                    return Err(Error::InvalidPath(raw.to_string()));
                }
            }
            s => parts.push(s),
        }
    }
    Ok(parts.join("/"))
}

/// Joins a normalized directory and a relative path.
pub(crate) fn join(dir: &str, rel: &str) -> Result<String> {
    if dir.is_empty() {
        normalize_path(rel)
    } else {
        normalize_path(&format!("{dir}/{rel}"))
    }
}

impl FileTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: &str, entry: TreeEntry) -> Result<()> {
        let path = normalize_path(path)?;
        if path.is_empty() {
            return Err(Error::InvalidPath(String::new()));
        }
        self.entries.insert(path, entry);
        Ok(())
    }

    pub fn insert_file(&mut self, path: &str, content: Vec<u8>) -> Result<()> {
        self.insert(path, TreeEntry::file(content, 0o644))
    }

    pub(crate) fn insert_normalized(&mut self, path: String, entry: TreeEntry) {
        debug_assert!(!path.is_empty());
        self.entries.insert(path, entry);
    }

    pub fn get(&self, path: &str) -> Option<&TreeEntry> {
        self.entries.get(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<TreeEntry> {
        self.entries.remove(path)
    }

    /// Removes `path` and, if it is a directory, everything below it.
    pub fn remove_recursive(&mut self, path: &str) {
        self.entries.remove(path);
        self.clear_below(path);
    }

    /// Removes everything strictly below `dir`, keeping `dir` itself.
    pub fn clear_below(&mut self, dir: &str) {
        if dir.is_empty() {
            self.entries.clear();
            return;
        }
        let prefix = format!("{dir}/");
        self.entries.retain(|p, _| !p.starts_with(&prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TreeEntry)> {
        self.entries.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Path -> content for everything except directories. This is the view
    /// equivalence checks compare: modes and directory entries are ignored.
    pub fn contents(&self) -> BTreeMap<&str, &[u8]> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind != EntryKind::Dir)
            .map(|(p, e)| (p.as_str(), e.content.as_slice()))
            .collect()
    }

    /// The subtree under `dir`, re-rooted at `dir`.
    pub fn subtree(&self, dir: &str) -> FileTree {
        if dir.is_empty() {
            return self.clone();
        }
        let prefix = format!("{dir}/");
        FileTree {
            entries: self
                .entries
                .iter()
                .filter_map(|(p, e)| p.strip_prefix(&prefix).map(|rest| (rest.to_string(), e.clone())))
                .collect(),
        }
    }

    /// Reads a directory from disk. Symlinks are recorded as links, not
    /// followed.
    pub fn from_dir(root: &Path) -> Result<FileTree> {
        let meta = fs::metadata(root).map_err(|e| Error::io(root, e))?;
        if !meta.is_dir() {
            return Err(Error::NotADirectory(root.to_path_buf()));
        }
        let mut tree = FileTree::new();
        walk(root, "", &mut tree)?;
        Ok(tree)
    }
}

fn walk(dir: &Path, rel: &str, tree: &mut FileTree) -> Result<()> {
    let mut names: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    names.sort_by_key(|e| e.file_name());
    for dirent in names {
        let name = dirent.file_name().to_string_lossy().into_owned();
        let path = dirent.path();
        let rel_path = if rel.is_empty() {
            name
        } else {
            format!("{rel}/{name}")
        };
        let meta = fs::symlink_metadata(&path).map_err(|e| Error::io(&path, e))?;
        let mode = file_mode(&meta);
        if meta.file_type().is_symlink() {
            let target = fs::read_link(&path).map_err(|e| Error::io(&path, e))?;
            tree.insert(
                &rel_path,
                TreeEntry::symlink(target.to_string_lossy().into_owned().into_bytes()),
            )?;
        } else if meta.is_dir() {
            tree.insert(&rel_path, TreeEntry::dir(mode))?;
            walk(&path, &rel_path, tree)?;
        } else {
            let content = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            tree.insert(&rel_path, TreeEntry::file(content, mode))?;
        }
    }
    Ok(())
}

#[cfg(unix)]
fn file_mode(meta: &fs::Metadata) -> u32 {
    use std::os::unix::fs::PermissionsExt;
    meta.permissions().mode() & 0o7777
}

#[cfg(not(unix))]
fn file_mode(meta: &fs::Metadata) -> u32 {
    if meta.is_dir() {
        0o755
    } else {
        0o644
    }
}
