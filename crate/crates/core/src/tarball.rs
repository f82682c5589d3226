//! Member-level view of an uncompressed tar payload.
//!
//! Every logical member is located by byte span, extension records (GNU long
//! names, pax headers) included, so untouched members can be copied verbatim
//! when a payload is rewritten.

use std::io::Read;
use std::ops::Range;

use tar::{Archive, EntryType, Header};

use crate::bundle::tree::{normalize_path, EntryKind, FileTree, TreeEntry};

pub(crate) const BLOCK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum MemberKind {
    File,
    Dir,
    Symlink,
    HardLink,
    Other,
}

#[derive(Debug, Clone)]
pub(crate) struct Member {
    /// Normalized path; empty for the archive root ("./").
    pub path: String,
    pub kind: MemberKind,
    pub mode: u32,
    pub link_target: Option<String>,
    /// Whole member: extension records, header, data and padding.
    pub span: Range<usize>,
    /// Offset of the member's own 512-byte header.
    pub header_at: usize,
    pub data: Range<usize>,
}

#[derive(Debug)]
pub(crate) struct Scan {
    pub members: Vec<Member>,
    /// Offset where the end-of-archive marker (and any record padding) begins.
    pub trailer_at: usize,
}

pub(crate) fn padded(len: usize) -> usize {
    len.div_ceil(BLOCK) * BLOCK
}

pub(crate) fn scan(payload: &[u8]) -> std::io::Result<Scan> {
    let mut archive = Archive::new(payload);
    let mut members = Vec::new();
    let mut cursor = 0usize;
    for entry in archive.entries()? {
        let entry = entry?;
        let header = entry.header();
        let entry_type = header.entry_type();
        let stored = if entry_type == EntryType::GNUSparse {
            header.entry_size()?
        } else {
            entry.size()
        } as usize;
        let header_at = entry.raw_header_position() as usize;
        let data_at = entry.raw_file_position() as usize;
        let end = data_at + padded(stored);
        if end > payload.len() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "member data runs past end of archive",
            ));
        }
        let raw_path = entry.path()?.to_string_lossy().into_owned();
        let path = normalize_path(&raw_path).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string())
        })?;
        let kind = match entry_type {
            EntryType::Regular | EntryType::Continuous | EntryType::GNUSparse => MemberKind::File,
            EntryType::Directory => MemberKind::Dir,
            EntryType::Symlink => MemberKind::Symlink,
            EntryType::Link => MemberKind::HardLink,
            _ => MemberKind::Other,
        };
        let link_target = entry
            .link_name()?
            .map(|p| p.to_string_lossy().into_owned());
        members.push(Member {
            path,
            kind,
            mode: header.mode().unwrap_or(0o644),
            link_target,
            span: cursor..end,
            header_at,
            data: data_at..data_at + stored,
        });
        cursor = end;
    }
    Ok(Scan {
        members,
        trailer_at: cursor,
    })
}

/// Builds the tree of a single layer payload. Whiteout markers are kept as
/// ordinary entries; `bundle::flatten` interprets them.
pub(crate) fn layer_tree(payload: &[u8]) -> std::io::Result<FileTree> {
    let scan = scan(payload)?;
    let mut tree = FileTree::new();
    for m in scan.members {
        if m.path.is_empty() {
            continue;
        }
        let entry = match m.kind {
            MemberKind::File => TreeEntry::file(payload[m.data.clone()].to_vec(), m.mode),
            MemberKind::Dir => TreeEntry::dir(m.mode),
            MemberKind::Symlink => {
                TreeEntry::symlink(m.link_target.unwrap_or_default().into_bytes())
            }
            MemberKind::HardLink => {
                let target = m
                    .link_target
                    .as_deref()
                    .and_then(|t| normalize_path(t).ok())
                    .unwrap_or_default();
                match tree.get(&target) {
                    Some(existing) if existing.kind == EntryKind::File => existing.clone(),
                    _ => continue,
                }
            }
            MemberKind::Other => continue,
        };
        tree.insert_normalized(m.path, entry);
    }
    Ok(tree)
}

/// Serializes one member (header, optional long-name record, data, padding).
pub(crate) fn encode_member(path: &str, entry: &TreeEntry, mode_override: Option<u32>) -> Vec<u8> {
    let mut header = Header::new_gnu();
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    let mut out = Vec::new();
    let mut builder = tar::Builder::new(&mut out);
    let result = match entry.kind {
        EntryKind::File => {
            header.set_entry_type(EntryType::Regular);
            header.set_mode(mode_override.unwrap_or(entry.mode));
            header.set_size(entry.content.len() as u64);
            builder.append_data(&mut header, path, entry.content.as_slice())
        }
        EntryKind::Dir => {
            header.set_entry_type(EntryType::Directory);
            header.set_mode(mode_override.unwrap_or(entry.mode));
            header.set_size(0);
            builder.append_data(&mut header, format!("{path}/"), std::io::empty())
        }
        EntryKind::Symlink => {
            header.set_entry_type(EntryType::Symlink);
            header.set_mode(0o777);
            header.set_size(0);
            let target = String::from_utf8_lossy(&entry.content).into_owned();
            builder.append_link(&mut header, path, target)
        }
    };
    // Writing into a Vec cannot fail; only over-long link names can.
    result.expect("tar member encoding");
    builder.into_inner().expect("in-memory tar");
    // into_inner() appends the two-block end-of-archive marker.
    out.truncate(out.len() - 2 * BLOCK);
    out
}

/// Deterministic archive of a whole tree: entries in path order, zeroed
/// timestamps and ownership.
pub(crate) fn encode_tree(tree: &FileTree) -> Vec<u8> {
    let mut out = Vec::new();
    for (path, entry) in tree.iter() {
        out.extend_from_slice(&encode_member(path, entry, None));
    }
    out.extend_from_slice(&[0u8; 2 * BLOCK]);
    out
}

/// Copy of a member's own header with a new data size and checksum.
pub(crate) fn resized_header(payload: &[u8], member: &Member, size: u64) -> [u8; BLOCK] {
    let mut raw = [0u8; BLOCK];
    raw.copy_from_slice(&payload[member.header_at..member.header_at + BLOCK]);
    let header = Header::from_byte_slice(&raw);
    let mut header = header.clone();
    header.set_size(size);
    header.set_cksum();
    raw.copy_from_slice(header.as_bytes());
    raw
}

pub(crate) fn read_all(mut r: impl Read) -> std::io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    Ok(buf)
}
