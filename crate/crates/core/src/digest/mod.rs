//! SHA-256 digests, integrity verification and checksum rewriting.
//!
//! Every checksum here is over the uncompressed `layer.tar` bytes. Rewriting
//! replaces a layer's old checksum with its new one wherever the image's
//! documents record it, so the stored value and the payload agree again.

mod sha256;

use std::fmt;

use serde::Serialize;

pub use self::sha256::{pad_message, sha256_bytes, Sha256};
use crate::bundle::{DocumentRef, ImageBundle, LayerRecord};
use crate::error::{Error, Result};

pub const PREFIX: &str = "sha256:";

/// 64 lowercase hex characters.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(String);

impl Digest {
    /// Accepts bare hex or the `sha256:`-prefixed form.
    pub fn parse(s: &str) -> Result<Self> {
        let hex = s.strip_prefix(PREFIX).unwrap_or(s);
        if hex.len() == 64 && hex.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(Digest(hex.to_string()))
        } else {
            Err(Error::InvalidDigest(s.to_string()))
        }
    }

    pub fn from_bytes(bytes: &[u8; 32]) -> Self {
        const HEX: &[u8; 16] = b"0123456789abcdef";
        let mut s = String::with_capacity(64);
        for b in bytes {
            s.push(HEX[(b >> 4) as usize] as char);
            s.push(HEX[(b & 0xf) as usize] as char);
        }
        Digest(s)
    }

    pub fn hex(&self) -> &str {
        &self.0
    }

    pub fn prefixed(&self) -> String {
        format!("{PREFIX}{}", self.0)
    }

    pub fn short(&self) -> &str {
        &self.0[..12]
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.0)
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.prefixed())
    }
}

pub fn sha256(data: &[u8]) -> Digest {
    Digest::from_bytes(&sha256_bytes(data))
}

/// Recomputes the checksum of a layer's payload (never the cached value).
pub fn layer_digest(layer: &LayerRecord) -> Digest {
    sha256(layer.payload())
}

fn is_token_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric()
}

/// Replaces every occurrence of `old` that is not glued to other
/// alphanumerics. Bytes outside the matches are copied unchanged.
pub(crate) fn replace_token(doc: &[u8], old: &str, new: &str) -> (Vec<u8>, usize) {
    let needle = old.as_bytes();
    let mut out = Vec::with_capacity(doc.len());
    let mut count = 0;
    let mut i = 0;
    while i < doc.len() {
        if doc[i..].starts_with(needle)
            && (i == 0 || !is_token_byte(doc[i - 1]))
            && doc.get(i + needle.len()).is_none_or(|&b| !is_token_byte(b))
        {
            out.extend_from_slice(new.as_bytes());
            i += needle.len();
            count += 1;
        } else {
            out.push(doc[i]);
            i += 1;
        }
    }
    (out, count)
}

/// Replaces `old` with `new` in the given documents of `bundle`.
pub(crate) fn rewrite_token(
    bundle: &mut ImageBundle,
    docs: Vec<DocumentRef>,
    old: &str,
    new: &str,
) -> Result<Vec<(String, usize)>> {
    let mut hits = Vec::new();
    for doc in docs {
        let Some(bytes) = bundle.document(&doc) else {
            continue;
        };
        let (rewritten, count) = replace_token(bytes, old, new);
        if count > 0 {
            hits.push((bundle.document_path(&doc), doc, rewritten, count));
        }
    }
    // Metadata first: a re-pointed manifest must already find its layers'
    // documents consistent.
    hits.sort_by_key(|(_, doc, _, _)| matches!(doc, DocumentRef::Manifest));
    let mut report = Vec::new();
    for (path, doc, rewritten, count) in hits {
        bundle.set_document(&doc, rewritten)?;
        report.push((path, count));
    }
    report.sort();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RewriteReport {
    pub old: Digest,
    pub new: Digest,
    /// (document path, number of replacements)
    pub occurrences: Vec<(String, usize)>,
}

impl RewriteReport {
    pub fn total(&self) -> usize {
        self.occurrences.iter().map(|(_, n)| n).sum()
    }
}

/// Checksum bypass: every recorded occurrence of `old` (bare or
/// `sha256:`-prefixed) in the image's live documents becomes `new`. Retained
/// layers keep their metadata untouched.
pub fn rewrite_digest(
    bundle: &ImageBundle,
    old: &Digest,
    new: &Digest,
) -> Result<(ImageBundle, RewriteReport)> {
    if old == new {
        return Err(Error::InvalidPlan("old and new digest are identical".into()));
    }
    let mut out = bundle.clone();
    let docs = out.live_documents();
    let occurrences = rewrite_token(&mut out, docs, old.hex(), new.hex())?;
    if occurrences.is_empty() {
        return Err(Error::RewriteMiss(old.to_string()));
    }
    Ok((
        out,
        RewriteReport {
            old: old.clone(),
            new: new.clone(),
            occurrences,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IntegrityRow {
    pub layer_id: String,
    /// Position in the image, `None` for retained layers.
    pub index: Option<usize>,
    pub recorded: Option<Digest>,
    pub actual: Digest,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IntegrityReport {
    pub rows: Vec<IntegrityRow>,
}

impl IntegrityReport {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.ok)
    }
}

/// One row per layer. For image layers the recorded checksum is the config's
/// diff_id, and a checksum in the layer metadata must agree as well; retained
/// layers are checked against their own metadata.
pub fn verify_integrity(bundle: &ImageBundle) -> IntegrityReport {
    let mut rows = Vec::new();
    for (index, id) in bundle.layer_order().iter().enumerate() {
        let layer = &bundle.layers()[id];
        let actual = layer_digest(layer);
        let recorded = bundle.config().diff_ids.get(index).cloned();
        let meta_ok = layer.metadata.checksum.as_ref().is_none_or(|c| *c == actual);
        rows.push(IntegrityRow {
            layer_id: id.clone(),
            index: Some(index),
            ok: recorded.as_ref() == Some(&actual) && meta_ok,
            recorded,
            actual,
        });
    }
    for layer in bundle.retained_layers() {
        let actual = layer_digest(layer);
        let recorded = layer.metadata.checksum.clone();
        rows.push(IntegrityRow {
            layer_id: layer.id.clone(),
            index: None,
            ok: recorded.as_ref() == Some(&actual),
            recorded,
            actual,
        });
    }
    IntegrityReport { rows }
}
