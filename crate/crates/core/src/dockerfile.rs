//! Dockerfile parsing and layer classification.
//!
//! Content instructions (`FROM`, `ADD`, `COPY`, `RUN`) produce layers that
//! carry files. Everything else records image state only and shows up as an
//! `empty_layer` history entry. Keywords outside the recognized set are kept,
//! classified as configuration and reported as warnings.

use std::fmt;

use serde::Serialize;

use crate::bundle::ImageBundle;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    Content,
    Configuration,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum Keyword {
    From,
    Copy,
    Add,
    Run,
    Env,
    Cmd,
    Entrypoint,
    Label,
    Workdir,
    Expose,
    Unknown(String),
}

impl Keyword {
    pub fn parse(token: &str) -> Keyword {
        match token.to_ascii_uppercase().as_str() {
            "FROM" => Keyword::From,
            "COPY" => Keyword::Copy,
            "ADD" => Keyword::Add,
            "RUN" => Keyword::Run,
            "ENV" => Keyword::Env,
            "CMD" => Keyword::Cmd,
            "ENTRYPOINT" => Keyword::Entrypoint,
            "LABEL" => Keyword::Label,
            "WORKDIR" => Keyword::Workdir,
            "EXPOSE" => Keyword::Expose,
            other => Keyword::Unknown(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Keyword::From => "FROM",
            Keyword::Copy => "COPY",
            Keyword::Add => "ADD",
            Keyword::Run => "RUN",
            Keyword::Env => "ENV",
            Keyword::Cmd => "CMD",
            Keyword::Entrypoint => "ENTRYPOINT",
            Keyword::Label => "LABEL",
            Keyword::Workdir => "WORKDIR",
            Keyword::Expose => "EXPOSE",
            Keyword::Unknown(s) => s,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Keyword::From | Keyword::Copy | Keyword::Add | Keyword::Run => LayerKind::Content,
            _ => LayerKind::Configuration,
        }
    }

    /// ADD and COPY: the instructions whose cache key includes file content.
    pub fn copies_files(&self) -> bool {
        matches!(self, Keyword::Copy | Keyword::Add)
    }
}

impl fmt::Display for Keyword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Total over all tokens; unknown keywords are configuration.
pub fn classify(keyword: &str) -> LayerKind {
    Keyword::parse(keyword).kind()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Instruction {
    /// First physical line of the instruction, 1-based.
    pub line_no: usize,
    pub keyword: Keyword,
    /// Argument text with continuations folded, stored verbatim otherwise.
    pub arguments: String,
    pub kind: LayerKind,
}

impl Instruction {
    pub fn new(line_no: usize, keyword: Keyword, arguments: impl Into<String>) -> Self {
        let kind = keyword.kind();
        Instruction {
            line_no,
            keyword,
            arguments: arguments.into(),
            kind,
        }
    }

    /// Cache comparison for non-file instructions is literal text equality.
    pub fn same_text(&self, other: &Instruction) -> bool {
        self.keyword == other.keyword && self.arguments == other.arguments
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.arguments.is_empty() {
            write!(f, "{}", self.keyword)
        } else {
            write!(f, "{} {}", self.keyword, self.arguments)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DockerfileModel {
    pub instructions: Vec<Instruction>,
    pub source_text: String,
    pub warnings: Vec<String>,
}

impl DockerfileModel {
    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }
}

/// Normalized form: one instruction per line, uppercase keywords.
impl fmt::Display for DockerfileModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.instructions {
            writeln!(f, "{i}")?;
        }
        Ok(())
    }
}

pub fn parse_dockerfile(text: &str) -> Result<DockerfileModel> {
    let mut instructions = Vec::new();
    let mut warnings = Vec::new();
    let mut pending: Option<(usize, Vec<String>)> = None;
    let mut from_seen: Option<usize> = None;

    let lines: Vec<&str> = text.lines().collect();
    for (idx, raw) in lines.iter().enumerate() {
        let line_no = idx + 1;
        let trimmed = raw.trim();
        if trimmed.starts_with('#') || (trimmed.is_empty() && pending.is_none()) {
            continue;
        }
        let (piece, continues) = match trimmed.strip_suffix('\\') {
            Some(rest) => (rest.trim(), true),
            None => (trimmed, false),
        };
        let (start, mut pieces) = pending.take().unwrap_or((line_no, Vec::new()));
        if !piece.is_empty() {
            pieces.push(piece.to_string());
        }
        // A continuation running into a blank line or end of file still ends
        // the instruction there.
        if continues && idx + 1 < lines.len() {
            pending = Some((start, pieces));
            continue;
        }
        if pieces.is_empty() {
            continue;
        }
        let folded = pieces.join(" ");
        let instr = parse_instruction(start, &folded)?;
        if let Keyword::Unknown(k) = &instr.keyword {
            warnings.push(format!(
                "line {start}: unrecognized instruction {k}, treated as configuration"
            ));
        }
        if instr.keyword == Keyword::From {
            if from_seen.is_some() {
                return Err(Error::MultiStage(start));
            }
            from_seen = Some(start);
        }
        if instr.keyword.copies_files() && instr.arguments.contains("--from") {
            return Err(Error::UnsupportedSyntax {
                line: start,
                reason: "COPY --from refers to another build stage".into(),
            });
        }
        instructions.push(instr);
    }

    Ok(DockerfileModel {
        instructions,
        source_text: text.to_string(),
        warnings,
    })
}

fn parse_instruction(line_no: usize, text: &str) -> Result<Instruction> {
    let (token, rest) = match text.split_once(char::is_whitespace) {
        Some((t, r)) => (t, r.trim()),
        None => (text, ""),
    };
    if token.is_empty() || !token.chars().all(|c| c.is_ascii_alphabetic()) {
        return Err(Error::UnparsableLine(line_no));
    }
    Ok(Instruction::new(line_no, Keyword::parse(token), rest))
}

/// Where the instructions of a Dockerfile sit in an image's layer list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerAlignment {
    /// Per instruction: the index of the layer it produced. FROM maps to the
    /// top layer of the base image; configuration instructions map to `None`.
    pub slots: Vec<Option<usize>>,
    /// Number of layers contributed by the base image.
    pub base_layers: usize,
}

impl LayerAlignment {
    pub fn layer_of(&self, instruction: usize) -> Option<usize> {
        self.slots.get(instruction).copied().flatten()
    }
}

/// Aligns instructions with layers. The Dockerfile's own instructions are the
/// last history entries of the image; the layers below its first content
/// layer belong to the base image.
pub fn align_layers(model: &DockerfileModel, bundle: &ImageBundle) -> Result<LayerAlignment> {
    let own: Vec<&Instruction> = model
        .instructions
        .iter()
        .filter(|i| i.keyword != Keyword::From)
        .collect();
    let content = own.iter().filter(|i| i.kind == LayerKind::Content).count();
    let layers = bundle.layer_count();
    if content > layers {
        return Err(Error::AlignmentMismatch(format!(
            "{content} content instructions but only {layers} layers"
        )));
    }

    let history = &bundle.config().history;
    if !history.is_empty() {
        if history.len() < own.len() {
            return Err(Error::AlignmentMismatch(format!(
                "{} instructions but only {} history entries",
                own.len(),
                history.len()
            )));
        }
        let tail = &history[history.len() - own.len()..];
        for (instr, entry) in own.iter().zip(tail) {
            if entry.empty_layer != (instr.kind == LayerKind::Configuration) {
                return Err(Error::AlignmentMismatch(format!(
                    "line {}: {} does not match history entry {:?}",
                    instr.line_no, instr.keyword, entry.created_by
                )));
            }
        }
    }

    let base_layers = layers - content;
    let mut next = base_layers;
    let slots = model
        .instructions
        .iter()
        .map(|i| match (&i.keyword, i.kind) {
            (Keyword::From, _) => base_layers.checked_sub(1),
            (_, LayerKind::Content) => {
                next += 1;
                Some(next - 1)
            }
            (_, LayerKind::Configuration) => None,
        })
        .collect();
    Ok(LayerAlignment { slots, base_layers })
}
