//! Prompt template files and the `{name}` placeholder grammar.
//!
//! A template file has a `[system]` and an `[instruction]` section. Lines
//! starting with `#` before the first section are header comments; a
//! `# version: <16 hex>` header pins the expected content hash.
//!
//! ```text
//! # version: 3f0c9a51e2d4b7a8
//! [system]
//! You support a designer working on: {brief}
//! [instruction]
//! Write one {type} for the {phase} phase.
//! ```
//!
//! `{{` and `}}` produce literal braces. A `{` not followed by
//! `identifier}` is literal too.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::fnv1a64_hex;
use crate::session::MessageType;

pub const PLACEHOLDERS: [&str; 5] = ["brief", "transcript", "history", "type", "phase"];

pub const CLASSIFY_FILE: &str = "classify.txt";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unknown placeholder `{{{0}}}`")]
    UnknownPlaceholder(String),
    #[error("template `{name}`: missing [{section}] section")]
    MissingSection { name: String, section: &'static str },
    #[error("template `{name}`: version header {expected} does not match content hash {actual}")]
    VersionMismatch {
        name: String,
        expected: String,
        actual: String,
    },
    #[error("template `{name}`: {source}")]
    Io {
        name: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub version: String,
    pub system_segment: String,
    pub instruction_segment: String,
}

pub fn template_version(system_segment: &str, instruction_segment: &str) -> String {
    let mut buf = String::with_capacity(system_segment.len() + instruction_segment.len());
    buf.push_str(system_segment);
    buf.push_str(instruction_segment);
    fnv1a64_hex(buf.as_bytes())
}

impl PromptTemplate {
    pub fn new(
        name: impl Into<String>,
        system_segment: impl Into<String>,
        instruction_segment: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        let system_segment = system_segment.into();
        let instruction_segment = instruction_segment.into();
        check_placeholders(&system_segment)?;
        check_placeholders(&instruction_segment)?;
        Ok(PromptTemplate {
            name: name.into(),
            version: template_version(&system_segment, &instruction_segment),
            system_segment,
            instruction_segment,
        })
    }

    pub fn parse(name: &str, text: &str) -> Result<Self, TemplateError> {
        #[derive(PartialEq)]
        enum Section {
            Header,
            System,
            Instruction,
        }
        let mut pinned = None;
        let mut system: Option<Vec<&str>> = None;
        let mut instruction: Option<Vec<&str>> = None;
        let mut current = Section::Header;
        for line in text.lines() {
            match line.trim_end() {
                "[system]" => {
                    system = Some(Vec::new());
                    current = Section::System;
                    continue;
                }
                "[instruction]" => {
                    instruction = Some(Vec::new());
                    current = Section::Instruction;
                    continue;
                }
                _ => {}
            }
            match current {
                Section::System => system.get_or_insert_with(Vec::new).push(line),
                Section::Instruction => instruction.get_or_insert_with(Vec::new).push(line),
                Section::Header => {
                    if let Some(v) = line.trim().strip_prefix('#').map(str::trim) {
                        if let Some(ver) = v.strip_prefix("version:") {
                            pinned = Some(ver.trim().to_string());
                        }
                    }
                }
            }
        }
        let join = |seg: Vec<&str>| seg.join("\n").trim().to_string();
        let system = system.map(join).ok_or(TemplateError::MissingSection {
            name: name.into(),
            section: "system",
        })?;
        let instruction = instruction.map(join).ok_or(TemplateError::MissingSection {
            name: name.into(),
            section: "instruction",
        })?;
        let template = PromptTemplate::new(name, system, instruction)?;
        if let Some(expected) = pinned {
            if expected != template.version {
                return Err(TemplateError::VersionMismatch {
                    name: name.into(),
                    expected,
                    actual: template.version,
                });
            }
        }
        Ok(template)
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".txt"))
            .unwrap_or("template")
            .to_string();
        let text = std::fs::read_to_string(path).map_err(|source| TemplateError::Io {
            name: name.clone(),
            source,
        })?;
        Self::parse(&name, &text)
    }

    /// File text in the format [`PromptTemplate::parse`] reads, with the
    /// version header pinned.
    pub fn to_file_text(&self) -> String {
        format!(
            "# version: {}\n[system]\n{}\n[instruction]\n{}\n",
            self.version, self.system_segment, self.instruction_segment
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub classify: PromptTemplate,
    pub generate: BTreeMap<MessageType, PromptTemplate>,
}

pub fn generate_file(t: MessageType) -> String {
    format!("generate.{}.txt", t.short_name())
}

impl TemplateSet {
    pub fn new(
        classify: PromptTemplate,
        generate: BTreeMap<MessageType, PromptTemplate>,
    ) -> Result<Self, TemplateError> {
        for t in MessageType::ALL {
            if !generate.contains_key(&t) {
                return Err(TemplateError::MissingSection {
                    name: generate_file(t),
                    section: "generate",
                });
            }
        }
        Ok(TemplateSet { classify, generate })
    }

    /// Loads `classify.txt` and `generate.{question,design,software}.txt`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let classify = PromptTemplate::load(&dir.join(CLASSIFY_FILE))?;
        let mut generate = BTreeMap::new();
        for t in MessageType::ALL {
            generate.insert(t, PromptTemplate::load(&dir.join(generate_file(t)))?);
        }
        Self::new(classify, generate)
    }

    pub fn generator(&self, t: MessageType) -> &PromptTemplate {
        &self.generate[&t]
    }

    /// Built-in placeholder templates, the same text as the shipped
    /// `prompts/` directory.
    pub fn builtin() -> Self {
        let classify = PromptTemplate::parse("classify", include_str!("../prompts/classify.txt"))
            .expect("builtin classify template");
        let mut generate = BTreeMap::new();
        for (t, text) in [
            (MessageType::ReflectiveQuestion, include_str!("../prompts/generate.question.txt")),
            (MessageType::DesignSuggestion, include_str!("../prompts/generate.design.txt")),
            (MessageType::SoftwareTip, include_str!("../prompts/generate.software.txt")),
        ] {
            let name = format!("generate.{}", t.short_name());
            generate.insert(t, PromptTemplate::parse(&name, text).expect("builtin template"));
        }
        TemplateSet { classify, generate }
    }
}

enum Piece<'a> {
    Literal(&'a str),
    Brace(char),
    Var(&'a str),
}

fn tokenize(text: &str) -> Vec<Piece<'_>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut lit_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        let pair = |c| bytes.get(i + 1) == Some(&c);
        if (b == b'{' && pair(b'{')) || (b == b'}' && pair(b'}')) {
            out.push(Piece::Literal(&text[lit_start..i]));
            out.push(Piece::Brace(b as char));
            i += 2;
            lit_start = i;
            continue;
        }
        if b == b'{' {
            let rest = &bytes[i + 1..];
            let n = rest
                .iter()
                .take_while(|c| c.is_ascii_alphanumeric() || **c == b'_')
                .count();
            if n > 0 && rest.get(n) == Some(&b'}') {
                out.push(Piece::Literal(&text[lit_start..i]));
                out.push(Piece::Var(&text[i + 1..i + 1 + n]));
                i += n + 2;
                lit_start = i;
                continue;
            }
        }
        i += 1;
    }
    out.push(Piece::Literal(&text[lit_start..]));
    out
}

/// Fails on the first placeholder outside [`PLACEHOLDERS`].
pub fn check_placeholders(text: &str) -> Result<(), TemplateError> {
    for p in tokenize(text) {
        if let Piece::Var(name) = p {
            if !PLACEHOLDERS.contains(&name) {
                return Err(TemplateError::UnknownPlaceholder(name.to_string()));
            }
        }
    }
    Ok(())
}

/// Replaces each `{name}` with `lookup(name)`.
pub fn substitute(
    text: &str,
    lookup: impl Fn(&str) -> Option<String>,
) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(text.len());
    for p in tokenize(text) {
        match p {
            Piece::Literal(s) => out.push_str(s),
            Piece::Brace(c) => out.push(c),
            Piece::Var(name) => match lookup(name) {
                Some(v) => out.push_str(&v),
                None => return Err(TemplateError::UnknownPlaceholder(name.to_string())),
            },
        }
    }
    Ok(out)
}
