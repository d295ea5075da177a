//! Safety-guideline parsing and policy-set manipulation.
//!
//! A guideline document is a sequence of categories. Each category starts with
//! a header line (either `C<k>: Name` or a bare `Name:` line directly followed
//! by a `Core Value:` line) and continues with rule lines prefixed by
//! `[BLOCKED]` or `[ALLOWED]`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("guideline text contains no category header")]
    EmptyGuideline,
    #[error("line {line}: malformed rule {text:?}")]
    MalformedRule { line: usize, text: String },
    #[error("category {name:?} has no rules")]
    MissingRules { name: String },
    #[error("duplicate category name {name:?}")]
    DuplicateName { name: String },
    #[error("invalid permutation {order:?} for {n} chunks")]
    InvalidPermutation { order: Vec<usize>, n: usize },
    #[error("index out of range: chunk {chunk_id}, rule {rule_index}")]
    IndexOutOfRange { chunk_id: usize, rule_index: usize },
    #[error("malformed policy document: {0}")]
    Document(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RuleKind {
    Blocked,
    Allowed,
}

impl RuleKind {
    pub fn tag(self) -> &'static str {
        match self {
            RuleKind::Blocked => "[BLOCKED]",
            RuleKind::Allowed => "[ALLOWED]",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub kind: RuleKind,
    pub text: String,
}

/// One category of a safety guideline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyChunk {
    pub id: usize,
    pub name: String,
    pub core_value: String,
    pub rules: Vec<PolicyRule>,
    /// Canonical rendering of the chunk. Contains no ordinal, so a chunk's
    /// text is the same wherever it sits in the set.
    pub raw_text: String,
}

impl PolicyChunk {
    fn new(id: usize, name: String, core_value: String, rules: Vec<PolicyRule>) -> Self {
        let raw_text = render_chunk(&name, &core_value, &rules);
        Self {
            id,
            name,
            core_value,
            rules,
            raw_text,
        }
    }

    /// Prompt/guardrail label of this chunk, e.g. `C1(Sexual Content)`.
    pub fn label(&self) -> String {
        format!("C{}({})", self.id + 1, self.name)
    }
}

fn render_chunk(name: &str, core_value: &str, rules: &[PolicyRule]) -> String {
    let mut out = format!("{name}:\nCore Value: {core_value}");
    for rule in rules {
        out.push('\n');
        out.push_str(rule.kind.tag());
        out.push(' ');
        out.push_str(&rule.text);
    }
    out
}

/// Ordered set of policy chunks with positional ids `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ChunkDoc>", into = "Vec<ChunkDoc>")]
pub struct PolicySet {
    chunks: Vec<PolicyChunk>,
}

/// Serialized form of a chunk: `{name, core_value, rules: [{kind, text}]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChunkDoc {
    name: String,
    core_value: String,
    rules: Vec<PolicyRule>,
}

impl TryFrom<Vec<ChunkDoc>> for PolicySet {
    type Error = PolicyError;

    fn try_from(docs: Vec<ChunkDoc>) -> Result<Self, Self::Error> {
        PolicySet::from_parts(docs.into_iter().map(|d| (d.name, d.core_value, d.rules)).collect())
    }
}

impl From<PolicySet> for Vec<ChunkDoc> {
    fn from(set: PolicySet) -> Self {
        set.chunks
            .into_iter()
            .map(|c| ChunkDoc {
                name: c.name,
                core_value: c.core_value,
                rules: c.rules,
            })
            .collect()
    }
}

impl PolicySet {
    /// Builds a set from `(name, core_value, rules)` triples, checking the
    /// set invariants.
    pub fn from_parts(parts: Vec<(String, String, Vec<PolicyRule>)>) -> Result<Self, PolicyError> {
        if parts.is_empty() {
            return Err(PolicyError::EmptyGuideline);
        }
        let mut seen = HashSet::new();
        let mut chunks = Vec::with_capacity(parts.len());
        for (id, (name, core_value, rules)) in parts.into_iter().enumerate() {
            let name = name.trim().to_string();
            if name.is_empty() {
                return Err(PolicyError::Document("empty category name".into()));
            }
            if rules.is_empty() {
                return Err(PolicyError::MissingRules { name });
            }
            if !seen.insert(name.clone()) {
                return Err(PolicyError::DuplicateName { name });
            }
            chunks.push(PolicyChunk::new(id, name, core_value.trim().to_string(), rules));
        }
        Ok(Self { chunks })
    }

    pub fn chunks(&self) -> &[PolicyChunk] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.chunks.iter().map(|c| c.name.as_str()).collect()
    }

    /// Reorders chunks. `order[i]` is the new position of the chunk currently
    /// at position `i`, so `permute(permute(s, a), b) == permute(s, b∘a)`.
    pub fn permute(&self, order: &[usize]) -> Result<Self, PolicyError> {
        let n = self.chunks.len();
        let invalid = || PolicyError::InvalidPermutation {
            order: order.to_vec(),
            n,
        };
        if order.len() != n {
            return Err(invalid());
        }
        let mut slots: Vec<Option<PolicyChunk>> = vec![None; n];
        for (old, &new) in order.iter().enumerate() {
            if new >= n || slots[new].is_some() {
                return Err(invalid());
            }
            let mut chunk = self.chunks[old].clone();
            chunk.id = new;
            slots[new] = Some(chunk);
        }
        Ok(Self {
            chunks: slots.into_iter().map(|c| c.expect("filled")).collect(),
        })
    }

    /// Marks one rule as allowed. Already-allowed rules are left as is.
    pub fn whitelist(&self, chunk_id: usize, rule_index: usize) -> Result<Self, PolicyError> {
        let oob = PolicyError::IndexOutOfRange { chunk_id, rule_index };
        let chunk = self.chunks.get(chunk_id).ok_or(oob.clone())?;
        if rule_index >= chunk.rules.len() {
            return Err(oob);
        }
        let mut out = self.clone();
        let target = &mut out.chunks[chunk_id];
        target.rules[rule_index].kind = RuleKind::Allowed;
        target.raw_text = render_chunk(&target.name, &target.core_value, &target.rules);
        Ok(out)
    }

    /// Renders the set back to guideline text that [`parse_guidelines`]
    /// accepts.
    pub fn to_guideline_text(&self) -> String {
        let mut out = String::new();
        for (i, chunk) in self.chunks.iter().enumerate() {
            if i > 0 {
                out.push_str("\n\n");
            }
            out.push_str(&chunk.raw_text);
        }
        out.push('\n');
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        serde_json::from_str(text).map_err(|e| PolicyError::Document(e.to_string()))
    }

    /// Loads either the JSON serialized form or guideline text.
    pub fn load(text: &str) -> Result<Self, PolicyError> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('[') && !trimmed.starts_with("[BLOCKED]") && !trimmed.starts_with("[ALLOWED]") {
            Self::from_json(text)
        } else {
            parse_guidelines(text)
        }
    }
}

fn strip_decoration(line: &str) -> &str {
    line.trim().trim_matches(|c| c == '*' || c == '#').trim()
}

/// Returns the category name if `line` is a `C<k>`-prefixed header.
fn ordinal_header(line: &str) -> Option<String> {
    let s = strip_decoration(line);
    let rest = s.strip_prefix('C')?;
    let digits = rest.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let rest = &rest[digits..];
    let rest = rest
        .strip_prefix(':')
        .or_else(|| rest.strip_prefix('.'))
        .or_else(|| rest.strip_prefix(')'))?;
    let name = clean_name(rest);
    (!name.is_empty()).then_some(name)
}

fn clean_name(s: &str) -> String {
    let s = s.trim().trim_matches('*').trim();
    let s = s.strip_suffix(':').unwrap_or(s);
    s.trim().trim_matches('*').trim().to_string()
}

fn is_rule_like(line: &str) -> bool {
    line.starts_with('[')
}

fn core_value_of(line: &str) -> Option<&str> {
    strip_decoration(line).strip_prefix("Core Value:").map(str::trim)
}

fn parse_rule(line: &str) -> Option<PolicyRule> {
    for kind in [RuleKind::Blocked, RuleKind::Allowed] {
        if let Some(text) = line.strip_prefix(kind.tag()) {
            let text = text.trim();
            if !text.is_empty() {
                return Some(PolicyRule {
                    kind,
                    text: text.to_string(),
                });
            }
        }
    }
    None
}

/// Parses a guideline document into a [`PolicySet`].
pub fn parse_guidelines(text: &str) -> Result<PolicySet, PolicyError> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();

    let mut parts: Vec<(String, String, Vec<PolicyRule>)> = Vec::new();
    for (idx, &(line_no, line)) in lines.iter().enumerate() {
        if is_rule_like(line) {
            let rule = parse_rule(line).ok_or_else(|| PolicyError::MalformedRule {
                line: line_no,
                text: line.to_string(),
            })?;
            match parts.last_mut() {
                Some(part) => part.2.push(rule),
                None => {
                    return Err(PolicyError::MalformedRule {
                        line: line_no,
                        text: line.to_string(),
                    })
                }
            }
            continue;
        }
        if let Some(value) = core_value_of(line) {
            if let Some(part) = parts.last_mut() {
                part.1 = value.to_string();
            }
            continue;
        }
        let next_is_core = lines
            .get(idx + 1)
            .is_some_and(|&(_, next)| core_value_of(next).is_some());
        if let Some(name) = ordinal_header(line) {
            parts.push((name, String::new(), Vec::new()));
        } else if next_is_core {
            parts.push((clean_name(line), String::new(), Vec::new()));
        } else if !parts.is_empty() {
            return Err(PolicyError::MalformedRule {
                line: line_no,
                text: line.to_string(),
            });
        }
        // lines before the first header are preamble
    }
    if parts.is_empty() {
        return Err(PolicyError::EmptyGuideline);
    }
    PolicySet::from_parts(parts)
}

/// The six-category guideline used throughout the examples and fixtures.
pub const DEFAULT_GUIDELINES: &str = include_str!("../data/guidelines.txt");

pub fn default_policies() -> PolicySet {
    parse_guidelines(DEFAULT_GUIDELINES).expect("bundled guidelines parse")
}
