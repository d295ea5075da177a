//! Three-line guardrail response: a description, a JSON object of per-policy
//! flags and an optional explanation.

use indexmap::IndexMap;
use thiserror::Error;

pub const DESCRIPTION_MARKER: &str = "DESCRIPTION:";
pub const GUARDRAIL_MARKER: &str = "GUARDRAIL:";
pub const EXPLANATION_MARKER: &str = "EXPLANATION:";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResponseError {
    #[error("response has no GUARDRAIL block")]
    MissingGuardrailBlock,
    #[error("GUARDRAIL block is not a JSON object of booleans: {0}")]
    BadJson(String),
    #[error("GUARDRAIL block has {got} entries, expected {expected}")]
    PolicyCountMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub description: String,
    /// Flags keyed as they appear in the response, in response order.
    pub flags: IndexMap<String, bool>,
    pub explanation: Option<String>,
}

/// Collapses every whitespace run, including newlines, into one space.
pub fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders a response. `flags` pairs each policy label with its flag, in
/// policy order. The explanation line is written only when a flag is set.
pub fn render_flags(description: &str, flags: &[(String, bool)], explanation: &str) -> String {
    let body: Vec<String> = flags
        .iter()
        .map(|(k, v)| format!("{}: {}", serde_json::Value::String(k.clone()), v))
        .collect();
    let mut out = format!(
        "{DESCRIPTION_MARKER} {}\n{GUARDRAIL_MARKER} {{{}}}\n",
        single_line(description),
        body.join(", ")
    );
    if flags.iter().any(|(_, v)| *v) {
        out.push_str(&format!("{EXPLANATION_MARKER} {}\n", single_line(explanation)));
    }
    out
}

/// Byte offset of `marker` at the start of a line (after indentation), or
/// anywhere as a fallback.
fn find_marker(text: &str, marker: &str) -> Option<usize> {
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_start();
        if trimmed.starts_with(marker) {
            return Some(offset + (line.len() - trimmed.len()));
        }
        offset += line.len();
    }
    text.find(marker)
}

/// The first brace-balanced `{...}` in `text`, skipping braces in strings.
fn json_object(text: &str) -> Result<&str, ResponseError> {
    let start = text
        .find('{')
        .ok_or_else(|| ResponseError::BadJson("no JSON object after GUARDRAIL".into()))?;
    let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
    for (i, c) in text[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Ok(&text[start..=start + i]);
                }
            }
            _ => {}
        }
    }
    Err(ResponseError::BadJson("unbalanced braces".into()))
}

/// Lower-cases bare `true`/`false` literals outside strings.
fn normalize_literals(json: &str) -> String {
    let mut out = String::with_capacity(json.len());
    let (mut in_str, mut escaped) = (false, false);
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        let lower = word.to_ascii_lowercase();
        if lower == "true" || lower == "false" {
            out.push_str(&lower);
        } else {
            out.push_str(word);
        }
        word.clear();
    };
    for c in json.chars() {
        if in_str {
            out.push(c);
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        if c.is_ascii_alphabetic() {
            word.push(c);
            continue;
        }
        flush(&mut word, &mut out);
        if c == '"' {
            in_str = true;
        }
        out.push(c);
    }
    flush(&mut word, &mut out);
    out
}

fn as_flag(key: &str, value: &serde_json::Value) -> Result<bool, ResponseError> {
    match value {
        serde_json::Value::Bool(b) => Ok(*b),
        serde_json::Value::String(s) if s.eq_ignore_ascii_case("true") => Ok(true),
        serde_json::Value::String(s) if s.eq_ignore_ascii_case("false") => Ok(false),
        other => Err(ResponseError::BadJson(format!(
            "value of {key:?} is {other}, not a boolean"
        ))),
    }
}

/// Tolerant parse of a response produced by this engine or an external
/// model.
pub fn parse_response(text: &str, expected_policies: usize) -> Result<ParsedResponse, ResponseError> {
    let g = find_marker(text, GUARDRAIL_MARKER).ok_or(ResponseError::MissingGuardrailBlock)?;
    let after = &text[g + GUARDRAIL_MARKER.len()..];
    let object = json_object(after)?;
    let value: serde_json::Value =
        serde_json::from_str(&normalize_literals(object)).map_err(|e| ResponseError::BadJson(e.to_string()))?;
    let map = value
        .as_object()
        .ok_or_else(|| ResponseError::BadJson("not an object".into()))?;
    let flags = map
        .iter()
        .map(|(k, v)| Ok((k.clone(), as_flag(k, v)?)))
        .collect::<Result<IndexMap<_, _>, ResponseError>>()?;
    if flags.len() != expected_policies {
        return Err(ResponseError::PolicyCountMismatch {
            expected: expected_policies,
            got: flags.len(),
        });
    }
    let description = match find_marker(text, DESCRIPTION_MARKER) {
        Some(d) if d < g => text[d + DESCRIPTION_MARKER.len()..g].trim().to_string(),
        _ => String::new(),
    };
    let rest = &after[object.as_ptr() as usize - after.as_ptr() as usize + object.len()..];
    let explanation =
        find_marker(rest, EXPLANATION_MARKER).map(|e| rest[e + EXPLANATION_MARKER.len()..].trim().to_string());
    Ok(ParsedResponse {
        description,
        flags,
        explanation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(flags: &[bool]) -> Vec<(String, bool)> {
        flags
            .iter()
            .enumerate()
            .map(|(i, &f)| (format!("C{}(Cat {i})", i + 1), f))
            .collect()
    }

    #[test]
    fn all_false_has_no_explanation() {
        let text = render_flags("quiet street", &labels(&[false, false]), "ignored");
        assert_eq!(
            text,
            "DESCRIPTION: quiet street\nGUARDRAIL: {\"C1(Cat 0)\": false, \"C2(Cat 1)\": false}\n"
        );
        let parsed = parse_response(&text, 2).unwrap();
        assert_eq!(parsed.description, "quiet street");
        assert_eq!(parsed.explanation, None);
    }

    #[test]
    fn round_trip_with_explanation() {
        let flags = labels(&[false, true, false]);
        let text = render_flags("a fight", &flags, "C2 shows violence");
        let parsed = parse_response(&text, 3).unwrap();
        assert_eq!(parsed.flags.into_iter().collect::<Vec<_>>(), flags);
        assert_eq!(parsed.explanation.as_deref(), Some("C2 shows violence"));
    }

    #[test]
    fn tolerant_literals_and_layout() {
        let text = "Sure!\n  DESCRIPTION: x\n  GUARDRAIL: {\"A\": True, \"B\": \"FALSE\", \"C {x}\": FALSE} trailing\nEXPLANATION: because\nmore";
        let parsed = parse_response(text, 3).unwrap();
        assert_eq!(
            parsed.flags.values().copied().collect::<Vec<_>>(),
            vec![true, false, false]
        );
        assert_eq!(parsed.explanation.as_deref(), Some("because\nmore"));
        assert_eq!(parsed.description, "x");
    }

    #[test]
    fn errors() {
        assert_eq!(
            parse_response("DESCRIPTION: x", 1),
            Err(ResponseError::MissingGuardrailBlock)
        );
        assert!(matches!(
            parse_response("GUARDRAIL: none", 1),
            Err(ResponseError::BadJson(_))
        ));
        assert!(matches!(
            parse_response("GUARDRAIL: {\"a\": tru}", 1),
            Err(ResponseError::BadJson(_))
        ));
        assert!(matches!(
            parse_response("GUARDRAIL: {\"a\": 1}", 1),
            Err(ResponseError::BadJson(_))
        ));
        assert!(matches!(
            parse_response("GUARDRAIL: {\"a\": true", 1),
            Err(ResponseError::BadJson(_))
        ));
        let five = render_flags("d", &labels(&[false; 5]), "");
        assert_eq!(
            parse_response(&five, 6),
            Err(ResponseError::PolicyCountMismatch { expected: 6, got: 5 })
        );
    }

    #[test]
    fn multiline_text_is_flattened() {
        let text = render_flags("two\nlines", &labels(&[true]), "  why\n\tnot ");
        let parsed = parse_response(&text, 1).unwrap();
        assert_eq!(parsed.description, "two lines");
        assert_eq!(parsed.explanation.as_deref(), Some("why not"));
    }
}
