//! `{{slot}}` substitution for prompt layouts shipped as JSON assets.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template {template}: missing slot {slot}")]
    MissingSlot { template: String, slot: String },
    #[error("template {template}: unknown slot {slot}")]
    UnknownSlot { template: String, slot: String },
    #[error("template {template}: {message}")]
    Invalid { template: String, message: String },
    #[error("template asset does not parse: {0}")]
    Parse(String),
}

/// Names of every `{{slot}}` in `layout`, in order of appearance.
pub fn slots(layout: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = layout;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                out.push(after[..end].trim());
                rest = &after[end + 2..];
            }
            None => break,
        }
    }
    out
}

/// Fail on the first required slot absent from `layout`.
pub fn require_slots(template: &str, layout: &str, required: &[&str]) -> Result<(), TemplateError> {
    let present = slots(layout);
    for r in required {
        if !present.contains(r) {
            return Err(TemplateError::MissingSlot {
                template: template.to_string(),
                slot: r.to_string(),
            });
        }
    }
    Ok(())
}

/// Substitute every slot. Values are inserted verbatim and not rescanned.
pub fn render(template: &str, layout: &str, values: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(layout.len());
    let mut rest = layout;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            return Ok(out);
        };
        let name = after[..end].trim();
        let value = values.get(name).ok_or_else(|| TemplateError::UnknownSlot {
            template: template.to_string(),
            slot: name.to_string(),
        })?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}
