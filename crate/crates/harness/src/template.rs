//! Minimal `{slot}` template rendering.
//!
//! A slot is a lowercase identifier in braces. Any other brace, such as the
//! JSON skeleton inside a judge prompt, is copied through untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template `{template}` is missing slot `{slot}`")]
    MissingSlot { template: String, slot: String },
    #[error("template `{template}` has no slot `{slot}`")]
    UnknownSlot { template: String, slot: String },
}

fn slot_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z][a-z_0-9]*)\}").unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    text: String,
}

impl Template {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Template {
            name: name.into(),
            text: text.into(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Slot names in order of first appearance.
    pub fn slots(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        slot_re()
            .captures_iter(&self.text)
            .map(|c| c.get(1).unwrap().as_str())
            .filter(|s| seen.insert(*s))
            .collect()
    }

    /// Substitutes every slot. Values are inserted verbatim and never
    /// rescanned, so a value containing `{x}` stays literal.
    pub fn render<V: AsRef<str>>(
        &self,
        values: &BTreeMap<&str, V>,
    ) -> Result<String, TemplateError> {
        for slot in self.slots() {
            if !values.contains_key(slot) {
                return Err(TemplateError::MissingSlot {
                    template: self.name.clone(),
                    slot: slot.to_string(),
                });
            }
        }
        let slots = self.slots();
        if let Some(extra) = values.keys().find(|k| !slots.contains(k)) {
            return Err(TemplateError::UnknownSlot {
                template: self.name.clone(),
                slot: extra.to_string(),
            });
        }
        let mut out = String::with_capacity(self.text.len());
        let mut last = 0;
        for c in slot_re().captures_iter(&self.text) {
            let whole = c.get(0).unwrap();
            out.push_str(&self.text[last..whole.start()]);
            out.push_str(values[c.get(1).unwrap().as_str()].as_ref());
            last = whole.end();
        }
        out.push_str(&self.text[last..]);
        Ok(out)
    }
}
