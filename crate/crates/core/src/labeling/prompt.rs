use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PA: &str = include_str!("../../prompts/pa.txt");
const PB: &str = include_str!("../../prompts/pb.txt");
const PC: &str = include_str!("../../prompts/pc.txt");

/// Slot names recognised inside template bodies.
const SLOTS: [&str; 4] = ["review", "concepts", "concept", "concept labels"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateId {
    Pa,
    Pb,
    Pc,
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateId::Pa => "Pa",
            TemplateId::Pb => "Pb",
            TemplateId::Pc => "Pc",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: &'static str,
}

impl PromptTemplate {
    pub fn get(id: TemplateId) -> Self {
        let body = match id {
            TemplateId::Pa => PA,
            TemplateId::Pb => PB,
            TemplateId::Pc => PC,
        };
        Self { id, body }
    }

    /// Substitutes every `{slot}` in one pass; values are inserted verbatim and
    /// never rescanned. A slot without a value is an error.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String> {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body;
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let after = &rest[start + 1..];
            let slot = after.find('}').map(|end| &after[..end]).filter(|s| SLOTS.contains(s));
            match slot {
                Some(name) => {
                    let value = vars
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| {
                            Error::Config(format!("template {} has unfilled placeholder {{{name}}}", self.id))
                        })?;
                    out.push_str(value);
                    rest = &after[name.len() + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}
