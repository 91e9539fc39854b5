use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_yaml::Value;

use crate::error::{Error, Result};

/// One storyboard: a subject shared by every shot, one setting per shot, and
/// a style suffix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShotPromptSet {
    pub name: String,
    pub subject: String,
    pub settings: Vec<String>,
    pub style: String,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    subject: String,
    style: String,
    settings: Vec<String>,
}

impl ShotPromptSet {
    /// `subject, setting, style` per shot, skipping empty parts.
    pub fn full_prompts(&self) -> Vec<String> {
        self.settings
            .iter()
            .map(|setting| {
                [self.subject.as_str(), setting.as_str(), self.style.as_str()]
                    .into_iter()
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .collect::<Vec<_>>()
                    .join(", ")
            })
            .collect()
    }

    pub fn shots(&self) -> usize {
        self.settings.len()
    }
}

fn field_err(set: &str, field: &str, message: impl Into<String>) -> Error {
    Error::PromptParse {
        set: set.to_string(),
        field: field.to_string(),
        message: message.into(),
    }
}

fn string_field(set: &str, map: &serde_yaml::Mapping, field: &str, required: bool) -> Result<String> {
    match map.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        None if !required => Ok(String::new()),
        None => Err(field_err(set, field, "missing")),
        Some(_) => Err(field_err(set, field, "expected a string")),
    }
}

/// Parses a YAML mapping `name → {subject, style, settings}` in file order.
pub fn parse_prompts(text: &str) -> Result<Vec<ShotPromptSet>> {
    let doc: IndexMap<String, Value> = serde_yaml::from_str(text)?;
    let mut out = Vec::with_capacity(doc.len());
    for (name, value) in doc {
        let Value::Mapping(map) = value else {
            return Err(field_err(&name, "", "expected a mapping"));
        };
        for key in map.keys() {
            match key.as_str() {
                Some("subject" | "style" | "settings") => {}
                _ => return Err(field_err(&name, &format!("{key:?}"), "unknown field")),
            }
        }
        let subject = string_field(&name, &map, "subject", true)?;
        if subject.trim().is_empty() {
            return Err(field_err(&name, "subject", "must not be empty"));
        }
        let style = string_field(&name, &map, "style", false)?;
        let settings = match map.get("settings") {
            Some(Value::Sequence(items)) => items
                .iter()
                .enumerate()
                .map(|(i, v)| match v {
                    Value::String(s) => Ok(s.clone()),
                    _ => Err(field_err(&name, &format!("settings[{i}]"), "expected a string")),
                })
                .collect::<Result<Vec<_>>>()?,
            Some(_) => return Err(field_err(&name, "settings", "expected a list")),
            None => return Err(field_err(&name, "settings", "missing")),
        };
        if settings.is_empty() {
            return Err(field_err(&name, "settings", "needs at least one setting"));
        }
        out.push(ShotPromptSet {
            name,
            subject,
            settings,
            style,
        });
    }
    Ok(out)
}

pub fn load_prompts(path: impl AsRef<Path>) -> Result<Vec<ShotPromptSet>> {
    parse_prompts(&std::fs::read_to_string(path)?)
}

pub fn prompts_to_yaml(sets: &[ShotPromptSet]) -> Result<String> {
    let doc: IndexMap<&str, Entry> = sets
        .iter()
        .map(|s| {
            (
                s.name.as_str(),
                Entry {
                    subject: s.subject.clone(),
                    style: s.style.clone(),
                    settings: s.settings.clone(),
                },
            )
        })
        .collect();
    Ok(serde_yaml::to_string(&doc)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FILE: &str = "\
zeta_fox:
  subject: a red fox
  style: watercolor
  settings: [in snow, by a river, in a barn, at dusk, on a hill]
alpha_cat:
  subject: a grey cat
  settings: [on a roof]
";

    #[test]
    fn file_order_and_shot_count() {
        let sets = parse_prompts(FILE).unwrap();
        assert_eq!(sets[0].name, "zeta_fox");
        assert_eq!(sets[0].shots(), 5);
        assert_eq!(sets[0].full_prompts()[1], "a red fox, by a river, watercolor");
        assert_eq!(sets[1].full_prompts(), vec!["a grey cat, on a roof".to_string()]);
    }

    #[test]
    fn round_trip() {
        let sets = parse_prompts(FILE).unwrap();
        assert_eq!(parse_prompts(&prompts_to_yaml(&sets).unwrap()).unwrap(), sets);
    }

    #[test]
    fn errors_name_set_and_field() {
        let err = parse_prompts("s1:\n  subject: x\n  settings: []\n").unwrap_err();
        assert!(matches!(err, Error::PromptParse { ref set, ref field, .. } if set == "s1" && field == "settings"));
        let err = parse_prompts("s2:\n  settings: [a]\n").unwrap_err();
        assert!(matches!(err, Error::PromptParse { ref field, .. } if field == "subject"));
        let err = parse_prompts("s3:\n  subject: x\n  settings: [a, 3]\n").unwrap_err();
        assert!(matches!(err, Error::PromptParse { ref field, .. } if field == "settings[1]"));
    }
}
