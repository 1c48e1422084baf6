//! Prompt templates: UTF-8 text with `{{name}}` placeholders.
//!
//! A built-in set is compiled into the binary; a template directory can
//! override any of them by file name (`<name>.txt`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template:?}: no value for placeholder {{{{{name}}}}}")]
    MissingValue { template: String, name: String },
    #[error("template {template:?}: unterminated placeholder")]
    Unterminated { template: String },
    #[error("cannot read template directory: {0}")]
    Io(#[from] std::io::Error),
}

pub const TEMPLATE_NAMES: [&str; 10] = [
    "deductive_system",
    "deductive",
    "inductive_system",
    "inductive",
    "abductive_system",
    "abductive",
    "debate",
    "reminder",
    "synthesis_system",
    "synthesis",
];

const BUILTIN: [(&str, &str); 10] = [
    (
        "deductive_system",
        include_str!("../../templates/deductive_system.txt"),
    ),
    ("deductive", include_str!("../../templates/deductive.txt")),
    (
        "inductive_system",
        include_str!("../../templates/inductive_system.txt"),
    ),
    ("inductive", include_str!("../../templates/inductive.txt")),
    (
        "abductive_system",
        include_str!("../../templates/abductive_system.txt"),
    ),
    ("abductive", include_str!("../../templates/abductive.txt")),
    ("debate", include_str!("../../templates/debate.txt")),
    ("reminder", include_str!("../../templates/reminder.txt")),
    (
        "synthesis_system",
        include_str!("../../templates/synthesis_system.txt"),
    ),
    ("synthesis", include_str!("../../templates/synthesis.txt")),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            templates: BUILTIN
                .iter()
                .map(|(n, t)| ((*n).to_owned(), (*t).to_owned()))
                .collect(),
        }
    }

    /// Built-in templates overridden by any `<name>.txt` found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for name in TEMPLATE_NAMES {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                set.templates
                    .insert(name.to_owned(), fs::read_to_string(path)?);
            }
        }
        Ok(set)
    }

    /// Writes every template into `dir` as `<name>.txt`.
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, text) in &self.templates {
            fs::write(dir.join(format!("{name}.txt")), text)?;
        }
        Ok(())
    }

    pub fn with_template(mut self, name: &str, text: impl Into<String>) -> Self {
        self.templates.insert(name.to_owned(), text.into());
        self
    }

    pub fn raw(&self, name: &str) -> Result<&str, TemplateError> {
        self.templates
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| TemplateError::UnknownTemplate(name.into()))
    }

    /// SHA-256 over every template name and body, in name order.
    pub fn hash(&self) -> String {
        let mut buf = String::new();
        for (name, text) in &self.templates {
            buf.push_str(name);
            buf.push('\0');
            buf.push_str(text);
            buf.push('\0');
        }
        crate::sha256_hex(buf)
    }

    /// Substitutes placeholders in a single pass; substituted values are
    /// never re-scanned, so code containing `{{` is inserted verbatim.
    pub fn render(&self, name: &str, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let template = self.raw(name)?;
        let mut out = String::with_capacity(template.len());
        let mut rest = template;
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after
                .find("}}")
                .ok_or_else(|| TemplateError::Unterminated {
                    template: name.into(),
                })?;
            let key = after[..end].trim();
            let value = values
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::MissingValue {
                    template: name.into(),
                    name: key.into(),
                })?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out.trim_end().to_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_without_rescanning_values() {
        let set = TemplateSet::builtin().with_template("t", "a {{x}} b {{ y }}");
        assert_eq!(
            set.render("t", &[("x", "{{y}}"), ("y", "2")]).unwrap(),
            "a {{y}} b 2"
        );
    }

    #[test]
    fn missing_values_and_bad_syntax_fail() {
        let set = TemplateSet::builtin()
            .with_template("t", "{{x}}")
            .with_template("u", "{{x");
        assert!(matches!(
            set.render("t", &[]),
            Err(TemplateError::MissingValue { .. })
        ));
        assert!(matches!(
            set.render("u", &[("x", "1")]),
            Err(TemplateError::Unterminated { .. })
        ));
        assert!(matches!(
            set.render("nope", &[]),
            Err(TemplateError::UnknownTemplate(_))
        ));
    }

    #[test]
    fn hash_tracks_content() {
        let a = TemplateSet::builtin();
        assert_eq!(a.hash(), TemplateSet::builtin().hash());
        assert_ne!(
            a.hash(),
            a.clone().with_template("reminder", "other").hash()
        );
    }

    #[test]
    fn directory_overrides_builtin() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("reminder.txt"), "custom").unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        assert_eq!(set.raw("reminder").unwrap(), "custom");
        assert_eq!(
            set.raw("debate").unwrap(),
            TemplateSet::builtin().raw("debate").unwrap()
        );
    }
}
