//! Prompt templates with `{placeholder}` substitution.
//!
//! Built-in templates are compiled in; a directory may override any of
//! `decompose.tmpl`, `reason.tmpl`, `answer.tmpl` and `synthesize.tmpl`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {name} is missing placeholder {{{placeholder}}}")]
    MissingPlaceholder { name: &'static str, placeholder: &'static str },
    #[error("reading template {name}: {source}")]
    Io {
        name: &'static str,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Decompose,
    Reason,
    Answer,
    Synthesize,
}

impl PromptKind {
    pub const ALL: [PromptKind; 4] = [
        PromptKind::Decompose,
        PromptKind::Reason,
        PromptKind::Answer,
        PromptKind::Synthesize,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptKind::Decompose => "decompose.tmpl",
            PromptKind::Reason => "reason.tmpl",
            PromptKind::Answer => "answer.tmpl",
            PromptKind::Synthesize => "synthesize.tmpl",
        }
    }

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            PromptKind::Decompose => &["query"],
            PromptKind::Reason => &["sub_question", "evidence_so_far"],
            PromptKind::Answer => &["sub_question", "evidence"],
            PromptKind::Synthesize => &["query", "qa_pairs", "evidence"],
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            PromptKind::Decompose => include_str!("../prompts/decompose.tmpl"),
            PromptKind::Reason => include_str!("../prompts/reason.tmpl"),
            PromptKind::Answer => include_str!("../prompts/answer.tmpl"),
            PromptKind::Synthesize => include_str!("../prompts/synthesize.tmpl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    text: String,
}

impl Template {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Single-pass substitution: inserted values are never rescanned, and
    /// unknown `{...}` groups are left untouched.
    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let lookup: HashMap<&str, &str> = values.iter().copied().collect();
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if lookup.contains_key(&after[..close]) => {
                    out.push_str(lookup[&after[..close]]);
                    rest = &after[close + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }

    fn has_placeholder(&self, name: &str) -> bool {
        self.text.contains(&format!("{{{name}}}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub decompose: Template,
    pub reason: Template,
    pub answer: Template,
    pub synthesize: Template,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            decompose: Template::new(PromptKind::Decompose.builtin()),
            reason: Template::new(PromptKind::Reason.builtin()),
            answer: Template::new(PromptKind::Answer.builtin()),
            synthesize: Template::new(PromptKind::Synthesize.builtin()),
        }
    }
}

impl PromptSet {
    /// Built-ins overridden by whichever template files exist in `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let mut set = Self::default();
        for kind in PromptKind::ALL {
            let path = dir.as_ref().join(kind.file_name());
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                name: kind.file_name(),
                source,
            })?;
            *set.get_mut(kind) = Template::new(text);
        }
        set.validate()?;
        Ok(set)
    }

    pub fn get(&self, kind: PromptKind) -> &Template {
        match kind {
            PromptKind::Decompose => &self.decompose,
            PromptKind::Reason => &self.reason,
            PromptKind::Answer => &self.answer,
            PromptKind::Synthesize => &self.synthesize,
        }
    }

    fn get_mut(&mut self, kind: PromptKind) -> &mut Template {
        match kind {
            PromptKind::Decompose => &mut self.decompose,
            PromptKind::Reason => &mut self.reason,
            PromptKind::Answer => &mut self.answer,
            PromptKind::Synthesize => &mut self.synthesize,
        }
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        for kind in PromptKind::ALL {
            for &p in kind.placeholders() {
                if !self.get(kind).has_placeholder(p) {
                    return Err(TemplateError::MissingPlaceholder { name: kind.file_name(), placeholder: p });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_have_their_placeholders() {
        PromptSet::default().validate().unwrap();
    }

    #[test]
    fn render_is_single_pass() {
        let t = Template::new("Q: {query} / {other} / {query}");
        assert_eq!(t.render(&[("query", "why {query}?")]), "Q: why {query}? / {other} / why {query}?");
    }

    #[test]
    fn directory_override() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("answer.tmpl"), "A {sub_question} :: {evidence}").unwrap();
        let set = PromptSet::load_dir(dir.path()).unwrap();
        assert_eq!(set.answer.text(), "A {sub_question} :: {evidence}");
        assert_eq!(set.reason, PromptSet::default().reason);

        fs::write(dir.path().join("decompose.tmpl"), "no placeholder").unwrap();
        assert!(matches!(
            PromptSet::load_dir(dir.path()),
            Err(TemplateError::MissingPlaceholder { placeholder: "query", .. })
        ));
    }
}
