//! Prompt templates and rendering.
//!
//! The built-in templates live in `prompts/*.txt` next to the crate manifest
//! and are compiled in; a directory holding files with the same names
//! overrides them at load time.
//!
//! Placeholders are `{question}`, `{answers}`, `{context}`, `{queries}` and
//! `{num}`. `{answers}` and `{context}` are optional: when unbound, the line
//! holding them is removed, together with one following blank line if the
//! placeholder was the whole line. Any other unbound placeholder is an error.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Passage;

const OPTIONAL: &[&str] = &["answers", "context"];

static PLACEHOLDER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"));

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no binding for placeholder {{{0}}}")]
    MissingBinding(String),
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    Expand,
    Select,
    Refine,
    Answer,
    TrainInfer,
}

impl TemplateName {
    pub const ALL: [TemplateName; 5] = [
        TemplateName::Expand,
        TemplateName::Select,
        TemplateName::Refine,
        TemplateName::Answer,
        TemplateName::TrainInfer,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateName::Expand => "expand.txt",
            TemplateName::Select => "select.txt",
            TemplateName::Refine => "refine.txt",
            TemplateName::Answer => "answer.txt",
            TemplateName::TrainInfer => "train_infer.txt",
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateName::Expand => include_str!("../prompts/expand.txt"),
            TemplateName::Select => include_str!("../prompts/select.txt"),
            TemplateName::Refine => include_str!("../prompts/refine.txt"),
            TemplateName::Answer => include_str!("../prompts/answer.txt"),
            TemplateName::TrainInfer => include_str!("../prompts/train_infer.txt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
}

impl PromptTemplate {
    pub fn builtin(name: TemplateName) -> Self {
        Self {
            name,
            body: name.builtin_body().to_string(),
        }
    }

    pub fn placeholders(&self) -> Vec<String> {
        PLACEHOLDER_RE
            .captures_iter(&self.body)
            .map(|c| c[1].to_string())
            .collect()
    }
}

/// The five templates used by the pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: BTreeMap<TemplateName, PromptTemplate>,
}

impl PromptSet {
    pub fn builtin() -> Self {
        Self {
            templates: TemplateName::ALL
                .into_iter()
                .map(|n| (n, PromptTemplate::builtin(n)))
                .collect(),
        }
    }

    /// Built-in templates, replaced by any same-named file found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for name in TemplateName::ALL {
            let path = dir.join(name.file_name());
            if path.exists() {
                let body = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                set.templates.insert(name, PromptTemplate { name, body });
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        &self.templates[&name]
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Placeholder values keyed by name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings(BTreeMap<String, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: impl Into<String>) -> Self {
        self.0.insert(name.to_string(), value.into());
        self
    }

    pub fn set(&mut self, name: &str, value: impl Into<String>) {
        self.0.insert(name.to_string(), value.into());
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }
}

pub fn render_prompt(
    template: &PromptTemplate,
    bindings: &Bindings,
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.body.len() * 2);
    let mut lines = template.body.split_inclusive('\n').peekable();
    while let Some(line) = lines.next() {
        let mut drop_line = false;
        for cap in PLACEHOLDER_RE.captures_iter(line) {
            let name = &cap[1];
            if bindings.get(name).is_none() {
                if OPTIONAL.contains(&name) {
                    drop_line = true;
                } else {
                    return Err(PromptError::MissingBinding(name.to_string()));
                }
            }
        }
        if drop_line {
            let whole = PLACEHOLDER_RE.is_match(line)
                && PLACEHOLDER_RE.replace_all(line.trim(), "").is_empty();
            if whole && lines.peek() == Some(&"\n") {
                lines.next();
            }
            continue;
        }
        let rendered = PLACEHOLDER_RE.replace_all(line, |c: &regex::Captures<'_>| {
            bindings.get(&c[1]).unwrap_or_default().to_string()
        });
        out.push_str(&rendered);
    }
    Ok(out)
}

/// Renders passages as `[i] title\ntext` blocks, numbered from 1 in the
/// given order and separated by blank lines.
pub fn render_context<'a>(passages: impl IntoIterator<Item = &'a Passage>) -> String {
    passages
        .into_iter()
        .enumerate()
        .map(|(i, p)| format!("[{}] {}\n{}", i + 1, p.title, p.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Gold answers as they appear in the `Answers:` slot.
pub fn join_answers(answers: &[String]) -> String {
    answers.join("; ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn passages(n: usize) -> Vec<Passage> {
        (1..=n)
            .map(|i| Passage::new(i as u64, format!("Title {i}"), format!("Body {i}.")))
            .collect()
    }

    fn select_bindings(n: usize) -> Bindings {
        Bindings::new()
            .with("num", n.to_string())
            .with("question", "Who?")
            .with("context", render_context(&passages(n)))
            .with("queries", "a\nb")
    }

    #[test]
    fn select_prompt_announces_pool_size() {
        let out = render_prompt(
            &PromptTemplate::builtin(TemplateName::Select),
            &select_bindings(20),
        )
        .unwrap();
        assert!(out.contains("I will provide you with 20 passages"));
        assert!(!out.contains('{'));
    }

    #[test]
    fn select_prompt_is_byte_exact() {
        let out = render_prompt(
            &PromptTemplate::builtin(TemplateName::Select),
            &select_bindings(2).with("answers", "Paris; France"),
        )
        .unwrap();
        let expected = "I will provide you with 2 passages, each indicated by a numerical identifier [].\n\
Select the passages based on their relevance to the search query: Who?.\n\
[1] Title 1\nBody 1.\n\n[2] Title 2\nBody 2.\n\n\
Search Query: Who?\n\
Sub-Queries:\na\nb\n\
Answers: Paris; France\n\
Please follow the steps below:\n\
Step 1. Please list up the information requirements to answer the query and sub-queries.\n\
Step 2. For each requirement in Step 1, find the passages that has the information of the requirement.\n\
Step 3. Choose the passages that mostly covers clear and diverse information to answer the query. Number of passages is unlimited. The format of final output should be '### Final Selection: [] [].\\n', e.g., '### Final Selection: [2] [1].\\n'.\n";
        assert_eq!(out, expected);
    }

    #[test]
    fn answers_line_removed_when_unbound() {
        let t = PromptTemplate::builtin(TemplateName::Expand);
        let out = render_prompt(&t, &Bindings::new().with("question", "Q?")).unwrap();
        assert!(!out.contains("Answers:"));
        assert!(out.contains("Search Query: Q?\nRules:\n"));
        let with = render_prompt(
            &t,
            &Bindings::new().with("question", "Q?").with("answers", "A"),
        )
        .unwrap();
        assert!(with.contains("Search Query: Q?\nAnswers: A\nRules:\n"));
    }

    #[test]
    fn missing_question_is_an_error() {
        let t = PromptTemplate::builtin(TemplateName::Refine);
        let b = Bindings::new().with("num", "3").with("context", "x");
        assert!(matches!(
            render_prompt(&t, &b),
            Err(PromptError::MissingBinding(name)) if name == "question"
        ));
    }

    #[test]
    fn answer_prompt_without_context() {
        let t = PromptTemplate::builtin(TemplateName::Answer);
        let out = render_prompt(&t, &Bindings::new().with("question", "Q?")).unwrap();
        assert_eq!(
            out,
            "Answer the question below concisely in a few words.\nQuestion: Q?\n\n"
        );
        let with = render_prompt(
            &t,
            &Bindings::new()
                .with("question", "Q?")
                .with("context", "[1] T\nx"),
        )
        .unwrap();
        assert_eq!(
            with,
            "[1] T\nx\n\nAnswer the question below concisely in a few words.\nQuestion: Q?\n\n"
        );
    }

    #[test]
    fn bound_values_are_not_rescanned() {
        let t = PromptTemplate::builtin(TemplateName::Answer);
        let out = render_prompt(
            &t,
            &Bindings::new()
                .with("question", "{context}")
                .with("context", "c"),
        )
        .unwrap();
        assert!(out.contains("Question: {context}\n"));
    }

    #[test]
    fn train_prompt_has_no_subqueries_slot() {
        let t = PromptTemplate::builtin(TemplateName::TrainInfer);
        assert_eq!(
            t.placeholders(),
            vec!["num", "question", "context", "question"]
        );
        let out = render_prompt(&t, &select_bindings(20)).unwrap();
        assert!(out.contains("20 passages"));
        assert!(out.ends_with("No explanations, no headings, no bullets, no markdown.\n"));
    }

    #[test]
    fn context_blocks() {
        let ps = passages(2);
        assert_eq!(
            render_context(&ps),
            "[1] Title 1\nBody 1.\n\n[2] Title 2\nBody 2."
        );
    }

    #[test]
    fn directory_overrides_builtin() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("answer.txt"), "Q: {question}\n").unwrap();
        let set = PromptSet::load_dir(dir.path()).unwrap();
        assert_eq!(set.get(TemplateName::Answer).body, "Q: {question}\n");
        assert_eq!(
            set.get(TemplateName::Select),
            &PromptTemplate::builtin(TemplateName::Select)
        );
    }
}
