//! Prompt templates with named `[Slot]` placeholders.
//!
//! Templates are plain text so their wording can be edited without a
//! rebuild. A slot bound to `None` removes every line that mentions it,
//! which is how optional sections (observation in the no-observation
//! variant, the single-candidate constraint) drop out.

use std::io;
use std::path::Path;

pub const ACTION_TEMPLATE: &str = include_str!("../templates/action.txt");
pub const ANSWER_TEMPLATE: &str = include_str!("../templates/answer.txt");
pub const REFLECTION_TEMPLATE: &str = include_str!("../templates/reflection.txt");
pub const GENERATED_FACT_TEMPLATE: &str = include_str!("../templates/generated_fact.txt");

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

    /// Substitutes slots in a single pass, so slot-like text inside a value
    /// is never expanded. Unknown bracketed text is left as is.
    pub fn render(&self, slots: &[(&str, Option<&str>)]) -> String {
        let lookup = |name: &str| slots.iter().find(|(n, _)| *n == name).map(|(_, v)| *v);
        let mut out = String::with_capacity(self.text.len() * 2);
        for line in self.text.split_inclusive('\n') {
            let mut rendered = String::with_capacity(line.len());
            let mut rest = line;
            let mut dropped = false;
            while let Some(open) = rest.find('[') {
                rendered.push_str(&rest[..open]);
                let after = &rest[open + 1..];
                match after.find(']').and_then(|close| lookup(&after[..close]).map(|v| (close, v))) {
                    Some((close, Some(value))) => {
                        rendered.push_str(value);
                        rest = &after[close + 1..];
                    }
                    Some((_, None)) => {
                        dropped = true;
                        break;
                    }
                    None => {
                        rendered.push('[');
                        rest = after;
                    }
                }
            }
            if !dropped {
                rendered.push_str(rest);
                out.push_str(&rendered);
            }
        }
        out.trim_end_matches('\n').to_string()
    }
}

/// The full set of prompts the agent uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub action: Template,
    pub answer: Template,
    pub reflection: Template,
    pub generated_fact: Template,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            action: Template::new(ACTION_TEMPLATE),
            answer: Template::new(ANSWER_TEMPLATE),
            reflection: Template::new(REFLECTION_TEMPLATE),
            generated_fact: Template::new(GENERATED_FACT_TEMPLATE),
        }
    }
}

impl PromptTemplates {
    /// Bundled templates, overridden by any of `action.txt`, `answer.txt`,
    /// `reflection.txt` or `generated_fact.txt` found in `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref();
        let mut t = Self::default();
        for (name, slot) in [
            ("action.txt", &mut t.action),
            ("answer.txt", &mut t.answer),
            ("reflection.txt", &mut t.reflection),
            ("generated_fact.txt", &mut t.generated_fact),
        ] {
            let path = dir.join(name);
            if path.exists() {
                *slot = Template::new(std::fs::read_to_string(path)?);
            }
        }
        Ok(t)
    }
}
