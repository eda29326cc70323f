//! Class-name prompt templates.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

pub const PLACEHOLDER: &str = "<category>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptMode {
    /// The placeholder becomes the class name.
    Literal,
    /// The placeholder becomes the decimal class index.
    Numeric,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    template: String,
    mode: PromptMode,
}

impl PromptTemplate {
    pub fn new(template: impl Into<String>, mode: PromptMode) -> Result<Self> {
        let template = template.into();
        let count = template.matches(PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::Config(format!(
                "template {template:?} must contain {PLACEHOLDER} exactly once, found {count}"
            )));
        }
        Ok(PromptTemplate { template, mode })
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn render(&self, class_name: &str, class_index: usize) -> String {
        match self.mode {
            PromptMode::Literal => self.template.replace(PLACEHOLDER, class_name),
            PromptMode::Numeric => self.template.replace(PLACEHOLDER, &class_index.to_string()),
        }
    }
}

/// The four description syntaxes compared in the prompt ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptPreset {
    #[default]
    PersonDoing,
    YogaPose,
    Category,
    Numeric,
}

impl PromptPreset {
    pub const ALL: [PromptPreset; 4] = [
        PromptPreset::PersonDoing,
        PromptPreset::YogaPose,
        PromptPreset::Category,
        PromptPreset::Numeric,
    ];

    pub fn template(self) -> PromptTemplate {
        let (text, mode) = match self {
            PromptPreset::PersonDoing => {
                ("Image of a person doing the yoga pose <category>", PromptMode::Literal)
            }
            PromptPreset::YogaPose => ("Yoga pose <category>", PromptMode::Literal),
            PromptPreset::Category => (PLACEHOLDER, PromptMode::Literal),
            PromptPreset::Numeric => (PLACEHOLDER, PromptMode::Numeric),
        };
        PromptTemplate::new(text, mode).expect("preset templates are valid")
    }

    pub fn name(self) -> &'static str {
        match self {
            PromptPreset::PersonDoing => "person-doing",
            PromptPreset::YogaPose => "yoga-pose",
            PromptPreset::Category => "category",
            PromptPreset::Numeric => "numeric",
        }
    }
}

impl fmt::Display for PromptPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown prompt preset {s:?} (expected person-doing, yoga-pose, category or numeric)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPrompt {
    pub class_index: usize,
    pub text: String,
}

/// One prompt per L3 class in taxonomy order.
pub fn build_class_prompts(taxonomy: &Taxonomy, template: &PromptTemplate) -> Result<Vec<ClassPrompt>> {
    let names: Vec<&str> = taxonomy.class_names().collect();
    prompts_for_names(&names, template)
}

/// Renders one prompt per name; rejects lists whose prompts collide.
pub fn prompts_for_names<S: AsRef<str>>(names: &[S], template: &PromptTemplate) -> Result<Vec<ClassPrompt>> {
    let prompts: Vec<ClassPrompt> = names
        .iter()
        .map(AsRef::as_ref)
        .enumerate()
        .map(|(i, name)| ClassPrompt {
            class_index: i,
            text: template.render(name, i),
        })
        .collect();
    let mut seen = HashSet::new();
    for p in &prompts {
        if !seen.insert(p.text.as_str()) {
            return Err(Error::Config(format!(
                "ambiguous prompts: {:?} is produced for more than one class",
                p.text
            )));
        }
    }
    Ok(prompts)
}
