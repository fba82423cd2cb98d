//! Domain- and authenticity-specific prompts for the description service.
//!
//! Placeholders are `{image}`, `{mask}`, `{domain}` and `{source}`; `{{` and
//! `}}` are literal braces.

use std::path::Path;

use crate::domain::DomainCategory;

use super::SourceEntry;

pub const PLACEHOLDERS: [&str; 4] = ["image", "mask", "domain", "source"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("no value for placeholder `{{{0}}}`")]
    MissingValue(String),
    #[error("unknown placeholder `{{{0}}}`")]
    UnknownPlaceholder(String),
    #[error("unterminated placeholder in template")]
    Unterminated,
    #[error("{0} template is empty")]
    Empty(String),
    #[error("{name} template must reference `{{{placeholder}}}`")]
    MustReference { name: String, placeholder: &'static str },
    #[error("authentic template {0} must not reference `{{mask}}`")]
    AuthenticMask(String),
    #[error("template {domain}/{kind} domain or authenticity does not match the entry")]
    Mismatch { domain: DomainCategory, kind: &'static str },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub domain: DomainCategory,
    pub authentic: bool,
    pub body: String,
}

fn kind(authentic: bool) -> &'static str {
    if authentic {
        "authentic"
    } else {
        "tampered"
    }
}

/// Template file name for a domain/authenticity pair.
pub fn template_file_name(domain: DomainCategory, authentic: bool) -> String {
    format!("{}-{}.txt", domain.as_str(), kind(authentic))
}

enum Piece<'a> {
    Text(&'a str),
    Brace(char),
    Placeholder(&'a str),
}

fn pieces(body: &str) -> Result<Vec<Piece<'_>>, TemplateError> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push(Piece::Text(&rest[..pos]));
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push(Piece::Brace(tail.as_bytes()[0] as char));
            rest = &tail[2..];
        } else if tail.starts_with('}') {
            out.push(Piece::Brace('}'));
            rest = &tail[1..];
        } else {
            let end = tail.find('}').ok_or(TemplateError::Unterminated)?;
            out.push(Piece::Placeholder(&tail[1..end]));
            rest = &tail[end + 1..];
        }
    }
    out.push(Piece::Text(rest));
    Ok(out)
}

impl PromptTemplate {
    /// Placeholder names in order of appearance.
    pub fn placeholders(&self) -> Result<Vec<String>, TemplateError> {
        Ok(pieces(&self.body)?
            .into_iter()
            .filter_map(|p| match p {
                Piece::Placeholder(name) => Some(name.to_string()),
                _ => None,
            })
            .collect())
    }

    fn name(&self) -> String {
        format!("{}/{}", self.domain, kind(self.authentic))
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.body.trim().is_empty() {
            return Err(TemplateError::Empty(self.name()));
        }
        let names = self.placeholders()?;
        if let Some(unknown) = names.iter().find(|n| !PLACEHOLDERS.contains(&n.as_str())) {
            return Err(TemplateError::UnknownPlaceholder(unknown.clone()));
        }
        let has = |p: &str| names.iter().any(|n| n == p);
        if !has("image") {
            return Err(TemplateError::MustReference { name: self.name(), placeholder: "image" });
        }
        match (self.authentic, has("mask")) {
            (false, false) => Err(TemplateError::MustReference { name: self.name(), placeholder: "mask" }),
            (true, true) => Err(TemplateError::AuthenticMask(self.name())),
            _ => Ok(()),
        }
    }

    /// Fills placeholders with `lookup`; `None` is a missing value.
    pub fn fill(&self, lookup: impl Fn(&str) -> Option<String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len());
        for piece in pieces(&self.body)? {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Brace(c) => out.push(c),
                Piece::Placeholder(name) => {
                    if !PLACEHOLDERS.contains(&name) {
                        return Err(TemplateError::UnknownPlaceholder(name.to_string()));
                    }
                    out.push_str(&lookup(name).ok_or_else(|| TemplateError::MissingValue(name.to_string()))?);
                }
            }
        }
        Ok(out)
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

/// Renders `template` for `entry`. Attachments are named by file name.
pub fn render_prompt(template: &PromptTemplate, entry: &SourceEntry) -> Result<String, TemplateError> {
    if template.domain != entry.domain || template.authentic != entry.authentic {
        return Err(TemplateError::Mismatch { domain: template.domain, kind: kind(template.authentic) });
    }
    template.fill(|name| match name {
        "image" => Some(file_name(&entry.image_path)),
        "mask" => entry.mask_path.as_deref().map(file_name),
        "domain" => Some(entry.domain.display_name().to_string()),
        "source" => Some(entry.source_name.clone()),
        _ => None,
    })
}

/// Exactly one template per domain and authenticity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    templates: Vec<PromptTemplate>,
}

const BUILTIN: [(DomainCategory, bool, &str); 6] = [
    (DomainCategory::Photoshop, false, include_str!("../../assets/templates/photoshop-tampered.txt")),
    (DomainCategory::Photoshop, true, include_str!("../../assets/templates/photoshop-authentic.txt")),
    (DomainCategory::Deepfake, false, include_str!("../../assets/templates/deepfake-tampered.txt")),
    (DomainCategory::Deepfake, true, include_str!("../../assets/templates/deepfake-authentic.txt")),
    (DomainCategory::Aigc, false, include_str!("../../assets/templates/aigc-tampered.txt")),
    (DomainCategory::Aigc, true, include_str!("../../assets/templates/aigc-authentic.txt")),
];

impl TemplateSet {
    pub fn new(templates: Vec<PromptTemplate>) -> Result<Self, TemplateError> {
        let mut ordered = Vec::with_capacity(6);
        for domain in DomainCategory::ALL {
            for authentic in [false, true] {
                let t = templates
                    .iter()
                    .find(|t| t.domain == domain && t.authentic == authentic)
                    .ok_or_else(|| TemplateError::Empty(format!("{domain}/{}", kind(authentic))))?;
                t.validate()?;
                ordered.push(t.clone());
            }
        }
        Ok(Self { templates: ordered })
    }

    pub fn builtin() -> Self {
        let templates = BUILTIN.iter().map(|&(domain, authentic, body)| PromptTemplate { domain, authentic, body: body.to_string() }).collect();
        Self::new(templates).expect("built-in templates are valid")
    }

    /// Reads `{domain}-{tampered|authentic}.txt` for all six pairs.
    pub fn load(dir: &Path) -> Result<Self, TemplateError> {
        let mut templates = Vec::with_capacity(6);
        for domain in DomainCategory::ALL {
            for authentic in [false, true] {
                let path = dir.join(template_file_name(domain, authentic));
                let body = std::fs::read_to_string(&path)
                    .map_err(|e| TemplateError::Io { path: path.display().to_string(), message: e.to_string() })?;
                templates.push(PromptTemplate { domain, authentic, body });
            }
        }
        Self::new(templates)
    }

    /// Writes the set in the layout [`load`](Self::load) reads.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for t in &self.templates {
            std::fs::write(dir.join(template_file_name(t.domain, t.authentic)), &t.body)?;
        }
        Ok(())
    }

    pub fn get(&self, domain: DomainCategory, authentic: bool) -> &PromptTemplate {
        &self.templates[domain.code() * 2 + usize::from(authentic)]
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.iter()
    }
}
