//! Prompt templates stored as plain text files.
//!
//! A file is split into sections by lines consisting solely of `###`.
//! With one section, it is the query body. Otherwise the first section is
//! a header (may be empty), the last is the body, and everything between
//! are literal exemplar blocks. The body may reference `{passage}`,
//! `{question}`, `{predicted_answer}` and `{gold_answer}`; braces around
//! anything that is not a lowercase identifier are kept literally.

use std::path::Path;

use super::{CorpusError, Result, UNANSWERABLE_PHRASE};

pub const PLACEHOLDERS: [&str; 4] = ["passage", "question", "predicted_answer", "gold_answer"];
pub const DELIMITER: &str = "###";

pub const DEFAULT_ANSWER: &str = include_str!("../../templates/answer.txt");
pub const DEFAULT_FEEDBACK_ANNOTATION: &str = include_str!("../../templates/feedback_annotation.txt");
pub const DEFAULT_FEEDBACK_PREDICTION: &str = include_str!("../../templates/feedback_prediction.txt");

#[derive(Clone, Copy, Debug, Default)]
pub struct Bindings<'a> {
    pub passage: Option<&'a str>,
    pub question: Option<&'a str>,
    pub predicted_answer: Option<&'a str>,
    pub gold_answer: Option<&'a str>,
}

impl<'a> Bindings<'a> {
    fn get(&self, name: &str) -> Option<&'a str> {
        match name {
            "passage" => self.passage,
            "question" => self.question,
            "predicted_answer" => self.predicted_answer,
            "gold_answer" => self.gold_answer,
            _ => None,
        }
    }
}

enum Piece<'t> {
    Text(&'t str),
    Slot(&'t str),
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    let mut literal_start = 0usize;
    let mut offset = 0usize;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_ident(&after[..close]) => {
                let abs_open = offset + open;
                if abs_open > literal_start {
                    out.push(Piece::Text(&text[literal_start..abs_open]));
                }
                out.push(Piece::Slot(&after[..close]));
                let consumed = open + 1 + close + 1;
                offset += consumed;
                literal_start = offset;
                rest = &rest[consumed..];
            }
            _ => {
                offset += open + 1;
                rest = &rest[open + 1..];
            }
        }
    }
    if literal_start < text.len() {
        out.push(Piece::Text(&text[literal_start..]));
    }
    out
}

fn slots(text: &str) -> Vec<&str> {
    pieces(text)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Slot(s) => Some(s),
            Piece::Text(_) => None,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub header: Option<String>,
    pub exemplars: Vec<String>,
    pub body: String,
}

impl PromptTemplate {
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut sections: Vec<String> = vec![String::new()];
        for line in text.split_inclusive('\n') {
            if line.trim_end_matches(['\n', '\r']) == DELIMITER {
                sections.push(String::new());
            } else {
                sections.last_mut().expect("non-empty").push_str(line);
            }
        }
        let mut sections: Vec<String> =
            sections.into_iter().map(|s| s.trim_matches(['\n', '\r']).to_string()).collect();
        let body = sections.pop().expect("non-empty");
        let header = if sections.is_empty() { None } else { Some(sections.remove(0)).filter(|h| !h.is_empty()) };
        let t = Self { name: name.to_string(), header, exemplars: sections, body };
        t.check()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(&name, &text)
    }

    fn check(&self) -> Result<()> {
        let err = |m: String| CorpusError::Template(format!("{}: {m}", self.name));
        if self.body.trim().is_empty() {
            return Err(err("empty query body".into()));
        }
        for (what, text) in self.header.iter().map(|h| ("header", h)).chain(std::iter::once(("body", &self.body))) {
            if let Some(bad) = slots(text).into_iter().find(|s| !PLACEHOLDERS.contains(s)) {
                return Err(err(format!("unknown placeholder {{{bad}}} in {what}")));
            }
        }
        for (i, ex) in self.exemplars.iter().enumerate() {
            if let Some(s) = slots(ex).first() {
                return Err(err(format!("exemplar {} contains placeholder {{{s}}}", i + 1)));
            }
        }
        Ok(())
    }

    /// Placeholders referenced by the header and body, in order of appearance.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in self.header.iter().flat_map(|h| slots(h)).chain(slots(&self.body)) {
            if !out.iter().any(|o| o == s) {
                out.push(s.to_string());
            }
        }
        out
    }

    fn bind(&self, text: &str, b: &Bindings) -> Result<String> {
        let mut out = String::with_capacity(text.len());
        for p in pieces(text) {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => out.push_str(b.get(s).ok_or_else(|| {
                    CorpusError::Template(format!("{}: placeholder {{{s}}} is not bound", self.name))
                })?),
            }
        }
        Ok(out)
    }

    /// Header, the first `shots` exemplars, then the bound body, joined by
    /// newlines.
    pub fn render(&self, bindings: &Bindings, shots: usize) -> Result<String> {
        if shots > self.exemplars.len() {
            return Err(CorpusError::Template(format!(
                "{}: {shots} shots requested but only {} exemplars",
                self.name,
                self.exemplars.len()
            )));
        }
        let mut parts = Vec::with_capacity(shots + 2);
        if let Some(h) = &self.header {
            parts.push(self.bind(h, bindings)?);
        }
        parts.extend(self.exemplars[..shots].iter().cloned());
        parts.push(self.bind(&self.body, bindings)?);
        Ok(parts.join("\n"))
    }

    /// Answer-prediction templates need a passage and question slot and at
    /// least one answerable and one unanswerable exemplar.
    pub fn validate_answer_template(&self) -> Result<()> {
        let err = |m: &str| CorpusError::Template(format!("{}: {m}", self.name));
        let ph = self.placeholders();
        if !ph.iter().any(|p| p == "passage") || !ph.iter().any(|p| p == "question") {
            return Err(err("answer template must reference {passage} and {question}"));
        }
        let unanswerable = self.exemplars.iter().filter(|e| e.to_lowercase().contains(UNANSWERABLE_PHRASE)).count();
        if unanswerable == 0 || unanswerable == self.exemplars.len() {
            return Err(err("answer template needs both an answerable and an unanswerable exemplar"));
        }
        Ok(())
    }

    pub fn default_answer() -> Self {
        Self::parse("answer", DEFAULT_ANSWER).expect("bundled template parses")
    }

    pub fn default_feedback_annotation() -> Self {
        Self::parse("feedback_annotation", DEFAULT_FEEDBACK_ANNOTATION).expect("bundled template parses")
    }

    pub fn default_feedback_prediction() -> Self {
        Self::parse("feedback_prediction", DEFAULT_FEEDBACK_PREDICTION).expect("bundled template parses")
    }
}
