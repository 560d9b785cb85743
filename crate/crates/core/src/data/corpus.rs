use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One corpus entry, read from a JSON line `{id, title, abstract, body?}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, abstract_text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            title: title.into(),
            abstract_text: abstract_text.into(),
            body: None,
        }
    }

    fn has_content(&self) -> bool {
        !self.abstract_text.trim().is_empty()
            || self.body.as_deref().is_some_and(|b| !b.trim().is_empty())
    }

    /// Text fed to the tokenizer: title, abstract and body on separate lines.
    pub fn text(&self) -> String {
        let mut s = String::with_capacity(
            self.title.len() + self.abstract_text.len() + self.body.as_ref().map_or(0, String::len) + 2,
        );
        if !self.title.is_empty() {
            s.push_str(&self.title);
            s.push('\n');
        }
        s.push_str(&self.abstract_text);
        if let Some(b) = &self.body {
            s.push('\n');
            s.push_str(b);
        }
        s
    }
}

/// Drops title-only entries (no abstract and no body). Order is preserved.
pub fn filter_corpus(docs: Vec<Document>) -> Vec<Document> {
    docs.into_iter().filter(Document::has_content).collect()
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line)
            .map_err(|e| Error::format("corpus line", format!("{}:{}: {e}", path.display(), n + 1)))?;
        if !seen.insert(doc.id.clone()) {
            return Err(Error::contract(format!(
                "duplicate document id {:?} at {}:{}",
                doc.id,
                path.display(),
                n + 1
            )));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_corpus(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for d in docs {
        serde_json::to_writer(&mut out, d)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}
