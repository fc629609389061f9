//! Fact knowledge base: parse region-description annotations into canonical
//! fact strings, deduplicate, and persist as JSON Lines.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One region's raw annotations: attribute pairs and relationship triplets.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRegionRecord {
    pub region_id: String,
    #[serde(default)]
    pub attributes: Vec<(String, String)>,
    #[serde(default)]
    pub relationships: Vec<(String, String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactKind {
    #[serde(rename = "attr")]
    Attribute,
    #[serde(rename = "rel")]
    Relationship,
}

/// A canonical language description of an attribute or relationship.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fact {
    /// First 16 hex chars of SHA-256 over the canonical text.
    pub id: String,
    pub text: String,
    pub kind: FactKind,
    /// Originating region id.
    pub source: String,
}

impl Fact {
    pub fn new(text: String, kind: FactKind, source: String) -> Self {
        let id = fact_id(&text);
        Self {
            id,
            text,
            kind,
            source,
        }
    }
}

pub fn fact_id(canonical_text: &str) -> String {
    let digest = Sha256::digest(canonical_text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Surface-form to canonical-form token mapping. Canonical forms always map
/// to themselves, so applying the lexicon is idempotent.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    map: BTreeMap<String, String>,
}

impl Lexicon {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds from (surface, canonical) pairs, lowercasing both sides.
    /// Rejects mappings whose canonical form is itself remapped elsewhere.
    pub fn from_pairs<I: IntoIterator<Item = (String, String)>>(pairs: I) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (surface, canonical) in pairs {
            let s = surface.trim().to_lowercase();
            let c = canonical.trim().to_lowercase();
            if s.is_empty() || c.is_empty() {
                return Err(Error::Format("lexicon entries must be non-empty".into()));
            }
            map.insert(s, c);
        }
        let canonicals: Vec<String> = map.values().cloned().collect();
        for c in canonicals {
            match map.get(&c) {
                Some(existing) if existing != &c => {
                    return Err(Error::Format(format!(
                        "lexicon not idempotent: canonical form {c:?} maps to {existing:?}"
                    )));
                }
                Some(_) => {}
                None => {
                    map.insert(c.clone(), c);
                }
            }
        }
        Ok(Self { map })
    }

    /// Loads a JSON object file: {"surface": "canonical", ...}.
    pub fn from_reader(r: impl std::io::Read) -> Result<Self> {
        let raw: BTreeMap<String, String> = serde_json::from_reader(r)?;
        Self::from_pairs(raw)
    }

    pub fn canonical_token<'a>(&'a self, token: &'a str) -> &'a str {
        self.map.get(token).map(String::as_str).unwrap_or(token)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Lowercase, collapse whitespace, map each token through the lexicon.
/// Stable under re-application.
pub fn canonicalize(text: &str, lex: &Lexicon) -> String {
    text.split_whitespace()
        .map(|t| lex.canonical_token(&t.to_lowercase()).to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deduplicated, id-ordered fact collection.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    facts: Vec<Fact>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KbStats {
    pub attributes: usize,
    pub relationships: usize,
    pub total: usize,
}

/// Result of streaming records through the parser.
#[derive(Debug, Default)]
pub struct ParseOutcome {
    /// Canonicalized facts, pre-dedup, in input order.
    pub facts: Vec<Fact>,
    /// Annotations dropped as malformed (plus unparseable lines, one each).
    pub skipped: usize,
    pub warnings: Vec<String>,
}

fn nonempty(parts: &[&str]) -> bool {
    parts.iter().all(|p| !p.trim().is_empty())
}

/// Renders and canonicalizes every annotation of every record. Malformed
/// annotations (empty components) and unparseable lines are skipped with a
/// counted warning; the stream never aborts.
pub fn parse_records(
    lines: impl Iterator<Item = std::io::Result<String>>,
    lex: &Lexicon,
) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRegionRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                out.skipped += 1;
                out.warnings.push(format!("line {}: bad record: {e}", lineno + 1));
                continue;
            }
        };
        for (attr, obj) in &record.attributes {
            if !nonempty(&[attr, obj]) {
                out.skipped += 1;
                out.warnings
                    .push(format!("line {}: empty attribute component", lineno + 1));
                continue;
            }
            let text = canonicalize(&format!("{attr} {obj}"), lex);
            out.facts
                .push(Fact::new(text, FactKind::Attribute, record.region_id.clone()));
        }
        for (subj, pred, obj) in &record.relationships {
            if !nonempty(&[subj, pred, obj]) {
                out.skipped += 1;
                out.warnings
                    .push(format!("line {}: empty relationship component", lineno + 1));
                continue;
            }
            let text = canonicalize(&format!("{subj} {pred} {obj}"), lex);
            out.facts.push(Fact::new(
                text,
                FactKind::Relationship,
                record.region_id.clone(),
            ));
        }
    }
    Ok(out)
}

impl KnowledgeBase {
    /// Deduplicates by canonical text (first occurrence's source wins) and
    /// orders by fact id.
    ///
    /// Panics if two distinct canonical texts collide on the same id; that
    /// would corrupt every downstream artifact.
    pub fn build(facts: Vec<Fact>) -> Self {
        let mut seen: BTreeMap<String, Fact> = BTreeMap::new();
        for fact in facts {
            match seen.get(&fact.id) {
                None => {
                    seen.insert(fact.id.clone(), fact);
                }
                Some(existing) => {
                    assert_eq!(
                        existing.text, fact.text,
                        "fact id collision: {:?} vs {:?} share id {}",
                        existing.text, fact.text, fact.id
                    );
                }
            }
        }
        Self {
            facts: seen.into_values().collect(),
        }
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Fact> {
        self.facts
            .binary_search_by(|f| f.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.facts[i])
    }

    pub fn stats(&self) -> KbStats {
        let attributes = self
            .facts
            .iter()
            .filter(|f| f.kind == FactKind::Attribute)
            .count();
        KbStats {
            attributes,
            relationships: self.facts.len() - attributes,
            total: self.facts.len(),
        }
    }

    /// One JSON object per line, already id-sorted.
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        for fact in &self.facts {
            serde_json::to_writer(&mut w, fact)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let mut facts = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fact: Fact = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("bad knowledge-base line: {e}")))?;
            if fact.id != fact_id(&fact.text) {
                return Err(Error::Format(format!(
                    "fact id {} does not match its text",
                    fact.id
                )));
            }
            facts.push(fact);
        }
        Ok(Self::build(facts))
    }
}

/// Re-expresses a fact as a raw record that parses back to the same fact.
/// Attribute texts split as (first token, rest); relationships as
/// (first, second, rest) — both render back to the identical canonical text.
pub fn fact_to_record(fact: &Fact) -> Result<RawRegionRecord> {
    let tokens: Vec<&str> = fact.text.split(' ').collect();
    match fact.kind {
        FactKind::Attribute => {
            if tokens.len() < 2 {
                return Err(Error::Invalid(format!(
                    "attribute fact {:?} has fewer than 2 tokens",
                    fact.text
                )));
            }
            Ok(RawRegionRecord {
                region_id: fact.source.clone(),
                attributes: vec![(tokens[0].to_string(), tokens[1..].join(" "))],
                relationships: vec![],
            })
        }
        FactKind::Relationship => {
            if tokens.len() < 3 {
                return Err(Error::Invalid(format!(
                    "relationship fact {:?} has fewer than 3 tokens",
                    fact.text
                )));
            }
            Ok(RawRegionRecord {
                region_id: fact.source.clone(),
                attributes: vec![],
                relationships: vec![(
                    tokens[0].to_string(),
                    tokens[1].to_string(),
                    tokens[2..].join(" "),
                )],
            })
        }
    }
}
