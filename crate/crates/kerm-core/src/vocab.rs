//! Fixed token vocabulary shared by region texts, facts, and instructions.
//!
//! Worlds, knowledge bases, and instructions are generated from one closed
//! word list so the hash-bag embedding space carries real retrieval signal.
//! Ids 0 and 1 are reserved for the CLS and MASK specials.

use crate::error::{Error, Result};

pub const CLS: usize = 0;
pub const MASK: usize = 1;

pub const ROOMS: &[&str] = &[
    "kitchen", "bedroom", "bathroom", "office", "hallway", "library", "studio", "attic",
    "garage", "pantry", "lounge", "cellar",
];

pub const OBJECTS: &[&str] = &[
    "chair", "lamp", "table", "photo", "plant", "mirror", "sofa", "sink", "shelf", "vase",
    "clock", "rug", "cabinet", "stove", "bench", "easel",
];

pub const ATTRIBUTES: &[&str] = &[
    "red", "blue", "green", "wooden", "small", "round", "tall", "old", "bright", "striped",
];

pub const LANDMARKS: &[&str] = &[
    "window", "wall", "door", "corner", "ceiling", "floor", "curtain", "fireplace",
];

pub const PREDICATES: &[&str] = &["near", "beside", "under", "above", "facing", "against"];

/// Instruction template glue.
pub const GLUE: &[&str] = &["go", "to", "the", "and", "find", "then"];

fn all_words() -> impl Iterator<Item = &'static str> {
    ROOMS
        .iter()
        .chain(OBJECTS)
        .chain(ATTRIBUTES)
        .chain(LANDMARKS)
        .chain(PREDICATES)
        .chain(GLUE)
        .copied()
}

/// Total vocabulary size including the two specials.
pub fn size() -> usize {
    2 + all_words().count()
}

pub fn token_id(word: &str) -> Option<usize> {
    match word {
        "[cls]" => Some(CLS),
        "[mask]" => Some(MASK),
        _ => all_words().position(|w| w == word).map(|i| i + 2),
    }
}

pub fn word(id: usize) -> Option<&'static str> {
    match id {
        CLS => Some("[cls]"),
        MASK => Some("[mask]"),
        _ => all_words().nth(id - 2),
    }
}

/// Splits on whitespace and maps each token; unknown tokens are rejected.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|t| token_id(t).ok_or_else(|| Error::Invalid(format!("unknown token {t:?}"))))
        .collect()
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    let words = ids
        .iter()
        .map(|&id| word(id).ok_or_else(|| Error::Invalid(format!("unknown token id {id}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(words.join(" "))
}

/// The label set for view classification: objects first, then rooms.
pub fn labels() -> Vec<&'static str> {
    OBJECTS.iter().chain(ROOMS).copied().collect()
}

pub fn label_id(word: &str) -> Option<usize> {
    labels().iter().position(|w| *w == word)
}

/// Regular plural surface form, used by the record generator to exercise
/// lexicon canonicalization.
pub fn plural(word: &str) -> String {
    format!("{word}s")
}

/// The default lexicon pairs shipped with the repo: plural -> singular for
/// every object word.
pub fn default_lexicon_pairs() -> Vec<(String, String)> {
    OBJECTS
        .iter()
        .map(|w| (plural(w), w.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_roundtrip() {
        for id in 0..size() {
            let w = word(id).unwrap();
            assert_eq!(token_id(w), Some(id));
        }
        assert_eq!(word(size()), None);
    }

    #[test]
    fn words_are_unique() {
        let mut seen = std::collections::BTreeSet::new();
        for w in all_words() {
            assert!(seen.insert(w), "duplicate vocab word {w}");
        }
    }

    #[test]
    fn tokenize_rejects_unknown() {
        assert!(tokenize("kitchen chair").is_ok());
        assert!(tokenize("kitchen zeppelin").is_err());
    }

    #[test]
    fn instruction_template_is_tokenizable() {
        let t = tokenize("go to the kitchen and find the photo near the window").unwrap();
        assert_eq!(detokenize(&t).unwrap(), "go to the kitchen and find the photo near the window");
    }

    #[test]
    fn labels_cover_objects_and_rooms() {
        assert_eq!(labels().len(), OBJECTS.len() + ROOMS.len());
        assert_eq!(label_id("chair"), Some(0));
        assert_eq!(label_id("kitchen"), Some(OBJECTS.len()));
    }
}
