//! Object lexicon and bag-of-objects extraction from free-form scene text.
//!
//! Answers from a vision-language assistant arrive as prose. To turn them
//! into a stable object vocabulary, text is lowercased, tokenized on
//! non-alphanumeric boundaries, and matched against a lexicon of surface
//! forms using longest-phrase-first matching ("traffic light" beats
//! "light"). Each surface maps to a canonical object name and a coarse
//! supercategory.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// One recognizable surface form.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LexEntry {
    /// The phrase as it may appear in text (lowercase).
    pub surface: String,
    /// Canonical object name this surface maps to.
    pub object: String,
    /// Coarse group the object belongs to.
    pub supercategory: String,
}

/// A set of surface forms with longest-first matching.
#[derive(Clone, Debug)]
pub struct Lexicon {
    entries: Vec<LexEntry>,
    /// Tokenized surfaces, index-aligned with `entries`, longest first.
    order: Vec<(Vec<String>, usize)>,
}

const BUILTIN: &[(&str, &str, &str)] = &[
    // vehicles
    ("car", "car", "vehicle"),
    ("cars", "car", "vehicle"),
    ("vehicle", "car", "vehicle"),
    ("truck", "truck", "vehicle"),
    ("bus", "bus", "vehicle"),
    ("van", "van", "vehicle"),
    ("taxi", "car", "vehicle"),
    ("suv", "car", "vehicle"),
    ("motorcycle", "motorcycle", "vehicle"),
    ("bicycle", "bicycle", "vehicle"),
    ("bike", "bicycle", "vehicle"),
    // people
    ("person", "person", "person"),
    ("people", "person", "person"),
    ("pedestrian", "pedestrian", "person"),
    ("pedestrians", "pedestrian", "person"),
    ("cyclist", "cyclist", "person"),
    ("rider", "rider", "person"),
    // signals and signs
    ("traffic light", "traffic light", "signal"),
    ("traffic lights", "traffic light", "signal"),
    ("red light", "red light", "signal"),
    ("green light", "green light", "signal"),
    ("yellow light", "yellow light", "signal"),
    ("traffic sign", "traffic sign", "signal"),
    ("stop sign", "stop sign", "signal"),
    ("speed limit sign", "speed limit sign", "signal"),
    ("signal", "traffic light", "signal"),
    // road structure
    ("road", "road", "road"),
    ("street", "road", "road"),
    ("lane", "lane", "road"),
    ("lane marking", "lane marking", "road"),
    ("clear lane", "clear lane", "road"),
    ("clear road", "clear road", "road"),
    ("crosswalk", "crosswalk", "road"),
    ("intersection", "intersection", "road"),
    ("sidewalk", "sidewalk", "road"),
    ("curb", "curb", "road"),
    ("highway", "road", "road"),
    // obstructions
    ("traffic cone", "traffic cone", "obstruction"),
    ("cone", "traffic cone", "obstruction"),
    ("barrier", "barrier", "obstruction"),
    ("pole", "pole", "obstruction"),
    ("construction", "construction", "obstruction"),
    ("obstacle", "obstacle", "obstruction"),
    // environment
    ("tree", "tree", "environment"),
    ("trees", "tree", "environment"),
    ("building", "building", "environment"),
    ("buildings", "building", "environment"),
    ("sky", "sky", "environment"),
    ("rain", "rain", "environment"),
    ("snow", "snow", "environment"),
    ("fog", "fog", "environment"),
];

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

impl Lexicon {
    pub fn new(entries: Vec<LexEntry>) -> Result<Lexicon> {
        if entries.is_empty() {
            return Err(Error::Config("lexicon has no entries".into()));
        }
        let mut order: Vec<(Vec<String>, usize)> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (tokenize(&e.surface), i))
            .collect();
        if order.iter().any(|(toks, _)| toks.is_empty()) {
            return Err(Error::Config("lexicon surface tokenizes to nothing".into()));
        }
        // Longest phrase first; ties resolve alphabetically for stability.
        order.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(Lexicon { entries, order })
    }

    /// The built-in driving-scene lexicon.
    pub fn builtin() -> Lexicon {
        Lexicon::new(
            BUILTIN
                .iter()
                .map(|&(s, o, c)| LexEntry {
                    surface: s.into(),
                    object: o.into(),
                    supercategory: c.into(),
                })
                .collect(),
        )
        .expect("built-in lexicon is valid")
    }

    pub fn entries(&self) -> &[LexEntry] {
        &self.entries
    }

    pub fn supercategory_of(&self, object: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.object == object)
            .map(|e| e.supercategory.as_str())
    }

    /// Canonical objects mentioned in `text`, in order of appearance, with
    /// repeats kept. Longer surfaces win over their prefixes.
    pub fn match_text(&self, text: &str) -> Vec<String> {
        let tokens = tokenize(text);
        let mut found = Vec::new();
        let mut pos = 0;
        'outer: while pos < tokens.len() {
            for (surface, idx) in &self.order {
                if pos + surface.len() <= tokens.len()
                    && tokens[pos..pos + surface.len()]
                        .iter()
                        .zip(surface)
                        .all(|(a, b)| a == b)
                {
                    found.push(self.entries[*idx].object.clone());
                    pos += surface.len();
                    continue 'outer;
                }
            }
            pos += 1;
        }
        found
    }
}

/// Counts canonical objects across texts and keeps the most frequent
/// `limit`, breaking count ties alphabetically.
pub fn top_objects(texts: &[String], lexicon: &Lexicon, limit: usize) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in texts {
        for object in lexicon.match_text(text) {
            *counts.entry(object).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    // Stable rank: by count descending, then name ascending (BTreeMap
    // iteration already yields names ascending, and the sort is stable).
    ranked.sort_by_key(|entry| std::cmp::Reverse(entry.1));
    ranked.truncate(limit);
    ranked
}
