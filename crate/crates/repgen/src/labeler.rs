//! Rule-based disease labeling over a fixed 14-category space.
//!
//! Matching is phrase-based per sentence; a cue within the five tokens before
//! a phrase flips the mention to negative or uncertain. "No Finding" carries
//! no phrases of its own and is derived from the other slots.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{split_sentences, tokenize};

/// The fixed label space, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    NoFinding,
    EnlargedCardiomediastinum,
    Cardiomegaly,
    LungOpacity,
    LungLesion,
    Edema,
    Consolidation,
    Pneumonia,
    Atelectasis,
    Pneumothorax,
    PleuralEffusion,
    PleuralOther,
    Fracture,
    SupportDevices,
}

/// Number of label slots.
pub const CATEGORY_COUNT: usize = 14;

impl Category {
    pub const ALL: [Category; CATEGORY_COUNT] = [
        Category::NoFinding,
        Category::EnlargedCardiomediastinum,
        Category::Cardiomegaly,
        Category::LungOpacity,
        Category::LungLesion,
        Category::Edema,
        Category::Consolidation,
        Category::Pneumonia,
        Category::Atelectasis,
        Category::Pneumothorax,
        Category::PleuralEffusion,
        Category::PleuralOther,
        Category::Fracture,
        Category::SupportDevices,
    ];

    /// The twelve disease slots that feed the "No Finding" derivation
    /// (everything except No Finding itself and Support Devices).
    pub const DISEASES: [Category; 12] = [
        Category::EnlargedCardiomediastinum,
        Category::Cardiomegaly,
        Category::LungOpacity,
        Category::LungLesion,
        Category::Edema,
        Category::Consolidation,
        Category::Pneumonia,
        Category::Atelectasis,
        Category::Pneumothorax,
        Category::PleuralEffusion,
        Category::PleuralOther,
        Category::Fracture,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Category::NoFinding => "No Finding",
            Category::EnlargedCardiomediastinum => "Enlarged Cardiomediastinum",
            Category::Cardiomegaly => "Cardiomegaly",
            Category::LungOpacity => "Lung Opacity",
            Category::LungLesion => "Lung Lesion",
            Category::Edema => "Edema",
            Category::Consolidation => "Consolidation",
            Category::Pneumonia => "Pneumonia",
            Category::Atelectasis => "Atelectasis",
            Category::Pneumothorax => "Pneumothorax",
            Category::PleuralEffusion => "Pleural Effusion",
            Category::PleuralOther => "Pleural Other",
            Category::Fracture => "Fracture",
            Category::SupportDevices => "Support Devices",
        }
    }

    pub fn from_name(name: &str) -> Option<Category> {
        Category::ALL.iter().copied().find(|c| c.name() == name)
    }

    /// Position in [`Category::ALL`].
    pub fn index(&self) -> usize {
        Category::ALL.iter().position(|c| c == self).unwrap()
    }
}

/// Mention state of one category in one report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mention {
    Positive,
    Negative,
    Uncertain,
    Unmentioned,
}

impl Mention {
    fn rank(&self) -> u8 {
        match self {
            Mention::Positive => 3,
            Mention::Uncertain => 2,
            Mention::Negative => 1,
            Mention::Unmentioned => 0,
        }
    }
}

/// How uncertain mentions map to the binary view used by rewards and
/// clinical-efficacy metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyPolicy {
    #[default]
    UncertainAsPositive,
    UncertainAsNegative,
}

/// One mention slot per category, in [`Category::ALL`] order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseLabels {
    slots: [Mention; CATEGORY_COUNT],
}

impl DiseaseLabels {
    pub fn all_unmentioned() -> Self {
        DiseaseLabels {
            slots: [Mention::Unmentioned; CATEGORY_COUNT],
        }
    }

    pub fn get(&self, category: Category) -> Mention {
        self.slots[category.index()]
    }

    pub fn set(&mut self, category: Category, mention: Mention) {
        self.slots[category.index()] = mention;
    }

    pub fn slots(&self) -> &[Mention; CATEGORY_COUNT] {
        &self.slots
    }

    /// Binary positives under the given uncertainty policy.
    pub fn binary(&self, policy: UncertaintyPolicy) -> [bool; CATEGORY_COUNT] {
        let mut out = [false; CATEGORY_COUNT];
        for (slot, flag) in self.slots.iter().zip(out.iter_mut()) {
            *flag = match slot {
                Mention::Positive => true,
                Mention::Uncertain => policy == UncertaintyPolicy::UncertainAsPositive,
                _ => false,
            };
        }
        out
    }

    /// Name-keyed view for JSON output; BTreeMap keeps the bytes stable.
    pub fn to_name_map(&self) -> BTreeMap<&'static str, Mention> {
        Category::ALL
            .iter()
            .map(|c| (c.name(), self.get(*c)))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconFile {
    categories: BTreeMap<String, Vec<String>>,
    negation_cues: Vec<String>,
    uncertainty_cues: Vec<String>,
}

/// Validated phrase and cue lists driving [`label_report`].
#[derive(Debug, Clone)]
pub struct LabelLexicon {
    file: LexiconFile,
    phrases: Vec<(Category, Vec<Vec<String>>)>,
    negation_cues: Vec<Vec<String>>,
    uncertainty_cues: Vec<Vec<String>>,
}

impl LabelLexicon {
    /// Raw phrase strings for one category; empty for "No Finding".
    pub fn phrases(&self, category: Category) -> &[String] {
        self.file
            .categories
            .get(category.name())
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn negation_cues(&self) -> &[String] {
        &self.file.negation_cues
    }

    pub fn uncertainty_cues(&self) -> &[String] {
        &self.file.uncertainty_cues
    }

    /// Phrases suitable for *generating* text: multi-word phrases none of
    /// whose smaller spans is itself a lexicon phrase, so stray unigrams in
    /// sampled text cannot counterfeit a mention. Falls back to the full
    /// list for categories that have no such phrase.
    pub fn generation_phrases(&self, category: Category) -> Vec<&str> {
        let all: BTreeSet<String> = self
            .phrases
            .iter()
            .flat_map(|(_, list)| list.iter().map(|tokens| tokens.join(" ")))
            .collect();
        let candidates = self
            .phrases
            .iter()
            .find(|(c, _)| *c == category)
            .map(|(_, list)| list.as_slice())
            .unwrap_or(&[]);
        let raw = self.phrases(category);
        let safe: Vec<&str> = candidates
            .iter()
            .zip(raw)
            .filter(|(tokens, _)| {
                tokens.len() >= 2
                    && (1..tokens.len()).all(|len| {
                        (0..=tokens.len() - len)
                            .all(|start| !all.contains(&tokens[start..start + len].join(" ")))
                    })
            })
            .map(|(_, phrase)| phrase.as_str())
            .collect();
        if safe.is_empty() {
            raw.iter().map(String::as_str).collect()
        } else {
            safe
        }
    }
}

const DEFAULT_LEXICON_JSON: &str = include_str!("../assets/default_lexicon.json");

/// The shipped lexicon.
pub fn default_lexicon() -> LabelLexicon {
    parse_lexicon(DEFAULT_LEXICON_JSON).expect("shipped lexicon is valid")
}

/// Parses and validates a lexicon from its JSON form.
pub fn parse_lexicon(json: &str) -> Result<LabelLexicon> {
    let file: LexiconFile =
        serde_json::from_str(json).map_err(|e| Error::InvalidLexicon(e.to_string()))?;
    let mut phrases = Vec::new();
    let mut owners: BTreeMap<String, Category> = BTreeMap::new();
    for (name, list) in &file.categories {
        let category = Category::from_name(name)
            .ok_or_else(|| Error::InvalidLexicon(format!("unknown category \"{name}\"")))?;
        if category == Category::NoFinding {
            return Err(Error::InvalidLexicon(
                "\"No Finding\" is derived and cannot carry phrases".into(),
            ));
        }
        if list.is_empty() {
            return Err(Error::InvalidLexicon(format!(
                "category \"{name}\" has no phrases"
            )));
        }
        let mut tokenized = Vec::with_capacity(list.len());
        for phrase in list {
            let tokens = tokenize(phrase);
            if tokens.is_empty() {
                return Err(Error::InvalidLexicon(format!(
                    "empty phrase in category \"{name}\""
                )));
            }
            let key = tokens.join(" ");
            if let Some(previous) = owners.insert(key, category) {
                return Err(Error::InvalidLexicon(format!(
                    "phrase \"{phrase}\" appears in both \"{}\" and \"{name}\"",
                    previous.name()
                )));
            }
            tokenized.push(tokens);
        }
        phrases.push((category, tokenized));
    }
    for category in Category::ALL {
        if category == Category::NoFinding {
            continue;
        }
        if !file.categories.contains_key(category.name()) {
            return Err(Error::InvalidLexicon(format!(
                "missing category \"{}\"",
                category.name()
            )));
        }
    }
    let tokenize_cues = |cues: &[String], kind: &str| -> Result<Vec<Vec<String>>> {
        if cues.is_empty() {
            return Err(Error::InvalidLexicon(format!("{kind} cue list is empty")));
        }
        cues.iter()
            .map(|cue| {
                let tokens = tokenize(cue);
                if tokens.is_empty() {
                    Err(Error::InvalidLexicon(format!("empty {kind} cue")))
                } else {
                    Ok(tokens)
                }
            })
            .collect()
    };
    let negation_cues = tokenize_cues(&file.negation_cues, "negation")?;
    let uncertainty_cues = tokenize_cues(&file.uncertainty_cues, "uncertainty")?;
    Ok(LabelLexicon {
        file,
        phrases,
        negation_cues,
        uncertainty_cues,
    })
}

pub fn load_lexicon(path: &Path) -> Result<LabelLexicon> {
    parse_lexicon(&std::fs::read_to_string(path)?)
}

/// Canonical JSON form; parse then serialize is byte-stable.
pub fn serialize_lexicon(lexicon: &LabelLexicon) -> String {
    serde_json::to_string_pretty(&lexicon.file).expect("lexicon serializes")
}

fn cue_precedes(tokens: &[String], phrase_start: usize, cues: &[Vec<String>]) -> bool {
    let window_start = phrase_start.saturating_sub(5);
    for cue in cues {
        for cue_start in window_start..phrase_start {
            if cue_start + cue.len() <= phrase_start
                && tokens[cue_start..cue_start + cue.len()] == cue[..]
            {
                return true;
            }
        }
    }
    false
}

/// Labels one report. Empty reports yield all-unmentioned slots.
pub fn label_report(report: &str, lexicon: &LabelLexicon) -> DiseaseLabels {
    let mut labels = DiseaseLabels::all_unmentioned();
    let mut any_tokens = false;
    for sentence in split_sentences(report) {
        let tokens = tokenize(&sentence);
        if tokens.is_empty() {
            continue;
        }
        any_tokens = true;
        for (category, phrases) in &lexicon.phrases {
            for phrase in phrases {
                if phrase.len() > tokens.len() {
                    continue;
                }
                for start in 0..=tokens.len() - phrase.len() {
                    if tokens[start..start + phrase.len()] != phrase[..] {
                        continue;
                    }
                    let mention = if cue_precedes(&tokens, start, &lexicon.negation_cues) {
                        Mention::Negative
                    } else if cue_precedes(&tokens, start, &lexicon.uncertainty_cues) {
                        Mention::Uncertain
                    } else {
                        Mention::Positive
                    };
                    if mention.rank() > labels.get(*category).rank() {
                        labels.set(*category, mention);
                    }
                }
            }
        }
    }
    if any_tokens {
        let clear = Category::DISEASES
            .iter()
            .all(|c| matches!(labels.get(*c), Mention::Negative | Mention::Unmentioned));
        if clear {
            labels.set(Category::NoFinding, Mention::Positive);
        }
    }
    labels
}

/// Renders one sentence (no terminator) realizing a mention of a category,
/// drawing the phrase uniformly from the generation-safe subset. The surface
/// form is terse — the phrase itself, optionally cue-prefixed — keeping the
/// transition structure canonical enough for small models to fit. Labeling
/// the sentence recovers the mention. Panics for `Unmentioned`, which has no
/// surface form.
pub fn render_mention_sentence<R: Rng>(
    lexicon: &LabelLexicon,
    category: Category,
    mention: Mention,
    rng: &mut R,
) -> String {
    let phrase = *lexicon.generation_phrases(category).choose(rng).unwrap();
    match mention {
        Mention::Positive => phrase.to_string(),
        Mention::Negative => format!("no {phrase}"),
        Mention::Uncertain => format!("possible {phrase}"),
        Mention::Unmentioned => panic!("no template for unmentioned"),
    }
}
