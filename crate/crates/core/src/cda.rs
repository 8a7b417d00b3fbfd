//! Counterfactual data augmentation.
//!
//! Sentences that mention a gendered term and one of the probe
//! occupations are paired with a copy in which every gendered word is
//! replaced by its counterpart. Training on both halves gives a corpus
//! whose male and female term counts are equal.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{self, BufRead, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::templates::{Experiment, NamePair, Occupation};
use crate::text::{word_spans, CasePattern};

pub const LEXICON_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum CdaError {
    #[error("corpus unreadable: {0}")]
    CorpusUnreadable(#[from] io::Error),
    #[error("no recognized name in seed {0:?}")]
    UnrecognizedName(String),
    #[error("no occupation in seed {0:?}")]
    NoOccupation(String),
}

/// One-to-one word pairs (male, female).
const FIXED_PAIRS: &[(&str, &str)] = &[
    ("he", "she"),
    ("himself", "herself"),
    ("guy", "woman"),
    ("guys", "women"),
    ("gentleman", "lady"),
    ("gentlemen", "ladies"),
    ("boy", "girl"),
    ("boys", "girls"),
    ("father", "mother"),
    ("fathers", "mothers"),
    ("son", "daughter"),
    ("sons", "daughters"),
    ("brother", "sister"),
    ("brothers", "sisters"),
    ("husband", "wife"),
    ("husbands", "wives"),
    ("mr", "mrs"),
];

/// Words that, right after "her"/"his", indicate the pronoun is not a
/// determiner ("told her the news", "gave him a call", "the book is his").
const PRONOUN_FOLLOWERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "every", "each", "no",
    "to", "for", "with", "at", "in", "on", "about", "from", "by", "of", "into", "over", "after",
    "before", "during", "up", "down", "out", "off", "back", "away", "around", "through", "as",
    "like", "than", "and", "or", "but", "because", "so", "if", "when", "while", "since",
    "although", "though", "until", "unless", "again", "too", "also", "now", "then", "today",
    "yesterday", "tomorrow", "there", "here", "home", "well", "soon", "later", "not", "never",
    "always", "just", "i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us",
    "them", "my", "your", "its", "our", "their", "his", "hers", "what", "who", "whom", "which", "how",
    "why", "where", "is", "was", "were", "are", "be", "been", "being", "has", "had", "have",
    "do", "did", "does", "will", "would", "can", "could", "should", "shall", "may", "might",
    "must", "said", "says", "say", "told", "tells", "asked", "wanted", "know", "knew", "think",
    "thought", "feel", "felt", "see", "saw", "go", "went", "come", "came", "get", "got", "make",
    "made",
];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Counterpart {
    Fixed(String),
    /// Depends on the following token: `pronoun` when the word stands
    /// alone (end, punctuation or a closed-class follower), else
    /// `determiner`.
    Contextual { pronoun: String, determiner: String },
}

/// Bidirectional gendered-word map. Keys are lowercase.
#[derive(Debug, Clone)]
pub struct SwapLexicon {
    map: HashMap<String, Counterpart>,
    male: BTreeSet<String>,
    female: BTreeSet<String>,
    followers: HashSet<&'static str>,
}

/// Result of swapping one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapOutcome {
    pub text: String,
    /// Original forms of every replaced word, in order.
    pub matched_terms: Vec<String>,
    /// How many replacements went through the her/his lookahead.
    pub ambiguous: usize,
}

impl SwapLexicon {
    pub fn new(name_pairs: &[NamePair]) -> Self {
        let mut lex = SwapLexicon {
            map: HashMap::new(),
            male: BTreeSet::new(),
            female: BTreeSet::new(),
            followers: PRONOUN_FOLLOWERS.iter().copied().collect(),
        };
        for &(m, f) in FIXED_PAIRS {
            lex.add_fixed(m, f);
        }
        for p in name_pairs {
            lex.add_fixed(&p.male.to_lowercase(), &p.female.to_lowercase());
        }
        lex.map.insert("him".into(), Counterpart::Fixed("her".into()));
        lex.map.insert("hers".into(), Counterpart::Fixed("his".into()));
        lex.map.insert(
            "her".into(),
            Counterpart::Contextual {
                pronoun: "him".into(),
                determiner: "his".into(),
            },
        );
        lex.map.insert(
            "his".into(),
            Counterpart::Contextual {
                pronoun: "hers".into(),
                determiner: "her".into(),
            },
        );
        lex.male.extend(["him", "his"].map(String::from));
        lex.female.extend(["her", "hers"].map(String::from));
        lex
    }

    fn add_fixed(&mut self, male: &str, female: &str) {
        self.map.insert(male.into(), Counterpart::Fixed(female.into()));
        self.map.insert(female.into(), Counterpart::Fixed(male.into()));
        self.male.insert(male.into());
        self.female.insert(female.into());
    }

    pub fn contains(&self, word: &str) -> bool {
        self.map.contains_key(&word.to_lowercase())
    }

    pub fn is_male(&self, word: &str) -> bool {
        self.male.contains(&word.to_lowercase())
    }

    pub fn is_female(&self, word: &str) -> bool {
        self.female.contains(&word.to_lowercase())
    }

    /// Replaces every lexicon word, keeping its case pattern. All other
    /// bytes are copied unchanged.
    pub fn swap_detailed(&self, sentence: &str) -> SwapOutcome {
        let spans = word_spans(sentence);
        let mut out = String::with_capacity(sentence.len() + 8);
        let mut matched_terms = Vec::new();
        let mut ambiguous = 0;
        let mut cursor = 0;
        for (i, &(s, e)) in spans.iter().enumerate() {
            let word = &sentence[s..e];
            let lower = word.to_lowercase();
            let Some(counterpart) = self.map.get(&lower) else {
                continue;
            };
            let replacement = match counterpart {
                Counterpart::Fixed(w) => w.as_str(),
                Counterpart::Contextual {
                    pronoun,
                    determiner,
                } => {
                    ambiguous += 1;
                    let stands_alone = match spans.get(i + 1) {
                        None => true,
                        Some(&(ns, ne)) => {
                            let gap = &sentence[e..ns];
                            gap.chars().any(|c| !c.is_whitespace())
                                || self.followers.contains(sentence[ns..ne].to_lowercase().as_str())
                        }
                    };
                    let chosen = if stands_alone { pronoun } else { determiner };
                    log::trace!("ambiguous {word:?} -> {chosen:?} in {sentence:?}");
                    chosen.as_str()
                }
            };
            out.push_str(&sentence[cursor..s]);
            out.push_str(&CasePattern::of(word).apply(replacement));
            matched_terms.push(word.to_string());
            cursor = e;
        }
        out.push_str(&sentence[cursor..]);
        SwapOutcome {
            text: out,
            matched_terms,
            ambiguous,
        }
    }

    pub fn swap(&self, sentence: &str) -> String {
        self.swap_detailed(sentence).text
    }

    /// (male, female) lexicon word counts in `text`.
    pub fn gender_counts(&self, text: &str) -> (usize, usize) {
        let mut male = 0;
        let mut female = 0;
        for (s, e) in word_spans(text) {
            let w = text[s..e].to_lowercase();
            if self.male.contains(&w) {
                male += 1;
            } else if self.female.contains(&w) {
                female += 1;
            }
        }
        (male, female)
    }
}

pub fn swap_gendered_terms(sentence: &str, lexicon: &SwapLexicon) -> String {
    lexicon.swap(sentence)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CdaPair {
    pub original: String,
    pub swapped: String,
    pub matched_occupation: String,
    pub matched_terms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CdaDataset {
    pub experiment: Experiment,
    pub pairs: Vec<CdaPair>,
    pub provenance: Vec<String>,
}

impl CdaDataset {
    pub fn n_sentences(&self) -> usize {
        2 * self.pairs.len()
    }

    /// Keeps `n` pairs chosen uniformly at random, in their original order.
    pub fn sample(&self, n: usize, seed: u64) -> CdaDataset {
        if n >= self.pairs.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, self.pairs.len(), n).into_vec();
        picked.sort_unstable();
        CdaDataset {
            experiment: self.experiment,
            pairs: picked.into_iter().map(|i| self.pairs[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for p in &self.pairs {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Two lines per pair: original, then swapped.
    pub fn write_training_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        for p in &self.pairs {
            writeln!(w, "{}", p.original)?;
            writeln!(w, "{}", p.swapped)?;
        }
        Ok(())
    }
}

/// Word-boundary, case-insensitive matcher for the eligibility rule.
#[derive(Debug, Clone)]
pub struct SentenceFilter {
    terms: HashSet<String>,
    occupations: Vec<String>,
    occupation_set: HashSet<String>,
}

impl SentenceFilter {
    pub fn new(experiment: Experiment, occupations: &[Occupation], name_pairs: &[NamePair]) -> Self {
        let terms: HashSet<String> = match experiment.pronoun_pair() {
            Some((m, f)) => [m, f].into_iter().map(String::from).collect(),
            None => name_pairs
                .iter()
                .flat_map(|p| [p.male.to_lowercase(), p.female.to_lowercase()])
                .collect(),
        };
        let occupations: Vec<String> = occupations.iter().map(|o| o.word.to_lowercase()).collect();
        Self {
            terms,
            occupation_set: occupations.iter().cloned().collect(),
            occupations,
        }
    }

    pub fn is_eligible(&self, sentence: &str) -> bool {
        let words = crate::text::words_lower(sentence);
        words.iter().any(|w| self.terms.contains(w)) && words.iter().any(|w| self.occupation_set.contains(w))
    }

    /// First occupation word in the sentence, lowercase.
    pub fn first_occupation(&self, sentence: &str) -> Option<String> {
        crate::text::words_lower(sentence)
            .into_iter()
            .find(|w| self.occupation_set.contains(w))
    }

    pub fn occupations(&self) -> &[String] {
        &self.occupations
    }
}

/// Keeps the eligible lines of a line-delimited corpus, in input order.
pub fn filter_sentences<R: BufRead>(corpus: R, filter: &SentenceFilter) -> Result<Vec<String>, CdaError> {
    let mut kept = Vec::new();
    for line in corpus.lines() {
        let line = line?;
        let s = line.trim();
        if !s.is_empty() && filter.is_eligible(s) {
            kept.push(s.to_string());
        }
    }
    Ok(kept)
}

fn make_pair(sentence: &str, lexicon: &SwapLexicon, filter: &SentenceFilter) -> Option<CdaPair> {
    let outcome = lexicon.swap_detailed(sentence);
    if outcome.text == sentence {
        return None;
    }
    Some(CdaPair {
        original: sentence.to_string(),
        swapped: outcome.text,
        matched_occupation: filter.first_occupation(sentence)?,
        matched_terms: outcome.matched_terms,
    })
}

/// Pairs every eligible sentence with its swap. Exact repeats of an
/// original are dropped.
pub fn build_pronoun_dataset(
    experiment: Experiment,
    sentences: &[String],
    lexicon: &SwapLexicon,
    filter: &SentenceFilter,
    provenance: Vec<String>,
) -> CdaDataset {
    let mut seen = HashSet::new();
    let pairs = sentences
        .iter()
        .filter(|s| filter.is_eligible(s))
        .filter(|s| seen.insert(s.as_str()))
        .filter_map(|s| make_pair(s, lexicon, filter))
        .collect();
    CdaDataset {
        experiment,
        pairs,
        provenance,
    }
}

/// For every seed and every name pair, substitutes the pair's same-gender
/// name for the seed's name and pairs the result with its swap.
pub fn build_names_dataset(
    seeds: &[String],
    pairs: &[NamePair],
    lexicon: &SwapLexicon,
    filter: &SentenceFilter,
    provenance: Vec<String>,
) -> Result<CdaDataset, CdaError> {
    let mut gender_of: HashMap<String, bool> = HashMap::new();
    for p in pairs {
        gender_of.insert(p.male.to_lowercase(), true);
        gender_of.insert(p.female.to_lowercase(), false);
    }

    let mut out = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for seed in seeds {
        let spans = word_spans(seed);
        let (name, is_male) = spans
            .iter()
            .find_map(|&(s, e)| {
                let w = seed[s..e].to_lowercase();
                gender_of.get(&w).map(|&g| (w, g))
            })
            .ok_or_else(|| CdaError::UnrecognizedName(seed.clone()))?;
        if filter.first_occupation(seed).is_none() {
            return Err(CdaError::NoOccupation(seed.clone()));
        }
        for p in pairs {
            let replacement = if is_male { &p.male } else { &p.female };
            let original = replace_word(seed, &name, replacement);
            if let Some(pair) = make_pair(&original, lexicon, filter) {
                if seen.insert((pair.original.clone(), pair.swapped.clone())) {
                    out.push(pair);
                }
            }
        }
    }
    Ok(CdaDataset {
        experiment: Experiment::MaleFemaleNames,
        pairs: out,
        provenance,
    })
}

/// Replaces whole-word, case-insensitive occurrences of `target_lower`,
/// keeping each occurrence's case pattern.
fn replace_word(text: &str, target_lower: &str, replacement: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for (s, e) in word_spans(text) {
        let w = &text[s..e];
        if w.to_lowercase() == target_lower {
            out.push_str(&text[cursor..s]);
            out.push_str(&CasePattern::of(w).apply(replacement));
            cursor = e;
        }
    }
    out.push_str(&text[cursor..]);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_pairs: usize,
    pub n_sentences: usize,
    /// Number of sentences mentioning each occupation.
    pub per_occupation_counts: BTreeMap<String, usize>,
    /// Male lexicon words minus female lexicon words over all sentences.
    pub male_female_token_balance: i64,
}

pub fn dataset_stats(dataset: &CdaDataset, lexicon: &SwapLexicon, filter: &SentenceFilter) -> DatasetStats {
    let mut per_occupation: BTreeMap<String, usize> = BTreeMap::new();
    let mut balance: i64 = 0;
    for p in &dataset.pairs {
        for s in [&p.original, &p.swapped] {
            let words: HashSet<String> = crate::text::words_lower(s).into_iter().collect();
            for occ in filter.occupations() {
                if words.contains(occ) {
                    *per_occupation.entry(occ.clone()).or_default() += 1;
                }
            }
            let (m, f) = lexicon.gender_counts(s);
            balance += m as i64 - f as i64;
        }
    }
    DatasetStats {
        n_pairs: dataset.pairs.len(),
        n_sentences: dataset.n_sentences(),
        per_occupation_counts: per_occupation,
        male_female_token_balance: balance,
    }
}
