//! Probe templates, occupations and name pairs.
//!
//! Assets ship as three plain files so the probe set can be extended
//! without recompiling:
//!
//! - `templates.jsonl`: one `{"id", "experiment", "text"}` object per line
//! - `occupations.txt`: `word<TAB>field_group`, one per line
//! - `names.csv`: header `male,female`, one pair per row
//!
//! A copy of the shipped assets is compiled in and available through
//! [`Assets::shipped`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Placeholder for the token the model has to fill.
pub const MASK: &str = "[MASK]";
/// Placeholder for the occupation word.
pub const OCC: &str = "[OCC]";

pub const TEMPLATES_FILE: &str = "templates.jsonl";
pub const OCCUPATIONS_FILE: &str = "occupations.txt";
pub const NAMES_FILE: &str = "names.csv";
pub const VERSION_FILE: &str = "VERSION";

pub const TEMPLATES_PER_EXPERIMENT: usize = 51;
pub const OCCUPATION_COUNT: usize = 60;
pub const NAME_PAIR_COUNT: usize = 29;

const SHIPPED_TEMPLATES: &str = include_str!("../assets/templates.jsonl");
const SHIPPED_OCCUPATIONS: &str = include_str!("../assets/occupations.txt");
const SHIPPED_NAMES: &str = include_str!("../assets/names.csv");
const SHIPPED_VERSION: &str = include_str!("../assets/VERSION");

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("malformed template {id}: {reason}")]
    MalformedTemplate { id: String, reason: String },
    #[error("asset missing: {0}")]
    AssetMissing(PathBuf),
    #[error("asset count mismatch in {what}: expected {expected}, found {found}")]
    AssetCountMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("asset parse error in {file} line {line}: {reason}")]
    AssetParse {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("duplicate {what}: {value}")]
    Duplicate { what: &'static str, value: String },
}

/// The three probing setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Experiment {
    #[serde(rename = "he-she")]
    HeShe,
    #[serde(rename = "his-her")]
    HisHer,
    #[serde(rename = "male-female-names")]
    MaleFemaleNames,
}

impl Experiment {
    pub const ALL: [Experiment; 3] = [
        Experiment::HeShe,
        Experiment::HisHer,
        Experiment::MaleFemaleNames,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::HeShe => "he-she",
            Experiment::HisHer => "his-her",
            Experiment::MaleFemaleNames => "male-female-names",
        }
    }

    /// Male and female filler for the pronoun experiments; `None` for names.
    pub fn pronoun_pair(self) -> Option<(&'static str, &'static str)> {
        match self {
            Experiment::HeShe => Some(("he", "she")),
            Experiment::HisHer => Some(("his", "her")),
            Experiment::MaleFemaleNames => None,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "he-she" | "heshe" => Ok(Experiment::HeShe),
            "his-her" | "hisher" => Ok(Experiment::HisHer),
            "male-female-names" | "names" | "male-female" => Ok(Experiment::MaleFemaleNames),
            other => Err(format!(
                "unknown experiment '{other}' (expected he-she, his-her or names)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceTemplate {
    pub id: String,
    pub experiment: Experiment,
    pub text: String,
}

impl SentenceTemplate {
    pub fn new(id: impl Into<String>, experiment: Experiment, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            experiment,
            text: text.into(),
        }
    }

    /// Checks placeholder counts, the names prefix and that something
    /// remains once the placeholders are removed.
    pub fn validate(&self) -> Result<(), TemplateError> {
        let malformed = |reason: String| TemplateError::MalformedTemplate {
            id: self.id.clone(),
            reason,
        };
        let masks = self.text.matches(MASK).count();
        if masks != 1 {
            return Err(malformed(format!("expected one {MASK}, found {masks}")));
        }
        let occs = self.text.matches(OCC).count();
        if occs != 1 {
            return Err(malformed(format!("expected one {OCC}, found {occs}")));
        }
        if self.experiment == Experiment::MaleFemaleNames && !self.text.starts_with("My friend ") {
            return Err(malformed("names templates start with \"My friend \"".into()));
        }
        let rest = self.text.replace(MASK, "").replace(OCC, "");
        if rest.trim().is_empty() {
            return Err(malformed("no text besides placeholders".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldGroup {
    Medical,
    Technical,
    Management,
    Legal,
    Service,
    Education,
}

impl FromStr for FieldGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "medical" => Ok(FieldGroup::Medical),
            "technical" => Ok(FieldGroup::Technical),
            "management" => Ok(FieldGroup::Management),
            "legal" => Ok(FieldGroup::Legal),
            "service" => Ok(FieldGroup::Service),
            "education" => Ok(FieldGroup::Education),
            other => Err(format!("unknown field group '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Occupation {
    pub word: String,
    pub field_group: FieldGroup,
}

impl Occupation {
    pub fn new(word: impl Into<String>, field_group: FieldGroup) -> Self {
        Self {
            word: word.into().to_lowercase(),
            field_group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NamePair {
    pub male: String,
    pub female: String,
}

/// A template with its occupation slot filled and the mask slot intact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub template_id: String,
    pub occupation: String,
    pub text: String,
}

/// Fills the occupation slot, leaving `[MASK]` for the gendered term.
pub fn instantiate(template: &SentenceTemplate, occ: &Occupation) -> Result<Prompt, TemplateError> {
    template.validate()?;
    Ok(Prompt {
        template_id: template.id.clone(),
        occupation: occ.word.clone(),
        text: template.text.replacen(OCC, &occ.word, 1),
    })
}

/// Reversed direction: the gendered slot gets `filler` and the occupation
/// slot becomes the mask.
pub fn instantiate_gendered(
    template: &SentenceTemplate,
    filler: &str,
) -> Result<String, TemplateError> {
    template.validate()?;
    // MASK goes first so the freshly inserted mask is not overwritten.
    Ok(template
        .text
        .replacen(MASK, filler, 1)
        .replacen(OCC, MASK, 1))
}

/// Loaded probe assets. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Assets {
    pub templates: Vec<SentenceTemplate>,
    pub occupations: Vec<Occupation>,
    pub name_pairs: Vec<NamePair>,
    pub version: String,
    /// sha256 per asset file, keyed by file name.
    pub digests: BTreeMap<String, String>,
}

/// How strictly [`load_assets_with`] checks asset sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountPolicy {
    /// 51 templates per experiment, 60 occupations, 29 name pairs.
    Shipped,
    /// Any non-empty set. For user-extended or reduced probe sets.
    Any,
}

impl Assets {
    /// The compiled-in copy of the shipped assets.
    pub fn shipped() -> Self {
        Self::parse(
            SHIPPED_TEMPLATES,
            SHIPPED_OCCUPATIONS,
            SHIPPED_NAMES,
            SHIPPED_VERSION,
            CountPolicy::Shipped,
        )
        .expect("compiled-in assets are valid")
    }

    pub fn parse(
        templates: &str,
        occupations: &str,
        names: &str,
        version: &str,
        policy: CountPolicy,
    ) -> Result<Self, TemplateError> {
        let digests = [
            (TEMPLATES_FILE, templates),
            (OCCUPATIONS_FILE, occupations),
            (NAMES_FILE, names),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), sha256_hex(v)))
        .collect();
        let templates = parse_templates(templates)?;
        let occupations = parse_occupations(occupations)?;
        let name_pairs = parse_names(names)?;
        let assets = Assets {
            templates,
            occupations,
            name_pairs,
            version: version.trim().to_string(),
            digests,
        };
        assets.check(policy)?;
        Ok(assets)
    }

    fn check(&self, policy: CountPolicy) -> Result<(), TemplateError> {
        let mut ids = HashSet::new();
        for t in &self.templates {
            if !ids.insert(t.id.as_str()) {
                return Err(TemplateError::Duplicate {
                    what: "template id",
                    value: t.id.clone(),
                });
            }
        }
        let mut words = HashSet::new();
        for o in &self.occupations {
            if !words.insert(o.word.as_str()) {
                return Err(TemplateError::Duplicate {
                    what: "occupation",
                    value: o.word.clone(),
                });
            }
        }
        let mut names = HashSet::new();
        for p in &self.name_pairs {
            for n in [&p.male, &p.female] {
                if !names.insert(n.to_lowercase()) {
                    return Err(TemplateError::Duplicate {
                        what: "name",
                        value: n.clone(),
                    });
                }
            }
        }

        let count_check = |what: String, expected: usize, found: usize| {
            let ok = match policy {
                CountPolicy::Shipped => found == expected,
                CountPolicy::Any => found > 0,
            };
            if ok {
                Ok(())
            } else {
                Err(TemplateError::AssetCountMismatch {
                    what,
                    expected,
                    found,
                })
            }
        };
        match policy {
            CountPolicy::Shipped => {
                for exp in Experiment::ALL {
                    count_check(
                        format!("{exp} templates"),
                        TEMPLATES_PER_EXPERIMENT,
                        self.templates_for(exp).count(),
                    )?;
                }
            }
            // A custom set may leave out whole experiments.
            CountPolicy::Any => count_check(
                "templates".into(),
                TEMPLATES_PER_EXPERIMENT * Experiment::ALL.len(),
                self.templates.len(),
            )?,
        }
        count_check("occupations".into(), OCCUPATION_COUNT, self.occupations.len())?;
        count_check("name pairs".into(), NAME_PAIR_COUNT, self.name_pairs.len())?;
        Ok(())
    }

    pub fn templates_for(&self, experiment: Experiment) -> impl Iterator<Item = &SentenceTemplate> {
        self.templates
            .iter()
            .filter(move |t| t.experiment == experiment)
    }

    /// Every template of `experiment` crossed with every occupation,
    /// template-major.
    pub fn prompts(&self, experiment: Experiment) -> Result<Vec<Prompt>, TemplateError> {
        let mut out = Vec::new();
        for t in self.templates_for(experiment) {
            for o in &self.occupations {
                out.push(instantiate(t, o)?);
            }
        }
        Ok(out)
    }

    pub fn male_names(&self) -> impl Iterator<Item = &str> {
        self.name_pairs.iter().map(|p| p.male.as_str())
    }

    pub fn female_names(&self) -> impl Iterator<Item = &str> {
        self.name_pairs.iter().map(|p| p.female.as_str())
    }

    /// Case-insensitive exact lookup.
    pub fn occupation(&self, word: &str) -> Option<&Occupation> {
        let lower = word.to_lowercase();
        self.occupations.iter().find(|o| o.word == lower)
    }
}

/// Loads the three asset files from `dir` with the shipped count contract.
pub fn load_assets(dir: &Path) -> Result<Assets, TemplateError> {
    load_assets_with(dir, CountPolicy::Shipped)
}

pub fn load_assets_with(dir: &Path, policy: CountPolicy) -> Result<Assets, TemplateError> {
    let read = |name: &str| -> Result<String, TemplateError> {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(|_| TemplateError::AssetMissing(path))
    };
    let templates = read(TEMPLATES_FILE)?;
    let occupations = read(OCCUPATIONS_FILE)?;
    let names = read(NAMES_FILE)?;
    let version = read(VERSION_FILE).unwrap_or_else(|_| "unversioned".to_string());
    Assets::parse(&templates, &occupations, &names, &version, policy)
}

fn parse_templates(src: &str) -> Result<Vec<SentenceTemplate>, TemplateError> {
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: SentenceTemplate =
            serde_json::from_str(line).map_err(|e| TemplateError::AssetParse {
                file: TEMPLATES_FILE.into(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

fn parse_occupations(src: &str) -> Result<Vec<Occupation>, TemplateError> {
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| TemplateError::AssetParse {
            file: OCCUPATIONS_FILE.into(),
            line: i + 1,
            reason,
        };
        let (word, group) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected word<TAB>field_group".into()))?;
        let word = word.trim();
        if word.is_empty() || word.contains(char::is_whitespace) {
            return Err(parse_err(format!("bad occupation word '{word}'")));
        }
        out.push(Occupation::new(word, group.parse().map_err(parse_err)?));
    }
    Ok(out)
}

fn parse_names(src: &str) -> Result<Vec<NamePair>, TemplateError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(src.as_bytes());
    let header_ok = rdr
        .headers()
        .map(|h| h.iter().collect::<Vec<_>>() == ["male", "female"])
        .unwrap_or(false);
    if !header_ok {
        return Err(TemplateError::AssetParse {
            file: NAMES_FILE.into(),
            line: 1,
            reason: "header must be 'male,female'".into(),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<NamePair>().enumerate() {
        let pair = row.map_err(|e| TemplateError::AssetParse {
            file: NAMES_FILE.into(),
            line: i + 2,
            reason: e.to_string(),
        })?;
        out.push(pair);
    }
    Ok(out)
}

pub(crate) fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    let digest = Sha256::digest(bytes.as_ref());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn he_she(text: &str) -> SentenceTemplate {
        SentenceTemplate::new("t", Experiment::HeShe, text)
    }

    fn engineer() -> Occupation {
        Occupation::new("engineer", FieldGroup::Technical)
    }

    #[test]
    fn instantiate_fills_occupation_only() {
        let p = instantiate(&he_she("[MASK] dreams of being a good [OCC]."), &engineer()).unwrap();
        assert_eq!(p.text, "[MASK] dreams of being a good engineer.");
        assert_eq!(p.occupation, "engineer");
    }

    #[test]
    fn missing_occ_is_malformed() {
        let err = instantiate(&he_she("[MASK] dreams of being good."), &engineer()).unwrap_err();
        assert!(matches!(err, TemplateError::MalformedTemplate { .. }));
        let err = instantiate(&he_she("[MASK] and [MASK] are [OCC]."), &engineer()).unwrap_err();
        assert!(matches!(err, TemplateError::MalformedTemplate { .. }));
    }

    #[test]
    fn reversed_direction() {
        let t = he_she("[MASK] dreams of being a good [OCC].");
        assert_eq!(
            instantiate_gendered(&t, "he").unwrap(),
            "he dreams of being a good [MASK]."
        );
        let t = he_she("[MASK] wants to be a full-time [OCC].");
        assert_eq!(
            instantiate_gendered(&t, "she").unwrap(),
            "she wants to be a full-time [MASK]."
        );
    }

    #[test]
    fn names_prefix_enforced() {
        let t = SentenceTemplate::new("n", Experiment::MaleFemaleNames, "[MASK] is a good [OCC].");
        assert!(t.validate().is_err());
    }

    #[test]
    fn shipped_counts() {
        let a = Assets::shipped();
        assert_eq!(a.templates.len(), 153);
        assert_eq!(a.occupations.len(), 60);
        assert_eq!(a.name_pairs.len(), 29);
        for exp in Experiment::ALL {
            assert_eq!(a.prompts(exp).unwrap().len(), 3060);
        }
    }

    #[test]
    fn every_prompt_keeps_one_mask_and_no_occ() {
        let a = Assets::shipped();
        for exp in Experiment::ALL {
            for t in a.templates_for(exp) {
                for o in &a.occupations {
                    let p = instantiate(t, o).unwrap();
                    assert_eq!(p.text.matches(MASK).count(), 1);
                    assert!(p.text.contains(&o.word));
                    assert_eq!(p.text.len(), t.text.len() - OCC.len() + o.word.len());
                    let rev = instantiate_gendered(t, "she").unwrap();
                    assert!(!rev.contains(OCC));
                }
            }
        }
    }

    #[test]
    fn occupation_lookup_is_case_insensitive() {
        let a = Assets::shipped();
        assert_eq!(a.occupation("Nurse").unwrap().word, "nurse");
        assert!(a.occupation("nurses").is_none());
    }

    #[test]
    fn experiment_parse_roundtrip() {
        for e in Experiment::ALL {
            assert_eq!(e.as_str().parse::<Experiment>().unwrap(), e);
        }
        assert_eq!("names".parse::<Experiment>().unwrap(), Experiment::MaleFemaleNames);
    }
}
