//! End-to-end audit of one model: compatibility precheck, scoring of every
//! prompt, MALoR, per-occupation shares and output files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::analysis::{file_stem, gender_share, MalorRun, RunFile, RunStatus, Stage};
use crate::error::Error;
use crate::metrics::{
    average_profiles, malor, name_set_probabilities, occupation_means, profile_from_scores,
    MalorReport, MetricsError, OccupationProfile, ProbabilityRecord,
};
use crate::pretrain::batch_seed;
use crate::scorer::{
    score_batch, BackendConfig, BatchOptions, MaskedQuery, QueryResult, RecordingScorer, Scorer,
    ScorerDescriptor, VocabStatus,
};
use crate::templates::{instantiate_gendered, Assets, Experiment, MASK};
use crate::text::CasePattern;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MALOR_CSV: &str = "malor.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub scorer: ScorerDescriptor,
    pub experiments: Vec<Experiment>,
    /// One audit per seed. Empty means a single unseeded run.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub concurrency: usize,
    pub retries: u32,
    pub stage: Stage,
    /// Also score the occupation-masked direction.
    #[serde(default)]
    pub reversed: bool,
    /// Record every backend answer into this fixture file.
    #[serde(default)]
    pub record_fixture: Option<PathBuf>,
}

impl AuditConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.experiments.is_empty() {
            return Err(Error::Config("at least one experiment is required".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.record_fixture.is_some() && self.seeds.len() > 1 {
            return Err(Error::Config("fixture recording needs a single run (at most one seed)".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        Ok(())
    }

    /// Descriptor for one seed. Mock backends fold the run seed into their
    /// noise seed; other backends ignore it.
    fn descriptor_for(&self, seed: Option<u64>) -> ScorerDescriptor {
        let mut d = self.scorer.clone();
        if let (BackendConfig::Mock(cfg), Some(seed)) = (&mut d.backend, seed) {
            cfg.seed = batch_seed(cfg.seed, seed);
        }
        d
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AuditOptions {
    pub batch: BatchOptions,
    pub stage: Stage,
    pub seed: Option<u64>,
    pub reversed: bool,
}

/// Audits one experiment. Incompatible pronouns are an error; any
/// multi-token name yields an `N/A` run instead.
pub fn audit_experiment<S: Scorer + ?Sized>(
    scorer: &S,
    assets: &Assets,
    experiment: Experiment,
    opts: &AuditOptions,
) -> Result<MalorRun, Error> {
    let mut run = MalorRun {
        model: scorer.model_name().to_string(),
        experiment,
        stage: opts.stage,
        seed: opts.seed,
        status: RunStatus::Ok,
        note: None,
        report: None,
        shares: BTreeMap::new(),
        reversed_shares: BTreeMap::new(),
        reversed_excluded: Vec::new(),
    };

    if assets.templates_for(experiment).next().is_none() {
        return Err(Error::Config(format!("no {experiment} templates in the asset set")));
    }
    let (male_terms, female_terms) = gendered_terms(assets, experiment);
    let multi = multi_token_words(scorer, male_terms.iter().chain(&female_terms))?;
    if !multi.is_empty() {
        if experiment == Experiment::MaleFemaleNames {
            run.status = RunStatus::NotApplicable;
            run.note = Some(format!("multi-token names: {}", multi.join(", ")));
            info!("{} {experiment}: N/A ({} multi-token names)", run.model, multi.len());
            return Ok(run);
        }
        return Err(MetricsError::IncompatibleCandidate(multi.join(", ")).into());
    }

    let prompts = assets.prompts(experiment)?;
    let candidates: Vec<String> = male_terms.iter().chain(&female_terms).cloned().collect();
    let queries = prompts
        .iter()
        .map(|p| MaskedQuery::new(&p.text, candidates.iter().cloned()))
        .collect::<Result<Vec<_>, _>>()?;
    info!("{} {experiment}: scoring {} prompts", run.model, queries.len());
    let results = collect_results(score_batch(scorer, &queries, opts.batch))?;

    let mut records = Vec::with_capacity(prompts.len());
    for (prompt, scores) in prompts.iter().zip(results) {
        let (p_male_term, p_female_term) = match experiment.pronoun_pair() {
            Some(_) => (pronoun_probability(&scores, 0)?, pronoun_probability(&scores, 1)?),
            None => match name_set_probabilities(&scores, &assets.name_pairs) {
                Ok(p) => (p.p_male_names, p.p_female_names),
                Err(MetricsError::IncompatibleName(names)) => {
                    run.status = RunStatus::NotApplicable;
                    run.note = Some(format!("multi-token names: {}", names.join(", ")));
                    return Ok(run);
                }
                Err(e) => return Err(e.into()),
            },
        };
        records.push(ProbabilityRecord {
            template_id: prompt.template_id.clone(),
            occupation: prompt.occupation.clone(),
            p_male_term,
            p_female_term,
        });
    }

    let report = malor(scorer.model_name(), experiment, &records)?;
    for (occ, (pm, pf)) in occupation_means(&records) {
        run.shares.insert(occ, gender_share(pm, pf)?);
    }
    if opts.reversed {
        let (shares, excluded) = reversed_shares(scorer, assets, experiment, &male_terms, &female_terms, opts)?;
        run.reversed_shares = shares;
        run.reversed_excluded = excluded;
    }
    if report.floored_cells > 0 {
        warn!("{} {experiment}: {} cells floored", run.model, report.floored_cells);
    }
    run.report = Some(report);
    Ok(run)
}

fn gendered_terms(assets: &Assets, experiment: Experiment) -> (Vec<String>, Vec<String>) {
    match experiment.pronoun_pair() {
        Some((m, f)) => (vec![m.to_string()], vec![f.to_string()]),
        None => (
            assets.male_names().map(str::to_string).collect(),
            assets.female_names().map(str::to_string).collect(),
        ),
    }
}

fn multi_token_words<'a, S: Scorer + ?Sized>(
    scorer: &S,
    words: impl Iterator<Item = &'a String>,
) -> Result<Vec<String>, Error> {
    let mut multi = Vec::new();
    for w in words {
        if let VocabStatus::MultiToken(_) = scorer.vocab_check(w)? {
            multi.push(w.clone());
        }
    }
    Ok(multi)
}

fn collect_results(results: Vec<QueryResult>) -> Result<Vec<Vec<crate::scorer::CandidateProbability>>, Error> {
    let failed: Vec<_> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    for f in &failed {
        warn!("{f}");
    }
    if !failed.is_empty() {
        warn!("{} of {} queries failed", failed.len(), results.len());
    }
    results
        .into_iter()
        .map(|r| r.map_err(|f| Error::Scorer(f.error)))
        .collect()
}

fn pronoun_probability(scores: &[crate::scorer::CandidateProbability], i: usize) -> Result<f64, Error> {
    let c = &scores[i];
    c.probability
        .filter(|_| c.compatible)
        .ok_or_else(|| MetricsError::IncompatibleCandidate(c.candidate.clone()).into())
}

/// Male share per occupation with the occupation masked and each gendered
/// term written into the sentence.
fn reversed_shares<S: Scorer + ?Sized>(
    scorer: &S,
    assets: &Assets,
    experiment: Experiment,
    male_terms: &[String],
    female_terms: &[String],
    opts: &AuditOptions,
) -> Result<(BTreeMap<String, f64>, Vec<String>), Error> {
    let occupations: Vec<String> = assets.occupations.iter().map(|o| o.word.clone()).collect();
    let mut texts = Vec::new();
    for t in assets.templates_for(experiment) {
        let sentence_initial = t.text.starts_with(MASK);
        for (is_male, term) in male_terms.iter().map(|m| (true, m)).chain(female_terms.iter().map(|f| (false, f))) {
            let filler = if sentence_initial {
                CasePattern::Capitalized.apply(term)
            } else {
                term.clone()
            };
            texts.push((is_male, instantiate_gendered(t, &filler)?));
        }
    }
    let queries = texts
        .iter()
        .map(|(_, text)| MaskedQuery::new(text, occupations.iter().cloned()))
        .collect::<Result<Vec<_>, _>>()?;
    let results = collect_results(score_batch(scorer, &queries, opts.batch))?;

    let (mut male, mut female): (Vec<OccupationProfile>, Vec<OccupationProfile>) = (Vec::new(), Vec::new());
    for ((is_male, _), scores) in texts.iter().zip(&results) {
        let profile = profile_from_scores(scores);
        if *is_male {
            male.push(profile);
        } else {
            female.push(profile);
        }
    }
    let (male, female) = (average_profiles(&male), average_profiles(&female));
    let mut excluded: Vec<String> = male.excluded.iter().chain(&female.excluded).cloned().collect();
    excluded.sort();
    excluded.dedup();
    let mut shares = BTreeMap::new();
    for (occ, &pm) in &male.probabilities {
        if let Some(&pf) = female.probabilities.get(occ) {
            shares.insert(occ.clone(), gender_share(pm, pf)?);
        }
    }
    if !excluded.is_empty() {
        info!("{experiment}: excluded multi-token occupations {excluded:?}");
    }
    Ok((shares, excluded))
}

/// Runs every configured experiment for every seed, in a fixed order.
pub fn run_audit(config: &AuditConfig, assets: &Assets) -> Result<Vec<MalorRun>, Error> {
    config.validate()?;
    let seeds: Vec<Option<u64>> = if config.seeds.is_empty() {
        vec![None]
    } else {
        config.seeds.iter().copied().map(Some).collect()
    };
    let mut runs = Vec::new();
    for seed in seeds {
        let scorer = config.descriptor_for(seed).build()?;
        let opts = AuditOptions {
            batch: BatchOptions {
                concurrency: config.concurrency,
                retries: config.retries,
            },
            stage: config.stage,
            seed,
            reversed: config.reversed,
        };
        match &config.record_fixture {
            Some(path) => {
                let recorder = RecordingScorer::new(scorer);
                for &exp in &config.experiments {
                    runs.push(audit_experiment(&recorder, assets, exp, &opts)?);
                }
                recorder.into_fixture().save(path)?;
            }
            None => {
                for &exp in &config.experiments {
                    runs.push(audit_experiment(&scorer, assets, exp, &opts)?);
                }
            }
        }
    }
    Ok(runs)
}

/// `<model>_<experiment>_<stage>[_seed<k>].run.json`
pub fn run_file_name(run: &MalorRun) -> String {
    let seed = run.seed.map(|s| format!("_seed{s}")).unwrap_or_default();
    format!(
        "{}_{}_{}{seed}{}",
        file_stem(&run.model),
        run.experiment,
        run.stage.as_str(),
        crate::analysis::RUN_SUFFIX
    )
}

pub const MALOR_CSV_HEADER: &str = "stage,seed,model,experiment,malor,n,m,floored_cells,status";

/// Writes `runs/*.run.json` and `malor.csv`. Returns the written paths
/// relative to `out`.
pub fn write_audit_outputs(runs: &[MalorRun], out: &Path) -> Result<Vec<String>, Error> {
    let mut written = Vec::new();
    let mut csv = format!("{MALOR_CSV_HEADER}\n");
    for run in runs {
        let rel = format!("runs/{}", run_file_name(run));
        RunFile::Malor(run.clone()).save(&out.join(&rel))?;
        written.push(rel);
        let seed = run.seed.map(|s| s.to_string()).unwrap_or_default();
        let row = match &run.report {
            Some(r) if run.status == RunStatus::Ok => format!("{},ok", r.csv_row()),
            _ => format!(
                "{},{},N/A,,,,N/A",
                crate::metrics::csv_field(&run.model),
                run.experiment
            ),
        };
        csv.push_str(&format!("{},{seed},{row}\n", run.stage.as_str()));
    }
    fs::write(out.join(MALOR_CSV), csv).map_err(|e| Error::io(MALOR_CSV, e))?;
    written.push(MALOR_CSV.to_string());
    written.sort();
    Ok(written)
}

/// Asset identity recorded in every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetsInfo {
    pub version: String,
    pub digests: BTreeMap<String, String>,
}

impl From<&Assets> for AssetsInfo {
    fn from(a: &Assets) -> Self {
        Self {
            version: a.version.clone(),
            digests: a.digests.clone(),
        }
    }
}

/// Written next to every command's outputs. Contains no timestamps or host
/// details, so identical runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub assets: Option<AssetsInfo>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value, assets: Option<&Assets>, mut outputs: Vec<String>) -> Self {
        outputs.sort();
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            assets: assets.map(AssetsInfo::from),
            outputs,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), Error> {
        let mut json = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        json.push('\n');
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        fs::write(dir.join(MANIFEST_FILE), json).map_err(|e| Error::io(MANIFEST_FILE, e))
    }
}

/// Pulls the MALoR reports out of successful runs.
pub fn reports(runs: &[MalorRun]) -> Vec<&MalorReport> {
    runs.iter().filter_map(|r| r.report.as_ref()).collect()
}
