//! `biasaudit` command-line entry point.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use biasaudit::analysis::{emit_report, load_runs, Stage, DEFAULT_CONVERGENCE_WINDOW};
use biasaudit::audit::{run_audit, write_audit_outputs, AuditConfig, Manifest};
use biasaudit::cda::{
    build_names_dataset, build_pronoun_dataset, dataset_stats, filter_sentences, SentenceFilter,
    SwapLexicon, LEXICON_VERSION,
};
use biasaudit::pretrain::{
    collate, write_batches, MaskPolicy, TrainSchedule, WordVocab, DEFAULT_BASE_LR, DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
};
use biasaudit::scorer::{
    BackendConfig, MockConfig, RemoteConfig, Scorer, ScorerDescriptor, VocabStatus, DEFAULT_CONCURRENCY,
    ENDPOINT_ENV,
};
use biasaudit::templates::{load_assets_with, Assets, CountPolicy, Experiment};
use biasaudit::Error;

#[derive(Debug, Parser)]
#[command(name = "biasaudit", version, about = "Gender-bias auditing for masked language models")]
struct Cli {
    /// Directory with templates.jsonl, occupations.txt, names.csv and VERSION.
    /// The built-in probe set is used when omitted.
    #[arg(long, global = true)]
    assets: Option<PathBuf>,

    /// Accept asset sets of any size.
    #[arg(long, global = true)]
    custom_assets: bool,

    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true, default_value_t = DEFAULT_CONCURRENCY)]
    concurrency: usize,

    /// Format of the summary printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score the probe templates and compute MALoR.
    Audit(AuditArgs),
    /// Counterfactual data augmentation.
    #[command(subcommand)]
    Cda(CdaCommand),
    /// Prepare masked-LM training batches from a text file.
    Collate(CollateArgs),
    /// Aggregate run files into a report.
    Report(ReportArgs),
    /// Show how the model tokenizes words.
    VocabCheck(VocabCheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Backend {
    Mock,
    Fixture,
    Remote,
}

#[derive(Debug, Args, Serialize)]
struct ScorerArgs {
    #[arg(long, value_enum, default_value_t = Backend::Remote)]
    backend: Backend,

    #[arg(long, default_value = "bert-base-uncased")]
    model: String,

    /// Fixture file for `--backend fixture`.
    #[arg(long)]
    fixture: Option<PathBuf>,

    /// Scorer service URL for `--backend remote`.
    #[arg(long, env = ENDPOINT_ENV)]
    endpoint: Option<String>,

    /// JSON file with a full mock configuration.
    #[arg(long)]
    mock_config: Option<PathBuf>,

    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
}

impl ScorerArgs {
    fn descriptor(&self, concurrency: usize) -> Result<ScorerDescriptor, Error> {
        let backend = match self.backend {
            Backend::Mock => BackendConfig::Mock(match &self.mock_config {
                Some(p) => serde_json::from_str(&read_text(p)?)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                None => MockConfig::uniform(),
            }),
            Backend::Fixture => BackendConfig::Fixture {
                path: self
                    .fixture
                    .clone()
                    .ok_or_else(|| Error::Config("--backend fixture needs --fixture".into()))?,
            },
            Backend::Remote => BackendConfig::Remote(RemoteConfig {
                endpoint: self.endpoint.clone(),
                timeout_secs: self.timeout_secs,
                max_in_flight: concurrency,
            }),
        };
        Ok(ScorerDescriptor {
            model_name: self.model.clone(),
            backend,
        })
    }
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[command(flatten)]
    scorer: ScorerArgs,

    /// Experiments to run (default: all).
    #[arg(long = "experiment", value_parser = parse_experiment)]
    experiments: Vec<Experiment>,

    /// Comma-separated run seeds; overrides --seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,

    #[arg(long, value_enum, default_value_t = StageArg::Before)]
    stage: StageArg,

    /// Also score with the occupation masked.
    #[arg(long)]
    reversed: bool,

    #[arg(long, default_value_t = 2)]
    retries: u32,

    /// Record backend answers into a fixture file.
    #[arg(long)]
    record_fixture: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Before,
    After,
}

#[derive(Debug, Subcommand)]
enum CdaCommand {
    /// Filter a corpus and pair each sentence with its gender swap.
    Build(CdaBuildArgs),
}

#[derive(Debug, Args, Serialize)]
struct CdaBuildArgs {
    /// Line-delimited corpus (names experiment: one seed sentence per line).
    #[arg(long)]
    corpus: PathBuf,

    #[arg(long, value_parser = parse_experiment)]
    experiment: Experiment,

    /// Keep this many pairs, chosen with --seed.
    #[arg(long)]
    sample: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct CollateArgs {
    /// Text file, one training sentence per line.
    #[arg(long)]
    input: PathBuf,

    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,

    #[arg(long, default_value_t = 0.15)]
    select: f64,

    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    epochs: u32,

    #[arg(long, default_value_t = DEFAULT_BASE_LR)]
    lr: f64,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    /// Directory searched recursively for `*.run.json` files.
    #[arg(long = "in")]
    input: PathBuf,

    #[arg(long, default_value_t = DEFAULT_CONVERGENCE_WINDOW)]
    window: usize,
}

#[derive(Debug, Args)]
struct VocabCheckArgs {
    #[command(flatten)]
    scorer: ScorerArgs,

    /// Words to check; defaults to every pronoun, name and occupation.
    words: Vec<String>,
}

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    s.parse::<Experiment>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let body = json!({"error": {"kind": kind.as_str(), "exit_code": kind.exit_code(), "message": e.to_string()}});
            eprintln!("{body}");
            ExitCode::from(kind.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Audit(a) => cmd_audit(cli, a),
        Command::Cda(CdaCommand::Build(a)) => cmd_cda_build(cli, a),
        Command::Collate(a) => cmd_collate(cli, a),
        Command::Report(a) => cmd_report(cli, a),
        Command::VocabCheck(a) => cmd_vocab_check(cli, a),
    }
}

fn load(cli: &Cli) -> Result<Assets, Error> {
    match &cli.assets {
        None => Ok(Assets::shipped()),
        Some(dir) => {
            let policy = if cli.custom_assets {
                CountPolicy::Any
            } else {
                CountPolicy::Shipped
            };
            Ok(load_assets_with(dir, policy)?)
        }
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn cmd_audit(cli: &Cli, a: &AuditArgs) -> Result<(), Error> {
    let assets = load(cli)?;
    let experiments = if a.experiments.is_empty() {
        Experiment::ALL.to_vec()
    } else {
        a.experiments.clone()
    };
    let seeds = if a.seeds.is_empty() {
        cli.seed.into_iter().collect()
    } else {
        a.seeds.clone()
    };
    let config = AuditConfig {
        scorer: a.scorer.descriptor(cli.concurrency)?,
        experiments,
        seeds,
        concurrency: cli.concurrency,
        retries: a.retries,
        stage: match a.stage {
            StageArg::Before => Stage::Before,
            StageArg::After => Stage::After,
        },
        reversed: a.reversed,
        record_fixture: a.record_fixture.clone(),
    };
    let runs = run_audit(&config, &assets)?;
    let outputs = write_audit_outputs(&runs, &cli.out)?;
    let echo = json!({"assets_path": cli.assets, "audit": to_value(&config)});
    Manifest::new("audit", echo, Some(&assets), outputs).write(&cli.out)?;

    match cli.format {
        Format::Json => {
            let summary: Vec<_> = runs
                .iter()
                .map(|r| {
                    json!({
                        "model": r.model,
                        "experiment": r.experiment,
                        "seed": r.seed,
                        "status": r.status,
                        "malor": r.report.as_ref().map(|x| x.malor),
                    })
                })
                .collect();
            println!("{}", json!(summary));
        }
        Format::Csv => print!("{}", read_text(&cli.out.join(biasaudit::audit::MALOR_CSV))?),
    }
    Ok(())
}

fn cmd_cda_build(cli: &Cli, a: &CdaBuildArgs) -> Result<(), Error> {
    let assets = load(cli)?;
    let lexicon = SwapLexicon::new(&assets.name_pairs);
    let filter = SentenceFilter::new(a.experiment, &assets.occupations, &assets.name_pairs);
    let file = File::open(&a.corpus).map_err(|e| Error::io(a.corpus.display().to_string(), e))?;
    let provenance = vec![a.corpus.display().to_string()];

    let mut dataset = if a.experiment == Experiment::MaleFemaleNames {
        let seeds: Vec<String> = BufReader::new(file)
            .lines()
            .map(|l| l.map(|s| s.trim().to_string()))
            .filter(|l| !matches!(l, Ok(s) if s.is_empty()))
            .collect::<Result<_, _>>()
            .map_err(|e| Error::io(a.corpus.display().to_string(), e))?;
        build_names_dataset(&seeds, &assets.name_pairs, &lexicon, &filter, provenance)?
    } else {
        let sentences = filter_sentences(BufReader::new(file), &filter)?;
        build_pronoun_dataset(a.experiment, &sentences, &lexicon, &filter, provenance)
    };
    if let Some(n) = a.sample {
        dataset = dataset.sample(n, cli.seed.unwrap_or(0));
    }
    let stats = dataset_stats(&dataset, &lexicon, &filter);

    fs::create_dir_all(&cli.out).map_err(|e| Error::io(cli.out.display().to_string(), e))?;
    let write = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| -> Result<(), Error> {
        let path = cli.out.join(name);
        let file = File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path.display().to_string(), e))
    };
    write("pairs.jsonl", &|w| dataset.write_jsonl(w))?;
    write("train.txt", &|w| dataset.write_training_text(w))?;
    let stats_json = format!("{}\n", serde_json::to_string_pretty(&stats).unwrap_or_default());
    write("stats.json", &|w| w.write_all(stats_json.as_bytes()))?;

    let echo = json!({
        "assets_path": cli.assets,
        "cda": to_value(a),
        "seed": cli.seed,
        "lexicon_version": LEXICON_VERSION,
    });
    let outputs = vec!["pairs.jsonl".into(), "stats.json".into(), "train.txt".into()];
    Manifest::new("cda build", echo, Some(&assets), outputs).write(&cli.out)?;
    print_value(cli.format, &to_value(&stats));
    Ok(())
}

fn cmd_collate(cli: &Cli, a: &CollateArgs) -> Result<(), Error> {
    let text = read_text(&a.input)?;
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let vocab = WordVocab::build(lines.iter().copied());
    let seqs: Vec<_> = lines.iter().map(|l| vocab.encode(l)).collect();
    let policy = MaskPolicy {
        select: a.select,
        ..MaskPolicy::default()
    };
    let seed = cli.seed.unwrap_or(0);
    let info = vocab.info();
    let batches = collate(&seqs, a.batch_size, seed, &policy, &info)?;
    let schedule = TrainSchedule::new(a.epochs, a.lr, a.batch_size, seqs.len())?;

    let echo = json!({"collate": to_value(a), "seed": seed, "schedule": to_value(&schedule)});
    let manifest = write_batches(&cli.out, &batches, seed, &policy, &info, echo)?;
    let vocab_txt: String = vocab.tokens.iter().map(|t| format!("{t}\n")).collect();
    fs::write(cli.out.join("vocab.txt"), vocab_txt).map_err(|e| Error::io("vocab.txt", e))?;

    print_value(
        cli.format,
        &json!({
            "batches": manifest.batches.len(),
            "sequences": seqs.len(),
            "seq_len": manifest.seq_len,
            "vocab_size": info.size,
            "total_steps": schedule.total_steps,
        }),
    );
    Ok(())
}

fn cmd_report(cli: &Cli, a: &ReportArgs) -> Result<(), Error> {
    let runs = load_runs(&a.input)?;
    let (report, outputs) = emit_report(&runs, &cli.out, a.window)?;
    let echo = json!({"report": to_value(a)});
    Manifest::new("report", echo, None, outputs).write(&cli.out)?;
    match cli.format {
        Format::Json => print!("{}", report.to_json()),
        Format::Csv => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn cmd_vocab_check(cli: &Cli, a: &VocabCheckArgs) -> Result<(), Error> {
    let scorer = a.scorer.descriptor(cli.concurrency)?.build()?;
    let words: Vec<String> = if a.words.is_empty() {
        let assets = load(cli)?;
        let mut w: Vec<String> = ["he", "she", "his", "her"].iter().map(|s| s.to_string()).collect();
        w.extend(assets.male_names().map(String::from));
        w.extend(assets.female_names().map(String::from));
        w.extend(assets.occupations.iter().map(|o| o.word.clone()));
        w
    } else {
        a.words.clone()
    };
    let mut rows = Vec::with_capacity(words.len());
    for w in &words {
        let status = scorer.vocab_check(w)?;
        rows.push((w.clone(), status));
    }
    match cli.format {
        Format::Json => {
            let v: Vec<_> = rows
                .iter()
                .map(|(w, s)| json!({"word": w, "single_token": s.is_single(), "tokenization": s}))
                .collect();
            println!("{}", json!(v));
        }
        Format::Csv => {
            println!("word,single_token,pieces");
            for (w, s) in &rows {
                let pieces = match s {
                    VocabStatus::SingleToken => w.clone(),
                    VocabStatus::MultiToken(p) => p.join(" "),
                };
                println!("{w},{},{pieces}", s.is_single());
            }
        }
    }
    Ok(())
}

fn print_value(format: Format, v: &serde_json::Value) {
    match format {
        Format::Json => println!("{v}"),
        Format::Csv => {
            if let Some(obj) = v.as_object() {
                let scalar: Vec<_> = obj.iter().filter(|(_, x)| !x.is_object() && !x.is_array()).collect();
                println!("{}", scalar.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join(","));
                println!("{}", scalar.iter().map(|(_, x)| x.to_string()).collect::<Vec<_>>().join(","));
            }
        }
    }
}
