use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use secreq_core::corpus::{apply_exclusions, ingest_asvs, ingest_frs, ExclusionConfig, VrCorpus, REASON_DEPRECATED, REASON_PROCESS};
use secreq_core::datasets;
use secreq_core::generation::SrSet;
use secreq_core::metrics::{min_sample_size, SampleSizeSpec};
use secreq_core::pipeline::{Pipeline, PipelineError, RunConfig, Stage};
use secreq_core::retriever::load_index;
use secreq_core::scope::{filter_out_of_scope, KeywordConfig};

#[derive(Parser)]
#[command(name = "secreq", version, about = "Derive security requirements from functional requirements")]
struct Cli {
    /// Log filter, e.g. "info" or "secreq_core=debug".
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration (JSON). Without it, bundled data and defaults are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CorpusArgs {
    /// ASVS JSON export; defaults to the bundled 4.0.3 data.
    #[arg(long)]
    asvs: Option<PathBuf>,
    /// Exclusion config; defaults to the bundled one.
    #[arg(long)]
    exclusions: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse an ASVS export and apply exclusions; prints counts.
    IngestAsvs {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Write the in-scope corpus as ASVS JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate an FR dataset (JSON lines of {"id", "text"}).
    IngestFrs {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        project: String,
    },
    /// Synthesize FR-VR training pairs.
    SynthPairs(RunArgs),
    /// Rank-filter synthesized pairs with the zero-shot retriever.
    FilterPairs(RunArgs),
    /// Split accepted pairs into train and validation sets.
    Split(RunArgs),
    /// Train the token weight table.
    Train(RunArgs),
    /// Build and persist the retrieval index with the trained weights.
    BuildIndex(RunArgs),
    /// Top-k VRs for each FR in a file, as JSON lines.
    Retrieve {
        #[arg(long)]
        fr_file: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// A saved index directory (needs the corpus it was built from).
        #[arg(long, conflicts_with = "config")]
        index: Option<PathBuf>,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Generate SRs for every configured FR set.
    Generate(RunArgs),
    /// Mark SRs mentioning another project's keywords as out of scope.
    ScopeFilter {
        /// SR JSON lines as written by `generate`.
        #[arg(long)]
        sr_file: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        keywords: Option<PathBuf>,
    },
    /// Compute evaluation metrics.
    Evaluate(RunArgs),
    /// Minimum sample size for a proportion estimate.
    SampleSize {
        #[arg(long)]
        population: Option<u64>,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
        #[arg(long, default_value_t = 0.05)]
        margin: f64,
        #[arg(long, default_value_t = 0.5)]
        proportion: f64,
    },
    /// Run every stage and write the report bundle.
    Report(RunArgs),
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn print_json(v: &Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn load_corpus(args: &CorpusArgs) -> Result<(VrCorpus, VrCorpus, Vec<String>)> {
    let asvs = match &args.asvs {
        Some(p) => read(p)?,
        None => datasets::ASVS_4_0_3.to_string(),
    };
    let exclusions = match &args.exclusions {
        Some(p) => read(p)?,
        None => datasets::EXCLUSIONS.to_string(),
    };
    let full = ingest_asvs(&asvs)?;
    let (corpus, outcome) = apply_exclusions(&full, &ExclusionConfig::from_json(&exclusions)?.prefixes());
    Ok((full, corpus, outcome.unmatched))
}

fn open_pipeline(args: &RunArgs) -> Result<Pipeline> {
    let mut config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &args.output_dir {
        config.output_dir = dir.clone();
    }
    Ok(Pipeline::open(config)?)
}

fn stage_output(p: &Pipeline, stage: Stage) -> Result<Value> {
    let rec = p.stage_record(stage)?.context("stage did not complete")?;
    Ok(json!({
        "stage": stage.name(),
        "run_hash": p.run_hash(),
        "dir": p.stage_dir(stage),
        "summary": rec.summary,
    }))
}

fn run_stage(args: &RunArgs, stage: Stage) -> Result<()> {
    let mut p = open_pipeline(args)?;
    match stage {
        Stage::SynthPairs => drop(p.synth_pairs()?),
        Stage::FilterPairs => drop(p.filter_pairs()?),
        Stage::Split => drop(p.split()?),
        Stage::Train => drop(p.train()?),
        Stage::BuildIndex => drop(p.build_index()?),
        Stage::Generate => drop(p.generate()?),
        Stage::Evaluate => drop(p.evaluate()?),
        Stage::Report => {
            let bundle = p.end_to_end()?;
            return print_json(&json!({
                "run_hash": p.run_hash(),
                "bundle": bundle.bundle_path(),
                "evaluation": bundle.evaluation,
                "failures": bundle.failures,
            }));
        }
        other => bail!("stage {} is not run directly", other.name()),
    }
    print_json(&stage_output(&p, stage)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::IngestAsvs { corpus, out } => {
            let (full, in_scope, unmatched) = load_corpus(&corpus)?;
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&in_scope.to_asvs_export())?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            print_json(&json!({
                "source_version": full.source_version,
                "valid": full.len(),
                "deprecated": full.count_excluded(REASON_DEPRECATED),
                "per_chapter": full.chapter_counts(),
                "excluded_process": in_scope.count_excluded(REASON_PROCESS),
                "in_scope": in_scope.len(),
                "unmatched_exclusions": unmatched,
                "corpus_hash": in_scope.content_hash(),
            }))
        }
        Command::IngestFrs { file, project } => {
            let (set, rejected) = ingest_frs(&read(&file)?, &project)?;
            print_json(&json!({"project": set.project, "accepted": set.len(), "rejected": rejected}))
        }
        Command::SynthPairs(a) => run_stage(&a, Stage::SynthPairs),
        Command::FilterPairs(a) => run_stage(&a, Stage::FilterPairs),
        Command::Split(a) => run_stage(&a, Stage::Split),
        Command::Train(a) => run_stage(&a, Stage::Train),
        Command::BuildIndex(a) => run_stage(&a, Stage::BuildIndex),
        Command::Generate(a) => run_stage(&a, Stage::Generate),
        Command::Evaluate(a) => run_stage(&a, Stage::Evaluate),
        Command::Report(a) => run_stage(&a, Stage::Report),
        Command::Retrieve {
            fr_file,
            k,
            index,
            corpus,
            config,
            output_dir,
        } => {
            let index = match index {
                Some(dir) => load_index(&dir, &load_corpus(&corpus)?.1)?,
                None => open_pipeline(&RunArgs { config, output_dir })?.build_index()?,
            };
            let (frs, rejected) = ingest_frs(&read(&fr_file)?, "input")?;
            if !rejected.is_empty() {
                bail!("{} FR record(s) rejected, first at line {}", rejected.len(), rejected[0].line);
            }
            let mut out = std::io::stdout().lock();
            for fr in &frs.records {
                let results = index.retrieve_top_k(&fr.text, k)?;
                writeln!(out, "{}", json!({"fr_id": fr.id, "results": results}))?;
            }
            Ok(())
        }
        Command::ScopeFilter {
            sr_file,
            target,
            keywords,
        } => {
            let config = match keywords {
                Some(p) => KeywordConfig::from_json(&read(&p)?)?,
                None => KeywordConfig::default_config(),
            };
            let records = SrSet::records_from_jsonl(&read(&sr_file)?)?;
            let generated: Vec<_> = records.iter().filter(|r| !r.gated).collect();
            let texts: Vec<&str> = generated.iter().map(|r| r.text.as_str()).collect();
            let decisions = filter_out_of_scope(&texts, &target, &config)?;
            let mut out = std::io::stdout().lock();
            for (r, d) in generated.iter().zip(decisions) {
                writeln!(
                    out,
                    "{}",
                    json!({
                        "fr_id": r.fr_id,
                        "vr_id": r.vr_id,
                        "in_scope": d.in_scope,
                        "matched_keyword": d.matched_keyword,
                        "matched_foreign_project": d.matched_foreign_project,
                    })
                )?;
            }
            Ok(())
        }
        Command::SampleSize {
            population,
            confidence,
            margin,
            proportion,
        } => {
            let n = min_sample_size(&SampleSizeSpec {
                population,
                confidence,
                margin,
                proportion,
            })?;
            println!("{n}");
            Ok(())
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    match e.downcast_ref::<PipelineError>() {
        Some(p) => p.kind(),
        None => "error",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = json!({
                "error": format!("{e:#}"),
                "kind": error_kind(&e),
            });
            eprintln!("{report}");
            ExitCode::from(1)
        }
    }
}
