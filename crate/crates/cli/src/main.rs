//! `i2e`: run pipeline stages on files, compute metrics, or start the service.
//!
//! Exit codes: 0 success, 1 bad input, 2 backend failure, 3 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use i2e_agents::asr::{AsrError, AsrFixture, AsrGateway};
use i2e_agents::eval::{evaluate_session, EvalError};
use i2e_agents::refine::{refine, RefineError};
use i2e_core::metrics::{
    agreement, categorize_errors, compute_cer, efficiency_gain, AgreementError, CerComparison, Grouping,
    NormalizationPolicy, WorkflowTimings,
};
use i2e_core::{
    canonical_string, load_rubric, parse, score_judgments, AudioSession, ExpertAnnotation, HomophoneLexicon,
    IndicatorJudgment, Meta, Rubric, Transcript,
};
use i2e_service::config::{AsrKind, Config};
use i2e_service::pipeline::Pipeline;
use i2e_service::store::Store;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "i2e", version, about = "Classroom interaction assessment pipeline")]
struct Cli {
    /// Configuration file (`i2e.toml`); defaults apply when omitted.
    #[arg(long, global = true, visible_alias = "backend")]
    config: Option<PathBuf>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transcribe an audio file into a raw transcript.
    Transcribe {
        #[arg(long)]
        audio: PathBuf,
        /// Taken from the fixture file under the mock backend when omitted.
        #[arg(long)]
        session_id: Option<String>,
        #[arg(long)]
        duration_ms: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Mock backend only: also write the fixture's gold transcript.
        #[arg(long)]
        gold_out: Option<PathBuf>,
        /// Mock backend only: also write the list of injected errors.
        #[arg(long)]
        manifest_out: Option<PathBuf>,
    },
    /// Correct recognition errors in a raw transcript.
    Refine {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to write the per-window audit.
        #[arg(long)]
        audit: Option<PathBuf>,
        /// Overrides the lexicon from the config.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Judge every language-accessible indicator of a rubric.
    Evaluate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        rubric: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn judgments into item, dimension and overall scores.
    Score {
        #[arg(long)]
        judgments: PathBuf,
        #[arg(long)]
        rubric: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Character error rate of a transcript against a gold transcript.
    Cer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        /// A refined transcript, compared with `--hyp` as the raw one.
        #[arg(long)]
        refined: Option<PathBuf>,
        /// Also break the errors of `--hyp` down by category.
        #[arg(long)]
        categories: bool,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Cohen's kappa and percent agreement between judgments and an expert.
    Agree {
        #[arg(long)]
        judgments: PathBuf,
        #[arg(long, visible_alias = "annotation")]
        gold: PathBuf,
        #[arg(long)]
        rubric: PathBuf,
        #[arg(long, value_enum, default_value_t = GroupBy::Dimension)]
        group_by: GroupBy,
    },
    /// Manual vs automated assessment time.
    Efficiency {
        /// Workflow timings JSON; the reference figures are used when omitted.
        #[arg(long)]
        timings: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        classrooms: u32,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        data_root: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupBy {
    Dimension,
    Scale,
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Backend(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Backend(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Backend(m) | CliError::Internal(m) => m,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    parse(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_rubric(path: &Path) -> Result<Rubric> {
    load_rubric(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_lexicon(path: &Path) -> Result<HomophoneLexicon> {
    HomophoneLexicon::load(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Writes canonical JSON to `out`, or to stdout.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = canonical_string(value);
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Internal(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Segment texts in time order, concatenated.
fn transcript_text(t: &Transcript) -> String {
    let mut segs: Vec<_> = t.segments.iter().collect();
    segs.sort_by_key(|s| (s.start_ms, s.end_ms));
    segs.iter().map(|s| s.text.as_str()).collect()
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let cfg = match path {
        Some(p) => Config::load(p).map_err(input)?,
        None => Config::default(),
    };
    cfg.with_env().map_err(input)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Transcribe { audio, session_id, duration_ms, out, gold_out, manifest_out } => {
            let audio = audio.canonicalize().map_err(|e| CliError::Input(format!("{}: {e}", audio.display())))?;
            let fixture = match cfg.asr_kind {
                AsrKind::Mock => Some(read_json::<AsrFixture>(&audio)?),
                AsrKind::Http if gold_out.is_some() || manifest_out.is_some() => {
                    return Err(input("--gold-out and --manifest-out need the mock ASR backend"))
                }
                AsrKind::Http => None,
            };
            let session = AudioSession {
                session_id: session_id
                    .or_else(|| fixture.as_ref().map(|f| f.session_id.clone()))
                    .ok_or_else(|| input("--session-id is required"))?,
                duration_ms: duration_ms
                    .or_else(|| fixture.as_ref().map(|f| f.duration_ms))
                    .ok_or_else(|| input("--duration-ms is required"))?,
                classroom_meta: Meta::new(),
                audio_uri: Some(audio.to_string_lossy().into_owned()),
            };
            let gateway = AsrGateway::new(cfg.asr_backend().map_err(input)?, cfg.asr.clone()).map_err(input)?;
            let result = gateway.transcribe(&session).map_err(|e| match e {
                AsrError::AudioUnreadable(_) | AsrError::InvalidConfig(_) => input(e),
                e => CliError::Backend(e.to_string()),
            })?;
            for w in &result.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(f) = &fixture {
                if let Some(p) = gold_out {
                    let mut gold = f.gold_transcript().map_err(input)?;
                    gold.session_id = session.session_id.clone();
                    emit(&gold, Some(&p))?;
                }
                if let Some(p) = manifest_out {
                    emit(&f.corrupt().map_err(input)?.1, Some(&p))?;
                }
            }
            emit(&result.transcript, out.as_deref())
        }
        Command::Refine { input: raw, out, audit, lexicon } => {
            let t: Transcript = read_json(&raw)?;
            let lexicon = match lexicon {
                Some(p) => read_lexicon(&p)?,
                None => cfg.lexicon().map_err(input)?,
            };
            let llm = cfg.llm_backend(&lexicon).map_err(input)?;
            let outcome = refine(&t, &lexicon, &llm, cfg.refine).map_err(|e| match e {
                RefineError::AllWindowsFailed(_) => CliError::Backend(e.to_string()),
                RefineError::Apply(_) => CliError::Internal(e.to_string()),
                e => input(e),
            })?;
            if let Some(p) = audit {
                emit(&outcome.audit, Some(&p))?;
            }
            let rejected = outcome.audit.windows.iter().filter(|w| !w.accepted).count();
            if rejected > 0 {
                eprintln!("warning: {rejected} window(s) kept their raw text");
            }
            emit(&outcome.transcript, out.as_deref())
        }
        Command::Evaluate { input: transcript, rubric, out } => {
            let t: Transcript = read_json(&transcript)?;
            let rubric = read_rubric(&rubric)?;
            let llm = cfg.llm_backend(&cfg.lexicon().map_err(input)?).map_err(input)?;
            let judgments = evaluate_session(&rubric, &t, &llm, &cfg.eval, &|_, _| {}).map_err(|e| match e {
                EvalError::SessionEvalFailed(_) => CliError::Backend(e.to_string()),
                e => input(e),
            })?;
            let flagged = judgments.iter().filter(|j| j.validation.is_flagged()).count();
            if flagged > 0 {
                eprintln!("note: {flagged} judgment(s) need expert review");
            }
            emit(&judgments, out.as_deref())
        }
        Command::Score { judgments, rubric, out } => {
            let rubric = read_rubric(&rubric)?;
            let judgments: Vec<IndicatorJudgment> = read_json(&judgments)?;
            let summary = score_judgments(&rubric, &judgments).map_err(input)?;
            if out.is_some() || cli.json {
                return emit(&summary, out.as_deref());
            }
            for item in &summary.per_item {
                println!("item {}\t{}", item.item_id, item.score);
            }
            for (dim, mean) in &summary.per_dimension {
                println!("{dim}\t{mean:.2}");
            }
            match summary.overall_mean {
                Some(m) => println!("overall\t{m:.2}"),
                None => println!("overall\tn/a"),
            }
            if !summary.provisional_items.is_empty() {
                println!("provisional items: {}", summary.provisional_items.join(", "));
            }
            Ok(())
        }
        Command::Cer { reference, hyp, refined, categories, lexicon } => {
            let gold_t: Transcript = read_json(&reference)?;
            let hyp_t: Transcript = read_json(&hyp)?;
            let policy = NormalizationPolicy::default();
            let gold_text = transcript_text(&gold_t);
            let raw = compute_cer(&gold_text, &transcript_text(&hyp_t), policy).map_err(input)?;
            let mut body = serde_json::json!({ "cer": raw });
            let mut lines = vec![format!(
                "CER {:.2}% (S={} D={} I={} N={})",
                raw.cer * 100.0,
                raw.substitutions,
                raw.deletions,
                raw.insertions,
                raw.ref_chars
            )];
            if let Some(p) = refined {
                let refined_t: Transcript = read_json(&p)?;
                let r = compute_cer(&gold_text, &transcript_text(&refined_t), policy).map_err(input)?;
                let cmp = CerComparison::new(raw.cer, r.cer);
                lines.push("system\traw\trefined\tdelta".to_owned());
                lines.push(cmp.render_row(&hyp_t.session_id));
                body["refined_cer"] = serde_json::to_value(&r).unwrap_or_default();
                body["comparison"] = serde_json::to_value(cmp).unwrap_or_default();
            }
            if categories {
                let lexicon = match lexicon {
                    Some(p) => read_lexicon(&p)?,
                    None => cfg.lexicon().map_err(input)?,
                };
                let report = categorize_errors(&gold_t, &hyp_t, &lexicon).map_err(input)?;
                for (c, n) in &report.counts {
                    lines.push(format!("{c:?}\t{n}\t{:.1}%", report.shares[c] * 100.0));
                }
                body["categories"] = serde_json::to_value(&report).unwrap_or_default();
            }
            if cli.json {
                emit(&body, None)
            } else {
                println!("{}", lines.join("\n"));
                Ok(())
            }
        }
        Command::Agree { judgments, gold, rubric, group_by } => {
            let rubric = read_rubric(&rubric)?;
            let judgments: Vec<IndicatorJudgment> = read_json(&judgments)?;
            let annotation: ExpertAnnotation = read_json(&gold)?;
            let resolved = i2e_core::resolve_judgments(&rubric, &judgments);
            let grouping = match group_by {
                GroupBy::Dimension => Grouping::Dimension,
                GroupBy::Scale => Grouping::Scale,
            };
            let report = agreement(&resolved.values, &annotation, &rubric, grouping).map_err(|e| match e {
                AgreementError::KeyMismatch { .. } => CliError::Input(format!("indicator keys do not match: {e}")),
                e => input(e),
            })?;
            if cli.json {
                return emit(&report, None);
            }
            let fmt = |v: Option<f64>| v.map_or("n/a".to_owned(), |x| format!("{x:.4}"));
            println!("group\tkappa\tagreement\tn");
            for (group, s) in &report.per_group {
                println!("{group}\t{}\t{:.4}\t{}", fmt(s.kappa), s.pct_agreement, s.confusion.total());
            }
            println!("mean\t{}\t{}", fmt(report.mean_kappa), fmt(report.mean_pct_agreement));
            Ok(())
        }
        Command::Efficiency { timings, classrooms } => {
            let timings: WorkflowTimings = match timings {
                Some(p) => read_json(&p)?,
                None => WorkflowTimings::reference(),
            };
            let report = efficiency_gain(&timings).map_err(input)?;
            let hours = report.hours_at(classrooms);
            if cli.json {
                return emit(&serde_json::json!({"report": report, "speedup_label": report.render_speedup(), "hours": hours}), None);
            }
            println!(
                "manual {:.0} min, automated {:.0} min, speedup {}",
                report.total_traditional_min,
                report.total_automated_min,
                report.render_speedup()
            );
            println!(
                "{} classrooms: {:.0} h manual vs {:.1} h automated",
                classrooms, hours.traditional_hours, hours.automated_hours
            );
            Ok(())
        }
        Command::Serve { port, data_root } => serve(cfg, port, data_root),
    }
}

fn serve(mut cfg: Config, port: Option<u16>, data_root: Option<PathBuf>) -> Result<()> {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .try_init();
    if let Some(p) = port {
        cfg.service.port = p;
    }
    if let Some(d) = data_root {
        cfg.service.data_root = d;
    }
    let store = Store::open(&cfg.service.data_root).map_err(|e| CliError::Internal(e.to_string()))?;
    let pipeline = Pipeline::new(store, cfg.backends().map_err(input)?).map_err(input)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Internal(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", cfg.service.port))
            .await
            .map_err(|e| CliError::Input(format!("cannot bind port {}: {e}", cfg.service.port)))?;
        eprintln!("listening on {}", listener.local_addr().map_err(|e| CliError::Internal(e.to_string()))?);
        i2e_service::api::serve(
            listener,
            Arc::new(pipeline),
            cfg.service.workers,
            cfg.service.max_upload_bytes,
            cfg.service.bearer_token.clone(),
        )
        .await
        .map_err(|e| CliError::Internal(e.to_string()))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                eprintln!("{}", serde_json::json!({"error": {"exit_code": e.code(), "message": e.message()}}));
            } else {
                eprintln!("error: {}", e.message());
            }
            ExitCode::from(e.code())
        }
    }
}
