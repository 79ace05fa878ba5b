//! `wsc`: label traces, train the probe, replay the chop policy offline,
//! summarize labels and run the decision sidecar.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use wsc_core::analytics::{chunk_label_stats, overhead_ratio};
use wsc_core::policy::ChopScope;
use wsc_core::synthetic::{salad_corpus, SaladCorpusSpec};
use wsc_core::trace::{read_manifest, resolve_first_rows, write_manifest, write_manifest_to};
use wsc_core::{
    curate, evaluate, load_vector_table, replay, save_vector_table, train, Error, LabelerConfig,
    LabeledDataset, PolicyConfig, ProbeModel, TraceRecord, TrainConfig, VectorRef, VectorTable,
};

const EXIT_INVALID: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "wsc", version, about = "Word-salad detection and chopping for reasoning traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus (manifest, hidden states, embeddings, probe)
    Synth(SynthArgs),
    /// Label chunks as salad and derive training labels from chunk embeddings
    Label(LabelArgs),
    /// Train the linear probe on labeled hidden states
    Fit(FitArgs),
    /// Report probe accuracy and AUROC on labeled hidden states
    Eval(EvalArgs),
    /// Re-run the chop policy over recorded traces
    Replay(ReplayArgs),
    /// Summarize salad labels per trace and pooled
    Analyze(AnalyzeArgs),
    /// Serve chop decisions over TCP
    Serve(ServeArgs),
    /// Classifier cost per chunk relative to decoding the chunk
    Overhead(OverheadArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 24)]
    traces: usize,
    #[arg(long, default_value_t = 41)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Embedding table; defaults to each trace's `embed_ref`
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0.99)]
    theta: f64,
    #[arg(long, default_value_t = 100)]
    window: usize,
    #[arg(long, default_value_t = 2)]
    consecutive: usize,
    /// Labeled manifest; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Hidden-state table; defaults to each trace's `hidden_ref`
    #[arg(long)]
    hidden: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 8192)]
    batch_size: usize,
    #[arg(long, default_value_t = 41)]
    seed: u64,
    /// Keep the class imbalance instead of downsampling the majority
    #[arg(long)]
    no_rebalance: bool,
    #[arg(long)]
    no_pos_weight: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    hidden: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long, default_value_t = 0.5)]
    thresh: f64,
    #[arg(long, default_value_t = 2)]
    streak_len: u32,
    #[arg(long, default_value_t = 10)]
    len_threshold: usize,
    #[arg(long, default_value_t = 5)]
    short_streak_len: u32,
    /// Fixed rescue budget; looked up per run when omitted
    #[arg(long)]
    regen_budget: Option<u32>,
    /// Truncate the whole streak instead of only the triggering chunk
    #[arg(long)]
    whole_streak: bool,
}

impl PolicyArgs {
    fn config(&self, run: Option<&TraceRecord>) -> PolicyConfig {
        let base = run.map_or_else(PolicyConfig::default, |t| {
            PolicyConfig::for_run(&t.model_id, &t.task, t.temperature)
        });
        PolicyConfig {
            thresh: self.thresh,
            streak_len: self.streak_len,
            len_threshold: self.len_threshold,
            short_streak_len: self.short_streak_len,
            regen_budget: self.regen_budget.unwrap_or(base.regen_budget),
            chop_scope: if self.whole_streak { ChopScope::WholeStreak } else { ChopScope::TriggeringChunk },
            ..base
        }
    }
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    hidden: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Report file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 2)]
    consecutive: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7070")]
    listen: String,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Args)]
struct OverheadArgs {
    /// Seconds per probe call
    #[arg(long)]
    t_classifier: f64,
    /// Seconds per decoded token
    #[arg(long)]
    t_llm: f64,
    #[arg(long)]
    mean_chunk_len: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return if err.is_io() { EXIT_IO } else { EXIT_INVALID };
        }
        if cause.is::<io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_INVALID
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Label(a) => label(a),
        Command::Fit(a) => fit(a),
        Command::Eval(a) => eval(a),
        Command::Replay(a) => replay_cmd(a),
        Command::Analyze(a) => analyze(a),
        Command::Serve(a) => serve(a),
        Command::Overhead(a) => {
            let r = overhead_ratio(a.t_classifier, a.t_llm, a.mean_chunk_len)?;
            println!("{}", json!({ "overhead_ratio": r, "overhead_pct": 100.0 * r }));
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SaladCorpusSpec {
        traces: a.traces,
        seed: a.seed,
        hidden_dim: a.hidden_dim,
        ..Default::default()
    };
    let corpus = salad_corpus(&spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_vector_table(a.out.join(&spec.hidden_path), &corpus.hidden)?;
    save_vector_table(a.out.join(&spec.embed_path), &corpus.embed)?;
    corpus.probe.save(a.out.join("reference.wscm"))?;
    write_manifest(a.out.join("manifest.jsonl"), &corpus.traces)?;
    println!(
        "{}",
        json!({
            "traces": corpus.traces.len(),
            "chunks": corpus.hidden.count(),
            "looping": corpus.loop_starts.iter().filter(|s| s.is_some()).count(),
            "dir": a.out,
        })
    );
    Ok(())
}

/// Vector tables referenced by a manifest, loaded once each. Relative paths
/// resolve against the manifest's directory.
struct Tables {
    base: PathBuf,
    fixed: Option<PathBuf>,
    loaded: HashMap<PathBuf, VectorTable>,
}

impl Tables {
    fn new(manifest: &Path, fixed: Option<PathBuf>) -> Self {
        let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        Self { base, fixed, loaded: HashMap::new() }
    }

    /// Rows for each trace's chunks, in manifest order.
    fn rows_for(
        &mut self,
        traces: &[TraceRecord],
        reference: impl Fn(&TraceRecord) -> Option<&VectorRef>,
        kind: &str,
    ) -> Result<Vec<(PathBuf, usize)>> {
        let firsts = resolve_first_rows(traces, &reference);
        let mut out = Vec::with_capacity(traces.len());
        for (t, first) in traces.iter().zip(firsts) {
            let path = match (&self.fixed, reference(t)) {
                (Some(p), _) => p.clone(),
                (None, Some(r)) => self.base.join(&r.path),
                (None, None) => bail!("trace {} has no {kind} table; pass --{kind}", t.trace_id),
            };
            if !self.loaded.contains_key(&path) {
                info!("loading {}", path.display());
                let table = load_vector_table(&path).with_context(|| format!("reading {}", path.display()))?;
                self.loaded.insert(path.clone(), table);
            }
            out.push((path, first));
        }
        Ok(out)
    }

    fn get(&self, path: &Path) -> &VectorTable {
        &self.loaded[path]
    }
}

fn rows<'a>(table: &'a VectorTable, trace: &TraceRecord, first: usize) -> Result<Vec<&'a [f32]>> {
    table.rows_range(first, trace.chunks.len()).ok_or_else(|| {
        Error::MissingVectors(format!(
            "trace {} needs rows {}..{} but the table has {}",
            trace.trace_id,
            first,
            first + trace.chunks.len(),
            table.count()
        ))
        .into()
    })
}

fn load_traces(path: &Path) -> Result<Vec<TraceRecord>> {
    let traces = read_manifest(path).with_context(|| format!("reading {}", path.display()))?;
    for t in &traces {
        t.validate()?;
    }
    Ok(traces)
}

fn label(a: LabelArgs) -> Result<()> {
    let cfg = LabelerConfig {
        theta: a.theta,
        window: a.window,
        consecutive_required: a.consecutive,
    };
    cfg.validate()?;
    let mut traces = load_traces(&a.manifest)?;
    let mut tables = Tables::new(&a.manifest, a.embeddings);
    let locs = tables.rows_for(&traces, |t| t.embed_ref.as_ref(), "embeddings")?;
    let mut with_point = 0;
    for (trace, (path, first)) in traces.iter_mut().zip(locs) {
        let labels = curate(&rows(tables.get(&path), trace, first)?, &cfg)?;
        with_point += usize::from(labels.chopping_point.is_some());
        for (chunk, (s, t)) in trace.chunks.iter_mut().zip(labels.salad.iter().zip(&labels.train)) {
            chunk.salad_label = Some(*s);
            chunk.train_label = Some(*t);
        }
    }
    info!("{} traces labeled, {with_point} with a chopping point", traces.len());
    match a.out {
        Some(p) => write_manifest(&p, &traces).with_context(|| format!("writing {}", p.display()))?,
        None => write_manifest_to(io::stdout().lock(), &traces)?,
    }
    Ok(())
}

/// Hidden states paired with training labels across all traces.
fn training_set(manifest: &Path, hidden: Option<PathBuf>) -> Result<LabeledDataset> {
    let traces = load_traces(manifest)?;
    let mut tables = Tables::new(manifest, hidden);
    let locs = tables.rows_for(&traces, |t| t.hidden_ref.as_ref(), "hidden")?;
    let mut out: Option<VectorTable> = None;
    let mut labels = Vec::new();
    for (trace, (path, first)) in traces.iter().zip(locs) {
        let table = tables.get(&path);
        let dst = match &mut out {
            Some(t) => t,
            None => out.insert(VectorTable::new(table.dim())?),
        };
        for (chunk, row) in trace.chunks.iter().zip(rows(table, trace, first)?) {
            let y = chunk.train_label.ok_or_else(|| Error::UnlabeledChunk {
                trace_id: trace.trace_id.clone(),
                index: chunk.index,
            })?;
            dst.push_row(row)?;
            labels.push(y);
        }
    }
    let vectors = out.ok_or(Error::Empty("manifest"))?;
    Ok(LabeledDataset::new(vectors, labels)?)
}

fn fit(a: FitArgs) -> Result<()> {
    let cfg = TrainConfig {
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        rebalance: !a.no_rebalance,
        use_pos_weight: !a.no_pos_weight,
    };
    cfg.validate()?;
    let data = training_set(&a.manifest, a.hidden)?;
    let (pos, neg) = data.class_counts();
    let model = train(&data, &cfg)?;
    model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{}",
        json!({
            "model": a.out,
            "dim": model.dim(),
            "positives": pos,
            "negatives": neg,
            "train_samples": model.meta.train_samples,
            "pos_weight": model.meta.pos_weight,
        })
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = ProbeModel::load(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let data = training_set(&a.manifest, a.hidden)?;
    let report = evaluate(&model, &data, a.threshold)?;
    if a.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        let auc = report.auroc.map_or("n/a".to_owned(), |v| format!("{:.2}", 100.0 * v));
        println!("Acc {:.2} / AUROC {auc}", 100.0 * report.accuracy);
    }
    Ok(())
}

fn replay_cmd(a: ReplayArgs) -> Result<()> {
    let model = ProbeModel::load(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let traces = load_traces(&a.manifest)?;
    let mut tables = Tables::new(&a.manifest, a.hidden);
    let locs = tables.rows_for(&traces, |t| t.hidden_ref.as_ref(), "hidden")?;
    let mut reports = Vec::with_capacity(traces.len());
    for (trace, (path, first)) in traces.iter().zip(locs) {
        let cfg = a.policy.config(Some(trace));
        reports.push(replay(trace, tables.get(&path), first, &model, &cfg)?);
    }
    let total: usize = reports.iter().map(|r| r.tokens_total).sum();
    let saved: usize = reports.iter().map(|r| r.tokens_saved).sum();
    let summary = json!({
        "traces": reports.len(),
        "chopped": reports.iter().filter(|r| r.chop_index.is_some()).count(),
        "tokens_total": total,
        "tokens_saved": saved,
        "saved_pct": if total == 0 { 0.0 } else { 100.0 * saved as f64 / total as f64 },
    });
    let doc = json!({ "summary": summary, "reports": reports });
    match a.out {
        Some(p) => fs::write(&p, serde_json::to_vec_pretty(&doc)?).with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut out = io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, &doc)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let traces = load_traces(&a.manifest)?;
    let stats = chunk_label_stats(&traces, a.consecutive)?;
    if let Some(p) = &a.csv {
        fs::write(p, stats.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "traces": stats.traces,
            "traces_with_point": stats.traces_with_point,
            "overall_salad_token_pct": stats.overall_salad_token_pct,
            "overall_salad_chunk_pct": stats.overall_salad_chunk_pct,
            "pre_point_pct": stats.pre_point_pct,
            "post_point_pct": stats.post_point_pct,
        }))?
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let model = ProbeModel::load(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let cfg = a.policy.config(None);
    let server = wsc_core::service::Server::bind(a.listen.as_str(), model, cfg)?;
    eprintln!("listening on {}", server.local_addr()?);
    server.run()?;
    Ok(())
}
