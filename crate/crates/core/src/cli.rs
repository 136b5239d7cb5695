//! Command-line orchestration.
//!
//! Output layout under the configured `output_dir`:
//!
//! ```text
//! candidates/{kind}.jsonl, candidates/manifest.json
//! selection.json
//! ranked/{kind}.jsonl, frozen/{kind}.jsonl        (perplexity mode)
//! random/seed-{seed}.jsonl                         (random mode)
//! bias/summary.csv, bias/report.json, bias/reports.jsonl, bias/per_seed.csv
//! downstream/{source}/summary.csv, report.json, traces.csv, per_seed.csv
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{default_seeds, BackendSpec, ConfigError, LoadedConfig, RunConfig, SelectionSpec};
use crate::corpus::{self, filter_bias_type, load_crows_pairs, load_multiple_choice, sample_items, CorpusError};
use crate::downstream::{evaluate_dataset, DownstreamError, DownstreamReport};
use crate::exec::{compensated_sum, ExecMode};
use crate::lexicon::{self, validate_descriptions, LexiconError, DEFAULT_SHARE_THRESHOLD};
use crate::metrics::{delta_percent, evaluate_condition, BiasReport, MetricsError};
use crate::preamble::{
    baseline_instruct, baseline_intervention, generate_candidates, generate_chained, Preamble, PreambleError,
    PreambleKind,
};
use crate::scoring::{Backend, Cached, HttpBackend, ScoreCache, ScoreError, TableLm};
use crate::selection::{dedup_by_text, random_select, rank_by_perplexity, top_n, RankedPreamble, SelectionError};

pub const TIE_BREAK: &str = "stable input order";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Preamble(#[from] PreambleError),
    #[error(transparent)]
    Scoring(#[from] ScoreError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Downstream(#[from] DownstreamError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    MissingInput(String),
    #[error("lexicon validation found {0} violation(s)")]
    ValidationFailed(usize),
}

impl CliError {
    /// Process exit code. 2 is reserved for usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Lexicon(_) | CliError::Corpus(_) => 4,
            CliError::Preamble(_) => 5,
            CliError::Scoring(_) | CliError::Metrics(_) | CliError::Selection(_) | CliError::Downstream(_) => 6,
            CliError::Io { .. } => 7,
            CliError::MissingInput(_) => 8,
            CliError::ValidationFailed(_) => 9,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Parser)]
#[command(name = "bias-suppress", version, about = "Preamble-based bias suppression toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Override the configured execution mode.
    #[arg(long, global = true, value_enum)]
    pub exec: Option<ExecArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExecArg {
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Perplexity,
    Random,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate candidate preambles for each configured kind.
    BuildPreambles {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Candidates per kind instead of `candidate_count`.
        #[arg(long)]
        count: Option<usize>,
        /// Generation seed instead of `generation_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rank candidates by perplexity or draw random selections.
    Select {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Selection mode instead of the configured one.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Comma-separated seeds for random mode.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Also write the top `n_max` of each ranking.
        #[arg(long)]
        freeze: bool,
    },
    /// Evaluate bias scores for nc, both baselines and every (kind, N).
    ScoreBias {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Add the relative change of RBS against nc.
        #[arg(long)]
        delta: bool,
    },
    /// Evaluate multiple-choice accuracy and its change against nc.
    EvalDownstream {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Evaluate a random subset of this many items per dataset.
        #[arg(long)]
        sample: Option<usize>,
        /// Seed for `--sample`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check description word counts and gendered words.
    ValidateLexicon {
        #[arg(long, conflicts_with_all = ["names", "occupations", "descriptions"])]
        config: Option<PathBuf>,
        #[arg(long, requires_all = ["occupations", "descriptions"])]
        names: Option<PathBuf>,
        #[arg(long)]
        occupations: Option<PathBuf>,
        #[arg(long)]
        descriptions: Option<PathBuf>,
        /// Male-share threshold for the occupation partition.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub toolkit_version: String,
    pub command: String,
    pub config_hash: String,
    pub lexicon_hash: String,
    #[serde(default)]
    pub backend_id: Option<String>,
    pub exec: ExecMode,
    pub tie_break: String,
    #[serde(default)]
    pub notes: Option<String>,
}

struct Ctx {
    loaded: LoadedConfig,
    exec: ExecMode,
}

impl Ctx {
    fn new(path: &Path, exec: Option<ExecArg>) -> Result<Self, CliError> {
        let loaded = RunConfig::load(path)?;
        let exec = match exec {
            Some(ExecArg::Sequential) => ExecMode::Sequential,
            Some(ExecArg::Parallel) => ExecMode::Parallel,
            None => loaded.config.exec,
        };
        Ok(Self { loaded, exec })
    }

    fn cfg(&self) -> &RunConfig {
        &self.loaded.config
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cfg().output_dir.join(rel)
    }

    fn provenance(&self, command: &str, lexicon_hash: &str, backend_id: Option<&str>) -> Provenance {
        Provenance {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: self.loaded.config_hash.clone(),
            lexicon_hash: lexicon_hash.to_string(),
            backend_id: backend_id.map(str::to_string),
            exec: self.exec,
            tie_break: TIE_BREAK.to_string(),
            notes: self.cfg().notes.clone(),
        }
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| CliError::Io { path: path.display().to_string(), source: e.error })?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serialises");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Io { path: path.display().to_string(), source: e.into() };
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io { path: path.display().to_string(), source: e.into_error() })?;
    write_atomic(path, &bytes)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingInput(format!("{} not found; run the preceding command first", path.display()))
        } else {
            CliError::Io { path: path.display().to_string(), source: e }
        }
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Io {
                path: format!("{}:{}", path.display(), i + 1),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingInput(format!("{} not found; run the preceding command first", path.display()))
        } else {
            CliError::Io { path: path.display().to_string(), source: e }
        }
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn fmt_seeds(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
}

/// Builds the configured backend, wrapped in the score cache if one is set.
pub fn build_backend(cfg: &RunConfig) -> Result<Box<dyn Backend>, CliError> {
    let inner: Box<dyn Backend> = match &cfg.backend {
        BackendSpec::Synthetic { table } => Box::new(TableLm::load(table)?),
        BackendSpec::Http(h) => Box::new(HttpBackend::new(h.clone())?),
    };
    Ok(match &cfg.cache {
        Some(path) => {
            let cache = ScoreCache::open(path).map_err(io_err(path))?;
            Box::new(Cached::new(inner, Arc::new(cache)))
        }
        None => inner,
    })
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BuildPreambles { config, count, seed } => build_preambles(&Ctx::new(&config, cli.exec)?, count, seed),
        Command::Select { config, mode, seeds, freeze } => select(&Ctx::new(&config, cli.exec)?, mode, seeds, freeze),
        Command::ScoreBias { config, delta } => score_bias(&Ctx::new(&config, cli.exec)?, delta),
        Command::EvalDownstream { config, sample, seed } => eval_downstream(&Ctx::new(&config, cli.exec)?, sample, seed),
        Command::ValidateLexicon { config, names, occupations, descriptions, threshold } => {
            validate_lexicon(config, names, occupations, descriptions, threshold)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CandidateManifest {
    provenance: Provenance,
    count: usize,
    seed: u64,
    chained: bool,
    kinds: Vec<PreambleKind>,
}

fn build_preambles(ctx: &Ctx, count: Option<usize>, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = ctx.cfg();
    let count = count.unwrap_or(cfg.candidate_count);
    let seed = seed.unwrap_or(cfg.generation_seed);
    let lex = cfg.load_lexicon()?;
    let mut by_kind: BTreeMap<PreambleKind, Vec<Preamble>> = BTreeMap::new();
    if cfg.chained {
        let chained = generate_chained(&lex, count, seed)?;
        for &k in &cfg.kinds {
            by_kind.insert(k, chained.get(k).expect("generated kind").to_vec());
        }
    } else {
        for (i, &k) in PreambleKind::GENERATED.iter().enumerate() {
            if cfg.kinds.contains(&k) {
                by_kind.insert(k, generate_candidates(k, &lex, count, seed.wrapping_add(i as u64))?);
            }
        }
    }
    for (k, list) in &by_kind {
        let path = ctx.out(&format!("candidates/{k}.jsonl"));
        write_atomic(&path, corpus::to_jsonl(list).as_bytes())?;
        log::info!("wrote {} {k} candidates to {}", list.len(), path.display());
    }
    write_json(
        &ctx.out("candidates/manifest.json"),
        &CandidateManifest {
            provenance: ctx.provenance("build-preambles", &lex.content_hash(), None),
            count,
            seed,
            chained: cfg.chained,
            kinds: cfg.kinds.clone(),
        },
    )
}

fn load_candidates(ctx: &Ctx) -> Result<(BTreeMap<PreambleKind, Vec<Preamble>>, CandidateManifest), CliError> {
    let manifest: CandidateManifest = read_json(&ctx.out("candidates/manifest.json"))?;
    let mut out = BTreeMap::new();
    for &k in &ctx.cfg().kinds {
        out.insert(k, read_jsonl(&ctx.out(&format!("candidates/{k}.jsonl")))?);
    }
    Ok((out, manifest))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
enum SelectionManifestMode {
    Perplexity { frozen: bool },
    Random { seeds: Vec<u64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SelectionManifest {
    provenance: Provenance,
    #[serde(flatten)]
    mode: SelectionManifestMode,
    kinds: Vec<PreambleKind>,
    n_max: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RandomRow {
    seed: u64,
    position: usize,
    #[serde(flatten)]
    preamble: Preamble,
}

fn select(ctx: &Ctx, mode: Option<ModeArg>, seeds: Option<Vec<u64>>, freeze: bool) -> Result<(), CliError> {
    let cfg = ctx.cfg();
    let (candidates, manifest) = load_candidates(ctx)?;
    let lexicon_hash = manifest.provenance.lexicon_hash.clone();
    let mode = match (mode, &cfg.selection) {
        (Some(ModeArg::Perplexity), _) => SelectionSpec::Perplexity,
        (Some(ModeArg::Random), SelectionSpec::Random { seeds }) => SelectionSpec::Random { seeds: seeds.clone() },
        (Some(ModeArg::Random), _) => SelectionSpec::Random { seeds: default_seeds() },
        (None, s) => s.clone(),
    };
    let manifest_mode = match mode {
        SelectionSpec::Perplexity => {
            let backend = build_backend(cfg)?;
            for (k, list) in &candidates {
                let unique = dedup_by_text(list);
                if unique.len() < list.len() {
                    log::info!("{k}: ranking {} distinct texts out of {}", unique.len(), list.len());
                }
                let ranked = rank_by_perplexity(&unique, backend.as_ref(), ctx.exec)?;
                write_atomic(&ctx.out(&format!("ranked/{k}.jsonl")), corpus::to_jsonl(&ranked).as_bytes())?;
                if freeze {
                    let n = cfg.n_max.min(ranked.len());
                    write_atomic(&ctx.out(&format!("frozen/{k}.jsonl")), corpus::to_jsonl(&ranked[..n]).as_bytes())?;
                }
            }
            write_selection_manifest(ctx, &lexicon_hash, Some(backend.backend_id()), SelectionManifestMode::Perplexity { frozen: freeze })?;
            return Ok(());
        }
        SelectionSpec::Random { seeds: cfg_seeds } => {
            let seeds = seeds.unwrap_or(cfg_seeds);
            if seeds.is_empty() {
                return Err(ConfigError::Invalid("random selection needs at least one seed".into()).into());
            }
            for &seed in &seeds {
                let mut rows = Vec::new();
                for (&k, list) in &candidates {
                    for (position, preamble) in random_select(list, cfg.n_max, seed)?.into_iter().enumerate() {
                        debug_assert_eq!(preamble.kind, k);
                        rows.push(RandomRow { seed, position, preamble });
                    }
                }
                write_atomic(&ctx.out(&format!("random/seed-{seed}.jsonl")), corpus::to_jsonl(&rows).as_bytes())?;
            }
            SelectionManifestMode::Random { seeds }
        }
    };
    write_selection_manifest(ctx, &lexicon_hash, None, manifest_mode)
}

fn write_selection_manifest(
    ctx: &Ctx,
    lexicon_hash: &str,
    backend_id: Option<&str>,
    mode: SelectionManifestMode,
) -> Result<(), CliError> {
    write_json(
        &ctx.out("selection.json"),
        &SelectionManifest {
            provenance: ctx.provenance("select", lexicon_hash, backend_id),
            mode,
            kinds: ctx.cfg().kinds.clone(),
            n_max: ctx.cfg().n_max,
        },
    )
}

/// For each kind, the ordered preamble lists per selection run (one run for
/// perplexity selection, one per seed for random selection).
struct Selected {
    seeds: Option<Vec<u64>>,
    runs: BTreeMap<PreambleKind, Vec<Vec<Preamble>>>,
    lexicon_hash: String,
}

fn load_selected(ctx: &Ctx) -> Result<Selected, CliError> {
    let manifest: SelectionManifest = read_json(&ctx.out("selection.json"))?;
    let mut runs: BTreeMap<PreambleKind, Vec<Vec<Preamble>>> = BTreeMap::new();
    let seeds = match &manifest.mode {
        SelectionManifestMode::Perplexity { frozen } => {
            let dir = if *frozen { "frozen" } else { "ranked" };
            for &k in &ctx.cfg().kinds {
                let ranked: Vec<RankedPreamble> = read_jsonl(&ctx.out(&format!("{dir}/{k}.jsonl")))?;
                runs.insert(k, vec![top_n(&ranked, ctx.cfg().n_max)?]);
            }
            None
        }
        SelectionManifestMode::Random { seeds } => {
            for &seed in seeds {
                let rows: Vec<RandomRow> = read_jsonl(&ctx.out(&format!("random/seed-{seed}.jsonl")))?;
                for &k in &ctx.cfg().kinds {
                    let mut list: Vec<&RandomRow> = rows.iter().filter(|r| r.preamble.kind == k).collect();
                    list.sort_by_key(|r| r.position);
                    let list: Vec<Preamble> = list.into_iter().map(|r| r.preamble.clone()).collect();
                    if list.len() < ctx.cfg().n_max {
                        return Err(SelectionError::NTooLarge { n: ctx.cfg().n_max, available: list.len() }.into());
                    }
                    runs.entry(k).or_default().push(list);
                }
            }
            Some(seeds.clone())
        }
    };
    Ok(Selected { seeds, runs, lexicon_hash: manifest.provenance.lexicon_hash })
}

/// Conditions evaluated by both report commands: nc, the two baselines,
/// then every (kind, N).
fn conditions(ctx: &Ctx, selected: &Selected) -> Vec<(PreambleKind, usize, Vec<Vec<Preamble>>)> {
    let mut out = vec![
        (PreambleKind::None, 0, vec![vec![]]),
        (PreambleKind::Instruct, 1, vec![vec![baseline_instruct()]]),
        (PreambleKind::Intervention, 1, vec![vec![baseline_intervention(&ctx.cfg().intervention_demos)]]),
    ];
    for (&k, runs) in &selected.runs {
        for n in 1..=ctx.cfg().n_max {
            out.push((k, n, runs.iter().map(|r| r[..n].to_vec()).collect()));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasRow {
    pub condition: PreambleKind,
    pub n_preambles: usize,
    /// Mean over selection runs.
    pub rbs: f64,
    pub acc_bias: f64,
    pub pair_count: usize,
    pub seeds: Vec<u64>,
    pub rbs_length_normalized_diagnostic: f64,
    #[serde(default)]
    pub delta_rbs_pct: Option<f64>,
    /// Set instead of the percentage when RBS under nc is near zero.
    #[serde(default)]
    pub delta_rbs_abs: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeedReport {
    seed: Option<u64>,
    #[serde(flatten)]
    report: BiasReport,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    compensated_sum(v.iter().copied()) / v.len() as f64
}

fn score_bias(ctx: &Ctx, delta: bool) -> Result<(), CliError> {
    let cfg = ctx.cfg();
    let path = cfg
        .crows_pairs
        .as_ref()
        .ok_or_else(|| CliError::MissingInput("config has no crows_pairs path".into()))?;
    let full = load_crows_pairs(path)?;
    let dataset = match cfg.bias_type {
        Some(t) => filter_bias_type(&full, t),
        None => full,
    };
    let selected = load_selected(ctx)?;
    let backend = build_backend(cfg)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut per_seed = Vec::new();
    for (condition, n, runs) in conditions(ctx, &selected) {
        let mut run_reports = Vec::new();
        for (i, preambles) in runs.iter().enumerate() {
            log::info!("scoring {condition} N={n} run {}", i + 1);
            let report = evaluate_condition(&dataset, backend.as_ref(), preambles, ctx.exec)?;
            let seed = selected.seeds.as_ref().filter(|_| condition_is_selected(condition)).map(|s| s[i]);
            if let Some(seed) = seed {
                per_seed.push(vec![
                    condition.to_string(),
                    n.to_string(),
                    seed.to_string(),
                    fmt_f(report.rbs),
                    fmt_f(report.acc_bias),
                ]);
            }
            run_reports.push(SeedReport { seed, report });
        }
        let seeds: Vec<u64> = run_reports.iter().filter_map(|r| r.seed).collect();
        rows.push(BiasRow {
            condition,
            n_preambles: n,
            rbs: mean(run_reports.iter().map(|r| r.report.rbs)),
            acc_bias: mean(run_reports.iter().map(|r| r.report.acc_bias)),
            pair_count: dataset.len(),
            seeds,
            rbs_length_normalized_diagnostic: mean(run_reports.iter().map(|r| r.report.rbs_length_normalized_diagnostic)),
            delta_rbs_pct: None,
            delta_rbs_abs: None,
        });
        reports.extend(run_reports);
    }
    if delta {
        let nc = rows[0].rbs;
        for row in &mut rows {
            match delta_percent(row.rbs, nc) {
                Ok(d) => row.delta_rbs_pct = Some(d),
                Err(MetricsError::DivisionByNearZero { absolute_delta, .. }) => row.delta_rbs_abs = Some(absolute_delta),
                Err(e) => return Err(e.into()),
            }
        }
    }

    let mut header = vec!["condition", "n_preambles", "rbs", "acc_bias", "pair_count", "seeds", "rbs_length_normalized_diagnostic"];
    if delta {
        header.extend(["delta_rbs_pct", "delta_rbs_abs"]);
    }
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![
                r.condition.to_string(),
                r.n_preambles.to_string(),
                fmt_f(r.rbs),
                fmt_f(r.acc_bias),
                r.pair_count.to_string(),
                fmt_seeds(&r.seeds),
                fmt_f(r.rbs_length_normalized_diagnostic),
            ];
            if delta {
                v.push(r.delta_rbs_pct.map(fmt_f).unwrap_or_default());
                v.push(r.delta_rbs_abs.map(fmt_f).unwrap_or_default());
            }
            v
        })
        .collect();
    write_csv(&ctx.out("bias/summary.csv"), &header, &csv_rows)?;
    if selected.seeds.is_some() {
        write_csv(&ctx.out("bias/per_seed.csv"), &["condition", "n_preambles", "seed", "rbs", "acc_bias"], &per_seed)?;
    }
    write_atomic(&ctx.out("bias/reports.jsonl"), corpus::to_jsonl(&reports).as_bytes())?;
    write_json(
        &ctx.out("bias/report.json"),
        &serde_json::json!({
            "provenance": ctx.provenance("score-bias", &selected.lexicon_hash, Some(backend.backend_id())),
            "dataset": {
                "path": dataset.source_path,
                "bias_type": cfg.bias_type,
                "pair_count": dataset.len(),
                "skipped_degenerate": dataset.skipped_degenerate,
                "remapped_antistereo": dataset.remapped_antistereo,
            },
            "selection_seeds": selected.seeds,
            "rows": rows,
        }),
    )
}

fn condition_is_selected(kind: PreambleKind) -> bool {
    PreambleKind::GENERATED.contains(&kind)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownstreamRow {
    pub condition: PreambleKind,
    pub n_preambles: usize,
    pub accuracy: f64,
    pub delta_acc: f64,
    pub item_count: usize,
    pub tie_count: usize,
    pub seeds: Vec<u64>,
}

fn eval_downstream(ctx: &Ctx, sample: Option<usize>, sample_seed: u64) -> Result<(), CliError> {
    let cfg = ctx.cfg();
    if cfg.downstream.is_empty() {
        return Err(CliError::MissingInput("config lists no downstream datasets".into()));
    }
    let selected = load_selected(ctx)?;
    let backend = build_backend(cfg)?;
    for spec in &cfg.downstream {
        let mut items = load_multiple_choice(&spec.path, spec.source)?;
        if let Some(n) = sample {
            items = sample_items(&items, n, sample_seed)?;
        }
        let dir = format!("downstream/{}", spec.source.as_str());
        let mut rows: Vec<DownstreamRow> = Vec::new();
        let mut traces = Vec::new();
        let mut per_seed = Vec::new();
        let mut reports = Vec::new();
        let mut nc_accuracy = None;
        for (condition, n, runs) in conditions(ctx, &selected) {
            let mut run_reports: Vec<(Option<u64>, DownstreamReport)> = Vec::new();
            for (i, preambles) in runs.iter().enumerate() {
                log::info!("{}: {condition} N={n} run {}", spec.source.as_str(), i + 1);
                let report = evaluate_dataset(&items, backend.as_ref(), preambles, nc_accuracy, ctx.exec)?;
                let seed = selected.seeds.as_ref().filter(|_| condition_is_selected(condition)).map(|s| s[i]);
                for p in &report.predictions {
                    traces.push(vec![
                        condition.to_string(),
                        n.to_string(),
                        seed.map(|s| s.to_string()).unwrap_or_default(),
                        p.item_id.clone(),
                        p.per_choice_perplexity.iter().map(|v| fmt_f(*v)).collect::<Vec<_>>().join(";"),
                        p.chosen_index.to_string(),
                        p.gold_index.to_string(),
                        p.correct.to_string(),
                        p.tie.to_string(),
                    ]);
                }
                if let Some(seed) = seed {
                    per_seed.push(vec![condition.to_string(), n.to_string(), seed.to_string(), fmt_f(report.accuracy)]);
                }
                run_reports.push((seed, report));
            }
            let accuracy = mean(run_reports.iter().map(|(_, r)| r.accuracy));
            let nc = *nc_accuracy.get_or_insert(accuracy);
            rows.push(DownstreamRow {
                condition,
                n_preambles: n,
                accuracy,
                delta_acc: 100.0 * (accuracy - nc),
                item_count: items.len(),
                tie_count: run_reports.iter().map(|(_, r)| r.tie_count).sum(),
                seeds: run_reports.iter().filter_map(|(s, _)| *s).collect(),
            });
            reports.extend(run_reports.into_iter().map(|(seed, report)| serde_json::json!({"seed": seed, "report": report})));
        }
        let csv_rows: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.condition.to_string(),
                    r.n_preambles.to_string(),
                    fmt_f(r.accuracy),
                    fmt_f(r.delta_acc),
                    r.item_count.to_string(),
                    r.tie_count.to_string(),
                    fmt_seeds(&r.seeds),
                ]
            })
            .collect();
        write_csv(
            &ctx.out(&format!("{dir}/summary.csv")),
            &["condition", "n_preambles", "accuracy", "delta_acc", "item_count", "tie_count", "seeds"],
            &csv_rows,
        )?;
        write_csv(
            &ctx.out(&format!("{dir}/traces.csv")),
            &["condition", "n_preambles", "seed", "item_id", "per_choice_perplexity", "chosen", "gold", "correct", "tie"],
            &traces,
        )?;
        if selected.seeds.is_some() {
            write_csv(&ctx.out(&format!("{dir}/per_seed.csv")), &["condition", "n_preambles", "seed", "accuracy"], &per_seed)?;
        }
        write_json(
            &ctx.out(&format!("{dir}/report.json")),
            &serde_json::json!({
                "provenance": ctx.provenance("eval-downstream", &selected.lexicon_hash, Some(backend.backend_id())),
                "dataset": {"source": spec.source, "path": spec.path, "item_count": items.len(), "sample": sample, "sample_seed": sample.map(|_| sample_seed)},
                "selection_seeds": selected.seeds,
                "rows": rows,
                "reports": reports,
            }),
        )?;
    }
    Ok(())
}

fn validate_lexicon(
    config: Option<PathBuf>,
    names: Option<PathBuf>,
    occupations: Option<PathBuf>,
    descriptions: Option<PathBuf>,
    threshold: Option<f64>,
) -> Result<(), CliError> {
    let lex = match (config, names, occupations, descriptions) {
        (Some(c), ..) => RunConfig::load(&c)?.config.load_lexicon()?,
        (None, Some(n), Some(o), Some(d)) => {
            lexicon::load_lexicon_files(&n, &o, &d, threshold.unwrap_or(DEFAULT_SHARE_THRESHOLD))?
        }
        _ => lexicon::bundled(),
    };
    let report = validate_descriptions(&lex);
    println!(
        "{} names ({} male, {} female), {} occupations ({} male, {} female), {} descriptions checked",
        lex.male_names.len() + lex.female_names.len(),
        lex.male_names.len(),
        lex.female_names.len(),
        lex.male_occupations.len() + lex.female_occupations.len(),
        lex.male_occupations.len(),
        lex.female_occupations.len(),
        report.checked
    );
    for v in &report.violations {
        println!("{:?} {:?} `{}`: {}", v.kind, v.level, v.occupation, v.text);
    }
    if report.is_clean() {
        println!("ok");
        Ok(())
    } else {
        Err(CliError::ValidationFailed(report.violations.len()))
    }
}
