//! `chainrag` command line: corpus indexing, single-question answering,
//! dataset evaluation, ablations, loss verification and preference-pair
//! export.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::chaingen::{CoVqdChain, VqaSample};
use crate::config::Config;
use crate::evalharness::{answer_question, emit_report, load_dataset, run_ablation, AblationAxes, EvalReport};
use crate::prefopt::{
    analytic_gradient, assemble_implication_graph, build_preference_pairs, run_loss_suite_with, ImplicationGraph,
    LossKind, LossWeights, GRADIENT_TOLERANCE,
};
use crate::promptctor::PromptOrder;
use crate::retrieval::{load_corpus, RetrievalMode, VectorIndex};

#[derive(Debug, Parser)]
#[command(name = "chainrag", version, about = "Chain-guided retrieval-augmented visual question answering")]
pub struct Cli {
    /// TOML configuration file. Defaults to all-mock backends.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a vector index from a JSON-lines corpus.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Compute missing embeddings with the embedding backend.
        #[arg(long)]
        embed: bool,
    },
    /// Answer one question about one image.
    Ask {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        image: String,
        #[arg(long)]
        caption: Option<String>,
        /// Patch locator; repeatable.
        #[arg(long = "patch")]
        patches: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
        /// Print the chain, retrieved triples and assembled prompt.
        #[arg(long)]
        trace: bool,
    },
    /// Evaluate a dataset and write one report.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Evaluate a dataset over a product of axis values, one report each.
    Ablate {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Axis spec such as `mode=T,V,V+T`, `budget=2,4,6` or `order=C_I_K,I_C_K`; repeatable.
        #[arg(long = "axes")]
        axes: Vec<String>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Verify loss identities and analytic gradients.
    CheckLosses {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Export preference pairs from chains and implication relations.
    BuildPairs {
        /// JSON-lines file of chains.
        #[arg(long)]
        chain: PathBuf,
        /// JSON file mapping sample ids to `[[i, j], ...]` edges, or `backend`.
        #[arg(long)]
        relations: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub mode: Option<RetrievalMode>,
    #[arg(long = "k-budget")]
    pub k_budget: Option<usize>,
    #[arg(long)]
    pub order: Option<PromptOrder>,
}

impl Overrides {
    fn apply(&self, cfg: &mut Config) -> anyhow::Result<()> {
        if let Some(m) = self.mode {
            cfg.pipeline.retrieval.mode = m;
        }
        if let Some(k) = self.k_budget {
            if k == 0 {
                bail!("--k-budget must be at least 1");
            }
            cfg.pipeline.prompt.budget = k;
        }
        if let Some(o) = self.order {
            cfg.pipeline.prompt.order = o;
        }
        Ok(())
    }
}

type GradientFn = fn(LossKind, &[f64], &LossWeights, f64) -> Vec<f64>;

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_gradient(args, out, err, analytic_gradient)
}

/// As [`run`], with the analytic gradient used by `check-losses` replaced.
pub fn run_with_gradient<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write, gradient: GradientFn) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{rendered}")
            } else {
                write!(out, "{rendered}")
            };
            return code;
        }
    };
    match execute(cli, out, gradient) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: Cli, out: &mut dyn Write, gradient: GradientFn) -> anyhow::Result<i32> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Index { corpus, out: path, embed } => cmd_index(&cfg, &corpus, &path, embed, out),
        Command::Ask {
            index,
            question,
            image,
            caption,
            patches,
            overrides,
            trace,
        } => {
            overrides.apply(&mut cfg)?;
            let mut sample = VqaSample::new("ask", &question, image)?.with_patches(patches);
            sample.caption = caption.filter(|c| !c.trim().is_empty());
            cmd_ask(&cfg, &index, &sample, trace, out)
        }
        Command::Eval {
            index,
            dataset,
            out: dir,
            overrides,
            workers,
        } => {
            overrides.apply(&mut cfg)?;
            cmd_eval(&cfg, &index, &dataset, &dir, &AblationAxes::default(), workers, out)
        }
        Command::Ablate {
            index,
            dataset,
            out: dir,
            axes,
            workers,
        } => {
            let mut parsed = AblationAxes::default();
            for spec in &axes {
                parsed.add_spec(spec).map_err(|e| anyhow!(e))?;
            }
            cmd_eval(&cfg, &index, &dataset, &dir, &parsed, workers, out)
        }
        Command::CheckLosses { trials } => cmd_check_losses(trials, cfg.seed, gradient, out),
        Command::BuildPairs {
            chain,
            relations,
            out: path,
        } => cmd_build_pairs(&cfg, &chain, &relations, &path, out),
    }
}

fn cmd_index(cfg: &Config, corpus: &Path, path: &Path, embed: bool, out: &mut dyn Write) -> anyhow::Result<i32> {
    let records = load_corpus(corpus)?;
    let backends = if embed { Some(cfg.build_backends()?) } else { None };
    let entries = records
        .into_iter()
        .map(|r| r.into_entry(backends.as_ref().map(|b| b.embed.as_ref())))
        .collect::<Result<Vec<_>, _>>()?;
    let index = VectorIndex::build(entries)?;
    index.save(path)?;
    writeln!(
        out,
        "indexed {} entries (dim {}) into {}",
        index.len(),
        index.dim(),
        path.display()
    )?;
    Ok(0)
}

fn load_index(cfg: &Config, path: &Path) -> anyhow::Result<VectorIndex> {
    Ok(VectorIndex::load(path, Some(cfg.embedding.dim))?)
}

fn cmd_ask(cfg: &Config, index: &Path, sample: &VqaSample, trace: bool, out: &mut dyn Write) -> anyhow::Result<i32> {
    let index = load_index(cfg, index)?;
    let backends = cfg.build_backends()?;
    let t = answer_question(sample, cfg, &backends, &index)?;
    if trace {
        writeln!(out, "trace.decomposed: {}", t.chain.decomposed())?;
        for qa in t.chain.sub_qas() {
            writeln!(out, "trace.chain[{}]: {}", qa.index, qa.to_line())?;
        }
        for id in &t.bundle.searched_images {
            writeln!(out, "trace.searched_image: {id}")?;
        }
        for r in &t.bundle.patch_refs {
            writeln!(out, "trace.patch_ref: {r}")?;
        }
        writeln!(out, "trace.caption: {}", t.bundle.refined_caption)?;
        for (i, tr) in t.bundle.triples.iter().enumerate() {
            writeln!(
                out,
                "trace.triple[{}]: entry={} score={:.6} q={}",
                i + 1,
                tr.entry_id,
                tr.score,
                tr.sub_question
            )?;
        }
        for line in t.prompt.lines() {
            writeln!(out, "trace.prompt: {line}")?;
        }
    }
    writeln!(out, "{}", t.answer)?;
    Ok(0)
}

fn cmd_eval(
    cfg: &Config,
    index: &Path,
    dataset: &Path,
    dir: &Path,
    axes: &AblationAxes,
    workers: usize,
    out: &mut dyn Write,
) -> anyhow::Result<i32> {
    let index = load_index(cfg, index)?;
    let samples = load_dataset(dataset)?;
    let backends = cfg.build_backends()?;
    let reports = run_ablation(&samples, axes, cfg, &backends, &index, workers)?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for report in &reports {
        let path = emit_report(report, dir)?;
        print_summary(report, &path, out)?;
    }
    Ok(0)
}

fn print_summary(r: &EvalReport, path: &Path, out: &mut dyn Write) -> anyhow::Result<()> {
    let errors = r.records.iter().filter(|x| x.error.is_some()).count();
    writeln!(
        out,
        "mode={} budget={} order={} aggregate={:.6} records={} errors={} -> {}",
        r.mode,
        r.budget,
        r.order,
        r.aggregate,
        r.records.len(),
        errors,
        path.display()
    )?;
    Ok(())
}

fn cmd_check_losses(trials: usize, seed: u64, gradient: GradientFn, out: &mut dyn Write) -> anyhow::Result<i32> {
    let report = run_loss_suite_with(trials, seed, gradient)?;
    for c in &report.identities {
        writeln!(
            out,
            "identity {:<28} expected={:.12} actual={:.12} {}",
            c.name,
            c.expected,
            c.actual,
            if c.passed { "ok" } else { "FAIL" }
        )?;
    }
    writeln!(
        out,
        "gradient checks={} trials={} seed={} max_rel_error={:.3e} tolerance={:.0e}",
        report.gradient_checks, report.trials, seed, report.max_rel_error, GRADIENT_TOLERANCE
    )?;
    if report.passed() {
        writeln!(out, "PASS")?;
        Ok(0)
    } else {
        let worst = report.worst_kind.map(|k| format!(" (worst: {k:?})")).unwrap_or_default();
        bail!("loss checks failed{worst}; max relative gradient error {:.3e}", report.max_rel_error)
    }
}

fn read_chains(path: &Path) -> anyhow::Result<Vec<CoVqdChain>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut chains = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let chain: CoVqdChain =
            serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        chains.push(chain);
    }
    Ok(chains)
}

fn cmd_build_pairs(
    cfg: &Config,
    chain_path: &Path,
    relations: &str,
    path: &Path,
    out: &mut dyn Write,
) -> anyhow::Result<i32> {
    let chains = read_chains(chain_path)?;
    let edge_map: Option<BTreeMap<String, Vec<(usize, usize)>>> = if relations == "backend" {
        None
    } else {
        let text = std::fs::read_to_string(relations).with_context(|| format!("reading {relations}"))?;
        Some(serde_json::from_str(&text).with_context(|| format!("parsing {relations}"))?)
    };
    let backends = if edge_map.is_none() { Some(cfg.build_backends()?) } else { None };

    let mut lines = String::new();
    let mut count = 0;
    for chain in &chains {
        let id = &chain.source().sample_id;
        let graph = match (&edge_map, &backends) {
            (Some(map), _) => {
                let edges = map
                    .get(id)
                    .ok_or_else(|| anyhow!("no relations given for sample {id:?}"))?;
                ImplicationGraph::new(chain.len(), edges.iter().copied())
            }
            (None, Some(b)) => assemble_implication_graph(chain, b.relation.as_ref()),
            (None, None) => unreachable!("backends are built when no relation file is given"),
        }
        .with_context(|| format!("sample {id:?}"))?;
        let base = graph.stable_topological_order();
        for pair in build_preference_pairs(&graph, &base, id)? {
            lines.push_str(&serde_json::to_string(&pair)?);
            lines.push('\n');
            count += 1;
        }
    }
    std::fs::write(path, lines).with_context(|| format!("writing {}", path.display()))?;
    writeln!(out, "wrote {count} preference pairs for {} chains to {}", chains.len(), path.display())?;
    Ok(0)
}
