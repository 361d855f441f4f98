//! Command-line front end: `search`, `diagnose`, `oracle`, `score`, `derive`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::diagnostics::{
    grad_variance_probe, mean_eta, run_lambda_experiment, run_plain_depth_experiment, write_depth_csv, write_eta_csv,
    write_gradvar_csv, write_lambda_csv, DeepNet, DeepNetConfig,
};
use crate::error::{Error, Result};
use crate::oracle::{build_oracle, score_genotype, OracleTable};
use crate::search::Search;
use crate::space::{derive_genotype, Genotype};

#[derive(Debug, Parser)]
#[command(
    name = "rfdarts",
    version,
    about = "Differentiable architecture search with BN-only supernet training"
)]
pub struct Cli {
    /// Run configuration (flat key = value file).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output root.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the configured training option (A, B, C or D).
    #[arg(long, global = true)]
    pub option: Option<String>,
    /// Overrides the diagnostics mode (conv+bn or only-bn).
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DiagKind {
    Lambda,
    Depth,
    Eta,
    Gradvar,
}

impl DiagKind {
    fn name(self) -> &'static str {
        match self {
            DiagKind::Lambda => "lambda",
            DiagKind::Depth => "depth",
            DiagKind::Eta => "eta",
            DiagKind::Gradvar => "gradvar",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search a cell and write the genotype, traces and a checkpoint.
    Search,
    /// Run one of the mechanism experiments.
    Diagnose { kind: DiagKind },
    /// Train every architecture of an enumerable space.
    Oracle,
    /// Rank a genotype (or a checkpoint's derived genotype) in an oracle table.
    Score {
        #[arg(long)]
        table: PathBuf,
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        genotype: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Derive the discrete genotype stored in a search checkpoint.
    Derive {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn run_name(&self) -> String {
        match self {
            Command::Search => "search".into(),
            Command::Diagnose { kind } => format!("diagnose-{}", kind.name()),
            Command::Oracle => "oracle".into(),
            Command::Score { .. } => "score".into(),
            Command::Derive { .. } => "derive".into(),
        }
    }
}

/// Output directory plus a timestamped log; everything else written there
/// is timestamp-free.
struct Run {
    dir: PathBuf,
    log: String,
}

impl Run {
    fn open(cfg: &RunConfig, name: &str) -> Result<Self> {
        let dir = cfg.out_dir().join(name);
        fs::create_dir_all(&dir)?;
        Ok(Run {
            dir,
            log: String::new(),
        })
    }

    fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Prints `line` and appends it to the log.
    fn say(&mut self, line: impl AsRef<str>) {
        let line = line.as_ref();
        println!("{line}");
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let _ = writeln!(self.log, "[{ts}] {line}");
    }

    fn finish(self) -> Result<()> {
        fs::write(self.dir.join("run.log"), self.log)?;
        Ok(())
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config", "a config file is required"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &cli.out {
        cfg.set("out", &out.to_string_lossy())?;
    }
    if let Some(option) = &cli.option {
        cfg.set("option", option)?;
    }
    if let Some(mode) = &cli.mode {
        cfg.set("mode", mode)?;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let mut run = Run::open(&cfg, &cfg.name_or(&cli.command.run_name()))?;
    match &cli.command {
        Command::Search => search(&cfg, &mut run)?,
        Command::Diagnose { kind } => diagnose(&cfg, *kind, &mut run)?,
        Command::Oracle => oracle(&cfg, &mut run)?,
        Command::Score {
            table,
            genotype,
            checkpoint,
        } => score(&cfg, table, genotype.as_deref(), checkpoint.as_deref(), &mut run)?,
        Command::Derive { checkpoint } => derive(&cfg, checkpoint, &mut run)?,
    }
    run.finish()
}

fn search(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let (train, _) = cfg.datasets()?;
    let search_cfg = cfg.search(&train)?;
    let option = search_cfg.net.option;
    run.say(format!(
        "search: space {} option {} epochs {} seed {}",
        search_cfg.net.space.name(),
        option,
        search_cfg.epochs,
        search_cfg.seed
    ));
    let mut search = Search::new(search_cfg, &train)?;
    let outcome = search.run();
    Checkpoint::capture(&search.net).save(&run.path("checkpoint.bin"))?;
    let result = match outcome {
        Ok(r) => r,
        Err(Error::SearchFailed { epoch, partial, source }) => {
            partial.write_alpha_trace(&run.path("alpha_trace.csv"))?;
            partial.write_loss_trace(&run.path("loss_trace.csv"))?;
            run.say(format!("search failed at epoch {epoch}: {source}"));
            return Err(Error::SearchFailed { epoch, partial, source });
        }
        Err(e) => return Err(e),
    };
    let genotype = result.genotype.clone().expect("finished searches derive a genotype");
    fs::write(run.path("genotype.txt"), format!("{genotype}\n"))?;
    result.write_alpha_trace(&run.path("alpha_trace.csv"))?;
    result.write_loss_trace(&run.path("loss_trace.csv"))?;
    if !result.eta_trace.is_empty() {
        let flat: Vec<_> = result.eta_trace.concat();
        write_eta_csv(&run.path("eta_trace.csv"), &flat)?;
    }
    let audit = search.net.audit();
    run.say(format!(
        "audit: {audit} ({} option {option})",
        if audit.matches(option) {
            "consistent with"
        } else {
            "VIOLATES"
        }
    ));
    run.say(format!("genotype: {genotype}"));
    run.say(format!("skip fraction: {:.3}", result.skip_fraction()));
    Ok(())
}

fn diagnose(cfg: &RunConfig, kind: DiagKind, run: &mut Run) -> Result<()> {
    let diag = cfg.diag()?;
    let mode = cfg.mode()?;
    let (train, test) = cfg.datasets()?;
    match kind {
        DiagKind::Lambda => {
            let traces = run_lambda_experiment(&diag, cfg.depth()?, &cfg.lambda_inits()?, mode, &train)?;
            write_lambda_csv(&run.path("lambda_trace.csv"), &traces)?;
            for t in &traces {
                run.say(format!(
                    "{mode} λ init {:.3} → final {:.4} (drift {:+.4})",
                    t.init,
                    t.lambdas.last().copied().unwrap_or(t.init),
                    t.drift()
                ));
            }
        }
        DiagKind::Depth => {
            let depths = cfg.depths()?;
            let curves = run_plain_depth_experiment(&diag, &depths, mode, &train, &test)?;
            write_depth_csv(&run.path("depth_curves.csv"), &curves)?;
            for c in &curves {
                run.say(format!(
                    "{mode} depth {}: final train error {:.4}, test error {:.4}",
                    c.depth,
                    c.train_error.last().copied().unwrap_or(f64::NAN),
                    c.test_error.last().copied().unwrap_or(f64::NAN)
                ));
            }
            let final_err = |i: usize| curves[i].train_error.last().copied().unwrap_or(f64::NAN);
            let (shallow, deep) = (0, curves.len() - 1);
            run.say(format!(
                "deep−shallow final train error = {:+.4}",
                final_err(deep) - final_err(shallow)
            ));
        }
        DiagKind::Eta => {
            let curves = run_plain_depth_experiment(&diag, &[cfg.depth()?], mode, &train, &test)?;
            let records: Vec<_> = curves[0].eta.concat();
            write_eta_csv(&run.path("eta_trace.csv"), &records)?;
            let last = curves[0].eta.last().expect("η at epoch 0");
            run.say(format!(
                "{mode} mean η = {:.3} after {} epochs",
                mean_eta(last),
                diag.epochs
            ));
        }
        DiagKind::Gradvar => {
            let mut net = DeepNet::new(
                DeepNetConfig {
                    depth: cfg.depth()?,
                    width: diag.width,
                    in_channels: train.image_shape[0],
                    num_classes: train.num_classes,
                    lambda_init: None,
                    per_block_lambda: cfg.per_block_lambda()?,
                },
                diag.seed,
            )?;
            let n = cfg.probe_batch()?.min(train.len());
            let idx: Vec<usize> = (0..n).collect();
            let profile = grad_variance_probe(&mut net, &train.gather(&idx), diag.seed)?;
            write_gradvar_csv(&run.path("gradvar.csv"), &profile)?;
            let ratios = profile.ratios();
            let (lo, hi) = ratios
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &r| (l.min(r), h.max(r)));
            run.say(format!("per-layer gradient variance ratio in [{lo:.3}, {hi:.3}]"));
        }
    }
    Ok(())
}

fn oracle(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let (train, test) = cfg.datasets()?;
    let oracle_cfg = cfg.oracle(&train)?;
    run.say(format!(
        "oracle: space {} budget {} epochs, seeds {:?}",
        oracle_cfg.net.space.name(),
        oracle_cfg.budget_epochs,
        oracle_cfg.seeds
    ));
    let table = build_oracle(&oracle_cfg, &train, &test)?;
    table.write_csv(&run.path("oracle_table.csv"))?;
    let best = table.best();
    run.say(format!(
        "{} architectures; best {} test acc {:.4}",
        table.len(),
        best.genotype,
        best.test_acc
    ));
    Ok(())
}

fn score(
    cfg: &RunConfig,
    table: &Path,
    genotype: Option<&str>,
    checkpoint: Option<&Path>,
    run: &mut Run,
) -> Result<()> {
    let table = OracleTable::read_csv(table)?;
    let (genotype, alpha) = match (genotype, checkpoint) {
        (Some(g), _) => (Genotype::parse(g)?, None),
        (None, Some(path)) => {
            let ck = Checkpoint::load(path)?;
            let alpha = ck
                .alpha()?
                .ok_or_else(|| Error::Checkpoint("checkpoint holds no α".into()))?;
            (derive_genotype(&alpha, cfg.get("include_none")?), Some(alpha))
        }
        (None, None) => return Err(Error::config("--genotype", "give --genotype or --checkpoint")),
    };
    if genotype.space != table.space {
        return Err(Error::SpaceMismatch {
            genotype: genotype.to_string(),
            space: table.space.name().to_string(),
        });
    }
    let report = score_genotype(&genotype, alpha.as_ref(), &table)?;
    report.write_csv(&run.path("rank_report.csv"))?;
    let tau = report
        .kendall_tau
        .map_or_else(String::new, |t| format!(" / kendall τ {t:.4}"));
    run.say(format!(
        "{}: rank {} / regret {:.4}{tau}",
        report.genotype, report.rank, report.regret
    ));
    Ok(())
}

fn derive(cfg: &RunConfig, checkpoint: &Path, run: &mut Run) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let genotype = match ck.alpha()? {
        Some(alpha) => derive_genotype(&alpha, cfg.get("include_none")?),
        None => ck
            .genotype
            .ok_or_else(|| Error::Checkpoint("checkpoint holds neither α nor a genotype".into()))?,
    };
    fs::write(run.path("genotype.txt"), format!("{genotype}\n"))?;
    run.say(format!("genotype: {genotype}"));
    run.say(format!("skip fraction: {:.3}", genotype.skip_fraction()));
    Ok(())
}

/// Process exit code for a command outcome.
pub fn exit_code(outcome: &Result<()>) -> i32 {
    match outcome {
        Ok(()) => 0,
        Err(e) if e.is_config() => 2,
        Err(_) => 1,
    }
}
