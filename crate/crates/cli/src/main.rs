use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use commonspace::evalkit::{self, emit_report, MetricsReport};
use commonspace::training::{
    join_new_agent, pretrain_agent, stage1_negotiate, stage2_adapt, AblationFlags, ExperimentConfig, FreezeReport, JsonlSink, Models,
    StageReport,
};
use commonspace::Error;

/// Exit status when a freeze manifest does not verify.
const FREEZE_FAILURE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "commonspace", version, about = "Negotiated common feature spaces for heterogeneous collaborative perception")]
struct Cli {
    /// Experiment config (TOML), layered over its `preset` (default `desk`).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set steps.stage1=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Run directory holding checkpoints, logs and reports.
    #[arg(long, env = "COMMONSPACE_OUT", default_value = "runs/default", global = true)]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Step 0: homogeneous pretraining of encoders, fusion and heads.
    Pretrain {
        /// Agents to pretrain; defaults to the whole roster.
        #[arg(long = "agent")]
        agents: Vec<String>,
    },
    /// Step 1, stage 1: negotiate the common representation.
    Negotiate,
    /// Step 1, stage 2: fine-tune alliance receivers on collaborative detection.
    Adapt,
    /// Step 2: onboard agents against the frozen negotiator.
    Join {
        /// Agents to join; defaults to every pretrained non-member.
        #[arg(long = "agent")]
        agents: Vec<String>,
    },
    /// Evaluate every completed stage and store a metrics report.
    Eval {
        #[arg(long, default_value = "eval")]
        name: String,
    },
    /// Measure KL domain gaps of the negotiated and protocol representations.
    DomainGap,
    /// Run a training-setting ablation grid (stage 1 only).
    Ablate {
        #[arg(long, value_enum, default_value_t = Grid::Table4)]
        grid: Grid,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
    /// Collect stored metrics reports into JSON, markdown and plots.
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Grid {
    /// All eight loss/negotiator settings.
    Table4,
    /// Full and distribution-only losses, with and without the negotiator.
    Core,
    /// Full loss with and without the local prompt.
    Prompt,
}

impl Grid {
    fn flags(self) -> Vec<AblationFlags> {
        let full = AblationFlags::default();
        let dis_only = AblationFlags { structural: false, pragmatic: false, ..full };
        match self {
            Grid::Table4 => evalkit::table4_grid(),
            Grid::Core => vec![
                full,
                dis_only,
                AblationFlags { negotiator: false, ..full },
                AblationFlags { negotiator: false, ..dis_only },
            ],
            Grid::Prompt => vec![full, AblationFlags { local_prompt: false, ..full }],
        }
    }
}

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Run {
    fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }

    fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    fn load_models(&self) -> Result<Models> {
        Ok(Models::load(&self.models_dir(), &self.cfg)?)
    }

    fn save_models(&self, models: &Models) -> Result<()> {
        models.save(&self.models_dir(), &self.cfg)?;
        self.write_freeze(&models.progress.freeze_reports)
    }

    fn write_freeze(&self, reports: &[FreezeReport]) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join("freeze.json"), serde_json::to_string_pretty(reports)?)?;
        Ok(())
    }

    fn sink(&self) -> Result<JsonlSink> {
        Ok(JsonlSink::append(self.out.join("logs").join("train.jsonl"))?)
    }

    fn store_report(&self, name: &str, report: &MetricsReport) -> Result<PathBuf> {
        let dir = self.reports_dir();
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{name}.json"));
        std::fs::write(&path, report.to_json())?;
        Ok(path)
    }

    /// Runs a training stage; a freeze violation still records the failing
    /// report but leaves the stored checkpoints untouched.
    fn stage(&self, models: &mut Models, f: impl FnOnce(&mut Models) -> commonspace::Result<Vec<StageReport>>) -> Result<()> {
        match f(models) {
            Ok(reports) => {
                for r in &reports {
                    println!("{:<22} {:>6} steps  loss {:.4} -> {:.4}", r.stage, r.steps, r.initial_loss, r.final_loss);
                }
                self.save_models(models)
            }
            Err(e @ Error::FreezeViolation(_)) => {
                self.write_freeze(&models.progress.freeze_reports)?;
                Err(e.into())
            }
            Err(e) => Err(e.into()),
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides).context("loading config")?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    std::fs::write(cli.out.join("config.toml"), cfg.to_toml())?;
    let run = Run { cfg, out: cli.out };
    let cfg = &run.cfg;
    match cli.command {
        Command::Pretrain { agents } => {
            let ids: Vec<String> = if agents.is_empty() { cfg.agents.iter().map(|a| a.agent_id().to_string()).collect() } else { agents };
            let mut models = run.load_models()?;
            let mut sink = run.sink()?;
            run.stage(&mut models, |m| ids.iter().map(|id| pretrain_agent(cfg, m, id, &mut sink)).collect())?;
        }
        Command::Negotiate => {
            let mut models = run.load_models()?;
            let mut sink = run.sink()?;
            run.stage(&mut models, |m| Ok(vec![stage1_negotiate(cfg, m, &mut sink)?]))?;
        }
        Command::Adapt => {
            let mut models = run.load_models()?;
            let mut sink = run.sink()?;
            run.stage(&mut models, |m| Ok(vec![stage2_adapt(cfg, m, &mut sink)?]))?;
        }
        Command::Join { agents } => {
            let mut models = run.load_models()?;
            let ids: Vec<String> = if agents.is_empty() {
                cfg.agents
                    .iter()
                    .map(|a| a.agent_id().to_string())
                    .filter(|id| models.perception.contains_key(id) && !models.progress.negotiated.contains(id))
                    .collect()
            } else {
                agents
            };
            if ids.is_empty() {
                bail!("no agent to join; pretrain one outside the alliance first");
            }
            let mut sink = run.sink()?;
            run.stage(&mut models, |m| {
                let mut out = Vec::new();
                for id in &ids {
                    out.extend(join_new_agent(cfg, m, id, &mut sink)?);
                }
                Ok(out)
            })?;
        }
        Command::Eval { name } => {
            let models = run.load_models()?;
            let report = evalkit::evaluate(cfg, &models)?;
            for e in &report.entries {
                println!("{:<14} {:<10} AP@loose {:.4}  AP@strict {:.4}", e.setting, e.method.name(), e.ap_loose, e.ap_strict);
            }
            println!("wrote {}", run.store_report(&name, &report)?.display());
        }
        Command::DomainGap => {
            let models = run.load_models()?;
            let mut report = MetricsReport::new(cfg);
            report.domain_gaps = evalkit::domain_gaps(cfg, &models)?;
            for g in &report.domain_gaps {
                println!("{:<8} KL(common||local) {:.4}  KL(protocol||local) {:.4}", g.agent, g.kl_common, g.kl_protocol);
            }
            println!("wrote {}", run.store_report("domain_gap", &report)?.display());
        }
        Command::Ablate { grid, seeds } => {
            let mut sink = run.sink()?;
            let mut report = MetricsReport::new(cfg);
            report.ablations = evalkit::run_ablation(cfg, &grid.flags(), &seeds, &mut sink)?;
            for a in &report.ablations {
                println!("{:<28} AP@loose {:.4}  AP@strict {:.4}", a.label, a.mean_loose(), a.mean_strict());
            }
            println!("wrote {}", run.store_report("ablation", &report)?.display());
        }
        Command::Report => {
            let reports = collect_reports(&run.reports_dir())?;
            for path in emit_report(&reports, &run.out.join("report"))? {
                println!("wrote {}", path.display());
            }
        }
    }
    check_freeze(&run.out)
}

fn collect_reports(dir: &Path) -> Result<Vec<MetricsReport>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("no reports in {}; run eval first", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| -> Result<MetricsReport> {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

/// Fails when any recorded freeze report of the run did not pass.
fn check_freeze(out: &Path) -> Result<()> {
    let path = out.join("freeze.json");
    if !path.exists() {
        return Ok(());
    }
    let reports: Vec<FreezeReport> = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    if let Some(bad) = reports.iter().find(|r| !r.passed()) {
        return Err(Error::FreezeViolation(format!("{}: {}", bad.stage, bad.mismatches.join(", "))).into());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::FreezeViolation(_)) => ExitCode::from(FREEZE_FAILURE),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
