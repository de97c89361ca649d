//! Command-line interface: generate datasets, train policies, roll out and
//! evaluate them, and inspect single episodes.
//!
//! Exit codes: 0 on success (including `--help`/`--version`), 1 for usage
//! errors, 2 for runtime failures. The `FORAGE_SEED` environment variable
//! overrides `--seed` when set.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{load_corpus, Corpus};
use crate::datagen::{export_dataset, generate_dataset, load_tasks, GenConfig, Task};
use crate::env::{oracle_episode, rollout_episode, EnvConfig};
use crate::eval::{
    evaluate, one_shot_episode, render_report, EpisodeDump, EvalPolicy, ReportFormat,
};
use crate::policy::{ExternalPolicy, GreedyChooser, PolicyParams, RandomChooser};
use crate::reward::{OutcomeMetric, RewardConfig};
use crate::train::{train_loop, greedy_metrics, RewardMode, TrainConfig};
use crate::trajectory::{compute_loss_mask, serialize_trajectory, BlockKind, MaskOrigin};

#[derive(Debug, Parser)]
#[command(
    name = "forage",
    version,
    about = "Multi-hop retrieval lab: synthesize tasks, train a search policy, evaluate it"
)]
pub struct Cli {
    #[command(flatten)]
    pub globals: Globals,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Globals {
    /// Master random seed (the FORAGE_SEED environment variable wins)
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Information-gain weight in the reward
    #[arg(long, global = true, default_value_t = 0.2)]
    pub alpha: f64,
    /// Per-step efficiency discount in the reward
    #[arg(long, global = true, default_value_t = 0.95)]
    pub beta: f64,
    /// Documents returned per search
    #[arg(long, global = true, default_value_t = 3)]
    pub top_k: usize,
    /// Search budget per episode
    #[arg(long, global = true, default_value_t = 6)]
    pub max_steps: usize,
    /// Outcome metric used inside the reward
    #[arg(long, global = true, value_enum, default_value_t = MetricArg::Em)]
    pub metric: MetricArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    /// Normalized exact match
    Em,
    /// Token-level F1
    F1,
}

impl From<MetricArg> for OutcomeMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Em => OutcomeMetric::ExactMatch,
            MetricArg::F1 => OutcomeMetric::TokenF1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RewardModeArg {
    /// Whole reward on the final step
    Terminal,
    /// Spread the gain term over the searches that earned it
    Shaped,
}

impl From<RewardModeArg> for RewardMode {
    fn from(m: RewardModeArg) -> Self {
        match m {
            RewardModeArg::Terminal => RewardMode::TerminalOnly,
            RewardModeArg::Shaped => RewardMode::ShapedGain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Human,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Human => ReportFormat::Human,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a task set with its document corpus
    Gen {
        /// Output directory for corpus.jsonl and tasks.jsonl
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_tasks: usize,
        #[arg(long, default_value_t = 3)]
        hops: usize,
        /// Distractor documents sampled per task
        #[arg(long, default_value_t = 5)]
        distractors: usize,
        /// Build two evidence branches that must agree on the answer
        #[arg(long)]
        intersecting: bool,
    },
    /// Train a policy on a generated dataset
    Train {
        /// Dataset directory (from `gen`)
        #[arg(long)]
        data: PathBuf,
        /// Output directory for params.json and train_log.csv
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        iters: usize,
        /// How many tasks from the end of the set are held out
        #[arg(long, default_value_t = 50)]
        heldout: usize,
        #[arg(long, default_value_t = 16)]
        episodes_per_iter: usize,
        #[arg(long, default_value_t = 1)]
        epochs_per_iter: usize,
        #[arg(long, default_value_t = 0.004)]
        lr_policy: f64,
        #[arg(long, default_value_t = 0.3)]
        lr_value: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0.95)]
        lam: f64,
        #[arg(long, default_value_t = 0.2)]
        clip_eps: f64,
        #[arg(long, default_value_t = 0.5)]
        value_coef: f64,
        #[arg(long, default_value_t = 0.01)]
        entropy_coef: f64,
        /// Skip the expert warm start
        #[arg(long)]
        no_warm_start: bool,
        #[arg(long, default_value_t = 50)]
        warm_start_episodes: usize,
        #[arg(long, default_value_t = 50)]
        bc_steps: usize,
        #[arg(long, default_value_t = 0.15)]
        bc_lr: f64,
        #[arg(long, value_enum, default_value_t = RewardModeArg::Terminal)]
        reward_mode: RewardModeArg,
        /// Stop early once held-out exact match reaches this level
        #[arg(long)]
        stop_at_em: Option<f64>,
    },
    /// Roll out episodes and dump them as JSON lines
    Rollout {
        #[arg(long)]
        data: PathBuf,
        /// oracle | random | oneshot | external:<command> | <params.json path>
        #[arg(long, default_value = "oracle")]
        policy: String,
        /// Output file for episodes.jsonl
        #[arg(long)]
        out: PathBuf,
        /// Cap on the number of tasks (0 = all)
        #[arg(long, default_value_t = 0)]
        limit: usize,
    },
    /// Score a policy over the task set
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// oracle | random | oneshot | external:<command> | <params.json path>
        #[arg(long, default_value = "oracle")]
        policy: String,
        #[arg(long, value_enum, default_value_t = FormatArg::Human)]
        format: FormatArg,
        /// Evaluate only the last N tasks (0 = all); matches the train split
        #[arg(long, default_value_t = 0)]
        heldout: usize,
    },
    /// Pretty-print one episode: blocks, origins, reward breakdown
    Inspect {
        #[arg(long)]
        data: PathBuf,
        /// Task id (defaults to the first task)
        #[arg(long)]
        task: Option<String>,
        /// oracle | random | oneshot | external:<command> | <params.json path>
        #[arg(long, default_value = "oracle")]
        policy: String,
    },
}

/// Replace the parsed seed with `FORAGE_SEED` when the variable is set.
pub fn override_seed(seed: &mut u64, var: Option<&str>) -> Result<()> {
    if let Some(text) = var {
        *seed = text
            .parse()
            .with_context(|| format!("FORAGE_SEED must be an unsigned integer, got `{text}`"))?;
    }
    Ok(())
}

fn env_config(globals: &Globals) -> EnvConfig {
    EnvConfig {
        max_steps: globals.max_steps,
        top_k: globals.top_k,
        reward: RewardConfig {
            alpha: globals.alpha,
            beta: globals.beta,
            metric: globals.metric.into(),
        },
    }
}

fn load_dataset(dir: &Path) -> Result<(Vec<Task>, Corpus)> {
    let tasks = load_tasks(&dir.join("tasks.jsonl"))
        .with_context(|| format!("loading tasks from {}", dir.display()))?;
    let corpus = load_corpus(&dir.join("corpus.jsonl"))
        .with_context(|| format!("loading corpus from {}", dir.display()))?;
    Ok((tasks, corpus))
}

/// How a `--policy` argument is interpreted.
enum PolicySpec {
    Oracle,
    Random,
    OneShot,
    Params(Box<PolicyParams>),
    External(String),
}

impl PolicySpec {
    fn parse(text: &str) -> Result<Self> {
        Ok(match text {
            "oracle" => PolicySpec::Oracle,
            "random" => PolicySpec::Random,
            "oneshot" => PolicySpec::OneShot,
            other => {
                if let Some(command) = other.strip_prefix("external:") {
                    if command.trim().is_empty() {
                        bail!("external policy command is empty");
                    }
                    PolicySpec::External(command.to_string())
                } else {
                    let params = PolicyParams::load(Path::new(other))
                        .with_context(|| format!("loading policy parameters from `{other}`"))?;
                    PolicySpec::Params(Box::new(params))
                }
            }
        })
    }

    fn to_eval_policy(&self) -> EvalPolicy {
        match self {
            PolicySpec::Oracle => EvalPolicy::Oracle,
            PolicySpec::Random => EvalPolicy::Random,
            PolicySpec::OneShot => EvalPolicy::OneShotRag,
            PolicySpec::Params(p) => EvalPolicy::Greedy(p.clone()),
            PolicySpec::External(cmd) => EvalPolicy::External(cmd.clone()),
        }
    }
}

/// Produces episode dumps for rollout/inspect, keeping one random stream and
/// one external connection across tasks.
struct PolicyDriver {
    spec: PolicySpec,
    rng: ChaCha8Rng,
    external: Option<ExternalPolicy>,
}

impl PolicyDriver {
    fn new(spec: PolicySpec, seed: u64) -> Result<Self> {
        let external = match &spec {
            PolicySpec::External(command) => Some(ExternalPolicy::spawn(command)?),
            _ => None,
        };
        Ok(PolicyDriver {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
            external,
        })
    }

    fn episode(&mut self, task: &Task, corpus: &Corpus, cfg: &EnvConfig) -> Result<EpisodeDump> {
        let record = match &mut self.spec {
            PolicySpec::Oracle => oracle_episode(task, corpus, cfg)?,
            PolicySpec::Random => {
                let mut chooser = RandomChooser { rng: &mut self.rng };
                rollout_episode(task, corpus, cfg, &mut chooser)?
            }
            PolicySpec::Params(params) => {
                let mut chooser = GreedyChooser { params };
                rollout_episode(task, corpus, cfg, &mut chooser)?
            }
            PolicySpec::External(_) => {
                let chooser = self.external.as_mut().expect("spawned in new()");
                rollout_episode(task, corpus, cfg, chooser)?
            }
            PolicySpec::OneShot => {
                let (_, trajectory, breakdown) = one_shot_episode(task, corpus, cfg)?;
                return Ok(EpisodeDump {
                    task_id: task.task_id.clone(),
                    question: task.question.clone(),
                    trajectory_text: serialize_trajectory(&trajectory)?,
                    actions: Vec::new(),
                    log_probs: Vec::new(),
                    values: Vec::new(),
                    reward: breakdown,
                });
            }
        };
        Ok(EpisodeDump::from_record(&record)?)
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let globals = &cli.globals;
    match cli.command {
        Command::Gen {
            out,
            n_tasks,
            hops,
            distractors,
            intersecting,
        } => {
            let cfg = GenConfig {
                n_tasks,
                hops,
                distractors_per_task: distractors,
                intersecting,
                seed: globals.seed,
                ..GenConfig::default()
            };
            let set = generate_dataset(&cfg)?;
            let (corpus_path, tasks_path) = export_dataset(&set.tasks, &set.documents, &out)?;
            let env_cfg = env_config(globals);
            let oracle = evaluate(
                &EvalPolicy::Oracle,
                &set.tasks,
                &set.corpus,
                &env_cfg,
                globals.seed,
            )?;
            let oneshot = evaluate(
                &EvalPolicy::OneShotRag,
                &set.tasks,
                &set.corpus,
                &env_cfg,
                globals.seed,
            )?;
            println!(
                "generated {} tasks, {} documents (seed {})",
                set.tasks.len(),
                set.documents.len(),
                globals.seed
            );
            println!(
                "wrote {} and {}",
                corpus_path.display(),
                tasks_path.display()
            );
            println!(
                "oracle : em {:.4} coverage {:.4} mean_T {:.4}",
                oracle.mean_em, oracle.mean_coverage, oracle.mean_steps_t
            );
            println!("oneshot: em {:.4}", oneshot.mean_em);
            if oracle.mean_em < 1.0 || oracle.mean_coverage < 1.0 {
                bail!("generated set failed expert validation");
            }
            Ok(())
        }
        Command::Train {
            data,
            out,
            iters,
            heldout,
            episodes_per_iter,
            epochs_per_iter,
            lr_policy,
            lr_value,
            gamma,
            lam,
            clip_eps,
            value_coef,
            entropy_coef,
            no_warm_start,
            warm_start_episodes,
            bc_steps,
            bc_lr,
            reward_mode,
            stop_at_em,
        } => {
            let (tasks, corpus) = load_dataset(&data)?;
            if heldout == 0 || heldout >= tasks.len() {
                bail!(
                    "--heldout must be between 1 and {} (task count {})",
                    tasks.len() - 1,
                    tasks.len()
                );
            }
            let split = tasks.len() - heldout;
            let (train_tasks, heldout_tasks) = tasks.split_at(split);
            let cfg = TrainConfig {
                gamma,
                lam,
                clip_eps,
                lr_policy,
                lr_value,
                iters,
                episodes_per_iter,
                epochs_per_iter,
                value_coef,
                entropy_coef,
                seed: globals.seed,
                reward_mode: reward_mode.into(),
                warm_start: !no_warm_start,
                warm_start_episodes,
                bc_steps,
                bc_lr,
                stop_at_em,
                env: env_config(globals),
            };
            let (params, report) = train_loop(train_tasks, heldout_tasks, &corpus, &cfg)?;
            std::fs::create_dir_all(&out)?;
            let params_path = out.join("params.json");
            let log_path = out.join("train_log.csv");
            params.save(&params_path)?;
            std::fs::write(&log_path, report.to_csv())?;
            let (em, mean_t, cov) = greedy_metrics(&params, heldout_tasks, &corpus, &cfg.env)?;
            println!(
                "trained {} iterations on {} tasks ({} held out, seed {})",
                report.rows.len(),
                split,
                heldout,
                globals.seed
            );
            println!("heldout: em {em:.4} mean_T {mean_t:.4} coverage {cov:.4}");
            println!("wrote {} and {}", params_path.display(), log_path.display());
            Ok(())
        }
        Command::Rollout {
            data,
            policy,
            out,
            limit,
        } => {
            let (tasks, corpus) = load_dataset(&data)?;
            let env_cfg = env_config(globals);
            let spec = PolicySpec::parse(&policy)?;
            let mut driver = PolicyDriver::new(spec, globals.seed)?;
            let n = if limit == 0 {
                tasks.len()
            } else {
                limit.min(tasks.len())
            };
            if n == 0 {
                bail!("no tasks to roll out");
            }
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            let mut file = std::fs::File::create(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let mut total = 0.0;
            for task in &tasks[..n] {
                let dump = driver.episode(task, &corpus, &env_cfg)?;
                total += dump.reward.total;
                let line = serde_json::to_string(&dump)?;
                writeln!(file, "{line}")?;
            }
            println!(
                "wrote {} episodes to {} (mean reward {:.4})",
                n,
                out.display(),
                total / n as f64
            );
            Ok(())
        }
        Command::Eval {
            data,
            policy,
            format,
            heldout,
        } => {
            let (tasks, corpus) = load_dataset(&data)?;
            let slice = if heldout > 0 {
                if heldout >= tasks.len() {
                    bail!("--heldout {} exceeds task count {}", heldout, tasks.len());
                }
                &tasks[tasks.len() - heldout..]
            } else {
                &tasks[..]
            };
            let spec = PolicySpec::parse(&policy)?;
            let env_cfg = env_config(globals);
            let report = evaluate(&spec.to_eval_policy(), slice, &corpus, &env_cfg, globals.seed)?;
            print!("{}", render_report(&report, format.into()));
            Ok(())
        }
        Command::Inspect { data, task, policy } => {
            let (tasks, corpus) = load_dataset(&data)?;
            let picked = match &task {
                Some(id) => tasks
                    .iter()
                    .find(|t| &t.task_id == id)
                    .with_context(|| format!("no task with id `{id}`"))?,
                None => tasks.first().context("dataset is empty")?,
            };
            let env_cfg = env_config(globals);
            let spec = PolicySpec::parse(&policy)?;
            let mut driver = PolicyDriver::new(spec, globals.seed)?;
            let dump = driver.episode(picked, &corpus, &env_cfg)?;
            print!("{}", render_inspection(picked, &dump)?);
            Ok(())
        }
    }
}

/// Multi-line human rendering of one episode: the task, each block with its
/// origin, the reward decomposition, and the loss-mask span layout.
fn render_inspection(task: &Task, dump: &EpisodeDump) -> Result<String> {
    let trajectory = crate::trajectory::parse_trajectory(&dump.trajectory_text)?;
    let mut out = String::new();
    out.push_str(&format!("task      : {}\n", task.task_id));
    out.push_str(&format!("question  : {}\n", task.question));
    out.push_str(&format!("golds     : {}\n", task.gold_answers.join(", ")));
    out.push_str(&format!("golden ids: {}\n\n", task.golden_doc_ids.join(", ")));
    for block in &trajectory.blocks {
        let (label, origin) = match block.kind {
            BlockKind::Think => ("think ", "model"),
            BlockKind::Search => ("search", "model"),
            BlockKind::Info => ("info  ", "injected"),
            BlockKind::Answer => ("answer", "model"),
        };
        out.push_str(&format!("{label} [{origin:8}] "));
        if block.kind == BlockKind::Info {
            out.push_str(&format!("{} documents\n", block.doc_ids.len()));
            for line in block.text.lines() {
                out.push_str(&format!("                  {line}\n"));
            }
        } else {
            out.push_str(&format!("{}\n", block.text));
        }
    }
    let r = &dump.reward;
    out.push_str(&format!(
        "\nreward    : {:.6} = {:.6} * ({:.6} + {} * {:.6})  [T={}]\n",
        r.total, r.efficiency, r.outcome, r.alpha, r.gain, r.steps_t
    ));
    out.push_str(&format!(
        "coverage  : {}\n",
        r.curve
            .values
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(" -> ")
    ));
    let mask = compute_loss_mask(&trajectory)?;
    let spans: Vec<String> = mask
        .iter()
        .map(|s| {
            let tag = match s.origin {
                MaskOrigin::ModelGenerated => "model",
                MaskOrigin::Injected => "injected",
            };
            format!("{tag}[{},{})", s.start, s.end)
        })
        .collect();
    out.push_str(&format!("mask      : {}\n", spans.join(" ")));
    Ok(out)
}

/// Parse arguments, honoring the seed override, and run. Returns the process
/// exit code.
pub fn run() -> i32 {
    let mut cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let seed_var = std::env::var("FORAGE_SEED").ok();
    if let Err(e) = override_seed(&mut cli.globals.seed, seed_var.as_deref()) {
        eprintln!("error: {e:#}");
        return 2;
    }
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}
