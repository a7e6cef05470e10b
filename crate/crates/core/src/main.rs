//! Command-line front end for the budget-split laboratory.
//!
//! Every subcommand is a thin wrapper over the library: it loads the
//! experiment config (built-in defaults unless `--config` points at a JSON
//! file), applies the optional `--seed` override, runs one pipeline stage,
//! and writes artifacts under `--out`.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use branchlab::bootstrap::{bootstrap_importance, load_results};
use branchlab::compute::{ComputeLedger, ModelShape};
use branchlab::curriculum::TaskSampler;
use branchlab::env::make_task_suite;
use branchlab::grpo::{grpo_train, EpochRecord};
use branchlab::harness::{evaluate, select_checkpoint, EvalSplit, ExperimentConfig};
use branchlab::policy::{Checkpoint, PolicyParams};
use branchlab::rng::{self, stream};
use branchlab::sft::{generate_expert_dataset, load_dataset, save_dataset, train_sft, DatasetMeta};

#[derive(Parser)]
#[command(name = "branchlab", version, about = "SFT→RL budget-split laboratory")]
struct Cli {
    /// Experiment config JSON (built-in defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the expert dataset and write it as JSONL.
    GenExpert,
    /// Train SFT from an expert dataset, saving one checkpoint per branch point.
    Sft {
        /// Dataset path (defaults to <out>/expert.jsonl).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run one RL phase from a checkpoint (from scratch when omitted).
    Rl {
        /// Starting checkpoint JSON.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the full branch sweep: one SFT pass, one RL phase per branch point.
    Sweep,
    /// Run random hyperparameter search at reduced budgets.
    Search {
        /// Override the number of trials.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Bootstrap hyperparameter importance from a search results CSV.
    Bootstrap {
        /// Results CSV (run_id, status, hp_*, m_* columns).
        #[arg(long)]
        results: PathBuf,
        /// Metric column to rank by.
        #[arg(long, default_value = "m_heldout_goal_sr")]
        metric: String,
        /// Hyperparameter column(s) to analyze (all hp_* columns when omitted).
        #[arg(long = "hp")]
        hps: Vec<String>,
        /// Bootstrap iterations.
        #[arg(long, default_value_t = 1000)]
        iters: usize,
    },
    /// Evaluate a checkpoint on both held-out splits.
    Eval {
        /// Checkpoint JSON to score.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episodes per split (defaults to the config value).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Print the active experiment config as JSON.
    PrintConfig,
    /// Print per-token FLOPs for a model shape.
    Flops {
        /// Named preset; explicit dimensions override its fields.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        layers: Option<u64>,
        #[arg(long)]
        hidden: Option<u64>,
        #[arg(long)]
        heads: Option<u64>,
        #[arg(long)]
        query_groups: Option<u64>,
        #[arg(long)]
        ffn: Option<u64>,
        #[arg(long)]
        vocab: Option<u64>,
        #[arg(long)]
        seq_len: u64,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    print_line(&serde_json::to_string_pretty(value)?)
}

fn print_line(rendered: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(err) = writeln!(out, "{rendered}") {
        // A downstream consumer such as `head` closing the pipe early is not
        // an error worth reporting; anything else (disk full on a redirect,
        // say) still is.
        if err.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        return Err(err.into());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenExpert => gen_expert(&cli),
        Command::Sft { data } => run_sft(&cli, data.as_deref()),
        Command::Rl { checkpoint } => run_rl(&cli, checkpoint.as_deref()),
        Command::Sweep => {
            let config = load_config(&cli)?;
            let out = branchlab::harness::branch_sweep(&config, &cli.out)?;
            print_json(&serde_json::json!({
                "out_dir": cli.out,
                "branches": out.frontier.len(),
                "frontier": out.frontier,
            }))
        }
        Command::Search { trials } => {
            let mut config = load_config(&cli)?;
            if let Some(n) = trials {
                config.search.n_trials = *n;
            }
            let records = branchlab::harness::random_search(&config, &cli.out)?;
            print_json(&serde_json::json!({
                "out_dir": cli.out,
                "trials": config.search.n_trials,
                "ok": records.len(),
            }))
        }
        Command::Bootstrap { results, metric, hps, iters } => {
            run_bootstrap(&cli, results, metric, hps, *iters)
        }
        Command::Eval { checkpoint, episodes } => run_eval(&cli, checkpoint, *episodes),
        Command::PrintConfig => {
            let config = load_config(&cli)?;
            print_line(&serde_json::to_string_pretty(&config)?)
        }
        Command::Flops { preset, layers, hidden, heads, query_groups, ffn, vocab, seq_len } => {
            let mut shape = match preset {
                Some(name) => ModelShape::resolve(name)?,
                None => ModelShape {
                    layers: 0,
                    hidden: 0,
                    heads: 0,
                    query_groups: 0,
                    ffn: 0,
                    vocab: 0,
                },
            };
            if let Some(v) = layers {
                shape.layers = *v;
            }
            if let Some(v) = hidden {
                shape.hidden = *v;
            }
            if let Some(v) = heads {
                shape.heads = *v;
            }
            if let Some(v) = query_groups {
                shape.query_groups = *v;
            }
            if let Some(v) = ffn {
                shape.ffn = *v;
            }
            if let Some(v) = vocab {
                shape.vocab = *v;
            }
            let forward = branchlab::compute::flops_per_token(&shape, *seq_len, 0)?;
            let train = branchlab::compute::flops_per_token(&shape, *seq_len, 3)?;
            print_json(&serde_json::json!({
                "shape": shape,
                "seq_len": seq_len,
                "forward_per_token": forward.to_string(),
                "train_per_token": train.to_string(),
            }))
        }
    }
}

fn gen_expert(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let suite = make_task_suite(&config.suite)?;
    let cost = config.cost_model()?;
    let mut ledger = ComputeLedger::new();
    let mut rng = rng::stream_rng(config.master_seed, &[stream::EXPERT]);
    let dataset = generate_expert_dataset(
        &suite,
        config.expert.n_episodes,
        config.expert.err_rate,
        &mut rng,
        &mut ledger,
        &cost,
    )?;
    fs::create_dir_all(&cli.out)?;
    let path = cli.out.join("expert.jsonl");
    let meta = DatasetMeta {
        err_rate: config.expert.err_rate,
        teacher_shape: config.expert.teacher_shape.clone(),
        feature_dim: suite.feature_dim(),
        action_vocab: suite.action_vocab(),
    };
    save_dataset(&dataset, &meta, &path)?;
    print_json(&serde_json::json!({
        "path": path,
        "n_generated": dataset.n_generated,
        "n_kept": dataset.n_kept,
        "pairs_generated": dataset.pairs_generated,
        "n_pairs": dataset.pairs.len(),
        "teacher_gen_flops": ledger.teacher_gen_flops.to_string(),
    }))
}

fn run_sft(cli: &Cli, data: Option<&std::path::Path>) -> Result<()> {
    let config = load_config(cli)?;
    let suite = make_task_suite(&config.suite)?;
    let cost = config.cost_model()?;
    let path = data.map(PathBuf::from).unwrap_or_else(|| cli.out.join("expert.jsonl"));
    let (dataset, meta) =
        load_dataset(&path).with_context(|| format!("loading expert data {}", path.display()))?;
    if meta.feature_dim != suite.feature_dim() || meta.action_vocab != suite.action_vocab() {
        bail!(
            "dataset {} was built for feature_dim {} / vocab {}, config implies {} / {}",
            path.display(),
            meta.feature_dim,
            meta.action_vocab,
            suite.feature_dim(),
            suite.action_vocab()
        );
    }
    let mut ledger = ComputeLedger::new();
    let mut rng = rng::stream_rng(config.master_seed, &[stream::SFT]);
    let checkpoints = train_sft(
        &dataset,
        &config.branch_plan(),
        config.sft.learning_rate,
        config.sft.batch_size,
        suite.feature_dim(),
        suite.action_vocab(),
        &mut rng,
        &mut ledger,
        &cost,
    )?;
    fs::create_dir_all(&cli.out)?;
    let mut written = Vec::new();
    for checkpoint in &checkpoints {
        let ckpt_path = cli.out.join(format!("ckpt_{}.json", checkpoint.step));
        checkpoint.save(&ckpt_path)?;
        written.push(ckpt_path);
    }
    print_json(&serde_json::json!({
        "checkpoints": written,
        "sft_train_flops": ledger.sft_train_flops.to_string(),
    }))
}

fn run_rl(cli: &Cli, checkpoint: Option<&std::path::Path>) -> Result<()> {
    let config = load_config(cli)?;
    let suite = make_task_suite(&config.suite)?;
    let cost = config.cost_model()?;
    let start = match checkpoint {
        Some(path) => Checkpoint::load(path)
            .with_context(|| format!("loading checkpoint {}", path.display()))?,
        None => Checkpoint {
            params: PolicyParams::zeros(suite.feature_dim(), suite.action_vocab())?,
            step: 0,
        },
    };
    // Matches the sweep's seed derivation for this branch point, so a
    // standalone run from ckpt_<t_b>.json reproduces the sweep's first
    // repetition exactly.
    let run_seed = rng::mix(config.master_seed, &[stream::BRANCH, start.step as u64, 0]);
    let mut ledger = ComputeLedger::new();
    let mut sampler: TaskSampler = config.curriculum.sampler(config.suite.n_train_tasks)?;
    fs::create_dir_all(&cli.out)?;
    let epochs_path = cli.out.join("epochs.csv");
    let mut epochs_file = fs::File::create(&epochs_path)?;
    use std::io::Write as _;
    writeln!(
        epochs_file,
        "epoch,rl_flops,cum_flops,heldout_goal_sr,heldout_task_sr,mean_traj_len,filtered_frac"
    )?;
    let mut call = 0u64;
    let mut eval_fn = |params: &PolicyParams, ledger: &mut ComputeLedger| {
        call += 1;
        let mut goal_rng = rng::stream_rng(run_seed, &[stream::EVAL, call, 0]);
        let goal_sr = evaluate(
            &suite,
            params,
            EvalSplit::HeldoutGoals,
            config.eval.episodes_per_split,
            config.rl.decoding_temperature,
            &mut goal_rng,
            ledger,
            &cost,
        )?;
        let mut task_rng = rng::stream_rng(run_seed, &[stream::EVAL, call, 1]);
        let task_sr = evaluate(
            &suite,
            params,
            EvalSplit::HeldoutTasks,
            config.eval.episodes_per_split,
            config.rl.decoding_temperature,
            &mut task_rng,
            ledger,
            &cost,
        )?;
        Ok((goal_sr, task_sr))
    };
    let mut on_epoch = |record: &EpochRecord| -> branchlab::Result<()> {
        writeln!(
            epochs_file,
            "{},{},{},{},{},{},{}",
            record.epoch,
            record.rl_flops,
            record.cum_flops,
            record.heldout_goal_sr,
            record.heldout_task_sr,
            record.mean_traj_len,
            record.filtered_frac
        )?;
        Ok(())
    };
    let (final_ckpt, history) = grpo_train(
        &suite,
        &start,
        &config.rl.run_config(),
        &mut sampler,
        run_seed,
        &mut ledger,
        &cost,
        &mut eval_fn,
        &mut on_epoch,
    )?;
    epochs_file.flush()?;
    let ckpt_path = cli.out.join("final_checkpoint.json");
    final_ckpt.save(&ckpt_path)?;
    let curve: Vec<f64> = history.iter().map(|r| r.heldout_goal_sr).collect();
    let (idx, raw) = select_checkpoint(&curve, config.eval.smoothing_window)?;
    print_json(&serde_json::json!({
        "epochs_csv": epochs_path,
        "final_checkpoint": ckpt_path,
        "epochs": history.len(),
        "selected_epoch": history[idx].epoch,
        "selected_heldout_goal_sr": raw,
        "selected_heldout_task_sr": history[idx].heldout_task_sr,
        "selected_cum_flops": history[idx].cum_flops.to_string(),
        "ledger": ledger.summary(),
    }))
}

fn run_bootstrap(
    cli: &Cli,
    results: &std::path::Path,
    metric: &str,
    hps: &[String],
    iters: usize,
) -> Result<()> {
    let seed = cli.seed.unwrap_or(17);
    let records = load_results(results)
        .with_context(|| format!("loading search results {}", results.display()))?;
    let mut names: Vec<String> = if hps.is_empty() {
        let mut all: Vec<String> = records
            .iter()
            .flat_map(|r| r.hyperparameters.keys().cloned())
            .collect();
        all.sort();
        all.dedup();
        all
    } else {
        hps.to_vec()
    };
    names.sort();
    names.dedup();
    if names.is_empty() {
        bail!("no hyperparameter columns to analyze in {}", results.display());
    }
    // Per-hyperparameter seeds follow the same derivation as
    // aggregate_select, so the reports and the selection agree.
    let mut reports = Vec::with_capacity(names.len());
    for (idx, hp) in names.iter().enumerate() {
        reports.push(bootstrap_importance(
            &records,
            hp,
            metric,
            iters,
            rng::mix(seed, &[stream::BOOTSTRAP, idx as u64]),
        )?);
    }
    fs::create_dir_all(&cli.out)?;
    let path = cli.out.join("bootstrap.json");
    let value = serde_json::json!({
        "metric": metric,
        "iters": iters,
        "seed": seed,
        "n_records": records.len(),
        "reports": reports,
    });
    fs::write(&path, serde_json::to_string_pretty(&value)? + "\n")?;
    print_json(&serde_json::json!({
        "path": path,
        "selected": reports
            .iter()
            .map(|r| (r.hp.clone(), r.winner().value.clone()))
            .collect::<std::collections::BTreeMap<_, _>>(),
    }))
}

fn run_eval(cli: &Cli, checkpoint: &std::path::Path, episodes: Option<usize>) -> Result<()> {
    let config = load_config(cli)?;
    let suite = make_task_suite(&config.suite)?;
    let cost = config.cost_model()?;
    let ckpt = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let n = episodes.unwrap_or(config.eval.episodes_per_split);
    let mut ledger = ComputeLedger::new();
    let mut goal_rng = rng::stream_rng(config.master_seed, &[stream::EVAL, 0]);
    let goal_sr = evaluate(
        &suite,
        &ckpt.params,
        EvalSplit::HeldoutGoals,
        n,
        config.rl.decoding_temperature,
        &mut goal_rng,
        &mut ledger,
        &cost,
    )?;
    let mut task_rng = rng::stream_rng(config.master_seed, &[stream::EVAL, 1]);
    let task_sr = evaluate(
        &suite,
        &ckpt.params,
        EvalSplit::HeldoutTasks,
        n,
        config.rl.decoding_temperature,
        &mut task_rng,
        &mut ledger,
        &cost,
    )?;
    print_json(&serde_json::json!({
        "checkpoint": checkpoint,
        "step": ckpt.step,
        "episodes_per_split": n,
        "heldout_goal_sr": goal_sr,
        "heldout_task_sr": task_sr,
        "eval_flops": ledger.eval_flops.to_string(),
    }))
}
