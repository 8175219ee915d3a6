//! Experiment orchestration: seeded multi-run training, evaluation across
//! scenarios, analysis dispatch, and single-episode rollouts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dacoop::analysis;
use dacoop::arena::Arena;
use dacoop::artifacts;
use dacoop::config::{ArenaKind, ExperimentConfig};
use dacoop::qnet::QNet;
use dacoop::sim::{run_episode, Policy, Sim};
use dacoop::trainer::{
    self, evaluate_policy, train, CurvePoint, EpisodeStat, FixedApfPolicy, QnetPolicy,
    TrainObserver, TrainSetup,
};

/// Environment variable naming the root for relative output directories.
const OUT_ROOT_ENV: &str = "DACOOP_OUT";

#[derive(Parser)]
#[command(name = "dacoop", about = "Cooperative pursuit lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed and aggregate the learning metrics.
    Train(TrainArgs),
    /// Evaluate a policy over one or more scenarios.
    Eval(EvalArgs),
    /// Run an analysis over a finished training run.
    Analyze(AnalyzeArgs),
    /// Roll a single episode and dump its log for inspection.
    Rollout(RolloutArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set max_episodes=1000 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got '{kv}'"))?;
            cfg.set(k.trim(), v.trim())
                .with_context(|| format!("applying --set {kv}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seed list (overrides the config's seeds).
    #[arg(long)]
    seeds: Option<String>,
    /// Suppress progress reporting.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to evaluate (required for --policy checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Policy kind: checkpoint | random | fixed.
    #[arg(long, default_value = "checkpoint")]
    policy: String,
    /// Action index for --policy fixed.
    #[arg(long, default_value_t = 13)]
    fixed_action: usize,
    /// Comma-separated arenas to evaluate (training|boundary|circle).
    #[arg(long)]
    arena: Option<String>,
    /// Comma-separated pursuer counts to evaluate.
    #[arg(long)]
    pursuers: Option<String>,
    /// Evaluation episodes per scenario.
    #[arg(long)]
    episodes: Option<u32>,
    /// Base RNG seed for evaluation episodes.
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    run: PathBuf,
    #[command(subcommand)]
    kind: AnalyzeKind,
}

#[derive(Subcommand)]
enum AnalyzeKind {
    /// Averaged Hausdorff distance between embeddings at two swarm sizes.
    Ahd {
        /// States to sample per swarm size.
        #[arg(long, default_value_t = 10_000)]
        states: usize,
        /// The two swarm sizes, comma separated.
        #[arg(long, default_value = "3,10")]
        sizes: String,
        #[arg(long, default_value_t = 77)]
        seed: u64,
    },
    /// Attention-event frequencies against critics from another run.
    Events {
        /// Run directory whose final checkpoints serve as critics.
        #[arg(long)]
        critics: PathBuf,
        /// Episodes rolled per policy seed.
        #[arg(long, default_value_t = 50)]
        episodes: u32,
        #[arg(long, default_value_t = 78)]
        seed: u64,
    },
    /// Formation-score comparison on selected high-attention states.
    Formation {
        /// Attention dominance thresholds (> 0.5), comma separated.
        #[arg(long, default_value = "0.6")]
        alpha0: String,
        /// Episodes rolled per seed to harvest states.
        #[arg(long, default_value_t = 100)]
        episodes: u32,
        #[arg(long, default_value_t = 79)]
        seed: u64,
    },
    /// Correlation between KL gradients and return gradients.
    Klcorr {
        /// Keep only steps whose KL gradient exceeds this threshold.
        #[arg(long, default_value_t = 1e-5)]
        c_grad: f64,
    },
}

#[derive(Args)]
struct RolloutArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to drive the pursuers (policy kind checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Policy kind: checkpoint | random | fixed.
    #[arg(long, default_value = "checkpoint")]
    policy: String,
    #[arg(long, default_value_t = 13)]
    fixed_action: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Episode log destination.
    #[arg(long)]
    out: PathBuf,
    /// Append force-breakdown columns to the log.
    #[arg(long)]
    verbose: bool,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Rollout(args) => cmd_rollout(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Resolve an output path under the optional environment root.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

struct ProgressObserver {
    seed: u64,
    run_dir: PathBuf,
    config_hash: u64,
    quiet: bool,
    started: std::time::Instant,
}

impl TrainObserver for ProgressObserver {
    fn on_checkpoint(
        &mut self,
        episode: u32,
        net: &QNet,
        point: &CurvePoint,
    ) -> dacoop::Result<()> {
        net.save_with_meta(
            &artifacts::checkpoint_path(&self.run_dir, self.seed, episode),
            self.config_hash,
            self.seed,
        )?;
        if !self.quiet {
            eprintln!(
                "[seed {}] episode {episode}: success {:.3}, collision {:.3}, return {:.2} ({:.0}s)",
                self.seed,
                point.success_rate,
                point.collision_rate,
                point.mean_return,
                self.started.elapsed().as_secs_f64(),
            );
        }
        Ok(())
    }

    fn on_episode(&mut self, stat: &EpisodeStat) -> dacoop::Result<()> {
        if !self.quiet && stat.episode % 200 == 199 {
            eprintln!(
                "[seed {}] {} episodes ({:.0}s)",
                self.seed,
                stat.episode + 1,
                self.started.elapsed().as_secs_f64()
            );
        }
        Ok(())
    }
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if let Some(seeds) = &args.seeds {
        cfg.set("seeds", seeds)?;
    }
    let run_dir = resolve_out(&cfg.out_dir);
    std::fs::create_dir_all(&run_dir)?;

    // A run directory is bound to one config.
    let config_path = run_dir.join("config.txt");
    if config_path.exists() {
        let existing = ExperimentConfig::load(&config_path)?;
        if existing.hash() != cfg.hash() {
            bail!(
                "{} already holds a run with a different config (hash {:016x} vs {:016x})",
                run_dir.display(),
                existing.hash(),
                cfg.hash()
            );
        }
    } else {
        cfg.save(&config_path)?;
    }
    let config_hash = cfg.hash();
    let arena = cfg.build_arena()?;

    let done = artifacts::completed_seeds(&run_dir, &cfg.seeds);
    let pending: Vec<u64> = cfg
        .seeds
        .iter()
        .copied()
        .filter(|s| !done.contains(s))
        .collect();
    if !done.is_empty() {
        eprintln!("resuming: seeds {done:?} already complete");
    }

    let quiet = args.quiet;
    std::thread::scope(|scope| -> anyhow::Result<()> {
        let mut handles = Vec::new();
        for &seed in &pending {
            let cfg = &cfg;
            let arena: &Arena = &arena;
            let run_dir = run_dir.clone();
            handles.push((
                seed,
                scope.spawn(move || -> anyhow::Result<()> {
                    let seed_dir = artifacts::seed_dir(&run_dir, seed);
                    std::fs::create_dir_all(&seed_dir)?;
                    let setup = TrainSetup {
                        sim: cfg.sim,
                        arena,
                        evader: cfg.evader,
                        qnet: cfg.qnet.clone(),
                        apf: cfg.apf,
                        trainer: cfg.trainer.clone(),
                    };
                    let mut observer = ProgressObserver {
                        seed,
                        run_dir: run_dir.clone(),
                        config_hash,
                        quiet,
                        started: std::time::Instant::now(),
                    };
                    let run = train(&setup, seed, &mut observer, Some(&seed_dir))?;
                    artifacts::write_curve(
                        &seed_dir.join("curve.csv"),
                        &run.curve,
                        config_hash,
                        seed,
                    )?;
                    artifacts::write_episodes(
                        &seed_dir.join("episodes.csv"),
                        &run.episodes,
                        config_hash,
                        seed,
                    )?;
                    artifacts::write_kl_return(
                        &seed_dir.join("klreturn.csv"),
                        &run.kl_return_log,
                        config_hash,
                        seed,
                    )?;
                    run.final_net.save_with_meta(
                        &artifacts::final_checkpoint_path(&run_dir, seed),
                        config_hash,
                        seed,
                    )?;
                    Ok(())
                }),
            ));
        }
        for (seed, handle) in handles {
            handle
                .join()
                .map_err(|_| anyhow!("seed {seed} panicked"))?
                .with_context(|| format!("training seed {seed}"))?;
        }
        Ok(())
    })?;

    // Aggregate across every completed seed.
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let sd = artifacts::seed_dir(&run_dir, seed);
        let (curve, _, _) = artifacts::read_curve(&sd.join("curve.csv"))?;
        let (episodes, _, _) = artifacts::read_episodes(&sd.join("episodes.csv"))?;
        rows.push(artifacts::SeedMetrics {
            seed,
            auc: analysis::auc(&curve)?,
            msr: analysis::msr(&curve)?,
            crtp: analysis::crtp(&episodes, cfg.sim.collision_terminates),
            final_success: curve.last().map(|p| p.success_rate).unwrap_or(0.0),
        });
    }
    let agg = artifacts::aggregate(rows)?;
    artifacts::write_aggregate(&run_dir.join("aggregate.csv"), &agg, config_hash)?;
    println!("run {} ({} seeds)", run_dir.display(), cfg.seeds.len());
    println!("seed,auc,msr,crtp,final_success");
    for r in &agg.rows {
        println!(
            "{},{:.4},{:.4},{:.4},{:.4}",
            r.seed, r.auc, r.msr, r.crtp, r.final_success
        );
    }
    println!(
        "mean,{:.4},{:.4},{:.4},{:.4}",
        agg.mean.auc, agg.mean.msr, agg.mean.crtp, agg.mean.final_success
    );
    println!(
        "sd,{:.4},{:.4},{:.4},{:.4}",
        agg.sd.auc, agg.sd.msr, agg.sd.crtp, agg.sd.final_success
    );
    Ok(())
}

/// Build the policy selected by `--policy`.
fn build_policy<'n>(
    kind: &str,
    net: Option<&'n QNet>,
    cfg: &ExperimentConfig,
    fixed_action: usize,
    epsilon: f64,
) -> anyhow::Result<Box<dyn Policy + 'n>> {
    match kind {
        "checkpoint" => {
            let net = net.ok_or_else(|| anyhow!("--policy checkpoint needs --checkpoint"))?;
            Ok(Box::new(QnetPolicy {
                net,
                semantics: cfg.trainer.semantics(),
                apf: cfg.apf,
                epsilon,
            }))
        }
        "random" => {
            let net = net.ok_or_else(|| anyhow!("--policy random needs a network"))?;
            Ok(Box::new(QnetPolicy {
                net,
                semantics: cfg.trainer.semantics(),
                apf: cfg.apf,
                epsilon: 1.0,
            }))
        }
        "fixed" => Ok(Box::new(FixedApfPolicy {
            action: fixed_action,
            apf: cfg.apf,
        })),
        other => bail!("unknown policy kind '{other}'"),
    }
}

/// Load the checkpoint for `--policy checkpoint`, or initialize a fresh
/// seeded network for `--policy random`.
fn policy_net(
    kind: &str,
    checkpoint: Option<&PathBuf>,
    cfg: &ExperimentConfig,
    seed: u64,
) -> anyhow::Result<Option<QNet>> {
    match kind {
        "checkpoint" => {
            let path = checkpoint.ok_or_else(|| anyhow!("--checkpoint required"))?;
            Ok(Some(QNet::load_auto(path)?))
        }
        "random" => {
            let mut qnet_cfg = cfg.qnet.clone();
            qnet_cfg.mode = cfg.trainer.algorithm.embed_mode();
            qnet_cfg.n_actions = trainer::N_ACTIONS;
            Ok(Some(QNet::init(
                qnet_cfg,
                trainer::derive_seed(seed, 424242),
            )?))
        }
        _ => Ok(None),
    }
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let cfg = args.config.load()?;
    let episodes = args.episodes.unwrap_or(cfg.trainer.eval_episodes);
    let net = policy_net(&args.policy, args.checkpoint.as_ref(), &cfg, args.seed)?;

    let arena_kinds: Vec<ArenaKind> = match &args.arena {
        Some(list) => list
            .split(',')
            .map(|t| ArenaKind::parse(t.trim()).map_err(anyhow::Error::from))
            .collect::<anyhow::Result<_>>()?,
        None => vec![cfg.arena],
    };
    let pursuer_counts: Vec<usize> = match &args.pursuers {
        Some(list) => list
            .split(',')
            .map(|t| t.trim().parse::<usize>().context("bad pursuer count"))
            .collect::<anyhow::Result<_>>()?,
        None => vec![cfg.sim.n_pursuers],
    };

    // Base scenario: the config's own arena and swarm size.
    let base_arena = cfg.build_arena()?;
    let base_setup = TrainSetup {
        sim: cfg.sim,
        arena: &base_arena,
        evader: cfg.evader,
        qnet: cfg.qnet.clone(),
        apf: cfg.apf,
        trainer: cfg.trainer.clone(),
    };
    let mut base_policy = build_policy(&args.policy, net.as_ref(), &cfg, args.fixed_action, 0.0)?;
    let base = evaluate_policy(&base_setup, base_policy.as_mut(), episodes, args.seed)?;

    let mut table =
        String::from("scenario,episodes,success_rate,collision_rate,mean_return,relative\n");
    let _ = writeln!(
        table,
        "base:{}x{},{},{},{},{},1",
        cfg.arena.as_str(),
        cfg.sim.n_pursuers,
        episodes,
        base.success_rate,
        base.collision_rate,
        base.mean_return
    );
    for kind in &arena_kinds {
        let mut scen_cfg = cfg.clone();
        scen_cfg.arena = *kind;
        let arena = scen_cfg.build_arena()?;
        for &n in &pursuer_counts {
            let mut setup = base_setup.clone();
            setup.arena = &arena;
            setup.sim.n_pursuers = n;
            let mut policy =
                build_policy(&args.policy, net.as_ref(), &cfg, args.fixed_action, 0.0)?;
            let stats = evaluate_policy(&setup, policy.as_mut(), episodes, args.seed)?;
            let relative = if base.success_rate > 0.0 {
                format!("{}", stats.success_rate / base.success_rate)
            } else {
                "undefined".to_string()
            };
            let _ = writeln!(
                table,
                "{}x{},{},{},{},{},{}",
                kind.as_str(),
                n,
                episodes,
                stats.success_rate,
                stats.collision_rate,
                stats.mean_return,
                relative
            );
        }
    }
    print!("{table}");
    if let Some(out) = args.out {
        let out = resolve_out(&out);
        std::fs::write(&out, table)?;
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_rollout(args: RolloutArgs) -> anyhow::Result<()> {
    let cfg = args.config.load()?;
    let arena = cfg.build_arena()?;
    let sim = Sim::new(&arena, cfg.sim);
    let net = policy_net(&args.policy, args.checkpoint.as_ref(), &cfg, args.seed)?;
    let mut policy = build_policy(&args.policy, net.as_ref(), &cfg, args.fixed_action, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let log = run_episode(&sim, policy.as_mut(), &cfg.evader, &mut rng)?;
    let out = resolve_out(&args.out);
    log.save_opts(&out, cfg.hash(), args.seed, args.verbose)?;
    println!(
        "episode: terminal={} steps={} mean_return={:.3}",
        log.terminal.as_str(),
        log.steps,
        log.mean_return()
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// Load a run's final checkpoint, verifying its embedded provenance.
fn load_run_net(run_dir: &Path, expected_hash: u64, seed: u64) -> anyhow::Result<QNet> {
    let path = artifacts::final_checkpoint_path(run_dir, seed);
    match QNet::checkpoint_meta(&path)? {
        Some((hash, s)) if hash == expected_hash && s == seed => {}
        Some((hash, _)) => bail!(
            "{}: checkpoint hash {hash:016x} does not match run config {expected_hash:016x}",
            path.display()
        ),
        None => bail!("{}: checkpoint lacks provenance metadata", path.display()),
    }
    Ok(QNet::load_auto(&path)?)
}

fn cmd_analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let run_dir = resolve_out(&args.run);
    let loaded = artifacts::load_run(&run_dir)?;
    let cfg = &loaded.config;
    let arena = cfg.build_arena()?;
    let analysis_dir = run_dir.join("analysis");
    std::fs::create_dir_all(&analysis_dir)?;

    match args.kind {
        AnalyzeKind::Ahd {
            states,
            sizes,
            seed,
        } => {
            let parts: Vec<usize> = sizes
                .split(',')
                .map(|t| t.trim().parse::<usize>().context("bad swarm size"))
                .collect::<anyhow::Result<_>>()?;
            if parts.len() != 2 {
                bail!("--sizes expects exactly two swarm sizes");
            }
            let mut table = format!("# config_hash={:016x}\nseed,ahd\n", loaded.config_hash);
            let mut values = Vec::new();
            for &s in &loaded.seeds {
                let net = load_run_net(&run_dir, loaded.config_hash, s)?;
                let mut rng_a = ChaCha8Rng::seed_from_u64(trainer::derive_seed(seed, s));
                let mut rng_b = ChaCha8Rng::seed_from_u64(trainer::derive_seed(seed, s ^ 0xb));
                let a = analysis::collect_embeddings(
                    &net, &arena, &cfg.sim, states, parts[0], &mut rng_a,
                )?;
                let b = analysis::collect_embeddings(
                    &net, &arena, &cfg.sim, states, parts[1], &mut rng_b,
                )?;
                let ahd = analysis::averaged_hausdorff(&a, &b)?;
                values.push(ahd);
                let _ = writeln!(table, "{s},{ahd}");
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let _ = writeln!(table, "mean,{mean}");
            print!("{table}");
            std::fs::write(analysis_dir.join("ahd.csv"), table)?;
        }
        AnalyzeKind::Events {
            critics,
            episodes,
            seed,
        } => {
            let critics_dir = resolve_out(&critics);
            let critic_run = artifacts::load_run(&critics_dir)?;
            let mut critic_nets = Vec::new();
            for &s in &critic_run.seeds {
                critic_nets.push(load_run_net(&critics_dir, critic_run.config_hash, s)?);
            }
            let sim = Sim::new(&arena, cfg.sim);
            let mut states = Vec::new();
            for &s in &loaded.seeds {
                let net = load_run_net(&run_dir, loaded.config_hash, s)?;
                let mut policy = QnetPolicy {
                    net: &net,
                    semantics: cfg.trainer.semantics(),
                    apf: cfg.apf,
                    epsilon: 0.0,
                };
                for ep in 0..episodes {
                    let mut rng = ChaCha8Rng::seed_from_u64(trainer::derive_seed(
                        seed,
                        s.wrapping_mul(10_000) + u64::from(ep),
                    ));
                    let log = run_episode(&sim, &mut policy, &cfg.evader, &mut rng)?;
                    states.extend(analysis::states_from_log(&log));
                }
            }
            let freqs = analysis::event_frequencies(&states, &critic_nets, &sim)?;
            let mut table = format!(
                "# config_hash={:016x} states={}\ncritic,e1,e2\n",
                loaded.config_hash,
                states.len()
            );
            for (i, (e1, e2)) in freqs.iter().enumerate() {
                let _ = writeln!(table, "critic{},{e1},{e2}", i + 1);
            }
            print!("{table}");
            std::fs::write(analysis_dir.join("events.csv"), table)?;
        }
        AnalyzeKind::Formation {
            alpha0,
            episodes,
            seed,
        } => {
            let thresholds: Vec<f64> = alpha0
                .split(',')
                .map(|t| t.trim().parse::<f64>().context("bad alpha0"))
                .collect::<anyhow::Result<_>>()?;
            if thresholds.iter().any(|a| !a.is_finite() || *a <= 0.5) {
                bail!("every --alpha0 must exceed 0.5");
            }
            let sim = Sim::new(&arena, cfg.sim);
            // Harvest states once per seed, then sweep the thresholds.
            let mut harvested: Vec<(u64, Vec<analysis::AttributedState>)> = Vec::new();
            for &s in &loaded.seeds {
                let net = load_run_net(&run_dir, loaded.config_hash, s)?;
                let mut policy = QnetPolicy {
                    net: &net,
                    semantics: cfg.trainer.semantics(),
                    apf: cfg.apf,
                    epsilon: 0.0,
                };
                let mut states = Vec::new();
                for ep in 0..episodes {
                    let mut rng = ChaCha8Rng::seed_from_u64(trainer::derive_seed(
                        seed,
                        s.wrapping_mul(10_000) + u64::from(ep),
                    ));
                    let log = run_episode(&sim, &mut policy, &cfg.evader, &mut rng)?;
                    states.extend(analysis::states_from_log(&log));
                }
                harvested.push((s, states));
            }
            let mut table = format!(
                "# config_hash={:016x}\nalpha0,seed,selected,skipped,frac_attention_better\n",
                loaded.config_hash
            );
            for &alpha0 in &thresholds {
                let mut total_selected = 0usize;
                let mut total_better = 0usize;
                for (s, states) in &harvested {
                    let mut selected = 0usize;
                    let mut skipped = 0usize;
                    let mut better = 0usize;
                    for (world, i, alpha) in states {
                        let obs = sim.observe(world, *i)?;
                        if !analysis::formation_state_selected(&obs, alpha, cfg.sim.d_c, alpha0) {
                            skipped += 1;
                            continue;
                        }
                        let cmp = analysis::compare_rules(&sim, world, *i, alpha, &cfg.apf)?;
                        selected += 1;
                        if cmp.s_apf_attention > cmp.s_apf {
                            better += 1;
                        }
                    }
                    let frac = if selected > 0 {
                        better as f64 / selected as f64
                    } else {
                        f64::NAN
                    };
                    total_selected += selected;
                    total_better += better;
                    let _ = writeln!(table, "{alpha0},{s},{selected},{skipped},{frac}");
                }
                let pooled = if total_selected > 0 {
                    total_better as f64 / total_selected as f64
                } else {
                    f64::NAN
                };
                let _ = writeln!(table, "{alpha0},pooled,{total_selected},,{pooled}");
            }
            print!("{table}");
            std::fs::write(analysis_dir.join("formation.csv"), table)?;
        }
        AnalyzeKind::Klcorr { c_grad } => {
            let mut table = format!(
                "# config_hash={:016x} c_grad={c_grad}\nseed,pearson,p_value,n_points\n",
                loaded.config_hash
            );
            for &s in &loaded.seeds {
                let (points, hash, _) = artifacts::read_kl_return(
                    &artifacts::seed_dir(&run_dir, s).join("klreturn.csv"),
                )?;
                if hash != loaded.config_hash {
                    bail!("seed {s}: klreturn hash mismatch");
                }
                match analysis::kl_reward_correlation(&points, c_grad) {
                    Ok(corr) => {
                        let _ = writeln!(
                            table,
                            "{s},{},{},{}",
                            corr.pearson, corr.p_value, corr.n_points
                        );
                    }
                    Err(e) => {
                        let _ = writeln!(table, "{s},undefined,,0 # {e}");
                    }
                }
            }
            print!("{table}");
            std::fs::write(analysis_dir.join("klcorr.csv"), table)?;
        }
    }
    Ok(())
}
