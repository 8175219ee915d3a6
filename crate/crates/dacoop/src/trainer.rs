//! Off-policy training: shared-parameter dueling double DQN over the
//! 24-action parameter space, uniform replay, a hard-synced target network,
//! annealed epsilon-greedy exploration, and a KL regularizer that penalizes
//! attention drift between the online and target networks.
//!
//! All algorithm variants are configuration flags over one loop; the
//! reference mode is single-threaded and bit-deterministic per seed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::apf::{self, ApfContext, ApfParams, ForceBreakdown};
use crate::arena::Arena;
use crate::diffgraph::{AdamState, Graph, Tensor, KL_FLOOR};
use crate::error::{Error, Result};
use crate::evader::{self, EvaderConfig};
use crate::geom::{wrap_angle, Vec2};
use crate::qnet::{argmax, EmbedMode, QNet, QNetConfig};
use crate::sim::{Decision, Observation, Policy, Sim, SimParams, TerminalKind, WorldState};

/// Frozen obstacle-repulsion floor. Calibrated so that at the safe radius
/// the repulsive force outweighs attraction plus the strongest bounded
/// inter-robot force; see [`calibrate_eta_min`].
pub const ETA_MIN_DEFAULT: f64 = 230.0;

/// Algorithm variants; everything is a flag over the same trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Attention embedding + attention-weighted forces + KL regularization.
    DacoopA,
    /// Mean embedding + plain potential-field parameter actions.
    Dacoop,
    /// Mean embedding + raw heading actions.
    Me,
    /// Attention embedding + raw heading actions.
    D3qnAtt,
    /// Attention embedding + plain potential-field parameter actions.
    DacoopAtt,
    /// Attention + weighted forces, with the KL term removed.
    NoKl,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Algorithm> {
        match s.to_ascii_lowercase().as_str() {
            "dacoop-a" => Ok(Algorithm::DacoopA),
            "dacoop" => Ok(Algorithm::Dacoop),
            "me" => Ok(Algorithm::Me),
            "d3qn-att" => Ok(Algorithm::D3qnAtt),
            "dacoop-att" => Ok(Algorithm::DacoopAtt),
            "no-kl" => Ok(Algorithm::NoKl),
            other => Err(Error::InvalidInput(format!("unknown algorithm '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::DacoopA => "dacoop-a",
            Algorithm::Dacoop => "dacoop",
            Algorithm::Me => "me",
            Algorithm::D3qnAtt => "d3qn-att",
            Algorithm::DacoopAtt => "dacoop-att",
            Algorithm::NoKl => "no-kl",
        }
    }

    pub fn embed_mode(&self) -> EmbedMode {
        match self {
            Algorithm::DacoopA | Algorithm::D3qnAtt | Algorithm::DacoopAtt | Algorithm::NoKl => {
                EmbedMode::Attention
            }
            Algorithm::Dacoop | Algorithm::Me => EmbedMode::Mean,
        }
    }

    /// Whether actions parameterize potential-field forces (vs raw headings).
    pub fn apf_actions(&self) -> bool {
        !matches!(self, Algorithm::Me | Algorithm::D3qnAtt)
    }

    /// Whether inter-robot forces are weighted by the learned attention.
    pub fn attention_forces(&self) -> bool {
        matches!(self, Algorithm::DacoopA | Algorithm::NoKl)
    }

    /// KL regularization weight actually applied.
    pub fn effective_c_kl(&self, c_kl: f64) -> f64 {
        if *self == Algorithm::DacoopA {
            c_kl
        } else {
            0.0
        }
    }
}

/// Potential-field constants shared by every policy that drives the
/// controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApfSettings {
    pub lambda_max: f64,
    pub eta_min: f64,
    /// Obstacle influence range, meters.
    pub rho: f64,
    /// Wall following fires below this obstacle distance.
    pub wall_follow_trigger: f64,
}

impl Default for ApfSettings {
    fn default() -> Self {
        ApfSettings {
            lambda_max: 4000.0,
            eta_min: ETA_MIN_DEFAULT,
            rho: 0.8,
            wall_follow_trigger: 0.2,
        }
    }
}

/// Smallest obstacle scale such that at distance `d_s` the repulsion beats
/// the attraction plus the worst-case inter-robot force from `n - 1`
/// neighbors at the closest legal separation.
pub fn calibrate_eta_min(sim: &SimParams, lambda_max: f64, rho: f64) -> f64 {
    let d_min = 2.0 * sim.d_s;
    let per_neighbor = (lambda_max / d_min - 0.5) / d_min;
    let worst_inter = (sim.n_pursuers.saturating_sub(1)) as f64 * per_neighbor;
    let repulse_unit = (1.0 / sim.d_s - 1.0 / rho) / (sim.d_s * sim.d_s);
    (1.0 + worst_inter) / repulse_unit
}

/// How a discrete action index turns into motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSemantics {
    /// 8 lambda values linearly spaced on [0, lambda_max] crossed with
    /// 3 eta values {eta_min, 10 eta_min, 100 eta_min}.
    ApfParams { attention_weighted: bool },
    /// 24 evenly spaced body-frame headings.
    RawHeadings,
}

pub const N_ACTIONS: usize = 24;
const N_LAMBDA: usize = 8;
const N_ETA: usize = 3;

/// Parameter pair for an action index in potential-field mode.
pub fn action_to_params(action: usize, apf: &ApfSettings) -> Result<ApfParams> {
    if action >= N_ACTIONS {
        return Err(Error::InvalidInput(format!("action {action} out of range")));
    }
    let lambda_idx = action / N_ETA;
    let eta_idx = action % N_ETA;
    Ok(ApfParams {
        lambda: apf.lambda_max * lambda_idx as f64 / (N_LAMBDA - 1) as f64,
        eta: apf.eta_min * 10f64.powi(eta_idx as i32),
        rho: apf.rho,
    })
}

/// Body-frame heading offset for an action index in raw-heading mode.
pub fn action_to_heading_offset(action: usize) -> Result<f64> {
    if action >= N_ACTIONS {
        return Err(Error::InvalidInput(format!("action {action} out of range")));
    }
    Ok(-std::f64::consts::PI + action as f64 * std::f64::consts::TAU / N_ACTIONS as f64)
}

/// Desired world-frame heading for one pursuer given its action.
#[allow(clippy::too_many_arguments)]
pub fn action_heading(
    sim: &Sim<'_>,
    world: &WorldState,
    i: usize,
    obs: &Observation,
    action: usize,
    alpha: &[f64],
    semantics: ActionSemantics,
    apf_settings: &ApfSettings,
) -> Result<(f64, Option<ForceBreakdown>)> {
    match semantics {
        ActionSemantics::RawHeadings => {
            let offset = action_to_heading_offset(action)?;
            Ok((wrap_angle(world.pursuers[i].heading + offset), None))
        }
        ActionSemantics::ApfParams { attention_weighted } => {
            let params = action_to_params(action, apf_settings)?;
            let near = sim.arena.nearest_obstacle(world.pursuers[i].position)?;
            let neighbor_positions: Vec<Vec2> = obs
                .neighbor_ids
                .iter()
                .map(|&j| world.pursuers[j].position)
                .collect();
            let ctx = ApfContext {
                position: world.pursuers[i].position,
                heading: world.pursuers[i].heading,
                evader: world.evader.position,
                obstacle_point: near.point,
                obstacle_distance: near.distance,
                obstacle_outward: near.outward,
                neighbors: &neighbor_positions,
                wall_follow_trigger: apf_settings.wall_follow_trigger,
            };
            let weights = if attention_weighted && !alpha.is_empty() {
                Some(alpha)
            } else {
                None
            };
            let (heading, breakdown) = apf::desired_heading(&ctx, &params, weights)?;
            Ok((heading, Some(breakdown)))
        }
    }
}

/// Linear exploration schedule from `eps_start` to `eps_end` at the final
/// exploration episode, constant afterwards.
pub fn epsilon(episode: u32, eps_start: f64, eps_end: f64, final_episode: u32) -> f64 {
    if final_episode == 0 || episode >= final_episode {
        return eps_end;
    }
    let t = f64::from(episode) / f64::from(final_episode);
    eps_start + (eps_end - eps_start) * t
}

/// Categorical KL divergence `sum p ln(p / q)` with `q` floored; degenerate
/// lists (length 0 or 1) give zero.
pub fn kl_divergence(p_target: &[f64], q_online: &[f64]) -> Result<f64> {
    if p_target.len() != q_online.len() {
        return Err(Error::InvalidInput(format!(
            "kl: {} vs {} entries",
            p_target.len(),
            q_online.len()
        )));
    }
    if p_target.len() <= 1 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (&p, &q) in p_target.iter().zip(q_online) {
        if p > 0.0 {
            acc += p * (p / q.max(KL_FLOOR)).ln();
        }
    }
    Ok(acc)
}

/// One replayed interaction.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
}

/// Ring buffer with FIFO eviction and uniform sampling with replacement.
#[derive(Debug, Default)]
pub struct ReplayBuffer {
    storage: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        ReplayBuffer {
            storage: Vec::new(),
            capacity,
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<&Transition>> {
        if self.storage.len() < n {
            return Err(Error::GraphUsage(format!(
                "sampling {n} from a buffer of {}",
                self.storage.len()
            )));
        }
        Ok((0..n)
            .map(|_| &self.storage[rng.gen_range(0..self.storage.len())])
            .collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }
}

/// Trainer hyperparameters. Defaults follow the standard configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub lr: f64,
    pub buffer_capacity: usize,
    pub minibatch: usize,
    pub max_episodes: u32,
    pub final_exploration_episode: u32,
    pub c_kl: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Hard target sync every this many gradient steps.
    pub target_sync_period: u64,
    /// One gradient step per this many environment steps.
    pub update_every: u32,
    /// Minimum buffered transitions before updates begin.
    pub warmup: usize,
    pub double_q: bool,
    /// Evaluation episodes per checkpoint.
    pub eval_episodes: u32,
    /// Checkpoint every this many episodes.
    pub eval_period: u32,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            algorithm: Algorithm::DacoopA,
            gamma: 0.99,
            lr: 3e-5,
            buffer_capacity: 1_000_000,
            minibatch: 128,
            max_episodes: 4000,
            final_exploration_episode: 2000,
            c_kl: 0.05,
            eps_start: 1.0,
            eps_end: 0.05,
            target_sync_period: 1000,
            update_every: 1,
            warmup: 1280,
            double_q: true,
            eval_episodes: 100,
            eval_period: 500,
        }
    }
}

impl TrainerConfig {
    pub fn semantics(&self) -> ActionSemantics {
        if self.algorithm.apf_actions() {
            ActionSemantics::ApfParams {
                attention_weighted: self.algorithm.attention_forces(),
            }
        } else {
            ActionSemantics::RawHeadings
        }
    }
}

/// Everything a training or evaluation run needs besides the seed.
#[derive(Debug, Clone)]
pub struct TrainSetup<'a> {
    pub sim: SimParams,
    pub arena: &'a Arena,
    pub evader: EvaderConfig,
    pub qnet: QNetConfig,
    pub apf: ApfSettings,
    pub trainer: TrainerConfig,
}

impl<'a> TrainSetup<'a> {
    pub fn qnet_config(&self) -> QNetConfig {
        QNetConfig {
            mode: self.trainer.algorithm.embed_mode(),
            n_actions: N_ACTIONS,
            ..self.qnet.clone()
        }
    }
}

// --- policies ---------------------------------------------------------------

/// Network-driven policy with epsilon-greedy action selection. With
/// `epsilon = 1` this is the uniform-random-action baseline (the network
/// still supplies attention scores for the weighted forces).
pub struct QnetPolicy<'n> {
    pub net: &'n QNet,
    pub semantics: ActionSemantics,
    pub apf: ApfSettings,
    pub epsilon: f64,
}

impl Policy for QnetPolicy<'_> {
    fn decide(
        &mut self,
        sim: &Sim<'_>,
        world: &WorldState,
        observations: &[Observation],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Decision>> {
        let refs: Vec<&Observation> = observations.iter().collect();
        let batch = self.net.forward_batch(&refs)?;
        let mut decisions = Vec::with_capacity(observations.len());
        for (i, obs) in observations.iter().enumerate() {
            let explore = rng.gen::<f64>() < self.epsilon;
            let action = if explore {
                rng.gen_range(0..self.net.cfg.n_actions)
            } else {
                argmax(batch.q.row(i))
            };
            let alpha = batch.alpha[i].clone();
            let (heading, breakdown) = action_heading(
                sim,
                world,
                i,
                obs,
                action,
                &alpha,
                self.semantics,
                &self.apf,
            )?;
            decisions.push(Decision {
                action: action as i32,
                attention: alpha,
                heading,
                breakdown,
            });
        }
        Ok(decisions)
    }
}

/// Rule-based baseline: one fixed parameter pair, plain inter-robot forces.
pub struct FixedApfPolicy {
    pub action: usize,
    pub apf: ApfSettings,
}

impl Policy for FixedApfPolicy {
    fn decide(
        &mut self,
        sim: &Sim<'_>,
        world: &WorldState,
        observations: &[Observation],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Decision>> {
        observations
            .iter()
            .enumerate()
            .map(|(i, obs)| {
                let (heading, breakdown) = action_heading(
                    sim,
                    world,
                    i,
                    obs,
                    self.action,
                    &[],
                    ActionSemantics::ApfParams {
                        attention_weighted: false,
                    },
                    &self.apf,
                )?;
                Ok(Decision {
                    action: self.action as i32,
                    attention: Vec::new(),
                    heading,
                    breakdown,
                })
            })
            .collect()
    }
}

// --- TD loss ------------------------------------------------------------------

/// Inputs to one gradient step, precomputed outside the graph so the loss is
/// smooth in the online parameters.
pub struct TdLoss {
    pub graph: Graph,
    pub loss_value: f64,
    pub td_value: f64,
    /// Batch-mean KL between target and online attention (zero in mean mode).
    pub kl_value: f64,
}

/// Constants of one gradient step: bootstrapped targets, chosen actions,
/// and the target network's reference attention. Computed outside the loss
/// graph so the loss is smooth in the online parameters.
pub struct TdInputs {
    pub targets: Tensor,
    pub actions: Vec<usize>,
    /// Flattened per-neighbor reference attention, present in attention
    /// mode.
    pub p_ref: Option<Tensor>,
}

/// Bootstrapped TD targets and reference attention for a minibatch.
///
/// Targets use the double-Q rule by default: the online network chooses the
/// best next action, the target network evaluates it.
pub fn td_inputs(
    online: &QNet,
    target: &QNet,
    batch: &[&Transition],
    gamma: f64,
    double_q: bool,
) -> Result<TdInputs> {
    let obs_refs: Vec<&Observation> = batch.iter().map(|t| &t.obs).collect();
    let next_refs: Vec<&Observation> = batch.iter().map(|t| &t.next_obs).collect();

    let target_next = target.forward_batch(&next_refs)?;
    let chooser_q = if double_q {
        Some(online.forward_batch(&next_refs)?)
    } else {
        None
    };
    let mut targets = Tensor::zeros(batch.len(), 1);
    for (i, t) in batch.iter().enumerate() {
        let mut y = t.reward;
        if !t.done {
            let a_star = match &chooser_q {
                Some(b) => argmax(b.q.row(i)),
                None => argmax(target_next.q.row(i)),
            };
            y += gamma * target_next.q.get(i, a_star);
        }
        targets.data[i] = y;
    }

    let p_ref = if online.cfg.mode == EmbedMode::Attention {
        let target_now = target.forward_batch(&obs_refs)?;
        let total: usize = batch.iter().map(|t| t.obs.neighbors.len()).sum();
        let mut flat = Vec::with_capacity(total);
        for a in &target_now.alpha {
            flat.extend_from_slice(a);
        }
        Some(Tensor::from_rows(total, 1, flat)?)
    } else {
        None
    };

    Ok(TdInputs {
        targets,
        actions: batch.iter().map(|t| t.action).collect(),
        p_ref,
    })
}

/// Build the regularized loss graph over fixed [`TdInputs`]: mean squared
/// TD error plus `c_kl` times the per-sample KL between the reference
/// attention and the online one. Gradients flow only through the online
/// pass on the current observations.
pub fn td_loss_graph(
    online: &QNet,
    params: &crate::diffgraph::ParamSet,
    batch: &[&Transition],
    inputs: &TdInputs,
    c_kl: f64,
) -> Result<TdLoss> {
    let obs_refs: Vec<&Observation> = batch.iter().map(|t| &t.obs).collect();
    let (o_loc, feats, segments) = online.encode(&obs_refs);
    let mut graph = Graph::new();
    let heads = online.build_graph(&mut graph, params, o_loc, feats, segments.clone())?;
    let q_sel = graph.gather_cols(heads.q, inputs.actions.clone())?;
    let t_node = graph.input(inputs.targets.clone());
    let delta = graph.sub(q_sel, t_node)?;
    let sq = graph.square(delta);
    let l_td = graph.mean_all(sq);

    let (loss, kl_value) = match (&inputs.p_ref, heads.alpha) {
        (Some(p_ref), Some(alpha_node)) => {
            let p_node = graph.input(p_ref.clone());
            let kl = graph.segment_kl(p_node, alpha_node, segments)?;
            let kl_mean = graph.mean_all(kl);
            let loss = graph.add_scaled(l_td, kl_mean, c_kl)?;
            (loss, graph.value(kl_mean).item())
        }
        _ => (l_td, 0.0),
    };

    Ok(TdLoss {
        loss_value: graph.value(loss).item(),
        td_value: graph.value(l_td).item(),
        kl_value,
        graph,
    })
}

/// Convenience composition of [`td_inputs`] and [`td_loss_graph`].
pub fn build_td_loss(
    online: &QNet,
    target: &QNet,
    batch: &[&Transition],
    gamma: f64,
    c_kl: f64,
    double_q: bool,
) -> Result<TdLoss> {
    let inputs = td_inputs(online, target, batch, gamma, double_q)?;
    td_loss_graph(online, &online.params, batch, &inputs, c_kl)
}

// Keep the loss node retrievable: it is always the last node pushed.
impl TdLoss {
    pub fn backward(&mut self, online: &mut QNet) -> Result<()> {
        let last = self
            .graph
            .last_node()
            .ok_or_else(|| Error::GraphUsage("empty loss graph".into()))?;
        self.graph.backward(last, &mut online.params)
    }
}

// --- training loop -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub episode: u32,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub mean_return: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStat {
    pub episode: u32,
    pub kind: TerminalKind,
    pub mean_return: f64,
    pub steps: u32,
    pub collided: bool,
}

/// Per-gradient-step record: batch-mean KL and the return of the episode
/// most recently closed before this step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlReturnPoint {
    pub grad_step: u64,
    pub kl: f64,
    pub episode_return: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub episodes: u32,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub mean_return: f64,
    pub mean_steps: f64,
}

/// Everything a finished run produced.
pub struct TrainRun {
    pub curve: Vec<CurvePoint>,
    pub episodes: Vec<EpisodeStat>,
    pub kl_return_log: Vec<KlReturnPoint>,
    pub checkpoints: Vec<(u32, QNet)>,
    pub final_net: QNet,
    pub gradient_steps: u64,
    pub env_steps: u64,
}

/// Callbacks fired as training progresses; implementations persist
/// artifacts or report progress.
pub trait TrainObserver {
    fn on_checkpoint(&mut self, _episode: u32, _net: &QNet, _point: &CurvePoint) -> Result<()> {
        Ok(())
    }
    fn on_episode(&mut self, _stat: &EpisodeStat) -> Result<()> {
        Ok(())
    }
}

/// No-op observer.
pub struct NoopObserver;
impl TrainObserver for NoopObserver {}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a fixed stream tag.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

/// Greedy evaluation of a policy over seeded episodes.
pub fn evaluate_policy(
    setup: &TrainSetup<'_>,
    policy: &mut dyn Policy,
    episodes: u32,
    seed: u64,
) -> Result<EvalStats> {
    let sim = Sim::new(setup.arena, setup.sim);
    let mut captures = 0u32;
    let mut collisions = 0u32;
    let mut total_return = 0.0;
    let mut total_steps = 0.0;
    for ep in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::from(ep)));
        let log = crate::sim::run_episode(&sim, policy, &setup.evader, &mut rng)?;
        if log.terminal == TerminalKind::Capture {
            captures += 1;
        }
        if log.terminal == TerminalKind::Collision {
            collisions += 1;
        }
        total_return += log.mean_return();
        total_steps += f64::from(log.steps);
    }
    let n = f64::from(episodes.max(1));
    Ok(EvalStats {
        episodes,
        success_rate: f64::from(captures) / n,
        collision_rate: f64::from(collisions) / n,
        mean_return: total_return / n,
        mean_steps: total_steps / n,
    })
}

/// Evaluate a trained network greedily.
pub fn evaluate_net(
    setup: &TrainSetup<'_>,
    net: &QNet,
    episodes: u32,
    seed: u64,
) -> Result<EvalStats> {
    let mut policy = QnetPolicy {
        net,
        semantics: setup.trainer.semantics(),
        apf: setup.apf,
        epsilon: 0.0,
    };
    evaluate_policy(setup, &mut policy, episodes, seed)
}

/// Run one training job to completion. Deterministic per seed: the same
/// setup and seed reproduce every log record bit-for-bit.
///
/// `diagnostics_dir`, when set, receives a checkpoint if the loss diverges.
pub fn train(
    setup: &TrainSetup<'_>,
    seed: u64,
    observer: &mut dyn TrainObserver,
    diagnostics_dir: Option<&Path>,
) -> Result<TrainRun> {
    let cfg = &setup.trainer;
    let sim = Sim::new(setup.arena, setup.sim);
    let semantics = cfg.semantics();
    let c_kl = cfg.algorithm.effective_c_kl(cfg.c_kl);

    let mut online = QNet::init(setup.qnet_config(), derive_seed(seed, 0))?;
    let mut target = online.clone();
    let mut adam = AdamState::new(&online.params, cfg.lr);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);

    let mut rng_env = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut rng_explore = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut rng_sample = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));

    let mut run = TrainRun {
        curve: Vec::new(),
        episodes: Vec::new(),
        kl_return_log: Vec::new(),
        checkpoints: Vec::new(),
        final_net: online.clone(),
        gradient_steps: 0,
        env_steps: 0,
    };
    let mut last_episode_return = 0.0;

    for episode in 0..=cfg.max_episodes {
        let at_checkpoint = episode % cfg.eval_period == 0 || episode == cfg.max_episodes;
        if at_checkpoint {
            let stats = evaluate_net(
                setup,
                &online,
                cfg.eval_episodes,
                derive_seed(seed, 1000 + u64::from(episode)),
            )?;
            let point = CurvePoint {
                episode,
                success_rate: stats.success_rate,
                collision_rate: stats.collision_rate,
                mean_return: stats.mean_return,
            };
            run.curve.push(point);
            run.checkpoints.push((episode, online.clone()));
            observer.on_checkpoint(episode, &online, &point)?;
        }
        if episode == cfg.max_episodes {
            break;
        }

        let eps = epsilon(
            episode,
            cfg.eps_start,
            cfg.eps_end,
            cfg.final_exploration_episode,
        );
        let mut world = sim.spawn(&mut rng_env)?;
        let n = world.pursuers.len();
        let mut episode_returns = vec![0.0; n];
        let mut collided = false;
        loop {
            let observations: Vec<Observation> = (0..n)
                .map(|i| sim.observe(&world, i))
                .collect::<Result<_>>()?;
            let refs: Vec<&Observation> = observations.iter().collect();
            let batch = online.forward_batch(&refs)?;

            let mut headings = Vec::with_capacity(n);
            let mut actions = Vec::with_capacity(n);
            for (i, obs) in observations.iter().enumerate() {
                let explore = rng_explore.gen::<f64>() < eps;
                let action = if explore {
                    rng_explore.gen_range(0..N_ACTIONS)
                } else {
                    argmax(batch.q.row(i))
                };
                let (heading, _) = action_heading(
                    &sim,
                    &world,
                    i,
                    obs,
                    action,
                    &batch.alpha[i],
                    semantics,
                    &setup.apf,
                )?;
                actions.push(action);
                headings.push(heading);
            }
            let pursuer_positions: Vec<Vec2> = world.pursuers.iter().map(|r| r.position).collect();
            let evader_heading = evader::evader_heading(
                world.evader.position,
                world.evader.heading,
                &pursuer_positions,
                sim.arena,
                &setup.evader,
            )?;
            let outcome = sim.step(&world, &headings, evader_heading)?;
            if outcome.kind == TerminalKind::Collision
                || !sim.collision_parties(&outcome.next)?.is_empty()
            {
                collided = true;
            }
            for i in 0..n {
                episode_returns[i] += outcome.rewards[i];
                buffer.push(Transition {
                    obs: observations[i].clone(),
                    action: actions[i],
                    reward: outcome.rewards[i],
                    next_obs: sim.observe(&outcome.next, i)?,
                    done: outcome.terminal,
                });
            }
            run.env_steps += 1;

            if buffer.len() >= cfg.warmup.max(cfg.minibatch)
                && run.env_steps.is_multiple_of(u64::from(cfg.update_every))
            {
                let minibatch = buffer.sample(&mut rng_sample, cfg.minibatch)?;
                let mut td =
                    build_td_loss(&online, &target, &minibatch, cfg.gamma, c_kl, cfg.double_q)?;
                if !td.loss_value.is_finite() {
                    if let Some(dir) = diagnostics_dir {
                        let _ = online.save(&dir.join("diverged.ckpt"));
                    }
                    return Err(Error::Diverged(format!(
                        "loss {} at gradient step {}",
                        td.loss_value, run.gradient_steps
                    )));
                }
                td.backward(&mut online)?;
                if let Err(e) = adam.step(&mut online.params) {
                    if let Some(dir) = diagnostics_dir {
                        let _ = online.save(&dir.join("diverged.ckpt"));
                    }
                    return Err(e);
                }
                run.gradient_steps += 1;
                run.kl_return_log.push(KlReturnPoint {
                    grad_step: run.gradient_steps,
                    kl: td.kl_value,
                    episode_return: last_episode_return,
                });
                if run.gradient_steps.is_multiple_of(cfg.target_sync_period) {
                    target.params.copy_values_from(&online.params)?;
                }
            }

            world = outcome.next;
            if outcome.terminal {
                let mean_return =
                    episode_returns.iter().sum::<f64>() / episode_returns.len() as f64;
                last_episode_return = mean_return;
                let stat = EpisodeStat {
                    episode,
                    kind: outcome.kind,
                    mean_return,
                    steps: world.step_index,
                    collided,
                };
                run.episodes.push(stat);
                observer.on_episode(&stat)?;
                break;
            }
        }
    }

    run.final_net = online;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::make_boundary_arena;
    use proptest::prelude::*;

    #[test]
    fn action_grid_endpoints_and_spacing() {
        let apf = ApfSettings::default();
        let p0 = action_to_params(0, &apf).unwrap();
        assert_eq!(p0.lambda, 0.0);
        assert_eq!(p0.eta, apf.eta_min);
        let p23 = action_to_params(23, &apf).unwrap();
        assert_eq!(p23.lambda, 4000.0);
        assert!((p23.eta - 100.0 * apf.eta_min).abs() < 1e-9);
        let p3 = action_to_params(3, &apf).unwrap();
        assert!((p3.lambda - 4000.0 / 7.0).abs() < 1e-9);
        assert_eq!(p3.eta, apf.eta_min);
        assert!(action_to_params(24, &apf).is_err());
        // Uniform lambda spacing with endpoints included.
        for pair in 0..7usize {
            let a = action_to_params(pair * 3, &apf).unwrap().lambda;
            let b = action_to_params((pair + 1) * 3, &apf).unwrap().lambda;
            assert!((b - a - 4000.0 / 7.0).abs() < 1e-9);
        }
    }

    #[test]
    fn raw_headings_cover_the_circle() {
        let offsets: Vec<f64> = (0..24)
            .map(|a| action_to_heading_offset(a).unwrap())
            .collect();
        assert!((offsets[0] + std::f64::consts::PI).abs() < 1e-12);
        for w in offsets.windows(2) {
            assert!((w[1] - w[0] - std::f64::consts::TAU / 24.0).abs() < 1e-12);
        }
    }

    #[test]
    fn epsilon_schedule_endpoints() {
        assert_eq!(epsilon(0, 1.0, 0.05, 2000), 1.0);
        assert_eq!(epsilon(2000, 1.0, 0.05, 2000), 0.05);
        assert_eq!(epsilon(4000, 1.0, 0.05, 2000), 0.05);
        assert!((epsilon(1000, 1.0, 0.05, 2000) - 0.525).abs() < 1e-12);
    }

    #[test]
    fn eta_min_default_satisfies_calibration() {
        let sim = SimParams::default();
        let needed = calibrate_eta_min(&sim, 4000.0, 0.8);
        assert!(needed <= ETA_MIN_DEFAULT, "calibrated {needed}");
        assert!(
            ETA_MIN_DEFAULT < needed * 1.1,
            "default too loose: {needed}"
        );
        // The defining inequality, written out.
        let f_r = ETA_MIN_DEFAULT * (1.0 / sim.d_s - 1.0 / 0.8) / (sim.d_s * sim.d_s);
        let d_min = 2.0 * sim.d_s;
        let worst_inter = 2.0 * (4000.0 / d_min - 0.5) / d_min;
        assert!(f_r >= 1.0 + worst_inter);
    }

    #[test]
    fn kl_hand_values() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(kl_divergence(&[1.0], &[1.0]).unwrap(), 0.0);
        assert_eq!(kl_divergence(&[], &[]).unwrap(), 0.0);
        let v = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((v - 0.510825623765991).abs() < 1e-12);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..6);
            let draw = |rng: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        }

        #[test]
        fn epsilon_is_monotone_non_increasing(a in 0u32..3000, b in 0u32..3000) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(epsilon(lo, 1.0, 0.05, 2000) >= epsilon(hi, 1.0, 0.05, 2000));
        }
    }

    #[test]
    fn buffer_evicts_fifo_and_samples_deterministically() {
        let mk = |tag: usize| Transition {
            obs: Observation {
                d_e: tag as f64,
                phi_e: 0.0,
                d_o: 1.0,
                phi_o: 0.0,
                neighbors: vec![],
                neighbor_ids: vec![],
            },
            action: tag % N_ACTIONS,
            reward: 0.0,
            next_obs: Observation {
                d_e: 0.0,
                phi_e: 0.0,
                d_o: 1.0,
                phi_o: 0.0,
                neighbors: vec![],
                neighbor_ids: vec![],
            },
            done: false,
        };
        let mut buf = ReplayBuffer::new(4);
        for tag in 0..5 {
            buf.push(mk(tag));
        }
        assert_eq!(buf.len(), 4);
        // Oldest (tag 0) evicted.
        assert!(buf.iter().all(|t| t.obs.d_e != 0.0));
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let s1: Vec<f64> = buf
            .sample(&mut r1, 3)
            .unwrap()
            .iter()
            .map(|t| t.obs.d_e)
            .collect();
        let s2: Vec<f64> = buf
            .sample(&mut r2, 3)
            .unwrap()
            .iter()
            .map(|t| t.obs.d_e)
            .collect();
        assert_eq!(s1, s2);
        assert!(buf.sample(&mut r1, 5).is_err());
    }

    #[test]
    fn buffer_sampling_is_roughly_uniform() {
        let mk = |tag: usize| Transition {
            obs: Observation {
                d_e: tag as f64,
                phi_e: 0.0,
                d_o: 1.0,
                phi_o: 0.0,
                neighbors: vec![],
                neighbor_ids: vec![],
            },
            action: 0,
            reward: 0.0,
            next_obs: Observation {
                d_e: 0.0,
                phi_e: 0.0,
                d_o: 1.0,
                phi_o: 0.0,
                neighbors: vec![],
                neighbor_ids: vec![],
            },
            done: false,
        };
        let mut buf = ReplayBuffer::new(10);
        for tag in 0..10 {
            buf.push(mk(tag));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 10];
        let draws = 100_000;
        for _ in 0..draws / 10 {
            for t in buf.sample(&mut rng, 10).unwrap() {
                counts[t.obs.d_e as usize] += 1;
            }
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 9 degrees of freedom; 33.7 is far beyond the 99.9th percentile.
        assert!(chi2 < 33.7, "chi2 {chi2}, counts {counts:?}");
    }

    fn tiny_setup(arena: &Arena, algorithm: Algorithm) -> TrainSetup<'_> {
        TrainSetup {
            sim: SimParams::default(),
            arena,
            evader: EvaderConfig::default(),
            qnet: QNetConfig {
                embed_dim: 8,
                hidden: (8, 8),
                ..QNetConfig::default()
            },
            apf: ApfSettings::default(),
            trainer: TrainerConfig {
                algorithm,
                minibatch: 8,
                warmup: 16,
                max_episodes: 2,
                eval_episodes: 1,
                eval_period: 1,
                final_exploration_episode: 2,
                ..TrainerConfig::default()
            },
        }
    }

    fn obs_batch(net: &QNet, seed: u64, k: usize) -> Vec<Transition> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..4)
            .map(|_| {
                let mk_obs = |rng: &mut ChaCha8Rng| Observation {
                    d_e: rng.gen_range(0.1..5.0),
                    phi_e: rng.gen_range(-3.0..3.0),
                    d_o: rng.gen_range(0.1..2.0),
                    phi_o: rng.gen_range(-3.0..3.0),
                    neighbors: (0..k)
                        .map(|_| (rng.gen_range(0.1..2.0), rng.gen_range(-3.0..3.0)))
                        .collect(),
                    neighbor_ids: (0..k).collect(),
                };
                Transition {
                    obs: mk_obs(&mut rng),
                    action: rng.gen_range(0..net.cfg.n_actions),
                    reward: rng.gen_range(-1.0..1.0),
                    next_obs: mk_obs(&mut rng),
                    done: rng.gen_bool(0.2),
                }
            })
            .collect()
    }

    #[test]
    fn kl_term_is_exactly_zero_when_target_equals_online() {
        let cfg = QNetConfig {
            embed_dim: 8,
            hidden: (8, 8),
            ..QNetConfig::default()
        };
        let online = QNet::init(cfg, 5).unwrap();
        let target = online.clone();
        let batch = obs_batch(&online, 11, 2);
        let refs: Vec<&Transition> = batch.iter().collect();
        let td = build_td_loss(&online, &target, &refs, 0.99, 0.05, true).unwrap();
        assert_eq!(td.kl_value, 0.0);
        assert_eq!(td.loss_value, td.td_value);
    }

    #[test]
    fn kl_regularizer_strictly_increases_loss_when_targets_differ() {
        let cfg = QNetConfig {
            embed_dim: 8,
            hidden: (8, 8),
            ..QNetConfig::default()
        };
        let online = QNet::init(cfg.clone(), 6).unwrap();
        let target = QNet::init(cfg, 7).unwrap();
        let batch = obs_batch(&online, 12, 2);
        let refs: Vec<&Transition> = batch.iter().collect();
        let with = build_td_loss(&online, &target, &refs, 0.99, 0.05, true).unwrap();
        let without = build_td_loss(&online, &target, &refs, 0.99, 0.0, true).unwrap();
        assert!(with.kl_value > 0.0);
        assert!(with.loss_value > without.loss_value);
        assert!((with.loss_value - without.loss_value - 0.05 * with.kl_value).abs() < 1e-12);
    }

    #[test]
    fn td_fixed_point_has_zero_loss_at_gamma_zero() {
        let cfg = QNetConfig {
            embed_dim: 8,
            hidden: (8, 8),
            ..QNetConfig::default()
        };
        let online = QNet::init(cfg, 8).unwrap();
        let target = online.clone();
        let mut batch = obs_batch(&online, 13, 0);
        batch.truncate(1);
        // Make the reward equal the current Q(s, a).
        let q = online.q_forward(&batch[0].obs).unwrap();
        batch[0].reward = q.q[batch[0].action];
        batch[0].done = true;
        let refs: Vec<&Transition> = batch.iter().collect();
        let td = build_td_loss(&online, &target, &refs, 0.0, 0.05, true).unwrap();
        assert!(td.td_value.abs() < 1e-18, "td {}", td.td_value);
    }

    #[test]
    fn tiny_training_run_is_deterministic() {
        let arena = make_boundary_arena();
        let setup = tiny_setup(&arena, Algorithm::DacoopA);
        let a = train(&setup, 99, &mut NoopObserver, None).unwrap();
        let b = train(&setup, 99, &mut NoopObserver, None).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.episodes, b.episodes);
        assert_eq!(a.kl_return_log, b.kl_return_log);
        assert_eq!(a.gradient_steps, b.gradient_steps);
        let c = train(&setup, 100, &mut NoopObserver, None).unwrap();
        assert!(a.env_steps != c.env_steps || a.curve != c.curve);
    }

    #[test]
    fn me_variant_disables_attention_and_kl() {
        let arena = make_boundary_arena();
        let setup = tiny_setup(&arena, Algorithm::Me);
        assert_eq!(setup.qnet_config().mode, EmbedMode::Mean);
        assert_eq!(setup.trainer.semantics(), ActionSemantics::RawHeadings);
        assert_eq!(setup.trainer.algorithm.effective_c_kl(0.05), 0.0);
        let run = train(&setup, 3, &mut NoopObserver, None).unwrap();
        assert!(run.kl_return_log.iter().all(|p| p.kl == 0.0));
    }

    #[test]
    fn no_kl_variant_keeps_attention_but_drops_the_penalty() {
        assert_eq!(Algorithm::NoKl.effective_c_kl(0.05), 0.0);
        assert_eq!(Algorithm::NoKl.embed_mode(), EmbedMode::Attention);
        assert!(Algorithm::NoKl.attention_forces());
        assert!(Algorithm::DacoopA.attention_forces());
        assert!(!Algorithm::DacoopAtt.attention_forces());
        assert!(Algorithm::DacoopAtt.apf_actions());
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in [
            Algorithm::DacoopA,
            Algorithm::Dacoop,
            Algorithm::Me,
            Algorithm::D3qnAtt,
            Algorithm::DacoopAtt,
            Algorithm::NoKl,
        ] {
            assert_eq!(Algorithm::parse(a.as_str()).unwrap(), a);
        }
        assert!(Algorithm::parse("maac").is_err());
    }
}
