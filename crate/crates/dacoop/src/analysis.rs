//! Quantitative diagnostics over trained policies: learning-curve metrics,
//! embedding-drift distances across swarm sizes, attention-event
//! frequencies, formation-score comparisons between the plain and
//! attention-weighted controllers, and the correlation between KL spikes and
//! return drops during training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::apf::{self, ApfContext};
use crate::arena::Arena;
use crate::diffgraph::Tensor;
use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Vec2};
use crate::qnet::QNet;
use crate::sim::TerminalKind;
use crate::sim::{EpisodeLog, Observation, RobotState, Sim, SimParams, WorldState};
use crate::trainer::{
    action_to_params, evaluate_net, ApfSettings, CurvePoint, EpisodeStat, EvalStats, KlReturnPoint,
    TrainSetup, N_ACTIONS,
};

/// Rows of integrated embeddings, one per (state, pursuer).
pub type EmbeddingSet = Tensor;

// --- learning-curve metrics ---------------------------------------------------

/// Mean checkpoint success rate.
pub fn auc(curve: &[CurvePoint]) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::Analysis("auc of an empty curve".into()));
    }
    Ok(curve.iter().map(|p| p.success_rate).sum::<f64>() / curve.len() as f64)
}

/// Maximal checkpoint success rate.
pub fn msr(curve: &[CurvePoint]) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::Analysis("msr of an empty curve".into()));
    }
    Ok(curve
        .iter()
        .map(|p| p.success_rate)
        .fold(f64::MIN, f64::max))
}

/// Collision rate over the training episodes. With collision-terminated
/// episodes this is the fraction ending in a collision; otherwise the
/// fraction that experienced one.
pub fn crtp(episodes: &[EpisodeStat], collision_terminates: bool) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    let hits = episodes
        .iter()
        .filter(|e| {
            if collision_terminates {
                e.kind == TerminalKind::Collision
            } else {
                e.collided
            }
        })
        .count();
    hits as f64 / episodes.len() as f64
}

// --- embedding collection and averaged Hausdorff distance ----------------------

/// Sample collision-free uniform states of the given swarm size and record
/// the integrated embedding of every pursuer in every state.
pub fn collect_embeddings(
    net: &QNet,
    arena: &Arena,
    sim_params: &SimParams,
    n_states: usize,
    swarm_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EmbeddingSet> {
    let mut params = *sim_params;
    params.n_pursuers = swarm_size;
    let sim = Sim::new(arena, params);
    let width = net.cfg.embed_dim;
    let mut out = Tensor::zeros(n_states * swarm_size, width);
    let mut row = 0usize;
    for _ in 0..n_states {
        let world = sample_state(arena, &params, swarm_size, rng)?;
        let observations: Vec<Observation> = (0..swarm_size)
            .map(|i| sim.observe(&world, i))
            .collect::<Result<_>>()?;
        let refs: Vec<&Observation> = observations.iter().collect();
        let batch = net.forward_batch(&refs)?;
        for i in 0..swarm_size {
            out.data[row * width..(row + 1) * width].copy_from_slice(batch.integrated.row(i));
            row += 1;
        }
    }
    Ok(out)
}

/// Uniform collision-free state: every robot clear of obstacles, pursuers
/// pairwise separated, evader not yet captured.
pub fn sample_state(
    arena: &Arena,
    params: &SimParams,
    swarm_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<WorldState> {
    const MAX_ATTEMPTS: usize = 10_000;
    let sample_pos = |rng: &mut ChaCha8Rng| {
        Vec2::new(
            rng.gen_range(0.0..arena.width),
            rng.gen_range(0.0..arena.height),
        )
    };
    let mut pursuers: Vec<RobotState> = Vec::with_capacity(swarm_size);
    for _ in 0..swarm_size {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let pos = sample_pos(rng);
            if !arena.is_clear(pos, params.d_s) {
                continue;
            }
            if pursuers
                .iter()
                .any(|r| r.position.dist(pos) < 2.0 * params.d_s)
            {
                continue;
            }
            let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            pursuers.push(RobotState {
                position: pos,
                heading,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Spawn("state sampling exhausted attempts".into()));
        }
    }
    for _ in 0..MAX_ATTEMPTS {
        let pos = sample_pos(rng);
        if !arena.is_clear(pos, params.d_s) {
            continue;
        }
        if pursuers.iter().any(|r| r.position.dist(pos) < params.d_c) {
            continue;
        }
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        return Ok(WorldState {
            pursuers,
            evader: RobotState {
                position: pos,
                heading,
            },
            step_index: 0,
        });
    }
    Err(Error::Spawn("evader sampling exhausted attempts".into()))
}

/// Mean over rows of `b` of the distance to the nearest row of `a`.
/// Not symmetric in its arguments.
pub fn averaged_hausdorff(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.cols != b.cols {
        return Err(Error::Analysis(format!(
            "embedding widths differ: {} vs {}",
            a.cols, b.cols
        )));
    }
    if a.rows == 0 || b.rows == 0 {
        return Err(Error::Analysis("empty embedding set".into()));
    }
    let width = a.cols;
    let mut total = 0.0;
    for bi in 0..b.rows {
        let brow = b.row(bi);
        let mut best = f64::INFINITY;
        for ai in 0..a.rows {
            let arow = a.row(ai);
            // Partial-sum early exit keeps the scan cheap once a close
            // candidate is found.
            let mut acc = 0.0;
            let mut k = 0;
            while k < width {
                let end = (k + 16).min(width);
                for j in k..end {
                    let d = arow[j] - brow[j];
                    acc += d * d;
                }
                if acc >= best {
                    break;
                }
                k = end;
            }
            if acc < best {
                best = acc;
            }
        }
        total += best.sqrt();
    }
    Ok(total / b.rows as f64)
}

// --- attention events -----------------------------------------------------------

/// The full world at one step plus one pursuer's attention over its
/// observed neighbors.
pub type AttributedState = (WorldState, usize, Vec<f64>);

/// States replayed from an episode log.
pub fn states_from_log(log: &EpisodeLog) -> Vec<AttributedState> {
    let mut out = Vec::new();
    let mut by_step: std::collections::BTreeMap<u32, Vec<&crate::sim::StepRow>> =
        std::collections::BTreeMap::new();
    for row in &log.rows {
        by_step.entry(row.step).or_default().push(row);
    }
    for rows in by_step.values() {
        let mut pursuers: Vec<(i32, RobotState)> = Vec::new();
        let mut evader = None;
        let mut attention: Vec<(i32, Vec<f64>)> = Vec::new();
        for row in rows {
            let state = RobotState {
                position: Vec2::new(row.x, row.y),
                heading: row.heading,
            };
            if row.robot < 0 {
                evader = Some(state);
            } else {
                pursuers.push((row.robot, state));
                attention.push((row.robot, row.attention.clone()));
            }
        }
        let Some(evader) = evader else { continue };
        pursuers.sort_by_key(|(id, _)| *id);
        attention.sort_by_key(|(id, _)| *id);
        let world = WorldState {
            pursuers: pursuers.into_iter().map(|(_, s)| s).collect(),
            evader,
            step_index: 0,
        };
        for (id, alpha) in attention {
            out.push((world.clone(), id as usize, alpha));
        }
    }
    out
}

/// Frequencies of the two attention events for each critic: whether the
/// neighbor whose removal moves the critic's state value more is also the
/// one with the larger attention score.
pub fn event_frequencies(
    states: &[AttributedState],
    critics: &[QNet],
    sim: &Sim<'_>,
) -> Result<Vec<(f64, f64)>> {
    if critics.is_empty() {
        return Err(Error::Analysis("no critics supplied".into()));
    }
    let mut results = Vec::with_capacity(critics.len());
    for critic in critics {
        let mut e1 = 0u64;
        let mut e2 = 0u64;
        for (world, i, alpha) in states {
            let obs = sim.observe(world, *i)?;
            if obs.neighbors.len() < 2 || obs.neighbors.len() != alpha.len() {
                continue;
            }
            let v_full = critic.state_value(&obs)?;
            // Value shift from deleting each neighbor.
            let mut shifts = Vec::with_capacity(obs.neighbors.len());
            for j in 0..obs.neighbors.len() {
                let mut reduced = obs.clone();
                reduced.neighbors.remove(j);
                reduced.neighbor_ids.remove(j);
                shifts.push((critic.state_value(&reduced)? - v_full).abs());
            }
            for j in 0..shifts.len() {
                for k in j + 1..shifts.len() {
                    let product = (shifts[j] - shifts[k]) * (alpha[j] - alpha[k]);
                    if product > 0.0 {
                        e1 += 1;
                    } else {
                        e2 += 1;
                    }
                }
            }
        }
        let total = (e1 + e2).max(1) as f64;
        results.push((e1 as f64 / total, e2 as f64 / total));
    }
    Ok(results)
}

// --- formation scores -------------------------------------------------------------

/// Encirclement potential of pursuer `i`: the sum over teammates of the dot
/// product of evader-relative positions. Needs at least two pursuers.
pub fn formation_score(world: &WorldState, i: usize) -> f64 {
    let p_e = world.evader.position;
    let own = world.pursuers[i].position - p_e;
    world
        .pursuers
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, r)| own.dot(r.position - p_e))
        .sum()
}

/// Selection rule for the formation comparison: exactly two observed
/// neighbors, a dominant attention score on the farther one, and the evader
/// within `5 * d_c`.
pub fn formation_state_selected(obs: &Observation, alpha: &[f64], d_c: f64, alpha0: f64) -> bool {
    if obs.neighbors.len() != 2 || alpha.len() != 2 {
        return false;
    }
    let (j, k) = if alpha[0] >= alpha[1] { (0, 1) } else { (1, 0) };
    alpha[j] > alpha0
        && alpha[k] < 1.0 - alpha0
        && obs.d_e < 5.0 * d_c
        && obs.neighbors[j].0 > obs.neighbors[k].0
}

/// Formation-score sums after advancing pursuer `i` one step under each of
/// the 24 parameter pairs, with plain and attention-weighted inter-robot
/// forces respectively.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleComparison {
    pub s_apf: f64,
    pub s_apf_attention: f64,
    pub addends: usize,
}

pub fn compare_rules(
    sim: &Sim<'_>,
    world: &WorldState,
    i: usize,
    alpha: &[f64],
    apf_settings: &ApfSettings,
) -> Result<RuleComparison> {
    let obs = sim.observe(world, i)?;
    if obs.neighbors.len() != alpha.len() {
        return Err(Error::Analysis(format!(
            "attention length {} vs {} neighbors",
            alpha.len(),
            obs.neighbors.len()
        )));
    }
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
    let advance = |desired: f64| -> WorldState {
        let p = &sim.params;
        let mut next = world.clone();
        let robot = &mut next.pursuers[i];
        let turn = wrap_angle(desired - robot.heading).clamp(-p.max_turn, p.max_turn);
        robot.heading = wrap_angle(robot.heading + turn);
        robot.position = robot.position + Vec2::from_angle(robot.heading) * (p.v_p * p.dt);
        next
    };
    let mut s_apf = 0.0;
    let mut s_apf_attention = 0.0;
    for action in 0..N_ACTIONS {
        let params = action_to_params(action, apf_settings)?;
        let (h_plain, _) = apf::desired_heading(&ctx, &params, None)?;
        let (h_att, _) = apf::desired_heading(&ctx, &params, Some(alpha))?;
        s_apf += formation_score(&advance(h_plain), i);
        s_apf_attention += formation_score(&advance(h_att), i);
    }
    Ok(RuleComparison {
        s_apf,
        s_apf_attention,
        addends: N_ACTIONS,
    })
}

// --- KL / return correlation ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlCorrelation {
    pub pearson: f64,
    pub p_value: f64,
    pub n_points: usize,
}

/// Forward-difference gradients of the per-step KL and return series,
/// filtered to steps where the KL gradient exceeds `c_grad`, then Pearson
/// correlation with a two-sided p-value.
pub fn kl_reward_correlation(log: &[KlReturnPoint], c_grad: f64) -> Result<KlCorrelation> {
    if log.len() < 2 {
        return Err(Error::Analysis("log too short for gradients".into()));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for w in log.windows(2) {
        let dd = w[1].kl - w[0].kl;
        let dr = w[1].episode_return - w[0].episode_return;
        if dd > c_grad {
            xs.push(dd);
            ys.push(dr);
        }
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::Analysis(format!(
            "only {n} points survive the gradient threshold {c_grad}"
        )));
    }
    let pearson = pearson_correlation(&xs, &ys)?;
    let dof = (n - 2) as f64;
    let denom = (1.0 - pearson * pearson).max(1e-15);
    let t = pearson * (dof / denom).sqrt();
    let p_value = student_t_two_sided_p(t, dof);
    Ok(KlCorrelation {
        pearson,
        p_value,
        n_points: n,
    })
}

pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Analysis("pearson needs paired samples".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Analysis("degenerate variance in pearson".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Two-sided p-value of a Student-t statistic with `dof` degrees of freedom,
/// via the regularized incomplete beta function.
pub fn student_t_two_sided_p(t: f64, dof: f64) -> f64 {
    incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.5203681218851,
        -1259.1392167224028,
        771.3234287776531,
        -176.6150291621406,
        12.507343278686905,
        -0.1385710952657201,
        9.984369578019572e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = COEFFS[0];
        let t = x + 7.5;
        for (i, c) in COEFFS.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

/// Regularized incomplete beta I_x(a, b) by continued fraction.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    // Lentz's algorithm.
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-14;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

// --- generalization ----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GeneralizationRow {
    pub scenario: String,
    pub stats: EvalStats,
    /// Success rate divided by the training-scenario success rate; absent
    /// when the training success rate is zero.
    pub relative: Option<f64>,
}

/// Evaluate a policy across scenarios and report performance relative to the
/// training scenario.
pub fn generalization_suite(
    base: &TrainSetup<'_>,
    net: &QNet,
    scenarios: &[(String, &Arena, usize)],
    episodes: u32,
    seed: u64,
) -> Result<(EvalStats, Vec<GeneralizationRow>)> {
    let base_stats = evaluate_net(base, net, episodes, seed)?;
    let mut rows = Vec::with_capacity(scenarios.len());
    for (label, arena, swarm) in scenarios {
        let mut setup = base.clone();
        setup.arena = arena;
        setup.sim.n_pursuers = *swarm;
        let stats = evaluate_net(&setup, net, episodes, seed)?;
        let relative = if base_stats.success_rate > 0.0 {
            Some(stats.success_rate / base_stats.success_rate)
        } else {
            None
        };
        rows.push(GeneralizationRow {
            scenario: label.clone(),
            stats,
            relative,
        });
    }
    Ok((base_stats, rows))
}
