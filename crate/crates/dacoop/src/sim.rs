//! Episode dynamics: constant-speed kinematics with a steering clamp,
//! partial observability, termination, reward emission, spawning, and the
//! episode log format.
//!
//! An episode is single-threaded and deterministic given its RNG stream;
//! independent episodes may run concurrently on independent worlds.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::apf::ForceBreakdown;
use crate::arena::Arena;
use crate::error::{Error, Result};
use crate::evader::{self, EvaderConfig};
use crate::geom::{angle_diff, wrap_angle, Vec2};

/// Problem-setting parameters. Defaults follow the standard configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    pub n_pursuers: usize,
    /// Capture range, meters.
    pub d_c: f64,
    /// Safe radius, meters.
    pub d_s: f64,
    /// Perception range, meters.
    pub d_p: f64,
    /// Step size, seconds.
    pub dt: f64,
    /// Pursuer speed, m/s.
    pub v_p: f64,
    /// Evader speed, m/s.
    pub v_e: f64,
    /// Task horizon, seconds.
    pub t_max: f64,
    /// Pursuer steering limit per step, radians.
    pub max_turn: f64,
    /// Optional evader steering limit per step, radians.
    pub evader_max_turn: Option<f64>,
    /// Whether a collision ends the episode for everyone.
    pub collision_terminates: bool,
    /// Scale of the approach-shaping reward term.
    pub c_app: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            n_pursuers: 3,
            d_c: 0.2,
            d_s: 0.1,
            d_p: 2.0,
            dt: 0.1,
            v_p: 0.3,
            v_e: 0.6,
            t_max: 100.0,
            max_turn: 30f64.to_radians(),
            evader_max_turn: None,
            collision_terminates: true,
            c_app: 1.0,
        }
    }
}

impl SimParams {
    pub fn max_steps(&self) -> u32 {
        (self.t_max / self.dt).round() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub position: Vec2,
    /// Normalized to (-pi, pi].
    pub heading: f64,
}

/// The global state of the pursuit game.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub pursuers: Vec<RobotState>,
    pub evader: RobotState,
    pub step_index: u32,
}

/// A pursuer's local view: polar evader and nearest-obstacle information in
/// the body frame, plus one `(distance, azimuth)` entry per neighbor within
/// the perception range, ordered by pursuer index.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub d_e: f64,
    pub phi_e: f64,
    pub d_o: f64,
    pub phi_o: f64,
    pub neighbors: Vec<(f64, f64)>,
    /// Pursuer index behind each neighbor entry.
    pub neighbor_ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalKind {
    Running,
    Capture,
    Collision,
    Timeout,
}

impl TerminalKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TerminalKind::Running => "running",
            TerminalKind::Capture => "capture",
            TerminalKind::Collision => "collision",
            TerminalKind::Timeout => "timeout",
        }
    }
}

/// Result of advancing the world by one step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next: WorldState,
    pub rewards: Vec<f64>,
    pub terminal: bool,
    pub kind: TerminalKind,
}

/// Simulator: immutable arena plus problem parameters.
#[derive(Debug, Clone)]
pub struct Sim<'a> {
    pub arena: &'a Arena,
    pub params: SimParams,
}

impl<'a> Sim<'a> {
    pub fn new(arena: &'a Arena, params: SimParams) -> Self {
        Sim { arena, params }
    }

    /// Local observation of pursuer `i`: azimuths are bearings minus the own
    /// heading, wrapped to (-pi, pi]; neighbors are filtered by the
    /// perception range.
    pub fn observe(&self, w: &WorldState, i: usize) -> Result<Observation> {
        let me = &w.pursuers[i];
        let rel = |target: Vec2| {
            let v = target - me.position;
            let d = v.norm();
            let phi = wrap_angle(v.angle() - me.heading);
            (d, phi)
        };
        let (d_e, phi_e) = rel(w.evader.position);
        let near = self.arena.nearest_obstacle(me.position)?;
        let (d_o, phi_o) = if near.distance > 0.0 {
            rel(near.point)
        } else {
            (0.0, wrap_angle((-near.outward).angle() - me.heading))
        };
        let mut neighbors = Vec::new();
        let mut neighbor_ids = Vec::new();
        for (j, other) in w.pursuers.iter().enumerate() {
            if j == i {
                continue;
            }
            let (d, phi) = rel(other.position);
            if d <= self.params.d_p {
                neighbors.push((d, phi));
                neighbor_ids.push(j);
            }
        }
        Ok(Observation {
            d_e,
            phi_e,
            d_o,
            phi_o,
            neighbors,
            neighbor_ids,
        })
    }

    /// Advance every robot one step: headings clamp to the steering limit,
    /// positions advance by `speed * dt`, then termination is evaluated.
    pub fn step(
        &self,
        w: &WorldState,
        desired_headings: &[f64],
        evader_heading: f64,
    ) -> Result<StepOutcome> {
        if desired_headings.len() != w.pursuers.len() {
            return Err(Error::InvalidInput(format!(
                "{} desired headings for {} pursuers",
                desired_headings.len(),
                w.pursuers.len()
            )));
        }
        if desired_headings.iter().any(|h| !h.is_finite()) || !evader_heading.is_finite() {
            return Err(Error::InvalidInput("non-finite desired heading".into()));
        }
        let p = &self.params;
        let mut next = w.clone();
        for (robot, &desired) in next.pursuers.iter_mut().zip(desired_headings) {
            let turn = angle_diff(desired, robot.heading).clamp(-p.max_turn, p.max_turn);
            robot.heading = wrap_angle(robot.heading + turn);
            robot.position = robot.position + Vec2::from_angle(robot.heading) * (p.v_p * p.dt);
        }
        {
            let e = &mut next.evader;
            let turn = match p.evader_max_turn {
                Some(limit) => angle_diff(evader_heading, e.heading).clamp(-limit, limit),
                None => angle_diff(evader_heading, e.heading),
            };
            e.heading = wrap_angle(e.heading + turn);
            e.position = e.position + Vec2::from_angle(e.heading) * (p.v_e * p.dt);
        }
        next.step_index = w.step_index.saturating_add(1);

        let capture = next
            .pursuers
            .iter()
            .any(|r| r.position.dist(next.evader.position) < p.d_c);
        let any_collision = !self.collision_parties(&next)?.is_empty();
        let timeout = f64::from(next.step_index) * p.dt >= p.t_max;

        // Simultaneous capture and collision resolves as capture.
        let kind = if capture {
            TerminalKind::Capture
        } else if any_collision && p.collision_terminates {
            TerminalKind::Collision
        } else if timeout {
            TerminalKind::Timeout
        } else {
            TerminalKind::Running
        };
        let terminal = kind != TerminalKind::Running;

        let rewards = (0..next.pursuers.len())
            .map(|i| self.reward(w, &next, i, kind))
            .collect::<Result<Vec<_>>>()?;

        Ok(StepOutcome {
            next,
            rewards,
            terminal,
            kind,
        })
    }

    /// Pursuers currently violating a separation constraint, either against
    /// another pursuer or against the nearest obstacle.
    pub fn collision_parties(&self, w: &WorldState) -> Result<Vec<usize>> {
        let p = &self.params;
        let n = w.pursuers.len();
        let mut party = vec![false; n];
        for i in 0..n {
            for j in i + 1..n {
                if w.pursuers[i].position.dist(w.pursuers[j].position) < 2.0 * p.d_s {
                    party[i] = true;
                    party[j] = true;
                }
            }
            match self.arena.nearest_obstacle_point(w.pursuers[i].position) {
                Ok((_, d)) if d < p.d_s => party[i] = true,
                Ok(_) => {}
                // Outside the arena counts as an obstacle violation.
                Err(_) => party[i] = true,
            }
        }
        Ok((0..n).filter(|&i| party[i]).collect())
    }

    /// Per-pursuer reward `r_main + r_col + r_app` for the transition
    /// `prev -> next` that ended with `kind`.
    pub fn reward(
        &self,
        prev: &WorldState,
        next: &WorldState,
        i: usize,
        kind: TerminalKind,
    ) -> Result<f64> {
        let p = &self.params;
        let r_main = if kind == TerminalKind::Capture {
            20.0
        } else {
            0.0
        };
        let parties = self.collision_parties(next)?;
        let r_col = if parties.contains(&i) { -20.0 } else { 0.0 };
        let d_prev = prev.pursuers[i].position.dist(prev.evader.position);
        let d_next = next.pursuers[i].position.dist(next.evader.position);
        let r_app = p.c_app * (d_prev - d_next);
        Ok(r_main + r_col + r_app)
    }

    /// Spawn pursuers and the evader uniformly in their bands with clearance
    /// of at least `2 * d_s` from obstacles and from each other.
    pub fn spawn(&self, rng: &mut ChaCha8Rng) -> Result<WorldState> {
        let p = &self.params;
        let margin = 2.0 * p.d_s;
        const MAX_ATTEMPTS: usize = 1000;
        let mut pursuers: Vec<RobotState> = Vec::with_capacity(p.n_pursuers);
        for _ in 0..p.n_pursuers {
            let mut placed = false;
            for _ in 0..MAX_ATTEMPTS {
                let pos = self.arena.pursuer_spawn.sample(rng);
                let clear_of_others = pursuers.iter().all(|r| r.position.dist(pos) >= margin);
                if clear_of_others && self.arena.is_clear(pos, margin) {
                    let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                    pursuers.push(RobotState {
                        position: pos,
                        heading,
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Spawn(format!(
                    "no clear pursuer position after {MAX_ATTEMPTS} attempts"
                )));
            }
        }
        for _ in 0..MAX_ATTEMPTS {
            let pos = self.arena.evader_spawn.sample(rng);
            let clear = self.arena.is_clear(pos, margin)
                && pursuers.iter().all(|r| r.position.dist(pos) >= p.d_c);
            if clear {
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
        }
        Err(Error::Spawn(format!(
            "no clear evader position after {MAX_ATTEMPTS} attempts"
        )))
    }
}

/// What a pursuer policy decided for one robot in one step.
#[derive(Debug, Clone)]
pub struct Decision {
    /// Action index, or -1 when the policy has no discrete action.
    pub action: i32,
    /// Attention scores aligned with the observation's neighbor list; empty
    /// when the policy has none.
    pub attention: Vec<f64>,
    /// Desired world-frame heading handed to the dynamics.
    pub heading: f64,
    /// Force decomposition behind the heading, for verbose logs.
    pub breakdown: Option<ForceBreakdown>,
}

/// A decentralized pursuer policy: maps per-pursuer observations to
/// decisions. Implementations own any network state they need.
pub trait Policy {
    fn decide(
        &mut self,
        sim: &Sim<'_>,
        world: &WorldState,
        observations: &[Observation],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Decision>>;
}

/// One `(step, robot)` record of an episode log. The evader uses robot id
/// -1, action -1, an empty attention list, and zero reward.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: u32,
    pub robot: i32,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub action: i32,
    pub attention: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    /// Present for pursuers driven by potential-field actions.
    pub breakdown: Option<ForceBreakdown>,
}

/// Full per-step record of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub rows: Vec<StepRow>,
    pub terminal: TerminalKind,
    pub steps: u32,
    /// Sum of rewards per pursuer.
    pub returns: Vec<f64>,
    /// Whether any collision geometry occurred at any step.
    pub collided: bool,
}

impl EpisodeLog {
    /// Mean return across pursuers.
    pub fn mean_return(&self) -> f64 {
        if self.returns.is_empty() {
            0.0
        } else {
            self.returns.iter().sum::<f64>() / self.returns.len() as f64
        }
    }
}

/// Roll one episode from a freshly spawned world.
pub fn run_episode(
    sim: &Sim<'_>,
    policy: &mut dyn Policy,
    evader_cfg: &EvaderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeLog> {
    let world = sim.spawn(rng)?;
    run_episode_from(sim, world, policy, evader_cfg, rng)
}

/// Roll one episode from a given initial world. Records pre-move poses, the
/// decisions taken there, and the rewards of the resulting transition.
pub fn run_episode_from(
    sim: &Sim<'_>,
    mut world: WorldState,
    policy: &mut dyn Policy,
    evader_cfg: &EvaderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeLog> {
    let n = world.pursuers.len();
    let mut rows = Vec::new();
    let mut returns = vec![0.0; n];
    let mut collided = false;
    loop {
        let observations = (0..n)
            .map(|i| sim.observe(&world, i))
            .collect::<Result<Vec<_>>>()?;
        let decisions = policy.decide(sim, &world, &observations, rng)?;
        if decisions.len() != n {
            return Err(Error::InvalidInput(format!(
                "policy returned {} decisions for {} pursuers",
                decisions.len(),
                n
            )));
        }
        let pursuer_positions: Vec<Vec2> = world.pursuers.iter().map(|r| r.position).collect();
        let evader_heading = evader::evader_heading(
            world.evader.position,
            world.evader.heading,
            &pursuer_positions,
            sim.arena,
            evader_cfg,
        )?;
        let headings: Vec<f64> = decisions.iter().map(|d| d.heading).collect();
        let outcome = sim.step(&world, &headings, evader_heading)?;
        if !sim.collision_parties(&outcome.next)?.is_empty() {
            collided = true;
        }
        for (i, d) in decisions.iter().enumerate() {
            returns[i] += outcome.rewards[i];
            rows.push(StepRow {
                step: world.step_index,
                robot: i as i32,
                x: world.pursuers[i].position.x,
                y: world.pursuers[i].position.y,
                heading: world.pursuers[i].heading,
                action: d.action,
                attention: d.attention.clone(),
                reward: outcome.rewards[i],
                terminal: outcome.terminal,
                breakdown: d.breakdown,
            });
        }
        rows.push(StepRow {
            step: world.step_index,
            robot: -1,
            x: world.evader.position.x,
            y: world.evader.position.y,
            heading: world.evader.heading,
            action: -1,
            attention: Vec::new(),
            reward: 0.0,
            terminal: outcome.terminal,
            breakdown: None,
        });
        world = outcome.next;
        if outcome.terminal {
            return Ok(EpisodeLog {
                rows,
                terminal: outcome.kind,
                steps: world.step_index,
                returns,
                collided,
            });
        }
    }
}

// --- episode log text format ----------------------------------------------
//
//   # dacoop-episode v1 config_hash=<hex> seed=<n>
//   # terminal=<kind> steps=<n>
//   step,robot,x,y,heading,action,attention,reward,terminal
//   0,0,1.2,0.5,0.1,17,0.25;0.75,0.032,0
//   ...
//
// One row per (step, robot); robot -1 is the evader; the attention field
// joins per-neighbor scores with ';' and may be empty. Verbose logs append
// seven force-breakdown columns (attract x/y, repulse x/y, inter x/y, and
// the wall-following flag), empty for rows without a breakdown.

const EPISODE_MAGIC: &str = "# dacoop-episode v1";

impl EpisodeLog {
    pub fn to_text(&self, config_hash: u64, seed: u64) -> String {
        self.to_text_opts(config_hash, seed, false)
    }

    /// Serialize the log; `verbose` appends the force-breakdown columns.
    pub fn to_text_opts(&self, config_hash: u64, seed: u64, verbose: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{EPISODE_MAGIC} config_hash={config_hash:016x} seed={seed}"
        );
        let _ = writeln!(
            s,
            "# terminal={} steps={}",
            self.terminal.as_str(),
            self.steps
        );
        let base = "step,robot,x,y,heading,action,attention,reward,terminal";
        if verbose {
            let _ = writeln!(s, "{base},fa_x,fa_y,fr_x,fr_y,fin_x,fin_y,wall_following");
        } else {
            let _ = writeln!(s, "{base}");
        }
        for r in &self.rows {
            let attention = r
                .attention
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join(";");
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.robot,
                r.x,
                r.y,
                r.heading,
                r.action,
                attention,
                r.reward,
                u8::from(r.terminal)
            );
            if verbose {
                match &r.breakdown {
                    Some(b) => {
                        let _ = write!(
                            s,
                            ",{},{},{},{},{},{},{}",
                            b.f_attract.x,
                            b.f_attract.y,
                            b.f_repulse.x,
                            b.f_repulse.y,
                            b.f_inter.x,
                            b.f_inter.y,
                            u8::from(b.wall_following_active)
                        );
                    }
                    None => {
                        let _ = write!(s, ",,,,,,,");
                    }
                }
            }
            let _ = writeln!(s);
        }
        s
    }

    pub fn save(&self, path: &Path, config_hash: u64, seed: u64) -> Result<()> {
        std::fs::write(path, self.to_text(config_hash, seed))?;
        Ok(())
    }

    pub fn save_opts(&self, path: &Path, config_hash: u64, seed: u64, verbose: bool) -> Result<()> {
        std::fs::write(path, self.to_text_opts(config_hash, seed, verbose))?;
        Ok(())
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<(EpisodeLog, u64)> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut config_hash = 0u64;
        let mut terminal = TerminalKind::Running;
        let mut steps = 0u32;
        let mut rows = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('#') {
                for token in line.trim_start_matches('#').split_whitespace() {
                    if let Some(v) = token.strip_prefix("config_hash=") {
                        config_hash = u64::from_str_radix(v, 16)
                            .map_err(|_| err(lineno, format!("bad config_hash '{v}'")))?;
                    } else if let Some(v) = token.strip_prefix("terminal=") {
                        terminal = match v {
                            "capture" => TerminalKind::Capture,
                            "collision" => TerminalKind::Collision,
                            "timeout" => TerminalKind::Timeout,
                            "running" => TerminalKind::Running,
                            _ => return Err(err(lineno, format!("bad terminal '{v}'"))),
                        };
                    } else if let Some(v) = token.strip_prefix("steps=") {
                        steps = v
                            .parse()
                            .map_err(|_| err(lineno, format!("bad steps '{v}'")))?;
                    }
                }
                continue;
            }
            if line.starts_with("step,") {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 9 && parts.len() != 16 {
                return Err(err(
                    lineno,
                    format!("expected 9 or 16 fields, got {}", parts.len()),
                ));
            }
            let attention = if parts[6].is_empty() {
                Vec::new()
            } else {
                parts[6]
                    .split(';')
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| err(lineno, format!("bad attention '{t}'")))
                    })
                    .collect::<Result<_>>()?
            };
            let p = |k: usize| -> Result<f64> {
                parts[k]
                    .parse::<f64>()
                    .map_err(|_| err(lineno, format!("bad number '{}'", parts[k])))
            };
            let breakdown = if parts.len() == 16 && !parts[9].is_empty() {
                let f_attract = Vec2::new(p(9)?, p(10)?);
                let f_repulse = Vec2::new(p(11)?, p(12)?);
                let f_inter = Vec2::new(p(13)?, p(14)?);
                let total = f_attract + f_repulse + f_inter;
                Some(ForceBreakdown {
                    f_attract,
                    f_repulse,
                    f_inter,
                    total,
                    wall_following_active: parts[15] == "1",
                    zero_force: total == Vec2::ZERO,
                })
            } else {
                None
            };
            rows.push(StepRow {
                step: parts[0]
                    .parse()
                    .map_err(|_| err(lineno, format!("bad step '{}'", parts[0])))?,
                robot: parts[1]
                    .parse()
                    .map_err(|_| err(lineno, format!("bad robot '{}'", parts[1])))?,
                x: p(2)?,
                y: p(3)?,
                heading: p(4)?,
                action: parts[5]
                    .parse()
                    .map_err(|_| err(lineno, format!("bad action '{}'", parts[5])))?,
                attention,
                reward: p(7)?,
                terminal: parts[8] == "1",
                breakdown,
            });
        }
        let n = rows
            .iter()
            .map(|r| r.robot)
            .max()
            .map(|m| (m + 1).max(0) as usize)
            .unwrap_or(0);
        let mut returns = vec![0.0; n];
        let mut collided = false;
        for r in &rows {
            if r.robot >= 0 {
                returns[r.robot as usize] += r.reward;
            }
        }
        if terminal == TerminalKind::Collision {
            collided = true;
        }
        Ok((
            EpisodeLog {
                rows,
                terminal,
                steps,
                returns,
                collided,
            },
            config_hash,
        ))
    }

    pub fn load(path: &Path) -> Result<(EpisodeLog, u64)> {
        let text = std::fs::read_to_string(path)?;
        EpisodeLog::from_text(&text, path)
    }
}
