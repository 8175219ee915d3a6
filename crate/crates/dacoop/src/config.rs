//! Experiment configuration: a strict line-oriented `key = value` format
//! covering every environment, controller, evader, network, and trainer
//! field, plus the stable hash that artifact files embed so analyses refuse
//! mixed inputs.
//!
//! Unknown keys are rejected with their line number. Defaults follow the
//! standard problem settings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evader::EvaderConfig;
use crate::qnet::QNetConfig;
use crate::sim::SimParams;
use crate::trainer::{Algorithm, ApfSettings, TrainerConfig};

/// Which arena the experiment runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArenaKind {
    Training,
    Boundary,
    Circle,
}

impl ArenaKind {
    pub fn parse(s: &str) -> Result<ArenaKind> {
        match s {
            "training" => Ok(ArenaKind::Training),
            "boundary" => Ok(ArenaKind::Boundary),
            "circle" => Ok(ArenaKind::Circle),
            other => Err(Error::InvalidInput(format!("unknown arena '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ArenaKind::Training => "training",
            ArenaKind::Boundary => "boundary",
            ArenaKind::Circle => "circle",
        }
    }
}

/// The full experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub sim: SimParams,
    pub evader: EvaderConfig,
    pub qnet: QNetConfig,
    pub apf: ApfSettings,
    pub trainer: TrainerConfig,
    pub arena: ArenaKind,
    /// Seed for the circle-arena generator (shared across seeds so every run
    /// sees the same validation arena).
    pub arena_seed: u64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sim: SimParams::default(),
            evader: EvaderConfig::default(),
            qnet: QNetConfig::default(),
            apf: ApfSettings::default(),
            trainer: TrainerConfig::default(),
            arena: ArenaKind::Training,
            arena_seed: 0,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("runs"),
        }
    }
}

macro_rules! config_fields {
    ($macro:ident) => {
        $macro! {
            // key, accessor, kind
            ("n_pursuers", sim.n_pursuers, usize),
            ("d_c", sim.d_c, f64),
            ("d_s", sim.d_s, f64),
            ("d_p", sim.d_p, f64),
            ("dt", sim.dt, f64),
            ("v_p", sim.v_p, f64),
            ("v_e", sim.v_e, f64),
            ("t_max", sim.t_max, f64),
            ("max_turn_deg", sim.max_turn, degrees),
            ("evader_max_turn_deg", sim.evader_max_turn, opt_degrees),
            ("collision_terminates", sim.collision_terminates, bool),
            ("c_app", sim.c_app, f64),
            ("evader_pursuer_repulsion_scale", evader.pursuer_repulsion_scale, f64),
            ("evader_pursuer_influence", evader.pursuer_influence, f64),
            ("evader_obstacle_repulsion_scale", evader.obstacle_repulsion_scale, f64),
            ("evader_obstacle_influence", evader.obstacle_influence, f64),
            ("evader_wall_follow_trigger", evader.wall_follow_trigger, f64),
            ("evader_encircle_radius", evader.encircle_radius, f64),
            ("evader_blocked_gap_deg", evader.blocked_gap, degrees),
            ("embed_dim", qnet.embed_dim, usize),
            ("mlp_hidden1", qnet.hidden.0, usize),
            ("mlp_hidden2", qnet.hidden.1, usize),
            ("obs_dist_scale", qnet.dist_scale, f64),
            ("obs_neighbor_scale", qnet.neighbor_dist_scale, f64),
            ("lambda_max", apf.lambda_max, f64),
            ("eta_min", apf.eta_min, f64),
            ("rho", apf.rho, f64),
            ("wall_follow_trigger", apf.wall_follow_trigger, f64),
            ("algorithm", trainer.algorithm, algorithm),
            ("gamma", trainer.gamma, f64),
            ("lr", trainer.lr, f64),
            ("memory_size", trainer.buffer_capacity, usize),
            ("minibatch", trainer.minibatch, usize),
            ("max_episodes", trainer.max_episodes, u32),
            ("final_exploration_episode", trainer.final_exploration_episode, u32),
            ("c_kl", trainer.c_kl, f64),
            ("eps_start", trainer.eps_start, f64),
            ("eps_end", trainer.eps_end, f64),
            ("target_sync_period", trainer.target_sync_period, u64),
            ("update_every", trainer.update_every, u32),
            ("warmup", trainer.warmup, usize),
            ("double_q", trainer.double_q, bool),
            ("eval_episodes", trainer.eval_episodes, u32),
            ("eval_period", trainer.eval_period, u32),
            ("arena", arena, arena),
            ("arena_seed", arena_seed, u64),
            ("seeds", seeds, seeds),
            ("out_dir", out_dir, path),
        }
    };
}

impl ExperimentConfig {
    /// Parse the strict key/value format; unknown keys and malformed values
    /// error with their line number.
    pub fn from_text(text: &str, origin: &Path) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: lineno,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Parse {
                    path: origin.to_path_buf(),
                    line: lineno,
                    msg: e.to_string(),
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::from_text(&text, path)
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! apply {
            ($( ($name:literal, $($field:tt).+, $kind:ident) ),+ $(,)?) => {
                match key {
                    $( $name => { set_field!(self, value, $($field).+, $kind); Ok(()) } )+
                    other => Err(Error::InvalidInput(format!("unknown config key '{other}'"))),
                }
            };
        }
        macro_rules! set_field {
            ($cfg:ident, $v:ident, $($field:tt).+, f64) => {
                $cfg.$($field).+ = parse_num::<f64>($v)?
            };
            ($cfg:ident, $v:ident, $($field:tt).+, usize) => {
                $cfg.$($field).+ = parse_num::<usize>($v)?
            };
            ($cfg:ident, $v:ident, $($field:tt).+, u32) => {
                $cfg.$($field).+ = parse_num::<u32>($v)?
            };
            ($cfg:ident, $v:ident, $($field:tt).+, u64) => {
                $cfg.$($field).+ = parse_num::<u64>($v)?
            };
            ($cfg:ident, $v:ident, $($field:tt).+, bool) => {
                $cfg.$($field).+ = parse_bool($v)?
            };
            ($cfg:ident, $v:ident, $($field:tt).+, degrees) => {
                $cfg.$($field).+ = parse_num::<f64>($v)?.to_radians()
            };
            ($cfg:ident, $v:ident, $($field:tt).+, opt_degrees) => {
                $cfg.$($field).+ = if $v == "none" {
                    None
                } else {
                    Some(parse_num::<f64>($v)?.to_radians())
                }
            };
            ($cfg:ident, $v:ident, $($field:tt).+, algorithm) => {
                $cfg.$($field).+ = Algorithm::parse($v)?
            };
            ($cfg:ident, $v:ident, $($field:tt).+, arena) => {
                $cfg.$($field).+ = ArenaKind::parse($v)?
            };
            ($cfg:ident, $v:ident, $($field:tt).+, seeds) => {
                $cfg.$($field).+ = parse_seeds($v)?
            };
            ($cfg:ident, $v:ident, $($field:tt).+, path) => {
                $cfg.$($field).+ = PathBuf::from($v)
            };
        }
        config_fields!(apply)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidInput("at least one seed required".into()));
        }
        if self.trainer.minibatch == 0 || self.trainer.buffer_capacity < self.trainer.minibatch {
            return Err(Error::InvalidInput(
                "memory_size must be at least minibatch".into(),
            ));
        }
        if self.sim.n_pursuers == 0 {
            return Err(Error::InvalidInput("n_pursuers must be positive".into()));
        }
        Ok(())
    }

    /// Canonical serialization: every key in declaration order with the
    /// current value. Parsing it back reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! emit {
            ($( ($name:literal, $($field:tt).+, $kind:ident) ),+ $(,)?) => {
                $( emit_field!(s, self, $name, $($field).+, $kind); )+
            };
        }
        macro_rules! emit_field {
            ($s:ident, $cfg:ident, $name:literal, $($field:tt).+, degrees) => {
                let _ = writeln!($s, "{} = {}", $name, $cfg.$($field).+.to_degrees());
            };
            ($s:ident, $cfg:ident, $name:literal, $($field:tt).+, opt_degrees) => {
                match $cfg.$($field).+ {
                    Some(v) => { let _ = writeln!($s, "{} = {}", $name, v.to_degrees()); }
                    None => { let _ = writeln!($s, "{} = none", $name); }
                }
            };
            ($s:ident, $cfg:ident, $name:literal, $($field:tt).+, algorithm) => {
                let _ = writeln!($s, "{} = {}", $name, $cfg.$($field).+.as_str());
            };
            ($s:ident, $cfg:ident, $name:literal, $($field:tt).+, arena) => {
                let _ = writeln!($s, "{} = {}", $name, $cfg.$($field).+.as_str());
            };
            ($s:ident, $cfg:ident, $name:literal, $($field:tt).+, seeds) => {
                let list = $cfg.$($field).+.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
                let _ = writeln!($s, "{} = {}", $name, list);
            };
            ($s:ident, $cfg:ident, $name:literal, $($field:tt).+, path) => {
                let _ = writeln!($s, "{} = {}", $name, $cfg.$($field).+.display());
            };
            ($s:ident, $cfg:ident, $name:literal, $($field:tt).+, $kind:ident) => {
                let _ = writeln!($s, "{} = {}", $name, $cfg.$($field).+);
            };
        }
        config_fields!(emit);
        s
    }

    /// Stable 64-bit hash of the canonical serialization, minus the fields
    /// that do not affect results (seeds and output directory).
    pub fn hash(&self) -> u64 {
        let mut text = String::new();
        for line in self.to_text().lines() {
            if line.starts_with("seeds =") || line.starts_with("out_dir =") {
                continue;
            }
            text.push_str(line);
            text.push('\n');
        }
        fnv1a(text.as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Build the configured arena.
    pub fn build_arena(&self) -> Result<crate::arena::Arena> {
        use rand_chacha::rand_core::SeedableRng;
        match self.arena {
            ArenaKind::Training => Ok(crate::arena::make_training_arena()),
            ArenaKind::Boundary => Ok(crate::arena::make_boundary_arena()),
            ArenaKind::Circle => crate::arena::make_circle_arena(
                &mut rand_chacha::ChaCha8Rng::seed_from_u64(self.arena_seed),
            ),
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::InvalidInput(format!("bad number '{v}'")))
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::InvalidInput(format!("bad bool '{other}'"))),
    }
}

fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    v.split(',')
        .map(|t| parse_num::<u64>(t.trim()))
        .collect::<Result<Vec<_>>>()
        .and_then(|seeds| {
            if seeds.is_empty() {
                Err(Error::InvalidInput("empty seed list".into()))
            } else {
                Ok(seeds)
            }
        })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
