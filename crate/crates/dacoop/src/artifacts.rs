//! On-disk layout of a training run and the delimited-text formats of every
//! artifact. Each file embeds the config hash and seed that produced it;
//! loaders return the hash so analyses can refuse mixed inputs.
//!
//! Layout under the run directory:
//!
//!   config.txt                  canonical experiment config
//!   seed_<s>/curve.csv          one row per evaluation checkpoint
//!   seed_<s>/episodes.csv       one row per training episode
//!   seed_<s>/klreturn.csv       one row per gradient step
//!   seed_<s>/ckpt_ep<n>.ckpt    network checkpoints
//!   seed_<s>/ckpt_final.ckpt    final network
//!   aggregate.csv               per-seed metrics with mean and sd

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sim::TerminalKind;
use crate::trainer::{CurvePoint, EpisodeStat, KlReturnPoint};

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

pub fn checkpoint_path(run_dir: &Path, seed: u64, episode: u32) -> PathBuf {
    seed_dir(run_dir, seed).join(format!("ckpt_ep{episode:05}.ckpt"))
}

pub fn final_checkpoint_path(run_dir: &Path, seed: u64) -> PathBuf {
    seed_dir(run_dir, seed).join("ckpt_final.ckpt")
}

fn header(kind: &str, config_hash: u64, seed: u64) -> String {
    format!("# dacoop-{kind} v1 config_hash={config_hash:016x} seed={seed}\n")
}

/// Parse `config_hash=` and `seed=` out of a `#` header line.
fn parse_header(line: &str, origin: &Path) -> Result<(u64, u64)> {
    let mut hash = None;
    let mut seed = None;
    for token in line.trim_start_matches('#').split_whitespace() {
        if let Some(v) = token.strip_prefix("config_hash=") {
            hash = u64::from_str_radix(v, 16).ok();
        } else if let Some(v) = token.strip_prefix("seed=") {
            seed = v.parse().ok();
        }
    }
    match (hash, seed) {
        (Some(h), Some(s)) => Ok((h, s)),
        _ => Err(Error::Parse {
            path: origin.to_path_buf(),
            line: 1,
            msg: "missing config_hash/seed header".into(),
        }),
    }
}

pub fn write_curve(path: &Path, points: &[CurvePoint], config_hash: u64, seed: u64) -> Result<()> {
    let mut s = header("curve", config_hash, seed);
    s.push_str("episode,success_rate,collision_rate,mean_return\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            p.episode, p.success_rate, p.collision_rate, p.mean_return
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<(Vec<CurvePoint>, u64, u64)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "empty curve file".into(),
    })?;
    let (hash, seed) = parse_header(first, path)?;
    let mut points = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("episode,") {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("expected 4 fields, got {}", f.len()),
            });
        }
        let num = |k: usize| -> Result<f64> {
            f[k].parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("bad number '{}'", f[k]),
            })
        };
        points.push(CurvePoint {
            episode: f[0].parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("bad episode '{}'", f[0]),
            })?,
            success_rate: num(1)?,
            collision_rate: num(2)?,
            mean_return: num(3)?,
        });
    }
    Ok((points, hash, seed))
}

pub fn write_episodes(
    path: &Path,
    episodes: &[EpisodeStat],
    config_hash: u64,
    seed: u64,
) -> Result<()> {
    let mut s = header("episodes", config_hash, seed);
    s.push_str("episode,kind,mean_return,steps,collided\n");
    for e in episodes {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            e.episode,
            e.kind.as_str(),
            e.mean_return,
            e.steps,
            u8::from(e.collided)
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<(Vec<EpisodeStat>, u64, u64)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "empty episodes file".into(),
    })?;
    let (hash, seed) = parse_header(first, path)?;
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("episode,") {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("expected 5 fields, got {}", f.len()),
            });
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let kind = match f[1] {
            "capture" => TerminalKind::Capture,
            "collision" => TerminalKind::Collision,
            "timeout" => TerminalKind::Timeout,
            "running" => TerminalKind::Running,
            other => return Err(bad(format!("bad kind '{other}'"))),
        };
        out.push(EpisodeStat {
            episode: f[0]
                .parse()
                .map_err(|_| bad(format!("bad episode '{}'", f[0])))?,
            kind,
            mean_return: f[2]
                .parse()
                .map_err(|_| bad(format!("bad return '{}'", f[2])))?,
            steps: f[3]
                .parse()
                .map_err(|_| bad(format!("bad steps '{}'", f[3])))?,
            collided: f[4] == "1",
        });
    }
    Ok((out, hash, seed))
}

pub fn write_kl_return(
    path: &Path,
    points: &[KlReturnPoint],
    config_hash: u64,
    seed: u64,
) -> Result<()> {
    let mut s = header("klreturn", config_hash, seed);
    s.push_str("grad_step,kl,episode_return\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.grad_step, p.kl, p.episode_return);
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_kl_return(path: &Path) -> Result<(Vec<KlReturnPoint>, u64, u64)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: "empty kl/return file".into(),
    })?;
    let (hash, seed) = parse_header(first, path)?;
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("grad_step,") {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("expected 3 fields, got {}", f.len()),
            });
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        };
        out.push(KlReturnPoint {
            grad_step: f[0]
                .parse()
                .map_err(|_| bad(format!("bad step '{}'", f[0])))?,
            kl: f[1]
                .parse()
                .map_err(|_| bad(format!("bad kl '{}'", f[1])))?,
            episode_return: f[2]
                .parse()
                .map_err(|_| bad(format!("bad return '{}'", f[2])))?,
        });
    }
    Ok((out, hash, seed))
}

/// Per-seed learning metrics plus their mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub rows: Vec<SeedMetrics>,
    pub mean: SeedMetrics,
    pub sd: SeedMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedMetrics {
    pub seed: u64,
    pub auc: f64,
    pub msr: f64,
    pub crtp: f64,
    pub final_success: f64,
}

pub fn aggregate(rows: Vec<SeedMetrics>) -> Result<Aggregate> {
    if rows.is_empty() {
        return Err(Error::Analysis("no seed metrics to aggregate".into()));
    }
    let n = rows.len() as f64;
    let mean_of = |f: fn(&SeedMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean = SeedMetrics {
        seed: 0,
        auc: mean_of(|r| r.auc),
        msr: mean_of(|r| r.msr),
        crtp: mean_of(|r| r.crtp),
        final_success: mean_of(|r| r.final_success),
    };
    let sd_of = |f: fn(&SeedMetrics) -> f64, m: f64| {
        if rows.len() < 2 {
            0.0
        } else {
            (rows.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        }
    };
    let sd = SeedMetrics {
        seed: 0,
        auc: sd_of(|r| r.auc, mean.auc),
        msr: sd_of(|r| r.msr, mean.msr),
        crtp: sd_of(|r| r.crtp, mean.crtp),
        final_success: sd_of(|r| r.final_success, mean.final_success),
    };
    Ok(Aggregate { rows, mean, sd })
}

pub fn write_aggregate(path: &Path, agg: &Aggregate, config_hash: u64) -> Result<()> {
    let mut s = format!("# dacoop-aggregate v1 config_hash={config_hash:016x}\n");
    s.push_str("seed,auc,msr,crtp,final_success\n");
    for r in &agg.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.seed, r.auc, r.msr, r.crtp, r.final_success
        );
    }
    let _ = writeln!(
        s,
        "mean,{},{},{},{}",
        agg.mean.auc, agg.mean.msr, agg.mean.crtp, agg.mean.final_success
    );
    let _ = writeln!(
        s,
        "sd,{},{},{},{}",
        agg.sd.auc, agg.sd.msr, agg.sd.crtp, agg.sd.final_success
    );
    std::fs::write(path, s)?;
    Ok(())
}

/// Seeds that have a completed run (final checkpoint and curve) in the run
/// directory.
pub fn completed_seeds(run_dir: &Path, seeds: &[u64]) -> Vec<u64> {
    seeds
        .iter()
        .copied()
        .filter(|&s| {
            final_checkpoint_path(run_dir, s).exists()
                && seed_dir(run_dir, s).join("curve.csv").exists()
        })
        .collect()
}

/// Load a run's per-seed artifacts, enforcing a single config hash.
pub struct LoadedRun {
    pub config: crate::config::ExperimentConfig,
    pub config_hash: u64,
    pub seeds: Vec<u64>,
}

pub fn load_run(run_dir: &Path) -> Result<LoadedRun> {
    let config_path = run_dir.join("config.txt");
    if !config_path.exists() {
        return Err(Error::Analysis(format!(
            "missing {} (not a run directory?)",
            config_path.display()
        )));
    }
    let config = crate::config::ExperimentConfig::load(&config_path)?;
    let config_hash = config.hash();
    let seeds = completed_seeds(run_dir, &config.seeds);
    if seeds.is_empty() {
        return Err(Error::Analysis(format!(
            "no completed seeds in {}",
            run_dir.display()
        )));
    }
    // Refuse mixed hashes.
    for &seed in &seeds {
        let (_, hash, file_seed) = read_curve(&seed_dir(run_dir, seed).join("curve.csv"))?;
        if hash != config_hash || file_seed != seed {
            return Err(Error::Analysis(format!(
                "seed {seed}: artifact hash {hash:016x} does not match config {config_hash:016x}"
            )));
        }
    }
    Ok(LoadedRun {
        config,
        config_hash,
        seeds,
    })
}
