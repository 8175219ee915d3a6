//! C ABI for the cooperative pursuit lab: opaque handles over the
//! experiment config, arenas, and policies, plus episode rollout and
//! evaluation entry points. Errors come back as status codes; the last
//! error message is kept per thread and fetched with
//! [`dacoop_last_error`].
//!
//! The generated header lands in `include/dacoop.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dacoop::arena::Arena;
use dacoop::config::ExperimentConfig;
use dacoop::qnet::QNet;
use dacoop::sim::{run_episode, Sim, TerminalKind};
use dacoop::trainer::{self, evaluate_policy, FixedApfPolicy, QnetPolicy, TrainSetup};

/// Call status. Anything but `Ok` leaves a message for
/// [`dacoop_last_error`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DacoopStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Runtime = 5,
}

/// Opaque experiment configuration handle.
pub struct DacoopConfig(ExperimentConfig);

/// Opaque arena handle.
pub struct DacoopArena(Arena);

/// Opaque policy handle: a Q-network; the config decides how its actions
/// drive motion.
pub struct DacoopPolicy {
    net: QNet,
}

/// Result of a single episode.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DacoopRolloutSummary {
    /// 0 = capture, 1 = collision, 2 = timeout.
    pub terminal_kind: c_int,
    pub steps: u32,
    pub mean_return: c_double,
}

/// Aggregate evaluation statistics.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DacoopEvalSummary {
    pub episodes: u32,
    pub success_rate: c_double,
    pub collision_rate: c_double,
    pub mean_return: c_double,
    pub mean_steps: c_double,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: DacoopStatus, msg: &str) -> DacoopStatus {
    set_error(msg);
    status
}

fn status_of(err: &dacoop::Error) -> DacoopStatus {
    match err {
        dacoop::Error::Io(_) => DacoopStatus::Io,
        dacoop::Error::Parse { .. } => DacoopStatus::Parse,
        dacoop::Error::InvalidInput(_) => DacoopStatus::InvalidArgument,
        _ => DacoopStatus::Runtime,
    }
}

/// # Safety
/// `s` must be a valid NUL-terminated string or NULL.
unsafe fn c_str<'a>(s: *const c_char) -> Option<&'a str> {
    if s.is_null() {
        return None;
    }
    unsafe { CStr::from_ptr(s) }.to_str().ok()
}

fn c_path(s: &str) -> PathBuf {
    Path::new(s).to_path_buf()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dacoop_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the last error message into `buf` (truncated to `cap - 1` bytes,
/// always NUL-terminated). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes, or be NULL (then only
/// the length is returned).
#[no_mangle]
pub unsafe extern "C" fn dacoop_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// New configuration with the standard defaults. Free with
/// [`dacoop_config_free`].
#[no_mangle]
pub extern "C" fn dacoop_config_default() -> *mut DacoopConfig {
    Box::into_raw(Box::new(DacoopConfig(ExperimentConfig::default())))
}

/// Load a configuration file. Returns NULL on error.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dacoop_config_load(path: *const c_char) -> *mut DacoopConfig {
    let Some(path) = (unsafe { c_str(path) }) else {
        set_error("path is null or not UTF-8");
        return std::ptr::null_mut();
    };
    match ExperimentConfig::load(&c_path(path)) {
        Ok(cfg) => Box::into_raw(Box::new(DacoopConfig(cfg))),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Apply one `key = value` override to a configuration.
///
/// # Safety
/// `cfg` must be a live handle from this library; `key` and `value` must be
/// valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn dacoop_config_set(
    cfg: *mut DacoopConfig,
    key: *const c_char,
    value: *const c_char,
) -> DacoopStatus {
    let Some(cfg) = (unsafe { cfg.as_mut() }) else {
        return fail(DacoopStatus::NullArgument, "cfg is null");
    };
    let (Some(key), Some(value)) = (unsafe { c_str(key) }, unsafe { c_str(value) }) else {
        return fail(DacoopStatus::NullArgument, "key/value null or not UTF-8");
    };
    match cfg.0.set(key, value) {
        Ok(()) => DacoopStatus::Ok,
        Err(e) => fail(status_of(&e), &e.to_string()),
    }
}

/// # Safety
/// `cfg` must be a handle from this library, not yet freed; NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn dacoop_config_free(cfg: *mut DacoopConfig) {
    if !cfg.is_null() {
        drop(unsafe { Box::from_raw(cfg) });
    }
}

/// Build the arena selected by the configuration. Free with
/// [`dacoop_arena_free`].
///
/// # Safety
/// `cfg` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn dacoop_arena_create(cfg: *const DacoopConfig) -> *mut DacoopArena {
    let Some(cfg) = (unsafe { cfg.as_ref() }) else {
        set_error("cfg is null");
        return std::ptr::null_mut();
    };
    match cfg.0.build_arena() {
        Ok(arena) => Box::into_raw(Box::new(DacoopArena(arena))),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Load an arena from its text format. Returns NULL on error.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dacoop_arena_load(path: *const c_char) -> *mut DacoopArena {
    let Some(path) = (unsafe { c_str(path) }) else {
        set_error("path is null or not UTF-8");
        return std::ptr::null_mut();
    };
    match Arena::load(&c_path(path)) {
        Ok(a) => Box::into_raw(Box::new(DacoopArena(a))),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Write an arena in its text format.
///
/// # Safety
/// `arena` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dacoop_arena_save(
    arena: *const DacoopArena,
    path: *const c_char,
) -> DacoopStatus {
    let Some(arena) = (unsafe { arena.as_ref() }) else {
        return fail(DacoopStatus::NullArgument, "arena is null");
    };
    let Some(path) = (unsafe { c_str(path) }) else {
        return fail(DacoopStatus::NullArgument, "path null or not UTF-8");
    };
    match arena.0.save(&c_path(path)) {
        Ok(()) => DacoopStatus::Ok,
        Err(e) => fail(status_of(&e), &e.to_string()),
    }
}

/// # Safety
/// `arena` must be a handle from this library, not yet freed; NULL is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn dacoop_arena_free(arena: *mut DacoopArena) {
    if !arena.is_null() {
        drop(unsafe { Box::from_raw(arena) });
    }
}

/// Fresh randomly initialized policy for the configured algorithm. Free
/// with [`dacoop_policy_free`].
///
/// # Safety
/// `cfg` must be a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn dacoop_policy_init(
    cfg: *const DacoopConfig,
    seed: u64,
) -> *mut DacoopPolicy {
    let Some(cfg) = (unsafe { cfg.as_ref() }) else {
        set_error("cfg is null");
        return std::ptr::null_mut();
    };
    let mut qnet_cfg = cfg.0.qnet.clone();
    qnet_cfg.mode = cfg.0.trainer.algorithm.embed_mode();
    qnet_cfg.n_actions = trainer::N_ACTIONS;
    match QNet::init(qnet_cfg, seed) {
        Ok(net) => Box::into_raw(Box::new(DacoopPolicy { net })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Load a policy checkpoint, reconstructing its topology from the header.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dacoop_policy_load(path: *const c_char) -> *mut DacoopPolicy {
    let Some(path) = (unsafe { c_str(path) }) else {
        set_error("path is null or not UTF-8");
        return std::ptr::null_mut();
    };
    match QNet::load_auto(&c_path(path)) {
        Ok(net) => Box::into_raw(Box::new(DacoopPolicy { net })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Save a policy checkpoint.
///
/// # Safety
/// `policy` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dacoop_policy_save(
    policy: *const DacoopPolicy,
    path: *const c_char,
) -> DacoopStatus {
    let Some(policy) = (unsafe { policy.as_ref() }) else {
        return fail(DacoopStatus::NullArgument, "policy is null");
    };
    let Some(path) = (unsafe { c_str(path) }) else {
        return fail(DacoopStatus::NullArgument, "path null or not UTF-8");
    };
    match policy.net.save(&c_path(path)) {
        Ok(()) => DacoopStatus::Ok,
        Err(e) => fail(status_of(&e), &e.to_string()),
    }
}

/// # Safety
/// `policy` must be a handle from this library, not yet freed; NULL is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn dacoop_policy_free(policy: *mut DacoopPolicy) {
    if !policy.is_null() {
        drop(unsafe { Box::from_raw(policy) });
    }
}

fn setup_for<'a>(cfg: &'a ExperimentConfig, arena: &'a Arena) -> TrainSetup<'a> {
    TrainSetup {
        sim: cfg.sim,
        arena,
        evader: cfg.evader,
        qnet: cfg.qnet.clone(),
        apf: cfg.apf,
        trainer: cfg.trainer.clone(),
    }
}

fn terminal_code(kind: TerminalKind) -> c_int {
    match kind {
        TerminalKind::Capture => 0,
        TerminalKind::Collision => 1,
        TerminalKind::Timeout => 2,
        TerminalKind::Running => 3,
    }
}

/// Roll one greedy episode. When `log_path` is non-NULL the episode log is
/// written there in its delimited-text format.
///
/// # Safety
/// `cfg`, `arena`, and `policy` must be live handles from this library;
/// `out` must point to a writable summary; `log_path` must be NULL or a
/// valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dacoop_rollout(
    cfg: *const DacoopConfig,
    arena: *const DacoopArena,
    policy: *const DacoopPolicy,
    seed: u64,
    log_path: *const c_char,
    out: *mut DacoopRolloutSummary,
) -> DacoopStatus {
    let (Some(cfg), Some(arena), Some(policy), Some(out)) = (
        unsafe { cfg.as_ref() },
        unsafe { arena.as_ref() },
        unsafe { policy.as_ref() },
        unsafe { out.as_mut() },
    ) else {
        return fail(DacoopStatus::NullArgument, "null handle passed to rollout");
    };
    let sim = Sim::new(&arena.0, cfg.0.sim);
    let mut driver = QnetPolicy {
        net: &policy.net,
        semantics: cfg.0.trainer.semantics(),
        apf: cfg.0.apf,
        epsilon: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log = match run_episode(&sim, &mut driver, &cfg.0.evader, &mut rng) {
        Ok(log) => log,
        Err(e) => return fail(status_of(&e), &e.to_string()),
    };
    if let Some(path) = unsafe { c_str(log_path) } {
        if let Err(e) = log.save(&c_path(path), cfg.0.hash(), seed) {
            return fail(status_of(&e), &e.to_string());
        }
    }
    *out = DacoopRolloutSummary {
        terminal_kind: terminal_code(log.terminal),
        steps: log.steps,
        mean_return: log.mean_return(),
    };
    DacoopStatus::Ok
}

/// Evaluate a policy greedily over seeded episodes.
///
/// # Safety
/// `cfg`, `arena`, and `policy` must be live handles from this library;
/// `out` must point to a writable summary.
#[no_mangle]
pub unsafe extern "C" fn dacoop_evaluate(
    cfg: *const DacoopConfig,
    arena: *const DacoopArena,
    policy: *const DacoopPolicy,
    episodes: u32,
    seed: u64,
    out: *mut DacoopEvalSummary,
) -> DacoopStatus {
    let (Some(cfg), Some(arena), Some(policy), Some(out)) = (
        unsafe { cfg.as_ref() },
        unsafe { arena.as_ref() },
        unsafe { policy.as_ref() },
        unsafe { out.as_mut() },
    ) else {
        return fail(DacoopStatus::NullArgument, "null handle passed to evaluate");
    };
    let setup = setup_for(&cfg.0, &arena.0);
    let mut driver = QnetPolicy {
        net: &policy.net,
        semantics: cfg.0.trainer.semantics(),
        apf: cfg.0.apf,
        epsilon: 0.0,
    };
    match evaluate_policy(&setup, &mut driver, episodes, seed) {
        Ok(stats) => {
            *out = DacoopEvalSummary {
                episodes: stats.episodes,
                success_rate: stats.success_rate,
                collision_rate: stats.collision_rate,
                mean_return: stats.mean_return,
                mean_steps: stats.mean_steps,
            };
            DacoopStatus::Ok
        }
        Err(e) => fail(status_of(&e), &e.to_string()),
    }
}

/// Evaluate the rule-based baseline with one fixed action index.
///
/// # Safety
/// `cfg` and `arena` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dacoop_evaluate_fixed(
    cfg: *const DacoopConfig,
    arena: *const DacoopArena,
    action: u32,
    episodes: u32,
    seed: u64,
    out: *mut DacoopEvalSummary,
) -> DacoopStatus {
    let (Some(cfg), Some(arena), Some(out)) =
        (unsafe { cfg.as_ref() }, unsafe { arena.as_ref() }, unsafe {
            out.as_mut()
        })
    else {
        return fail(DacoopStatus::NullArgument, "null handle passed to evaluate");
    };
    let setup = setup_for(&cfg.0, &arena.0);
    let mut driver = FixedApfPolicy {
        action: action as usize,
        apf: cfg.0.apf,
    };
    match evaluate_policy(&setup, &mut driver, episodes, seed) {
        Ok(stats) => {
            *out = DacoopEvalSummary {
                episodes: stats.episodes,
                success_rate: stats.success_rate,
                collision_rate: stats.collision_rate,
                mean_return: stats.mean_return,
                mean_steps: stats.mean_steps,
            };
            DacoopStatus::Ok
        }
        Err(e) => fail(status_of(&e), &e.to_string()),
    }
}
