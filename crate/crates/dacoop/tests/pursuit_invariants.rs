//! Cross-module invariants of the pursuit game that no single module test
//! can cover alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dacoop::arena::make_boundary_arena;
use dacoop::evader::EvaderConfig;
use dacoop::sim::{run_episode, Sim, SimParams, TerminalKind};
use dacoop::trainer::{ApfSettings, FixedApfPolicy};

/// The evader is twice as fast as a pursuer, so one pursuer alone can never
/// capture it in the open boundary arena: capture requires cooperation.
#[test]
fn single_pursuer_never_captures_in_boundary_arena() {
    let arena = make_boundary_arena();
    let params = SimParams {
        n_pursuers: 1,
        ..SimParams::default()
    };
    let sim = Sim::new(&arena, params);
    let evader_cfg = EvaderConfig::default();
    let mut captures = 0;
    for seed in 0..100u64 {
        // Pure chase: with no neighbors every parameter pair reduces to the
        // attractive force plus obstacle repulsion.
        let mut policy = FixedApfPolicy {
            action: 0,
            apf: ApfSettings::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log = run_episode(&sim, &mut policy, &evader_cfg, &mut rng).unwrap();
        if log.terminal == TerminalKind::Capture {
            captures += 1;
        }
    }
    assert_eq!(captures, 0, "a lone pursuer captured the faster evader");
}
