//! Potential-field motion layer for pursuers: attractive, repulsive, and
//! inter-robot forces, the attention-weighted inter-robot variant, and the
//! wall-following override that turns the resulting force into a heading.
//!
//! All functions are pure; the trainer only chooses the `(lambda, eta)` pair
//! each step.

use crate::error::{Error, Result};
use crate::geom::{clamp_distance, Vec2};

/// The parameter pair a policy outputs each step, plus the fixed obstacle
/// influence range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApfParams {
    /// Compactness regulator for the inter-robot force, in [0, lambda_max].
    pub lambda: f64,
    /// Scale factor of the obstacle repulsion.
    pub eta: f64,
    /// Influence range of obstacles, meters.
    pub rho: f64,
}

/// Per-step force decomposition, kept for logs and analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceBreakdown {
    pub f_attract: Vec2,
    pub f_repulse: Vec2,
    pub f_inter: Vec2,
    pub total: Vec2,
    pub wall_following_active: bool,
    /// Total force was exactly zero; the current heading was held.
    pub zero_force: bool,
}

/// Unit vector from the pursuer toward the evader.
pub fn attractive_force(p_i: Vec2, p_e: Vec2) -> Vec2 {
    let d = clamp_distance(p_i.dist(p_e));
    (p_e - p_i) / d
}

/// Inverse-distance obstacle repulsion, zero beyond the influence range
/// `rho`. Always points away from the obstacle.
pub fn repulsive_force(p_i: Vec2, p_o: Vec2, d_o: f64, eta: f64, rho: f64) -> Vec2 {
    if d_o > rho {
        return Vec2::ZERO;
    }
    let d = clamp_distance(d_o);
    let coeff = eta * (1.0 / d - 1.0 / rho) / (d * d * d);
    (p_i - p_o) * coeff
}

/// Plain inter-robot force: every observed neighbor contributes
/// `(0.5 - lambda/d) * (p_j - p_i) / d`. An empty neighbor list gives zero.
pub fn inter_robot_force(p_i: Vec2, neighbors: &[Vec2], lambda: f64) -> Vec2 {
    let mut f = Vec2::ZERO;
    for &p_j in neighbors {
        f = f + inter_robot_term(p_i, p_j, lambda);
    }
    f
}

/// Attention-weighted inter-robot force: neighbor `j` is scaled by its
/// attention score. With a single neighbor (score 1) this equals the plain
/// force exactly.
pub fn inter_robot_force_attention(
    p_i: Vec2,
    neighbors: &[Vec2],
    alpha: &[f64],
    lambda: f64,
) -> Result<Vec2> {
    if neighbors.len() != alpha.len() {
        return Err(Error::InvalidInput(format!(
            "attention length {} does not match neighbor count {}",
            alpha.len(),
            neighbors.len()
        )));
    }
    let mut f = Vec2::ZERO;
    for (&p_j, &a) in neighbors.iter().zip(alpha) {
        f = f + inter_robot_term(p_i, p_j, lambda) * a;
    }
    Ok(f)
}

fn inter_robot_term(p_i: Vec2, p_j: Vec2, lambda: f64) -> Vec2 {
    let d = clamp_distance(p_i.dist(p_j));
    (p_j - p_i) * ((0.5 - lambda / d) / d)
}

/// Geometry a pursuer needs to evaluate its force field, in world
/// coordinates.
#[derive(Debug, Clone)]
pub struct ApfContext<'a> {
    pub position: Vec2,
    pub heading: f64,
    pub evader: Vec2,
    /// Closest point on any obstacle surface.
    pub obstacle_point: Vec2,
    pub obstacle_distance: f64,
    /// Unit direction away from that obstacle.
    pub obstacle_outward: Vec2,
    /// Positions of the observable neighbors, in observation order.
    pub neighbors: &'a [Vec2],
    /// Wall following fires below this obstacle distance.
    pub wall_follow_trigger: f64,
}

/// Resulting-force heading with the wall-following override.
///
/// The override fires when the obstacle is closer than the trigger distance
/// and the total force points into it; the heading then follows the obstacle
/// tangent closest in angle to the force, breaking ties counter-clockwise.
/// A force of exactly zero holds the current heading and sets the flag.
pub fn desired_heading(
    ctx: &ApfContext<'_>,
    params: &ApfParams,
    alpha: Option<&[f64]>,
) -> Result<(f64, ForceBreakdown)> {
    let f_attract = attractive_force(ctx.position, ctx.evader);
    let f_repulse = repulsive_force(
        ctx.position,
        ctx.obstacle_point,
        ctx.obstacle_distance,
        params.eta,
        params.rho,
    );
    let f_inter = match alpha {
        Some(a) => inter_robot_force_attention(ctx.position, ctx.neighbors, a, params.lambda)?,
        None => inter_robot_force(ctx.position, ctx.neighbors, params.lambda),
    };
    let total = f_attract + f_repulse + f_inter;

    let mut breakdown = ForceBreakdown {
        f_attract,
        f_repulse,
        f_inter,
        total,
        wall_following_active: false,
        zero_force: false,
    };

    if total == Vec2::ZERO {
        breakdown.zero_force = true;
        return Ok((ctx.heading, breakdown));
    }

    let into_obstacle = total.dot(ctx.obstacle_outward) < 0.0;
    if ctx.obstacle_distance < ctx.wall_follow_trigger && into_obstacle {
        let ccw = ctx.obstacle_outward.perp_ccw();
        let cw = ctx.obstacle_outward.perp_cw();
        // Smaller angle to the force wins; ties go counter-clockwise.
        let tangent = if total.dot(cw) > total.dot(ccw) {
            cw
        } else {
            ccw
        };
        breakdown.wall_following_active = true;
        return Ok((tangent.angle(), breakdown));
    }

    Ok((total.angle(), breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::wrap_angle;
    use proptest::prelude::*;

    const RHO: f64 = 0.8;

    #[test]
    fn attractive_is_unit_toward_evader() {
        let f = attractive_force(Vec2::new(0.0, 0.0), Vec2::new(3.0, 4.0));
        assert!((f.x - 0.6).abs() < 1e-12);
        assert!((f.y - 0.8).abs() < 1e-12);
        let f = attractive_force(Vec2::new(1.0, 1.0), Vec2::new(1.0, 2.0));
        assert!((f.x - 0.0).abs() < 1e-12);
        assert!((f.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repulsion_outside_influence_is_zero() {
        let f = repulsive_force(Vec2::new(0.0, 0.0), Vec2::new(0.81, 0.0), 0.81, 1.0, RHO);
        assert_eq!(f, Vec2::ZERO);
        let f = repulsive_force(Vec2::new(0.0, 0.0), Vec2::new(RHO, 0.0), RHO, 1.0, RHO);
        assert_eq!(f, Vec2::ZERO);
    }

    #[test]
    fn repulsion_hand_value() {
        // eta (1/d - 1/rho) (p_i - p_o) / d^3 at d = 0.4:
        // 1.0 * (2.5 - 1.25) * (-0.4, 0) / 0.064 = (-7.8125, 0)
        let f = repulsive_force(Vec2::new(0.0, 0.0), Vec2::new(0.4, 0.0), 0.4, 1.0, RHO);
        assert!((f.x + 7.8125).abs() < 1e-12);
        assert!(f.y.abs() < 1e-12);
    }

    #[test]
    fn repulsion_continuous_at_rho() {
        // Approaching the influence boundary from inside, the magnitude
        // vanishes; at exactly rho both branches are zero.
        let d = RHO * (1.0 - 1e-12);
        let f = repulsive_force(Vec2::new(0.0, 0.0), Vec2::new(d, 0.0), d, 1.0, RHO);
        assert!(f.norm() <= 1e-9);
        let f = repulsive_force(Vec2::new(0.0, 0.0), Vec2::new(RHO, 0.0), RHO, 1.0, RHO);
        assert_eq!(f.norm(), 0.0);
    }

    #[test]
    fn inter_robot_zero_crossing_and_empty() {
        // One neighbor at d = 2*lambda makes the coefficient vanish.
        let f = inter_robot_force(Vec2::ZERO, &[Vec2::new(0.5, 0.0)], 0.25);
        assert!(f.norm() < 1e-12);
        assert_eq!(inter_robot_force(Vec2::ZERO, &[], 1.0), Vec2::ZERO);
    }

    #[test]
    fn inter_robot_hand_value() {
        let f = inter_robot_force(Vec2::ZERO, &[Vec2::new(1.0, 0.0)], 0.25);
        assert!((f.x - 0.25).abs() < 1e-12);
        assert!(f.y.abs() < 1e-12);
    }

    #[test]
    fn attention_singleton_matches_plain_exactly() {
        let p = Vec2::new(0.3, -0.2);
        let n = [Vec2::new(1.4, 0.9)];
        let plain = inter_robot_force(p, &n, 700.0);
        let att = inter_robot_force_attention(p, &n, &[1.0], 700.0).unwrap();
        assert_eq!(plain, att);
    }

    #[test]
    fn attention_zero_weight_drops_neighbor() {
        let p = Vec2::ZERO;
        let n = [Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)];
        let att = inter_robot_force_attention(p, &n, &[1.0, 0.0], 10.0).unwrap();
        let only_first = inter_robot_force(p, &n[..1], 10.0);
        assert_eq!(att, only_first);
    }

    #[test]
    fn attention_length_mismatch_is_an_error() {
        let r = inter_robot_force_attention(Vec2::ZERO, &[Vec2::new(1.0, 0.0)], &[0.5, 0.5], 1.0);
        assert!(r.is_err());
    }

    fn plain_ctx<'a>(neighbors: &'a [Vec2]) -> ApfContext<'a> {
        ApfContext {
            position: Vec2::new(1.8, 1.0),
            heading: 0.3,
            evader: Vec2::new(1.8, 4.0),
            obstacle_point: Vec2::new(1.8, 0.0),
            obstacle_distance: 1.0,
            obstacle_outward: Vec2::new(0.0, 1.0),
            neighbors,
            wall_follow_trigger: 0.2,
        }
    }

    #[test]
    fn heading_points_at_evader_when_alone() {
        let params = ApfParams {
            lambda: 0.0,
            eta: 1.0,
            rho: RHO,
        };
        let (h, b) = desired_heading(&plain_ctx(&[]), &params, None).unwrap();
        assert!((h - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(!b.wall_following_active);
        assert_eq!(b.total, b.f_attract);
    }

    #[test]
    fn symmetric_neighbors_yield_bisector() {
        let neighbors = [Vec2::new(1.0, 1.8), Vec2::new(2.6, 1.8)];
        let mut ctx = plain_ctx(&neighbors);
        ctx.position = Vec2::new(1.8, 1.8);
        ctx.evader = Vec2::new(1.8, 4.0);
        ctx.obstacle_distance = 1.8;
        let params = ApfParams {
            lambda: 2000.0,
            eta: 1.0,
            rho: RHO,
        };
        let (_, b) = desired_heading(&ctx, &params, Some(&[0.5, 0.5])).unwrap();
        // Equal-distance symmetric neighbors: force stays on the vertical bisector.
        assert!(b.f_inter.x.abs() < 1e-9);
    }

    #[test]
    fn skewed_attention_tilts_away_from_attended_neighbor() {
        let neighbors = [Vec2::new(1.0, 1.8), Vec2::new(2.6, 1.8)];
        let mut ctx = plain_ctx(&neighbors);
        ctx.position = Vec2::new(1.8, 1.8);
        ctx.obstacle_distance = 1.8;
        let params = ApfParams {
            lambda: 2000.0,
            eta: 1.0,
            rho: RHO,
        };
        let (_, b) = desired_heading(&ctx, &params, Some(&[0.9, 0.1])).unwrap();
        // Neighbor 0 is to the left and repels harder; the force tilts right.
        let expected = inter_robot_term(ctx.position, neighbors[0], 2000.0) * 0.9
            + inter_robot_term(ctx.position, neighbors[1], 2000.0) * 0.1;
        assert!((b.f_inter.x - expected.x).abs() < 1e-12);
        assert!((b.f_inter.y - expected.y).abs() < 1e-12);
        assert!(b.f_inter.x > 0.0);
    }

    #[test]
    fn wall_following_overrides_into_obstacle_force() {
        let mut ctx = plain_ctx(&[]);
        // Obstacle straight below within trigger range, evader also below:
        // the attractive force points into the wall.
        ctx.position = Vec2::new(1.8, 0.1);
        ctx.evader = Vec2::new(1.8, -2.0);
        ctx.obstacle_point = Vec2::new(1.8, 0.0);
        ctx.obstacle_distance = 0.1;
        ctx.obstacle_outward = Vec2::new(0.0, 1.0);
        let params = ApfParams {
            lambda: 0.0,
            eta: 0.0,
            rho: RHO,
        };
        let (h, b) = desired_heading(&ctx, &params, None).unwrap();
        assert!(b.wall_following_active);
        // Tangent of a wall with outward +y is +/-x; check it is horizontal.
        assert!(h.abs() < 1e-9 || (h.abs() - std::f64::consts::PI).abs() < 1e-9);
    }

    #[test]
    fn zero_force_holds_heading() {
        let mut ctx = plain_ctx(&[]);
        // Cancel attraction exactly with one neighbor term:
        // attract = (0,1); one neighbor below at d=1 with lambda=1.5 gives
        // (0.5-1.5)*(0,-1) = (0,1)... choose instead neighbor above.
        let neighbors = [Vec2::new(1.8, 2.0)];
        ctx.neighbors = &neighbors;
        ctx.evader = Vec2::new(1.8, 4.0);
        ctx.obstacle_distance = 1.0;
        // d=1, coefficient 0.5 - lambda = -1 at lambda = 1.5 -> force (0,-1).
        let params = ApfParams {
            lambda: 1.5,
            eta: 0.0,
            rho: RHO,
        };
        let (h, b) = desired_heading(&ctx, &params, None).unwrap();
        assert!(b.zero_force);
        assert_eq!(h, ctx.heading);
    }

    proptest! {
        /// Attention with uniform weights equals the plain force divided by
        /// the neighbor count.
        #[test]
        fn uniform_attention_matches_scaled_plain(
            px in -2.0..2.0f64, py in -2.0..2.0f64,
            k in 1usize..6,
            seed in 0u64..1000,
            lambda in 0.0..4000.0f64,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = Vec2::new(px, py);
            let neighbors: Vec<Vec2> = (0..k)
                .map(|_| p + Vec2::new(rng.gen_range(0.05..2.0), 0.0).rotated(rng.gen_range(0.0..6.2)))
                .collect();
            let alpha = vec![1.0 / k as f64; k];
            let plain = inter_robot_force(p, &neighbors, lambda);
            let att = inter_robot_force_attention(p, &neighbors, &alpha, lambda).unwrap();
            let scale = plain.norm().max(1.0);
            prop_assert!((att.x - plain.x / k as f64).abs() <= 1e-12 * scale);
            prop_assert!((att.y - plain.y / k as f64).abs() <= 1e-12 * scale);
        }

        /// Repulsion never points toward the obstacle.
        #[test]
        fn repulsion_points_outward(
            d in 0.0001..1.2f64, theta in 0.0..6.2f64, eta in 0.01..1000.0f64,
        ) {
            let p_i = Vec2::ZERO;
            let p_o = Vec2::from_angle(theta) * d;
            let f = repulsive_force(p_i, p_o, d, eta, RHO);
            prop_assert!(f.dot(p_i - p_o) >= 0.0);
        }

        /// Rotating every input by theta rotates the output heading by theta,
        /// wall following included.
        #[test]
        fn desired_heading_is_rotation_equivariant(
            theta in -3.0..3.0f64,
            ex in -1.0..1.0f64, ey in 1.0..2.0f64,
            ox in -0.5..0.5f64, oy in -2.0..-0.05f64,
            nx in 0.3..1.5f64, ny in -0.5..0.5f64,
            lambda in 0.0..2000.0f64,
            eta in 0.0..100.0f64,
        ) {
            let origin = Vec2::new(0.0, 0.0);
            let evader = Vec2::new(ex, ey);
            let obstacle = Vec2::new(ox, oy);
            let neighbor = [Vec2::new(nx, ny)];
            let d_o = origin.dist(obstacle);
            let ctx = ApfContext {
                position: origin,
                heading: 0.1,
                evader,
                obstacle_point: obstacle,
                obstacle_distance: d_o,
                obstacle_outward: (origin - obstacle).normalized(),
                neighbors: &neighbor,
                wall_follow_trigger: 0.5,
            };
            let params = ApfParams { lambda, eta, rho: RHO };
            let (h0, b0) = desired_heading(&ctx, &params, None).unwrap();
            prop_assume!(!b0.zero_force);
            prop_assume!(b0.total.norm() > 1e-9);

            let rot = |v: Vec2| v.rotated(theta);
            let neighbor_r = [rot(neighbor[0])];
            let ctx_r = ApfContext {
                position: rot(origin),
                heading: wrap_angle(0.1 + theta),
                evader: rot(evader),
                obstacle_point: rot(obstacle),
                obstacle_distance: d_o,
                obstacle_outward: rot((origin - obstacle).normalized()),
                neighbors: &neighbor_r,
                wall_follow_trigger: 0.5,
            };
            let (h1, _) = desired_heading(&ctx_r, &params, None).unwrap();
            let diff = wrap_angle(h1 - h0 - theta);
            prop_assert!(diff.abs() < 1e-9, "diff {diff}");
        }
    }
}
