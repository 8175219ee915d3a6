//! Rule-based escape policy for the evader: inverse-distance repulsion from
//! pursuers and obstacles, a wall-following override, and a slip rule that
//! heads into the largest angular gap when the escape direction is blocked.
//!
//! Every threshold here is a config value; the trainer's comparisons assume
//! the evader stays fixed across algorithms.

use crate::arena::Arena;
use crate::error::Result;
use crate::geom::{clamp_distance, wrap_angle, Vec2};

/// Tunables of the escape policy. Defaults are frozen for comparability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaderConfig {
    /// Scale of the repulsion exerted by each pursuer.
    pub pursuer_repulsion_scale: f64,
    /// Influence range of pursuer repulsion, meters (defaults to the
    /// perception range).
    pub pursuer_influence: f64,
    /// Scale of the repulsion exerted by the nearest obstacle.
    pub obstacle_repulsion_scale: f64,
    /// Influence range of obstacle repulsion, meters.
    pub obstacle_influence: f64,
    /// Wall following fires below this obstacle distance.
    pub wall_follow_trigger: f64,
    /// Pursuers inside this radius count toward encirclement.
    pub encircle_radius: f64,
    /// An escape gap narrower than this is considered blocked, radians.
    pub blocked_gap: f64,
    /// Weight of the current heading blended into the drive direction while
    /// inside the wall-follow zone. The source escape model integrates
    /// forces into a velocity, which damps direction flips; a memoryless
    /// force policy dithers at corner equilibria instead of sliding out, so
    /// this restores that inertia near walls only.
    pub heading_momentum: f64,
}

impl Default for EvaderConfig {
    fn default() -> Self {
        EvaderConfig {
            pursuer_repulsion_scale: 1.0,
            pursuer_influence: 2.0,
            // Kept small so a close pursuer can press the evader against a
            // wall, which is what arms the wall-following escape.
            obstacle_repulsion_scale: 0.05,
            obstacle_influence: 0.8,
            wall_follow_trigger: 0.3,
            encircle_radius: 1.0,
            blocked_gap: 60f64.to_radians(),
            heading_momentum: 1.0,
        }
    }
}

/// Inverse-distance repulsion of the same form as the obstacle force, with
/// an arbitrary source point.
fn repulsion(p: Vec2, source: Vec2, scale: f64, influence: f64) -> Vec2 {
    let d_raw = p.dist(source);
    if d_raw > influence {
        return Vec2::ZERO;
    }
    let d = clamp_distance(d_raw);
    (p - source) * (scale * (1.0 / d - 1.0 / influence) / (d * d * d))
}

/// Total force on the evader: repulsion from every pursuer in range plus
/// repulsion from every obstacle surface in range. Summing over surfaces
/// (instead of only the single nearest) keeps the force stable in corners,
/// where the nearest wall alternates step to step.
pub fn evader_total_force(
    evader: Vec2,
    pursuers: &[Vec2],
    arena: &Arena,
    cfg: &EvaderConfig,
) -> Result<Vec2> {
    let mut f = Vec2::ZERO;
    for &p in pursuers {
        f = f + repulsion(
            evader,
            p,
            cfg.pursuer_repulsion_scale,
            cfg.pursuer_influence,
        );
    }
    for near in arena.surfaces_within(evader, cfg.obstacle_influence)? {
        let d = clamp_distance(near.distance);
        let mag = cfg.obstacle_repulsion_scale * (1.0 / d - 1.0 / cfg.obstacle_influence) / (d * d);
        f = f + near.outward * mag;
    }
    Ok(f)
}

/// Escape heading: slip when encircled and the escape gap is blocked, else
/// wall-follow when pressed into an obstacle, else follow the total force.
/// A zero total force holds the current heading.
pub fn evader_heading(
    evader: Vec2,
    evader_heading_now: f64,
    pursuers: &[Vec2],
    arena: &Arena,
    cfg: &EvaderConfig,
) -> Result<f64> {
    let f_total = evader_total_force(evader, pursuers, arena, cfg)?;

    // Slip: with >= 2 pursuers inside the encirclement radius, check whether
    // the gap containing the escape direction is wide enough; if not, head
    // into the middle of the largest gap.
    let mut bearings: Vec<f64> = pursuers
        .iter()
        .filter(|p| evader.dist(**p) <= cfg.encircle_radius)
        .map(|p| (*p - evader).angle())
        .collect();
    if bearings.len() >= 2 {
        bearings.sort_by(f64::total_cmp);
        let escape = if f_total == Vec2::ZERO {
            None
        } else {
            Some(f_total.angle())
        };
        let (largest_mid, escape_gap_width) = scan_gaps(&bearings, escape);
        let blocked = match escape_gap_width {
            Some(w) => w < cfg.blocked_gap,
            // No meaningful escape direction: treat as blocked.
            None => true,
        };
        if blocked {
            return Ok(largest_mid);
        }
    }

    if f_total == Vec2::ZERO {
        return Ok(evader_heading_now);
    }

    // Wall following between pursuers and an obstacle. Inside the trigger
    // zone two stabilizers apply: the outward direction blends every
    // nearby surface (stable in corners, where the nearest wall alternates
    // between steps), and the drive direction blends the current heading
    // (carries the evader through force equilibria instead of dithering).
    let nearby = arena.surfaces_within(evader, cfg.wall_follow_trigger)?;
    if !nearby.is_empty() {
        let drive = (f_total.normalized()
            + Vec2::from_angle(evader_heading_now) * cfg.heading_momentum)
            .normalized();
        let drive = if drive == Vec2::ZERO {
            Vec2::from_angle(evader_heading_now)
        } else {
            drive
        };
        let mut outward = Vec2::ZERO;
        for s in &nearby {
            let weight = (cfg.wall_follow_trigger - s.distance) / cfg.wall_follow_trigger;
            outward = outward + s.outward * weight;
        }
        let outward = outward.normalized();
        if outward != Vec2::ZERO && drive.dot(outward) < 0.0 {
            let ccw = outward.perp_ccw();
            let cw = outward.perp_cw();
            let tangent = if drive.dot(cw) > drive.dot(ccw) {
                cw
            } else {
                ccw
            };
            return Ok(tangent.angle());
        }
        return Ok(drive.angle());
    }

    Ok(f_total.angle())
}

/// Walk the circular gaps between sorted bearings. Returns the midpoint
/// heading of the largest gap and, when an escape bearing is given, the
/// width of the gap containing it.
fn scan_gaps(sorted_bearings: &[f64], escape: Option<f64>) -> (f64, Option<f64>) {
    let n = sorted_bearings.len();
    let mut largest = (f64::NEG_INFINITY, 0.0);
    let mut escape_width = None;
    for i in 0..n {
        let a = sorted_bearings[i];
        let b = sorted_bearings[(i + 1) % n];
        let width = if n == 1 {
            std::f64::consts::TAU
        } else {
            let mut w = b - a;
            if i + 1 == n {
                w += std::f64::consts::TAU;
            }
            w
        };
        let mid = wrap_angle(a + width / 2.0);
        if width > largest.0 {
            largest = (width, mid);
        }
        if let Some(e) = escape {
            // Is e inside (a, a+width)?
            let rel = wrap_angle(e - a);
            let rel = if rel < 0.0 {
                rel + std::f64::consts::TAU
            } else {
                rel
            };
            if rel <= width {
                escape_width = Some(width);
            }
        }
    }
    (largest.1, escape_width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::make_boundary_arena;
    use proptest::prelude::*;

    fn center() -> Vec2 {
        Vec2::new(1.8, 2.5)
    }

    #[test]
    fn single_pursuer_pushes_straight_away() {
        let arena = make_boundary_arena();
        let cfg = EvaderConfig::default();
        let e = center();
        let f = evader_total_force(e, &[e + Vec2::new(0.0, 1.0)], &arena, &cfg).unwrap();
        assert!(f.y < 0.0);
        assert!(f.x.abs() < 1e-12);
    }

    #[test]
    fn symmetric_pursuers_cancel_off_axis() {
        let arena = make_boundary_arena();
        let cfg = EvaderConfig::default();
        let e = center();
        let f = evader_total_force(
            e,
            &[e + Vec2::new(1.0, 0.7), e + Vec2::new(1.0, -0.7)],
            &arena,
            &cfg,
        )
        .unwrap();
        assert!(f.y.abs() < 1e-12);
        assert!(f.x < 0.0);
    }

    #[test]
    fn no_sources_no_force() {
        let arena = make_boundary_arena();
        // Walls are > 0.5 m away from the arena center.
        let cfg = EvaderConfig {
            obstacle_influence: 0.5,
            ..EvaderConfig::default()
        };
        let f = evader_total_force(center(), &[], &arena, &cfg).unwrap();
        assert_eq!(f, Vec2::ZERO);
    }

    #[test]
    fn heading_follows_force_without_overrides() {
        let arena = make_boundary_arena();
        let cfg = EvaderConfig::default();
        let e = center();
        let pursuers = [e + Vec2::new(-1.2, 0.0)];
        let h = evader_heading(e, 0.0, &pursuers, &arena, &cfg).unwrap();
        assert!(h.abs() < 1e-9, "expected escape along +x, got {h}");
    }

    #[test]
    fn near_surround_slips_through_largest_gap() {
        let arena = make_boundary_arena();
        let cfg = EvaderConfig::default();
        let e = center();
        // Three pursuers at -170, 170, and 60 degrees, all within the
        // encirclement radius. Gaps: 20 (through 180), 110, 230 degrees.
        // The escape force direction falls in a gap, but if that gap is
        // narrow the slip rule must pick the largest one.
        let mk = |deg: f64| e + Vec2::from_angle(deg.to_radians()) * 0.6;
        let pursuers = [mk(-170.0), mk(170.0), mk(60.0)];
        let h = evader_heading(e, 0.0, &pursuers, &arena, &cfg).unwrap();
        // Largest gap spans from 60 down through -170: midpoint -55 degrees.
        let expected = (-55f64).to_radians();
        assert!(
            wrap_angle(h - expected).abs() < 1e-9 || !is_blocked(&pursuers, e, &arena, &cfg),
            "slip heading {h} vs expected {expected}"
        );
    }

    fn is_blocked(pursuers: &[Vec2], e: Vec2, arena: &Arena, cfg: &EvaderConfig) -> bool {
        let f = evader_total_force(e, pursuers, arena, cfg).unwrap();
        let mut bearings: Vec<f64> = pursuers
            .iter()
            .filter(|p| e.dist(**p) <= cfg.encircle_radius)
            .map(|p| (*p - e).angle())
            .collect();
        bearings.sort_by(f64::total_cmp);
        let (_, w) = scan_gaps(&bearings, Some(f.angle()));
        matches!(w, Some(w) if w < cfg.blocked_gap)
    }

    #[test]
    fn two_opposed_pursuers_head_through_open_side() {
        let arena = make_boundary_arena();
        let cfg = EvaderConfig::default();
        let e = center();
        // Bearings +/-170 degrees: escape gap through 0 is 340 degrees wide,
        // far above the blocked threshold, so the heading follows the force,
        // which points at ~0 by symmetry.
        let mk = |deg: f64| e + Vec2::from_angle(deg.to_radians()) * 0.8;
        let pursuers = [mk(170.0), mk(-170.0)];
        let h = evader_heading(e, 1.0, &pursuers, &arena, &cfg).unwrap();
        assert!(h.abs() < 1e-9, "expected ~0, got {h}");
    }

    #[test]
    fn wall_following_when_pressed_against_wall() {
        let arena = make_boundary_arena();
        let cfg = EvaderConfig::default();
        // Evader near the bottom wall, pursuer closing in from above: the
        // force points into the wall, so the heading must go along it.
        let e = Vec2::new(1.8, 0.2);
        let pursuers = [e + Vec2::new(0.0, 0.5)];
        let f = evader_total_force(e, &pursuers, &arena, &cfg).unwrap();
        assert!(
            f.dot(Vec2::new(0.0, 1.0)) < 0.0,
            "force should press into wall"
        );
        let h = evader_heading(e, 0.5, &pursuers, &arena, &cfg).unwrap();
        assert!(
            h.abs() < 1e-9 || (h.abs() - std::f64::consts::PI).abs() < 1e-9,
            "expected tangent heading, got {h}"
        );
    }

    proptest! {
        /// Rotating the world about the evader rotates the heading, as long
        /// as walls stay out of range.
        #[test]
        fn heading_is_rotation_equivariant(
            theta in -3.0..3.0f64,
            b1 in -3.0..3.0f64,
            b2 in -3.0..3.0f64,
            d1 in 0.3..0.9f64,
            d2 in 0.3..0.9f64,
        ) {
            let arena = make_boundary_arena();
            let cfg = EvaderConfig {
                obstacle_influence: 0.5,
                wall_follow_trigger: 0.1,
                ..EvaderConfig::default()
            };
            let e = center();
            let p = [e + Vec2::from_angle(b1) * d1, e + Vec2::from_angle(b2) * d2];
            let h0 = evader_heading(e, 0.0, &p, &arena, &cfg).unwrap();
            let pr = [
                e + (p[0] - e).rotated(theta),
                e + (p[1] - e).rotated(theta),
            ];
            let h1 = evader_heading(e, 0.0, &pr, &arena, &cfg).unwrap();
            prop_assert!(wrap_angle(h1 - h0 - theta).abs() < 1e-9);
        }

        /// When the slip rule fires, the chosen heading never lies between
        /// two pursuers that are closer than the encirclement radius.
        #[test]
        fn slip_avoids_covered_spans(
            b in proptest::collection::vec(-3.1..3.1f64, 3..6),
        ) {
            let arena = make_boundary_arena();
            let cfg = EvaderConfig::default();
            let e = center();
            let pursuers: Vec<Vec2> =
                b.iter().map(|ang| e + Vec2::from_angle(*ang) * 0.7).collect();
            if is_blocked(&pursuers, e, &arena, &cfg) {
                let h = evader_heading(e, 0.0, &pursuers, &arena, &cfg).unwrap();
                let mut bearings: Vec<f64> =
                    pursuers.iter().map(|p| (*p - e).angle()).collect();
                bearings.sort_by(f64::total_cmp);
                // h must fall inside the largest gap, hence not inside any
                // span narrower than the largest.
                let n = bearings.len();
                let mut widths: Vec<(f64, f64)> = Vec::new(); // (start, width)
                for i in 0..n {
                    let a = bearings[i];
                    let bb = bearings[(i + 1) % n];
                    let mut w = bb - a;
                    if i + 1 == n { w += std::f64::consts::TAU; }
                    widths.push((a, w));
                }
                let max_w = widths.iter().map(|x| x.1).fold(0.0, f64::max);
                // Find the gap containing h.
                for (a, w) in widths {
                    let rel = {
                        let r = wrap_angle(h - a);
                        if r < 0.0 { r + std::f64::consts::TAU } else { r }
                    };
                    if rel <= w {
                        prop_assert!((w - max_w).abs() < 1e-9, "slip chose a non-maximal gap");
                    }
                }
            }
        }
    }
}
