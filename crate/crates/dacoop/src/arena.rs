//! Arena geometry: obstacles, distance queries, the canonical arena layouts,
//! and a line-oriented text format for pinning validation arenas.
//!
//! The four boundary walls are always implicit obstacles; every distance
//! query folds them in. Arenas are immutable after construction and safe to
//! share read-only across workers.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{clamp_distance, Vec2, MIN_DISTANCE};

/// Default arena footprint in meters.
pub const ARENA_WIDTH: f64 = 3.6;
pub const ARENA_HEIGHT: f64 = 5.0;

/// Safety radius used as the clearance margin by the generators.
const SPAWN_MARGIN: f64 = 0.1;
/// Minimum surface-to-surface gap between generated circles (2 * safe radius).
const CIRCLE_GAP: f64 = 0.2;
/// Clearance kept between generated circles and the boundary walls.
const WALL_GAP: f64 = 0.4;
const CIRCLE_RADIUS_RANGE: (f64, f64) = (0.2, 0.4);
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Axis-aligned rectangle, used for spawn regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Rect { min, max }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec2 {
        Vec2::new(
            rng.gen_range(self.min.x..=self.max.x),
            rng.gen_range(self.min.y..=self.max.y),
        )
    }

    /// Distance from `p` to this rectangle (zero inside).
    pub fn dist_to_point(&self, p: Vec2) -> f64 {
        let dx = (self.min.x - p.x).max(0.0).max(p.x - self.max.x);
        let dy = (self.min.y - p.y).max(0.0).max(p.y - self.max.y);
        dx.hypot(dy)
    }
}

/// A static obstacle: a convex counter-clockwise polygon or a circle.
#[derive(Debug, Clone, PartialEq)]
pub enum Obstacle {
    Polygon(Vec<Vec2>),
    Circle { center: Vec2, radius: f64 },
}

impl Obstacle {
    /// Convenience constructor for axis-aligned rectangular obstacles.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Obstacle {
        Obstacle::Polygon(vec![
            Vec2::new(x0, y0),
            Vec2::new(x1, y0),
            Vec2::new(x1, y1),
            Vec2::new(x0, y1),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Obstacle::Circle { radius, center } => {
                if !radius.is_finite() || *radius <= 0.0 || !center.is_finite() {
                    return Err(Error::Geometry(format!(
                        "circle needs finite center and positive radius, got r={radius}"
                    )));
                }
            }
            Obstacle::Polygon(vs) => {
                if vs.len() < 3 {
                    return Err(Error::Geometry("polygon needs at least 3 vertices".into()));
                }
                if vs.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Geometry("polygon vertex not finite".into()));
                }
                let area2: f64 = vs
                    .iter()
                    .zip(vs.iter().cycle().skip(1))
                    .map(|(a, b)| a.cross(*b))
                    .sum();
                if area2 <= 0.0 {
                    return Err(Error::Geometry(
                        "polygon vertices must be counter-clockwise".into(),
                    ));
                }
                // Convexity (all left turns) implies no self-intersection.
                let n = vs.len();
                for i in 0..n {
                    let a = vs[i];
                    let b = vs[(i + 1) % n];
                    let c = vs[(i + 2) % n];
                    if (b - a).cross(c - b) < 0.0 {
                        return Err(Error::Geometry("polygon must be convex".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Closest point on the obstacle surface and its Euclidean distance.
    /// The distance is measured to the boundary, so it is >= 0 even for
    /// points inside the obstacle.
    pub fn nearest_surface_point(&self, p: Vec2) -> (Vec2, f64) {
        match self {
            Obstacle::Circle { center, radius } => {
                let to_p = p - *center;
                let d = to_p.norm();
                if d < MIN_DISTANCE {
                    // Degenerate: centered exactly; pick +x arbitrarily but fixed.
                    let q = *center + Vec2::new(*radius, 0.0);
                    (q, *radius)
                } else {
                    let q = *center + to_p * (*radius / d);
                    (q, (d - *radius).abs())
                }
            }
            Obstacle::Polygon(vs) => {
                let n = vs.len();
                let mut best = (vs[0], f64::INFINITY);
                for i in 0..n {
                    let q = nearest_on_segment(p, vs[i], vs[(i + 1) % n]);
                    let d = p.dist(q);
                    if d < best.1 {
                        best = (q, d);
                    }
                }
                best
            }
        }
    }

    /// True when `p` is strictly inside the obstacle.
    pub fn contains(&self, p: Vec2) -> bool {
        match self {
            Obstacle::Circle { center, radius } => p.dist(*center) < *radius,
            Obstacle::Polygon(vs) => {
                let n = vs.len();
                (0..n).all(|i| (vs[(i + 1) % n] - vs[i]).cross(p - vs[i]) > 0.0)
            }
        }
    }

    /// Unit direction pointing away from the obstacle interior at `p`.
    pub fn outward_at(&self, p: Vec2) -> Vec2 {
        let (q, d) = self.nearest_surface_point(p);
        if d >= MIN_DISTANCE {
            if self.contains(p) {
                (q - p).normalized()
            } else {
                (p - q).normalized()
            }
        } else {
            match self {
                Obstacle::Circle { center, .. } => {
                    let v = p - *center;
                    if v.norm() < MIN_DISTANCE {
                        Vec2::new(1.0, 0.0)
                    } else {
                        v.normalized()
                    }
                }
                Obstacle::Polygon(vs) => {
                    // On the boundary: outward normal of the nearest edge.
                    let n = vs.len();
                    let mut best = (0usize, f64::INFINITY);
                    for i in 0..n {
                        let q = nearest_on_segment(p, vs[i], vs[(i + 1) % n]);
                        let d = p.dist(q);
                        if d < best.1 {
                            best = (i, d);
                        }
                    }
                    let a = vs[best.0];
                    let b = vs[(best.0 + 1) % n];
                    (b - a).perp_cw().normalized()
                }
            }
        }
    }
}

fn nearest_on_segment(p: Vec2, a: Vec2, b: Vec2) -> Vec2 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return a;
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Shortest distance between two segments.
fn segment_segment_dist(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> f64 {
    if segments_intersect(a0, a1, b0, b1) {
        return 0.0;
    }
    let d1 = a0.dist(nearest_on_segment(a0, b0, b1));
    let d2 = a1.dist(nearest_on_segment(a1, b0, b1));
    let d3 = b0.dist(nearest_on_segment(b0, a0, a1));
    let d4 = b1.dist(nearest_on_segment(b1, a0, a1));
    d1.min(d2).min(d3).min(d4)
}

fn segments_intersect(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> bool {
    let d = |p: Vec2, q: Vec2, r: Vec2| (q - p).cross(r - p);
    let d1 = d(b0, b1, a0);
    let d2 = d(b0, b1, a1);
    let d3 = d(a0, a1, b0);
    let d4 = d(a0, a1, b1);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// The pursuit arena: bounds, static obstacles, and the two spawn bands.
#[derive(Debug, Clone, PartialEq)]
pub struct Arena {
    pub width: f64,
    pub height: f64,
    pub obstacles: Vec<Obstacle>,
    pub pursuer_spawn: Rect,
    pub evader_spawn: Rect,
}

/// Result of a nearest-obstacle query.
#[derive(Debug, Clone, Copy)]
pub struct NearestObstacle {
    /// Closest point on any obstacle surface (walls included).
    pub point: Vec2,
    pub distance: f64,
    /// Unit direction away from the obstacle at the query point.
    pub outward: Vec2,
}

impl Arena {
    pub fn new(
        width: f64,
        height: f64,
        obstacles: Vec<Obstacle>,
        pursuer_spawn: Rect,
        evader_spawn: Rect,
    ) -> Result<Arena> {
        let arena = Arena {
            width,
            height,
            obstacles,
            pursuer_spawn,
            evader_spawn,
        };
        arena.validate()?;
        Ok(arena)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::Geometry("arena bounds must be positive".into()));
        }
        for o in &self.obstacles {
            o.validate()?;
        }
        for (label, r) in [
            ("pursuer_spawn", &self.pursuer_spawn),
            ("evader_spawn", &self.evader_spawn),
        ] {
            if r.min.x < 0.0 || r.min.y < 0.0 || r.max.x > self.width || r.max.y > self.height {
                return Err(Error::Geometry(format!("{label} exceeds arena bounds")));
            }
            if r.min.x >= r.max.x || r.min.y >= r.max.y {
                return Err(Error::Geometry(format!("{label} is empty")));
            }
            for o in &self.obstacles {
                if self.spawn_obstacle_dist(r, o) < SPAWN_MARGIN {
                    return Err(Error::Geometry(format!(
                        "{label} is not clear of obstacles by the spawn margin"
                    )));
                }
            }
        }
        Ok(())
    }

    fn spawn_obstacle_dist(&self, r: &Rect, o: &Obstacle) -> f64 {
        let corners = [
            r.min,
            Vec2::new(r.max.x, r.min.y),
            r.max,
            Vec2::new(r.min.x, r.max.y),
        ];
        match o {
            Obstacle::Circle { center, radius } => (r.dist_to_point(*center) - radius).max(0.0),
            Obstacle::Polygon(vs) => {
                if vs.iter().any(|v| r.contains(*v)) || corners.iter().any(|c| o.contains(*c)) {
                    return 0.0;
                }
                let n = vs.len();
                let mut best = f64::INFINITY;
                for i in 0..n {
                    let (p0, p1) = (vs[i], vs[(i + 1) % n]);
                    for j in 0..4 {
                        let (q0, q1) = (corners[j], corners[(j + 1) % 4]);
                        best = best.min(segment_segment_dist(p0, p1, q0, q1));
                    }
                }
                best
            }
        }
    }

    pub fn in_bounds(&self, p: Vec2) -> bool {
        p.x >= 0.0 && p.x <= self.width && p.y >= 0.0 && p.y <= self.height
    }

    /// Closest point on any obstacle surface (boundary walls included) and
    /// its distance. Errors when `p` lies outside the arena bounds.
    pub fn nearest_obstacle_point(&self, p: Vec2) -> Result<(Vec2, f64)> {
        let q = self.nearest_obstacle(p)?;
        Ok((q.point, q.distance))
    }

    /// Like [`nearest_obstacle_point`](Self::nearest_obstacle_point) but also
    /// reports the outward direction, which wall following needs.
    pub fn nearest_obstacle(&self, p: Vec2) -> Result<NearestObstacle> {
        if !self.in_bounds(p) {
            return Err(Error::Geometry(format!(
                "point ({}, {}) outside arena bounds",
                p.x, p.y
            )));
        }
        // Boundary walls first.
        let wall_candidates = [
            (Vec2::new(0.0, p.y), p.x, Vec2::new(1.0, 0.0)),
            (
                Vec2::new(self.width, p.y),
                self.width - p.x,
                Vec2::new(-1.0, 0.0),
            ),
            (Vec2::new(p.x, 0.0), p.y, Vec2::new(0.0, 1.0)),
            (
                Vec2::new(p.x, self.height),
                self.height - p.y,
                Vec2::new(0.0, -1.0),
            ),
        ];
        let mut best = NearestObstacle {
            point: p,
            distance: f64::INFINITY,
            outward: Vec2::new(1.0, 0.0),
        };
        for (point, distance, inward) in wall_candidates {
            if distance < best.distance {
                let outward = if distance >= MIN_DISTANCE {
                    (p - point).normalized()
                } else {
                    inward
                };
                best = NearestObstacle {
                    point,
                    distance,
                    outward,
                };
            }
        }
        for o in &self.obstacles {
            let (point, distance) = o.nearest_surface_point(p);
            if distance < best.distance {
                best = NearestObstacle {
                    point,
                    distance,
                    outward: o.outward_at(p),
                };
            }
        }
        Ok(best)
    }

    /// Every obstacle surface (each of the four walls separately, plus each
    /// obstacle) within `range` of `p`. Corners report both adjacent walls,
    /// which lets callers blend a stable outward direction there.
    pub fn surfaces_within(&self, p: Vec2, range: f64) -> Result<Vec<NearestObstacle>> {
        if !self.in_bounds(p) {
            return Err(Error::Geometry(format!(
                "point ({}, {}) outside arena bounds",
                p.x, p.y
            )));
        }
        let mut out = Vec::new();
        let wall_candidates = [
            (Vec2::new(0.0, p.y), p.x, Vec2::new(1.0, 0.0)),
            (
                Vec2::new(self.width, p.y),
                self.width - p.x,
                Vec2::new(-1.0, 0.0),
            ),
            (Vec2::new(p.x, 0.0), p.y, Vec2::new(0.0, 1.0)),
            (
                Vec2::new(p.x, self.height),
                self.height - p.y,
                Vec2::new(0.0, -1.0),
            ),
        ];
        for (point, distance, inward) in wall_candidates {
            if distance <= range {
                let outward = if distance >= MIN_DISTANCE {
                    (p - point).normalized()
                } else {
                    inward
                };
                out.push(NearestObstacle {
                    point,
                    distance,
                    outward,
                });
            }
        }
        for o in &self.obstacles {
            let (point, distance) = o.nearest_surface_point(p);
            if distance <= range {
                out.push(NearestObstacle {
                    point,
                    distance,
                    outward: o.outward_at(p),
                });
            }
        }
        Ok(out)
    }

    /// True when a disc of radius `margin` centered at `p` is free of every
    /// obstacle surface (walls included).
    pub fn is_clear(&self, p: Vec2, margin: f64) -> bool {
        match self.nearest_obstacle_point(p) {
            Ok((_, d)) => d >= margin && !self.obstacles.iter().any(|o| o.contains(p)),
            Err(_) => false,
        }
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }
}

fn default_spawns() -> (Rect, Rect) {
    let pursuer = Rect::new(Vec2::new(0.3, 0.3), Vec2::new(3.3, 1.0));
    let evader = Rect::new(Vec2::new(0.3, 4.0), Vec2::new(3.3, 4.7));
    (pursuer, evader)
}

/// The canonical training arena: five fixed rectangular obstacles between the
/// spawn bands. The layout is frozen so experiments reproduce bit-for-bit.
pub fn make_training_arena() -> Arena {
    let (pursuer_spawn, evader_spawn) = default_spawns();
    Arena::new(
        ARENA_WIDTH,
        ARENA_HEIGHT,
        vec![
            Obstacle::rect(0.0, 3.0, 0.9, 3.2),
            Obstacle::rect(2.7, 3.0, 3.6, 3.2),
            Obstacle::rect(1.5, 2.3, 2.1, 2.5),
            Obstacle::rect(0.7, 1.5, 0.9, 2.1),
            Obstacle::rect(2.7, 1.5, 2.9, 2.1),
        ],
        pursuer_spawn,
        evader_spawn,
    )
    .expect("canonical training arena is valid")
}

/// Validation arena with the boundary walls only.
pub fn make_boundary_arena() -> Arena {
    let (pursuer_spawn, evader_spawn) = default_spawns();
    Arena::new(
        ARENA_WIDTH,
        ARENA_HEIGHT,
        Vec::new(),
        pursuer_spawn,
        evader_spawn,
    )
    .expect("boundary arena is valid")
}

/// Validation arena with five random non-overlapping circles, clear of both
/// spawn bands. Deterministic given the RNG stream.
pub fn make_circle_arena(rng: &mut impl Rng) -> Result<Arena> {
    let (pursuer_spawn, evader_spawn) = default_spawns();
    let mut circles: Vec<(Vec2, f64)> = Vec::with_capacity(5);
    for _ in 0..5 {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let r = rng.gen_range(CIRCLE_RADIUS_RANGE.0..=CIRCLE_RADIUS_RANGE.1);
            let x = rng.gen_range(r + WALL_GAP..=ARENA_WIDTH - r - WALL_GAP);
            let y_lo = pursuer_spawn.max.y + SPAWN_MARGIN + r;
            let y_hi = evader_spawn.min.y - SPAWN_MARGIN - r;
            let y = rng.gen_range(y_lo..=y_hi);
            let c = Vec2::new(x, y);
            let ok = circles
                .iter()
                .all(|(c2, r2)| c.dist(*c2) >= r + r2 + CIRCLE_GAP);
            if ok {
                circles.push((c, r));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place circle {} after {} attempts",
                circles.len() + 1,
                MAX_PLACEMENT_ATTEMPTS
            )));
        }
    }
    Arena::new(
        ARENA_WIDTH,
        ARENA_HEIGHT,
        circles
            .into_iter()
            .map(|(center, radius)| Obstacle::Circle { center, radius })
            .collect(),
        pursuer_spawn,
        evader_spawn,
    )
}

// --- serialization -------------------------------------------------------
//
// Versioned, line-oriented text format:
//
//   dacoop-arena v1
//   size <width> <height>
//   pursuer_spawn <x0> <y0> <x1> <y1>
//   evader_spawn <x0> <y0> <x1> <y1>
//   polygon <x> <y> <x> <y> ...        (counter-clockwise vertices)
//   circle <cx> <cy> <radius>
//
// Floats are written in Rust's shortest round-trip form, so save/load is
// bit-exact.

const ARENA_MAGIC: &str = "dacoop-arena v1";

impl Arena {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{ARENA_MAGIC}");
        let _ = writeln!(s, "size {} {}", self.width, self.height);
        for (name, r) in [
            ("pursuer_spawn", &self.pursuer_spawn),
            ("evader_spawn", &self.evader_spawn),
        ] {
            let _ = writeln!(s, "{name} {} {} {} {}", r.min.x, r.min.y, r.max.x, r.max.y);
        }
        for o in &self.obstacles {
            match o {
                Obstacle::Polygon(vs) => {
                    let _ = write!(s, "polygon");
                    for v in vs {
                        let _ = write!(s, " {} {}", v.x, v.y);
                    }
                    let _ = writeln!(s);
                }
                Obstacle::Circle { center, radius } => {
                    let _ = writeln!(s, "circle {} {} {}", center.x, center.y, radius);
                }
            }
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Arena> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, magic) = lines
            .next()
            .ok_or_else(|| err(1, "empty arena file".into()))?;
        if magic.trim() != ARENA_MAGIC {
            return Err(err(1, format!("expected header '{ARENA_MAGIC}'")));
        }
        let mut size = None;
        let mut pursuer_spawn = None;
        let mut evader_spawn = None;
        let mut obstacles = Vec::new();
        for (idx, raw) in lines {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let nums: Vec<f64> = parts
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| err(lineno, format!("bad number '{t}'")))
                })
                .collect::<Result<_>>()?;
            match key {
                "size" => {
                    if nums.len() != 2 {
                        return Err(err(lineno, "size takes 2 numbers".into()));
                    }
                    size = Some((nums[0], nums[1]));
                }
                "pursuer_spawn" | "evader_spawn" => {
                    if nums.len() != 4 {
                        return Err(err(lineno, format!("{key} takes 4 numbers")));
                    }
                    let r = Rect::new(Vec2::new(nums[0], nums[1]), Vec2::new(nums[2], nums[3]));
                    if key == "pursuer_spawn" {
                        pursuer_spawn = Some(r);
                    } else {
                        evader_spawn = Some(r);
                    }
                }
                "polygon" => {
                    if nums.len() < 6 || !nums.len().is_multiple_of(2) {
                        return Err(err(lineno, "polygon takes >= 3 x,y pairs".into()));
                    }
                    let vs = nums.chunks(2).map(|c| Vec2::new(c[0], c[1])).collect();
                    obstacles.push(Obstacle::Polygon(vs));
                }
                "circle" => {
                    if nums.len() != 3 {
                        return Err(err(lineno, "circle takes 3 numbers".into()));
                    }
                    obstacles.push(Obstacle::Circle {
                        center: Vec2::new(nums[0], nums[1]),
                        radius: nums[2],
                    });
                }
                other => return Err(err(lineno, format!("unknown directive '{other}'"))),
            }
        }
        let (width, height) = size.ok_or_else(|| err(0, "missing size line".into()))?;
        let pursuer_spawn = pursuer_spawn.ok_or_else(|| err(0, "missing pursuer_spawn".into()))?;
        let evader_spawn = evader_spawn.ok_or_else(|| err(0, "missing evader_spawn".into()))?;
        Arena::new(width, height, obstacles, pursuer_spawn, evader_spawn)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Arena> {
        let text = std::fs::read_to_string(path)?;
        Arena::from_text(&text, path)
    }
}

/// Clamp helper used when a distance feeds a division.
pub fn guarded(d: f64) -> f64 {
    clamp_distance(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn boundary() -> Arena {
        make_boundary_arena()
    }

    #[test]
    fn nearest_wall_in_empty_arena() {
        let a = boundary();
        let (point, d) = a.nearest_obstacle_point(Vec2::new(1.8, 2.5)).unwrap();
        assert!((d - 1.8).abs() < 1e-12);
        // Nearest is one of the two side walls, both 1.8 m away.
        assert!(point.x.abs() < 1e-12 || (point.x - 3.6).abs() < 1e-12);
    }

    #[test]
    fn point_on_wall_has_zero_distance() {
        let a = boundary();
        let p = Vec2::new(0.0, 2.0);
        let (point, d) = a.nearest_obstacle_point(p).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(point, p);
    }

    #[test]
    fn circle_obstacle_collinear_case() {
        let a = Arena::new(
            3.6,
            5.0,
            vec![Obstacle::Circle {
                center: Vec2::new(1.0, 2.0),
                radius: 0.3,
            }],
            Rect::new(Vec2::new(0.3, 0.3), Vec2::new(3.3, 1.0)),
            Rect::new(Vec2::new(0.3, 4.0), Vec2::new(3.3, 4.7)),
        )
        .unwrap();
        let (point, d) = a.nearest_obstacle_point(Vec2::new(1.0, 1.0)).unwrap();
        assert!((d - 0.7).abs() < 1e-12);
        assert!((point.x - 1.0).abs() < 1e-12);
        assert!((point.y - 1.7).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_is_an_error() {
        let a = boundary();
        assert!(a.nearest_obstacle_point(Vec2::new(-0.1, 1.0)).is_err());
        assert!(a.nearest_obstacle_point(Vec2::new(1.0, 5.1)).is_err());
    }

    #[test]
    fn boundary_arena_has_no_interior_obstacles() {
        assert_eq!(make_boundary_arena().obstacles.len(), 0);
    }

    #[test]
    fn training_arena_is_valid_with_five_obstacles() {
        let a = make_training_arena();
        assert_eq!(a.obstacles.len(), 5);
        a.validate().unwrap();
    }

    #[test]
    fn circle_arena_is_deterministic_per_seed() {
        let a = make_circle_arena(&mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = make_circle_arena(&mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        let c = make_circle_arena(&mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn circle_arena_respects_clearances() {
        for seed in 0..20 {
            let a = make_circle_arena(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a.obstacles.len(), 5);
            let circles: Vec<(Vec2, f64)> = a
                .obstacles
                .iter()
                .map(|o| match o {
                    Obstacle::Circle { center, radius } => (*center, *radius),
                    _ => panic!("expected circles"),
                })
                .collect();
            for i in 0..circles.len() {
                for j in i + 1..circles.len() {
                    let gap = circles[i].0.dist(circles[j].0) - circles[i].1 - circles[j].1;
                    assert!(gap >= CIRCLE_GAP - 1e-12, "gap {gap} too small");
                }
            }
            a.validate().unwrap();
        }
    }

    #[test]
    fn serialization_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for arena in [
            make_training_arena(),
            make_boundary_arena(),
            make_circle_arena(&mut rng).unwrap(),
        ] {
            let text = arena.to_text();
            let back = Arena::from_text(&text, Path::new("<mem>")).unwrap();
            assert_eq!(arena, back);
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = "dacoop-arena v1\nsize 3.6 5\npursuer_spawn 0.3 0.3 3.3 1\nevader_spawn 0.3 4 3.3 4.7\nwedge 1 2 3\n";
        match Arena::from_text(bad, Path::new("bad.arena")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    /// Brute-force oracle: sample obstacle boundaries at 1 mm resolution and
    /// take the minimum distance; the analytic query must agree within 2 mm.
    #[test]
    fn nearest_distance_matches_sampled_oracle() {
        let arena = make_training_arena();
        let step = 0.001;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let p = Vec2::new(
                rng.gen_range(0.0..arena.width),
                rng.gen_range(0.0..arena.height),
            );
            let (_, analytic) = arena.nearest_obstacle_point(p).unwrap();
            let mut sampled = f64::INFINITY;
            // Walls.
            let mut t = 0.0;
            while t <= arena.width {
                sampled = sampled.min(p.dist(Vec2::new(t, 0.0)));
                sampled = sampled.min(p.dist(Vec2::new(t, arena.height)));
                t += step;
            }
            let mut t = 0.0;
            while t <= arena.height {
                sampled = sampled.min(p.dist(Vec2::new(0.0, t)));
                sampled = sampled.min(p.dist(Vec2::new(arena.width, t)));
                t += step;
            }
            for o in &arena.obstacles {
                if let Obstacle::Polygon(vs) = o {
                    for i in 0..vs.len() {
                        let (a, b) = (vs[i], vs[(i + 1) % vs.len()]);
                        let len = a.dist(b);
                        let n = (len / step).ceil() as usize;
                        for k in 0..=n {
                            let q = a + (b - a) * (k as f64 / n as f64);
                            sampled = sampled.min(p.dist(q));
                        }
                    }
                }
            }
            assert!(
                (analytic - sampled).abs() < 0.002,
                "analytic {analytic} vs sampled {sampled} at {p:?}"
            );
        }
    }
}
