//! Ordered-curve primitives: arc length, uniform resampling, turning
//! decomposition (per-vertex rotation vectors), curve rebuilding, rotation
//! minimizing frames, and small rotation helpers.
//!
//! Everything here operates on polylines whose point order is semantically
//! meaningful; no operation sorts, deduplicates, or smooths.

use nalgebra::{Rotation3, Unit, Vector3};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;

/// Segments shorter than this are treated as degenerate.
pub const MIN_SEG_LEN: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("characteristic line needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("consecutive points {0} and {1} coincide (segment length <= {MIN_SEG_LEN} mm)")]
    DegenerateSegment(usize, usize),
    #[error("polyline is degenerate (total length <= {MIN_SEG_LEN} mm)")]
    DegenerateLine,
    #[error("resample target must have at least 2 points, got {0}")]
    BadResampleCount(usize),
    #[error("anti-parallel directions at index {0}: rotation axis is ambiguous")]
    AntiParallel(usize),
    #[error("seed normal is parallel to the first tangent")]
    SeedParallel,
}

/// An ordered 3D polyline (mm). The characteristic line of a workpiece or mold.
#[derive(Debug, Clone, PartialEq)]
pub struct CharLine {
    points: Vec<Point3>,
}

impl CharLine {
    /// Validates and wraps an ordered point sequence.
    pub fn new(points: Vec<Point3>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(GeometryError::NonFinite(i));
            }
        }
        for i in 0..points.len() - 1 {
            if (points[i + 1] - points[i]).norm() <= MIN_SEG_LEN {
                return Err(GeometryError::DegenerateSegment(i, i + 1));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: at least two points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    /// A straight line from the origin along +x with `m` points (mm).
    pub fn straight_x(length: f64, m: usize) -> Result<Self, GeometryError> {
        if m < 2 {
            return Err(GeometryError::TooFewPoints(m));
        }
        let pts = (0..m)
            .map(|i| Point3::new(length * i as f64 / (m - 1) as f64, 0.0, 0.0))
            .collect();
        Self::new(pts)
    }
}

/// Segment-wise turning representation of a polyline: start pose, segment
/// lengths, and the rotation vector carrying each segment direction into the
/// next. Scaling the turn angles and rebuilding models elastic recovery.
#[derive(Debug, Clone)]
pub struct TurningDecomposition {
    pub start_point: Point3,
    pub start_dir: Vec3,
    pub seg_lengths: Vec<f64>,
    pub turns: Vec<Vec3>,
}

/// Right-handed orthonormal frame attached to a curve point.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub origin: Point3,
    pub tangent: Vec3,
    pub normal: Vec3,
    pub binormal: Vec3,
}

/// Total polyline length (mm).
pub fn arc_length(line: &CharLine) -> f64 {
    let p = line.points();
    p.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Cumulative arc length at each vertex, starting at 0.
pub fn cumulative_lengths(line: &CharLine) -> Vec<f64> {
    let p = line.points();
    let mut acc = Vec::with_capacity(p.len());
    let mut s = 0.0;
    acc.push(0.0);
    for w in p.windows(2) {
        s += (w[1] - w[0]).norm();
        acc.push(s);
    }
    acc
}

/// Point at arc-length parameter `s` (clamped to [0, total]) by linear
/// interpolation along the polyline.
pub fn point_at_arclength(line: &CharLine, s: f64) -> Point3 {
    let cum = cumulative_lengths(line);
    let total = *cum.last().unwrap();
    let s = s.clamp(0.0, total);
    let pts = line.points();
    // first index with cum[i] >= s
    let i = cum.partition_point(|&c| c < s);
    if i == 0 {
        return pts[0];
    }
    let (a, b) = (i - 1, i.min(pts.len() - 1));
    let seg = cum[b] - cum[a];
    if seg <= MIN_SEG_LEN {
        return pts[b];
    }
    let t = (s - cum[a]) / seg;
    pts[a] + (pts[b] - pts[a]) * t
}

/// Unit tangent at arc length `s`, from central-difference vertex tangents
/// interpolated linearly between the bracketing vertices.
pub fn tangent_at_arclength(line: &CharLine, s: f64) -> Vec3 {
    let cum = cumulative_lengths(line);
    let total = *cum.last().unwrap();
    let s = s.clamp(0.0, total);
    let tans = vertex_tangents(line);
    let i = cum.partition_point(|&c| c < s);
    if i == 0 {
        return tans[0];
    }
    let (a, b) = (i - 1, i.min(tans.len() - 1));
    let seg = cum[b] - cum[a];
    if seg <= MIN_SEG_LEN {
        return tans[b];
    }
    let t = (s - cum[a]) / seg;
    (tans[a] * (1.0 - t) + tans[b] * t).normalize()
}

/// Normalized central-difference tangents (one-sided at the endpoints).
pub fn vertex_tangents(line: &CharLine) -> Vec<Vec3> {
    let p = line.points();
    let m = p.len();
    let mut t = Vec::with_capacity(m);
    t.push((p[1] - p[0]).normalize());
    for i in 1..m - 1 {
        t.push((p[i + 1] - p[i - 1]).normalize());
    }
    t.push((p[m - 1] - p[m - 2]).normalize());
    t
}

/// Resamples a polyline to exactly `m` points at uniform arc-length spacing.
pub fn resample_uniform(line: &CharLine, m: usize) -> Result<CharLine, GeometryError> {
    if m < 2 {
        return Err(GeometryError::BadResampleCount(m));
    }
    let cum = cumulative_lengths(line);
    let total = *cum.last().unwrap();
    if total <= MIN_SEG_LEN {
        return Err(GeometryError::DegenerateLine);
    }
    let pts = line.points();
    let mut out = Vec::with_capacity(m);
    out.push(pts[0]);
    for k in 1..m - 1 {
        let s = total * k as f64 / (m - 1) as f64;
        out.push(point_at_arclength(line, s));
    }
    out.push(*pts.last().unwrap());
    CharLine::new(out)
}

/// Decomposes a polyline into segment lengths and per-vertex rotation vectors
/// taking each segment direction to the next.
pub fn turning_decompose(line: &CharLine) -> Result<TurningDecomposition, GeometryError> {
    let p = line.points();
    let m = p.len();
    let dirs: Vec<Vec3> = p.windows(2).map(|w| (w[1] - w[0]).normalize()).collect();
    let seg_lengths: Vec<f64> = p.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    let mut turns = Vec::with_capacity(m.saturating_sub(2));
    for i in 0..m - 2 {
        turns.push(rotation_between_at(&dirs[i], &dirs[i + 1], i + 1)?);
    }
    Ok(TurningDecomposition {
        start_point: p[0],
        start_dir: dirs[0],
        seg_lengths,
        turns,
    })
}

/// Chains the decomposition back into a polyline, multiplying every turn
/// angle by `scale` about its original axis. `scale = 1` reproduces the
/// source line; `scale = 0` yields a straight line of equal length.
pub fn rebuild_from_turnings(d: &TurningDecomposition, scale: f64) -> CharLine {
    let mut pts = Vec::with_capacity(d.seg_lengths.len() + 1);
    let mut pos = d.start_point;
    let mut dir = d.start_dir;
    pts.push(pos);
    for (i, &len) in d.seg_lengths.iter().enumerate() {
        pos += dir * len;
        pts.push(pos);
        if i < d.turns.len() {
            let rot = Rotation3::new(d.turns[i] * scale);
            dir = (rot * dir).normalize();
        }
    }
    CharLine { points: pts }
}

/// Minimal rotation vector taking unit vector `a` to unit vector `b`.
pub fn rotation_between(a: &Vec3, b: &Vec3) -> Result<Vec3, GeometryError> {
    rotation_between_at(a, b, 0)
}

fn rotation_between_at(a: &Vec3, b: &Vec3, idx: usize) -> Result<Vec3, GeometryError> {
    let cross = a.cross(b);
    let dot = a.dot(b);
    let angle = cross.norm().atan2(dot);
    if angle < 1e-12 {
        return Ok(Vec3::zeros());
    }
    if (std::f64::consts::PI - angle).abs() < 1e-9 {
        return Err(GeometryError::AntiParallel(idx));
    }
    Ok(cross.normalize() * angle)
}

/// Applies a rotation vector (axis * angle) to a vector.
pub fn rotate_vec(rotvec: &Vec3, v: &Vec3) -> Vec3 {
    Rotation3::new(*rotvec) * v
}

/// Rotation minimizing frames along the line via the double-reflection
/// method, seeded by projecting `seed_normal` orthogonal to the first tangent.
pub fn rotation_minimizing_frames(
    line: &CharLine,
    seed_normal: &Vec3,
) -> Result<Vec<Frame>, GeometryError> {
    let p = line.points();
    let tans = vertex_tangents(line);
    for i in 0..tans.len() - 1 {
        if tans[i].dot(&tans[i + 1]) < -1.0 + 1e-12 {
            return Err(GeometryError::AntiParallel(i));
        }
    }
    let t0 = tans[0];
    let n0 = seed_normal - t0 * seed_normal.dot(&t0);
    if n0.norm() <= 1e-9 {
        return Err(GeometryError::SeedParallel);
    }
    let n0 = n0.normalize();
    let mut frames = Vec::with_capacity(p.len());
    frames.push(Frame {
        origin: p[0],
        tangent: t0,
        normal: n0,
        binormal: t0.cross(&n0),
    });
    for i in 0..p.len() - 1 {
        let prev = frames[i];
        // reflection in the plane bisecting p_i -> p_{i+1}
        let v1 = p[i + 1] - p[i];
        let c1 = v1.dot(&v1);
        let r_l = prev.normal - v1 * (2.0 / c1 * v1.dot(&prev.normal));
        let t_l = prev.tangent - v1 * (2.0 / c1 * v1.dot(&prev.tangent));
        // second reflection aligns the reflected tangent with the next tangent
        let v2 = tans[i + 1] - t_l;
        let c2 = v2.dot(&v2);
        let normal = if c2 <= 1e-18 {
            r_l
        } else {
            r_l - v2 * (2.0 / c2 * v2.dot(&r_l))
        };
        let tangent = tans[i + 1];
        let normal = (normal - tangent * normal.dot(&tangent)).normalize();
        frames.push(Frame {
            origin: p[i + 1],
            tangent,
            normal,
            binormal: tangent.cross(&normal),
        });
    }
    Ok(frames)
}

/// Unit vector helper for tests and callers that need validated input.
pub fn unit(v: Vec3) -> Vec3 {
    Unit::new_normalize(v).into_inner()
}
