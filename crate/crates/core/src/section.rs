//! Parametric cross-section families and their signed distance fields.
//!
//! Five thin-walled profile families are generated as an open centerline path
//! (straight walls and circular-arc lips) thickened into a simple closed
//! polygon. Angles follow the drawing convention: the positive x-axis is 0
//! degrees and clockwise is the positive direction. Contours are rasterized
//! into signed distance grids (negative inside, positive outside).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SectionError {
    #[error("unknown section type {0} (expected 1..=5)")]
    UnknownType(u32),
    #[error("section type {type_id} has {expected} parameters, got {got}")]
    BadParamCount { type_id: u32, expected: usize, got: usize },
    #[error("parameter {name}={value} outside sampling interval [{lo}, {hi}] for type {type_id}")]
    ParamOutOfRange { type_id: u32, name: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("contour self-intersects for type {type_id} (params: {params})")]
    SelfIntersection { type_id: u32, params: String },
    #[error("contour needs at least 8 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("arc tessellation needs at least 8 points per arc, got {0}")]
    TooFewArcSegments(usize),
    #[error("grid must be at least 8x8, got {0}x{1}")]
    GridTooSmall(usize, usize),
    #[error("contour is not a simple polygon")]
    NonSimpleContour,
}

/// One scalar parameter of a section family with its sampling interval.
#[derive(Debug, Clone, Copy)]
pub struct ParamSpec {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
}

const fn p(name: &'static str, lo: f64, hi: f64) -> ParamSpec {
    ParamSpec { name, lo, hi }
}

const TYPE1: &[ParamSpec] = &[
    p("thickness", 2.5, 4.0),
    p("len1", 2.5, 4.0),
    p("len2", 17.0, 20.0),
];
const TYPE2: &[ParamSpec] = &[
    p("r1", 2.5, 3.0),
    p("a1s", 95.0, 110.0),
    p("a1e", 280.0, 310.0),
    p("a3s", 240.0, 270.0),
    p("thickness", 1.8, 2.2),
    p("len2", 14.0, 16.0),
];
const TYPE3: &[ParamSpec] = &[
    p("r1", 1.4, 1.6),
    p("a1s", 95.0, 110.0),
    p("a1e", 230.0, 250.0),
    p("a4s", 290.0, 310.0),
    p("thickness", 0.8, 1.2),
    p("len2", 0.4, 0.6),
    p("len3", 14.0, 16.0),
];
const TYPE4: &[ParamSpec] = &[
    p("r1", 2.5, 3.0),
    p("r3", 1.5, 1.7),
    p("a1s", 95.0, 110.0),
    p("a1e", 280.0, 310.0),
    p("a3s", 210.0, 230.0),
    p("a4s", 240.0, 270.0),
    p("thickness", 1.2, 1.4),
    p("len2", 14.0, 16.0),
];
const TYPE5: &[ParamSpec] = &[
    p("r1", 2.5, 3.0),
    p("r3", 1.3, 1.5),
    p("a1s", 95.0, 110.0),
    p("a1e", 300.0, 310.0),
    p("a3s", 210.0, 230.0),
    p("thickness", 1.0, 1.2),
    p("len2", 14.0, 16.0),
    p("len4", 1.0, 2.0),
];

/// Parameter layout per family, in canonical draw order: radii, arc angles
/// (degrees), then thickness and wall lengths.
pub fn param_layout(type_id: u32) -> Result<&'static [ParamSpec], SectionError> {
    match type_id {
        1 => Ok(TYPE1),
        2 => Ok(TYPE2),
        3 => Ok(TYPE3),
        4 => Ok(TYPE4),
        5 => Ok(TYPE5),
        other => Err(SectionError::UnknownType(other)),
    }
}

/// A sampled cross-section: family id plus parameter values in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionParams {
    pub type_id: u32,
    pub values: Vec<f64>,
}

impl SectionParams {
    pub fn new(type_id: u32, values: Vec<f64>) -> Result<Self, SectionError> {
        let layout = param_layout(type_id)?;
        if values.len() != layout.len() {
            return Err(SectionError::BadParamCount {
                type_id,
                expected: layout.len(),
                got: values.len(),
            });
        }
        for (spec, &v) in layout.iter().zip(&values) {
            // slack covers f32 quantization of values stored on disk
            if !(v >= spec.lo - 1e-3 && v <= spec.hi + 1e-3) {
                return Err(SectionError::ParamOutOfRange {
                    type_id,
                    name: spec.name,
                    value: v,
                    lo: spec.lo,
                    hi: spec.hi,
                });
            }
        }
        Ok(Self { type_id, values })
    }

    pub fn get(&self, name: &str) -> f64 {
        let layout = param_layout(self.type_id).expect("validated type id");
        let idx = layout
            .iter()
            .position(|s| s.name == name)
            .unwrap_or_else(|| panic!("no parameter {name} for type {}", self.type_id));
        self.values[idx]
    }

    fn describe(&self) -> String {
        let layout = param_layout(self.type_id).expect("validated type id");
        layout
            .iter()
            .zip(&self.values)
            .map(|(s, v)| format!("{}={:.4}", s.name, v))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Closed, counter-clockwise simple polygon (first vertex not repeated).
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    pub vertices: Vec<[f64; 2]>,
}

/// Signed distance grid over the contour, row-major h x w, negative inside.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    pub h: usize,
    pub w: usize,
    pub pitch: f64,
    /// Position of the center of cell (row 0, col 0).
    pub origin: [f64; 2],
    pub values: Vec<f64>,
}

impl SdfGrid {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.w + col]
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + col as f64 * self.pitch,
            self.origin[1] + row as f64 * self.pitch,
        ]
    }
}

/// Direction of angle `deg` under the clockwise-positive convention.
fn dir_cw(deg: f64) -> [f64; 2] {
    let rad = deg.to_radians();
    [rad.cos(), -rad.sin()]
}

/// Clockwise travel tangent at angle `deg` on a circle.
fn tangent_cw(deg: f64) -> [f64; 2] {
    let rad = deg.to_radians();
    [-rad.sin(), -rad.cos()]
}

enum PathElem {
    /// Straight wall of the given length along the current heading.
    Wall(f64),
    /// Circular lip of radius `r` swept clockwise from `start_deg` to `end_deg`.
    Lip { r: f64, start_deg: f64, end_deg: f64 },
}

/// Sweep for lips whose end angle is not tabulated.
const DEFAULT_LIP_SWEEP_DEG: f64 = 90.0;

fn family_path(params: &SectionParams) -> Vec<PathElem> {
    use PathElem::*;
    let g = |n: &str| params.get(n);
    match params.type_id {
        1 => vec![Wall(g("len2"))],
        2 => vec![
            Lip { r: g("r1"), start_deg: g("a1s"), end_deg: g("a1e") },
            Wall(g("len2")),
            Lip { r: g("r1"), start_deg: g("a3s"), end_deg: g("a3s") + DEFAULT_LIP_SWEEP_DEG },
        ],
        3 => vec![
            Lip { r: g("r1"), start_deg: g("a1s"), end_deg: g("a1e") },
            Wall(g("len2")),
            Wall(g("len3")),
            Lip { r: g("r1"), start_deg: g("a4s"), end_deg: g("a4s") + DEFAULT_LIP_SWEEP_DEG },
        ],
        4 => vec![
            Lip { r: g("r1"), start_deg: g("a1s"), end_deg: g("a1e") },
            Wall(g("len2")),
            Lip { r: g("r3"), start_deg: g("a3s"), end_deg: g("a3s") + DEFAULT_LIP_SWEEP_DEG },
            Lip { r: g("r3"), start_deg: g("a4s"), end_deg: g("a4s") + DEFAULT_LIP_SWEEP_DEG },
        ],
        5 => vec![
            Lip { r: g("r1"), start_deg: g("a1s"), end_deg: g("a1e") },
            Wall(g("len2")),
            Lip { r: g("r3"), start_deg: g("a3s"), end_deg: g("a3s") + DEFAULT_LIP_SWEEP_DEG },
            Wall(g("len4")),
        ],
        _ => unreachable!("validated type id"),
    }
}

/// Tessellates the open centerline path. The path starts at the origin; the
/// first wall heads along -y, arcs sit at their absolute tabulated angles.
fn tessellate_path(params: &SectionParams, arc_segments: usize) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = vec![[0.0, 0.0]];
    let mut heading = [0.0, -1.0];
    for elem in family_path(params) {
        let end = *pts.last().unwrap();
        match elem {
            PathElem::Wall(len) => {
                // subdivide so even the plain-rectangle family meets the
                // minimum contour vertex count
                let steps = (len / 2.0).ceil().max(1.0) as usize;
                for k in 1..=steps {
                    let t = len * k as f64 / steps as f64;
                    pts.push([end[0] + heading[0] * t, end[1] + heading[1] * t]);
                }
            }
            PathElem::Lip { r, start_deg, end_deg } => {
                // place the circle so the arc start point continues the path
                let sd = dir_cw(start_deg);
                let center = [end[0] - r * sd[0], end[1] - r * sd[1]];
                let sweep = end_deg - start_deg;
                for k in 1..=arc_segments {
                    let a = start_deg + sweep * k as f64 / arc_segments as f64;
                    let d = dir_cw(a);
                    pts.push([center[0] + r * d[0], center[1] + r * d[1]]);
                }
                heading = tangent_cw(end_deg);
            }
        }
    }
    pts
}

/// Thickens an open path into a closed outline: offset both sides by half the
/// wall thickness with mitered joins, flat end caps.
fn thicken_path(path: &[[f64; 2]], thickness: f64) -> Vec<[f64; 2]> {
    let n = path.len();
    let half = 0.5 * thickness;
    let seg_normal = |i: usize| -> [f64; 2] {
        let dx = path[i + 1][0] - path[i][0];
        let dy = path[i + 1][1] - path[i][1];
        let len = (dx * dx + dy * dy).sqrt();
        [-dy / len, dx / len]
    };
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for i in 0..n {
        let nrm = if i == 0 {
            seg_normal(0)
        } else if i == n - 1 {
            seg_normal(n - 2)
        } else {
            let a = seg_normal(i - 1);
            let b = seg_normal(i);
            let sum = [a[0] + b[0], a[1] + b[1]];
            let len = (sum[0] * sum[0] + sum[1] * sum[1]).sqrt();
            if len < 1e-12 {
                b
            } else {
                // miter: scale so the offset from both adjacent walls matches
                let m = [sum[0] / len, sum[1] / len];
                let cos_half = m[0] * b[0] + m[1] * b[1];
                let scale = 1.0 / cos_half.max(0.25); // cap extreme miters
                [m[0] * scale, m[1] * scale]
            }
        };
        left.push([path[i][0] + nrm[0] * half, path[i][1] + nrm[1] * half]);
        right.push([path[i][0] - nrm[0] * half, path[i][1] - nrm[1] * half]);
    }
    right.reverse();
    left.extend(right);
    left
}

fn intersection_point(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> [f64; 2] {
    let r = [b[0] - a[0], b[1] - a[1]];
    let s = [d[0] - c[0], d[1] - c[1]];
    let denom = r[0] * s[1] - r[1] * s[0];
    let t = ((c[0] - a[0]) * s[1] - (c[1] - a[1]) * s[0]) / denom;
    [a[0] + t * r[0], a[1] + t * r[1]]
}

/// Cuts the small local loops that naive offsetting creates on the inner
/// side of path corners: whenever two nearby edges cross, the vertices
/// between them are replaced by the crossing point.
fn remove_local_loops(mut v: Vec<[f64; 2]>, window: usize) -> Vec<[f64; 2]> {
    let mut guard = 0;
    'restart: loop {
        guard += 1;
        if guard > 200 {
            return v; // give up; the simplicity gate will reject
        }
        let n = v.len();
        if n < 4 {
            return v;
        }
        for i in 0..n.saturating_sub(2) {
            let (a, b) = (v[i], v[i + 1]);
            let jmax = (i + window).min(n - 1);
            for j in i + 2..jmax {
                let (c, d) = (v[j], v[j + 1]);
                if segments_properly_intersect(a, b, c, d) {
                    let x = intersection_point(a, b, c, d);
                    let mut nv = Vec::with_capacity(n - (j - i) + 1);
                    nv.extend_from_slice(&v[..=i]);
                    nv.push(x);
                    nv.extend_from_slice(&v[j + 1..]);
                    v = nv;
                    continue 'restart;
                }
            }
        }
        return v;
    }
}

fn signed_area(vertices: &[[f64; 2]]) -> f64 {
    let n = vertices.len();
    let mut a = 0.0;
    for i in 0..n {
        let q = vertices[(i + 1) % n];
        let p = vertices[i];
        a += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * a
}

fn segments_properly_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let cross = |o: [f64; 2], p: [f64; 2], q: [f64; 2]| {
        (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0])
    };
    let d1 = cross(a, b, c);
    let d2 = cross(a, b, d);
    let d3 = cross(c, d, a);
    let d4 = cross(c, d, b);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// True when the closed polygon has no properly crossing edge pair.
pub fn is_simple_polygon(vertices: &[[f64; 2]]) -> bool {
    let n = vertices.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (vertices[i], vertices[(i + 1) % n]);
        for j in i + 1..n {
            // skip adjacent edges (they share a vertex)
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let (c, d) = (vertices[j], vertices[(j + 1) % n]);
            if segments_properly_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Builds the closed outline polygon for the sampled parameters.
pub fn build_contour(params: &SectionParams, arc_segments: usize) -> Result<Contour, SectionError> {
    if arc_segments < 8 {
        return Err(SectionError::TooFewArcSegments(arc_segments));
    }
    let path = tessellate_path(params, arc_segments);
    let mut vertices = thicken_path(&path, params.get("thickness"));
    vertices = remove_local_loops(vertices, 4 * arc_segments);
    if signed_area(&vertices) < 0.0 {
        vertices.reverse();
    }
    if vertices.len() < 8 {
        return Err(SectionError::TooFewVertices(vertices.len()));
    }
    if !is_simple_polygon(&vertices) {
        return Err(SectionError::SelfIntersection {
            type_id: params.type_id,
            params: params.describe(),
        });
    }
    Ok(Contour { vertices })
}

/// Shoelace area of a simple polygon (positive for CCW contours), mm^2.
pub fn section_area(contour: &Contour) -> f64 {
    signed_area(&contour.vertices).abs()
}

/// Axis-aligned bounding box of the contour: ([min_x, min_y], [max_x, max_y]).
pub fn contour_bbox(contour: &Contour) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for v in &contour.vertices {
        for k in 0..2 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    (lo, hi)
}

/// Distance from a point to a segment.
fn point_segment_distance(pt: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [pt[0] - a[0], pt[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 <= 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    };
    let dx = ap[0] - t * ab[0];
    let dy = ap[1] - t * ab[1];
    (dx * dx + dy * dy).sqrt()
}

/// Winding number of the closed polygon around `pt` (nonzero means inside).
pub fn winding_number(vertices: &[[f64; 2]], pt: [f64; 2]) -> i32 {
    let n = vertices.len();
    let mut wn = 0i32;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        let is_left = (b[0] - a[0]) * (pt[1] - a[1]) - (pt[0] - a[0]) * (b[1] - a[1]);
        if a[1] <= pt[1] {
            if b[1] > pt[1] && is_left > 0.0 {
                wn += 1;
            }
        } else if b[1] <= pt[1] && is_left < 0.0 {
            wn -= 1;
        }
    }
    wn
}

/// True when `pt` lies strictly inside the contour.
pub fn point_in_contour(contour: &Contour, pt: [f64; 2]) -> bool {
    winding_number(&contour.vertices, pt) != 0
}

/// Rasterizes the contour into a signed distance grid. The grid auto-fits:
/// the contour bounding box is centered with a 10% margin on each side, and
/// the pitch is isotropic.
pub fn sdf_rasterize(contour: &Contour, h: usize, w: usize) -> Result<SdfGrid, SectionError> {
    if h < 8 || w < 8 {
        return Err(SectionError::GridTooSmall(h, w));
    }
    if !is_simple_polygon(&contour.vertices) {
        return Err(SectionError::NonSimpleContour);
    }
    let (lo, hi) = contour_bbox(contour);
    let bbox_w = (hi[0] - lo[0]).max(1e-9);
    let bbox_h = (hi[1] - lo[1]).max(1e-9);
    let pitch = (bbox_h / (0.8 * h as f64)).max(bbox_w / (0.8 * w as f64));
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let origin = [
        center[0] - 0.5 * (w - 1) as f64 * pitch,
        center[1] - 0.5 * (h - 1) as f64 * pitch,
    ];
    let verts = &contour.vertices;
    let n = verts.len();
    let mut values = Vec::with_capacity(h * w);
    for row in 0..h {
        let y = origin[1] + row as f64 * pitch;
        for col in 0..w {
            let x = origin[0] + col as f64 * pitch;
            let pt = [x, y];
            let mut dist = f64::INFINITY;
            for i in 0..n {
                let d = point_segment_distance(pt, verts[i], verts[(i + 1) % n]);
                if d < dist {
                    dist = d;
                }
            }
            let sign = if winding_number(verts, pt) != 0 { -1.0 } else { 1.0 };
            values.push(sign * dist);
        }
    }
    Ok(SdfGrid { h, w, pitch, origin, values })
}

/// Writes the grid as a binary PGM with values affinely mapped to 0..=255.
pub fn write_pgm(grid_values: &[f64], h: usize, w: usize, path: &std::path::Path) -> std::io::Result<()> {
    let lo = grid_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi - lo <= 0.0 { 1.0 } else { hi - lo };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        grid_values
            .iter()
            .map(|&v| (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8),
    );
    std::fs::write(path, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    pub fn sample_params(type_id: u32, rng: &mut ChaCha12Rng) -> SectionParams {
        let layout = param_layout(type_id).unwrap();
        let values = layout.iter().map(|s| rng.gen_range(s.lo..s.hi)).collect();
        SectionParams::new(type_id, values).unwrap()
    }

    fn rect_params(thickness: f64, height: f64) -> SectionParams {
        SectionParams::new(1, vec![thickness, thickness, height]).unwrap()
    }

    fn regular_ngon(n: usize, r: f64) -> Contour {
        let vertices = (0..n)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        Contour { vertices }
    }

    #[test]
    fn type1_is_rectangle_with_expected_area() {
        let c = build_contour(&rect_params(3.0, 18.0), 16).unwrap();
        assert!(c.vertices.len() >= 8);
        // geometric corners (turn angle above noise) must be exactly 4
        let n = c.vertices.len();
        let mut corners = 0;
        for i in 0..n {
            let a = c.vertices[(i + n - 1) % n];
            let b = c.vertices[i];
            let d = c.vertices[(i + 1) % n];
            let u = [b[0] - a[0], b[1] - a[1]];
            let v = [d[0] - b[0], d[1] - b[1]];
            let cross = u[0] * v[1] - u[1] * v[0];
            let dot = u[0] * v[0] + u[1] * v[1];
            if cross.atan2(dot).abs() > 1e-6 {
                corners += 1;
            }
        }
        assert_eq!(corners, 4);
        assert!((section_area(&c) - 54.0).abs() < 1e-9);
    }

    #[test]
    fn all_types_simple_over_sampled_params() {
        // 500 draws per family must all build simple polygons
        for type_id in 1..=5 {
            let mut rng = ChaCha12Rng::seed_from_u64(1000 + type_id as u64);
            for k in 0..500 {
                let params = sample_params(type_id, &mut rng);
                let c = build_contour(&params, 12);
                assert!(
                    c.is_ok(),
                    "type {type_id} draw {k} failed: {:?}",
                    c.err()
                );
            }
        }
    }

    #[test]
    fn interval_extremes_still_simple() {
        for type_id in 1..=5 {
            let layout = param_layout(type_id).unwrap();
            let lo: Vec<f64> = layout.iter().map(|s| s.lo).collect();
            let hi: Vec<f64> = layout.iter().map(|s| s.hi).collect();
            for values in [lo, hi] {
                let params = SectionParams::new(type_id, values).unwrap();
                assert!(build_contour(&params, 12).is_ok(), "type {type_id} extreme");
            }
        }
    }

    #[test]
    fn area_converges_with_tessellation() {
        for type_id in 2..=5 {
            let mut rng = ChaCha12Rng::seed_from_u64(77 + type_id as u64);
            let params = sample_params(type_id, &mut rng);
            let a1 = section_area(&build_contour(&params, 32).unwrap());
            let a2 = section_area(&build_contour(&params, 64).unwrap());
            assert!(
                (a2 - a1).abs() / a2 < 1e-3,
                "type {type_id}: area {a1} vs {a2}"
            );
        }
    }

    #[test]
    fn shoelace_known_areas() {
        let sq = Contour {
            vertices: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        };
        assert!((section_area(&sq) - 1.0).abs() < 1e-12);

        let rect = build_contour(&rect_params(3.0, 18.0), 16).unwrap();
        assert!((section_area(&rect) - 54.0).abs() < 1e-9);

        let ngon = regular_ngon(64, 1.0);
        let analytic = std::f64::consts::PI;
        assert!((section_area(&ngon) - analytic).abs() / analytic < 5e-3);
    }

    #[test]
    fn sdf_zero_on_vertex() {
        // Square [-a, a]^2 on a 15x15 grid: pitch = 2a / (0.8 * 15) = a/6 and
        // cell (13, 13) sits on the corner (a, a) up to rounding in 0.8 * 15.
        let a = 6.0;
        let c = Contour {
            vertices: vec![[-a, -a], [a, -a], [a, a], [-a, a]],
        };
        let g = sdf_rasterize(&c, 15, 15).unwrap();
        let cc = g.cell_center(13, 13);
        assert!((cc[0] - a).abs() < 1e-9 && (cc[1] - a).abs() < 1e-9);
        assert!(g.at(13, 13).abs() < 1e-9, "value at vertex cell: {}", g.at(13, 13));
    }

    #[test]
    fn sdf_disk_center_value() {
        let r = 3.0;
        let c = regular_ngon(64, r);
        let g = sdf_rasterize(&c, 33, 33).unwrap();
        // center cell: grid is centered on the bbox center = disk center
        let center = g.at(16, 16);
        // tessellation sagitta of a 64-gon
        let sagitta = r * (1.0 - (std::f64::consts::PI / 64.0).cos());
        assert!(
            (center + r).abs() <= sagitta + 1e-9,
            "center {center}, want about {}",
            -r
        );
        assert!(center < 0.0);
    }

    /// Brute-force oracle: exhaustive point-to-segment distance plus an
    /// even-odd crossing test, independent of the production winding code.
    pub fn sdf_brute_force(contour: &Contour, grid: &SdfGrid) -> Vec<f64> {
        let verts = &contour.vertices;
        let n = verts.len();
        let mut out = Vec::with_capacity(grid.h * grid.w);
        for row in 0..grid.h {
            for col in 0..grid.w {
                let pt = grid.cell_center(row, col);
                let mut dist = f64::INFINITY;
                for i in 0..n {
                    dist = dist.min(point_segment_distance(pt, verts[i], verts[(i + 1) % n]));
                }
                // even-odd ray cast along +x
                let mut crossings = 0;
                for i in 0..n {
                    let a = verts[i];
                    let b = verts[(i + 1) % n];
                    if (a[1] > pt[1]) != (b[1] > pt[1]) {
                        let t = (pt[1] - a[1]) / (b[1] - a[1]);
                        let x = a[0] + t * (b[0] - a[0]);
                        if x > pt[0] {
                            crossings += 1;
                        }
                    }
                }
                let sign = if crossings % 2 == 1 { -1.0 } else { 1.0 };
                out.push(sign * dist);
            }
        }
        out
    }

    #[test]
    fn sdf_matches_brute_force_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let params = sample_params(3, &mut rng);
        let c = build_contour(&params, 12).unwrap();
        let g = sdf_rasterize(&c, 128, 64).unwrap();
        let oracle = sdf_brute_force(&c, &g);
        for (a, b) in g.values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6, "sdf {a} vs oracle {b}");
        }
    }

    #[test]
    fn sdf_sign_convention_random_points() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let params = sample_params(2, &mut rng);
        let c = build_contour(&params, 16).unwrap();
        let (lo, hi) = contour_bbox(&c);
        let verts = &c.vertices;
        let n = verts.len();
        let mut interior = 0;
        let mut exterior = 0;
        let mut tries = 0;
        while (interior < 1000 || exterior < 1000) && tries < 2_000_000 {
            tries += 1;
            let pt = [
                rng.gen_range(lo[0] - 1.0..hi[0] + 1.0),
                rng.gen_range(lo[1] - 1.0..hi[1] + 1.0),
            ];
            let mut dist = f64::INFINITY;
            for i in 0..n {
                dist = dist.min(point_segment_distance(pt, verts[i], verts[(i + 1) % n]));
            }
            if dist < 1e-6 {
                continue; // skip boundary-ambiguous points
            }
            let inside = winding_number(verts, pt) != 0;
            let sd = if inside { -dist } else { dist };
            if inside && interior < 1000 {
                interior += 1;
                assert!(sd < 0.0);
            } else if !inside && exterior < 1000 {
                exterior += 1;
                assert!(sd > 0.0);
            }
        }
        assert!(interior >= 1000 && exterior >= 1000, "sampling starved");
    }

    #[test]
    fn sdf_eikonal_gradient() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let params = sample_params(4, &mut rng);
        let c = build_contour(&params, 16).unwrap();
        let g = sdf_rasterize(&c, 96, 64).unwrap();
        let mut checked = 0;
        for row in 1..g.h - 1 {
            for col in 1..g.w - 1 {
                let v = g.at(row, col);
                if v.abs() < 2.0 * g.pitch {
                    continue; // too close to the contour for one-cell differences
                }
                // skip medial-axis ridges, where one-sided slopes disagree
                let fx = (g.at(row, col + 1) - v) / g.pitch;
                let bx = (v - g.at(row, col - 1)) / g.pitch;
                let fy = (g.at(row + 1, col) - v) / g.pitch;
                let by = (v - g.at(row - 1, col)) / g.pitch;
                if (fx - bx).abs() > 0.15 || (fy - by).abs() > 0.15 {
                    continue;
                }
                let gx = 0.5 * (fx + bx);
                let gy = 0.5 * (fy + by);
                let mag = (gx * gx + gy * gy).sqrt();
                assert!(
                    (0.9..=1.1).contains(&mag),
                    "gradient magnitude {mag} at ({row},{col})"
                );
                checked += 1;
            }
        }
        assert!(checked > 100, "eikonal check covered too few cells: {checked}");
    }

    #[test]
    fn sdf_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let params = sample_params(5, &mut rng);
        let c = build_contour(&params, 16).unwrap();
        let a = sdf_rasterize(&c, 64, 32).unwrap();
        let b = sdf_rasterize(&c, 64, 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(matches!(param_layout(0), Err(SectionError::UnknownType(0))));
        assert!(matches!(param_layout(6), Err(SectionError::UnknownType(6))));
        assert!(SectionParams::new(1, vec![3.0]).is_err());
        assert!(SectionParams::new(1, vec![99.0, 3.0, 18.0]).is_err());
        let p = rect_params(3.0, 18.0);
        assert!(matches!(
            build_contour(&p, 4),
            Err(SectionError::TooFewArcSegments(4))
        ));
        let c = build_contour(&p, 16).unwrap();
        assert!(matches!(
            sdf_rasterize(&c, 4, 64),
            Err(SectionError::GridTooSmall(4, 64))
        ));
        // bow-tie polygon is rejected
        let bowtie = Contour {
            vertices: vec![[0.0, 0.0], [2.0, 2.0], [2.0, 0.0], [0.0, 2.0]],
        };
        assert!(matches!(
            sdf_rasterize(&bowtie, 16, 16),
            Err(SectionError::NonSimpleContour)
        ));
    }
}
