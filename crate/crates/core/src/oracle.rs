//! Deterministic synthetic data generator for stretch bending.
//!
//! Workpieces are straight profiles placed on the x-axis; molds are convex 3D
//! curves combined from two quarter-ellipse arcs on perpendicular planes.
//! Loading wraps the workpiece onto the mold (tangent extension past the
//! contact), unloading scales every turning angle down by a section-dependent
//! springback fraction. Datasets are written sample-per-file with a JSON
//! manifest and an 8:1:1 train/eval/test split by index blocks.

use crate::geometry::{
    arc_length, point_at_arclength, rebuild_from_turnings, resample_uniform, rotation_between,
    tangent_at_arclength, turning_decompose, CharLine, GeometryError, Point3, Vec3,
};
use crate::section::{
    build_contour, param_layout, sdf_rasterize, section_area, Contour, SdfGrid, SectionError,
    SectionParams,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

pub const SAMPLE_MAGIC: &[u8; 4] = b"LDEP";
pub const SAMPLE_VERSION: u32 = 1;

/// Workpiece length sampling interval (mm).
pub const LENGTH_RANGE: (f64, f64) = (505.0, 550.0);
/// Mold semi-axis sampling interval (mm).
pub const MOLD_A_RANGE: (f64, f64) = (700.0, 900.0);
/// Mold axis-ratio sampling interval (applies to both c/a and b/a).
pub const MOLD_RATIO_RANGE: (f64, f64) = (0.1, 0.3);
/// Springback fraction bounds and area scale of `stiffness_eta`.
pub const ETA_BASE: f64 = 0.08;
pub const ETA_SPAN: f64 = 0.12;
pub const ETA_AREA_REF: f64 = 100.0;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Section(#[from] SectionError),
    #[error("no valid contour for type {type_id} after 100 rejection draws")]
    RejectionExhausted { type_id: u32 },
    #[error("type mix must have 5 non-negative weights with a positive sum")]
    InvalidMix,
    #[error("dataset needs at least 10 samples, got {0}")]
    TooFewSamples(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?} (expected \"LDEP\")")]
    BadMagic([u8; 4]),
    #[error("unsupported sample version {0}")]
    BadVersion(u32),
    #[error("file truncated in section '{0}'")]
    Truncated(&'static str),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// Quarter-ellipse semi-axes of the mold curve on the xy and xz planes (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoldParams {
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
}

/// 6-DoF load descriptor of the working arm: grip displacement (mm) and a
/// rotation vector (radians).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotionParams {
    pub u_x: f64,
    pub u_y: f64,
    pub u_z: f64,
    pub r_x: f64,
    pub r_y: f64,
    pub r_z: f64,
}

impl MotionParams {
    pub fn to_array(self) -> [f64; 6] {
        [self.u_x, self.u_y, self.u_z, self.r_x, self.r_y, self.r_z]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self { u_x: a[0], u_y: a[1], u_z: a[2], r_x: a[3], r_y: a[4], r_z: a[5] }
    }
}

/// One labeled instance of the bending process.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub section_params: SectionParams,
    pub contour: Contour,
    pub grid: SdfGrid,
    pub workpiece_line0: CharLine,
    pub mold_line: CharLine,
    pub motion: MotionParams,
    pub loaded_line: CharLine,
    pub final_line: CharLine,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}' (train|eval|test)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub file: String,
    pub split: Split,
    pub type_id: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub seed: u64,
    pub m: usize,
    pub h: usize,
    pub w: usize,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Self, OracleError> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        serde_json::from_str(&text).map_err(|e| OracleError::Manifest(e.to_string()))
    }

    pub fn read_sample_at(&self, dir: &Path, index: usize) -> Result<Sample, OracleError> {
        read_sample(&dir.join(&self.samples[index].file))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample RNG derived from (seed, index); generation order-independent.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha12Rng {
    let mut s = splitmix64(seed ^ splitmix64(index.wrapping_add(0x243F_6A88_85A3_08D3)));
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

fn snap(x: f64) -> f64 {
    x as f32 as f64
}

fn snap_line(line: &CharLine) -> CharLine {
    CharLine::new(
        line.points()
            .iter()
            .map(|p| Point3::new(snap(p.x), snap(p.y), snap(p.z)))
            .collect(),
    )
    .expect("snapping preserves validity")
}

/// Draws section parameters uniformly from the family intervals, redrawing
/// until the contour builds (at most 100 tries).
pub fn sample_section(
    type_id: u32,
    rng: &mut ChaCha12Rng,
    arc_segments: usize,
) -> Result<(SectionParams, Contour), OracleError> {
    let layout = param_layout(type_id)?;
    for _ in 0..100 {
        let values: Vec<f64> = layout.iter().map(|s| snap(rng.gen_range(s.lo..s.hi))).collect();
        let params = SectionParams::new(type_id, values)?;
        if let Ok(contour) = build_contour(&params, arc_segments) {
            return Ok((params, contour));
        }
    }
    Err(OracleError::RejectionExhausted { type_id })
}

/// Point of the bi-elliptic mold curve at abscissa `x`: two quarter-ellipse
/// rises on the xy and xz planes, tangent to the x-axis at the origin.
pub fn mold_point(params: &MoldParams, x: f64) -> Point3 {
    let y = params.b1 * (1.0 - (1.0 - (x / params.a1).powi(2)).max(0.0).sqrt());
    let z = params.b2 * (1.0 - (1.0 - (x / params.a2).powi(2)).max(0.0).sqrt());
    Point3::new(x, y, z)
}

/// Evaluates the mold curve densely and uniformly in the ellipse angle so
/// the steep tail is well resolved.
pub fn mold_curve_dense(params: &MoldParams, points: usize) -> Result<CharLine, GeometryError> {
    let x_max = params.a1.min(params.a2);
    let pts: Vec<Point3> = (0..points)
        .map(|i| {
            let phi = std::f64::consts::FRAC_PI_2 * i as f64 / (points - 1) as f64;
            mold_point(params, x_max * phi.sin())
        })
        .collect();
    CharLine::new(pts)
}

/// Draws mold parameters and returns the M-point mold characteristic line.
/// The c/a focus ratio is drawn per plane to keep the documented stream
/// layout but plays no role in the parametric curve.
pub fn sample_mold(
    rng: &mut ChaCha12Rng,
    m: usize,
) -> Result<(MoldParams, CharLine), OracleError> {
    let plane = |rng: &mut ChaCha12Rng| -> (f64, f64) {
        let a = rng.gen_range(MOLD_A_RANGE.0..MOLD_A_RANGE.1);
        let _c_ratio = rng.gen_range(MOLD_RATIO_RANGE.0..MOLD_RATIO_RANGE.1);
        let b_ratio = rng.gen_range(MOLD_RATIO_RANGE.0..MOLD_RATIO_RANGE.1);
        (a, a * b_ratio)
    };
    let (a1, b1) = plane(rng);
    let (a2, b2) = plane(rng);
    let params = MoldParams { a1, b1, a2, b2 };
    let dense = mold_curve_dense(&params, 4096)?;
    let line = resample_uniform(&dense, m)?;
    Ok((params, line))
}

/// Arm load for wrapping a workpiece of length `l` onto the mold: the grip
/// lands at the tangent-line unwrap point, the rotation carries the initial
/// +x direction into the mold tangent at the contact end.
pub fn involute_motion(mold: &CharLine, l: f64) -> Result<MotionParams, GeometryError> {
    let total = arc_length(mold);
    let s_c = l.min(total);
    let contact = point_at_arclength(mold, s_c);
    let tangent = tangent_at_arclength(mold, s_c);
    let grip = contact + tangent * (l - s_c);
    let u = grip - Point3::new(l, 0.0, 0.0);
    let r = rotation_between(&Vec3::x(), &tangent)?;
    Ok(MotionParams {
        u_x: u.x,
        u_y: u.y,
        u_z: u.z,
        r_x: r.x,
        r_y: r.y,
        r_z: r.z,
    })
}

/// Shape of the workpiece at full load: the first `min(l, mold length)` of
/// arc length follows the mold, the rest continues along the contact tangent.
pub fn simulate_loading(mold: &CharLine, l: f64, m: usize) -> Result<CharLine, GeometryError> {
    let cum = crate::geometry::cumulative_lengths(mold);
    let total = *cum.last().unwrap();
    let s_c = l.min(total);
    let mut pts: Vec<Point3> = Vec::new();
    for (i, p) in mold.points().iter().enumerate() {
        if cum[i] < s_c - 1e-9 {
            pts.push(*p);
        } else {
            break;
        }
    }
    pts.push(point_at_arclength(mold, s_c));
    if l > s_c + 1e-9 {
        let tangent = tangent_at_arclength(mold, s_c);
        let last = *pts.last().unwrap();
        pts.push(last + tangent * (l - s_c));
    }
    let truncated = CharLine::new(pts)?;
    resample_uniform(&truncated, m)
}

/// Springback fraction from the cross-section: stiffer (larger) sections
/// rebound less.
pub fn stiffness_eta(contour: &Contour) -> f64 {
    ETA_BASE + ETA_SPAN * (-section_area(contour) / ETA_AREA_REF).exp()
}

/// Elastic recovery: every turning angle shrinks by the factor (1 - eta),
/// anchored at the fixed end (start point and direction preserved).
pub fn simulate_springback(loaded: &CharLine, eta: f64) -> Result<CharLine, GeometryError> {
    let d = turning_decompose(loaded)?;
    Ok(rebuild_from_turnings(&d, 1.0 - eta))
}

/// Deterministic proportional type assignment: index i gets the type whose
/// running quota is furthest behind. Equal weights yield a round-robin.
pub fn allocate_types(count: usize, weights: &[f64; 5]) -> Result<Vec<u32>, OracleError> {
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(OracleError::InvalidMix);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(OracleError::InvalidMix);
    }
    let mut assigned = [0usize; 5];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let step = (i + 1) as f64;
        let mut best = 0usize;
        let mut best_deficit = f64::NEG_INFINITY;
        for t in 0..5 {
            let deficit = weights[t] / total * step - assigned[t] as f64;
            if deficit > best_deficit + 1e-12 {
                best_deficit = deficit;
                best = t;
            }
        }
        assigned[best] += 1;
        out.push(best as u32 + 1);
    }
    Ok(out)
}

/// Generates one sample from its per-index RNG. All stored floats are
/// quantized to f32 so the on-disk encoding round-trips exactly.
pub fn generate_sample(
    seed: u64,
    index: u64,
    type_id: u32,
    m: usize,
    h: usize,
    w: usize,
    arc_segments: usize,
) -> Result<Sample, OracleError> {
    let mut rng = sample_rng(seed, index);
    let (section_params, contour) = sample_section(type_id, &mut rng, arc_segments)?;
    let contour = Contour {
        vertices: contour.vertices.iter().map(|v| [snap(v[0]), snap(v[1])]).collect(),
    };
    let length = snap(rng.gen_range(LENGTH_RANGE.0..LENGTH_RANGE.1));
    let (_mold_params, mold_line) = sample_mold(&mut rng, m)?;
    let mold_line = snap_line(&mold_line);

    let mut grid = sdf_rasterize(&contour, h, w)?;
    grid.pitch = snap(grid.pitch);
    grid.origin = [snap(grid.origin[0]), snap(grid.origin[1])];
    grid.values.iter_mut().for_each(|v| *v = snap(*v));

    let workpiece_line0 = snap_line(&CharLine::straight_x(length, m)?);
    let motion_raw = involute_motion(&mold_line, length)?;
    let motion = MotionParams::from_array(motion_raw.to_array().map(snap));
    let loaded_line = snap_line(&simulate_loading(&mold_line, length, m)?);
    let eta = snap(stiffness_eta(&contour));
    let final_line = snap_line(&simulate_springback(&loaded_line, eta)?);

    Ok(Sample {
        section_params,
        contour,
        grid,
        workpiece_line0,
        mold_line,
        motion,
        loaded_line,
        final_line,
        eta,
    })
}

/// Generates `count` samples under `out_dir` and writes the manifest.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    count: usize,
    seed: u64,
    type_mix: &[f64; 5],
    m: usize,
    h: usize,
    w: usize,
    arc_segments: usize,
    out_dir: &Path,
) -> Result<DatasetManifest, OracleError> {
    if count < 10 {
        return Err(OracleError::TooFewSamples(count));
    }
    let types = allocate_types(count, type_mix)?;
    std::fs::create_dir_all(out_dir.join("samples"))?;
    let n_train = count * 8 / 10;
    let n_eval = count * 9 / 10 - n_train;
    let mut samples = Vec::with_capacity(count);
    for (i, &type_id) in types.iter().enumerate() {
        let sample = generate_sample(seed, i as u64, type_id, m, h, w, arc_segments)?;
        let file = format!("samples/{i:05}.bin");
        write_sample(&sample, &out_dir.join(&file))?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_eval {
            Split::Eval
        } else {
            Split::Test
        };
        samples.push(SampleEntry { file, split, type_id });
    }
    let manifest = DatasetManifest { count, seed, m, h, w, samples };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| OracleError::Manifest(e.to_string()))?;
    let mut f = std::fs::File::create(out_dir.join("manifest.json"))?;
    f.write_all(json.as_bytes())?;
    Ok(manifest)
}

// ---- binary sample encoding -------------------------------------------------

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn line(&mut self, line: &CharLine) {
        for p in line.points() {
            self.f32(p.x);
            self.f32(p.y);
            self.f32(p.z);
        }
    }
}

/// Serializes a sample: magic, version, type id, parameter block, contour,
/// grid, then the four M-point lines, motion, and eta — all little-endian.
pub fn write_sample(sample: &Sample, path: &Path) -> Result<(), OracleError> {
    let mut w = ByteWriter { buf: Vec::new() };
    w.buf.extend_from_slice(SAMPLE_MAGIC);
    w.u32(SAMPLE_VERSION);
    w.u32(sample.section_params.type_id);
    w.u32(sample.section_params.values.len() as u32);
    for &v in &sample.section_params.values {
        w.f32(v);
    }
    w.u32(sample.contour.vertices.len() as u32);
    for v in &sample.contour.vertices {
        w.f32(v[0]);
        w.f32(v[1]);
    }
    w.u32(sample.grid.h as u32);
    w.u32(sample.grid.w as u32);
    w.f32(sample.grid.pitch);
    w.f32(sample.grid.origin[0]);
    w.f32(sample.grid.origin[1]);
    for &v in &sample.grid.values {
        w.f32(v);
    }
    w.u32(sample.workpiece_line0.len() as u32);
    w.line(&sample.workpiece_line0);
    w.line(&sample.mold_line);
    w.line(&sample.loaded_line);
    w.line(&sample.final_line);
    for v in sample.motion.to_array() {
        w.f32(v);
    }
    w.f32(sample.eta);
    std::fs::write(path, &w.buf)?;
    Ok(())
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], OracleError> {
        if self.pos + n > self.buf.len() {
            return Err(OracleError::Truncated(section));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, section: &'static str) -> Result<u32, OracleError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }
    fn f32(&mut self, section: &'static str) -> Result<f64, OracleError> {
        Ok(f32::from_le_bytes(self.take(4, section)?.try_into().unwrap()) as f64)
    }
    fn line(&mut self, m: usize, section: &'static str) -> Result<CharLine, OracleError> {
        let mut pts = Vec::with_capacity(m);
        for _ in 0..m {
            let x = self.f32(section)?;
            let y = self.f32(section)?;
            let z = self.f32(section)?;
            pts.push(Point3::new(x, y, z));
        }
        Ok(CharLine::new(pts)?)
    }
}

pub fn read_sample(path: &Path) -> Result<Sample, OracleError> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader { buf: &bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != SAMPLE_MAGIC {
        return Err(OracleError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != SAMPLE_VERSION {
        return Err(OracleError::BadVersion(version));
    }
    let type_id = r.u32("params")?;
    let n_params = r.u32("params")? as usize;
    let mut values = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        values.push(r.f32("params")?);
    }
    let section_params = SectionParams::new(type_id, values)?;
    let k_c = r.u32("contour")? as usize;
    let mut vertices = Vec::with_capacity(k_c);
    for _ in 0..k_c {
        vertices.push([r.f32("contour")?, r.f32("contour")?]);
    }
    let contour = Contour { vertices };
    let h = r.u32("grid")? as usize;
    let w = r.u32("grid")? as usize;
    let pitch = r.f32("grid")?;
    let origin = [r.f32("grid")?, r.f32("grid")?];
    let mut grid_values = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        grid_values.push(r.f32("grid")?);
    }
    let grid = SdfGrid { h, w, pitch, origin, values: grid_values };
    let m = r.u32("lines")? as usize;
    let workpiece_line0 = r.line(m, "workpiece line")?;
    let mold_line = r.line(m, "mold line")?;
    let loaded_line = r.line(m, "loaded line")?;
    let final_line = r.line(m, "final line")?;
    let mut motion = [0.0; 6];
    for v in &mut motion {
        *v = r.f32("motion")?;
    }
    let eta = r.f32("eta")?;
    Ok(Sample {
        section_params,
        contour,
        grid,
        workpiece_line0,
        mold_line,
        motion: MotionParams::from_array(motion),
        loaded_line,
        final_line,
        eta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn section_draws_stay_in_intervals() {
        let mut rng = sample_rng(1, 0);
        for _ in 0..50 {
            let (p, _) = sample_section(1, &mut rng, 12).unwrap();
            let t = p.get("thickness");
            let h = p.get("len2");
            assert!((2.5..=4.0).contains(&t));
            assert!((17.0..=20.0).contains(&h));
        }
        for _ in 0..50 {
            let (p, _) = sample_section(3, &mut rng, 12).unwrap();
            assert!((1.4..=1.6).contains(&p.get("r1")));
            assert!((0.8..=1.2).contains(&p.get("thickness")));
        }
    }

    #[test]
    fn section_sampling_deterministic() {
        let mut a = sample_rng(42, 7);
        let mut b = sample_rng(42, 7);
        let (pa, _) = sample_section(2, &mut a, 12).unwrap();
        let (pb, _) = sample_section(2, &mut b, 12).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn mold_degenerate_is_straight() {
        let params = MoldParams { a1: 800.0, b1: 0.0, a2: 750.0, b2: 0.0 };
        let line = mold_curve_dense(&params, 512).unwrap();
        for p in line.points() {
            assert!(p.y.abs() < 1e-12 && p.z.abs() < 1e-12);
        }
        assert!((arc_length(&line) - 750.0).abs() < 1e-9);
    }

    #[test]
    fn mold_starts_at_origin_tangent_x() {
        let mut rng = sample_rng(3, 11);
        let (params, line) = sample_mold(&mut rng, 240).unwrap();
        assert!(line.points()[0].coords.norm() < 1e-9);
        // analytic curve: origin exactly, slope vanishing at x -> 0
        assert!(mold_point(&params, 0.0).coords.norm() == 0.0);
        let probe = mold_point(&params, 1e-3);
        let t = (probe - Point3::origin()).normalize();
        assert!((t - Vec3::x()).norm() < 1e-6, "start tangent {t:?}");
    }

    #[test]
    fn mold_arc_length_exceeds_projection() {
        for k in 0..20 {
            let mut rng = sample_rng(10, k);
            let (params, line) = sample_mold(&mut rng, 240).unwrap();
            assert!(arc_length(&line) >= params.a1.min(params.a2) - 1e-6);
        }
    }

    fn circle_mold(r: f64, span: f64, n: usize) -> CharLine {
        let pts: Vec<Point3> = (0..n)
            .map(|i| {
                let a = span * i as f64 / (n - 1) as f64;
                Point3::new(r * a.sin(), r * (1.0 - a.cos()), 0.0)
            })
            .collect();
        CharLine::new(pts).unwrap()
    }

    #[test]
    fn involute_straight_mold_zero() {
        let mold = CharLine::straight_x(800.0, 100).unwrap();
        let m = involute_motion(&mold, 550.0).unwrap();
        for v in m.to_array() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn involute_circle_matches_closed_form() {
        let r = 700.0;
        let l = 500.0;
        let mold = circle_mold(r, 1.2, 20_001);
        let m = involute_motion(&mold, l).unwrap();
        let phi = l / r;
        assert!((m.r_z - phi).abs() < 1e-4, "r_z {} vs {phi}", m.r_z);
        assert!(m.r_x.abs() < 1e-6 && m.r_y.abs() < 1e-6);
        let grip_want = Point3::new(r * phi.sin(), r * (1.0 - phi.cos()), 0.0);
        let grip_got = Point3::new(l + m.u_x, m.u_y, m.u_z);
        assert!(
            (grip_got - grip_want).norm() < 1e-3 * r,
            "grip {grip_got:?} vs {grip_want:?}"
        );
    }

    #[test]
    fn involute_tangent_extension_past_mold() {
        let r = 300.0;
        let mold = circle_mold(r, PI / 4.0, 4001);
        let s_m = arc_length(&mold);
        let l = s_m + 120.0;
        let m = involute_motion(&mold, l).unwrap();
        let end = *mold.points().last().unwrap();
        let grip = Point3::new(l + m.u_x, m.u_y, m.u_z);
        let t_end = tangent_at_arclength(&mold, s_m);
        let d = grip - end;
        assert!((d.norm() - (l - s_m)).abs() < 1e-6);
        assert!((d.normalize() - t_end).norm() < 1e-6);
    }

    #[test]
    fn loading_straight_mold_is_identity() {
        let mold = CharLine::straight_x(800.0, 50).unwrap();
        let loaded = simulate_loading(&mold, 520.0, 240).unwrap();
        for (i, p) in loaded.points().iter().enumerate() {
            let want = 520.0 * i as f64 / 239.0;
            assert!((p.x - want).abs() < 1e-6 && p.y.abs() < 1e-12 && p.z.abs() < 1e-12);
        }
    }

    #[test]
    fn loading_past_mold_is_colinear() {
        let r = 300.0;
        let mold = circle_mold(r, PI / 4.0, 2001);
        let s_m = arc_length(&mold);
        let l = s_m + 100.0;
        let loaded = simulate_loading(&mold, l, 240).unwrap();
        let d = turning_decompose(&loaded).unwrap();
        let cum = crate::geometry::cumulative_lengths(&loaded);
        for (i, t) in d.turns.iter().enumerate() {
            if cum[i + 1] > s_m + 5.0 {
                assert!(t.norm() < 1e-6, "turn {} at s {}", t.norm(), cum[i + 1]);
            }
        }
    }

    #[test]
    fn loading_preserves_length() {
        for k in 0..100 {
            let mut rng = sample_rng(77, k);
            let (_, mold) = sample_mold(&mut rng, 240).unwrap();
            let l = rng.gen_range(LENGTH_RANGE.0..LENGTH_RANGE.1);
            let loaded = simulate_loading(&mold, l, 240).unwrap();
            let rel = (arc_length(&loaded) - l).abs() / l;
            assert!(rel < 1e-3, "length error {rel}");
        }
    }

    #[test]
    fn eta_limits_and_value() {
        let big = Contour {
            vertices: vec![[0.0, 0.0], [1000.0, 0.0], [1000.0, 1000.0], [0.0, 1000.0]],
        };
        assert!((stiffness_eta(&big) - ETA_BASE).abs() < 1e-6);
        let rect54 = Contour {
            vertices: vec![[0.0, 0.0], [3.0, 0.0], [3.0, 18.0], [0.0, 18.0]],
        };
        let want = 0.08 + 0.12 * (-0.54f64).exp();
        assert!((stiffness_eta(&rect54) - want).abs() < 1e-12);
        assert!((stiffness_eta(&rect54) - 0.1500).abs() < 1e-4);
        // area -> 0 limit approaches base + span
        let tiny = Contour {
            vertices: vec![[0.0, 0.0], [1e-4, 0.0], [1e-4, 1e-4], [0.0, 1e-4]],
        };
        assert!((stiffness_eta(&tiny) - (ETA_BASE + ETA_SPAN)).abs() < 1e-9);
    }

    #[test]
    fn springback_eta_zero_identity() {
        let mold = circle_mold(500.0, 0.9, 501);
        let loaded = simulate_loading(&mold, 420.0, 240).unwrap();
        let back = simulate_springback(&loaded, 0.0).unwrap();
        for (p, q) in loaded.points().iter().zip(back.points()) {
            assert!((p - q).norm() < 1e-9);
        }
    }

    #[test]
    fn springback_eta_one_straightens() {
        let mold = circle_mold(500.0, 0.9, 501);
        let loaded = simulate_loading(&mold, 420.0, 240).unwrap();
        let back = simulate_springback(&loaded, 1.0 - 1e-12).unwrap();
        let chord = (back.points()[239] - back.points()[0]).norm();
        let total = arc_length(&back);
        assert!((chord - total).abs() < 1e-6 * total);
    }

    #[test]
    fn springback_rebound_grows_toward_tail() {
        for k in 0..100 {
            let mut rng = sample_rng(123, k);
            let (_, mold) = sample_mold(&mut rng, 240).unwrap();
            let l = rng.gen_range(LENGTH_RANGE.0..LENGTH_RANGE.1);
            let loaded = simulate_loading(&mold, l, 240).unwrap();
            let eta = 0.13;
            let fin = simulate_springback(&loaded, eta).unwrap();
            let mut prev = -1.0;
            for (p, q) in loaded.points().iter().zip(fin.points()) {
                let d = (p - q).norm();
                assert!(d >= prev - 1e-9, "rebound not monotone: {d} after {prev}");
                prev = d;
            }
        }
    }

    #[test]
    fn full_pipeline_straight_mold_fixed_point() {
        let mold = CharLine::straight_x(900.0, 240).unwrap();
        let l = 530.0;
        let motion = involute_motion(&mold, l).unwrap();
        assert!(motion.to_array().iter().all(|v| v.abs() < 1e-9));
        let loaded = simulate_loading(&mold, l, 240).unwrap();
        let fin = simulate_springback(&loaded, 0.15).unwrap();
        let straight = CharLine::straight_x(l, 240).unwrap();
        for (p, q) in loaded.points().iter().zip(straight.points()) {
            assert!((p - q).norm() < 1e-6);
        }
        for (p, q) in fin.points().iter().zip(straight.points()) {
            assert!((p - q).norm() < 1e-6);
        }
    }

    #[test]
    fn type_allocation_equal_mix() {
        let types = allocate_types(3000, &[1.0; 5]).unwrap();
        for t in 1..=5u32 {
            assert_eq!(types.iter().filter(|&&x| x == t).count(), 600);
        }
        // round-robin interleaving keeps every block mixed
        assert_eq!(&types[..5], &[1, 2, 3, 4, 5]);
        assert!(allocate_types(10, &[0.0; 5]).is_err());
        assert!(allocate_types(10, &[1.0, -1.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn dataset_splits_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        let m1 = generate_dataset(10, 7, &[1.0; 5], 60, 32, 16, 12, &d1).unwrap();
        let m2 = generate_dataset(10, 7, &[1.0; 5], 60, 32, 16, 12, &d2).unwrap();
        assert_eq!(m1.indices(Split::Train).len(), 8);
        assert_eq!(m1.indices(Split::Eval).len(), 1);
        assert_eq!(m1.indices(Split::Test).len(), 1);
        for e in &m1.samples {
            let b1 = std::fs::read(d1.join(&e.file)).unwrap();
            let b2 = std::fs::read(d2.join(&e.file)).unwrap();
            assert_eq!(b1, b2, "sample bytes differ for {}", e.file);
        }
        let loaded = DatasetManifest::load(&d1).unwrap();
        assert_eq!(loaded.count, m2.count);
    }

    #[test]
    fn sample_roundtrip_exact() {
        let sample = generate_sample(5, 3, 4, 60, 32, 16, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        write_sample(&sample, &path).unwrap();
        let back = read_sample(&path).unwrap();
        assert_eq!(sample, back);
    }

    #[test]
    fn sample_invariants_hold() {
        for k in 0..20 {
            let sample = generate_sample(9, k, (k % 5 + 1) as u32, 120, 32, 16, 12).unwrap();
            let l = arc_length(&sample.workpiece_line0);
            assert!((arc_length(&sample.loaded_line) - l).abs() / l < 1e-3);
            assert!(sample.workpiece_line0.points()[0].coords.norm() < 1e-9);
            assert!(sample.eta > ETA_BASE && sample.eta < ETA_BASE + ETA_SPAN);
            assert_eq!(sample.mold_line.len(), 120);
            assert_eq!(sample.loaded_line.len(), 120);
            assert_eq!(sample.final_line.len(), 120);
        }
    }

    #[test]
    fn read_rejects_bad_magic() {
        let sample = generate_sample(5, 0, 1, 60, 32, 16, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        write_sample(&sample, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_sample(&path), Err(OracleError::BadMagic(_))));
    }

    #[test]
    fn read_rejects_bad_version() {
        let sample = generate_sample(5, 0, 1, 60, 32, 16, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        write_sample(&sample, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_sample(&path), Err(OracleError::BadVersion(9))));
    }

    #[test]
    fn read_names_truncated_section() {
        let sample = generate_sample(5, 0, 1, 60, 32, 16, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        write_sample(&sample, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // cut in the middle of the grid payload
        let cut = 4 + 4 + 4 + 4 + sample.section_params.values.len() * 4
            + 4 + sample.contour.vertices.len() * 8
            + 8 + 12 + (32 * 16 * 4) / 2;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        match read_sample(&path) {
            Err(OracleError::Truncated(section)) => assert_eq!(section, "grid"),
            other => panic!("expected grid truncation, got {other:?}"),
        }
    }
}
