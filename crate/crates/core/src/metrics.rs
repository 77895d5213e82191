//! Evaluation metrics: mean absolute distance between characteristic lines,
//! volumetric IoU of the swept workpieces, and tail-face error.
//!
//! The swept solid of a line is its cross-section contour carried along
//! rotation minimizing frames. Voxelization marks a cell occupied when its
//! center projects inside the contour in the frame of the nearest segment.

use crate::geometry::{rotation_minimizing_frames, CharLine, Frame, GeometryError, Point3, Vec3};
use crate::section::{contour_bbox, winding_number, Contour};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("point counts differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate sweep: {0}")]
    DegenerateSweep(#[from] GeometryError),
    #[error("relative improvement needs a nonzero reference value")]
    ZeroDenominator,
    #[error("empty input")]
    Empty,
}

/// Mean index-paired Euclidean distance (mm).
pub fn metric_mad(pred: &[Point3], gt: &[Point3]) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, q)| (p - q).norm()).sum();
    Ok(sum / pred.len() as f64)
}

/// Centers contour vertices on their bounding-box midpoint.
fn centered_contour(contour: &Contour) -> (Vec<[f64; 2]>, f64) {
    let (lo, hi) = contour_bbox(contour);
    let c = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let verts: Vec<[f64; 2]> = contour
        .vertices
        .iter()
        .map(|v| [v[0] - c[0], v[1] - c[1]])
        .collect();
    let r_max = verts
        .iter()
        .map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt())
        .fold(0.0, f64::max);
    (verts, r_max)
}

fn frames_for(points: &[Point3]) -> Result<Vec<Frame>, MetricsError> {
    let line = CharLine::new(points.to_vec())?;
    let t0 = (points[1] - points[0]).normalize();
    let seed = if t0.dot(&Vec3::y()).abs() < 0.9 { Vec3::y() } else { Vec3::z() };
    Ok(rotation_minimizing_frames(&line, &seed)?)
}

struct VoxelGrid {
    origin: Point3,
    pitch: f64,
    nx: usize,
    ny: usize,
    nz: usize,
}

impl VoxelGrid {
    fn key(&self, ix: usize, iy: usize, iz: usize) -> u64 {
        ((ix as u64) * self.ny as u64 + iy as u64) * self.nz as u64 + iz as u64
    }

    fn center(&self, ix: usize, iy: usize, iz: usize) -> Point3 {
        Point3::new(
            self.origin.x + (ix as f64 + 0.5) * self.pitch,
            self.origin.y + (iy as f64 + 0.5) * self.pitch,
            self.origin.z + (iz as f64 + 0.5) * self.pitch,
        )
    }
}

/// For each voxel near the tube, the nearest segment and its axial parameter.
fn nearest_segment_map(
    points: &[Point3],
    r_max: f64,
    grid: &VoxelGrid,
) -> HashMap<u64, (f64, usize, f64)> {
    let mut best: HashMap<u64, (f64, usize, f64)> = HashMap::new();
    let reach = r_max + grid.pitch;
    for si in 0..points.len() - 1 {
        let a = points[si];
        let b = points[si + 1];
        let lo = [
            a.x.min(b.x) - reach,
            a.y.min(b.y) - reach,
            a.z.min(b.z) - reach,
        ];
        let hi = [
            a.x.max(b.x) + reach,
            a.y.max(b.y) + reach,
            a.z.max(b.z) + reach,
        ];
        let ix0 = (((lo[0] - grid.origin.x) / grid.pitch).floor().max(0.0)) as usize;
        let iy0 = (((lo[1] - grid.origin.y) / grid.pitch).floor().max(0.0)) as usize;
        let iz0 = (((lo[2] - grid.origin.z) / grid.pitch).floor().max(0.0)) as usize;
        let ix1 = ((((hi[0] - grid.origin.x) / grid.pitch).ceil()).max(0.0) as usize).min(grid.nx);
        let iy1 = ((((hi[1] - grid.origin.y) / grid.pitch).ceil()).max(0.0) as usize).min(grid.ny);
        let iz1 = ((((hi[2] - grid.origin.z) / grid.pitch).ceil()).max(0.0) as usize).min(grid.nz);
        let ab = b - a;
        let len2 = ab.dot(&ab);
        for ix in ix0..ix1 {
            for iy in iy0..iy1 {
                for iz in iz0..iz1 {
                    let c = grid.center(ix, iy, iz);
                    let t = ((c - a).dot(&ab) / len2).clamp(0.0, 1.0);
                    let q = a + ab * t;
                    let d2 = (c - q).norm_squared();
                    if d2 > reach * reach {
                        continue;
                    }
                    let key = grid.key(ix, iy, iz);
                    match best.get_mut(&key) {
                        Some(entry) if entry.0 <= d2 => {}
                        Some(entry) => *entry = (d2, si, t),
                        None => {
                            best.insert(key, (d2, si, t));
                        }
                    }
                }
            }
        }
    }
    best
}

/// Occupied voxel set of the swept solid.
fn voxelize_sweep(
    points: &[Point3],
    frames: &[Frame],
    verts: &[[f64; 2]],
    r_max: f64,
    grid: &VoxelGrid,
) -> std::collections::HashSet<u64> {
    let near = nearest_segment_map(points, r_max, grid);
    let last_seg = points.len() - 2;
    let mut occupied = std::collections::HashSet::new();
    for (&key, &(_, si, t)) in &near {
        let iz = (key % grid.nz as u64) as usize;
        let iy = ((key / grid.nz as u64) % grid.ny as u64) as usize;
        let ix = (key / (grid.nz as u64 * grid.ny as u64)) as usize;
        let c = grid.center(ix, iy, iz);
        let a = points[si];
        let q = a + (points[si + 1] - a) * t;
        // frame interpolated along the segment, re-orthogonalized
        let f0 = &frames[si];
        let f1 = &frames[si + 1];
        let tangent = (f0.tangent * (1.0 - t) + f1.tangent * t).normalize();
        let normal_raw = f0.normal * (1.0 - t) + f1.normal * t;
        let normal = (normal_raw - tangent * normal_raw.dot(&tangent)).normalize();
        let binormal = tangent.cross(&normal);
        let d = c - q;
        // flat end caps: reject axial overshoot past the first/last point
        let axial = d.dot(&tangent);
        if (si == 0 && t == 0.0 && axial < 0.0) || (si == last_seg && t == 1.0 && axial > 0.0) {
            continue;
        }
        let u = d.dot(&normal);
        let w = d.dot(&binormal);
        if winding_number(verts, [u, w]) != 0 {
            occupied.insert(key);
        }
    }
    occupied
}

/// Volumetric intersection-over-union (percent) of the two swept solids.
pub fn metric_iou3d(
    pred: &[Point3],
    gt: &[Point3],
    contour: &Contour,
    pitch: f64,
) -> Result<f64, MetricsError> {
    if pred.len() < 2 || gt.len() < 2 {
        return Err(MetricsError::Empty);
    }
    let (verts, r_max) = centered_contour(contour);
    let frames_p = frames_for(pred)?;
    let frames_g = frames_for(gt)?;
    let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pred.iter().chain(gt) {
        lo = Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    let pad = r_max + 2.0 * pitch;
    let origin = Point3::new(lo.x - pad, lo.y - pad, lo.z - pad);
    let grid = VoxelGrid {
        origin,
        pitch,
        nx: (((hi.x - lo.x) + 2.0 * pad) / pitch).ceil() as usize + 1,
        ny: (((hi.y - lo.y) + 2.0 * pad) / pitch).ceil() as usize + 1,
        nz: (((hi.z - lo.z) + 2.0 * pad) / pitch).ceil() as usize + 1,
    };
    let occ_p = voxelize_sweep(pred, &frames_p, &verts, r_max, &grid);
    let occ_g = voxelize_sweep(gt, &frames_g, &verts, r_max, &grid);
    let inter = occ_p.intersection(&occ_g).count();
    let union = occ_p.union(&occ_g).count();
    if union == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * inter as f64 / union as f64)
}

/// Uniformly spaced (by arc length) points along the closed contour.
fn contour_samples(verts: &[[f64; 2]], k: usize) -> Vec<[f64; 2]> {
    let n = verts.len();
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    let mut total = 0.0;
    for i in 0..n {
        let a = verts[i];
        let b = verts[(i + 1) % n];
        total += ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        cum.push(total);
    }
    (0..k)
        .map(|j| {
            let s = total * j as f64 / k as f64;
            let i = cum.partition_point(|&c| c < s).max(1) - 1;
            let a = verts[i];
            let b = verts[(i + 1) % n];
            let seg = cum[i + 1] - cum[i];
            let t = if seg > 0.0 { (s - cum[i]) / seg } else { 0.0 };
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect()
}

/// Mean correspondence error (mm) between K contour points placed into the
/// tail frames of the two lines.
pub fn metric_te(
    pred: &[Point3],
    gt: &[Point3],
    contour: &Contour,
    k: usize,
) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gt.len()));
    }
    let (verts, _) = centered_contour(contour);
    let samples = contour_samples(&verts, k);
    let tail_p = *frames_for(pred)?.last().unwrap();
    let tail_g = *frames_for(gt)?.last().unwrap();
    let place = |f: &Frame, s: &[f64; 2]| f.origin + f.normal * s[0] + f.binormal * s[1];
    let sum: f64 = samples
        .iter()
        .map(|s| (place(&tail_p, s) - place(&tail_g, s)).norm())
        .sum();
    Ok(sum / k as f64)
}

/// Relative error reduction (percent) of `ours` against the second best.
pub fn relative_improvement(
    second_best: f64,
    ours: f64,
    higher_is_better: bool,
) -> Result<f64, MetricsError> {
    if second_best == 0.0 {
        return Err(MetricsError::ZeroDenominator);
    }
    let frac = if higher_is_better {
        (ours - second_best) / second_best
    } else {
        (second_best - ours) / second_best
    };
    Ok(100.0 * frac)
}
