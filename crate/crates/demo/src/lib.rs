//! Browser bindings for the stretch-bending sandbox: build a cross-section
//! and its signed distance field, run the loading/springback oracle for a
//! chosen mold, and watch the displacement-compensation design loop walk a
//! mold onto a target shape.
//!
//! Every export returns a JSON string so the page stays a plain static file
//! with a small hand-written script.

use serde::Serialize;
use stretchbend::design::{design_mold, oracle_predictor, DesignOptions};
use stretchbend::geometry::{resample_uniform, CharLine, Point3};
use stretchbend::oracle::{
    involute_motion, mold_curve_dense, sample_rng, sample_section, simulate_loading,
    simulate_springback, stiffness_eta, MoldParams,
};
use stretchbend::section::{param_layout, sdf_rasterize, section_area};
use wasm_bindgen::prelude::wasm_bindgen;

#[derive(Serialize)]
struct SectionView {
    type_id: u32,
    params: Vec<ParamView>,
    contour: Vec<[f64; 2]>,
    area_mm2: f64,
    eta: f64,
    sdf: SdfView,
}

#[derive(Serialize)]
struct ParamView {
    name: String,
    value: f64,
}

#[derive(Serialize)]
struct SdfView {
    h: usize,
    w: usize,
    pitch: f64,
    min: f64,
    max: f64,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct BendView {
    mold: Vec<[f64; 3]>,
    loaded: Vec<[f64; 3]>,
    final_line: Vec<[f64; 3]>,
    motion: [f64; 6],
    eta: f64,
    workpiece_length: f64,
}

#[derive(Serialize)]
struct DesignView {
    target: Vec<[f64; 3]>,
    mold: Vec<[f64; 3]>,
    predicted: Vec<[f64; 3]>,
    history: Vec<DesignStepView>,
    converged: bool,
}

#[derive(Serialize)]
struct DesignStepView {
    iteration: usize,
    mad_mm: f64,
    max_residual_mm: f64,
}

#[derive(Serialize)]
struct ErrorView {
    error: String,
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
}

fn err_json(msg: impl std::fmt::Display) -> String {
    to_json(&ErrorView { error: msg.to_string() })
}

fn line_to_rows(points: &[Point3]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p.x, p.y, p.z]).collect()
}

fn bend_lines(
    a1: f64,
    b1_ratio: f64,
    a2: f64,
    b2_ratio: f64,
    length: f64,
    m: usize,
) -> Result<(CharLine, CharLine), String> {
    let params = MoldParams { a1, b1: a1 * b1_ratio, a2, b2: a2 * b2_ratio };
    let dense = mold_curve_dense(&params, 2048).map_err(|e| e.to_string())?;
    let mold = resample_uniform(&dense, m).map_err(|e| e.to_string())?;
    let loaded = simulate_loading(&mold, length, m).map_err(|e| e.to_string())?;
    Ok((mold, loaded))
}

/// Core of `render_section`, host-testable.
pub fn section_json(type_id: u32, seed: u64, h: usize, w: usize) -> String {
    let mut rng = sample_rng(seed, 0);
    let (params, contour) = match sample_section(type_id, &mut rng, 24) {
        Ok(v) => v,
        Err(e) => return err_json(e),
    };
    let grid = match sdf_rasterize(&contour, h, w) {
        Ok(g) => g,
        Err(e) => return err_json(e),
    };
    let layout = param_layout(type_id).expect("validated type");
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &grid.values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    to_json(&SectionView {
        type_id,
        params: layout
            .iter()
            .zip(&params.values)
            .map(|(spec, &value)| ParamView { name: spec.name.to_string(), value })
            .collect(),
        contour: contour.vertices.clone(),
        area_mm2: section_area(&contour),
        eta: stiffness_eta(&contour),
        sdf: SdfView { h: grid.h, w: grid.w, pitch: grid.pitch, min: lo, max: hi, values: grid.values },
    })
}

/// Core of `simulate_bend`, host-testable.
#[allow(clippy::too_many_arguments)]
pub fn bend_json(
    a1: f64,
    b1_ratio: f64,
    a2: f64,
    b2_ratio: f64,
    length: f64,
    section_type: u32,
    section_seed: u64,
    m: usize,
) -> String {
    if !(100.0..=2000.0).contains(&a1) || !(100.0..=2000.0).contains(&a2) {
        return err_json("semi-axes must be within 100..2000 mm");
    }
    if !(0.0..=0.5).contains(&b1_ratio) || !(0.0..=0.5).contains(&b2_ratio) {
        return err_json("axis ratios must be within 0..0.5");
    }
    if !(50.0..=1500.0).contains(&length) {
        return err_json("workpiece length must be within 50..1500 mm");
    }
    let m = m.clamp(16, 1024);
    let mut rng = sample_rng(section_seed, 0);
    let (_, contour) = match sample_section(section_type, &mut rng, 24) {
        Ok(v) => v,
        Err(e) => return err_json(e),
    };
    let eta = stiffness_eta(&contour);
    let (mold, loaded) = match bend_lines(a1, b1_ratio, a2, b2_ratio, length, m) {
        Ok(v) => v,
        Err(e) => return err_json(e),
    };
    let motion = match involute_motion(&mold, length) {
        Ok(v) => v,
        Err(e) => return err_json(e),
    };
    let final_line = match simulate_springback(&loaded, eta) {
        Ok(v) => v,
        Err(e) => return err_json(e),
    };
    to_json(&BendView {
        mold: line_to_rows(mold.points()),
        loaded: line_to_rows(loaded.points()),
        final_line: line_to_rows(final_line.points()),
        motion: motion.to_array(),
        eta,
        workpiece_length: length,
    })
}

/// Core of `run_design`, host-testable.
#[allow(clippy::too_many_arguments)]
pub fn design_json(
    a1: f64,
    b1_ratio: f64,
    a2: f64,
    b2_ratio: f64,
    length: f64,
    section_type: u32,
    section_seed: u64,
    alpha: f64,
    max_iter: usize,
) -> String {
    if !(0.05..=1.0).contains(&alpha) {
        return err_json("alpha must be within 0.05..1");
    }
    let m = 240;
    let mut rng = sample_rng(section_seed, 0);
    let (_, contour) = match sample_section(section_type, &mut rng, 24) {
        Ok(v) => v,
        Err(e) => return err_json(e),
    };
    let eta = stiffness_eta(&contour);
    // the target is what a known in-family mold would produce
    let (_, loaded) = match bend_lines(a1, b1_ratio, a2, b2_ratio, length, m) {
        Ok(v) => v,
        Err(e) => return err_json(e),
    };
    let target = match simulate_springback(&loaded, eta) {
        Ok(v) => v,
        Err(e) => return err_json(e),
    };
    let mut predictor = oracle_predictor(length, eta, m);
    let opts = DesignOptions { alpha, tol_mm: 0.3, max_iter: max_iter.clamp(1, 60) };
    let result = match design_mold(&target, &mut predictor, &opts) {
        Ok(r) => r,
        Err(e) => return err_json(e),
    };
    to_json(&DesignView {
        target: line_to_rows(target.points()),
        mold: line_to_rows(result.mold.points()),
        predicted: line_to_rows(&result.predicted_final),
        history: result
            .history
            .iter()
            .map(|s| DesignStepView {
                iteration: s.iteration,
                mad_mm: s.mad_mm,
                max_residual_mm: s.max_residual_mm,
            })
            .collect(),
        converged: result.converged,
    })
}

/// Builds a random cross-section of the given family and rasterizes its
/// signed distance field. Returns JSON.
#[wasm_bindgen]
pub fn render_section(type_id: u32, seed: u32, h: usize, w: usize) -> String {
    section_json(type_id, seed as u64, h.clamp(16, 256), w.clamp(16, 256))
}

/// Simulates loading and springback for a bi-elliptic mold. Returns JSON
/// with the mold, loaded, and final lines plus the arm motion parameters.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn simulate_bend(
    a1: f64,
    b1_ratio: f64,
    a2: f64,
    b2_ratio: f64,
    length: f64,
    section_type: u32,
    section_seed: u32,
    m: usize,
) -> String {
    bend_json(a1, b1_ratio, a2, b2_ratio, length, section_type, section_seed as u64, m)
}

/// Runs the displacement-compensation design loop against the physics
/// oracle for a target produced by the given mold parameters. Returns JSON
/// with the target, the designed mold, and the per-iteration history.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn run_design(
    a1: f64,
    b1_ratio: f64,
    a2: f64,
    b2_ratio: f64,
    length: f64,
    section_type: u32,
    section_seed: u32,
    alpha: f64,
    max_iter: usize,
) -> String {
    design_json(
        a1,
        b1_ratio,
        a2,
        b2_ratio,
        length,
        section_type,
        section_seed as u64,
        alpha,
        max_iter,
    )
}

/// Sanity marker for the page to verify the module loaded.
#[wasm_bindgen]
pub fn demo_version() -> String {
    format!("stretchbend-demo {}", env!("CARGO_PKG_VERSION"))
}
