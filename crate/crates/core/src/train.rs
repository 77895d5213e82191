//! Training loop with three partitioned Adam optimizers, loss weighting from
//! per-axis data ranges, evaluation over dataset splits, and attention-map
//! export.
//!
//! The parameter groups: group R (section encoder/decoder) is driven by the
//! reconstruction loss, group A (line/motion encoders, loading stage, loaded
//! decoder) by the loaded-line loss, group B (unloading stage and final
//! decoder) by the final-line loss. Groups own disjoint parameters and, with
//! the training-time detachments, disjoint gradients.

use crate::metrics::{metric_iou3d, metric_mad, metric_te, MetricsError};
use crate::model::{
    save_checkpoint, Detach, ModelConfig, ModelError, ModelForward, ModelHandles, ParamStore,
    Prediction, SampleTensors,
};
use crate::oracle::{DatasetManifest, OracleError, Sample, Split};
use crate::section::write_pgm;
use crate::tensor::{Scalar, Tape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Data(#[from] OracleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset/config mismatch: {0}")]
    Mismatch(String),
    #[error("non-finite gradient on parameter '{0}'")]
    NonFiniteGrad(String),
    #[error("empty split")]
    EmptySplit,
    #[error("parameter '{0}' not covered by any optimizer group")]
    Orphan(String),
}

/// Optimizer groups of the three-loss partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    /// Section encoder + decoder, trained by the reconstruction loss.
    R,
    /// Encoders, loading stage, loaded-line decoder; trained by the loaded loss.
    A,
    /// Unloading stage and final-line decoder; trained by the final loss.
    B,
}

/// Classifies a parameter name into its optimizer group.
pub fn classify(name: &str) -> Option<Group> {
    match name {
        "pos.x" | "pos.y" | "pos.z" => return Some(Group::A),
        "pos.za" => return Some(Group::B),
        _ => {}
    }
    for (prefix, group) in [
        ("cse.", Group::R),
        ("csd.", Group::R),
        ("cle_w.", Group::A),
        ("cle_m.", Group::A),
        ("mpe.", Group::A),
        ("dp_a.", Group::A),
        ("cld_a.", Group::A),
        ("dp_b.", Group::B),
        ("cld_b.", Group::B),
    ] {
        if name.starts_with(prefix) {
            return Some(group);
        }
    }
    None
}

/// Store indices per group; errors if any parameter is unclassified.
pub fn partition<T: Scalar>(store: &ParamStore<T>) -> Result<[Vec<usize>; 3], TrainError> {
    let mut groups: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (idx, p) in store.iter().enumerate() {
        match classify(&p.name) {
            Some(Group::R) => groups[0].push(idx),
            Some(Group::A) => groups[1].push(idx),
            Some(Group::B) => groups[2].push(idx),
            None => return Err(TrainError::Orphan(p.name.clone())),
        }
    }
    Ok(groups)
}

/// Bias-corrected Adam over one parameter group.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: vec![None; n_params] }
    }

    /// Applies one update to the group's parameters from the store gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, group: &[usize]) -> Result<(), TrainError> {
        self.step += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let corr1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(self.step as i32)));
        let corr2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(self.step as i32)));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for &idx in group {
            let grad_finite = store.get(idx).grad.data.iter().all(|v| v.is_finite());
            if !grad_finite {
                return Err(TrainError::NonFiniteGrad(store.get(idx).name.clone()));
            }
            if self.moments[idx].is_none() {
                let shape = store.get(idx).value.shape.clone();
                self.moments[idx] = Some((Tensor::zeros(&shape), Tensor::zeros(&shape)));
            }
            let (m, v) = self.moments[idx].as_mut().unwrap();
            let p = store.get_mut(idx);
            for k in 0..p.value.data.len() {
                let g = p.grad.data[k];
                m.data[k] = b1 * m.data[k] + one_m_b1 * g;
                v.data[k] = b2 * v.data[k] + one_m_b2 * g * g;
                let m_hat = m.data[k] * corr1;
                let v_hat = v.data[k] * corr2;
                p.value.data[k] = p.value.data[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Per-axis loss weights from the ground-truth final-line coordinate ranges.
/// Axes with a degenerate range get weight zero and the rest renormalize.
pub fn compute_lambda_weights(final_lines: &[&[crate::geometry::Point3]]) -> Result<[f64; 3], TrainError> {
    if final_lines.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for line in final_lines {
        for p in line.iter() {
            for (k, v) in [p.x, p.y, p.z].into_iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
    }
    let mut ranges = [0.0; 3];
    for k in 0..3 {
        let r = hi[k] - lo[k];
        ranges[k] = if r < 1e-6 { 0.0 } else { r };
    }
    let total: f64 = ranges.iter().sum();
    if total <= 0.0 {
        // fully degenerate data: fall back to equal weights
        return Ok([1.0 / 3.0; 3]);
    }
    Ok([ranges[0] / total, ranges[1] / total, ranges[2] / total])
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_r: f64,
    pub loss_p_a: f64,
    pub loss_p_b: f64,
}

/// Training controls beyond the model dimensions.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Multiplies each loss (r, a, b) before backward; 0 freezes its group.
    pub loss_scales: [f64; 3],
    /// Skips a loss's backward and optimizer step entirely.
    pub skip_losses: [bool; 3],
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            lr: 1e-3,
            batch: 8,
            epochs: 600,
            seed: 0,
            loss_scales: [1.0; 3],
            skip_losses: [false; 3],
        }
    }
}

pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub lambda: [f64; 3],
    pub log: Vec<LossRow>,
}

fn fisher_yates(n: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Loads and shapes every sample of a split.
pub fn load_split_tensors(
    dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
    cfg: &ModelConfig,
) -> Result<Vec<(usize, Sample, SampleTensors<f32>)>, TrainError> {
    if manifest.m != cfg.m || manifest.h != cfg.h || manifest.w != cfg.w {
        return Err(TrainError::Mismatch(format!(
            "dataset (m={}, h={}, w={}) vs config (m={}, h={}, w={})",
            manifest.m, manifest.h, manifest.w, cfg.m, cfg.h, cfg.w
        )));
    }
    let mut out = Vec::new();
    for idx in manifest.indices(split) {
        let sample = manifest.read_sample_at(dir, idx)?;
        let tensors = SampleTensors::from_sample(&sample, cfg)?;
        out.push((idx, sample, tensors));
    }
    if out.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    Ok(out)
}

/// Runs the three-optimizer loop. `on_step(store, global_step)` fires after
/// every optimizer step triple, letting tests capture trajectories.
pub fn train_with_callback(
    cfg: &TrainConfig,
    store: ParamStore<f32>,
    train_samples: &[(usize, Sample, SampleTensors<f32>)],
    mut on_step: impl FnMut(&ParamStore<f32>, usize),
) -> Result<TrainOutcome, TrainError> {
    cfg.model.validate()?;
    let mut store = store;
    let handles = ModelHandles::resolve(&store, &cfg.model)?;
    let groups = partition(&store)?;
    let final_lines: Vec<&[crate::geometry::Point3]> = train_samples
        .iter()
        .map(|(_, s, _)| s.final_line.points())
        .collect();
    let lambda = compute_lambda_weights(&final_lines)?;

    let mut adam_r = AdamState::new(cfg.lr, store.len());
    let mut adam_a = AdamState::new(cfg.lr, store.len());
    let mut adam_b = AdamState::new(cfg.lr, store.len());

    let mut log = Vec::new();
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
        let order = fisher_yates(train_samples.len(), &mut rng);
        for chunk in order.chunks(cfg.batch) {
            // forward every sample of the batch once, keeping the tapes
            let mut tapes = Vec::with_capacity(chunk.len());
            let mut sums = [0.0f64; 3];
            for &si in chunk {
                let (_, _, tensors) = &train_samples[si];
                let mut tape = Tape::new();
                let mut fwd = ModelForward::new(&mut tape, &store, &handles, &cfg.model);
                let out = fwd.forward_full(tensors, Detach::training())?;
                let l_r = fwd.loss_r(out.s_r, &tensors.grid)?;
                let l_a = fwd.loss_p(out.p_a, &tensors.loaded_target, lambda)?;
                let l_b = fwd.loss_p(out.p_b, &tensors.final_target, lambda)?;
                let scaled = [
                    fwd.tape.scale(l_r, cfg.loss_scales[0])?,
                    fwd.tape.scale(l_a, cfg.loss_scales[1])?,
                    fwd.tape.scale(l_b, cfg.loss_scales[2])?,
                ];
                sums[0] += tape.value(l_r).scalar_value().to_f64();
                sums[1] += tape.value(l_a).scalar_value().to_f64();
                sums[2] += tape.value(l_b).scalar_value().to_f64();
                tapes.push((tape, scaled));
            }
            let inv_batch = 1.0 / chunk.len() as f64;
            let optimizers: [(&mut AdamState<f32>, &Vec<usize>); 3] = [
                (&mut adam_r, &groups[0]),
                (&mut adam_a, &groups[1]),
                (&mut adam_b, &groups[2]),
            ];
            let mut kind = 0;
            for (adam, group) in optimizers {
                if !cfg.skip_losses[kind] {
                    store.zero_grads();
                    for (tape, scaled) in &tapes {
                        let grads = tape.backward(scaled[kind], f32::from_f64(inv_batch))?;
                        tape.accumulate_param_grads(&grads, &mut store);
                    }
                    adam.step(&mut store, group)?;
                }
                kind += 1;
            }
            log.push(LossRow {
                epoch,
                step: global_step,
                loss_r: sums[0] * inv_batch,
                loss_p_a: sums[1] * inv_batch,
                loss_p_b: sums[2] * inv_batch,
            });
            global_step += 1;
            on_step(&store, global_step);
        }
    }
    Ok(TrainOutcome { store, lambda, log })
}

/// Convenience wrapper: train from a dataset directory, write the checkpoint
/// and the per-step loss CSV.
pub fn train_to_files(
    cfg: &TrainConfig,
    data_dir: &Path,
    initial: ParamStore<f32>,
    ckpt_path: &Path,
    loss_csv_path: &Path,
) -> Result<TrainOutcome, TrainError> {
    let manifest = DatasetManifest::load(data_dir)?;
    let train_samples = load_split_tensors(data_dir, &manifest, Split::Train, &cfg.model)?;
    let outcome = train_with_callback(cfg, initial, &train_samples, |_, _| {})?;
    save_checkpoint(&outcome.store, &cfg.model, ckpt_path)?;
    write_loss_csv(&outcome.log, loss_csv_path)?;
    Ok(outcome)
}

pub fn write_loss_csv(log: &[LossRow], path: &Path) -> Result<(), TrainError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,step,loss_r,loss_p_a,loss_p_b")?;
    for row in log {
        writeln!(
            f,
            "{},{},{:.9},{:.9},{:.9}",
            row.epoch, row.step, row.loss_r, row.loss_p_a, row.loss_p_b
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub mad: f64,
    pub iou3d: f64,
    pub te: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mad: f64,
    pub iou3d: f64,
    pub te: f64,
    pub per_sample: Vec<SampleMetrics>,
}

/// Final-line prediction quality over a list of samples.
pub fn evaluate(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    samples: &[(usize, Sample, SampleTensors<f32>)],
    pitch: f64,
    tail_points: usize,
) -> Result<MetricsReport, TrainError> {
    let handles = ModelHandles::resolve(store, cfg)?;
    let mut per_sample = Vec::with_capacity(samples.len());
    for (idx, sample, tensors) in samples {
        let pred: Prediction = crate::model::predict(store, &handles, cfg, tensors)?;
        let gt = sample.final_line.points();
        let mad = metric_mad(&pred.final_line, gt)?;
        let (iou3d, te) = match (
            metric_iou3d(&pred.final_line, gt, &sample.contour, pitch),
            metric_te(&pred.final_line, gt, &sample.contour, tail_points),
        ) {
            (Ok(i), Ok(t)) => (i, t),
            // degenerate predicted sweeps (untrained nets) count as no overlap
            _ => (0.0, f64::INFINITY),
        };
        per_sample.push(SampleMetrics { index: *idx, mad, iou3d, te });
    }
    let n = per_sample.len() as f64;
    Ok(MetricsReport {
        mad: per_sample.iter().map(|s| s.mad).sum::<f64>() / n,
        iou3d: per_sample.iter().map(|s| s.iou3d).sum::<f64>() / n,
        te: per_sample.iter().map(|s| s.te).sum::<f64>() / n,
        per_sample,
    })
}

/// Writes every attention matrix of one sample as CSV and normalized PGM.
pub fn export_attention(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    tensors: &SampleTensors<f32>,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>, TrainError> {
    let handles = ModelHandles::resolve(store, cfg)?;
    let pred = crate::model::predict(store, &handles, cfg, tensors)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (stage, maps) in [("a", &pred.attn_a), ("b", &pred.attn_b)] {
        for (layer, map) in maps.iter().enumerate() {
            let csv = out_dir.join(format!("attn_{stage}_layer{layer}.csv"));
            let mut f = std::fs::File::create(&csv)?;
            for row in map.chunks(cfg.n) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
                writeln!(f, "{}", line.join(","))?;
            }
            written.push(csv);
            let pgm = out_dir.join(format!("attn_{stage}_layer{layer}.pgm"));
            write_pgm(map, cfg.n, cfg.n, &pgm)?;
            written.push(pgm);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use crate::model::init_params;
    use crate::oracle::generate_sample;

    fn small_cfg() -> ModelConfig {
        ModelConfig { m: 24, n: 6, c: 8, y: 1, s_a: 2, s_b: 2, h: 32, w: 16, ffn_hidden: 16, eps: 1e-5 }
    }

    fn tiny_dataset(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<(usize, Sample, SampleTensors<f32>)> {
        (0..n)
            .map(|i| {
                let s = generate_sample(seed, i as u64, (i % 5 + 1) as u32, cfg.m, cfg.h, cfg.w, 12).unwrap();
                let t = SampleTensors::from_sample(&s, cfg).unwrap();
                (i, s, t)
            })
            .collect()
    }

    #[test]
    fn lambda_weight_examples() {
        // ranges (100, 10, 10)
        let a = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(100.0, 10.0, 10.0),
        ];
        let lines: Vec<&[Point3]> = vec![&a];
        let l = compute_lambda_weights(&lines).unwrap();
        assert!((l[0] - 0.8333).abs() < 1e-4);
        assert!((l[1] - 0.0833).abs() < 1e-4);
        assert!((l[2] - 0.0833).abs() < 1e-4);
        assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // isotropic
        let b = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(5.0, 5.0, 5.0)];
        let lines: Vec<&[Point3]> = vec![&b];
        let l = compute_lambda_weights(&lines).unwrap();
        for v in l {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        // straight-mold data: y and z ranges collapse
        let c = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(500.0, 0.0, 0.0)];
        let lines: Vec<&[Point3]> = vec![&c];
        let l = compute_lambda_weights(&lines).unwrap();
        assert_eq!(l, [1.0, 0.0, 0.0]);

        let empty: Vec<&[Point3]> = Vec::new();
        assert!(compute_lambda_weights(&empty).is_err());
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let idx = store.add("cse.w".into(), Tensor::scalar(1.0));
        store.get_mut(idx).grad.data[0] = 2.0;
        let mut adam = AdamState::new(0.1, 1);
        adam.step(&mut store, &[idx]).unwrap();
        let w = store.get(idx).value.data[0];
        assert!((w - 0.9).abs() < 1e-6, "first step gave {w}");
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let idx = store.add("cse.w".into(), Tensor::from_vec(&[2], vec![1.5, -0.25]));
        let mut adam = AdamState::new(0.1, 1);
        for _ in 0..5 {
            adam.step(&mut store, &[idx]).unwrap();
        }
        assert_eq!(store.get(idx).value.data, vec![1.5, -0.25]);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let idx = store.add("cse.w".into(), Tensor::scalar(1.0));
        store.get_mut(idx).grad.data[0] = f64::NAN;
        let mut adam = AdamState::new(0.1, 1);
        assert!(matches!(
            adam.step(&mut store, &[idx]),
            Err(TrainError::NonFiniteGrad(_))
        ));
    }

    #[test]
    fn partition_covers_everything_exactly_once() {
        let cfg = small_cfg();
        let store = init_params::<f32>(&cfg, 1).unwrap();
        let groups = partition(&store).unwrap();
        let total: usize = groups.iter().map(|g| g.len()).sum();
        assert_eq!(total, store.len());
        let mut seen = vec![false; store.len()];
        for g in &groups {
            for &i in g {
                assert!(!seen[i], "parameter in two groups");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        // spot checks
        assert_eq!(classify("pos.z"), Some(Group::A));
        assert_eq!(classify("pos.za"), Some(Group::B));
        assert_eq!(classify("cse.proj.weight"), Some(Group::R));
        assert_eq!(classify("nonsense"), None);
    }

    #[test]
    fn single_step_gradient_ownership() {
        // from one fixed state, scaling a loss changes only its own group
        let cfg = small_cfg();
        let samples = tiny_dataset(&cfg, 4, 5);
        let store = init_params::<f32>(&cfg, 9).unwrap();
        let run_one = |scales: [f64; 3]| -> ParamStore<f32> {
            let mut tc = TrainConfig::new(cfg);
            tc.epochs = 1;
            tc.batch = 4;
            tc.seed = 3;
            tc.loss_scales = scales;
            train_with_callback(&tc, store.clone(), &samples, |_, _| {})
                .unwrap()
                .store
        };
        let base = run_one([1.0, 1.0, 1.0]);
        let scaled_r = run_one([2.0, 1.0, 1.0]);
        let groups = partition(&base).unwrap();
        // group R differs, groups A and B bitwise identical
        let differs = |a: &ParamStore<f32>, b: &ParamStore<f32>, idxs: &[usize]| -> bool {
            idxs.iter().any(|&i| a.get(i).value.data != b.get(i).value.data)
        };
        assert!(differs(&base, &scaled_r, &groups[0]), "R should move differently");
        assert!(!differs(&base, &scaled_r, &groups[1]), "A must be bitwise unchanged");
        assert!(!differs(&base, &scaled_r, &groups[2]), "B must be bitwise unchanged");

        let scaled_a = run_one([1.0, 2.0, 1.0]);
        assert!(!differs(&base, &scaled_a, &groups[0]));
        assert!(differs(&base, &scaled_a, &groups[1]));
        assert!(!differs(&base, &scaled_a, &groups[2]));

        let scaled_b = run_one([1.0, 1.0, 2.0]);
        assert!(!differs(&base, &scaled_b, &groups[0]));
        assert!(!differs(&base, &scaled_b, &groups[1]));
        assert!(differs(&base, &scaled_b, &groups[2]));
    }

    #[test]
    fn zeroing_equals_skipping_over_steps() {
        let cfg = small_cfg();
        let samples = tiny_dataset(&cfg, 8, 6);
        let store = init_params::<f32>(&cfg, 10).unwrap();
        for kind in 0..3 {
            let mut zeroed = TrainConfig::new(cfg);
            zeroed.epochs = 3;
            zeroed.batch = 4;
            zeroed.seed = 8;
            zeroed.loss_scales[kind] = 0.0;
            let mut skipped = zeroed.clone();
            skipped.loss_scales[kind] = 1.0;
            skipped.skip_losses[kind] = true;
            let out_z = train_with_callback(&zeroed, store.clone(), &samples, |_, _| {}).unwrap();
            let out_s = train_with_callback(&skipped, store.clone(), &samples, |_, _| {}).unwrap();
            for (p, q) in out_z.store.iter().zip(out_s.store.iter()) {
                assert_eq!(p.value.data, q.value.data, "{} differs for kind {kind}", p.name);
            }
            // the zeroed group never moved
            let groups = partition(&store).unwrap();
            for &i in &groups[kind] {
                assert_eq!(
                    out_z.store.get(i).value.data,
                    store.get(i).value.data,
                    "zeroed group moved"
                );
            }
        }
    }

    #[test]
    fn training_runs_and_loss_csv_has_three_columns() {
        let cfg = small_cfg();
        let samples = tiny_dataset(&cfg, 16, 2);
        let store = init_params::<f32>(&cfg, 11).unwrap();
        let mut tc = TrainConfig::new(cfg);
        tc.epochs = 1;
        tc.batch = 8;
        let out = train_with_callback(&tc, store, &samples, |_, _| {}).unwrap();
        assert_eq!(out.log.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("loss.csv");
        write_loss_csv(&out.log, &csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,step,loss_r,loss_p_a,loss_p_b");
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn short_training_reduces_losses() {
        let cfg = small_cfg();
        let samples = tiny_dataset(&cfg, 24, 3);
        let store = init_params::<f32>(&cfg, 12).unwrap();
        let mut tc = TrainConfig::new(cfg);
        tc.epochs = 8;
        tc.batch = 8;
        let out = train_with_callback(&tc, store, &samples, |_, _| {}).unwrap();
        let epoch_avg = |e: usize, f: fn(&LossRow) -> f64| -> f64 {
            let rows: Vec<&LossRow> = out.log.iter().filter(|r| r.epoch == e).collect();
            rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
        };
        assert!(
            epoch_avg(7, |r| r.loss_p_b) < epoch_avg(0, |r| r.loss_p_b),
            "final-line loss did not go down"
        );
        assert!(
            epoch_avg(7, |r| r.loss_r) < epoch_avg(0, |r| r.loss_r),
            "reconstruction loss did not go down"
        );
    }

    #[test]
    fn cse_features_separate_after_one_step() {
        // two type-1 sections with different thickness produce different
        // features once the reconstruction loss has adjusted the encoder
        let cfg = small_cfg();
        let samples = tiny_dataset(&cfg, 4, 21);
        let store = init_params::<f32>(&cfg, 13).unwrap();
        let mut tc = TrainConfig::new(cfg);
        tc.epochs = 1;
        tc.batch = 4;
        let out = train_with_callback(&tc, store, &samples, |_, _| {}).unwrap();
        let handles = ModelHandles::resolve(&out.store, &cfg).unwrap();
        let mut features = Vec::new();
        for (_, _, t) in samples.iter().take(2) {
            let mut tape = Tape::new();
            let mut fwd = ModelForward::new(&mut tape, &out.store, &handles, &cfg);
            let s = fwd.cse_encode(&t.grid).unwrap();
            features.push(tape.value(s).data.clone());
        }
        assert_ne!(features[0], features[1], "section features collapsed");
    }

    #[test]
    fn determinism_two_identical_runs() {
        let cfg = small_cfg();
        let samples = tiny_dataset(&cfg, 8, 4);
        let run = || {
            let store = init_params::<f32>(&cfg, 14).unwrap();
            let mut tc = TrainConfig::new(cfg);
            tc.epochs = 2;
            tc.batch = 4;
            tc.seed = 5;
            train_with_callback(&tc, store, &samples, |_, _| {}).unwrap()
        };
        let a = run();
        let b = run();
        for (p, q) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.value.data, q.value.data, "{} differs between runs", p.name);
        }
        for (r1, r2) in a.log.iter().zip(&b.log) {
            assert_eq!(r1.loss_p_b, r2.loss_p_b);
        }
    }

    #[test]
    fn resume_continues_loss_curve() {
        let cfg = small_cfg();
        let samples = tiny_dataset(&cfg, 16, 7);
        let store = init_params::<f32>(&cfg, 15).unwrap();
        let mut tc = TrainConfig::new(cfg);
        tc.epochs = 6;
        tc.batch = 8;
        let full = train_with_callback(&tc, store.clone(), &samples, |_, _| {}).unwrap();

        let mut first = tc.clone();
        first.epochs = 3;
        let part1 = train_with_callback(&first, store, &samples, |_, _| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("mid.ckpt");
        save_checkpoint(&part1.store, &cfg, &ckpt).unwrap();
        let (resumed_store, _) = crate::model::load_checkpoint(&ckpt, Some(&cfg)).unwrap();
        let mut second = tc.clone();
        second.epochs = 3;
        let part2 = train_with_callback(&second, resumed_store, &samples, |_, _| {}).unwrap();

        // loss right after resume stays close to the pre-save level: the
        // parameters round-trip exactly, only optimizer moments reset
        let last_before: f64 = part1.log.iter().rev().take(2).map(|r| r.loss_p_b).sum::<f64>() / 2.0;
        let first_after: f64 = part2.log.iter().take(2).map(|r| r.loss_p_b).sum::<f64>() / 2.0;
        assert!(
            first_after <= last_before * 1.10,
            "loss jumped at resume: {last_before} -> {first_after}"
        );
        let _ = full;
    }

    #[test]
    fn evaluation_produces_finite_report() {
        let cfg = small_cfg();
        let samples = tiny_dataset(&cfg, 6, 8);
        let store = init_params::<f32>(&cfg, 16).unwrap();
        let mut tc = TrainConfig::new(cfg);
        tc.epochs = 2;
        tc.batch = 4;
        let out = train_with_callback(&tc, store, &samples, |_, _| {}).unwrap();
        let report = evaluate(&out.store, &cfg, &samples, 2.0, 16).unwrap();
        assert!(report.mad.is_finite());
        assert_eq!(report.per_sample.len(), 6);
    }

    #[test]
    fn attention_export_files_and_determinism() {
        let cfg = small_cfg();
        let samples = tiny_dataset(&cfg, 2, 9);
        let store = init_params::<f32>(&cfg, 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out1 = dir.path().join("a");
        let out2 = dir.path().join("b");
        let files1 = export_attention(&store, &cfg, &samples[0].2, &out1).unwrap();
        let files2 = export_attention(&store, &cfg, &samples[0].2, &out2).unwrap();
        // one CSV and one PGM per layer and stage
        assert_eq!(files1.len(), 2 * (cfg.s_a + cfg.s_b));
        for (f1, f2) in files1.iter().zip(&files2) {
            assert_eq!(std::fs::read(f1).unwrap(), std::fs::read(f2).unwrap());
        }
        // CSV rows sum to one
        let text = std::fs::read_to_string(&files1[0]).unwrap();
        for line in text.lines() {
            let s: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
