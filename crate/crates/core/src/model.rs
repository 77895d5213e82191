//! The deformation network: token encoders for characteristic lines,
//! cross-section SDFs and motion parameters, a two-stage attention predictor
//! (cross-attention for loading, self-attention for unloading), token
//! decoders back to point space, and the two training losses.
//!
//! Parameters live in a flat named `ParamStore`; the layer structure is a
//! set of index handles resolved by name, so checkpoints reconstruct the
//! exact model.

use crate::geometry::Point3;
use crate::oracle::Sample;
use crate::tensor::{NodeId, Scalar, Tape, Tensor, TensorError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// CSE downsampling channel progression (input channel first).
const CSE_CHANNELS: [usize; 5] = [1, 8, 16, 32, 64];
/// CSD upsampling channel progression (output channel last).
const CSD_CHANNELS: [usize; 5] = [64, 32, 16, 8, 1];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("missing parameter '{0}' in store")]
    MissingParam(String),
    #[error("parameter '{name}' has shape {got:?}, expected {want:?}")]
    ParamShape { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error("input '{what}' has wrong size: got {got}, expected {want}")]
    BadInput { what: &'static str, got: usize, want: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic {0:?} (expected \"LDCK\")")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated in section '{0}'")]
    Truncated(&'static str),
    #[error("checkpoint config {got:?} does not match expected {want:?}")]
    ConfigMismatch { got: Box<ModelConfig>, want: Box<ModelConfig> },
    #[error("checkpoint has unexpected parameter '{0}'")]
    UnexpectedParam(String),
}

/// Network dimensions. `m` points per line split into `n` region tokens of
/// width `c`; `n` must be a multiple of 6 (y tokens per motion DoF).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub m: usize,
    pub n: usize,
    pub c: usize,
    pub y: usize,
    pub s_a: usize,
    pub s_b: usize,
    pub h: usize,
    pub w: usize,
    pub ffn_hidden: usize,
    pub eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { m: 240, n: 12, c: 64, y: 2, s_a: 4, s_b: 4, h: 128, w: 64, ffn_hidden: 128, eps: 1e-5 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::Config(msg));
        if self.m < 1 || self.n < 1 || self.c < 1 || self.y < 1 || self.ffn_hidden < 1 {
            return err("all dimensions must be at least 1".into());
        }
        if self.s_a < 1 || self.s_b < 1 {
            return err("attention stages need at least one layer".into());
        }
        if self.m % self.n != 0 {
            return err(format!("m = {} must be a multiple of n = {}", self.m, self.n));
        }
        if self.n != 6 * self.y {
            return err(format!("n = {} must equal 6*y = {}", self.n, 6 * self.y));
        }
        if self.h % 16 != 0 || self.w % 16 != 0 || self.h < 16 || self.w < 16 {
            return err(format!("grid {}x{} must be a multiple of 16 in both dims", self.h, self.w));
        }
        if !(self.eps > 0.0) {
            return err("eps must be positive".into());
        }
        Ok(())
    }

    pub fn points_per_region(&self) -> usize {
        self.m / self.n
    }
}

/// A named tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Flat collection of all model parameters, addressable by name or index.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: String, value: Tensor<T>) -> usize {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let idx = self.params.len();
        let grad = Tensor::zeros(&value.shape);
        self.by_name.insert(name.clone(), idx);
        self.params.push(Parameter { name, value, grad });
        idx
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, idx: usize) -> &Parameter<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter<T> {
        &mut self.params[idx]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|v| *v = T::ZERO);
        }
    }

    pub fn add_grad(&mut self, idx: usize, g: &Tensor<T>) {
        let p = &mut self.params[idx];
        debug_assert_eq!(p.grad.shape, g.shape);
        for (a, &b) in p.grad.data.iter_mut().zip(&g.data) {
            *a += b;
        }
    }

    /// Names in sorted order (the checkpoint order).
    pub fn sorted_names(&self) -> Vec<&str> {
        self.by_name.keys().map(|s| s.as_str()).collect()
    }
}

enum InitKind {
    Xavier { fan_in: usize, fan_out: usize },
    Zero,
    One,
    Normal { std: f64 },
}

/// Walks every parameter of the model in a fixed order: name, shape, init.
fn walk_params(cfg: &ModelConfig, f: &mut impl FnMut(String, Vec<usize>, InitKind)) {
    let (m, n, c, y) = (cfg.m, cfg.n, cfg.c, cfg.y);
    let region = cfg.points_per_region();

    for side in ["cle_w", "cle_m"] {
        f(format!("{side}.point_embed.weight"), vec![3, c], InitKind::Xavier { fan_in: 3, fan_out: c });
        f(format!("{side}.point_embed.bias"), vec![1, c], InitKind::Zero);
        for i in 0..n {
            let fan_in = region * c;
            f(format!("{side}.region_proj.{i}.weight"), vec![fan_in, c], InitKind::Xavier { fan_in, fan_out: c });
            f(format!("{side}.region_proj.{i}.bias"), vec![1, c], InitKind::Zero);
        }
        f(format!("{side}.global.0.weight"), vec![3 * m, c], InitKind::Xavier { fan_in: 3 * m, fan_out: c });
        f(format!("{side}.global.0.bias"), vec![1, c], InitKind::Zero);
        f(format!("{side}.global.1.weight"), vec![c, c], InitKind::Xavier { fan_in: c, fan_out: c });
        f(format!("{side}.global.1.bias"), vec![1, c], InitKind::Zero);
    }

    for i in 0..4 {
        let (cin, cout) = (CSE_CHANNELS[i], CSE_CHANNELS[i + 1]);
        f(
            format!("cse.conv.{i}.weight"),
            vec![cout, cin, 4, 4],
            InitKind::Xavier { fan_in: cin * 16, fan_out: cout * 16 },
        );
        f(format!("cse.conv.{i}.bias"), vec![cout], InitKind::Zero);
    }
    f("cse.proj.weight".into(), vec![64, c], InitKind::Xavier { fan_in: 64, fan_out: c });
    f("cse.proj.bias".into(), vec![1, c], InitKind::Zero);

    for d in 0..6 {
        f(format!("mpe.embed.{d}.weight"), vec![1, c], InitKind::Xavier { fan_in: 1, fan_out: c });
        f(format!("mpe.embed.{d}.bias"), vec![1, c], InitKind::Zero);
        f(
            format!("mpe.proj.{d}.weight"),
            vec![c, y * c],
            InitKind::Xavier { fan_in: c, fan_out: y * c },
        );
        f(format!("mpe.proj.{d}.bias"), vec![1, y * c], InitKind::Zero);
    }

    for name in ["pos.x", "pos.y", "pos.z", "pos.za"] {
        f(name.into(), vec![n, c], InitKind::Normal { std: 0.02 });
    }

    for (stage, layers, q_in) in [("dp_a", cfg.s_a, 2 * c), ("dp_b", cfg.s_b, c)] {
        for l in 0..layers {
            for proj in ["q", "k", "v"] {
                let fan_in = if proj == "q" { q_in } else { c };
                f(
                    format!("{stage}.layer{l}.{proj}.weight"),
                    vec![fan_in, c],
                    InitKind::Xavier { fan_in, fan_out: c },
                );
                f(format!("{stage}.layer{l}.{proj}.bias"), vec![1, c], InitKind::Zero);
            }
            f(format!("{stage}.layer{l}.ln1.gain"), vec![1, c], InitKind::One);
            f(format!("{stage}.layer{l}.ln1.bias"), vec![1, c], InitKind::Zero);
            f(
                format!("{stage}.layer{l}.ffn.0.weight"),
                vec![c, cfg.ffn_hidden],
                InitKind::Xavier { fan_in: c, fan_out: cfg.ffn_hidden },
            );
            f(format!("{stage}.layer{l}.ffn.0.bias"), vec![1, cfg.ffn_hidden], InitKind::Zero);
            f(
                format!("{stage}.layer{l}.ffn.1.weight"),
                vec![cfg.ffn_hidden, c],
                InitKind::Xavier { fan_in: cfg.ffn_hidden, fan_out: c },
            );
            f(format!("{stage}.layer{l}.ffn.1.bias"), vec![1, c], InitKind::Zero);
            f(format!("{stage}.layer{l}.ln2.gain"), vec![1, c], InitKind::One);
            f(format!("{stage}.layer{l}.ln2.bias"), vec![1, c], InitKind::Zero);
        }
    }

    for side in ["cld_a", "cld_b"] {
        for i in 0..n {
            let fan_out = region * c;
            f(
                format!("{side}.proj.{i}.weight"),
                vec![c, fan_out],
                InitKind::Xavier { fan_in: c, fan_out },
            );
            f(format!("{side}.proj.{i}.bias"), vec![1, fan_out], InitKind::Zero);
        }
        f(format!("{side}.deembed.weight"), vec![c, 3], InitKind::Xavier { fan_in: c, fan_out: 3 });
        f(format!("{side}.deembed.bias"), vec![1, 3], InitKind::Zero);
    }

    let latent = 64 * (cfg.h / 16) * (cfg.w / 16);
    f("csd.fc.weight".into(), vec![c, latent], InitKind::Xavier { fan_in: c, fan_out: latent });
    f("csd.fc.bias".into(), vec![1, latent], InitKind::Zero);
    for i in 0..4 {
        let (cin, cout) = (CSD_CHANNELS[i], CSD_CHANNELS[i + 1]);
        f(
            format!("csd.conv.{i}.weight"),
            vec![cout, cin, 3, 3],
            InitKind::Xavier { fan_in: cin * 9, fan_out: cout * 9 },
        );
        f(format!("csd.conv.{i}.bias"), vec![cout], InitKind::Zero);
    }
}

fn normal_pair(rng: &mut ChaCha12Rng) -> (f64, f64) {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Creates all parameters: Xavier-uniform linear/conv weights, zero biases,
/// unit layer-norm gains, N(0, 0.02^2) position embeddings.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x6d6f_64656c);
    let mut store = ParamStore::new();
    walk_params(cfg, &mut |name, shape, init| {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match init {
            InitKind::Zero => vec![T::ZERO; numel],
            InitKind::One => vec![T::ONE; numel],
            InitKind::Xavier { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..numel).map(|_| T::from_f64(rng.gen_range(-limit..limit))).collect()
            }
            InitKind::Normal { std } => (0..numel)
                .map(|_| {
                    let (z, _) = normal_pair(&mut rng);
                    T::from_f64(z * std)
                })
                .collect(),
        };
        store.add(name, Tensor::from_vec(&shape, data));
    });
    Ok(store)
}

/// Index handles into the store for one line encoder.
#[derive(Debug, Clone)]
pub struct CleHandles {
    pub point_embed: (usize, usize),
    pub region_proj: Vec<(usize, usize)>,
    pub global0: (usize, usize),
    pub global1: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct CseHandles {
    pub conv: Vec<(usize, usize)>,
    pub proj: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct MpeHandles {
    pub embed: Vec<(usize, usize)>,
    pub proj: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct DpLayerHandles {
    pub q: (usize, usize),
    pub k: (usize, usize),
    pub v: (usize, usize),
    pub ln1: (usize, usize),
    pub ffn0: (usize, usize),
    pub ffn1: (usize, usize),
    pub ln2: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct CldHandles {
    pub proj: Vec<(usize, usize)>,
    pub deembed: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct CsdHandles {
    pub fc: (usize, usize),
    pub conv: Vec<(usize, usize)>,
}

/// All store indices the forward pass needs.
#[derive(Debug, Clone)]
pub struct ModelHandles {
    pub cle_w: CleHandles,
    pub cle_m: CleHandles,
    pub cse: CseHandles,
    pub mpe: MpeHandles,
    pub pos_x: usize,
    pub pos_y: usize,
    pub pos_z: usize,
    pub pos_za: usize,
    pub dp_a: Vec<DpLayerHandles>,
    pub dp_b: Vec<DpLayerHandles>,
    pub cld_a: CldHandles,
    pub cld_b: CldHandles,
    pub csd: CsdHandles,
}

impl ModelHandles {
    pub fn resolve<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let find = |name: String| -> Result<usize, ModelError> {
            store.index(&name).ok_or(ModelError::MissingParam(name))
        };
        let pair = |base: String| -> Result<(usize, usize), ModelError> {
            Ok((find(format!("{base}.weight"))?, find(format!("{base}.bias"))?))
        };
        let cle = |side: &str| -> Result<CleHandles, ModelError> {
            Ok(CleHandles {
                point_embed: pair(format!("{side}.point_embed"))?,
                region_proj: (0..cfg.n)
                    .map(|i| pair(format!("{side}.region_proj.{i}")))
                    .collect::<Result<_, _>>()?,
                global0: pair(format!("{side}.global.0"))?,
                global1: pair(format!("{side}.global.1"))?,
            })
        };
        let dp = |stage: &str, layers: usize| -> Result<Vec<DpLayerHandles>, ModelError> {
            (0..layers)
                .map(|l| {
                    Ok(DpLayerHandles {
                        q: pair(format!("{stage}.layer{l}.q"))?,
                        k: pair(format!("{stage}.layer{l}.k"))?,
                        v: pair(format!("{stage}.layer{l}.v"))?,
                        ln1: (
                            find(format!("{stage}.layer{l}.ln1.gain"))?,
                            find(format!("{stage}.layer{l}.ln1.bias"))?,
                        ),
                        ffn0: pair(format!("{stage}.layer{l}.ffn.0"))?,
                        ffn1: pair(format!("{stage}.layer{l}.ffn.1"))?,
                        ln2: (
                            find(format!("{stage}.layer{l}.ln2.gain"))?,
                            find(format!("{stage}.layer{l}.ln2.bias"))?,
                        ),
                    })
                })
                .collect()
        };
        let cld = |side: &str| -> Result<CldHandles, ModelError> {
            Ok(CldHandles {
                proj: (0..cfg.n)
                    .map(|i| pair(format!("{side}.proj.{i}")))
                    .collect::<Result<_, _>>()?,
                deembed: pair(format!("{side}.deembed"))?,
            })
        };
        Ok(ModelHandles {
            cle_w: cle("cle_w")?,
            cle_m: cle("cle_m")?,
            cse: CseHandles {
                conv: (0..4).map(|i| pair(format!("cse.conv.{i}"))).collect::<Result<_, _>>()?,
                proj: pair("cse.proj".into())?,
            },
            mpe: MpeHandles {
                embed: (0..6).map(|d| pair(format!("mpe.embed.{d}"))).collect::<Result<_, _>>()?,
                proj: (0..6).map(|d| pair(format!("mpe.proj.{d}"))).collect::<Result<_, _>>()?,
            },
            pos_x: find("pos.x".into())?,
            pos_y: find("pos.y".into())?,
            pos_z: find("pos.z".into())?,
            pos_za: find("pos.za".into())?,
            dp_a: dp("dp_a", cfg.s_a)?,
            dp_b: dp("dp_b", cfg.s_b)?,
            cld_a: cld("cld_a")?,
            cld_b: cld("cld_b")?,
            csd: CsdHandles {
                fc: pair("csd.fc".into())?,
                conv: (0..4).map(|i| pair(format!("csd.conv.{i}"))).collect::<Result<_, _>>()?,
            },
        })
    }
}

/// Which boundaries cut the gradient flow during a forward pass. Training
/// detaches the section feature at the fusion point and the loading output
/// before the unloading stage so the three optimizer groups own disjoint
/// gradients; gradient checks run with no detachment.
#[derive(Debug, Clone, Copy)]
pub struct Detach {
    pub off_fuse: bool,
    pub stage2: bool,
}

impl Detach {
    pub fn training() -> Self {
        Self { off_fuse: true, stage2: true }
    }

    pub fn none() -> Self {
        Self { off_fuse: false, stage2: false }
    }
}

/// Numeric inputs of one sample, shaped for the network.
#[derive(Debug, Clone)]
pub struct SampleTensors<T> {
    pub workpiece: Tensor<T>,
    pub mold: Tensor<T>,
    pub motion: [f64; 6],
    pub grid: Tensor<T>,
    pub loaded_target: Tensor<T>,
    pub final_target: Tensor<T>,
}

impl<T: Scalar> SampleTensors<T> {
    pub fn from_sample(sample: &Sample, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let line_tensor = |line: &crate::geometry::CharLine, what: &'static str| {
            if line.len() != cfg.m {
                return Err(ModelError::BadInput { what, got: line.len(), want: cfg.m });
            }
            let mut data = Vec::with_capacity(cfg.m * 3);
            for p in line.points() {
                data.push(T::from_f64(p.x));
                data.push(T::from_f64(p.y));
                data.push(T::from_f64(p.z));
            }
            Ok(Tensor::from_vec(&[cfg.m, 3], data))
        };
        if sample.grid.h != cfg.h || sample.grid.w != cfg.w {
            return Err(ModelError::BadInput {
                what: "sdf grid",
                got: sample.grid.h * sample.grid.w,
                want: cfg.h * cfg.w,
            });
        }
        let grid = Tensor::from_vec(
            &[1, cfg.h, cfg.w],
            sample.grid.values.iter().map(|&v| T::from_f64(v)).collect(),
        );
        Ok(Self {
            workpiece: line_tensor(&sample.workpiece_line0, "workpiece line")?,
            mold: line_tensor(&sample.mold_line, "mold line")?,
            motion: sample.motion.to_array(),
            grid,
            loaded_target: line_tensor(&sample.loaded_line, "loaded line")?,
            final_target: line_tensor(&sample.final_line, "final line")?,
        })
    }
}

/// One forward pass: prediction node ids plus copies of every attention map.
pub struct ForwardOutput<T> {
    pub token_x: NodeId,
    pub token_y: NodeId,
    pub token_z: NodeId,
    pub z_a: NodeId,
    pub z_b: NodeId,
    pub p_a: NodeId,
    pub p_b: NodeId,
    pub s_w: NodeId,
    pub s_r: NodeId,
    pub attn_a: Vec<Tensor<T>>,
    pub attn_b: Vec<Tensor<T>>,
}

/// Builder for one sample's forward computation on a tape.
pub struct ModelForward<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub handles: &'a ModelHandles,
    pub cfg: &'a ModelConfig,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'a, T: Scalar> ModelForward<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        store: &'a ParamStore<T>,
        handles: &'a ModelHandles,
        cfg: &'a ModelConfig,
    ) -> Self {
        let param_nodes = vec![None; store.len()];
        Self { tape, store, handles, cfg, param_nodes }
    }

    fn param(&mut self, idx: usize) -> NodeId {
        if let Some(id) = self.param_nodes[idx] {
            return id;
        }
        let id = self.tape.param(idx, self.store.get(idx).value.clone());
        self.param_nodes[idx] = Some(id);
        id
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.tape.leaf(t)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.tape.value(id)
    }

    fn linear(&mut self, x: NodeId, wb: (usize, usize)) -> Result<NodeId, ModelError> {
        let w = self.param(wb.0);
        let b = self.param(wb.1);
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add_row_broadcast(y, b)?)
    }

    /// Region tokens plus a broadcast global feature for one line.
    pub fn cle_encode(&mut self, line: &Tensor<T>, handles: &CleHandles) -> Result<NodeId, ModelError> {
        if line.shape != [self.cfg.m, 3] {
            return Err(ModelError::BadInput { what: "cle line", got: line.numel(), want: self.cfg.m * 3 });
        }
        let pts = self.tape.leaf(line.clone());
        let emb = self.linear(pts, handles.point_embed)?;
        let region = self.cfg.points_per_region();
        let mut tokens = Vec::with_capacity(self.cfg.n);
        for i in 0..self.cfg.n {
            let chunk = self.tape.slice_rows(emb, i * region, region)?;
            let flat = self.tape.reshape(chunk, &[1, region * self.cfg.c])?;
            tokens.push(self.linear(flat, handles.region_proj[i])?);
        }
        let x_l = self.tape.concat_rows(&tokens)?;
        let flat_pts = self.tape.reshape(pts, &[1, 3 * self.cfg.m])?;
        let g0 = self.linear(flat_pts, handles.global0)?;
        let g0 = self.tape.gelu(g0)?;
        let x_g = self.linear(g0, handles.global1)?;
        let x_g_rep = self.tape.repeat_rows(x_g, self.cfg.n)?;
        Ok(self.tape.add(x_l, x_g_rep)?)
    }

    /// Convolutional section feature from the SDF grid: 1 x C.
    pub fn cse_encode(&mut self, grid: &Tensor<T>) -> Result<NodeId, ModelError> {
        if grid.shape != [1, self.cfg.h, self.cfg.w] {
            return Err(ModelError::BadInput {
                what: "cse grid",
                got: grid.numel(),
                want: self.cfg.h * self.cfg.w,
            });
        }
        let mut x = self.tape.leaf(grid.clone());
        for i in 0..4 {
            let (w, b) = self.handles.cse.conv[i];
            let w = self.param(w);
            let b = self.param(b);
            x = self.tape.conv2d(x, w, b, 2, 1)?;
            x = self.tape.gelu(x)?;
        }
        let pooled = self.tape.mean_hw(x)?;
        self.linear(pooled, self.handles.cse.proj)
    }

    /// Adds the repeated section feature onto the workpiece tokens.
    pub fn off_fuse(&mut self, x_w: NodeId, s_w: NodeId) -> Result<NodeId, ModelError> {
        let rep = self.tape.repeat_rows(s_w, self.cfg.n)?;
        Ok(self.tape.add(x_w, rep)?)
    }

    /// Six per-DoF embeddings, each projected into y adjacent tokens.
    pub fn mpe_encode(&mut self, motion: &[f64; 6]) -> Result<NodeId, ModelError> {
        let mut blocks = Vec::with_capacity(6);
        for d in 0..6 {
            let v = self.tape.leaf(Tensor::from_vec(&[1, 1], vec![T::from_f64(motion[d])]));
            let emb = self.linear(v, self.handles.mpe.embed[d])?;
            let proj = self.linear(emb, self.handles.mpe.proj[d])?;
            blocks.push(self.tape.reshape(proj, &[self.cfg.y, self.cfg.c])?);
        }
        Ok(self.tape.concat_rows(&blocks)?)
    }

    fn attention_layer(
        &mut self,
        q_input: NodeId,
        z: NodeId,
        layer: &DpLayerHandles,
    ) -> Result<(NodeId, Tensor<T>), ModelError> {
        let q = self.linear(q_input, layer.q)?;
        let k = self.linear(z, layer.k)?;
        let v = self.linear(z, layer.v)?;
        let kt = self.tape.transpose(k)?;
        let scores = self.tape.matmul(q, kt)?;
        let scaled = self.tape.scale(scores, 1.0 / (self.cfg.c as f64).sqrt())?;
        let attn = self.tape.softmax_rows(scaled)?;
        let attn_map = self.tape.value(attn).clone();
        let att_v = self.tape.matmul(attn, v)?;
        let res = self.tape.add(z, att_v)?;
        let ln1g = self.param(layer.ln1.0);
        let ln1b = self.param(layer.ln1.1);
        let z1 = self.tape.layernorm(res, ln1g, ln1b, self.cfg.eps)?;
        let f0 = self.linear(z1, layer.ffn0)?;
        let f0 = self.tape.gelu(f0)?;
        let f1 = self.linear(f0, layer.ffn1)?;
        let res2 = self.tape.add(z1, f1)?;
        let ln2g = self.param(layer.ln2.0);
        let ln2b = self.param(layer.ln2.1);
        let out = self.tape.layernorm(res2, ln2g, ln2b, self.cfg.eps)?;
        Ok((out, attn_map))
    }

    /// Loading stage: cross-attention from the fixed mold/motion query onto
    /// the evolving workpiece tokens.
    pub fn dp_loading(
        &mut self,
        x: NodeId,
        y: NodeId,
        z: NodeId,
    ) -> Result<(NodeId, Vec<Tensor<T>>), ModelError> {
        let pos_x = self.param(self.handles.pos_x);
        let pos_y = self.param(self.handles.pos_y);
        let pos_z = self.param(self.handles.pos_z);
        let x0 = self.tape.add(x, pos_x)?;
        let y0 = self.tape.add(y, pos_y)?;
        let mut z_cur = self.tape.add(z, pos_z)?;
        let q_input = self.tape.concat_cols(x0, y0)?;
        let mut maps = Vec::with_capacity(self.cfg.s_a);
        let layers = self.handles.dp_a.clone();
        for layer in &layers {
            let (z_next, map) = self.attention_layer(q_input, z_cur, layer)?;
            z_cur = z_next;
            maps.push(map);
        }
        Ok((z_cur, maps))
    }

    /// Unloading stage: self-attention over the loaded-state tokens.
    pub fn dp_unloading(&mut self, z_a: NodeId) -> Result<(NodeId, Vec<Tensor<T>>), ModelError> {
        let pos = self.param(self.handles.pos_za);
        let mut z_cur = self.tape.add(z_a, pos)?;
        let mut maps = Vec::with_capacity(self.cfg.s_b);
        let layers = self.handles.dp_b.clone();
        for layer in &layers {
            let (z_next, map) = self.attention_layer(z_cur, z_cur, layer)?;
            z_cur = z_next;
            maps.push(map);
        }
        Ok((z_cur, maps))
    }

    /// Decodes tokens back to an M x 3 point matrix.
    pub fn cld_decode(&mut self, tokens: NodeId, handles: &CldHandles) -> Result<NodeId, ModelError> {
        let region = self.cfg.points_per_region();
        let mut groups = Vec::with_capacity(self.cfg.n);
        for i in 0..self.cfg.n {
            let tok = self.tape.slice_rows(tokens, i, 1)?;
            let pts = self.linear(tok, handles.proj[i])?;
            groups.push(self.tape.reshape(pts, &[region, self.cfg.c])?);
        }
        let emb = self.tape.concat_rows(&groups)?;
        self.linear(emb, handles.deembed)
    }

    /// Reconstructs the SDF grid from the section feature.
    pub fn csd_decode(&mut self, s_w: NodeId) -> Result<NodeId, ModelError> {
        let fc = self.linear(s_w, self.handles.csd.fc)?;
        let mut x = self.tape.reshape(fc, &[64, self.cfg.h / 16, self.cfg.w / 16])?;
        for i in 0..4 {
            x = self.tape.upsample_nearest(x, 2)?;
            let (w, b) = self.handles.csd.conv[i];
            let w = self.param(w);
            let b = self.param(b);
            x = self.tape.conv2d(x, w, b, 1, 1)?;
            if i < 3 {
                x = self.tape.gelu(x)?;
            }
        }
        Ok(x)
    }

    /// Full composition for one sample.
    pub fn forward_full(
        &mut self,
        inputs: &SampleTensors<T>,
        detach: Detach,
    ) -> Result<ForwardOutput<T>, ModelError> {
        let x = self.cle_encode(&inputs.mold, &self.handles.cle_m.clone())?;
        let y = self.mpe_encode(&inputs.motion)?;
        let x_w = self.cle_encode(&inputs.workpiece, &self.handles.cle_w.clone())?;
        let s_w = self.cse_encode(&inputs.grid)?;
        let s_w_fused = if detach.off_fuse { self.tape.detach(s_w) } else { s_w };
        let z = self.off_fuse(x_w, s_w_fused)?;
        let (z_a, attn_a) = self.dp_loading(x, y, z)?;
        let p_a = self.cld_decode(z_a, &self.handles.cld_a.clone())?;
        let z_a_in = if detach.stage2 { self.tape.detach(z_a) } else { z_a };
        let (z_b, attn_b) = self.dp_unloading(z_a_in)?;
        let p_b = self.cld_decode(z_b, &self.handles.cld_b.clone())?;
        let s_r = self.csd_decode(s_w)?;
        Ok(ForwardOutput {
            token_x: x,
            token_y: y,
            token_z: z,
            z_a,
            z_b,
            p_a,
            p_b,
            s_w,
            s_r,
            attn_a,
            attn_b,
        })
    }

    /// Mean squared error between the reconstructed and true SDF grids.
    pub fn loss_r(&mut self, s_r: NodeId, target: &Tensor<T>) -> Result<NodeId, ModelError> {
        let t = self.tape.leaf(target.clone());
        let d = self.tape.sub(s_r, t)?;
        let sq = self.tape.mul_elem(d, d)?;
        Ok(self.tape.mean_all(sq)?)
    }

    /// Coordinate-weighted L2 loss: sum over axes of lambda_axis times the
    /// Euclidean norm of that axis' residual vector.
    pub fn loss_p(
        &mut self,
        pred: NodeId,
        target: &Tensor<T>,
        lambda: [f64; 3],
    ) -> Result<NodeId, ModelError> {
        let t = self.tape.leaf(target.clone());
        let d = self.tape.sub(pred, t)?;
        let mut total: Option<NodeId> = None;
        for (axis, &l) in lambda.iter().enumerate() {
            let col = self.tape.slice_cols(d, axis, 1)?;
            let sq = self.tape.mul_elem(col, col)?;
            let s = self.tape.sum_all(sq)?;
            let norm = self.tape.sqrt_elem(s)?;
            let term = self.tape.scale(norm, l)?;
            total = Some(match total {
                None => term,
                Some(acc) => self.tape.add(acc, term)?,
            });
        }
        Ok(total.expect("three axes"))
    }
}

/// Inference result in point space.
pub struct Prediction {
    pub loaded: Vec<Point3>,
    pub final_line: Vec<Point3>,
    pub recon_sdf: Vec<f64>,
    pub attn_a: Vec<Vec<f64>>,
    pub attn_b: Vec<Vec<f64>>,
}

fn tensor_to_points<T: Scalar>(t: &Tensor<T>) -> Vec<Point3> {
    t.data
        .chunks(3)
        .map(|p| Point3::new(p[0].to_f64(), p[1].to_f64(), p[2].to_f64()))
        .collect()
}

/// Runs the network on one sample without recording gradients semantics
/// beyond the tape itself (the tape is dropped on return).
pub fn predict<T: Scalar>(
    store: &ParamStore<T>,
    handles: &ModelHandles,
    cfg: &ModelConfig,
    inputs: &SampleTensors<T>,
) -> Result<Prediction, ModelError> {
    let mut tape = Tape::new();
    let mut fwd = ModelForward::new(&mut tape, store, handles, cfg);
    let out = fwd.forward_full(inputs, Detach::training())?;
    Ok(Prediction {
        loaded: tensor_to_points(tape.value(out.p_a)),
        final_line: tensor_to_points(tape.value(out.p_b)),
        recon_sdf: tape.value(out.s_r).data.iter().map(|v| v.to_f64()).collect(),
        attn_a: out.attn_a.iter().map(|m| m.data.iter().map(|v| v.to_f64()).collect()).collect(),
        attn_b: out.attn_b.iter().map(|m| m.data.iter().map(|v| v.to_f64()).collect()).collect(),
    })
}

// ---- checkpoint io ----------------------------------------------------------

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Writes config and parameters (sorted by name, f32 payload).
pub fn save_checkpoint<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    path: &Path,
) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    for v in [cfg.m, cfg.n, cfg.c, cfg.y, cfg.s_a, cfg.s_b, cfg.h, cfg.w, cfg.ffn_hidden] {
        push_u32(&mut buf, v as u32);
    }
    buf.extend_from_slice(&cfg.eps.to_le_bytes());
    for name in store.sorted_names() {
        let p = store.get(store.index(name).unwrap());
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, p.value.shape.len() as u32);
        for &d in &p.value.shape {
            push_u32(&mut buf, d as u32);
        }
        for &v in &p.value.data {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    std::fs::write(path, &buf)?;
    Ok(())
}

/// Reads a checkpoint, validating every parameter name and shape against the
/// stored config (and against `expected` when given).
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(ParamStore<f32>, ModelConfig), ModelError> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, sec: &'static str| -> Result<&[u8], ModelError> {
        if *pos + n > bytes.len() {
            return Err(ModelError::Truncated(sec));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic: [u8; 4] = take(&mut pos, 4, "magic")?.try_into().unwrap();
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::BadVersion(version));
    }
    let mut dims = [0usize; 9];
    for d in &mut dims {
        *d = u32::from_le_bytes(take(&mut pos, 4, "config")?.try_into().unwrap()) as usize;
    }
    let eps = f64::from_le_bytes(take(&mut pos, 8, "config")?.try_into().unwrap());
    let cfg = ModelConfig {
        m: dims[0],
        n: dims[1],
        c: dims[2],
        y: dims[3],
        s_a: dims[4],
        s_b: dims[5],
        h: dims[6],
        w: dims[7],
        ffn_hidden: dims[8],
        eps,
    };
    cfg.validate()?;
    if let Some(want) = expected {
        if cfg != *want {
            return Err(ModelError::ConfigMismatch { got: Box::new(cfg), want: Box::new(*want) });
        }
    }
    let mut expected_shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    walk_params(&cfg, &mut |name, shape, _| {
        expected_shapes.insert(name, shape);
    });
    let mut store: ParamStore<f32> = ParamStore::new();
    while pos < bytes.len() {
        let name_len = u32::from_le_bytes(take(&mut pos, 4, "param name")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len, "param name")?.to_vec())
            .map_err(|_| ModelError::Truncated("param name"))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4, "param dims")?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4, "param dims")?.try_into().unwrap()) as usize);
        }
        let want = expected_shapes
            .remove(&name)
            .ok_or_else(|| ModelError::UnexpectedParam(name.clone()))?;
        if want != shape {
            return Err(ModelError::ParamShape { name, got: shape, want });
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f32::from_le_bytes(take(&mut pos, 4, "param data")?.try_into().unwrap()));
        }
        store.add(name, Tensor::from_vec(&shape, data));
    }
    if let Some((name, _)) = expected_shapes.into_iter().next() {
        return Err(ModelError::MissingParam(name));
    }
    Ok((store, cfg))
}
