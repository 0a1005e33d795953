//! LD-Net, RE-Net and RD-Net, the geometric self-ensemble, and checkpoints.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use tapegrad::{Float, Graph, Spatial, Tensor, Var};

use crate::error::{io_err, Error, Result};
use crate::frame::Frame;

/// Division guard for the reflectance.
pub const R_EPS: f32 = 1e-4;
/// Upper bound of the illumination map.
pub const S_MAX: f32 = 2.0;
pub const CHECKPOINT_FORMAT: &str = "tempretinex-v1";

const KERNEL: usize = 3;
const LD_WIDTHS: [usize; 4] = [3, 48, 48, 3];
const RE_WIDTHS: [usize; 4] = [6, 48, 48, 3];
const RD_WIDTHS: [usize; 5] = [8, 96, 96, 96, 3];

/// Reflectance and illumination of one frame at one stage. Both are stored
/// with three channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RetinexPair {
    pub r: Frame,
    pub s: Frame,
}

impl RetinexPair {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            r: Frame::filled(height, width, 0.0),
            s: Frame::filled(height, width, 0.0),
        }
    }
}

/// The four invertible views averaged by the self-ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeoTransform {
    Identity,
    HFlip,
    VFlip,
    /// Quarter turn; an `H×W` input becomes `W×H`.
    Rot90,
}

impl GeoTransform {
    pub const ALL: [GeoTransform; 4] = [Self::Identity, Self::HFlip, Self::VFlip, Self::Rot90];

    fn forward_steps(self) -> &'static [Spatial] {
        match self {
            Self::Identity => &[],
            Self::HFlip => &[Spatial::FlipW],
            Self::VFlip => &[Spatial::FlipH],
            Self::Rot90 => &[Spatial::FlipW, Spatial::Transpose],
        }
    }

    fn inverse_steps(self) -> &'static [Spatial] {
        match self {
            Self::Rot90 => &[Spatial::Transpose, Spatial::FlipW],
            other => other.forward_steps(),
        }
    }

    pub fn apply_var<T: Float>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.forward_steps().iter().try_fold(x, |v, &s| Ok(g.spatial(v, s)?))
    }

    pub fn invert_var<T: Float>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.inverse_steps().iter().try_fold(x, |v, &s| Ok(g.spatial(v, s)?))
    }

    pub fn apply(self, img: &Frame) -> Result<Frame> {
        spatial_frame(img, self.forward_steps())
    }

    pub fn invert(self, img: &Frame) -> Result<Frame> {
        spatial_frame(img, self.inverse_steps())
    }
}

fn spatial_frame(img: &Frame, steps: &[Spatial]) -> Result<Frame> {
    let mut t = img.to_tensor::<f32>();
    for &s in steps {
        t = t.spatial(s)?;
    }
    Frame::from_tensor(&t)
}

/// Mean over the four views of `t⁻¹(apply(t(img)))`.
pub fn self_ensemble(apply: impl Fn(&Frame) -> Result<Frame>, img: &Frame) -> Result<Frame> {
    let mut acc = vec![0.0f32; img.data().len()];
    for t in GeoTransform::ALL {
        let view = t.apply(img)?;
        let out = apply(&view)?;
        if out.dims() != view.dims() {
            return Err(Error::Shape(format!(
                "self-ensemble branch returned {:?} for a {:?} input",
                out.dims(),
                view.dims()
            )));
        }
        for (a, &b) in acc.iter_mut().zip(t.invert(&out)?.data()) {
            *a += b;
        }
    }
    let (h, w) = img.dims();
    Frame::new(h, w, acc.into_iter().map(|v| v * 0.25).collect())
}

/// Graph counterpart of [`self_ensemble`].
pub fn self_ensemble_var<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    mut apply: impl FnMut(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let mut branches = Vec::with_capacity(4);
    for t in GeoTransform::ALL {
        let view = t.apply_var(g, x)?;
        let out = apply(g, view)?;
        branches.push(t.invert_var(g, out)?);
    }
    let sum = g.add_all(&branches)?;
    Ok(g.mul_scalar(sum, T::from_f64_lossy(0.25)))
}

/// How the last layer of every network starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalInit {
    /// All-zero weights and bias: every net starts as the identity.
    Zero,
    /// Small random weights; used to exercise non-trivial outputs.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[out, in, 3, 3]`
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

/// 3×3 convolutions with ReLU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<ConvLayer>,
}

impl ConvStack {
    fn new(widths: &[usize], rng: &mut ChaCha8Rng, final_init: FinalInit) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (ci, co) = (widths[i], widths[i + 1]);
                let fan_in = (ci * KERNEL * KERNEL) as f32;
                let std = (2.0 / fan_in).sqrt();
                let shape = [co, ci, KERNEL, KERNEL];
                let numel = co * ci * KERNEL * KERNEL;
                let last = i + 1 == n;
                let weight = match (last, final_init) {
                    (true, FinalInit::Zero) => Tensor::zeros(&shape),
                    (true, FinalInit::Random) => random_tensor(&shape, numel, 0.1 * std, rng),
                    (false, _) => random_tensor(&shape, numel, std, rng),
                };
                ConvLayer {
                    weight,
                    bias: Tensor::zeros(&[co]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    fn bind<T: Float>(&self, g: &mut Graph<T>, trainable: bool) -> BoundStack {
        let mut leaf = |t: &Tensor<f32>| {
            let t = t.cast::<T>();
            if trainable {
                g.param(t)
            } else {
                g.constant(t)
            }
        };
        BoundStack {
            layers: self.layers.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect(),
        }
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

fn random_tensor(shape: &[usize], numel: usize, std: f32, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape, (0..numel).map(|_| normal.sample(rng)).collect()).expect("numel matches shape")
}

/// Graph leaves of one [`ConvStack`].
#[derive(Clone, Debug)]
pub struct BoundStack {
    pub layers: Vec<(Var, Var)>,
}

impl BoundStack {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.conv2d(h, w, b)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// The three subnetworks of the enhancement module.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    /// Predicts additive noise of the raw frame.
    pub ld: ConvStack,
    /// Residual reflectance update from `[R_0 ‖ warped R]`.
    pub re: ConvStack,
    /// Predicts sensor noise of the reflectance from
    /// `[R_RE ‖ mean S_RE ‖ warped R ‖ mean warped S]`.
    pub rd: ConvStack,
}

/// Graph leaves of all three networks.
#[derive(Clone, Debug)]
pub struct BoundNetworks {
    pub ld: BoundStack,
    pub re: BoundStack,
    pub rd: BoundStack,
}

impl BoundNetworks {
    /// Every leaf in the same order as [`Networks::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        self.ld.vars().chain(self.re.vars()).chain(self.rd.vars()).collect()
    }
}

impl Networks {
    pub fn new(seed: u64) -> Self {
        Self::with_final_init(seed, FinalInit::Zero)
    }

    pub fn with_final_init(seed: u64, final_init: FinalInit) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            ld: ConvStack::new(&LD_WIDTHS, &mut rng, final_init),
            re: ConvStack::new(&RE_WIDTHS, &mut rng, final_init),
            rd: ConvStack::new(&RD_WIDTHS, &mut rng, final_init),
        }
    }

    pub fn param_count(&self) -> usize {
        self.ld.param_count() + self.re.param_count() + self.rd.param_count()
    }

    pub fn bind<T: Float>(&self, g: &mut Graph<T>, trainable: bool) -> BoundNetworks {
        BoundNetworks {
            ld: self.ld.bind(g, trainable),
            re: self.re.bind(g, trainable),
            rd: self.rd.bind(g, trainable),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.ld
            .tensors_mut()
            .chain(self.re.tensors_mut())
            .chain(self.rd.tensors_mut())
            .collect()
    }

    /// `(name, tensor)` pairs in a stable order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (net, stack) in [("ld", &self.ld), ("re", &self.re), ("rd", &self.rd)] {
            for (i, l) in stack.layers.iter().enumerate() {
                out.push((format!("{net}.{i}.weight"), &l.weight));
                out.push((format!("{net}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.named_tensors() {
            if !t.all_finite() {
                return Err(Error::Numerical(format!("weights {name}")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named_tensors();
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = named
            .iter()
            .map(|(n, t)| {
                let b = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (n.clone(), b, t.shape().to_vec())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(n, b, s)| {
                let view = TensorView::new(Dtype::F32, s.clone(), b)
                    .map_err(|e| Error::Checkpoint(format!("{n}: {e}")))?;
                Ok((n.clone(), view))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([("format".to_string(), CHECKPOINT_FORMAT.to_string())]);
        let data = safetensors::serialize(views, Some(meta))
            .map_err(|e| Error::Checkpoint(format!("serializing: {e}")))?;
        std::fs::write(path, data).map_err(io_err(format!("writing {}", path.display())))
    }

    /// Loads weights written by [`Networks::save`]. Any difference in format
    /// tag, tensor names or shapes is a checkpoint error.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let tag = meta.metadata().as_ref().and_then(|m| m.get("format")).cloned();
        if tag.as_deref() != Some(CHECKPOINT_FORMAT) {
            return Err(bad(format!("format tag {tag:?}, expected {CHECKPOINT_FORMAT:?}")));
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut nets = Networks::new(0);
        let expected: Vec<(String, Vec<usize>)> = nets
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if st.names().len() != expected.len() {
            return Err(bad(format!("{} tensors, expected {}", st.names().len(), expected.len())));
        }
        for ((name, shape), slot) in expected.into_iter().zip(nets.tensors_mut()) {
            let view = st.tensor(&name).map_err(|e| bad(format!("{name}: {e}")))?;
            if view.dtype() != Dtype::F32 || view.shape() != shape.as_slice() {
                return Err(bad(format!(
                    "{name}: {:?} {:?}, expected F32 {shape:?}",
                    view.dtype(),
                    view.shape()
                )));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            *slot = Tensor::new(&shape, data)?;
        }
        nets.check_finite()?;
        Ok(nets)
    }
}

fn finite<T: Float>(g: &Graph<T>, v: Var, stage: &str) -> Result<Var> {
    if !g.value(v).all_finite() {
        return Err(Error::Numerical(stage.to_string()));
    }
    Ok(v)
}

/// LD-Net on a graph node: returns `(noise, i_ld)`.
pub fn ld_graph<T: Float>(g: &mut Graph<T>, nets: &BoundNetworks, img: Var) -> Result<(Var, Var)> {
    let noise = nets.ld.forward(g, img)?;
    let noise = finite(g, noise, "ld-net output")?;
    let diff = g.sub(img, noise)?;
    Ok((noise, g.clamp(diff, T::zero(), T::one())))
}

/// RE-Net: `R_RE = clamp(r0 + G([r0 ‖ warped R]), eps, 1)`, `S_RE = i_ld / R_RE`.
pub fn re_graph<T: Float>(
    g: &mut Graph<T>,
    nets: &BoundNetworks,
    r0: Var,
    i_ld: Var,
    warped_r: Var,
) -> Result<(Var, Var)> {
    let input = g.concat(&[r0, warped_r])?;
    let update = nets.re.forward(g, input)?;
    let update = finite(g, update, "re-net output")?;
    let r = g.add(r0, update)?;
    let r_re = g.clamp(r, T::from_f64_lossy(R_EPS as f64), T::one());
    let s_re = illumination(g, i_ld, r_re)?;
    Ok((r_re, s_re))
}

/// `clamp(i_ld / clamp(r, eps, 1), 0, S_MAX)`.
pub fn illumination<T: Float>(g: &mut Graph<T>, i_ld: Var, r: Var) -> Result<Var> {
    let safe = g.clamp(r, T::from_f64_lossy(R_EPS as f64), T::one());
    let s = g.div(i_ld, safe)?;
    Ok(g.clamp(s, T::zero(), T::from_f64_lossy(S_MAX as f64)))
}

/// RD-Net conditioning: `[mean S ‖ warped R ‖ mean warped S]` (5 channels).
pub fn rd_condition<T: Float>(g: &mut Graph<T>, s_re: Var, warped_r: Var, warped_s: Var) -> Result<Var> {
    let s = g.mean_channels(s_re)?;
    let ws = g.mean_channels(warped_s)?;
    Ok(g.concat(&[s, warped_r, ws])?)
}

/// Predicted sensor noise of reflectance `r` given its conditioning,
/// optionally averaged over the four geometric views.
pub fn rd_noise<T: Float>(
    g: &mut Graph<T>,
    nets: &BoundNetworks,
    r: Var,
    cond: Var,
    ensemble: bool,
) -> Result<Var> {
    let input = g.concat(&[r, cond])?;
    let noise = if ensemble {
        self_ensemble_var(g, input, |g, x| nets.rd.forward(g, x))?
    } else {
        nets.rd.forward(g, input)?
    };
    finite(g, noise, "rd-net output")
}

/// RD stage from a precomputed noise map: returns `(R_RD, S_RD)`.
pub fn rd_apply<T: Float>(g: &mut Graph<T>, r_re: Var, noise: Var, i_ld: Var) -> Result<(Var, Var)> {
    let diff = g.sub(r_re, noise)?;
    let r_rd = g.clamp(diff, T::zero(), T::one());
    let s_rd = illumination(g, i_ld, r_rd)?;
    Ok((r_rd, s_rd))
}

fn eval_frames<const N: usize>(
    nets: &Networks,
    build: impl FnOnce(&mut Graph<f32>, &BoundNetworks) -> Result<[Var; N]>,
) -> Result<[Frame; N]> {
    nets.check_finite()?;
    let mut g = Graph::new();
    let bound = nets.bind(&mut g, false);
    let vars = build(&mut g, &bound)?;
    let frames = vars
        .iter()
        .map(|&v| Frame::from_tensor(g.value(v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(frames.try_into().expect("one frame per var"))
}

/// Returns `(noise_pred, i_ld)`.
pub fn ld_forward(nets: &Networks, img: &Frame) -> Result<(Frame, Frame)> {
    let [noise, i_ld] = eval_frames(nets, |g, b| {
        let x = g.constant(img.to_tensor());
        let (n, i) = ld_graph(g, b, x)?;
        Ok([n, i])
    })?;
    Ok((noise, i_ld))
}

pub fn re_forward(nets: &Networks, r0: &Frame, i_ld: &Frame, warped_prev_r: &Frame) -> Result<RetinexPair> {
    r0.expect_same_dims(i_ld)?;
    r0.expect_same_dims(warped_prev_r)?;
    let [r, s] = eval_frames(nets, |g, b| {
        let r0 = g.constant(r0.to_tensor());
        let i = g.constant(i_ld.to_tensor());
        let w = g.constant(warped_prev_r.to_tensor());
        let (r, s) = re_graph(g, b, r0, i, w)?;
        Ok([r, s])
    })?;
    Ok(RetinexPair { r, s })
}

pub fn rd_forward(
    nets: &Networks,
    pair: &RetinexPair,
    warped_prev: &RetinexPair,
    i_ld: &Frame,
    ensemble: bool,
) -> Result<RetinexPair> {
    for f in [&pair.s, &warped_prev.r, &warped_prev.s, i_ld] {
        pair.r.expect_same_dims(f)?;
    }
    let [r, s] = eval_frames(nets, |g, b| {
        let c = |g: &mut Graph<f32>, f: &Frame| g.constant(f.to_tensor());
        let (r_re, s_re) = (c(g, &pair.r), c(g, &pair.s));
        let (wr, ws, i) = (c(g, &warped_prev.r), c(g, &warped_prev.s), c(g, i_ld));
        let cond = rd_condition(g, s_re, wr, ws)?;
        let noise = rd_noise(g, b, r_re, cond, ensemble)?;
        let (r, s) = rd_apply(g, r_re, noise, i)?;
        Ok([r, s])
    })?;
    Ok(RetinexPair { r, s })
}
