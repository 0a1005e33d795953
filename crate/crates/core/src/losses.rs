//! The twelve non-reference loss terms and their unit-weight sum.
//!
//! Every term is a graph function so the total can be differentiated with
//! respect to all three networks. Squared norms are reduced with a per-pixel
//! mean.

use serde::{Deserialize, Serialize};
use tapegrad::{FilterKernel, Float, Graph, Pad, Var};

use crate::error::{Error, Result};
use crate::frame::LUMA;
use crate::preprocessing::{sub_image, SubImage};

/// Which image a noise predictor is being applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// The full-resolution image itself.
    Full,
    /// One of its paired half-resolution sub-images.
    Sub(SubImage),
}

/// A noise predictor `F`. The branch tells the caller which conditioning
/// (if any) matches the image it receives.
pub type NoiseFn<'a, T> = dyn FnMut(&mut Graph<T>, Var, Branch) -> Result<Var> + 'a;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConfig {
    pub window: usize,
    pub sigma: f64,
}

impl Default for SmoothnessConfig {
    fn default() -> Self {
        Self { window: 5, sigma: 1.5 }
    }
}

impl SmoothnessConfig {
    /// Normalized Gaussian weights over the window, row-major.
    pub fn weights(&self) -> Vec<f64> {
        let r = (self.window / 2) as isize;
        let raw: Vec<f64> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .map(|(dy, dx)| (-((dy * dy + dx * dx) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }
}

fn c<T: Float>(x: f64) -> T {
    T::from_f64_lossy(x)
}

fn mse<T: Float>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.sqr(d);
    Ok(g.mean(sq))
}

struct SubPair {
    g: [Var; 2],
    noise: [Var; 2],
}

const SUBS: [SubImage; 2] = [SubImage::First, SubImage::Second];

fn sub_pair<T: Float>(g: &mut Graph<T>, img: Var, f: &mut NoiseFn<'_, T>) -> Result<SubPair> {
    let g1 = sub_image(g, img, SubImage::First)?;
    let g2 = sub_image(g, img, SubImage::Second)?;
    let n1 = f(g, g1, Branch::Sub(SubImage::First))?;
    let n2 = f(g, g2, Branch::Sub(SubImage::Second))?;
    Ok(SubPair {
        g: [g1, g2],
        noise: [n1, n2],
    })
}

fn res_from<T: Float>(g: &mut Graph<T>, p: &SubPair) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    for k in 0..2 {
        let den = g.sub(p.g[k], p.noise[k])?;
        terms.push(mse(g, den, p.g[1 - k])?);
    }
    Ok(g.add_all(&terms)?)
}

fn cons_from<T: Float>(g: &mut Graph<T>, img: Var, p: &SubPair, f: &mut NoiseFn<'_, T>) -> Result<Var> {
    let full = f(g, img, Branch::Full)?;
    let denoised = g.sub(img, full)?;
    let mut terms = Vec::with_capacity(2);
    for (k, which) in SUBS.into_iter().enumerate() {
        let den = g.sub(p.g[k], p.noise[k])?;
        let target = sub_image(g, denoised, which)?;
        terms.push(mse(g, den, target)?);
    }
    Ok(g.add_all(&terms)?)
}

/// Residual loss: each denoised sub-image should predict the other one.
pub fn l_res<T: Float>(g: &mut Graph<T>, img: Var, f: &mut NoiseFn<'_, T>) -> Result<Var> {
    let p = sub_pair(g, img, f)?;
    res_from(g, &p)
}

/// Consistency loss: denoising then sub-sampling should agree with
/// sub-sampling then denoising.
pub fn l_cons<T: Float>(g: &mut Graph<T>, img: Var, f: &mut NoiseFn<'_, T>) -> Result<Var> {
    let p = sub_pair(g, img, f)?;
    cons_from(g, img, &p, f)
}

/// `(l_res, l_cons)` sharing the sub-image predictions.
pub fn l_res_cons<T: Float>(g: &mut Graph<T>, img: Var, f: &mut NoiseFn<'_, T>) -> Result<(Var, Var)> {
    let p = sub_pair(g, img, f)?;
    let res = res_from(g, &p)?;
    let cons = cons_from(g, img, &p, f)?;
    Ok((res, cons))
}

/// Mean BT.601 luminance of a `[3,H,W]` value.
pub fn mean_luminance<T: Float>(g: &Graph<T>, x: Var) -> Result<f64> {
    let t = g.value(x);
    let (ch, h, w) = t.chw()?;
    if ch != 3 {
        return Err(Error::Shape(format!("luminance needs 3 channels, got {ch}")));
    }
    let n = h * w;
    let mean = |c: usize| t.data()[c * n..(c + 1) * n].iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n as f64;
    Ok((0..3).map(|c| LUMA[c] as f64 * mean(c)).sum())
}

pub const ALPHA_RANGE: (f64, f64) = (1.0, 25.0);

/// Global exposure factor `y_high / mean luminance`, clamped.
pub fn exposure_alpha(mean_lum: f64, y_high: f64) -> f64 {
    let a = y_high / mean_lum;
    if a.is_nan() {
        ALPHA_RANGE.1
    } else {
        a.clamp(ALPHA_RANGE.0, ALPHA_RANGE.1)
    }
}

/// Pulls the reflectance towards `alpha · i_ld`. Returns the loss and the
/// alpha used (treated as a constant).
pub fn l_glob<T: Float>(g: &mut Graph<T>, r_re: Var, i_ld: Var, y_high: f64) -> Result<(Var, f64)> {
    let alpha = exposure_alpha(mean_luminance(g, i_ld)?, y_high);
    Ok((l_glob_alpha(g, r_re, i_ld, alpha)?, alpha))
}

/// [`l_glob`] with a given exposure factor.
pub fn l_glob_alpha<T: Float>(g: &mut Graph<T>, r_re: Var, i_ld: Var, alpha: f64) -> Result<Var> {
    let target = g.mul_scalar(i_ld, c(alpha));
    mse(g, r_re, target)
}

/// `lambda = alpha⁻¹ · 0.7^(−alpha)`.
pub fn pix_lambda(alpha: f64) -> f64 {
    alpha.recip() * 0.7f64.powf(-alpha)
}

/// Pulls the illumination towards `lambda · (alpha · i_ld)^alpha`.
pub fn l_pix<T: Float>(g: &mut Graph<T>, s_re: Var, i_ld: Var, alpha: f64) -> Result<Var> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    let pos = g.clamp(i_ld, T::zero(), T::infinity());
    let scaled = g.mul_scalar(pos, c(alpha));
    let powed = g.powf(scaled, c(alpha));
    let target = g.mul_scalar(powed, c(pix_lambda(alpha)));
    mse(g, s_re, target)
}

/// Forward differences along the width and height; the last column/row is 0.
fn forward_gradients<T: Float>(g: &mut Graph<T>, s: Var) -> Result<(Var, Var)> {
    let (ch, h, w) = g.value(s).chw()?;
    let _ = ch;
    let dx = if w > 1 {
        let right = g.crop(s, 0, 1, h, w - 1)?;
        let left = g.crop(s, 0, 0, h, w - 1)?;
        let d = g.sub(right, left)?;
        g.pad_zero(d, Pad { top: 0, bottom: 0, left: 0, right: 1 })?
    } else {
        g.mul_scalar(s, T::zero())
    };
    let dy = if h > 1 {
        let down = g.crop(s, 1, 0, h - 1, w)?;
        let up = g.crop(s, 0, 0, h - 1, w)?;
        let d = g.sub(down, up)?;
        g.pad_zero(d, Pad { top: 0, bottom: 1, left: 0, right: 0 })?
    } else {
        g.mul_scalar(s, T::zero())
    };
    Ok((dx, dy))
}

/// Per-pixel `(|∂x S| + |∂y S|)²`.
pub fn smooth_gradient_term<T: Float>(g: &mut Graph<T>, s: Var) -> Result<Var> {
    let (dx, dy) = forward_gradients(g, s)?;
    let (ax, ay) = (g.abs(dx), g.abs(dy));
    let tv = g.add(ax, ay)?;
    Ok(g.sqr(tv))
}

/// Per-pixel `Σ_j w_ij |S_i − S_j|` over the window (edges replicated).
pub fn smooth_neighbor_term<T: Float>(g: &mut Graph<T>, s: Var, cfg: &SmoothnessConfig) -> Result<Var> {
    let (_, h, w) = g.value(s).chw()?;
    let r = cfg.window / 2;
    let padded = g.pad_replicate(s, Pad::uniform(r))?;
    let weights = cfg.weights();
    let mut terms = Vec::with_capacity(weights.len());
    for (i, &wt) in weights.iter().enumerate() {
        let (oy, ox) = (i / cfg.window, i % cfg.window);
        if oy == r && ox == r {
            continue;
        }
        let shifted = g.crop(padded, oy, ox, h, w)?;
        let d = g.sub(s, shifted)?;
        let a = g.abs(d);
        terms.push(g.mul_scalar(a, c(wt)));
    }
    Ok(g.add_all(&terms)?)
}

/// Illumination smoothness.
pub fn l_smooth<T: Float>(g: &mut Graph<T>, s_re: Var, cfg: &SmoothnessConfig) -> Result<Var> {
    let t1 = smooth_gradient_term(g, s_re)?;
    let t1 = g.mean(t1);
    let t2 = smooth_neighbor_term(g, s_re, cfg)?;
    let t2 = g.mean(t2);
    Ok(g.add(t1, t2)?)
}

/// Illumination stability across the denoising stage.
pub fn l_ill<T: Float>(g: &mut Graph<T>, s_rd: Var, s_re: Var) -> Result<Var> {
    mse(g, s_rd, s_re)
}

/// 1-D bicubic (a = −0.75) taps for an exact 2× reduction.
pub const BICUBIC_HALF: [f64; 4] = [-0.09375, 0.59375, 0.59375, -0.09375];

/// Bicubic 2× downsampling with replicated borders.
pub fn bicubic_half<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let weights = BICUBIC_HALF
        .iter()
        .flat_map(|&a| BICUBIC_HALF.iter().map(move |&b| c(a * b)))
        .collect();
    let padded = g.pad_replicate(x, Pad::uniform(1))?;
    Ok(g.filter(
        padded,
        FilterKernel {
            kh: 4,
            kw: 4,
            stride: 2,
            weights,
        },
    )?)
}

/// Number of pyramid levels that fit an `h×w` image.
pub fn fitting_levels(levels: usize, h: usize, w: usize) -> usize {
    let fit = (usize::BITS - h.min(w).max(1).leading_zeros()) as usize;
    levels.min(fit).max(1)
}

/// Masked multi-scale L1 between the current and the warped previous
/// reflectance. `mask` is a `[1,H,W]` constant.
pub fn l_mtc<T: Float>(g: &mut Graph<T>, r_rd: Var, r_warped: Var, mask: Var, levels: usize) -> Result<Var> {
    if levels == 0 {
        return Err(Error::Config("l_mtc needs at least one level".into()));
    }
    let (ch, h, w) = g.value(r_rd).chw()?;
    let diff = g.sub(r_rd, r_warped)?;
    let m = g.broadcast_channels(mask, ch)?;
    let mut d = g.mul(m, diff)?;
    let mut terms = Vec::new();
    for level in 0..fitting_levels(levels, h, w) {
        if level > 0 {
            d = bicubic_half(g, d)?;
        }
        let a = g.abs(d);
        terms.push(g.mean(a));
    }
    Ok(g.add_all(&terms)?)
}

/// Squared differences of per-channel means.
pub fn l_color<T: Float>(g: &mut Graph<T>, r_rd: Var, r_re: Var) -> Result<Var> {
    let (ch, _, _) = g.value(r_rd).chw()?;
    let mut terms = Vec::with_capacity(ch);
    for k in 0..ch {
        let a = g.narrow(r_rd, k, 1)?;
        let b = g.narrow(r_re, k, 1)?;
        let (ma, mb) = (g.mean(a), g.mean(b));
        let d = g.sub(ma, mb)?;
        terms.push(g.sqr(d));
    }
    Ok(g.add_all(&terms)?)
}

pub const VAR_WINDOW: usize = 7;

/// Per-channel variance over every full 7×7 window.
pub fn local_variance<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let n = VAR_WINDOW * VAR_WINDOW;
    let kernel = FilterKernel {
        kh: VAR_WINDOW,
        kw: VAR_WINDOW,
        stride: 1,
        weights: vec![c(1.0 / n as f64); n],
    };
    let sq = g.sqr(x);
    let ex2 = g.filter(sq, kernel.clone())?;
    let ex = g.filter(x, kernel)?;
    let ex_sq = g.sqr(ex);
    Ok(g.sub(ex2, ex_sq)?)
}

/// Texture preservation through the denoising stage.
pub fn l_var<T: Float>(g: &mut Graph<T>, r_rd: Var, r_re: Var) -> Result<Var> {
    let a = local_variance(g, r_rd)?;
    let b = local_variance(g, r_re)?;
    let d = g.sub(a, b)?;
    let abs = g.abs(d);
    Ok(g.mean(abs))
}

/// Reconstruction coupling `mean((r_rd ∘ s_rd − i_ld)²)`.
pub fn l_inter<T: Float>(g: &mut Graph<T>, r_rd: Var, s_rd: Var, i_ld: Var) -> Result<Var> {
    let prod = g.mul(r_rd, s_rd)?;
    mse(g, prod, i_ld)
}

/// Scalar value of every term of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub res1: f64,
    pub cons1: f64,
    pub glob: f64,
    pub pix: f64,
    pub smooth: f64,
    pub res2: f64,
    pub cons2: f64,
    pub ill: f64,
    pub inter: f64,
    pub var: f64,
    pub color: f64,
    pub mtc: f64,
    pub total: f64,
}

pub const TERM_NAMES: [&str; 12] = [
    "res1", "cons1", "glob", "pix", "smooth", "res2", "cons2", "ill", "inter", "var", "color", "mtc",
];

impl LossReport {
    pub fn terms(&self) -> [f64; 12] {
        [
            self.res1, self.cons1, self.glob, self.pix, self.smooth, self.res2, self.cons2, self.ill,
            self.inter, self.var, self.color, self.mtc,
        ]
    }

    pub fn from_terms(t: [f64; 12]) -> Self {
        let [res1, cons1, glob, pix, smooth, res2, cons2, ill, inter, var, color, mtc] = t;
        Self {
            res1,
            cons1,
            glob,
            pix,
            smooth,
            res2,
            cons2,
            ill,
            inter,
            var,
            color,
            mtc,
            total: t.iter().sum(),
        }
    }

    pub fn csv_header() -> String {
        format!("step,{},total", TERM_NAMES.join(","))
    }

    pub fn csv_row(&self, step: usize) -> String {
        let vals: Vec<String> = self.terms().iter().chain([&self.total]).map(|v| v.to_string()).collect();
        format!("{step},{}", vals.join(","))
    }
}

/// Graph nodes of one forward pass that the losses read.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs {
    /// Raw input frame.
    pub input: Var,
    pub i_ld: Var,
    pub r_re: Var,
    pub s_re: Var,
    /// `r_re` and `s_re` as inputs of the denoising stage. Pass the same
    /// nodes as `r_re`/`s_re` for a fully coupled objective, or detached
    /// copies to keep the denoising terms from training RE-Net.
    pub rd_r_re: Var,
    pub rd_s_re: Var,
    pub r_rd: Var,
    pub s_rd: Var,
    /// Warped previous reflectance and `[1,H,W]` occlusion mask; `None`
    /// skips the temporal term.
    pub temporal: Option<(Var, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossParams {
    pub y_high: f64,
    pub mtc_levels: usize,
    pub smooth: SmoothnessConfig,
    /// Overrides the exposure factor otherwise derived from `i_ld`.
    pub alpha: Option<f64>,
}

/// All twelve terms and their sum as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub terms: [Var; 12],
    pub total: Var,
}

impl LossTerms {
    /// Reads the values, failing on the first non-finite term.
    pub fn report<T: Float>(&self, g: &Graph<T>) -> Result<LossReport> {
        let mut vals = [0.0; 12];
        for (i, &v) in self.terms.iter().enumerate() {
            let x = g.scalar(v)?.to_f64_lossy();
            if !x.is_finite() {
                return Err(Error::Numerical(format!("loss term {}", TERM_NAMES[i])));
            }
            vals[i] = x;
        }
        Ok(LossReport::from_terms(vals))
    }
}

pub fn total_loss<T: Float>(
    g: &mut Graph<T>,
    x: &LossInputs,
    ld_noise: &mut NoiseFn<'_, T>,
    rd_noise: &mut NoiseFn<'_, T>,
    params: &LossParams,
) -> Result<LossTerms> {
    let (res1, cons1) = l_res_cons(g, x.input, ld_noise)?;
    let (glob, alpha) = match params.alpha {
        Some(alpha) => (l_glob_alpha(g, x.r_re, x.i_ld, alpha)?, alpha),
        None => l_glob(g, x.r_re, x.i_ld, params.y_high)?,
    };
    let pix = l_pix(g, x.s_re, x.i_ld, alpha)?;
    let smooth = l_smooth(g, x.s_re, &params.smooth)?;
    let (res2, cons2) = l_res_cons(g, x.rd_r_re, rd_noise)?;
    let ill = l_ill(g, x.s_rd, x.rd_s_re)?;
    let inter = l_inter(g, x.r_rd, x.s_rd, x.i_ld)?;
    let var = l_var(g, x.r_rd, x.rd_r_re)?;
    let color = l_color(g, x.r_rd, x.rd_r_re)?;
    let mtc = match x.temporal {
        Some((warped, mask)) => l_mtc(g, x.r_rd, warped, mask, params.mtc_levels)?,
        None => g.constant(tapegrad::Tensor::scalar(T::zero())),
    };
    let terms = [res1, cons1, glob, pix, smooth, res2, cons2, ill, inter, var, color, mtc];
    let total = g.add_all(&terms)?;
    Ok(LossTerms { terms, total })
}
