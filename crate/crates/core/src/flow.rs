//! Optical flow estimation, bilinear warping and the occlusion mask.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::data_io::{save_frame, SaveFormat};
use crate::error::{io_err, Error, Result};
use crate::frame::{Frame, Plane};
use crate::networks::RetinexPair;
use crate::pipeline::TemporalState;
use crate::preprocessing::histogram_match;

/// Dense displacement field. `output(p)` samples the source at `p + (u, v)`,
/// with `u` along the width and `v` along the height.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        Self {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    pub fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::Shape(format!(
                "flow components of length {}/{} for {height}x{width}",
                u.len(),
                v.len()
            )));
        }
        let f = Self { height, width, u, v };
        f.check_sane()?;
        Ok(f)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// Largest absolute component.
    pub fn max_abs(&self) -> f32 {
        self.u.iter().chain(&self.v).fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Finite and no longer than the frame.
    pub fn check_sane(&self) -> Result<()> {
        let bound = self.height.max(self.width) as f32;
        if self.u.iter().chain(&self.v).any(|x| !x.is_finite() || x.abs() > bound) {
            return Err(Error::Numerical("flow field".into()));
        }
        Ok(())
    }

    /// Bilinear resample to `height×width`, rescaling vectors to the new
    /// pixel units.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        let up = Plane {
            height: self.height,
            width: self.width,
            data: self.u.clone(),
        };
        let vp = Plane {
            height: self.height,
            width: self.width,
            data: self.v.clone(),
        };
        let mut u = Vec::with_capacity(height * width);
        let mut v = Vec::with_capacity(height * width);
        for y in 0..height {
            let cy = (y as f32 + 0.5) * sy - 0.5;
            for x in 0..width {
                let cx = (x as f32 + 0.5) * sx - 0.5;
                u.push(bilinear(&up.data, self.height, self.width, cy, cx) / sx);
                v.push(bilinear(&vp.data, self.height, self.width, cy, cx) / sy);
            }
        }
        Self { height, width, u, v }
    }

    /// Writes the Middlebury `.flo` format.
    pub fn write_flo(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 8 * self.u.len());
        buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        buf.extend_from_slice(&(self.width as i32).to_le_bytes());
        buf.extend_from_slice(&(self.height as i32).to_le_bytes());
        for (u, v) in self.u.iter().zip(&self.v) {
            buf.extend_from_slice(&u.to_le_bytes());
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(io_err(format!("writing {}", path.display())))
    }

    pub fn read_flo(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(format!("reading {}", path.display())))?;
        let bad = |m: &str| Error::EstimatorUnavailable(format!("{}: {m}", path.display()));
        let word = |i: usize| -> Option<[u8; 4]> { bytes.get(4 * i..4 * i + 4)?.try_into().ok() };
        let magic = f32::from_le_bytes(word(0).ok_or_else(|| bad("truncated header"))?);
        if magic != FLO_MAGIC {
            return Err(bad("not a .flo file"));
        }
        let width = i32::from_le_bytes(word(1).ok_or_else(|| bad("truncated header"))?);
        let height = i32::from_le_bytes(word(2).ok_or_else(|| bad("truncated header"))?);
        if width <= 0 || height <= 0 {
            return Err(bad("non-positive size"));
        }
        let (width, height) = (width as usize, height as usize);
        if bytes.len() != 12 + 8 * width * height {
            return Err(bad("payload size does not match header"));
        }
        let mut u = Vec::with_capacity(width * height);
        let mut v = Vec::with_capacity(width * height);
        for i in 0..width * height {
            u.push(f32::from_le_bytes(word(3 + 2 * i).unwrap()));
            v.push(f32::from_le_bytes(word(4 + 2 * i).unwrap()));
        }
        Self::new(height, width, u, v)
    }
}

const FLO_MAGIC: f32 = 202021.25;

/// Samples `plane` at fractional `(y, x)` with edge-clamped coordinates.
fn bilinear(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    let top = if fx == 0.0 { at(y0, x0) } else { at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx };
    if fy == 0.0 {
        return top;
    }
    let bottom = if fx == 0.0 { at(y1, x0) } else { at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx };
    top * (1.0 - fy) + bottom * fy
}

fn warp_plane(src: &[f32], h: usize, w: usize, flow: &FlowField) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(y, x);
            out.push(bilinear(src, h, w, y as f32 + v, x as f32 + u));
        }
    }
    out
}

fn expect_flow_dims(h: usize, w: usize, flow: &FlowField) -> Result<()> {
    if flow.dims() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "flow {}x{} for image {h}x{w}",
            flow.height, flow.width
        )));
    }
    Ok(())
}

/// Backward warp of every channel.
pub fn warp(src: &Frame, flow: &FlowField) -> Result<Frame> {
    let (h, w) = src.dims();
    expect_flow_dims(h, w, flow)?;
    let mut out = src.clone();
    for c in 0..3 {
        let warped = warp_plane(src.channel(c), h, w, flow);
        out.channel_mut(c).copy_from_slice(&warped);
    }
    Ok(out)
}

pub fn warp_plane_field(src: &Plane, flow: &FlowField) -> Result<Plane> {
    expect_flow_dims(src.height, src.width, flow)?;
    Ok(Plane {
        height: src.height,
        width: src.width,
        data: warp_plane(&src.data, src.height, src.width, flow),
    })
}

/// `exp(-omega · e)` with `e` the channel-mean squared difference.
pub fn occlusion_mask(r_re: &Frame, r_warped: &Frame, omega: f32) -> Result<Plane> {
    r_re.expect_same_dims(r_warped)?;
    let (h, w) = r_re.dims();
    let data = (0..h * w)
        .map(|p| {
            let e: f32 = (0..3)
                .map(|c| {
                    let d = r_re.channel(c)[p] - r_warped.channel(c)[p];
                    d * d
                })
                .sum::<f32>()
                / 3.0;
            (-omega * e).exp()
        })
        .collect();
    Ok(Plane { height: h, width: w, data })
}

/// Block-average downsampling by an integer factor. Trailing rows and
/// columns that do not fill a block are dropped.
pub fn downsample_area(img: &Frame, factor: usize) -> Frame {
    if factor <= 1 {
        return img.clone();
    }
    let (h, w) = img.dims();
    let (oh, ow) = ((h / factor).max(1), (w / factor).max(1));
    let (fy, fx) = (factor.min(h), factor.min(w));
    let norm = 1.0 / (fy * fx) as f32;
    Frame::from_fn(oh, ow, |y, x, c| {
        let mut acc = 0.0;
        for dy in 0..fy {
            for dx in 0..fx {
                acc += img.get(y * fy + dy, x * fx + dx, c);
            }
        }
        acc * norm
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowBackend {
    External,
    Classical,
    Zero,
}

impl FromStr for FlowBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "external" => Ok(Self::External),
            "classical" => Ok(Self::Classical),
            "zero" => Ok(Self::Zero),
            other => Err(Error::Config(format!(
                "unknown flow backend {other:?} (external|classical|zero)"
            ))),
        }
    }
}

impl fmt::Display for FlowBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::External => "external",
            Self::Classical => "classical",
            Self::Zero => "zero",
        })
    }
}

/// Produces a field that aligns `reference` onto `target`'s pixel grid:
/// `warp(reference, flow) ≈ target`.
pub trait FlowEstimator: Send {
    fn estimate(&mut self, reference: &Frame, target: &Frame) -> Result<FlowField>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroFlow;

impl FlowEstimator for ZeroFlow {
    fn estimate(&mut self, reference: &Frame, target: &Frame) -> Result<FlowField> {
        reference.expect_same_dims(target)?;
        let (h, w) = reference.dims();
        Ok(FlowField::zeros(h, w))
    }
}

/// Coarse-to-fine dense Lucas–Kanade on luminance.
///
/// Low-light frames are dominated by noise, so the raw estimate is
/// stabilized three ways: extra smoothing of the inputs, a 3×3 median filter
/// on the field after every level, and a final check that keeps zero motion
/// wherever the estimate does not lower the local matching error.
#[derive(Clone, Debug)]
pub struct ClassicalFlow {
    pub levels: usize,
    pub iterations: usize,
    /// Half-width of the square aggregation window.
    pub radius: usize,
    /// Ridge added to the structure tensor; keeps flat regions near zero.
    pub regularization: f32,
    /// Further ridge per unit of estimated noise energy in the window.
    pub noise_ridge: f32,
    /// Extra binomial blur passes applied to the full-resolution inputs.
    pub presmooth: usize,
    pub median: bool,
    /// Fall back to zero motion where it matches at least as well.
    pub zero_fallback: bool,
}

impl Default for ClassicalFlow {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations: 5,
            radius: 3,
            regularization: 1e-2,
            noise_ridge: 16.0,
            presmooth: 0,
            median: true,
            zero_fallback: true,
        }
    }
}

fn plane_blur(p: &Plane) -> Plane {
    let (h, w) = (p.height, p.width);
    let tap = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let xi = x as isize;
            tmp[y * w + x] = 0.25 * p.data[y * w + tap(xi - 1, w)]
                + 0.5 * p.data[y * w + x]
                + 0.25 * p.data[y * w + tap(xi + 1, w)];
        }
    }
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        let yi = y as isize;
        for x in 0..w {
            data[y * w + x] = 0.25 * tmp[tap(yi - 1, h) * w + x]
                + 0.5 * tmp[y * w + x]
                + 0.25 * tmp[tap(yi + 1, h) * w + x];
        }
    }
    Plane { height: h, width: w, data }
}

fn plane_half(p: &Plane) -> Plane {
    let (h, w) = (p.height / 2, p.width / 2);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let at = |dy: usize, dx: usize| p.data[(2 * y + dy) * p.width + 2 * x + dx];
            data.push(0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)));
        }
    }
    Plane { height: h, width: w, data }
}

/// Immerkær's fast noise estimate: mean absolute response to a
/// Laplacian-difference mask, which cancels locally linear structure.
fn noise_sigma(p: &Plane) -> f32 {
    let (h, w) = (p.height, p.width);
    if h < 3 || w < 3 {
        return 0.0;
    }
    const MASK: [[f32; 3]; 3] = [[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]];
    let mut acc = 0.0f64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut v = 0.0;
            for (dy, row) in MASK.iter().enumerate() {
                for (dx, m) in row.iter().enumerate() {
                    v += m * p.data[(y + dy - 1) * w + x + dx - 1];
                }
            }
            acc += v.abs() as f64;
        }
    }
    ((std::f64::consts::FRAC_PI_2).sqrt() * acc / (6.0 * ((h - 2) * (w - 2)) as f64)) as f32
}

/// Sum over the `(2r+1)²` window, truncated at the borders.
fn box_sum(data: &[f32], h: usize, w: usize, r: usize) -> Vec<f32> {
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..w {
            rows[y * w + x] = row[x.saturating_sub(r)..(x + r + 1).min(w)].iter().sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (y.saturating_sub(r)..(y + r + 1).min(h)).map(|yy| rows[yy * w + x]).sum();
        }
    }
    out
}

impl ClassicalFlow {
    fn refine(&self, reference: &Plane, target: &Plane, flow: &mut FlowField) {
        let (h, w) = (reference.height, reference.width);
        let noise_var = noise_sigma(reference).max(noise_sigma(target)).powi(2);
        for _ in 0..self.iterations {
            let warped = warp_plane(&reference.data, h, w, flow);
            let mut ixx = vec![0.0; h * w];
            let mut ixy = vec![0.0; h * w];
            let mut iyy = vec![0.0; h * w];
            let mut ixt = vec![0.0; h * w];
            let mut iyt = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let at = |yy: usize, xx: usize| warped[yy * w + xx];
                    let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                    let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
                    let gx = if xr > xl { (at(y, xr) - at(y, xl)) / (xr - xl) as f32 } else { 0.0 };
                    let gy = if yd > yu { (at(yd, x) - at(yu, x)) / (yd - yu) as f32 } else { 0.0 };
                    let i = y * w + x;
                    let it = warped[i] - target.data[i];
                    ixx[i] = gx * gx;
                    ixy[i] = gx * gy;
                    iyy[i] = gy * gy;
                    ixt[i] = gx * it;
                    iyt[i] = gy * it;
                }
            }
            let r = self.radius;
            let [sxx, sxy, syy, sxt, syt] = [ixx, ixy, iyy, ixt, iyt].map(|a| box_sum(&a, h, w, r));
            let lam = self.regularization + self.noise_ridge * ((2 * r + 1) * (2 * r + 1)) as f32 * noise_var;
            for i in 0..h * w {
                let (a, b, d) = (sxx[i] + lam, sxy[i], syy[i] + lam);
                let det = a * d - b * b;
                if det <= 0.0 || !det.is_finite() {
                    continue;
                }
                let du = -(d * sxt[i] - b * syt[i]) / det;
                let dv = -(a * syt[i] - b * sxt[i]) / det;
                flow.u[i] += du.clamp(-1.0, 1.0);
                flow.v[i] += dv.clamp(-1.0, 1.0);
            }
        }
    }

    pub fn estimate_planes(&self, reference: &Plane, target: &Plane) -> FlowField {
        let (mut r0, mut t0) = (plane_blur(reference), plane_blur(target));
        for _ in 0..self.presmooth {
            r0 = plane_blur(&r0);
            t0 = plane_blur(&t0);
        }
        let mut pyr = vec![(r0, t0)];
        while pyr.len() < self.levels.max(1) {
            let (r, t) = pyr.last().unwrap();
            if r.height.min(r.width) < 32 {
                break;
            }
            let next = (plane_blur(&plane_half(r)), plane_blur(&plane_half(t)));
            pyr.push(next);
        }
        let (top_r, _) = pyr.last().unwrap();
        let mut flow = FlowField::zeros(top_r.height, top_r.width);
        for (r, t) in pyr.iter().rev() {
            flow = flow.resize(r.height, r.width);
            self.refine(r, t, &mut flow);
            if self.median {
                flow = median3(&flow);
            }
        }
        if self.zero_fallback {
            let (r, t) = &pyr[0];
            keep_if_better(r, t, &mut flow, self.radius);
        }
        flow
    }
}

fn median3_plane(data: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w);
    let mut win = Vec::with_capacity(9);
    for y in 0..h {
        for x in 0..w {
            win.clear();
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    win.push(data[yy * w + xx]);
                }
            }
            let mid = win.len() / 2;
            let (_, m, _) = win.select_nth_unstable_by(mid, f32::total_cmp);
            out.push(*m);
        }
    }
    out
}

fn median3(flow: &FlowField) -> FlowField {
    let (h, w) = flow.dims();
    FlowField {
        height: h,
        width: w,
        u: median3_plane(&flow.u, h, w),
        v: median3_plane(&flow.v, h, w),
    }
}

/// Zeroes the flow wherever the windowed squared error of the warped
/// reference is not below that of the unwarped one.
fn keep_if_better(reference: &Plane, target: &Plane, flow: &mut FlowField, r: usize) {
    let (h, w) = (reference.height, reference.width);
    let warped = warp_plane(&reference.data, h, w, flow);
    let sq = |a: &[f32]| -> Vec<f32> { a.iter().zip(&target.data).map(|(p, q)| (p - q) * (p - q)).collect() };
    let moved = box_sum(&sq(&warped), h, w, r);
    let still = box_sum(&sq(&reference.data), h, w, r);
    for i in 0..h * w {
        if moved[i] >= still[i] {
            flow.u[i] = 0.0;
            flow.v[i] = 0.0;
        }
    }
}

impl FlowEstimator for ClassicalFlow {
    fn estimate(&mut self, reference: &Frame, target: &Frame) -> Result<FlowField> {
        reference.expect_same_dims(target)?;
        let flow = self.estimate_planes(&reference.luminance(), &target.luminance());
        flow.check_sane()?;
        Ok(flow)
    }
}

/// Runs an external program (typically a pretrained deep flow model) per
/// frame pair. The program is invoked through `sh -c` as
/// `<command> <checkpoint> <reference.png> <target.png> <output.flo>` and
/// must write a Middlebury `.flo` file of the input size.
#[derive(Clone, Debug)]
pub struct ExternalFlow {
    command: String,
    checkpoint: PathBuf,
    scratch: PathBuf,
}

static SCRATCH_COUNTER: AtomicUsize = AtomicUsize::new(0);

impl ExternalFlow {
    pub fn new(command: Option<&str>, checkpoint: Option<&Path>) -> Result<Self> {
        let command = command
            .filter(|c| !c.trim().is_empty())
            .ok_or_else(|| Error::EstimatorUnavailable("flow.command is not set".into()))?;
        let checkpoint = checkpoint
            .ok_or_else(|| Error::EstimatorUnavailable("flow.checkpoint_path is not set".into()))?;
        if !checkpoint.is_file() {
            return Err(Error::EstimatorUnavailable(format!(
                "checkpoint {} not found",
                checkpoint.display()
            )));
        }
        let scratch = std::env::temp_dir().join(format!(
            "tempretinex-flow-{}-{}",
            std::process::id(),
            SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::create_dir_all(&scratch).map_err(io_err(format!("creating {}", scratch.display())))?;
        Ok(Self {
            command: command.to_string(),
            checkpoint: checkpoint.to_path_buf(),
            scratch,
        })
    }
}

impl Drop for ExternalFlow {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.scratch);
    }
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

impl FlowEstimator for ExternalFlow {
    fn estimate(&mut self, reference: &Frame, target: &Frame) -> Result<FlowField> {
        reference.expect_same_dims(target)?;
        let ref_path = self.scratch.join("reference.png");
        let tgt_path = self.scratch.join("target.png");
        let out_path = self.scratch.join("flow.flo");
        let _ = std::fs::remove_file(&out_path);
        save_frame(reference, &ref_path, SaveFormat::Png16)?;
        save_frame(target, &tgt_path, SaveFormat::Png16)?;
        let script = format!(
            "{} {} {} {} {}",
            self.command,
            shell_quote(&self.checkpoint),
            shell_quote(&ref_path),
            shell_quote(&tgt_path),
            shell_quote(&out_path)
        );
        let output = Command::new("sh")
            .arg("-c")
            .arg(&script)
            .output()
            .map_err(|e| Error::EstimatorUnavailable(format!("spawning {:?}: {e}", self.command)))?;
        if !output.status.success() {
            return Err(Error::EstimatorUnavailable(format!(
                "{:?} exited with {}: {}",
                self.command,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let flow = FlowField::read_flo(&out_path)?;
        let (h, w) = reference.dims();
        expect_flow_dims(h, w, &flow)?;
        Ok(flow)
    }
}

/// Builds the estimator selected by `backend`.
pub fn build_estimator(
    backend: FlowBackend,
    command: Option<&str>,
    checkpoint: Option<&Path>,
) -> Result<Box<dyn FlowEstimator>> {
    Ok(match backend {
        FlowBackend::External => Box::new(ExternalFlow::new(command, checkpoint)?),
        FlowBackend::Classical => Box::new(ClassicalFlow::default()),
        FlowBackend::Zero => Box::new(ZeroFlow),
    })
}

/// Like [`build_estimator`], but an unavailable external model degrades to
/// the classical estimator with a warning.
pub fn build_estimator_or_classical(
    backend: FlowBackend,
    command: Option<&str>,
    checkpoint: Option<&Path>,
) -> Result<Box<dyn FlowEstimator>> {
    match build_estimator(backend, command, checkpoint) {
        Err(Error::EstimatorUnavailable(msg)) => {
            log::warn!("external flow unavailable ({msg}); using classical flow");
            Ok(Box::new(ClassicalFlow::default()))
        }
        other => other,
    }
}

/// Brings the previous frame's outputs onto the current frame.
///
/// The current denoised frame is first histogram matched to the previous
/// reflectance so that the estimator sees two images of similar exposure.
/// With `downscale > 1` the flow is estimated on block-averaged copies and
/// upsampled. A zero state yields zeros without calling the estimator.
pub fn align_previous(
    state: &TemporalState,
    i_ld: &Frame,
    est: &mut dyn FlowEstimator,
    downscale: usize,
) -> Result<(RetinexPair, FlowField)> {
    let (h, w) = i_ld.dims();
    let Some(prev) = state.previous() else {
        return Ok((RetinexPair::zeros(h, w), FlowField::zeros(h, w)));
    };
    prev.r.expect_same_dims(i_ld)?;
    let matched = histogram_match(i_ld, &prev.r);
    let flow = if downscale > 1 {
        let small = est.estimate(&downsample_area(&prev.r, downscale), &downsample_area(&matched, downscale))?;
        small.resize(h, w)
    } else {
        est.estimate(&prev.r, &matched)?
    };
    let warped = RetinexPair {
        r: warp(&prev.r, &flow)?,
        s: warp(&prev.s, &flow)?,
    };
    Ok((warped, flow))
}
