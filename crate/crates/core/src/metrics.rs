//! PSNR, SSIM, MABD and the raw / histogram-matched evaluation protocols.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::flow::{warp, FlowEstimator};
use crate::frame::{Frame, FrameSequence};
use crate::preprocessing::histogram_match;

/// Peak signal-to-noise ratio in dB for unit dynamic range; `+inf` for
/// identical inputs.
pub fn psnr(x: &Frame, y: &Frame) -> Result<f64> {
    x.expect_same_dims(y)?;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / x.data().len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(p: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Single-scale SSIM (11×11 Gaussian window, sigma 1.5), averaged over
/// channels.
pub fn ssim(x: &Frame, y: &Frame) -> Result<f64> {
    x.expect_same_dims(y)?;
    let (h, w) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let taps = gaussian_taps();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for c in 0..3 {
        let a: Vec<f64> = x.channel(c).iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = y.channel(c).iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let (mu_a, ..) = filter_valid(&a, h, w, &taps);
        let (mu_b, ..) = filter_valid(&b, h, w, &taps);
        let (aa, ..) = filter_valid(&prod(&a, &a), h, w, &taps);
        let (bb, ..) = filter_valid(&prod(&b, &b), h, w, &taps);
        let (ab, ..) = filter_valid(&prod(&a, &b), h, w, &taps);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / 3.0)
}

/// Mean absolute change of mean luminance between consecutive frames.
pub fn mabd(seq: &FrameSequence) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::Domain(format!("MABD needs at least 2 frames, got {}", seq.len())));
    }
    let b: Vec<f64> = seq.frames.iter().map(Frame::mean_luminance).collect();
    Ok(b.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (b.len() - 1) as f64)
}

/// Per-pixel mean `|Y(current) − Y(aligned previous)|`.
pub fn aligned_brightness_difference(current: &Frame, aligned_prev: &Frame) -> Result<f64> {
    current.expect_same_dims(aligned_prev)?;
    let (a, b) = (current.luminance(), aligned_prev.luminance());
    Ok(a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / a.data.len() as f64)
}

/// Aligned brightness difference for every frame `t ≥ 1`, with frame
/// `t − 1` warped onto frame `t` by `est`.
pub fn mabd_pairwise_frames(seq: &FrameSequence, est: &mut dyn FlowEstimator) -> Result<Vec<f64>> {
    if seq.len() < 2 {
        return Err(Error::Domain(format!("MABD needs at least 2 frames, got {}", seq.len())));
    }
    seq.frames
        .windows(2)
        .map(|w| {
            let flow = est.estimate(&w[0], &w[1])?;
            aligned_brightness_difference(&w[1], &warp(&w[0], &flow)?)
        })
        .collect()
}

pub fn mabd_pairwise(seq: &FrameSequence, est: &mut dyn FlowEstimator) -> Result<f64> {
    let v = mabd_pairwise_frames(seq, est)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Which MABD reading to report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MabdMode {
    #[default]
    Sequence,
    Pairwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Predictions scored as they are.
    Raw,
    /// Each prediction is first histogram matched to its ground truth.
    Hm,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Hm => "hm",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Self::Raw),
            "hm" => Ok(Self::Hm),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

/// `+inf` PSNR is written as the string `"inf"`.
fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&v.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Scores {
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub mabd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceScores {
    pub name: String,
    pub frames: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub mabd_mode: MabdMode,
    pub sequences: Vec<SequenceScores>,
    /// Unweighted mean over sequences.
    pub aggregate: Scores,
}

/// Scores one predicted sequence against its ground truth. MABD is
/// computed on the predictions only.
pub fn evaluate(pred: &FrameSequence, gt: &FrameSequence, protocol: Protocol) -> Result<SequenceScores> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "sequence {:?}: {} predicted frames vs {} ground-truth frames",
            pred.name,
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Domain(format!("sequence {:?} is empty", pred.name)));
    }
    let (mut p_sum, mut s_sum) = (0.0, 0.0);
    for (p, g) in pred.frames.iter().zip(&gt.frames) {
        p.expect_same_dims(g)?;
        let p = match protocol {
            Protocol::Raw => p.clone(),
            Protocol::Hm => histogram_match(p, g),
        };
        p_sum += psnr(&p, g)?;
        s_sum += ssim(&p, g)?;
    }
    let n = pred.len() as f64;
    let mabd_value = if pred.len() >= 2 { mabd(pred)? } else { 0.0 };
    Ok(SequenceScores {
        name: pred.name.clone(),
        frames: pred.len(),
        scores: Scores {
            psnr: p_sum / n,
            ssim: s_sum / n,
            mabd: mabd_value,
        },
    })
}

impl EvalReport {
    pub fn from_sequences(protocol: Protocol, mabd_mode: MabdMode, sequences: Vec<SequenceScores>) -> Self {
        let n = sequences.len().max(1) as f64;
        let sum = |f: fn(&Scores) -> f64| sequences.iter().map(|s| f(&s.scores)).sum::<f64>() / n;
        let aggregate = Scores {
            psnr: sum(|s| s.psnr),
            ssim: sum(|s| s.ssim),
            mabd: sum(|s| s.mabd),
        };
        Self {
            protocol,
            mabd_mode,
            sequences,
            aggregate,
        }
    }

    pub const CSV_HEADER: &'static str = "sequence,protocol,frames,psnr,ssim,mabd";

    /// One row per sequence plus a final `mean` row. Values use Rust's
    /// shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        let row = |name: &str, frames: usize, s: &Scores| {
            format!("{name},{},{frames},{},{},{}\n", self.protocol, s.psnr, s.ssim, s.mabd)
        };
        for s in &self.sequences {
            out += &row(&s.name, s.frames, &s.scores);
        }
        let total: usize = self.sequences.iter().map(|s| s.frames).sum();
        out += &row("mean", total, &self.aggregate);
        out
    }

    /// Parses [`EvalReport::to_csv`] output back into `(name, scores)` rows.
    pub fn parse_csv(text: &str) -> Result<Vec<(String, Protocol, Scores)>> {
        let bad = |m: String| Error::Config(format!("eval csv: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(bad("unexpected header".into()));
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 6 {
                    return Err(bad(format!("row {l:?}")));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
                Ok((
                    f[0].to_string(),
                    f[1].parse()?,
                    Scores {
                        psnr: num(f[3])?,
                        ssim: num(f[4])?,
                        mabd: num(f[5])?,
                    },
                ))
            })
            .collect()
    }
}

/// Optional learned perceptual distance. No implementation ships with the
/// crate; reports leave the column out when none is supplied.
pub trait PerceptualMetric {
    fn distance(&self, x: &Frame, y: &Frame) -> Result<f64>;
}
