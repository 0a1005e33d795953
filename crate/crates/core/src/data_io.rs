//! Frame sequence I/O and the synthetic scene generator.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageBuffer, Rgb};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::frame::{Frame, FrameSequence};

/// Smallest frame side accepted from disk.
pub const MIN_SIDE: usize = 16;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaveFormat {
    Png8,
    Png16,
}

impl FromStr for SaveFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png8" => Ok(Self::Png8),
            "png16" => Ok(Self::Png16),
            other => Err(Error::Config(format!("unknown format {other:?} (png8|png16)"))),
        }
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(io_err(format!("listing {}", dir.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(io_err(format!("listing {}", dir.display())))?;
    entries.sort();
    Ok(entries)
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    // 8-bit samples are divided by 255 and 16-bit ones by 65535.
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let frame = Frame::from_fn(h, w, |y, x, c| raw[(y * w + x) * 3 + c]);
    Ok(frame.clamp01())
}

/// Loads the files of `dir` whose names match `pattern`, in lexicographic
/// order.
pub fn load_sequence(dir: &Path, pattern: &str) -> Result<FrameSequence> {
    let glob = glob::Pattern::new(pattern).map_err(|e| Error::Config(format!("pattern {pattern:?}: {e}")))?;
    let files: Vec<PathBuf> = read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_image(p))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| glob.matches(n))
        })
        .collect();
    if files.is_empty() {
        return Err(Error::NoFrames {
            dir: dir.to_path_buf(),
            pattern: pattern.to_string(),
        });
    }
    let frames = files.iter().map(|p| load_frame(p)).collect::<Result<Vec<_>>>()?;
    let (h, w) = frames[0].dims();
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Shape(format!("frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")));
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    FrameSequence::new(name, frames)
}

/// Loads every sequence under `root`: one per subdirectory, or `root`
/// itself when it holds frames directly.
pub fn load_dataset(root: &Path, pattern: &str) -> Result<Vec<FrameSequence>> {
    let subdirs: Vec<PathBuf> = read_dir_sorted(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if subdirs.is_empty() {
        return Ok(vec![load_sequence(root, pattern)?]);
    }
    subdirs.iter().map(|d| load_sequence(d, pattern)).collect()
}

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:06}.png")
}

pub fn save_frame(frame: &Frame, path: &Path, format: SaveFormat) -> Result<()> {
    let (h, w) = frame.dims();
    let result = match format {
        SaveFormat::Png8 => {
            let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Rgb(std::array::from_fn(|c| {
                    (frame.get(y as usize, x as usize, c).clamp(0.0, 1.0) * 255.0).round() as u8
                }))
            });
            buf.save(path)
        }
        SaveFormat::Png16 => {
            let buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Rgb(std::array::from_fn(|c| {
                    (frame.get(y as usize, x as usize, c).clamp(0.0, 1.0) * 65535.0).round() as u16
                }))
            });
            buf.save(path)
        }
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `frame_000000.png`, `frame_000001.png`, ... into `dir`.
pub fn save_sequence(seq: &FrameSequence, dir: &Path, format: SaveFormat) -> Result<usize> {
    if seq.is_empty() {
        return Ok(0);
    }
    std::fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        save_frame(frame, &dir.join(frame_file_name(i)), format)?;
    }
    Ok(seq.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// No motion.
    Static,
    /// Background pans one pixel per frame; a square moves on top.
    Pan,
    /// Static background with a square sliding across it.
    Occlusion,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Self::Static),
            "pan" => Ok(Self::Pan),
            "occlusion" => Ok(Self::Occlusion),
            other => Err(Error::Config(format!("unknown synth kind {other:?}"))),
        }
    }
}

/// Triangle wave with period 2 and range [0, 1].
fn triangle(t: f32) -> f32 {
    let r = t.rem_euclid(2.0);
    if r <= 1.0 {
        r
    } else {
        2.0 - r
    }
}

fn background(xb: f32, y: f32, w: f32, c: usize) -> f32 {
    const TINT: [f32; 3] = [1.0, 0.85, 0.7];
    let ramp = 0.15 + 0.45 * triangle(xb / w);
    let checker = if ((xb / 8.0).floor() as i64 + (y / 8.0).floor() as i64) % 2 == 0 {
        0.2
    } else {
        0.0
    };
    let ripple = 0.05 * (2.0 * PI * xb / 13.0).sin() * (2.0 * PI * y / 11.0).cos();
    (ramp + checker + ripple) * TINT[c]
}

fn truth_frame(kind: SynthKind, t: usize, h: usize, w: usize) -> Frame {
    let side_h = (h / 4).max(2);
    let side_w = (w / 4).max(2);
    let travel = w.saturating_sub(side_w).max(1);
    let square = match kind {
        SynthKind::Static => None,
        SynthKind::Pan => Some(((w / 8 + 2 * t) % travel, h / 3)),
        SynthKind::Occlusion => Some(((2 * t) % travel, (h - side_h) / 2)),
    };
    let shift = if kind == SynthKind::Pan { t as f32 } else { 0.0 };
    Frame::from_fn(h, w, |y, x, c| {
        if let Some((sx, sy)) = square {
            if (sx..sx + side_w).contains(&x) && (sy..sy + side_h).contains(&y) {
                const COLOR: [f32; 3] = [0.85, 0.35, 0.2];
                let stripe = if ((x - sx) / 3) % 2 == 0 { 0.08 } else { -0.08 };
                return (COLOR[c] + stripe).clamp(0.0, 1.0);
            }
        }
        background(x as f32 + shift, y as f32, w as f32, c).clamp(0.0, 1.0)
    })
    .with_index(t)
}

/// Generates a textured ground-truth sequence and its darkened, noisy
/// counterpart `clamp(scale · truth + N(0, sigma²))`.
pub fn synth_sequence(
    kind: SynthKind,
    n_frames: usize,
    size: (usize, usize),
    brightness_scale: f32,
    noise_sigma: f32,
    seed: u64,
) -> Result<(FrameSequence, FrameSequence)> {
    if n_frames < 2 {
        return Err(Error::Config(format!("synthetic sequences need >= 2 frames, got {n_frames}")));
    }
    if !(brightness_scale > 0.0 && brightness_scale <= 1.0) {
        return Err(Error::Config(format!("brightness_scale must be in (0,1], got {brightness_scale}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    let (h, w) = size;
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::Shape(format!("synthetic frames must be at least {MIN_SIDE}x{MIN_SIDE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, noise_sigma.max(f32::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut truth = Vec::with_capacity(n_frames);
    let mut low = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let gt = truth_frame(kind, t, h, w);
        let dark = if noise_sigma > 0.0 {
            gt.map(|v| (brightness_scale * v + normal.sample(&mut rng)).clamp(0.0, 1.0))
        } else {
            gt.map(|v| (brightness_scale * v).clamp(0.0, 1.0))
        };
        truth.push(gt);
        low.push(dark);
    }
    let name = format!("synth_{kind:?}").to_lowercase();
    Ok((FrameSequence::new(name.clone(), low)?, FrameSequence::new(name, truth)?))
}
