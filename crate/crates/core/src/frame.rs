//! Pixel containers shared by every module.

use tapegrad::{Float, Tensor};

use crate::error::{Error, Result};

/// BT.601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// An RGB image with normalized `[0, 1]` intensities, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
    /// Position of the frame in its sequence.
    pub index: usize,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty frame {height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "{height}x{width}x3 frame needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            index: 0,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::from_fn(height, width, |_, _, _| value)
    }

    /// Builds a frame from `f(y, x, channel)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            data,
            index: 0,
        }
    }

    pub fn with_index(mut self, index: usize) -> Self {
        self.index = index;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Channel-major samples: all of R, then G, then B.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn zip_map(&self, other: &Frame, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_same_dims(other)?;
        Ok(Self {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..self.clone()
        })
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Frame) -> Result<f32> {
        self.expect_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn luminance(&self) -> Plane {
        let n = self.height * self.width;
        let data = (0..n)
            .map(|p| {
                LUMA[0] * self.data[p] + LUMA[1] * self.data[n + p] + LUMA[2] * self.data[2 * n + p]
            })
            .collect();
        Plane {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn mean_luminance(&self) -> f64 {
        self.luminance().mean()
    }

    pub fn expect_same_dims(&self, other: &Frame) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(
            &[3, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
        .expect("frame length matches its shape")
    }

    /// Converts a `[3,H,W]` tensor back into a frame.
    pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        Frame::new(h, w, t.data().iter().map(|v| v.to_f64_lossy() as f32).collect())
    }
}

/// A single-channel `H×W` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Repeats the plane into all three channels.
    pub fn to_frame(&self) -> Frame {
        Frame::from_fn(self.height, self.width, |y, x, _| self.get(y, x))
    }
}

/// An ordered run of equally sized frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub name: String,
    pub frames: Vec<Frame>,
    /// Frames per second as `(numerator, denominator)`, when known.
    pub fps: Option<(u32, u32)>,
}

impl FrameSequence {
    /// Validates equal dimensions and renumbers frames from zero.
    pub fn new(name: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        if let Some(first) = frames.first() {
            for f in &frames[1..] {
                first.expect_same_dims(f)?;
            }
        }
        let frames = frames
            .into_iter()
            .enumerate()
            .map(|(i, f)| f.with_index(i))
            .collect();
        Ok(Self {
            name: name.into(),
            frames,
            fps: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(Frame::dims)
    }

    /// The same frames in reverse temporal order (renumbered).
    pub fn reversed(&self) -> Self {
        let frames = self
            .frames
            .iter()
            .rev()
            .enumerate()
            .map(|(i, f)| f.clone().with_index(i))
            .collect();
        Self {
            name: self.name.clone(),
            frames,
            fps: self.fps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let f = Frame::from_fn(3, 4, |y, x, c| (y * 7 + x * 3 + c) as f32 / 40.0);
        let back = Frame::from_tensor(&f.to_tensor::<f64>()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn luminance_of_gray_is_gray() {
        let f = Frame::filled(2, 2, 0.25);
        for v in f.luminance().data {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn sequence_rejects_mixed_sizes() {
        let r = FrameSequence::new("s", vec![Frame::filled(2, 2, 0.0), Frame::filled(2, 3, 0.0)]);
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }
}
