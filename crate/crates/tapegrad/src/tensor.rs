use crate::error::{invalid, Error, Result};
use crate::float::Float;

/// A dense, row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(invalid(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(C, H, W)` of an image tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(invalid("chw", format!("expected [C,H,W], got {other:?}"))),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
        }
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Applies a pixel permutation to a `[C,H,W]` tensor.
    pub fn spatial(&self, kind: Spatial) -> Result<Self> {
        let (c, h, w) = self.chw()?;
        let (oh, ow) = match kind {
            Spatial::Transpose => (w, h),
            _ => (h, w),
        };
        let mut out = Vec::with_capacity(self.data.len());
        for ch in 0..c {
            let plane = &self.data[ch * h * w..(ch + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = kind.source(y, x, h, w);
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        Ok(Self {
            shape: vec![c, oh, ow],
            data: out,
        })
    }
}

/// Elementary spatial permutations. Each one is its own inverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Spatial {
    /// Mirror left-right.
    FlipW,
    /// Mirror top-bottom.
    FlipH,
    /// Swap the H and W axes.
    Transpose,
}

impl Spatial {
    /// Source coordinate in an `h×w` input for output pixel `(y, x)`.
    fn source(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Spatial::FlipW => (y, w - 1 - x),
            Spatial::FlipH => (h - 1 - y, x),
            Spatial::Transpose => (x, y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn spatial_ops_are_involutions() {
        let t = Tensor::<f64>::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        for kind in [Spatial::FlipW, Spatial::FlipH, Spatial::Transpose] {
            let once = t.spatial(kind).unwrap();
            assert_ne!(once, t);
            assert_eq!(once.spatial(kind).unwrap(), t);
        }
        assert_eq!(t.spatial(Spatial::Transpose).unwrap().shape(), &[2, 4, 3]);
    }

    #[test]
    fn flip_w_reverses_rows() {
        let t = Tensor::<f32>::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.spatial(Spatial::FlipW).unwrap().data(), &[3.0, 2.0, 1.0]);
    }
}
