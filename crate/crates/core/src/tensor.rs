//! Dense row-major real tensors.

use crate::error::{Error, Result};

/// Dense row-major `f64` array. Every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::shape(format!("dims must be non-empty and positive, got {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let len: usize = dims.iter().product();
        Self::new(dims.to_vec(), vec![0.0; len])
    }

    pub fn filled(dims: &[usize], value: f64) -> Result<Self> {
        let len: usize = dims.iter().product();
        Self::new(dims.to_vec(), vec![value; len])
    }

    /// Builds a rank-2 tensor from `f(row, col)`.
    pub fn from_fn2(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c));
            }
        }
        Self::new(vec![h, w], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::shape(format!("expected rank 2, got dims {:?}", self.dims))),
        }
    }

    /// `(channels, rows, cols)` of a rank-3 tensor.
    pub fn shape3(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!("expected rank 3, got dims {:?}", self.dims))),
        }
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dims[1] + c]
    }

    #[inline]
    pub fn at3(&self, ch: usize, r: usize, c: usize) -> f64 {
        self.data[(ch * self.dims[1] + r) * self.dims[2] + c]
    }

    /// Same data viewed under new dims of equal element count.
    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// Elementwise map; fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Collapses a `[H,W]` or `[C,H,W]` tensor to a single `[H,W]` plane,
    /// averaging over channels when there is more than one.
    pub fn to_plane(&self) -> Result<Self> {
        match self.dims[..] {
            [_, _] => Ok(self.clone()),
            [1, h, w] => Self::new(vec![h, w], self.data.clone()),
            [c, h, w] => {
                let mut out = vec![0.0; h * w];
                for ch in 0..c {
                    for (o, v) in out.iter_mut().zip(&self.data[ch * h * w..(ch + 1) * h * w]) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|v| *v /= c as f64);
                Self::new(vec![h, w], out)
            }
            _ => Err(Error::shape(format!(
                "expected an image of rank 2 or 3, got dims {:?}",
                self.dims
            ))),
        }
    }

    /// Rows `r0..r1`, cols `c0..c1` of a rank-2 tensor.
    pub fn crop2(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Self> {
        let (h, w) = self.shape2()?;
        if r0 >= r1 || c0 >= c1 || r1 > h || c1 > w {
            return Err(Error::shape(format!(
                "crop rows {r0}..{r1} cols {c0}..{c1} outside {h}x{w}"
            )));
        }
        Self::from_fn2(r1 - r0, c1 - c0, |r, c| self.at2(r0 + r, c0 + c))
    }

    pub(crate) fn same_dims(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(t.at3(1, 0, 2), 8.0);
        let p = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(p.at2(1, 0), 3.0);
        assert_eq!(p.crop2(0, 2, 1, 3).unwrap().data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn to_plane_averages_channels() {
        let t = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(t.to_plane().unwrap().data(), &[2.0, 4.0]);
    }
}
