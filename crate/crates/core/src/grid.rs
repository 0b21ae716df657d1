//! Row-major single-channel image grid.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<S> {
    pub h: usize,
    pub w: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Grid<S> {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![S::zero(); h * w] }
    }

    pub fn filled(h: usize, w: usize, v: S) -> Self {
        Self { h, w, data: vec![v; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape { context: "Grid::from_vec", expected: vec![h * w], got: vec![data.len()] });
        }
        Ok(Self { h, w, data })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> S {
        self.data[row * self.w + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: S) {
        self.data[row * self.w + col] = v;
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape { context, expected: self.shape().to_vec(), got: other.shape().to_vec() });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { h: self.h, w: self.w, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise `f(self, other)`; shapes must agree.
    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.check_same_shape(other, "Grid::zip_map")?;
        Ok(Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|x| x * s)
    }

    pub fn mean(&self) -> S {
        self.data.iter().copied().sum::<S>() / S::from_usize(self.data.len().max(1)).unwrap()
    }

    pub fn norm(&self) -> S {
        self.data.iter().map(|&x| x * x).sum::<S>().sqrt()
    }

    pub fn cast<T: Scalar>(&self) -> Grid<T> {
        Grid { h: self.h, w: self.w, data: self.data.iter().map(|&x| T::from_f64_lossy(x.as_f64())).collect() }
    }
}

/// Boolean foreground mask stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![false; h * w] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.w + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.w + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Square (Chebyshev) dilation by `r` pixels.
    pub fn dilate(&self, r: usize) -> Mask {
        let mut out = Mask::empty(self.h, self.w);
        let r = r as isize;
        for row in 0..self.h {
            for col in 0..self.w {
                if !self.get(row, col) {
                    continue;
                }
                for dr in -r..=r {
                    for dc in -r..=r {
                        let (rr, cc) = (row as isize + dr, col as isize + dc);
                        if rr >= 0 && cc >= 0 && (rr as usize) < self.h && (cc as usize) < self.w {
                            out.set(rr as usize, cc as usize, true);
                        }
                    }
                }
            }
        }
        out
    }

    /// True when every set pixel of `self` is set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_grows_single_pixel_to_square() {
        let mut m = Mask::empty(7, 7);
        m.set(3, 3, true);
        let d = m.dilate(2);
        assert_eq!(d.count(), 25);
        assert!(m.is_subset_of(&d));
        assert!(!d.get(0, 3));
    }

    #[test]
    fn zip_map_rejects_mismatched_shapes() {
        let a = Grid::<f32>::zeros(2, 2);
        let b = Grid::<f32>::zeros(2, 3);
        assert!(a.zip_map(&b, |x, y| x + y).is_err());
    }
}
