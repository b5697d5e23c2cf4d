//! The `[C, H, W]` latent grid with zero padding past its true width.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A `[C, H, W]` latent "spectrogram". Columns at or beyond `true_width` are
/// exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<F> {
    tensor: Tensor<F>,
    true_width: usize,
}

impl<F: Scalar> LatentGrid<F> {
    pub fn zeros(channels: usize, height: usize, width: usize, true_width: usize) -> Result<Self> {
        check_dims(channels, height, width, true_width)?;
        Ok(Self { tensor: Tensor::zeros(vec![channels, height, width]), true_width })
    }

    /// Builds a grid, zeroing anything past `true_width`.
    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        true_width: usize,
        data: Vec<F>,
    ) -> Result<Self> {
        check_dims(channels, height, width, true_width)?;
        let tensor = Tensor::new(vec![channels, height, width], data)?;
        let mut grid = Self { tensor, true_width };
        grid.mask_padding();
        Ok(grid)
    }

    /// Like [`LatentGrid::from_vec`] but rejects nonzero padding instead of
    /// clearing it.
    pub fn from_vec_strict(
        channels: usize,
        height: usize,
        width: usize,
        true_width: usize,
        data: Vec<F>,
    ) -> Result<Self> {
        check_dims(channels, height, width, true_width)?;
        let tensor = Tensor::new(vec![channels, height, width], data)?;
        let grid = Self { tensor, true_width };
        if !grid.padding_is_zero() {
            return Err(Error::Format("nonzero values past the true width".into()));
        }
        Ok(grid)
    }

    /// Standard normal noise on every column below `true_width`.
    pub fn noise<R: Rng + ?Sized>(
        channels: usize,
        height: usize,
        width: usize,
        true_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_dims(channels, height, width, true_width)?;
        let mut grid = Self::zeros(channels, height, width, true_width)?;
        for c in 0..channels {
            for h in 0..height {
                for w in 0..true_width {
                    let z: f64 = rng.sample(StandardNormal);
                    grid.set(c, h, w, F::of(z));
                }
            }
        }
        Ok(grid)
    }

    /// Noise with the same shape and true width as `self`.
    pub fn noise_like<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let (c, h, w) = self.dims();
        Self::noise(c, h, w, self.true_width, rng).expect("dims already validated")
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.tensor.shape();
        (s[0], s[1], s[2])
    }

    pub fn channels(&self) -> usize {
        self.dims().0
    }

    pub fn height(&self) -> usize {
        self.dims().1
    }

    pub fn width(&self) -> usize {
        self.dims().2
    }

    pub fn true_width(&self) -> usize {
        self.true_width
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.tensor
    }

    pub fn as_slice(&self) -> &[F] {
        self.tensor.data()
    }

    fn index(&self, c: usize, h: usize, w: usize) -> usize {
        let (_, hh, ww) = self.dims();
        (c * hh + h) * ww + w
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> F {
        self.tensor.data()[self.index(c, h, w)]
    }

    /// Writes one value. Writes past the true width are ignored so the
    /// padding invariant cannot be broken.
    pub fn set(&mut self, c: usize, h: usize, w: usize, v: F) {
        if w < self.true_width {
            let i = self.index(c, h, w);
            self.tensor.data_mut()[i] = v;
        }
    }

    /// One `C*H` column vector, channel-major.
    pub fn column(&self, w: usize) -> Vec<F> {
        let (c, h, _) = self.dims();
        let mut out = Vec::with_capacity(c * h);
        for ci in 0..c {
            for hi in 0..h {
                out.push(self.get(ci, hi, w));
            }
        }
        out
    }

    pub fn padding_is_zero(&self) -> bool {
        let (c, h, w) = self.dims();
        (0..c).all(|ci| {
            (0..h).all(|hi| (self.true_width..w).all(|wi| self.get(ci, hi, wi) == F::zero()))
        })
    }

    fn mask_padding(&mut self) {
        let (c, h, w) = self.dims();
        let tw = self.true_width;
        let data = self.tensor.data_mut();
        for ci in 0..c {
            for hi in 0..h {
                let row = (ci * h + hi) * w;
                data[row + tw..row + w].iter_mut().for_each(|v| *v = F::zero());
            }
        }
    }

    /// Same data with a different true width; columns past the new width are
    /// cleared.
    pub fn with_true_width(&self, true_width: usize) -> Result<Self> {
        let (c, h, w) = self.dims();
        check_dims(c, h, w, true_width)?;
        let mut out = Self { tensor: self.tensor.clone(), true_width };
        out.mask_padding();
        Ok(out)
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    pub fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!("{:?} vs {:?}", self.dims(), other.dims())))
        }
    }

    /// `a * self + b * other`. The result's true width is the larger of the
    /// two, which keeps the padding zero.
    pub fn lin_comb(&self, a: F, other: &Self, b: F) -> Result<Self> {
        self.check_same_dims(other)?;
        let data = self
            .as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        let tensor = Tensor::new(self.tensor.shape().to_vec(), data)?;
        Ok(Self { tensor, true_width: self.true_width.max(other.true_width) })
    }

    pub fn scaled(&self, k: F) -> Self {
        let mut out = self.clone();
        out.tensor.scale(k);
        out
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        let mut out = self.clone();
        out.tensor.data_mut().iter_mut().for_each(|v| *v = f(*v));
        out.mask_padding();
        out
    }

    pub fn cast<G: Scalar>(&self) -> LatentGrid<G> {
        LatentGrid { tensor: self.tensor.cast(), true_width: self.true_width }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(x, y)| (x.f64() - y.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Euclidean norm of each column.
    pub fn column_norms(&self) -> Vec<f64> {
        let (c, h, w) = self.dims();
        let mut norms = vec![0.0; w];
        for ci in 0..c {
            for hi in 0..h {
                for (wi, n) in norms.iter_mut().enumerate() {
                    let v = self.get(ci, hi, wi).f64();
                    *n += v * v;
                }
            }
        }
        norms.iter_mut().for_each(|n| *n = n.sqrt());
        norms
    }
}

fn check_dims(channels: usize, height: usize, width: usize, true_width: usize) -> Result<()> {
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::Shape(format!("empty grid [{channels}, {height}, {width}]")));
    }
    if true_width == 0 || true_width > width {
        return Err(Error::Shape(format!("true width {true_width} not in 1..={width}")));
    }
    Ok(())
}
