//! Dense, convolution and pooling primitives with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Real;

/// Affine map `y = x·Wᵀ + b` applied row-wise to a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `(out, in)`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

pub struct LinearGrads<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub input: Array2<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Gaussian weights with standard deviation `sqrt(gain / inputs)`, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        let std = (gain / inputs as f64).sqrt();
        Linear {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            }),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn num_parameters(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Gradients with respect to weight, bias and input, given the upstream gradient `dy`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, need_input: bool) -> LinearGrads<T> {
        LinearGrads {
            weight: dy.t().dot(&x),
            bias: dy.sum_axis(Axis(0)),
            input: if need_input {
                dy.dot(&self.weight)
            } else {
                Array2::zeros((0, 0))
            },
        }
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Unfolds a `(channels, h, w)` plane stack into `(channels·9, h·w)` columns for a
/// 3×3 convolution with zero padding 1.
pub fn im2col3x3<T: Real>(input: &[T], channels: usize, h: usize, w: usize) -> Array2<T> {
    let hw = h * w;
    let mut cols = Array2::<T>::zeros((channels * 9, hw));
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let mut row = cols.row_mut(c * 9 + ky * 3 + kx);
                let row = row.as_slice_mut().expect("contiguous row");
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`]: accumulates column gradients back onto the input planes.
pub fn col2im3x3<T: Real>(cols: &Array2<T>, channels: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); channels * hw];
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = cols.row(c * 9 + ky * 3 + kx);
                let row = row.as_slice().expect("contiguous row");
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

/// 2×2 stride-2 max pooling over each plane (odd trailing rows/columns dropped).
///
/// Returns the pooled planes and, for each output, the flat in-plane index of the
/// first maximum in row-major window order.
pub fn max_pool2x2<T: Real>(input: &[T], channels: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut arg = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            let r0 = 2 * y * w;
            let r1 = r0 + w;
            for x in 0..ow {
                let candidates = [r0 + 2 * x, r0 + 2 * x + 1, r1 + 2 * x, r1 + 2 * x + 1];
                let mut best = candidates[0];
                for &i in &candidates[1..] {
                    if plane[i] > plane[best] {
                        best = i;
                    }
                }
                out.push(plane[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Max pooling without index bookkeeping; used by the parameter-free saliency column.
pub fn max_pool2x2_plane<T: Real>(input: &[T], h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let r0 = &input[2 * y * w..(2 * y + 1) * w];
        let r1 = &input[(2 * y + 1) * w..(2 * y + 2) * w];
        for x in 0..ow {
            out.push(r0[2 * x].max(r0[2 * x + 1]).max(r1[2 * x]).max(r1[2 * x + 1]));
        }
    }
    out
}
