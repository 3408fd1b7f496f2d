//! RGB feature extractors behind a common adapter.
//!
//! A backbone maps a normalized `(3, h, w)` tensor to a fixed-length feature vector
//! by global average pooling its last feature map. The only built-in extractor is
//! the `toy` network (three [3×3 conv, ReLU, 2×2 max-pool] stages of width 8/16/32),
//! small enough to train on a CPU in tests.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{col2im3x3, im2col3x3, max_pool2x2};
use super::ModelError;
use crate::scalar::Real;

pub const TOY_BACKBONE: &str = "toy";
const TOY_WIDTHS: [usize; 3] = [8, 16, 32];

/// Registered backbones.
#[derive(Clone, Debug, PartialEq)]
pub enum RgbBackbone<T> {
    Toy(ToyBackbone<T>),
}

impl<T: Real> RgbBackbone<T> {
    /// Builds the extractor named `id` with seeded random weights.
    pub fn build<R: Rng + ?Sized>(id: &str, rng: &mut R) -> Result<Self, ModelError> {
        match id {
            TOY_BACKBONE => Ok(RgbBackbone::Toy(ToyBackbone::init(rng))),
            other => Err(ModelError::UnknownBackbone(other.to_owned())),
        }
    }

    /// Feature dimensionality reported by the backbone with `id`, without building it.
    pub fn reported_dim(id: &str) -> Result<usize, ModelError> {
        match id {
            TOY_BACKBONE => Ok(TOY_WIDTHS[2]),
            other => Err(ModelError::UnknownBackbone(other.to_owned())),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            RgbBackbone::Toy(b) => b.feature_dim(),
        }
    }

    pub fn forward(&self, x: &Array3<T>) -> Result<(Array1<T>, BackboneCache<T>), ModelError> {
        match self {
            RgbBackbone::Toy(b) => b.forward(x),
        }
    }

    /// Parameter gradients (in [`Self::params`] order) for upstream feature gradient `dfeat`.
    pub fn backward(&self, cache: &BackboneCache<T>, dfeat: &[T]) -> Vec<Vec<T>> {
        match self {
            RgbBackbone::Toy(b) => b.backward(cache, dfeat),
        }
    }

    /// `(name, shape, values)` of every parameter, in a fixed order.
    pub fn params(&self) -> Vec<(String, Vec<usize>, &[T])> {
        match self {
            RgbBackbone::Toy(b) => b.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [T])> {
        match self {
            RgbBackbone::Toy(b) => b.params_mut(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage<T> {
    /// `(out, in·9)`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> ConvStage<T> {
    fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }

    fn out_channels(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackbone<T> {
    pub stages: Vec<ConvStage<T>>,
}

struct StageCache<T> {
    cols: Array2<T>,
    argmax: Vec<u32>,
    pooled: Vec<T>,
    h: usize,
    w: usize,
}

/// Activations retained by a training-mode forward pass.
pub struct BackboneCache<T> {
    stages: Vec<StageCache<T>>,
    final_hw: usize,
}

impl<T: Real> ToyBackbone<T> {
    /// He-normal convolution weights, zero biases.
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut in_ch = 3;
        let stages = TOY_WIDTHS
            .iter()
            .map(|&out| {
                let fan_in = in_ch * 9;
                let std = (2.0 / fan_in as f64).sqrt();
                let stage = ConvStage {
                    weight: Array2::from_shape_simple_fn((out, fan_in), || {
                        let z: f64 = StandardNormal.sample(rng);
                        T::of(z * std)
                    }),
                    bias: Array1::zeros(out),
                };
                in_ch = out;
                stage
            })
            .collect();
        ToyBackbone { stages }
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(0, ConvStage::out_channels)
    }

    pub fn forward(&self, x: &Array3<T>) -> Result<(Array1<T>, BackboneCache<T>), ModelError> {
        let (c, mut h, mut w) = x.dim();
        if c != self.stages[0].in_channels() {
            return Err(ModelError::InputShape(format!("backbone expects 3 channels, got {c}")));
        }
        let min_side = 1 << self.stages.len();
        if h < min_side || w < min_side {
            return Err(ModelError::InputShape(format!(
                "backbone input {h}x{w} is smaller than {min_side}x{min_side}"
            )));
        }
        let mut act: Vec<T> = x.iter().copied().collect();
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let cols = im2col3x3(&act, stage.in_channels(), h, w);
            let mut out = stage.weight.dot(&cols);
            for (mut row, &b) in out.rows_mut().into_iter().zip(stage.bias.iter()) {
                row.mapv_inplace(|v| {
                    let z = v + b;
                    if z > T::zero() {
                        z
                    } else {
                        T::zero()
                    }
                });
            }
            let out = out.into_raw_vec_and_offset().0;
            let (pooled, argmax) = max_pool2x2(&out, stage.out_channels(), h, w);
            caches.push(StageCache {
                cols,
                argmax,
                pooled: pooled.clone(),
                h,
                w,
            });
            act = pooled;
            h /= 2;
            w /= 2;
        }
        let hw = h * w;
        let n = T::of(hw as f64);
        let feats = Array1::from_iter(act.chunks_exact(hw).map(|plane| plane.iter().copied().sum::<T>() / n));
        Ok((
            feats,
            BackboneCache {
                stages: caches,
                final_hw: hw,
            },
        ))
    }

    pub fn backward(&self, cache: &BackboneCache<T>, dfeat: &[T]) -> Vec<Vec<T>> {
        let n = T::of(cache.final_hw as f64);
        // gradient w.r.t. the last pooled map
        let mut dpooled: Vec<T> = dfeat
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g / n, cache.final_hw))
            .collect();
        let mut grads: Vec<Vec<T>> = vec![Vec::new(); 2 * self.stages.len()];
        for (si, stage) in self.stages.iter().enumerate().rev() {
            let sc = &cache.stages[si];
            let (h, w) = (sc.h, sc.w);
            let hw = h * w;
            let out_c = stage.out_channels();
            let pooled_hw = (h / 2) * (w / 2);
            let mut dact = Array2::<T>::zeros((out_c, hw));
            {
                let flat = dact.as_slice_mut().expect("contiguous");
                for (i, (&g, &arg)) in dpooled.iter().zip(&sc.argmax).enumerate() {
                    // ReLU passes gradient only where the pooled activation is positive
                    if sc.pooled[i] > T::zero() {
                        let c = i / pooled_hw;
                        flat[c * hw + arg as usize] += g;
                    }
                }
            }
            let dweight = dact.dot(&sc.cols.t());
            let dbias = dact.sum_axis(ndarray::Axis(1));
            grads[2 * si] = dweight.into_raw_vec_and_offset().0;
            grads[2 * si + 1] = dbias.to_vec();
            if si > 0 {
                let dcols = stage.weight.t().dot(&dact);
                dpooled = col2im3x3(&dcols, stage.in_channels(), h, w);
            }
        }
        grads
    }

    pub fn params(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((
                format!("stage{i}.weight"),
                s.weight.shape().to_vec(),
                s.weight.as_slice().expect("contiguous"),
            ));
            out.push((format!("stage{i}.bias"), s.bias.shape().to_vec(), s.bias.as_slice().expect("contiguous")));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("stage{i}.weight"), s.weight.as_slice_mut().expect("contiguous")));
            out.push((format!("stage{i}.bias"), s.bias.as_slice_mut().expect("contiguous")));
        }
        out
    }
}
