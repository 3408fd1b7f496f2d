//! Image decoding and composition-aware geometric transforms.
//!
//! Every function here is pure: randomness enters only through an explicit `Rng`.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Side length of the network input patches.
pub const PATCH_SIZE: usize = 224;

/// Rows and columns of the deterministic test-time patch grid.
pub const GRID_STEPS: usize = 5;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("patch {spec:?} exceeds source bounds {height}x{width}")]
    OutOfBounds {
        spec: PatchSpec,
        height: usize,
        width: usize,
    },
    #[error("patch size {size} does not fit a {height}x{width} source")]
    PatchTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("channel {channel}: standard deviation must be positive, got {std}")]
    NonPositiveStd { channel: usize, std: f64 },
    #[error("expected {expected} normalization channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
}

/// Multi-channel raster with values in [0, 1], stored channel-planar and row-major
/// within each plane: `data[(c * height + y) * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> ImageGrid<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self, TransformError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(TransformError::InvalidGrid(format!(
                "dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(TransformError::InvalidGrid(format!(
                "expected {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(TransformError::InvalidGrid(format!("value {v} outside [0, 1]")));
        }
        Ok(ImageGrid {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a grid from `f(channel, y, x)`; values are clamped into [0, 1].
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "grid dimensions must be positive");
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(clamp01(f(c, y, x)));
                }
            }
        }
        ImageGrid {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self::from_fn(height, width, channels, |_, _, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Elementwise scaling, clamped back into [0, 1].
    pub fn scaled(&self, factor: T) -> Self {
        ImageGrid {
            data: self.data.iter().map(|&v| clamp01(v * factor)).collect(),
            ..self.clone()
        }
    }
}

#[inline]
pub(crate) fn clamp01<T: Real>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Square crop rectangle in source pixel coordinates plus a horizontal flip flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip: bool,
}

impl PatchSpec {
    pub fn full(size: usize) -> Self {
        PatchSpec {
            top: 0,
            left: 0,
            size,
            flip: false,
        }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.size >= 1 && self.top + self.size <= height && self.left + self.size <= width
    }
}

/// Decodes a raster (PNG, JPEG, BMP) into RGB with 8-bit values mapped to [0, 1].
/// Grayscale is replicated to three channels; alpha is dropped.
pub fn decode_image<T: Real>(bytes: &[u8]) -> Result<ImageGrid<T>, TransformError> {
    let img = image::load_from_memory(bytes).map_err(|e| TransformError::Decode(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(TransformError::Decode("image has zero size".into()));
    }
    let scale = T::one() / T::of(255.0);
    let raw = rgb.as_raw();
    let mut data = vec![T::zero(); 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = T::of(px[c] as f64) * scale;
        }
    }
    // 255 * (1/255) is not exactly 1 in every precision
    for v in data.iter_mut() {
        *v = clamp01(*v);
    }
    Ok(ImageGrid {
        height: h,
        width: w,
        channels: 3,
        data,
    })
}

pub fn load_image<T: Real>(path: &Path) -> Result<ImageGrid<T>, TransformError> {
    let bytes = std::fs::read(path).map_err(|e| TransformError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode_image(&bytes)
}

/// Bilinear resampling to `out_h`×`out_w` with pixel-center alignment. Aspect ratio is
/// not preserved.
pub fn warp_resize<T: Real>(img: &ImageGrid<T>, out_h: usize, out_w: usize) -> ImageGrid<T> {
    assert!(out_h >= 1 && out_w >= 1, "output dimensions must be positive");
    if out_h == img.height && out_w == img.width {
        return img.clone();
    }
    let ys = axis_taps(img.height, out_h);
    let xs = axis_taps(img.width, out_w);
    let mut data = Vec::with_capacity(out_h * out_w * img.channels);
    for c in 0..img.channels {
        let plane = img.plane(c);
        for &(y0, y1, fy) in &ys {
            let fy = T::of(fy);
            let r0 = &plane[y0 * img.width..(y0 + 1) * img.width];
            let r1 = &plane[y1 * img.width..(y1 + 1) * img.width];
            for &(x0, x1, fx) in &xs {
                let fx = T::of(fx);
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bottom = r1[x0] + (r1[x1] - r1[x0]) * fx;
                data.push(clamp01(top + (bottom - top) * fy));
            }
        }
    }
    ImageGrid {
        height: out_h,
        width: out_w,
        channels: img.channels,
        data,
    }
}

/// Source taps `(lo, hi, frac)` for each output coordinate along one axis.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Rescales so the short side equals `target`, preserving aspect ratio.
pub fn resize_short_side<T: Real>(img: &ImageGrid<T>, target: usize) -> ImageGrid<T> {
    let (h, w) = short_side_dims(img.height, img.width, target);
    warp_resize(img, h, w)
}

/// Output dimensions of [`resize_short_side`].
pub fn short_side_dims(height: usize, width: usize, target: usize) -> (usize, usize) {
    let short = height.min(width) as f64;
    let scale = target as f64 / short;
    let h = ((height as f64 * scale).round() as usize).max(target);
    let w = ((width as f64 * scale).round() as usize).max(target);
    if height <= width {
        (target, w)
    } else {
        (h, target)
    }
}

/// Upscales sources whose short side is below `size`; larger sources pass through.
pub fn ensure_short_side<T: Real>(img: &ImageGrid<T>, size: usize) -> ImageGrid<T> {
    if img.height.min(img.width) < size {
        resize_short_side(img, size)
    } else {
        img.clone()
    }
}

/// Uniformly placed square patch within a `height`×`width` source (no flip).
pub fn random_patch_spec<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    size: usize,
    rng: &mut R,
) -> Result<PatchSpec, TransformError> {
    if size == 0 || size > height.min(width) {
        return Err(TransformError::PatchTooLarge { size, height, width });
    }
    Ok(PatchSpec {
        top: rng.random_range(0..=height - size),
        left: rng.random_range(0..=width - size),
        size,
        flip: false,
    })
}

/// Random `size`×`size` crop. Sources with a short side below `size` are first
/// warp-resized so the short side equals `size`; the returned spec refers to that
/// resized image (see [`ensure_short_side`]).
pub fn random_crop<T: Real, R: Rng + ?Sized>(
    img: &ImageGrid<T>,
    size: usize,
    rng: &mut R,
) -> Result<(ImageGrid<T>, PatchSpec), TransformError> {
    let src = ensure_short_side(img, size);
    let spec = random_patch_spec(src.height, src.width, size, rng)?;
    let patch = apply_patch(&src, &spec)?;
    Ok((patch, spec))
}

/// Exact copy of the spec rectangle, mirrored horizontally when `spec.flip`.
pub fn apply_patch<T: Real>(img: &ImageGrid<T>, spec: &PatchSpec) -> Result<ImageGrid<T>, TransformError> {
    if !spec.fits(img.height, img.width) {
        return Err(TransformError::OutOfBounds {
            spec: *spec,
            height: img.height,
            width: img.width,
        });
    }
    let s = spec.size;
    let mut data = Vec::with_capacity(s * s * img.channels);
    for c in 0..img.channels {
        let plane = img.plane(c);
        for y in spec.top..spec.top + s {
            let row = &plane[y * img.width + spec.left..y * img.width + spec.left + s];
            if spec.flip {
                data.extend(row.iter().rev());
            } else {
                data.extend_from_slice(row);
            }
        }
    }
    Ok(ImageGrid {
        height: s,
        width: s,
        channels: img.channels,
        data,
    })
}

pub fn hflip<T: Real>(img: &ImageGrid<T>) -> ImageGrid<T> {
    let mut data = img.data.clone();
    for row in data.chunks_exact_mut(img.width) {
        row.reverse();
    }
    ImageGrid { data, ..img.clone() }
}

/// The deterministic 50-patch test protocol: a 5×5 grid of evenly spaced offsets
/// (corners included) crossed with `flip ∈ {false, true}`.
///
/// Order is row-major over the grid, and for each rectangle the unflipped patch
/// precedes the flipped one.
pub fn grid_patches(height: usize, width: usize, size: usize) -> Result<Vec<PatchSpec>, TransformError> {
    if size == 0 || size > height.min(width) {
        return Err(TransformError::PatchTooLarge { size, height, width });
    }
    let offsets = |extent: usize| -> Vec<usize> {
        let span = (extent - size) as f64;
        (0..GRID_STEPS)
            .map(|k| (span * k as f64 / (GRID_STEPS - 1) as f64).round() as usize)
            .collect()
    };
    let tops = offsets(height);
    let lefts = offsets(width);
    let mut specs = Vec::with_capacity(GRID_STEPS * GRID_STEPS * 2);
    for &top in &tops {
        for &left in &lefts {
            for flip in [false, true] {
                specs.push(PatchSpec { top, left, size, flip });
            }
        }
    }
    Ok(specs)
}

/// `count` uniformly placed patches with random flips.
pub fn random_patches<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    size: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<PatchSpec>, TransformError> {
    (0..count)
        .map(|_| {
            let mut spec = random_patch_spec(height, width, size, rng)?;
            spec.flip = rng.random_bool(0.5);
            Ok(spec)
        })
        .collect()
}

/// `(value - mean[c]) / std[c]` per channel, returned as a `(channels, height, width)` tensor.
pub fn normalize<T: Real>(img: &ImageGrid<T>, mean: &[T], std: &[T]) -> Result<Array3<T>, TransformError> {
    if mean.len() != img.channels || std.len() != img.channels {
        return Err(TransformError::ChannelMismatch {
            expected: img.channels,
            got: mean.len().min(std.len()),
        });
    }
    if let Some((c, s)) = std.iter().enumerate().find(|(_, s)| !(**s > T::zero())) {
        return Err(TransformError::NonPositiveStd {
            channel: c,
            std: s.as_f64(),
        });
    }
    let n = img.height * img.width;
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / n;
            (v - mean[c]) / std[c]
        })
        .collect();
    Ok(Array3::from_shape_vec((img.channels, img.height, img.width), data).expect("shape matches"))
}
