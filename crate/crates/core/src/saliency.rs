//! Saliency maps: generation, storage and per-patch alignment.
//!
//! Maps from any external detector can be ingested as 8-bit grayscale files named
//! `<record-id>.png`. When none are available, [`generate`] produces one from the
//! spectral residual of the image blended with a centered Gaussian prior.

use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::transforms::{self, clamp01, ImageGrid, PatchSpec, PATCH_SIZE};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("spectral residual needs more than one pixel")]
    Degenerate,
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("blend weight must lie in [0, 1], got {0}")]
    BadWeight(f64),
    #[error("sigma fraction must be positive, got {0}")]
    BadSigma(f64),
    #[error("{path}: expected a single-channel saliency map, found {channels} channels")]
    ChannelCount { path: PathBuf, channels: u8 },
    #[error("{path}: expected 8-bit samples")]
    BitDepth { path: PathBuf },
    #[error("{path}: saliency map file not found")]
    Missing { path: PathBuf },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("patch {spec:?} maps outside the {map_h}x{map_w} saliency map")]
    OutOfBounds {
        spec: PatchSpec,
        map_h: usize,
        map_w: usize,
    },
    #[error(transparent)]
    Transform(#[from] transforms::TransformError),
}

/// Single-channel map with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap<T> {
    grid: ImageGrid<T>,
}

impl<T: Real> SaliencyMap<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self, SaliencyError> {
        Ok(SaliencyMap {
            grid: ImageGrid::new(height, width, 1, data)?,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        SaliencyMap {
            grid: ImageGrid::from_fn(height, width, 1, |_, y, x| f(y, x)),
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| T::zero())
    }

    /// Wraps a one-channel grid.
    pub fn from_grid(grid: ImageGrid<T>) -> Result<Self, SaliencyError> {
        if grid.channels() != 1 {
            return Err(SaliencyError::DimMismatch(grid.channels(), 0, 1, 0));
        }
        Ok(SaliencyMap { grid })
    }

    pub fn as_grid(&self) -> &ImageGrid<T> {
        &self.grid
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn data(&self) -> &[T] {
        self.grid.data()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.grid.get(0, y, x)
    }

    pub fn max_value(&self) -> T {
        self.data().iter().copied().fold(T::zero(), T::max)
    }

    /// Row-major index of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data().iter().enumerate() {
            if v > self.data()[best] {
                best = i;
            }
        }
        (best / self.width(), best % self.width())
    }

    pub fn cast<U: Real>(&self) -> SaliencyMap<U> {
        SaliencyMap::from_fn(self.height(), self.width(), |y, x| U::of(self.get(y, x).as_f64()))
    }
}

/// Constants of the spectral-residual saliency pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralResidualParams {
    /// Long side of the working resolution.
    pub working_size: usize,
    /// Side of the box filter applied to the log-amplitude spectrum.
    pub box_size: usize,
    /// Gaussian blur applied to the working-resolution map, in working pixels.
    pub blur_sigma: f64,
}

impl Default for SpectralResidualParams {
    fn default() -> Self {
        SpectralResidualParams {
            working_size: 64,
            box_size: 3,
            blur_sigma: 2.5,
        }
    }
}

/// Full generator configuration: spectral residual blended with a center prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencyParams {
    pub spectral: SpectralResidualParams,
    /// Weight of the center prior in [`combine`]; 0 disables it.
    pub center_prior_weight: f64,
    /// Gaussian width of the prior as a fraction of the short side.
    pub center_sigma_frac: f64,
    /// What the saliency column sees for each RGB patch.
    pub alignment: AlignMode,
}

impl Default for SaliencyParams {
    fn default() -> Self {
        SaliencyParams {
            spectral: SpectralResidualParams::default(),
            center_prior_weight: 0.2,
            center_sigma_frac: 0.3,
            alignment: AlignMode::Aligned,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Crop of the map covering the same normalized rectangle as the RGB patch.
    #[default]
    Aligned,
    /// The whole map, warped; only the flip of the patch is applied.
    WholeMap,
}

/// Spectral-residual saliency at the source resolution, min-max normalized.
///
/// A constant image has a flat spectrum and yields the all-zero map.
pub fn spectral_residual<T: Real>(
    img: &ImageGrid<T>,
    params: &SpectralResidualParams,
) -> Result<SaliencyMap<T>, SaliencyError> {
    let (h, w) = (img.height(), img.width());
    if h * w <= 1 {
        return Err(SaliencyError::Degenerate);
    }
    let luma = luminance(img);
    let (lo, hi) = min_max(&luma);
    if hi - lo <= 0.0 {
        return Ok(SaliencyMap::zeros(h, w));
    }

    let long = h.max(w) as f64;
    let wh = ((h as f64 * params.working_size as f64 / long).round() as usize).max(1);
    let ww = ((w as f64 * params.working_size as f64 / long).round() as usize).max(1);
    let luma_grid = ImageGrid::from_fn(h, w, 1, |_, y, x| luma[y * w + x]);
    let small = transforms::warp_resize(&luma_grid, wh, ww);

    let mut spectrum: Vec<Complex<f64>> = small.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::<f64>::new();
    fft2(&mut planner, &mut spectrum, wh, ww, false);

    let log_amp: Vec<f64> = spectrum.iter().map(|c| c.norm().max(1e-12).ln()).collect();
    let smooth = box_filter_wrap(&log_amp, wh, ww, params.box_size);
    for (i, c) in spectrum.iter_mut().enumerate() {
        let residual = log_amp[i] - smooth[i];
        *c = Complex::from_polar(residual.exp(), c.arg());
    }
    fft2(&mut planner, &mut spectrum, wh, ww, true);

    let energy: Vec<f64> = spectrum.iter().map(|c| c.norm_sqr()).collect();
    let blurred = gaussian_blur(&energy, wh, ww, params.blur_sigma);
    let working = min_max_normalize(&blurred);
    let working = ImageGrid::from_fn(wh, ww, 1, |_, y, x| working[y * ww + x]);
    let full = transforms::warp_resize(&working, h, w);
    let normalized = min_max_normalize(full.data());
    Ok(SaliencyMap::from_fn(h, w, |y, x| T::of(normalized[y * w + x])))
}

/// Isotropic Gaussian centred at ((h−1)/2, (w−1)/2) with σ = `sigma_frac`·min(h, w),
/// scaled so its largest value is 1.
pub fn center_prior<T: Real>(height: usize, width: usize, sigma_frac: f64) -> Result<SaliencyMap<T>, SaliencyError> {
    if !(sigma_frac > 0.0) || !sigma_frac.is_finite() {
        return Err(SaliencyError::BadSigma(sigma_frac));
    }
    let sigma = sigma_frac * height.min(width) as f64;
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let raw = |y: usize, x: usize| {
        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    // nearest pixel to the centre carries the peak
    let peak = raw(height / 2, width / 2).max(raw((height - 1) / 2, (width - 1) / 2));
    Ok(SaliencyMap::from_fn(height, width, |y, x| T::of(raw(y, x) / peak)))
}

/// Pixelwise `(1 − weight)·sal + weight·prior`.
///
/// A convex blend of two maps in [0, 1] already lies in [0, 1]; the result is clamped
/// rather than rescaled so that every pixel moves monotonically with `weight`.
pub fn combine<T: Real>(sal: &SaliencyMap<T>, prior: &SaliencyMap<T>, weight: f64) -> Result<SaliencyMap<T>, SaliencyError> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(SaliencyError::BadWeight(weight));
    }
    if sal.height() != prior.height() || sal.width() != prior.width() {
        return Err(SaliencyError::DimMismatch(
            sal.height(),
            sal.width(),
            prior.height(),
            prior.width(),
        ));
    }
    if weight == 1.0 {
        return Ok(prior.clone());
    }
    let w = T::of(weight);
    // s + w·(p − s) is monotone in w under rounding, unlike (1 − w)·s + w·p
    Ok(SaliencyMap::from_fn(sal.height(), sal.width(), |y, x| {
        let s = sal.get(y, x);
        clamp01(s + w * (prior.get(y, x) - s))
    }))
}

/// The default generator used when no precomputed map is available.
pub fn generate<T: Real>(img: &ImageGrid<T>, params: &SaliencyParams) -> Result<SaliencyMap<T>, SaliencyError> {
    let sal = spectral_residual(img, &params.spectral)?;
    if params.center_prior_weight == 0.0 {
        return Ok(sal);
    }
    let prior = center_prior(img.height(), img.width(), params.center_sigma_frac)?;
    combine(&sal, &prior, params.center_prior_weight)
}

/// Conventional location of a record's map.
pub fn map_path(saliency_root: &Path, id: &str) -> PathBuf {
    saliency_root.join(format!("{id}.png"))
}

/// Reads an 8-bit single-channel raster, mapping 0..255 onto [0, 1].
pub fn load_saliency<T: Real>(path: &Path) -> Result<SaliencyMap<T>, SaliencyError> {
    if !path.is_file() {
        return Err(SaliencyError::Missing {
            path: path.to_path_buf(),
        });
    }
    let img = image::open(path).map_err(|e| SaliencyError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let color = img.color();
    if color.channel_count() != 1 {
        return Err(SaliencyError::ChannelCount {
            path: path.to_path_buf(),
            channels: color.channel_count(),
        });
    }
    if color.bytes_per_pixel() != 1 {
        return Err(SaliencyError::BitDepth {
            path: path.to_path_buf(),
        });
    }
    let gray = img.into_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.as_raw().iter().map(|&v| T::of(v as f64 / 255.0)).collect();
    SaliencyMap::new(h, w, data)
}

/// Writes the map as 8-bit grayscale; the format follows the file extension.
pub fn save_saliency<T: Real>(map: &SaliencyMap<T>, path: &Path) -> Result<(), SaliencyError> {
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(map.width() as u32, map.height() as u32, bytes)
        .expect("buffer matches dimensions");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| SaliencyError::Image {
            path: parent.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    img.save(path).map_err(|e| SaliencyError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Saliency input of the network for one RGB patch: a 224×224 map.
///
/// `image_h`×`image_w` are the dimensions of the image the spec was drawn on; the spec
/// is mapped proportionally into map coordinates, so maps may have any resolution with
/// the same aspect as the image.
pub fn align_to_patch<T: Real>(
    map: &SaliencyMap<T>,
    spec: &PatchSpec,
    image_h: usize,
    image_w: usize,
    mode: AlignMode,
) -> Result<SaliencyMap<T>, SaliencyError> {
    let out = PATCH_SIZE;
    let region = match mode {
        AlignMode::WholeMap => map.grid.clone(),
        AlignMode::Aligned => {
            let (mh, mw) = (map.height(), map.width());
            let sy = mh as f64 / image_h as f64;
            let sx = mw as f64 / image_w as f64;
            let y0 = (spec.top as f64 * sy).round() as usize;
            let x0 = (spec.left as f64 * sx).round() as usize;
            let y1 = ((spec.top + spec.size) as f64 * sy).round().max((y0 + 1) as f64) as usize;
            let x1 = ((spec.left + spec.size) as f64 * sx).round().max((x0 + 1) as f64) as usize;
            if !spec.fits(image_h, image_w) || y1 > mh || x1 > mw {
                return Err(SaliencyError::OutOfBounds {
                    spec: *spec,
                    map_h: mh,
                    map_w: mw,
                });
            }
            ImageGrid::from_fn(y1 - y0, x1 - x0, 1, |_, y, x| map.get(y0 + y, x0 + x))
        }
    };
    let region = if spec.flip { transforms::hflip(&region) } else { region };
    Ok(SaliencyMap {
        grid: transforms::warp_resize(&region, out, out),
    })
}

fn luminance<T: Real>(img: &ImageGrid<T>) -> Vec<f64> {
    let n = img.height() * img.width();
    if img.channels() < 3 {
        return img.plane(0).iter().map(|v| v.as_f64()).collect();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..n)
        .map(|i| 0.299 * r[i].as_f64() + 0.587 * g[i].as_f64() + 0.114 * b[i].as_f64())
        .collect()
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = min_max(v);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| (x - lo) / range).collect()
}

fn fft2(planner: &mut FftPlanner<f64>, data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let row_fft = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
}

/// Mean over a `size`×`size` window with periodic boundaries (the spectrum is periodic).
fn box_filter_wrap(v: &[f64], h: usize, w: usize, size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let n = (size * size) as f64;
    let (hi, wi) = (h as isize, w as isize);
    let mut out = vec![0.0; v.len()];
    for y in 0..hi {
        for x in 0..wi {
            let mut acc = 0.0;
            for dy in -r..=r {
                let yy = (y + dy).rem_euclid(hi);
                for dx in -r..=r {
                    let xx = (x + dx).rem_euclid(wi);
                    acc += v[(yy * wi + xx) as usize];
                }
            }
            out[(y * wi + x) as usize] = acc / n;
        }
    }
    out
}

/// Separable Gaussian blur with edge replication.
fn gaussian_blur(v: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if !(sigma > 0.0) {
        return v.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();

    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for (k, d) in (-radius..=radius).enumerate() {
                    let (yy, xx) = if horizontal {
                        (y, (x + d).clamp(0, w as isize - 1))
                    } else {
                        ((y + d).clamp(0, h as isize - 1), x)
                    };
                    acc += kernel[k] * src[(yy * w as isize + xx) as usize];
                }
                dst[(y * w as isize + x) as usize] = acc;
            }
        }
        dst
    };
    let tmp = pass(v, true);
    pass(&tmp, false)
}
