//! Stochastic view generation: random resized crop, horizontal flip and Gaussian blur.
//!
//! Images are `(C, H, W)` arrays with values in `[0, 1]`. Every function here
//! is pure in its inputs and seed, so data-loading workers may call them concurrently.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Parameters of the view distribution. Both views are drawn from the same policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    /// Crop area as a fraction of the source image area.
    pub crop_scale_range: (f64, f64),
    pub flip_probability: f64,
    pub blur_probability: f64,
    pub blur_sigma_range: (f64, f64),
    pub view_size: usize,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            crop_scale_range: (0.2, 1.0),
            flip_probability: 0.5,
            blur_probability: 0.5,
            blur_sigma_range: (0.1, 2.0),
            view_size: 128,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        for (name, p) in [("flip", self.flip_probability), ("blur", self.blur_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("blur sigma range ({lo}, {hi}) must satisfy 0 < lo <= hi")));
        }
        if self.view_size == 0 {
            return Err(Error::Config("view size must be positive".into()));
        }
        Ok(())
    }
}

/// A crop window in source pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

/// One draw `t ~ T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformParams {
    pub scale: f64,
    pub crop: CropBox,
    pub flip: bool,
    pub blur_sigma: Option<f64>,
}

/// Two augmented renditions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub v1: Array3<f32>,
    pub v2: Array3<f32>,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws crop, flip and blur parameters for an `height x width` source.
///
/// The crop keeps the source aspect ratio, so scale 1 is the whole image.
pub fn sample_transform(policy: &AugmentationPolicy, height: usize, width: usize, rng: &mut impl Rng) -> TransformParams {
    let scale = uniform(rng, policy.crop_scale_range.0, policy.crop_scale_range.1);
    let side = scale.sqrt();
    let (ch, cw) = (side * height as f64, side * width as f64);
    let top = uniform(rng, 0.0, height as f64 - ch);
    let left = uniform(rng, 0.0, width as f64 - cw);
    let flip = rng.random_bool(policy.flip_probability);
    let blur = rng.random_bool(policy.blur_probability);
    let sigma = uniform(rng, policy.blur_sigma_range.0, policy.blur_sigma_range.1);
    TransformParams {
        scale,
        crop: CropBox { top, left, height: ch, width: cw },
        flip,
        blur_sigma: blur.then_some(sigma),
    }
}

fn check_image(image: &Array3<f32>, min_side: usize) -> Result<()> {
    let (c, h, w) = image.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Data(format!("not an image: shape {:?}", image.dim())));
    }
    if h < min_side || w < min_side {
        return Err(Error::Data(format!(
            "image {h}x{w} is smaller than the minimum croppable size {min_side}x{min_side}"
        )));
    }
    Ok(())
}

/// Applies a drawn transform and returns a `view_size x view_size` view.
pub fn apply_transform(image: &Array3<f32>, params: &TransformParams, view_size: usize) -> Array3<f32> {
    let mut view = crop_resize(image, &params.crop, view_size, view_size);
    if params.flip {
        view.invert_axis(Axis(2));
        view = view.as_standard_layout().into_owned();
    }
    if let Some(sigma) = params.blur_sigma {
        view = blur_unchecked(&view, sigma);
    }
    view.mapv_inplace(|v| v.clamp(0.0, 1.0));
    view
}

/// Two independent draws from the policy applied to the same image.
/// Deterministic in `(image, policy, seed)`.
pub fn make_view_pair(image: &Array3<f32>, policy: &AugmentationPolicy, seed: u64) -> Result<ViewPair> {
    policy.validate()?;
    check_image(image, policy.view_size)?;
    let (_, h, w) = image.dim();
    let mut r1 = seed::rng(seed, &[stream::VIEW_FIRST]);
    let mut r2 = seed::rng(seed, &[stream::VIEW_SECOND]);
    let t1 = sample_transform(policy, h, w, &mut r1);
    let t2 = sample_transform(policy, h, w, &mut r2);
    Ok(ViewPair {
        v1: apply_transform(image, &t1, policy.view_size),
        v2: apply_transform(image, &t2, policy.view_size),
    })
}

/// Bilinear resampling of the whole image.
pub fn resize_bilinear(image: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (_, h, w) = image.dim();
    let full = CropBox { top: 0.0, left: 0.0, height: h as f64, width: w as f64 };
    crop_resize(image, &full, out_h, out_w)
}

/// Samples `crop` on an `out_h x out_w` grid with half-pixel centers and edge clamping.
fn crop_resize(image: &Array3<f32>, crop: &CropBox, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let taps = |out: usize, start: f64, len: f64, limit: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|i| {
                let pos = start + (i as f64 + 0.5) * len / out as f64 - 0.5;
                let pos = pos.clamp(0.0, (limit - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(limit - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let rows = taps(out_h, crop.top, crop.height, h);
    let cols = taps(out_w, crop.left, crop.width, w);
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        let src = image.index_axis(Axis(0), ch);
        let mut dst = out.index_axis_mut(Axis(0), ch);
        for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
                let bottom = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
                dst[[i, j]] = top * (1.0 - fr) + bottom * fr;
            }
        }
    }
    out
}

/// Normalized 1-d Gaussian taps with radius `floor(4 sigma + 0.5)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5).floor() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with symmetric (half-sample) boundary reflection.
///
/// The kernel is normalized, so total intensity is preserved and pixel
/// variance cannot grow. Very small sigmas degenerate to the identity.
pub fn gaussian_blur(image: &Array3<f32>, sigma: f64) -> Result<Array3<f32>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("blur sigma must be positive, got {sigma}")));
    }
    Ok(blur_unchecked(image, sigma))
}

fn reflect(i: i64, n: usize) -> usize {
    let period = 2 * n as i64;
    let m = i.rem_euclid(period);
    if m >= n as i64 {
        (period - 1 - m) as usize
    } else {
        m as usize
    }
}

fn blur_unchecked(image: &Array3<f32>, sigma: f64) -> Array3<f32> {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return image.clone();
    }
    let radius = (kernel.len() / 2) as i64;
    let (c, h, w) = image.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let src = image.index_axis(Axis(0), ch);
        let mut rows = Array2::<f64>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                rows[[i, j]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, k)| k * src[[i, reflect(j as i64 + t as i64 - radius, w)]] as f64)
                    .sum();
            }
        }
        let mut dst = out.index_axis_mut(Axis(0), ch);
        for i in 0..h {
            for j in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, k)| k * rows[[reflect(i as i64 + t as i64 - radius, h), j]])
                    .sum();
                dst[[i, j]] = v as f32;
            }
        }
    }
    out
}
