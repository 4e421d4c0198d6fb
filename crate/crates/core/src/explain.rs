//! Grad-CAM++ heatmaps over the last convolutional feature map, and colour overlays.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis, Ix2};

use crate::augment::resize_bilinear;
use crate::data::CxrClass;
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::nn::Mode;
use crate::pipeline::Classifier;

const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapStatus {
    /// Min-max normalized: minimum 0, maximum 1.
    Normalized,
    /// Positive but spatially flat; every value is 1.
    Uniform,
    /// No positive evidence (e.g. all gradients zero); every value is 0.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Array2<f32>,
    pub target_class: CxrClass,
    pub status: HeatmapStatus,
}

/// Rectified Grad-CAM++ map `(h, w)` from activations and gradients of shape `(K, h, w)`.
///
/// `alpha = g^2 / (2 g^2 + sum(A) g^3)` (zero where `g = 0`), channel weight
/// `w_k = sum(alpha * relu(g))`, map `relu(sum_k w_k A_k)`.
pub fn gradcampp_from_maps(activations: &Array3<f64>, gradients: &Array3<f64>) -> Result<Array2<f64>> {
    if activations.dim() != gradients.dim() {
        return Err(Error::DimensionMismatch(format!(
            "activations {:?} vs gradients {:?}",
            activations.dim(),
            gradients.dim()
        )));
    }
    let (_, h, w) = activations.dim();
    let mut cam = Array2::<f64>::zeros((h, w));
    for (a, g) in activations.outer_iter().zip(gradients.outer_iter()) {
        let sum_a = a.sum();
        let weight: f64 = g
            .iter()
            .map(|&g| {
                if g == 0.0 {
                    return 0.0;
                }
                let g2 = g * g;
                let alpha = g2 / (2.0 * g2 + sum_a * g2 * g + EPS);
                alpha * g.max(0.0)
            })
            .sum();
        cam.scaled_add(weight, &a);
    }
    cam.mapv_inplace(|v| v.max(0.0));
    Ok(cam)
}

/// Bilinear upsampling to `(height, width)` followed by per-image min-max normalization.
pub fn finish_heatmap(cam: &Array2<f64>, height: usize, width: usize, target_class: CxrClass) -> Heatmap {
    let small = cam.mapv(|v| v as f32).insert_axis(Axis(0));
    let values = resize_bilinear(&small, height, width).index_axis_move(Axis(0), 0);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let (values, status) = if !(max > 0.0) {
        (Array2::zeros((height, width)), HeatmapStatus::Degenerate)
    } else if max - min <= max * 1e-6 {
        (Array2::ones((height, width)), HeatmapStatus::Uniform)
    } else {
        (values.mapv(|v| ((v - min) / (max - min)).clamp(0.0, 1.0)), HeatmapStatus::Normalized)
    };
    Heatmap { values, target_class, status }
}

/// Heatmap for one standardized `(C, H, W)` input. The target defaults to the predicted class.
///
/// The class score is a linear head over globally averaged features, so its
/// gradient with respect to the feature map is `W[c, k] / (h w)` at every position.
pub fn gradcampp(model: &mut Classifier<f32>, input: &Array3<f32>, target: Option<CxrClass>) -> Result<Heatmap> {
    if !model.backbone.has_feature_maps() {
        return Err(Error::InvalidArgument("Grad-CAM++ needs a convolutional backbone".into()));
    }
    let (_, height, width) = input.dim();
    let x = input.clone().insert_axis(Axis(0));
    let (logits, cache) = model.forward(&x, Mode::Eval)?;
    let class = match target {
        Some(c) => c,
        None => CxrClass::from_index(argmax(logits.row(0))).ok_or_else(|| Error::Degenerate("classifier has no outputs".into()))?,
    };
    if class.index() >= model.num_classes() {
        return Err(Error::InvalidArgument(format!("class {class} outside the {}-way head", model.num_classes())));
    }
    let fmap = cache.backbone.feature_map().expect("conv backbone caches its feature map");
    let acts = fmap.index_axis(Axis(0), 0).mapv(|v| v as f64);
    let (k, h, w) = acts.dim();
    let head = model.head.weight.value.view().into_dimensionality::<Ix2>().expect("2-d head weight");
    let scale = 1.0 / (h * w) as f64;
    let grads = Array3::from_shape_fn((k, h, w), |(ch, _, _)| head[[class.index(), ch]] as f64 * scale);
    let cam = gradcampp_from_maps(&acts, &grads)?;
    Ok(finish_heatmap(&cam, height, width, class))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Colormap {
    /// Blue through cyan, yellow to red.
    #[default]
    Jet,
    /// Straight interpolation from blue to red.
    BlueRed,
}

impl Colormap {
    pub fn rgb(self, v: f32) -> [f32; 3] {
        let v = v.clamp(0.0, 1.0);
        match self {
            Colormap::Jet => {
                let ramp = |c: f32| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
                [ramp(3.0), ramp(2.0), ramp(1.0)]
            }
            Colormap::BlueRed => [v, 0.0, 1.0 - v],
        }
    }
}

impl FromStr for Colormap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jet" => Ok(Colormap::Jet),
            "bluered" | "blue-red" => Ok(Colormap::BlueRed),
            _ => Err(Error::InvalidArgument(format!("unknown colormap `{s}` (expected jet or bluered)"))),
        }
    }
}

impl fmt::Display for Colormap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Colormap::Jet => "jet",
            Colormap::BlueRed => "bluered",
        })
    }
}

pub const DEFAULT_ALPHA: f32 = 0.4;

/// `(1 - alpha) * gray + alpha * colormap(heat)` per pixel, as 8-bit RGB.
pub fn overlay(gray: &Array2<f32>, heatmap: &Heatmap, colormap: Colormap, alpha: f32) -> Result<RgbImage> {
    if gray.dim() != heatmap.values.dim() {
        return Err(Error::DimensionMismatch(format!(
            "image {:?} vs heatmap {:?}",
            gray.dim(),
            heatmap.values.dim()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("blend factor {alpha} outside [0, 1]")));
    }
    let (h, w) = gray.dim();
    let mut out = RgbImage::new(w as u32, h as u32);
    for ((i, j), &g) in gray.indexed_iter() {
        let c = colormap.rgb(heatmap.values[[i, j]]);
        let g = g.clamp(0.0, 1.0);
        let px = c.map(|c| (((1.0 - alpha) * g + alpha * c) * 255.0).round() as u8);
        out.put_pixel(j as u32, i as u32, Rgb(px));
    }
    Ok(out)
}

pub fn overlay_file_name(stem: &str, class: CxrClass) -> String {
    format!("{stem}_cam_{class}.png")
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BackboneSpec, Parameterized};
    use crate::pipeline::attach_classifier;
    use ndarray::array;

    #[test]
    fn heatmap_matches_input_size() {
        let spec = BackboneSpec::Conv { in_channels: 3, widths: vec![4, 8, 8] };
        let mut model = attach_classifier(&spec, None, 4, 2).unwrap();
        let x = Array3::from_shape_fn((3, 128, 128), |(_, i, j)| ((i * 3 + j * 5) % 13) as f32 / 13.0);
        let hm = gradcampp(&mut model, &x, None).unwrap();
        assert_eq!(hm.values.dim(), (128, 128));
        assert!(hm.values.iter().all(|v| (0.0..=1.0).contains(v)));
        if hm.status == HeatmapStatus::Normalized {
            let max = hm.values.iter().copied().fold(0.0, f32::max);
            let min = hm.values.iter().copied().fold(1.0, f32::min);
            assert_eq!((min, max), (0.0, 1.0));
        }
        assert_eq!(gradcampp(&mut model, &x, None).unwrap(), hm);
    }

    #[test]
    fn constant_maps_give_constant_heatmap() {
        let a = Array3::from_elem((3, 4, 4), 0.7);
        let g = Array3::from_elem((3, 4, 4), 0.2);
        let cam = gradcampp_from_maps(&a, &g).unwrap();
        let hm = finish_heatmap(&cam, 16, 16, CxrClass::Normal);
        assert_eq!(hm.status, HeatmapStatus::Uniform);
        assert!(hm.values.iter().all(|&v| v == hm.values[[0, 0]]));
    }

    #[test]
    fn two_by_two_peak_stays_in_its_quadrant() {
        // single channel, one active cell, uniform gradient 0.25:
        // alpha = 0.0625 / (0.125 + 1 * 0.015625) = 0.4444, weight = 4 * alpha * 0.25 = 0.4444
        let a = array![[[0.0, 0.0], [0.0, 1.0]]];
        let g = Array3::from_elem((1, 2, 2), 0.25);
        let cam = gradcampp_from_maps(&a, &g).unwrap();
        let want = 4.0 * (0.0625 / (0.125 + 0.015625 + EPS)) * 0.25;
        assert!((cam[[1, 1]] - want).abs() < 1e-12);
        assert_eq!(cam[[0, 0]], 0.0);
        let hm = finish_heatmap(&cam, 8, 8, CxrClass::Covid);
        let (peak, _) = hm
            .values
            .indexed_iter()
            .fold(((0, 0), f32::MIN), |best, (ij, &v)| if v > best.1 { (ij, v) } else { best });
        assert!(peak.0 >= 4 && peak.1 >= 4, "peak at {peak:?}");
        assert_eq!(hm.values[[7, 7]], 1.0);
        assert_eq!(hm.values[[0, 0]], 0.0);
    }

    #[test]
    fn zero_gradients_are_flagged() {
        let a = Array3::from_elem((2, 3, 3), 1.0);
        let cam = gradcampp_from_maps(&a, &Array3::zeros((2, 3, 3))).unwrap();
        let hm = finish_heatmap(&cam, 9, 9, CxrClass::Normal);
        assert_eq!(hm.status, HeatmapStatus::Degenerate);
        assert!(hm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn different_classes_highlight_different_evidence() {
        let spec = BackboneSpec::Conv { in_channels: 1, widths: vec![2] };
        let mut model = attach_classifier(&spec, None, 4, 0).unwrap();
        // identity-like conv: channel 0 copies the input, channel 1 its negation
        let mut blobs = model.parameter_set("");
        let mut w = ndarray::ArrayD::zeros(vec![2, 1, 3, 3]);
        w[[0, 0, 1, 1]] = 1.0;
        w[[1, 0, 1, 1]] = -1.0;
        blobs.insert("backbone.stage0.conv.weight", w);
        let mut head = ndarray::ArrayD::zeros(vec![4, 2]);
        head[[0, 0]] = 1.0;
        head[[1, 1]] = 1.0;
        blobs.insert("head.weight", head);
        model.load_parameter_set("", &blobs).unwrap();
        let x = Array3::from_shape_fn((1, 8, 8), |(_, i, j)| if i < 4 && j < 4 { 2.0 } else { -0.5 });
        let a = gradcampp(&mut model, &x, Some(CxrClass::Covid)).unwrap();
        let b = gradcampp(&mut model, &x, Some(CxrClass::LungOpacity)).unwrap();
        let l1: f32 = (&a.values - &b.values).iter().map(|v| v.abs()).sum();
        assert!(l1 > 0.0);
    }

    #[test]
    fn mlp_backbone_is_rejected() {
        let spec = BackboneSpec::Mlp { in_features: 16, widths: vec![4] };
        let mut model = attach_classifier(&spec, None, 4, 0).unwrap();
        assert!(gradcampp(&mut model, &Array3::zeros((1, 4, 4)), None).is_err());
    }

    #[test]
    fn overlay_colour_contract() {
        let gray = Array2::from_elem((2, 3), 0.5f32);
        let mk = |v: f32| Heatmap { values: Array2::from_elem((2, 3), v), target_class: CxrClass::Covid, status: HeatmapStatus::Uniform };
        let low = overlay(&gray, &mk(0.0), Colormap::Jet, DEFAULT_ALPHA).unwrap();
        let expect = |c: [f32; 3]| c.map(|c| ((0.6 * 0.5 + 0.4 * c) * 255.0f32).round() as u8);
        assert_eq!(low.get_pixel(0, 0).0, expect(Colormap::Jet.rgb(0.0)));
        assert_eq!(Colormap::Jet.rgb(0.0), [0.0, 0.0, 0.5]);
        let high = overlay(&gray, &mk(1.0), Colormap::Jet, DEFAULT_ALPHA).unwrap();
        assert!(high.pixels().all(|p| p.0 == expect([0.5, 0.0, 0.0])));
        assert_eq!(Colormap::Jet.rgb(0.5), [0.5, 1.0, 0.5]);
        assert_eq!(Colormap::BlueRed.rgb(0.5), [0.5, 0.0, 0.5]);
        assert!(overlay(&Array2::zeros((3, 3)), &mk(0.0), Colormap::Jet, 0.4).is_err());
        assert_eq!(overlay_file_name("p001", CxrClass::Covid), "p001_cam_COVID.png");
    }
}
