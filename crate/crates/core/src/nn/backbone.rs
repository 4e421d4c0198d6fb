use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Array4};
use rand::Rng;

use super::conv::{global_avg_pool, global_avg_pool_backward};
use super::{join, relu, relu_backward, BatchNorm, BatchNormCache, Conv2d, ConvCache, Linear};
use super::{Mode, Param, Parameterized, Scalar};
use crate::error::{Error, Result};

/// Architecture of the feature extractor in front of the projector or classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackboneSpec {
    /// Stride-2 3x3 conv + batch-norm + ReLU stages, then global average pooling.
    Conv { in_channels: usize, widths: Vec<usize> },
    /// Flattened input followed by linear + ReLU layers.
    Mlp { in_features: usize, widths: Vec<usize> },
}

/// Architecture family and widths as written in config files, e.g. `conv:16,32,64`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneLayout {
    pub family: BackboneFamily,
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneFamily {
    Conv,
    Mlp,
}

impl FromStr for BackboneLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("backbone `{s}`: expected `conv:<w,..>` or `mlp:<w,..>`"));
        let (family, widths) = s.split_once(':').ok_or_else(bad)?;
        let family = match family.trim() {
            "conv" => BackboneFamily::Conv,
            "mlp" => BackboneFamily::Mlp,
            _ => return Err(bad()),
        };
        let widths = widths
            .split(',')
            .map(|w| w.trim().parse::<usize>().ok().filter(|&w| w > 0))
            .collect::<Option<Vec<_>>>()
            .filter(|w| !w.is_empty())
            .ok_or_else(bad)?;
        Ok(BackboneLayout { family, widths })
    }
}

impl fmt::Display for BackboneLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let family = match self.family {
            BackboneFamily::Conv => "conv",
            BackboneFamily::Mlp => "mlp",
        };
        let widths: Vec<String> = self.widths.iter().map(ToString::to_string).collect();
        write!(f, "{family}:{}", widths.join(","))
    }
}

impl BackboneLayout {
    /// Resolves the layout against a concrete input geometry.
    pub fn spec(&self, channels: usize, size: usize) -> BackboneSpec {
        match self.family {
            BackboneFamily::Conv => BackboneSpec::Conv {
                in_channels: channels,
                widths: self.widths.clone(),
            },
            BackboneFamily::Mlp => BackboneSpec::Mlp {
                in_features: channels * size * size,
                widths: self.widths.clone(),
            },
        }
    }
}

impl BackboneSpec {
    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneSpec::Conv { widths, .. } | BackboneSpec::Mlp { widths, .. } => {
                *widths.last().expect("non-empty widths")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvStage<F> {
    pub conv: Conv2d<F>,
    pub bn: BatchNorm<F>,
}

#[derive(Debug, Clone)]
pub enum Backbone<F> {
    Conv(Vec<ConvStage<F>>),
    Mlp(Vec<Linear<F>>),
}

#[derive(Debug, Clone)]
pub struct StageCache<F> {
    conv: ConvCache<F>,
    bn: BatchNormCache<F>,
    out: Array4<F>,
}

#[derive(Debug, Clone)]
pub enum BackboneCache<F> {
    Conv(Vec<StageCache<F>>),
    Mlp { inputs: Vec<Array2<F>>, outputs: Vec<Array2<F>> },
}

impl<F: Scalar> BackboneCache<F> {
    /// Output of the last convolutional stage, `(N, C, h, w)`.
    pub fn feature_map(&self) -> Option<&Array4<F>> {
        match self {
            BackboneCache::Conv(stages) => stages.last().map(|s| &s.out),
            BackboneCache::Mlp { .. } => None,
        }
    }
}

impl<F: Scalar> Backbone<F> {
    pub fn new(spec: &BackboneSpec, rng: &mut impl Rng) -> Self {
        match spec {
            BackboneSpec::Conv { in_channels, widths } => {
                let mut prev = *in_channels;
                let stages = widths
                    .iter()
                    .map(|&w| {
                        let stage = ConvStage {
                            conv: Conv2d::new(prev, w, 3, 2, 1, rng),
                            bn: BatchNorm::new(w),
                        };
                        prev = w;
                        stage
                    })
                    .collect();
                Backbone::Conv(stages)
            }
            BackboneSpec::Mlp { in_features, widths } => {
                let mut prev = *in_features;
                let layers = widths
                    .iter()
                    .map(|&w| {
                        let l = Linear::new(prev, w, rng);
                        prev = w;
                        l
                    })
                    .collect();
                Backbone::Mlp(layers)
            }
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::Conv(stages) => stages.last().map_or(0, |s| s.conv.out_channels()),
            Backbone::Mlp(layers) => layers.last().map_or(0, Linear::outputs),
        }
    }

    pub fn has_feature_maps(&self) -> bool {
        matches!(self, Backbone::Conv(_))
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        match self {
            Backbone::Conv(stages) => {
                let want = stages[0].conv.in_channels();
                if c != want {
                    return Err(Error::DimensionMismatch(format!(
                        "backbone expects {want} input channels, got {c}"
                    )));
                }
            }
            Backbone::Mlp(layers) => {
                let want = layers[0].inputs();
                if c * h * w != want {
                    return Err(Error::DimensionMismatch(format!(
                        "backbone expects {want} input features, got {}",
                        c * h * w
                    )));
                }
            }
        }
        Ok(())
    }

    /// Feature vectors `(N, feature_dim)`.
    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<(Array2<F>, BackboneCache<F>)> {
        self.check_input(x)?;
        match self {
            Backbone::Conv(stages) => {
                let mut caches = Vec::with_capacity(stages.len());
                let mut h = x.clone();
                for stage in stages.iter_mut() {
                    let (z, conv) = stage.conv.forward(&h);
                    let (n, c, hh, ww) = z.dim();
                    let z3: Array3<F> = z.into_shape_with_order((n, c, hh * ww)).expect("contiguous");
                    let (b, bn) = stage.bn.forward(&z3, mode);
                    let out = relu(&b.into_shape_with_order((n, c, hh, ww)).expect("contiguous"));
                    h = out.clone();
                    caches.push(StageCache { conv, bn, out });
                }
                Ok((global_avg_pool(&h), BackboneCache::Conv(caches)))
            }
            Backbone::Mlp(layers) => {
                let n = x.dim().0;
                let mut h = x
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n, x.len() / n.max(1)))
                    .expect("contiguous");
                let mut inputs = Vec::with_capacity(layers.len());
                let mut outputs = Vec::with_capacity(layers.len());
                for layer in layers.iter() {
                    let out = relu(&layer.forward(&h));
                    inputs.push(std::mem::replace(&mut h, out.clone()));
                    outputs.push(out);
                }
                Ok((h, BackboneCache::Mlp { inputs, outputs }))
            }
        }
    }

    /// Accumulates parameter gradients from the feature gradient. Input gradients are not formed.
    pub fn backward(&mut self, cache: &BackboneCache<F>, dfeat: &Array2<F>) {
        match (self, cache) {
            (Backbone::Conv(stages), BackboneCache::Conv(caches)) => {
                let last = caches.last().expect("at least one stage");
                let mut d = global_avg_pool_backward(dfeat, last.out.dim());
                for (i, (stage, c)) in stages.iter_mut().zip(caches).enumerate().rev() {
                    d = relu_backward(&c.out, &d);
                    let (n, ch, hh, ww) = d.dim();
                    let d3 = d.into_shape_with_order((n, ch, hh * ww)).expect("contiguous");
                    let dz = stage.bn.backward(&c.bn, &d3);
                    let dz = dz.into_shape_with_order((n, ch, hh, ww)).expect("contiguous");
                    match stage.conv.backward(&c.conv, &dz, i > 0) {
                        Some(dx) => d = dx,
                        None => break,
                    }
                }
            }
            (Backbone::Mlp(layers), BackboneCache::Mlp { inputs, outputs }) => {
                let mut d = dfeat.clone();
                for ((layer, x), out) in layers.iter_mut().zip(inputs).zip(outputs).rev() {
                    d = relu_backward(out, &d);
                    d = layer.backward(x, &d);
                }
            }
            _ => panic!("backbone cache does not match architecture"),
        }
    }
}

impl<F: Scalar> Parameterized<F> for Backbone<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        match self {
            Backbone::Conv(stages) => {
                for (i, s) in stages.iter().enumerate() {
                    let p = join(prefix, &format!("stage{i}"));
                    s.conv.visit(&join(&p, "conv"), f);
                    s.bn.visit(&join(&p, "bn"), f);
                }
            }
            Backbone::Mlp(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    l.visit(&join(prefix, &format!("layer{i}")), f);
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        match self {
            Backbone::Conv(stages) => {
                for (i, s) in stages.iter_mut().enumerate() {
                    let p = join(prefix, &format!("stage{i}"));
                    s.conv.visit_mut(&join(&p, "conv"), f);
                    s.bn.visit_mut(&join(&p, "bn"), f);
                }
            }
            Backbone::Mlp(layers) => {
                for (i, l) in layers.iter_mut().enumerate() {
                    l.visit_mut(&join(prefix, &format!("layer{i}")), f);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_parses_and_prints() {
        let l: BackboneLayout = "conv:8, 16,32".parse().unwrap();
        assert_eq!(l.family, BackboneFamily::Conv);
        assert_eq!(l.widths, vec![8, 16, 32]);
        assert_eq!(l.to_string(), "conv:8,16,32");
        assert!("resnet:3".parse::<BackboneLayout>().is_err());
        assert!("conv:".parse::<BackboneLayout>().is_err());
        assert!("mlp:0".parse::<BackboneLayout>().is_err());
    }

    #[test]
    fn conv_backbone_shapes_and_feature_map() {
        let spec = BackboneSpec::Conv { in_channels: 1, widths: vec![4, 6] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bb = Backbone::<f32>::new(&spec, &mut rng);
        let x = Array4::from_shape_fn((3, 1, 16, 16), |(n, _, i, j)| ((n + i * j) % 5) as f32);
        let (feat, cache) = bb.forward(&x, Mode::Train).unwrap();
        assert_eq!(feat.dim(), (3, 6));
        assert_eq!(cache.feature_map().unwrap().dim(), (3, 6, 4, 4));
        let wrong = Array4::<f32>::zeros((1, 3, 16, 16));
        assert!(bb.forward(&wrong, Mode::Eval).is_err());
    }

    #[test]
    fn conv_backbone_gradient_matches_finite_differences() {
        let spec = BackboneSpec::Conv { in_channels: 2, widths: vec![3, 4] };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bb = Backbone::<f64>::new(&spec, &mut rng);
        let x = Array4::from_shape_fn((3, 2, 8, 8), |(n, c, i, j)| {
            ((n * 31 + c * 17 + i * 7 + j * 3) as f64 * 0.13).sin()
        });
        let r = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 4 + j) as f64 * 0.7).cos());
        let objective = |bb: &mut Backbone<f64>| (bb.forward(&x, Mode::BatchStats).unwrap().0 * &r).sum();
        let (_, cache) = bb.forward(&x, Mode::BatchStats).unwrap();
        bb.backward(&cache, &r);
        let analytic = bb.gradient_set("");
        let values = bb.parameter_set("");
        let h = 1e-5;
        for (name, grad) in analytic.iter() {
            for flat in [0, grad.len() / 2, grad.len() - 1] {
                let mut set = values.clone();
                let mut plus = bb.clone();
                set.remove(name);
                let mut v = values.get(name).unwrap().clone();
                v.as_slice_mut().unwrap()[flat] += h;
                set.insert(name.clone(), v.clone());
                plus.load_parameter_set("", &set).unwrap();
                let mut minus = bb.clone();
                v.as_slice_mut().unwrap()[flat] -= 2.0 * h;
                set.insert(name.clone(), v);
                minus.load_parameter_set("", &set).unwrap();
                let fd = (objective(&mut plus) - objective(&mut minus)) / (2.0 * h);
                let a = grad.as_slice().unwrap()[flat];
                assert!(
                    (fd - a).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "{name}[{flat}]: analytic {a} vs numeric {fd}"
                );
            }
        }
    }
}
