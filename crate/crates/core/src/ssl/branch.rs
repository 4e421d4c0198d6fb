use ndarray::{Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::nn::{join, Backbone, BackboneCache, BackboneSpec, MlpCache, MlpHead};
use crate::nn::{Mode, Param, Parameterized, Scalar};

/// Shapes of the two-branch learner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SslArchitecture {
    pub backbone: BackboneSpec,
    pub mlp_hidden: usize,
    pub projection_size: usize,
}

/// Backbone followed by the projection MLP.
#[derive(Debug, Clone)]
pub struct Encoder<F> {
    pub backbone: Backbone<F>,
    pub projector: MlpHead<F>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<F> {
    backbone: BackboneCache<F>,
    projector: MlpCache<F>,
}

impl<F: Scalar> Encoder<F> {
    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<(Array2<F>, EncoderCache<F>)> {
        let (feat, backbone) = self.backbone.forward(x, mode)?;
        let (y, projector) = self.projector.forward(&feat, mode);
        Ok((y, EncoderCache { backbone, projector }))
    }

    pub fn backward(&mut self, cache: &EncoderCache<F>, dy: &Array2<F>) {
        let dfeat = self.projector.backward(&cache.projector, dy);
        self.backbone.backward(&cache.backbone, &dfeat);
    }
}

impl<F: Scalar> Parameterized<F> for Encoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.projector.visit(&join(prefix, "projector"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.projector.visit_mut(&join(prefix, "projector"), f);
    }
}

/// Gradient-trained branch: encoder plus predictor.
#[derive(Debug, Clone)]
pub struct OnlineBranch<F> {
    pub encoder: Encoder<F>,
    pub predictor: MlpHead<F>,
}

#[derive(Debug, Clone)]
pub(crate) struct OnlineCache<F> {
    encoder: EncoderCache<F>,
    predictor: MlpCache<F>,
}

impl<F: Scalar> OnlineBranch<F> {
    /// Returns the projection `Y` and the prediction `P`.
    pub(crate) fn forward(
        &mut self,
        x: &Array4<F>,
        mode: Mode,
    ) -> Result<(Array2<F>, Array2<F>, OnlineCache<F>)> {
        let (y, encoder) = self.encoder.forward(x, mode)?;
        let (p, predictor) = self.predictor.forward(&y, mode);
        Ok((y, p, OnlineCache { encoder, predictor }))
    }

    pub(crate) fn backward(&mut self, cache: &OnlineCache<F>, dp: &Array2<F>) {
        let dy = self.predictor.backward(&cache.predictor, dp);
        self.encoder.backward(&cache.encoder, &dy);
    }
}

impl<F: Scalar> Parameterized<F> for OnlineBranch<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.encoder.visit(prefix, f);
        self.predictor.visit(&join(prefix, "predictor"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.encoder.visit_mut(prefix, f);
        self.predictor.visit_mut(&join(prefix, "predictor"), f);
    }
}

/// Momentum branch. It exposes no backward pass; it changes only through
/// [`TargetBranch::ema_from`].
#[derive(Debug, Clone)]
pub struct TargetBranch<F> {
    encoder: Encoder<F>,
}

impl<F: Scalar> TargetBranch<F> {
    pub fn from_online(online: &OnlineBranch<F>) -> Self {
        TargetBranch {
            encoder: online.encoder.clone(),
        }
    }

    pub fn encoder(&self) -> &Encoder<F> {
        &self.encoder
    }

    /// Projection of `x` under batch statistics. Running estimates are not touched.
    pub fn project(&mut self, x: &Array4<F>) -> Result<Array2<F>> {
        Ok(self.encoder.forward(x, Mode::BatchStats)?.0)
    }

    /// `theta_target <- tau * theta_target + (1 - tau) * theta_online` over every
    /// named blob, normalization statistics included.
    pub fn ema_from(&mut self, online: &Encoder<F>, tau: f64) -> Result<()> {
        let mut mine = self.encoder.parameter_set("");
        mine.ema_assign(&online.parameter_set(""), F::lit(tau))?;
        self.encoder.load_parameter_set("", &mine)
    }
}

impl<F: Scalar> Parameterized<F> for TargetBranch<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.encoder.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.encoder.visit_mut(prefix, f);
    }
}

/// A batch of view pairs stacked as `(B, C, S, S)` tensors.
#[derive(Debug, Clone)]
pub struct ViewBatch<F> {
    pub v1: Array4<F>,
    pub v2: Array4<F>,
}

impl<F: Scalar> ViewBatch<F> {
    pub fn new(v1: Array4<F>, v2: Array4<F>) -> Result<Self> {
        if v1.dim() != v2.dim() {
            return Err(Error::DimensionMismatch(format!(
                "views have shapes {:?} and {:?}",
                v1.dim(),
                v2.dim()
            )));
        }
        Ok(ViewBatch { v1, v2 })
    }

    /// Stacks `(C, S, S)` images, applying `(x - mean) / std`.
    pub fn stack(pairs: &[(&Array3<f32>, &Array3<f32>)], mean: f64, std: f64) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::Degenerate("empty view batch".into()))?;
        let dim = first.0.dim();
        let norm = |v: f32| F::lit((v as f64 - mean) / std);
        let mut v1 = Array4::zeros((pairs.len(), dim.0, dim.1, dim.2));
        let mut v2 = Array4::zeros((pairs.len(), dim.0, dim.1, dim.2));
        for (i, (a, b)) in pairs.iter().enumerate() {
            if a.dim() != dim || b.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "view {i} has shapes {:?}/{:?}, expected {dim:?}",
                    a.dim(),
                    b.dim()
                )));
            }
            v1.index_axis_mut(Axis(0), i).assign(&a.mapv(norm));
            v2.index_axis_mut(Axis(0), i).assign(&b.mapv(norm));
        }
        Ok(ViewBatch { v1, v2 })
    }

    pub fn len(&self) -> usize {
        self.v1.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
