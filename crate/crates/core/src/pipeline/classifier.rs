use ndarray::{Array2, Array4};

use super::checkpoint::{CheckpointEnvelope, Stage};
use crate::error::{Error, Result};
use crate::nn::{join, Backbone, BackboneCache, BackboneSpec, Linear, Mode, Param, ParameterSet, Parameterized, Scalar};
use crate::seed::{self, stream};

/// Backbone features followed by one linear layer producing class logits.
#[derive(Debug, Clone)]
pub struct Classifier<F> {
    pub backbone: Backbone<F>,
    pub head: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct ClassifierCache<F> {
    pub backbone: BackboneCache<F>,
    pub features: Array2<F>,
}

impl<F: Scalar> Classifier<F> {
    pub fn num_classes(&self) -> usize {
        self.head.outputs()
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<(Array2<F>, ClassifierCache<F>)> {
        let (features, backbone) = self.backbone.forward(x, mode)?;
        let logits = self.head.forward(&features);
        Ok((logits, ClassifierCache { backbone, features }))
    }

    pub fn backward(&mut self, cache: &ClassifierCache<F>, dlogits: &Array2<F>) {
        let dfeat = self.head.backward(&cache.features, dlogits);
        self.backbone.backward(&cache.backbone, &dfeat);
    }

    /// Rebuilds a classifier from `backbone.*` and `head.*` blobs.
    pub fn from_blobs(spec: &BackboneSpec, blobs: &ParameterSet<F>, num_classes: usize) -> Result<Self> {
        let mut c = Classifier::new(spec, num_classes, 0);
        c.load_parameter_set("", blobs)?;
        Ok(c)
    }

    fn new(spec: &BackboneSpec, num_classes: usize, seed: u64) -> Self {
        let backbone = Backbone::new(spec, &mut seed::rng(seed, &[stream::INIT_BACKBONE]));
        let head = Linear::new(backbone.feature_dim(), num_classes, &mut seed::rng(seed, &[stream::INIT_HEAD]));
        Classifier { backbone, head }
    }
}

impl<F: Scalar> Parameterized<F> for Classifier<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// A classifier whose backbone comes from `init` (or a seeded random draw when
/// `None`) and whose linear head is freshly initialized from `seed`.
///
/// Projector, predictor and target blobs in the checkpoint are ignored.
pub fn attach_classifier(
    spec: &BackboneSpec,
    init: Option<&CheckpointEnvelope>,
    num_classes: usize,
    seed: u64,
) -> Result<Classifier<f32>> {
    if num_classes == 0 {
        return Err(Error::InvalidArgument("a classifier needs at least one class".into()));
    }
    let mut c = Classifier::new(spec, num_classes, seed);
    if let Some(env) = init {
        if env.stage == Stage::Finetuned {
            return Err(Error::InvalidArgument(
                "a fine-tuned checkpoint cannot seed a new classifier; export its backbone first".into(),
            ));
        }
        c.backbone.load_parameter_set("backbone", &env.blobs)?;
    }
    Ok(c)
}

/// Mean softmax cross-entropy over the batch and its gradient with respect to the logits.
pub fn cross_entropy<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> Result<(f64, Array2<F>)> {
    let (n, k) = logits.dim();
    if n != labels.len() || n == 0 {
        return Err(Error::DimensionMismatch(format!("{n} logit rows for {} labels", labels.len())));
    }
    let mut grad = Array2::zeros((n, k));
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let y = labels[i];
        if y >= k {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {k} classes")));
        }
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + m - row[y].as_f64();
        for (j, e) in exps.iter().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            grad[[i, j]] = F::lit((e / z - target) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}
