//! The two-branch self-supervised learner.
//!
//! The online branch (encoder `E1` + predictor `G1`) is trained by gradient
//! descent; the target encoder `E2` follows it by exponential moving average
//! and never receives gradients. For a view pair `(V1, V2)`:
//!
//! ```text
//! Y1 = E1(V1)   Y2 = E1(V2)   Y'2 = E2(V2)   P1 = G1(Y1)   P2 = G1(Y2)
//! L  = |P1^ - P2^|^2 + |P2^ - Y'2^|^2
//! ```

mod branch;
mod loss;

use ndarray::Array2;

pub use branch::{Encoder, EncoderCache, OnlineBranch, SslArchitecture, TargetBranch, ViewBatch};
pub use loss::{alignment_loss, l2_normalize, loss_with_gradients, ssl_loss, LossGradients, LossValue, LossVariant};

use crate::error::{Error, Result};
use crate::nn::optim::Sgd;
use crate::nn::{Backbone, MlpHead, Mode, ParamRole, ParameterSet, Parameterized, Scalar};
use crate::seed::{self, stream};

/// Outputs of one forward pass over a view batch.
pub struct ForwardViews<F> {
    pub y1: Array2<F>,
    pub y2: Array2<F>,
    pub p1: Array2<F>,
    pub p2: Array2<F>,
    /// Target projection of view 2; a constant for differentiation.
    pub y2_target: Array2<F>,
    /// Target projection of view 1, only formed for [`LossVariant::ByolSymmetric`].
    pub y1_target: Option<Array2<F>>,
    cache1: branch::OnlineCache<F>,
    cache2: branch::OnlineCache<F>,
}

/// Runs both views through the online branch and the target encoder.
///
/// `mode` applies to the online branch; the target always normalizes with
/// batch statistics and leaves its running estimates alone.
pub fn forward_views<F: Scalar>(
    online: &mut OnlineBranch<F>,
    target: &mut TargetBranch<F>,
    batch: &ViewBatch<F>,
    variant: LossVariant,
    mode: Mode,
) -> Result<ForwardViews<F>> {
    if batch.v1.dim() != batch.v2.dim() {
        return Err(Error::DimensionMismatch("view tensors differ in shape".into()));
    }
    let (y1, p1, cache1) = online.forward(&batch.v1, mode)?;
    let (y2, p2, cache2) = online.forward(&batch.v2, mode)?;
    let y2_target = target.project(&batch.v2)?;
    let y1_target = match variant {
        LossVariant::Paper => None,
        LossVariant::ByolSymmetric => Some(target.project(&batch.v1)?),
    };
    Ok(ForwardViews {
        y1,
        y2,
        p1,
        p2,
        y2_target,
        y1_target,
        cache1,
        cache2,
    })
}

/// Computes the loss and accumulates `dL/d theta_online` into the online branch.
///
/// Existing online gradients are cleared first. The target branch is only read.
pub fn accumulate_gradients<F: Scalar>(
    online: &mut OnlineBranch<F>,
    target: &mut TargetBranch<F>,
    batch: &ViewBatch<F>,
    variant: LossVariant,
    mode: Mode,
) -> Result<LossValue> {
    online.zero_grad();
    let fwd = forward_views(online, target, batch, variant, mode)?;
    let grads = loss_with_gradients(
        variant,
        &fwd.p1,
        &fwd.p2,
        fwd.y1_target.as_ref(),
        &fwd.y2_target,
    )?;
    if !grads.value.total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {}", grads.value.total)));
    }
    online.backward(&fwd.cache1, &grads.d_p1);
    online.backward(&fwd.cache2, &grads.d_p2);
    Ok(grads.value)
}

/// Knobs of one self-supervised update besides the optimizer's own.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslSettings {
    pub tau: f64,
    pub variant: LossVariant,
}

/// One update: gradient step on the online branch, then EMA of the target
/// encoder towards the updated online encoder. Returns the pre-update loss.
///
/// On a non-finite loss or gradient nothing is modified.
pub fn ssl_step<F: Scalar>(
    online: &mut OnlineBranch<F>,
    target: &mut TargetBranch<F>,
    batch: &ViewBatch<F>,
    optimizer: &mut Sgd<F>,
    settings: &SslSettings,
) -> Result<LossValue> {
    if !(0.0..=1.0).contains(&settings.tau) {
        return Err(Error::InvalidArgument(format!(
            "moving-average degree must lie in [0, 1], got {}",
            settings.tau
        )));
    }
    let stats = running_stats(online);
    let outcome = accumulate_gradients(online, target, batch, settings.variant, Mode::Train)
        .and_then(|loss| first_non_finite_grad(online).map_or(Ok(loss), |name| {
            Err(Error::NonFinite(format!("gradient of `{name}`")))
        }));
    let loss = match outcome {
        Ok(loss) => loss,
        Err(e) => {
            online.load_parameter_set("", &merge_stats(online, &stats))?;
            return Err(e);
        }
    };
    optimizer.step(online, "");
    target.ema_from(&online.encoder, settings.tau)?;
    Ok(loss)
}

fn running_stats<F: Scalar>(m: &impl Parameterized<F>) -> ParameterSet<F> {
    let mut set = ParameterSet::new();
    m.visit("", &mut |name, p| {
        if p.role == ParamRole::RunningStat {
            set.insert(name, p.value.clone());
        }
    });
    set
}

fn merge_stats<F: Scalar>(m: &impl Parameterized<F>, stats: &ParameterSet<F>) -> ParameterSet<F> {
    let mut all = m.parameter_set("");
    for (k, v) in stats.iter() {
        all.insert(k.clone(), v.clone());
    }
    all
}

fn first_non_finite_grad<F: Scalar>(m: &impl Parameterized<F>) -> Option<String> {
    let mut bad = None;
    m.visit("", &mut |name, p| {
        if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
            bad = Some(name);
        }
    });
    bad
}

/// `tau * target + (1 - tau) * online` per element.
pub fn ema_update<F: Scalar>(
    target: &ParameterSet<F>,
    online: &ParameterSet<F>,
    tau: f64,
) -> Result<ParameterSet<F>> {
    let mut out = target.clone();
    out.ema_assign(online, F::lit(tau))?;
    Ok(out)
}

/// Where the online backbone's starting weights come from.
pub enum BackboneInit<'a, F> {
    /// Seeded random initialization (from-scratch and SSL-only variants).
    Random,
    /// Blobs named `backbone.*`, e.g. an externally supplied transfer checkpoint.
    Pretrained(&'a ParameterSet<F>),
}

/// Builds both branches. Projector and predictor are always fresh; the target
/// encoder starts as an exact copy of the online encoder.
pub fn init_branches<F: Scalar>(
    arch: &SslArchitecture,
    init: BackboneInit<'_, F>,
    seed: u64,
) -> Result<(OnlineBranch<F>, TargetBranch<F>)> {
    let mut backbone = Backbone::new(&arch.backbone, &mut seed::rng(seed, &[stream::INIT_BACKBONE]));
    if let BackboneInit::Pretrained(weights) = init {
        backbone.load_parameter_set("backbone", weights)?;
    }
    let feat = backbone.feature_dim();
    let projector = MlpHead::new(
        feat,
        arch.mlp_hidden,
        arch.projection_size,
        &mut seed::rng(seed, &[stream::INIT_PROJECTOR]),
    );
    let predictor = MlpHead::new(
        arch.projection_size,
        arch.mlp_hidden,
        arch.projection_size,
        &mut seed::rng(seed, &[stream::INIT_PREDICTOR]),
    );
    let online = OnlineBranch {
        encoder: Encoder {
            backbone,
            projector,
        },
        predictor,
    };
    let target = TargetBranch::from_online(&online);
    Ok((online, target))
}

#[cfg(test)]
mod tests;
