use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Which pairs of normalized outputs are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// `L1 = d(P1, P2)`, `L2 = d(P2, Y'2)`: online prediction of view 1 against the
    /// online prediction of view 2, plus view 2's prediction against its target projection.
    #[default]
    Paper,
    /// `L1 = d(P1, Y'2)`, `L2 = d(P2, Y'1)`: each online prediction against the target
    /// projection of the other view.
    ByolSymmetric,
}

/// Loss of one batch; `total = l1 + l2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub l1: f64,
    pub l2: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `v` to unit Euclidean length.
pub fn l2_normalize<F: Scalar>(v: &[F]) -> Result<Vec<F>> {
    let v64: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
    let n = norm(&v64);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot normalize a vector with norm {n}"
        )));
    }
    Ok(v64.iter().map(|x| F::lit(x / n)).collect())
}

/// `2 - 2 cos(a, b)`, equal to the squared distance between the normalized vectors.
pub fn alignment_loss<F: Scalar>(a: &[F], b: &[F]) -> Result<f64> {
    pair_terms(a, b).map(|t| t.loss)
}

struct PairTerms {
    loss: f64,
    /// d loss / d a
    da: Vec<f64>,
    /// d loss / d b
    db: Vec<f64>,
}

fn pair_terms<F: Scalar>(a: &[F], b: &[F]) -> Result<PairTerms> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "alignment of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let a: Vec<f64> = a.iter().map(|x| x.as_f64()).collect();
    let b: Vec<f64> = b.iter().map(|x| x.as_f64()).collect();
    let (na, nb) = (norm(&a), norm(&b));
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Degenerate("alignment of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    // d cos / d a = b / (|a||b|) - cos * a / |a|^2
    let da = a
        .iter()
        .zip(&b)
        .map(|(x, y)| -2.0 * (y / (na * nb) - cos * x / (na * na)))
        .collect();
    let db = a
        .iter()
        .zip(&b)
        .map(|(x, y)| -2.0 * (x / (na * nb) - cos * y / (nb * nb)))
        .collect();
    Ok(PairTerms {
        loss: 2.0 - 2.0 * cos,
        da,
        db,
    })
}

fn check_same_shape<F>(arrays: &[(&str, &Array2<F>)]) -> Result<()> {
    let (first_name, first) = arrays[0];
    for &(name, a) in &arrays[1..] {
        if a.dim() != first.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{first_name} is {:?} but {name} is {:?}",
                first.dim(),
                a.dim()
            )));
        }
    }
    if first.nrows() == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    Ok(())
}

/// Batch-mean alignment between rows of `a` and rows of `b`, with gradients when requested.
fn batch_alignment<F: Scalar>(
    a: &Array2<F>,
    b: &Array2<F>,
    mut da: Option<&mut Array2<F>>,
    mut db: Option<&mut Array2<F>>,
) -> Result<f64> {
    let batch = a.nrows() as f64;
    let mut total = 0.0;
    for (i, (ra, rb)) in a.rows().into_iter().zip(b.rows()).enumerate() {
        let ra = ra.to_vec();
        let rb = rb.to_vec();
        let t = pair_terms(&ra, &rb)?;
        total += t.loss;
        if let Some(da) = da.as_deref_mut() {
            for (o, g) in da.row_mut(i).iter_mut().zip(&t.da) {
                *o += F::lit(g / batch);
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for (o, g) in db.row_mut(i).iter_mut().zip(&t.db) {
                *o += F::lit(g / batch);
            }
        }
    }
    Ok(total / batch)
}

/// `L = L1 + L2` with `L1 = mean d(P1, P2)` and `L2 = mean d(P2, Y'2)`.
pub fn ssl_loss<F: Scalar>(p1: &Array2<F>, p2: &Array2<F>, y2_target: &Array2<F>) -> Result<LossValue> {
    check_same_shape(&[("P1", p1), ("P2", p2), ("Y'2", y2_target)])?;
    let l1 = batch_alignment(p1, p2, None, None)?;
    let l2 = batch_alignment(p2, y2_target, None, None)?;
    Ok(LossValue {
        total: l1 + l2,
        l1,
        l2,
    })
}

/// Loss plus its gradients with respect to the two online predictions.
#[derive(Debug, Clone)]
pub struct LossGradients<F> {
    pub value: LossValue,
    pub d_p1: Array2<F>,
    pub d_p2: Array2<F>,
}

/// Target projections enter as constants: no gradient is formed for them.
pub fn loss_with_gradients<F: Scalar>(
    variant: LossVariant,
    p1: &Array2<F>,
    p2: &Array2<F>,
    y1_target: Option<&Array2<F>>,
    y2_target: &Array2<F>,
) -> Result<LossGradients<F>> {
    check_same_shape(&[("P1", p1), ("P2", p2), ("Y'2", y2_target)])?;
    let mut d_p1 = Array2::zeros(p1.dim());
    let mut d_p2 = Array2::zeros(p2.dim());
    let (l1, l2) = match variant {
        LossVariant::Paper => {
            let l1 = batch_alignment(p1, p2, Some(&mut d_p1), Some(&mut d_p2))?;
            let l2 = batch_alignment(p2, y2_target, Some(&mut d_p2), None)?;
            (l1, l2)
        }
        LossVariant::ByolSymmetric => {
            let y1 = y1_target.ok_or_else(|| {
                Error::InvalidArgument("symmetric loss needs the target projection of view 1".into())
            })?;
            check_same_shape(&[("P1", p1), ("Y'1", y1)])?;
            let l1 = batch_alignment(p1, y2_target, Some(&mut d_p1), None)?;
            let l2 = batch_alignment(p2, y1, Some(&mut d_p2), None)?;
            (l1, l2)
        }
    };
    Ok(LossGradients {
        value: LossValue {
            total: l1 + l2,
            l1,
            l2,
        },
        d_p1,
        d_p2,
    })
}
