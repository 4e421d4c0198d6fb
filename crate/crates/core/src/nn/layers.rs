use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Dimension, Ix1, Ix2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{join, Mode, Param, ParamRole, Parameterized, Scalar};

/// Fully connected layer, `y = x W^T + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = ArrayD::from_shape_simple_fn(vec![outputs, inputs], || F::lit(dist.sample(rng)));
        let b = ArrayD::from_shape_simple_fn(vec![outputs], || F::lit(dist.sample(rng)));
        Linear {
            weight: Param::new(w, ParamRole::Weight),
            bias: Param::new(b, ParamRole::Bias),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, F> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("1-d bias");
        x.dot(&self.w().t()) + &b
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        let dx = dy.dot(&self.w());
        let dw = dy.t().dot(x);
        let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
        gw += &dw;
        let mut gb = self.bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
        gb += &dy.sum_axis(Axis(0));
        dx
    }
}

impl<F: Scalar> Parameterized<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Batch normalization over a `(batch, channels, positions)` layout.
///
/// Dense features use `positions = 1`; feature maps use `positions = H * W`.
#[derive(Debug, Clone)]
pub struct BatchNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    pub eps: F,
    pub momentum: F,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<F> {
    xhat: Array3<F>,
    inv_std: Array1<F>,
    batch_stats: bool,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::filled(&[channels], F::one(), ParamRole::NormScale),
            beta: Param::filled(&[channels], F::zero(), ParamRole::NormShift),
            running_mean: Param::filled(&[channels], F::zero(), ParamRole::RunningStat),
            running_var: Param::filled(&[channels], F::one(), ParamRole::RunningStat),
            eps: F::lit(1e-5),
            momentum: F::lit(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: &Array3<F>, mode: Mode) -> (Array3<F>, BatchNormCache<F>) {
        let (n, c, s) = x.dim();
        let count = n * s;
        let (mean, var) = match mode {
            Mode::Eval => (
                self.running_mean.value.iter().copied().collect::<Array1<F>>(),
                self.running_var.value.iter().copied().collect::<Array1<F>>(),
            ),
            Mode::Train | Mode::BatchStats => {
                let m = F::lit(count as f64);
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for ch in 0..c {
                    let lane = x.index_axis(Axis(1), ch);
                    let mu = lane.iter().copied().sum::<F>() / m;
                    let v = lane.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / m;
                    mean[ch] = mu;
                    var[ch] = v;
                }
                if mode == Mode::Train {
                    let mom = self.momentum;
                    let unbias = if count > 1 {
                        F::lit(count as f64 / (count - 1) as f64)
                    } else {
                        F::one()
                    };
                    for ch in 0..c {
                        let rm = &mut self.running_mean.value[[ch]];
                        *rm = (F::one() - mom) * *rm + mom * mean[ch];
                        let rv = &mut self.running_var.value[[ch]];
                        *rv = (F::one() - mom) * *rv + mom * var[ch] * unbias;
                    }
                }
                (mean, var)
            }
        };
        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        let mut y = Array3::zeros((n, c, s));
        for ch in 0..c {
            let (mu, is) = (mean[ch], inv_std[ch]);
            let (g, b) = (self.gamma.value[[ch]], self.beta.value[[ch]]);
            let mut xh = xhat.index_axis_mut(Axis(1), ch);
            xh.mapv_inplace(|v| (v - mu) * is);
            Zip::from(y.index_axis_mut(Axis(1), ch))
                .and(&xh)
                .for_each(|y, &h| *y = g * h + b);
        }
        let cache = BatchNormCache {
            xhat,
            inv_std,
            batch_stats: mode != Mode::Eval,
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &BatchNormCache<F>, dy: &Array3<F>) -> Array3<F> {
        let (n, c, s) = dy.dim();
        let m = F::lit((n * s) as f64);
        let mut dx = Array3::zeros((n, c, s));
        for ch in 0..c {
            let dyc = dy.index_axis(Axis(1), ch);
            let xh = cache.xhat.index_axis(Axis(1), ch);
            let sum_dy = dyc.iter().copied().sum::<F>();
            let sum_dy_xh = Zip::from(&dyc)
                .and(&xh)
                .fold(F::zero(), |acc, &d, &h| acc + d * h);
            self.gamma.grad[[ch]] += sum_dy_xh;
            self.beta.grad[[ch]] += sum_dy;
            let g = self.gamma.value[[ch]];
            let is = cache.inv_std[ch];
            let mut dxc = dx.index_axis_mut(Axis(1), ch);
            if cache.batch_stats {
                // d xhat = dy * g; dx = is / m * (m dxh - sum dxh - xhat * sum(dxh * xhat))
                let scale = g * is / m;
                Zip::from(&mut dxc)
                    .and(&dyc)
                    .and(&xh)
                    .for_each(|o, &d, &h| *o = scale * (m * d - sum_dy - h * sum_dy_xh));
            } else {
                let scale = g * is;
                Zip::from(&mut dxc).and(&dyc).for_each(|o, &d| *o = scale * d);
            }
        }
        dx
    }
}

impl<F: Scalar> Parameterized<F> for BatchNorm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}

pub fn relu<F: Scalar, D: Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// Backward of [`relu`] given its forward output.
pub fn relu_backward<F: Scalar, D: Dimension>(
    out: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(out).for_each(|d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}
