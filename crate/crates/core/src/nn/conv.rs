use ndarray::{Array2, Array4, ArrayD, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{join, Param, ParamRole, Parameterized, Scalar};

/// Square-kernel 2-d convolution without bias, computed as im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// `(out_channels, in_channels, k, k)`
    pub weight: Param<F>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<F> {
    cols: Array2<F>,
    input_dim: (usize, usize, usize, usize),
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn ncols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Source index along one axis, or `None` when it falls into the padding.
    #[inline]
    fn source(o: usize, kk: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        (o * stride + kk).checked_sub(pad).filter(|&i| i < len)
    }
}

impl<F: Scalar> Conv2d<F> {
    /// He-normal initialization.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let w = ArrayD::from_shape_simple_fn(
            vec![out_channels, in_channels, kernel, kernel],
            || F::lit(dist.sample(rng)),
        );
        Conv2d {
            weight: Param::new(w, ParamRole::Weight),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn geometry(&self, dim: (usize, usize, usize, usize)) -> Geometry {
        let (n, c, h, w) = dim;
        let (ho, wo) = self.output_size(h, w);
        Geometry {
            n,
            c,
            h,
            w,
            k: self.kernel(),
            stride: self.stride,
            pad: self.padding,
            ho,
            wo,
        }
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, F> {
        let co = self.out_channels();
        self.weight
            .value
            .view()
            .into_shape_with_order((co, self.weight.value.len() / co))
            .expect("contiguous weight")
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        assert_eq!(x.dim().1, self.in_channels(), "conv input channels");
        let g = self.geometry(x.dim());
        let x = x.as_standard_layout();
        let cols = im2col(x.as_slice().expect("standard layout"), &g);
        let out = self.weight_matrix().dot(&cols);
        let co = self.out_channels();
        let out = out
            .into_shape_with_order((co, g.n, g.ho * g.wo))
            .expect("gemm output")
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((g.n, co, g.ho, g.wo))
            .expect("nchw");
        let cache = ConvCache {
            cols,
            input_dim: (g.n, g.c, g.h, g.w),
        };
        (out, cache)
    }

    /// Accumulates the weight gradient; returns the input gradient when asked for.
    pub fn backward(
        &mut self,
        cache: &ConvCache<F>,
        dy: &Array4<F>,
        input_grad: bool,
    ) -> Option<Array4<F>> {
        let g = self.geometry(cache.input_dim);
        let co = self.out_channels();
        let dy_mat = dy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((co, g.ncols()))
            .expect("dy matrix");
        let dw = dy_mat.dot(&cache.cols.t());
        {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((co, dw.ncols()))
                .expect("contiguous grad")
                .into_dimensionality::<Ix2>()
                .unwrap();
            gw += &dw;
        }
        if !input_grad {
            return None;
        }
        let dcols = self.weight_matrix().t().dot(&dy_mat);
        let dcols = dcols.as_standard_layout();
        let dx = col2im(dcols.as_slice().expect("standard layout"), &g);
        Some(Array4::from_shape_vec((g.n, g.c, g.h, g.w), dx).expect("input shape"))
    }
}

fn im2col<F: Scalar>(x: &[F], g: &Geometry) -> Array2<F> {
    let rows = g.c * g.k * g.k;
    let ncols = g.ncols();
    let mut cols = vec![F::zero(); rows * ncols];
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    for oh in 0..g.ho {
                        let Some(ih) = Geometry::source(oh, ki, g.stride, g.pad, g.h) else {
                            continue;
                        };
                        let base = (n * g.ho + oh) * g.wo;
                        let src_row = &src[ih * g.w..(ih + 1) * g.w];
                        for ow in 0..g.wo {
                            if let Some(iw) = Geometry::source(ow, kj, g.stride, g.pad, g.w) {
                                dst[base + ow] = src_row[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, ncols), cols).expect("im2col shape")
}

fn col2im<F: Scalar>(cols: &[F], g: &Geometry) -> Vec<F> {
    let ncols = g.ncols();
    let plane = g.h * g.w;
    let mut x = vec![F::zero(); g.n * g.c * plane];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    for oh in 0..g.ho {
                        let Some(ih) = Geometry::source(oh, ki, g.stride, g.pad, g.h) else {
                            continue;
                        };
                        let base = (n * g.ho + oh) * g.wo;
                        let dst_row = &mut dst[ih * g.w..(ih + 1) * g.w];
                        for ow in 0..g.wo {
                            if let Some(iw) = Geometry::source(ow, kj, g.stride, g.pad, g.w) {
                                dst_row[iw] += src[base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl<F: Scalar> Parameterized<F> for Conv2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "weight"), &self.weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
    }
}

/// Spatial mean per channel: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let flat = x.view().into_shape_with_order((n, c, h * w)).expect("contiguous");
    flat.sum_axis(ndarray::Axis(2)) / F::lit((h * w) as f64)
}

pub fn global_avg_pool_backward<F: Scalar>(
    dy: &Array2<F>,
    dim: (usize, usize, usize, usize),
) -> Array4<F> {
    let (n, c, h, w) = dim;
    let scale = F::lit(1.0 / (h * w) as f64);
    Array4::from_shape_fn((n, c, h, w), |(i, j, _, _)| dy[[i, j]] * scale)
}
