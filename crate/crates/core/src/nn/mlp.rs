use ndarray::{Array2, Array3};
use rand::Rng;

use super::{join, relu, relu_backward, BatchNorm, BatchNormCache, Linear};
use super::{Mode, Param, Parameterized, Scalar};

/// `linear -> batch-norm -> ReLU -> linear`, the layout shared by projector and predictor.
#[derive(Debug, Clone)]
pub struct MlpHead<F> {
    pub fc1: Linear<F>,
    pub bn: BatchNorm<F>,
    pub fc2: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    input: Array2<F>,
    bn: BatchNormCache<F>,
    hidden: Array2<F>,
}

impl<F: Scalar> MlpHead<F> {
    pub fn new(inputs: usize, hidden: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        MlpHead {
            fc1: Linear::new(inputs, hidden, rng),
            bn: BatchNorm::new(hidden),
            fc2: Linear::new(hidden, outputs, rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.fc1.inputs()
    }

    pub fn outputs(&self) -> usize {
        self.fc2.outputs()
    }

    pub fn forward(&mut self, x: &Array2<F>, mode: Mode) -> (Array2<F>, MlpCache<F>) {
        let z = self.fc1.forward(x);
        let (n, c) = z.dim();
        let z3: Array3<F> = z.into_shape_with_order((n, c, 1)).expect("contiguous");
        let (b, bn) = self.bn.forward(&z3, mode);
        let hidden = relu(&b.into_shape_with_order((n, c)).expect("contiguous"));
        let y = self.fc2.forward(&hidden);
        let cache = MlpCache {
            input: x.clone(),
            bn,
            hidden,
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &MlpCache<F>, dy: &Array2<F>) -> Array2<F> {
        let dh = self.fc2.backward(&cache.hidden, dy);
        let dh = relu_backward(&cache.hidden, &dh);
        let (n, c) = dh.dim();
        let dz = self
            .bn
            .backward(&cache.bn, &dh.into_shape_with_order((n, c, 1)).expect("contiguous"));
        let dz = dz.into_shape_with_order((n, c)).expect("contiguous");
        self.fc1.backward(&cache.input, &dz)
    }
}

impl<F: Scalar> Parameterized<F> for MlpHead<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
