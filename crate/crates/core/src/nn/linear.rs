use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::Param;

/// Fully connected layer `y = x W^T + b` over `(N, in)` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    /// Shape `(out, in)`.
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, bias: bool, rng: &mut R) -> Self {
        Self::with_gain(inputs, outputs, bias, 1.0, rng)
    }

    pub fn with_gain<R: Rng + ?Sized>(inputs: usize, outputs: usize, bias: bool, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::kaiming(&[outputs, inputs], inputs, gain, rng),
            bias: bias.then(|| Param::zeros(&[outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub(crate) fn w(&self) -> ArrayView2<'_, f64> {
        self.weight
            .value
            .view()
            .into_dimensionality()
            .expect("linear weight is 2-D")
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w().t());
        if let Some(b) = &self.bias {
            let b = b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y += &b;
        }
        y
    }

    pub fn backward_input(&self, grad_out: ArrayView2<f64>) -> Array2<f64> {
        grad_out.dot(&self.w())
    }

    pub fn param_grads(&self, x: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> (Array2<f64>, Option<Array1<f64>>) {
        let dw = grad_out.t().dot(&x);
        let db = self.bias.as_ref().map(|_| grad_out.sum_axis(Axis(0)));
        (dw, db)
    }

    /// Add batch-summed parameter gradients into the accumulators.
    pub fn accumulate(&mut self, x: ArrayView2<f64>, grad_out: ArrayView2<f64>) {
        let (dw, db) = self.param_grads(x, grad_out);
        self.weight.grad += &dw.into_dyn();
        if let (Some(b), Some(db)) = (self.bias.as_mut(), db) {
            b.grad += &db.into_dyn();
        }
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }
}
