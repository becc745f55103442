use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Mat;

const ADAGRAD_EPS: f64 = 1e-8;

/// One AdaGrad update: `acc += g²; θ −= lr·g/√(acc + 1e-8)`.
pub fn adagrad_step(param: &mut Mat, grad: &Mat, accumulator: &mut Mat, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != accumulator.shape() {
        return Err(Error::shape(format!(
            "adagrad: param {:?}, grad {:?}, accumulator {:?}",
            param.shape(),
            grad.shape(),
            accumulator.shape()
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::Argument(format!("learning rate must be positive, got {lr}")));
    }
    let p = param.as_mut_slice();
    let acc = accumulator.as_mut_slice();
    for ((p, a), g) in p.iter_mut().zip(acc.iter_mut()).zip(grad.as_slice()) {
        *a += g * g;
        *p -= lr * g / (*a + ADAGRAD_EPS).sqrt();
    }
    Ok(())
}

/// AdaGrad state for a whole [`ModelParams`].
#[derive(Debug, Clone)]
pub struct AdaGrad {
    lr: f64,
    accumulators: ModelParams,
}

impl AdaGrad {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        AdaGrad {
            lr,
            accumulators: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        for (((_, p), (_, g)), (_, a)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.accumulators.tensors_mut())
        {
            adagrad_step(p, g, a, self.lr)?;
        }
        Ok(())
    }
}
