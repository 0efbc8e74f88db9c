//! SGD parameter updates. Frozen modules and tensors are left untouched.

use crate::error::{Error, Result};
use crate::numerics::layer::{Mlp, MlpGrads};
use crate::numerics::tensor::Tensor;

/// p <- p - lr * g for every parameter of `mlp`, unless the stack is frozen.
pub fn sgd_step(mlp: &mut Mlp, grads: &MlpGrads, lr: f64) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::InvalidParameter {
            name: "lr",
            message: format!("must be >= 0, got {lr}"),
        });
    }
    if mlp.frozen || lr == 0.0 {
        return Ok(());
    }
    if grads.layers.len() != mlp.layers.len() {
        return Err(Error::ShapeMismatch {
            context: "sgd_step",
            lhs: vec![mlp.layers.len()],
            rhs: vec![grads.layers.len()],
        });
    }
    for (layer, g) in mlp.layers.iter_mut().zip(&grads.layers) {
        if g.weight.len() != layer.weight.len() || g.bias.len() != layer.bias.len() {
            return Err(Error::ShapeMismatch {
                context: "sgd_step",
                lhs: layer.weight.shape().to_vec(),
                rhs: vec![g.weight.len()],
            });
        }
        for (p, gv) in layer.weight.data_mut().iter_mut().zip(&g.weight) {
            *p -= lr * gv;
        }
        for (p, gv) in layer.bias.data_mut().iter_mut().zip(&g.bias) {
            *p -= lr * gv;
        }
    }
    Ok(())
}

/// Elementwise SGD on a bare tensor (the personalized vector).
pub fn sgd_step_tensor(param: &mut Tensor, grad: &[f64], lr: f64, frozen: bool) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::InvalidParameter {
            name: "lr",
            message: format!("must be >= 0, got {lr}"),
        });
    }
    if param.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            context: "sgd_step_tensor",
            lhs: param.shape().to_vec(),
            rhs: vec![grad.len()],
        });
    }
    if frozen || lr == 0.0 {
        return Ok(());
    }
    for (p, g) in param.data_mut().iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}
