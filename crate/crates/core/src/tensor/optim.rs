use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("sgd", format!("lr must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(
                "sgd",
                format!("momentum must be in [0, 1), got {momentum}"),
            ));
        }
        Ok(Self { lr, momentum })
    }
}

/// `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, opt: Sgd) -> Result<()> {
    sgd_step_masked(param, grad, velocity, opt, None)
}

/// Like [`sgd_step`], but entries with `update[i] == false` keep both their
/// value and their velocity bit-for-bit.
pub fn sgd_step_masked(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    opt: Sgd,
    update: Option<&[bool]>,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::shape(
            "sgd_step",
            format!("{:?}", param.shape()),
            format!("grad {:?}, velocity {:?}", grad.shape(), velocity.shape()),
        ));
    }
    if let Some(u) = update {
        if u.len() != param.len() {
            return Err(Error::shape("sgd_step", param.len(), u.len()));
        }
    }
    let g = grad.data();
    let v = velocity.data_mut();
    let p = param.data_mut();
    for i in 0..p.len() {
        if update.is_some_and(|u| !u[i]) {
            continue;
        }
        v[i] = opt.momentum * v[i] + g[i];
        p[i] -= opt.lr * v[i];
    }
    Ok(())
}
