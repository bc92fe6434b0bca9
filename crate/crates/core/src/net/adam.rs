//! Adam optimizer with bias correction.

use super::{GradientSet, Network};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// First/second moment estimates per parameter tensor plus the step counter.
/// Single-owner: one state drives one network's training run.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub epsilon: S,
    t: u64,
    moments: Vec<Option<(Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>)>>,
}

impl<S: Real> AdamState<S> {
    /// Moments shaped after `net`'s parameters; standard defaults
    /// (beta1 0.9, beta2 0.999, epsilon 1e-8).
    pub fn new(net: &Network<S>, lr: f64) -> Self {
        let moments = net
            .layers()
            .iter()
            .map(|l| {
                l.params.as_ref().map(|(w, b)| {
                    (
                        Tensor::zeros(w.shape().to_vec()),
                        Tensor::zeros(b.shape().to_vec()),
                        Tensor::zeros(w.shape().to_vec()),
                        Tensor::zeros(b.shape().to_vec()),
                    )
                })
            })
            .collect();
        AdamState {
            lr: S::from_f64_c(lr),
            beta1: S::from_f64_c(0.9),
            beta2: S::from_f64_c(0.999),
            epsilon: S::from_f64_c(1e-8),
            t: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update. Frozen layers (flagged `skip_update` in `grads`) keep
/// both their parameters and their moment estimates untouched.
pub fn adam_step<S: Real>(
    net: &mut Network<S>,
    grads: &GradientSet<S>,
    state: &mut AdamState<S>,
) -> Result<()> {
    let n = net.n_layers();
    if grads.per_layer.len() != n || state.moments.len() != n {
        return Err(Error::InvalidArgument(format!(
            "adam_step: gradient set covers {} layers, network has {n}",
            grads.per_layer.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = S::one() - state.beta1.powi(t);
    let bc2 = S::one() - state.beta2.powi(t);
    let (lr, b1, b2, eps) = (state.lr, state.beta1, state.beta2, state.epsilon);
    let one = S::one();

    for i in 0..n {
        if grads.skip_update[i] {
            continue;
        }
        let (Some((dw, db)), Some((mw, mb, vw, vb))) =
            (&grads.per_layer[i], &mut state.moments[i])
        else {
            continue;
        };
        let layer = &mut net.layers_mut()[i];
        let (w, b) = layer.params.as_mut().expect("moments imply params");
        update_tensor(w, dw, mw, vw, lr, b1, b2, eps, bc1, bc2, one)?;
        update_tensor(b, db, mb, vb, lr, b1, b2, eps, bc1, bc2, one)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn update_tensor<S: Real>(
    p: &mut Tensor<S>,
    g: &Tensor<S>,
    m: &mut Tensor<S>,
    v: &mut Tensor<S>,
    lr: S,
    b1: S,
    b2: S,
    eps: S,
    bc1: S,
    bc2: S,
    one: S,
) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::shape("adam_step gradient", p.shape(), g.shape()));
    }
    let (pd, gd, md, vd) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
    for i in 0..pd.len() {
        let gi = gd[i];
        md[i] = b1 * md[i] + (one - b1) * gi;
        vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
        let m_hat = md[i] / bc1;
        let v_hat = vd[i] / bc2;
        pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
