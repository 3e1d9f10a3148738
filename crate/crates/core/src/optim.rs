//! AdamW with decoupled weight decay and per-group learning rates
//! (a low rate for the encoder, a higher one for everything else).

use crate::config::Config;
use crate::tensor::{LrGroup, ParamStore, Real, Tensor};

/// One decoupled-weight-decay Adam update with bias correction, applied
/// in place to a parameter slice.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Real>(
    value: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - beta1.powi(t as i32));
    let bc2 = T::from_f64(1.0 - beta2.powi(t as i32));
    let lr_t = T::from_f64(lr);
    let epst = T::from_f64(eps);
    let decay = T::from_f64(lr * weight_decay);
    for i in 0..value.len() {
        m[i] = b1 * m[i] + (one - b1) * grad[i];
        v[i] = b2 * v[i] + (one - b2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] = value[i] - lr_t * m_hat / (v_hat.sqrt() + epst) - decay * value[i];
    }
}

pub struct AdamW<T: Real> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_encoder: f64,
    pub lr_rest: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: &Config) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            m,
            v,
            step_count: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            lr_encoder: cfg.lr_encoder,
            lr_rest: cfg.lr_rest,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from the accumulated gradients. `lr_scale` carries
    /// the schedule (1.0 before decay, linearly falling after).
    pub fn step(&mut self, store: &mut ParamStore<T>, lr_scale: f64) {
        self.step_count += 1;
        let n = store.len();
        for i in 0..n {
            let id = crate::tensor::ParamId(i);
            let (trainable, group) = {
                let p = store.get(id);
                (p.trainable, p.group)
            };
            if !trainable {
                continue;
            }
            let lr = match group {
                LrGroup::Encoder => self.lr_encoder,
                LrGroup::Other => self.lr_rest,
            } * lr_scale;
            let grad = store.get(id).grad.clone();
            let p = store.get_mut(id);
            adamw_update(
                p.value.data_mut(),
                grad.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.step_count,
                lr,
                self.beta1,
                self.beta2,
                self.eps,
                self.weight_decay,
            );
        }
    }
}

/// Learning-rate scale for iteration `i` of `total`: constant 1.0 until
/// `decay_start` of the run, then linear decay towards zero.
pub fn lr_schedule(i: usize, total: usize, decay_start: f64) -> f64 {
    let start = (total as f64 * decay_start).floor();
    let i = i as f64;
    if i < start || total == 0 {
        return 1.0;
    }
    let span = total as f64 - start;
    if span <= 0.0 {
        return 1.0;
    }
    (1.0 - (i - start) / span).max(1.0 / total as f64)
}
