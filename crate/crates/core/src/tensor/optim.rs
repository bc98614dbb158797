use serde::{Deserialize, Serialize};

use super::ParamTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + λ·w`, then `w ← w − lr·v`.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut ParamTensor>, cfg: SgdConfig) {
    for p in params {
        let value = p.value.data_mut();
        let grad = p.grad.data();
        let velocity = p.momentum_buffer.data_mut();
        for ((w, &g), v) in value.iter_mut().zip(grad).zip(velocity.iter_mut()) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
            *w -= cfg.lr * *v;
        }
    }
}
