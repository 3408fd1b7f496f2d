use super::{TrainConfig, TrainError};
use crate::model::{Gradients, Model, ParamGroup};
use crate::scalar::Real;

/// Momentum SGD with coupled weight decay:
/// `g ← g + λw`, `v ← μv + g`, `w ← w − ηv`.
pub fn sgd_update<T: Real>(weights: &mut [T], grads: &[T], velocity: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((w, &g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + wd * *w;
        *v = mu * *v + g;
        *w -= lr * *v;
    }
}

/// SGD state for every parameter of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub base_lr: f64,
    pub head_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub freeze_backbone: bool,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    velocity: Vec<Vec<T>>,
}

/// Backbone parameters at `base_lr`, new layers at `head_lr`.
pub fn make_optimizer<T: Real>(model: &Model<T>, cfg: &TrainConfig) -> Result<Optimizer<T>, TrainError> {
    let params = model.parameters();
    if params.iter().all(|p| p.values.is_empty()) {
        return Err(TrainError::Config("model has no trainable parameters".into()));
    }
    Ok(Optimizer {
        base_lr: cfg.base_lr,
        head_lr: cfg.head_lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        freeze_backbone: cfg.freeze_backbone,
        names: params.iter().map(|p| p.name.clone()).collect(),
        groups: params.iter().map(|p| p.group).collect(),
        velocity: params.iter().map(|p| vec![T::zero(); p.values.len()]).collect(),
    })
}

impl<T: Real> Optimizer<T> {
    pub fn group_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone if self.freeze_backbone => 0.0,
            ParamGroup::Backbone => self.base_lr,
            ParamGroup::NewLayers => self.head_lr,
        }
    }

    /// Applies one update with every learning rate multiplied by `lr_scale`.
    /// Parameters whose effective rate is zero are left untouched.
    pub fn step(&mut self, model: &mut Model<T>, grads: &Gradients<T>, lr_scale: f64) -> Result<(), TrainError> {
        if grads.names != self.names {
            return Err(TrainError::Config("gradients do not match the optimizer's parameters".into()));
        }
        let lrs: Vec<f64> = self.groups.iter().map(|&g| self.group_lr(g) * lr_scale).collect();
        for (i, p) in model.parameters_mut().into_iter().enumerate() {
            if lrs[i] == 0.0 {
                continue;
            }
            sgd_update(
                p.values,
                &grads.values[i],
                &mut self.velocity[i],
                lrs[i],
                self.momentum,
                self.weight_decay,
            );
        }
        Ok(())
    }

    /// Momentum buffers keyed by parameter name.
    pub fn momentum_buffers(&self) -> Vec<(String, Vec<T>)> {
        self.names.iter().cloned().zip(self.velocity.iter().cloned()).collect()
    }

    pub fn restore_momentum(&mut self, buffers: &[(String, Vec<T>)]) -> Result<(), TrainError> {
        for (i, name) in self.names.iter().enumerate() {
            let (_, v) = buffers
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| TrainError::Config(format!("no momentum buffer for '{name}'")))?;
            if v.len() != self.velocity[i].len() {
                return Err(TrainError::Config(format!("momentum buffer '{name}' has the wrong length")));
            }
            self.velocity[i].clone_from(v);
        }
        Ok(())
    }
}
