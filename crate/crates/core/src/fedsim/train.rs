//! Client-side local training of the adapters (backbone frozen).
//!
//! Loss per step is `Σ_ℓ ½‖Y_ℓ − T_ℓ‖²_F / b` over a minibatch of `b`
//! samples drawn without replacement; the same minibatch feeds every
//! layer. Optimizer state is created fresh for each call, i.e. moments do
//! not survive across rounds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::task::SyntheticTask;
use super::{ClientDataset, SimError};
use crate::aggregation::ClientUpdate;
use crate::linalg::Matrix;
use crate::lora::{forward, lora_gradients, BackboneLayer, LoraAdapter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdamW,
}

/// Which adapter factors receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    #[default]
    Both,
    BOnly,
    AOnly,
}

impl Trainable {
    fn a(self) -> bool {
        matches!(self, Trainable::Both | Trainable::AOnly)
    }

    fn b(self) -> bool {
        matches!(self, Trainable::Both | Trainable::BOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay; ignored by SGD.
    pub weight_decay: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            learning_rate: 3e-4,
            local_steps: 10,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl TrainerConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) {
            v.push(format!("beta1 must be in [0, 1), got {}", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            v.push(format!("beta2 must be in [0, 1), got {}", self.beta2));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            v.push(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        v
    }
}

/// First and second moment buffers for one parameter matrix.
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One optimizer step from `param`; `None` if the result is not finite.
/// `t` is 1-based.
fn apply_step(cfg: &TrainerConfig, param: &Matrix, grad: &Matrix, moments: &mut Moments, t: i32) -> Option<Matrix> {
    let lr = cfg.learning_rate;
    let values: Vec<f64> = match cfg.optimizer {
        OptimizerKind::Sgd => param
            .as_slice()
            .iter()
            .zip(grad.as_slice())
            .map(|(p, g)| p - lr * g)
            .collect(),
        OptimizerKind::AdamW => {
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            param
                .as_slice()
                .iter()
                .zip(grad.as_slice())
                .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
                .map(|((p, g), (m, v))| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    p - lr * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * p)
                })
                .collect()
        }
    };
    Matrix::new(param.rows(), param.cols(), values).ok()
}

/// Minibatch positions (into the client's index list) for one step.
fn draw_batch<R: Rng + ?Sized>(len: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    if batch >= len {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, batch).into_vec()
    }
}

/// Minibatch loss and per-layer gradients `(dA, dB)`.
pub fn batch_loss_and_gradients(
    task: &SyntheticTask,
    backbone: &[BackboneLayer],
    adapters: &[LoraAdapter],
    indices: &[usize],
) -> Result<(f64, Vec<(Matrix, Matrix)>), SimError> {
    let x = task.batch_inputs(indices);
    let b = indices.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(adapters.len());
    for (l, (layer, adapter)) in backbone.iter().zip(adapters).enumerate() {
        let y = forward(layer, adapter, &x)?;
        let resid = y.sub(&task.batch_targets(l, indices))?;
        loss += 0.5 * resid.as_slice().iter().map(|v| v * v).sum::<f64>() / b;
        let dy = resid.scale(1.0 / b);
        grads.push(lora_gradients(layer, adapter, &x, &dy)?);
    }
    Ok((loss, grads))
}

/// Runs `local_steps` optimizer steps from the broadcast adapters and
/// returns the client's trained adapters.
#[allow(clippy::too_many_arguments)]
pub fn local_train<R: Rng + ?Sized>(
    task: &SyntheticTask,
    backbone: &[BackboneLayer],
    adapters: &[LoraAdapter],
    dataset: &ClientDataset,
    config: &TrainerConfig,
    trainable: Trainable,
    rng: &mut R,
) -> Result<ClientUpdate, SimError> {
    if backbone.len() != adapters.len() || backbone.len() != task.layers.len() {
        return Err(SimError::LayerCount {
            expected: task.layers.len(),
            got: adapters.len(),
        });
    }
    if dataset.is_empty() {
        return Err(SimError::EmptyClient(dataset.client_id));
    }
    let mut params: Vec<(Matrix, Matrix)> = adapters.iter().map(|a| (a.a().clone(), a.b().clone())).collect();
    let mut moments: Vec<(Moments, Moments)> = params
        .iter()
        .map(|(a, b)| (Moments::new(a.as_slice().len()), Moments::new(b.as_slice().len())))
        .collect();
    let mut current: Vec<LoraAdapter> = adapters.to_vec();

    for step in 0..config.local_steps {
        let positions = draw_batch(dataset.len(), config.batch_size, rng);
        let indices: Vec<usize> = positions.iter().map(|&p| dataset.indices[p]).collect();
        let (_, grads) = batch_loss_and_gradients(task, backbone, &current, &indices)?;
        let t = (step + 1) as i32;
        for (l, (da, db)) in grads.iter().enumerate() {
            let (a, b) = &mut params[l];
            let (ma, mb) = &mut moments[l];
            let diverged = SimError::Diverged {
                client: dataset.client_id,
                step,
            };
            if trainable.a() {
                *a = apply_step(config, a, da, ma, t).ok_or(diverged)?;
            }
            if trainable.b() {
                *b = apply_step(config, b, db, mb, t).ok_or(SimError::Diverged {
                    client: dataset.client_id,
                    step,
                })?;
            }
            current[l] = LoraAdapter::new(a.clone(), b.clone(), adapters[l].alpha())?;
        }
    }
    Ok(ClientUpdate {
        client_id: dataset.client_id,
        sample_count: dataset.len(),
        adapters: current,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedsim::task::{make_teacher_student_task, TaskSpec};
    use crate::lora::{init_adapter, InitScheme};
    use crate::rng::seeded_rng;

    fn setup(seed: u64) -> (SyntheticTask, Vec<BackboneLayer>, Vec<LoraAdapter>, ClientDataset) {
        let spec = TaskSpec {
            d: 6,
            k: 5,
            r_star: 2,
            samples: 30,
            layers: 2,
            ..TaskSpec::default()
        };
        let mut rng = seeded_rng(seed);
        let task = make_teacher_student_task(&spec, &mut rng).unwrap();
        let adapters = (0..2)
            .map(|_| init_adapter(6, 5, 3, 6.0, InitScheme::BothRandom, &mut rng).unwrap())
            .collect();
        let ds = ClientDataset {
            client_id: 0,
            indices: (0..30).collect(),
        };
        (task.clone(), task.backbone(), adapters, ds)
    }

    #[test]
    fn zero_learning_rate_leaves_adapters_unchanged() {
        let (task, bb, ad, ds) = setup(1);
        for optimizer in [OptimizerKind::Sgd, OptimizerKind::AdamW] {
            let cfg = TrainerConfig {
                optimizer,
                learning_rate: 0.0,
                ..TrainerConfig::default()
            };
            let up = local_train(&task, &bb, &ad, &ds, &cfg, Trainable::Both, &mut seeded_rng(0)).unwrap();
            assert_eq!(up.adapters, ad);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (task, bb, ad, ds) = setup(2);
        let idx = &ds.indices[..10];
        let (_, grads) = batch_loss_and_gradients(&task, &bb, &ad, idx).unwrap();
        let h = 1e-6;
        let loss_at = |ads: &[LoraAdapter]| batch_loss_and_gradients(&task, &bb, ads, idx).unwrap().0;
        for l in 0..2 {
            for (i, j) in [(0, 0), (2, 4), (1, 3)] {
                let mut plus = ad.clone();
                let mut minus = ad.clone();
                let mut a = ad[l].a().clone();
                a.set(i, j, a.get(i, j) + h);
                plus[l] = ad[l].with_a(a.clone()).unwrap();
                a.set(i, j, a.get(i, j) - 2.0 * h);
                minus[l] = ad[l].with_a(a).unwrap();
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                assert!((fd - grads[l].0.get(i, j)).abs() < 1e-6 * (1.0 + fd.abs()), "dA {fd}");

                let mut b = ad[l].b().clone();
                b.set(j, i, b.get(j, i) + h);
                plus = ad.clone();
                plus[l] = ad[l].with_b(b.clone()).unwrap();
                b.set(j, i, b.get(j, i) - 2.0 * h);
                minus = ad.clone();
                minus[l] = ad[l].with_b(b).unwrap();
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                assert!((fd - grads[l].1.get(j, i)).abs() < 1e-6 * (1.0 + fd.abs()), "dB {fd}");
            }
        }
    }

    #[test]
    fn sgd_single_step_matches_hand_update() {
        let (task, bb, ad, ds) = setup(3);
        let cfg = TrainerConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.05,
            local_steps: 1,
            batch_size: 1000,
            ..TrainerConfig::default()
        };
        let (_, grads) = batch_loss_and_gradients(&task, &bb, &ad, &ds.indices).unwrap();
        let up = local_train(&task, &bb, &ad, &ds, &cfg, Trainable::Both, &mut seeded_rng(0)).unwrap();
        for l in 0..2 {
            let a = ad[l].a().sub(&grads[l].0.scale(0.05)).unwrap();
            let b = ad[l].b().sub(&grads[l].1.scale(0.05)).unwrap();
            assert!(up.adapters[l].a().sub(&a).unwrap().max_abs() < 1e-15);
            assert!(up.adapters[l].b().sub(&b).unwrap().max_abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_first_step_is_sign_like() {
        // with bias correction the first Adam step is lr · g/(|g| + ε) plus decay
        let (task, bb, ad, ds) = setup(4);
        let cfg = TrainerConfig {
            learning_rate: 1e-3,
            local_steps: 1,
            batch_size: 1000,
            weight_decay: 0.0,
            ..TrainerConfig::default()
        };
        let (_, grads) = batch_loss_and_gradients(&task, &bb, &ad, &ds.indices).unwrap();
        let up = local_train(&task, &bb, &ad, &ds, &cfg, Trainable::Both, &mut seeded_rng(0)).unwrap();
        let step = ad[0].a().sub(up.adapters[0].a()).unwrap();
        for (s, g) in step.as_slice().iter().zip(grads[0].0.as_slice()) {
            let expect = 1e-3 * g / (g.abs() + 1e-8);
            assert!((s - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn masks_freeze_the_other_factor() {
        let (task, bb, ad, ds) = setup(5);
        let cfg = TrainerConfig::default();
        let up = local_train(&task, &bb, &ad, &ds, &cfg, Trainable::BOnly, &mut seeded_rng(0)).unwrap();
        assert!(up.adapters.iter().zip(&ad).all(|(u, a)| u.a() == a.a() && u.b() != a.b()));
        let up = local_train(&task, &bb, &ad, &ds, &cfg, Trainable::AOnly, &mut seeded_rng(0)).unwrap();
        assert!(up.adapters.iter().zip(&ad).all(|(u, a)| u.b() == a.b() && u.a() != a.a()));
    }

    #[test]
    fn training_reduces_loss() {
        let (task, bb, ad, ds) = setup(6);
        let cfg = TrainerConfig {
            learning_rate: 0.02,
            local_steps: 200,
            ..TrainerConfig::default()
        };
        let before = task.pooled_loss(&bb, &ad).unwrap();
        let up = local_train(&task, &bb, &ad, &ds, &cfg, Trainable::Both, &mut seeded_rng(0)).unwrap();
        let after = task.pooled_loss(&bb, &up.adapters).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn same_seed_same_update() {
        let (task, bb, ad, ds) = setup(7);
        let cfg = TrainerConfig {
            batch_size: 4,
            ..TrainerConfig::default()
        };
        let a = local_train(&task, &bb, &ad, &ds, &cfg, Trainable::Both, &mut seeded_rng(11)).unwrap();
        let b = local_train(&task, &bb, &ad, &ds, &cfg, Trainable::Both, &mut seeded_rng(11)).unwrap();
        assert_eq!(a, b);
    }
}
