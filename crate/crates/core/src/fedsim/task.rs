//! Linear teacher–student regression.
//!
//! Each layer `ℓ` has a random backbone `W_ℓ` and a planted low-rank
//! teacher delta `ΔW*_ℓ = P Q / √r*` (P, Q standard normal). Targets are
//! `(W_ℓ + ΔW*_ℓ) X + ε` with `X` shared across layers, so the best
//! adapter of rank ≥ r* recovers the teacher and leaves only the noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::linalg::{standard_normal_sample, Matrix};
use crate::lora::{BackboneLayer, LoraAdapter};

/// Shape and noise parameters of a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub d: usize,
    pub k: usize,
    pub r_star: usize,
    pub samples: usize,
    pub noise_std: f64,
    pub layers: usize,
    /// Standard deviation of per-segment input mean shifts (0 = i.i.d. inputs).
    pub input_shift: f64,
    /// Number of contiguous sample segments that share one mean shift.
    pub shift_groups: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            d: 32,
            k: 32,
            r_star: 8,
            samples: 512,
            noise_std: 0.1,
            layers: 1,
            input_shift: 0.0,
            shift_groups: 10,
        }
    }
}

impl TaskSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.d == 0 {
            v.push("d must be >= 1".into());
        }
        if self.k == 0 {
            v.push("k must be >= 1".into());
        }
        if self.r_star > self.d.min(self.k) {
            v.push(format!("r_star {} exceeds min(d, k) = {}", self.r_star, self.d.min(self.k)));
        }
        if self.samples == 0 {
            v.push("samples must be >= 1".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            v.push("noise_std must be finite and >= 0".into());
        }
        if self.layers == 0 {
            v.push("layers must be >= 1".into());
        }
        if !(self.input_shift >= 0.0 && self.input_shift.is_finite()) {
            v.push("input_shift must be finite and >= 0".into());
        }
        if self.shift_groups == 0 {
            v.push("shift_groups must be >= 1".into());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLayer {
    pub base_weight: Matrix,
    pub teacher_delta: Matrix,
    pub targets: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    /// `k × N`, one sample per column.
    pub inputs: Matrix,
    pub layers: Vec<TaskLayer>,
}

/// Draws a task. Deterministic given the rng state.
pub fn make_teacher_student_task<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Result<SyntheticTask, SimError> {
    let problems = spec.violations();
    if !problems.is_empty() {
        return Err(SimError::InvalidConfig(problems));
    }
    let TaskSpec { d, k, r_star, samples, .. } = *spec;

    let mut inputs = standard_normal_sample(rng, k, samples);
    if spec.input_shift > 0.0 {
        let means = standard_normal_sample(rng, k, spec.shift_groups).scale(spec.input_shift);
        for j in 0..samples {
            let g = j * spec.shift_groups / samples;
            for i in 0..k {
                inputs.set(i, j, inputs.get(i, j) + means.get(i, g));
            }
        }
    }

    let mut layers = Vec::with_capacity(spec.layers);
    for _ in 0..spec.layers {
        let base_weight = standard_normal_sample(rng, d, k).scale(1.0 / (k as f64).sqrt());
        let teacher_delta = if r_star == 0 {
            Matrix::zeros(d, k)
        } else {
            let p = standard_normal_sample(rng, d, r_star);
            let q = standard_normal_sample(rng, r_star, k);
            p.matmul(&q)?.scale(1.0 / (r_star as f64).sqrt())
        };
        let mut targets = base_weight.add(&teacher_delta)?.matmul(&inputs)?;
        if spec.noise_std > 0.0 {
            targets.axpy(spec.noise_std, &standard_normal_sample(rng, d, samples))?;
        }
        layers.push(TaskLayer {
            base_weight,
            teacher_delta,
            targets,
        });
    }
    Ok(SyntheticTask {
        spec: spec.clone(),
        inputs,
        layers,
    })
}

impl SyntheticTask {
    pub fn samples(&self) -> usize {
        self.inputs.cols()
    }

    pub fn backbone(&self) -> Vec<BackboneLayer> {
        self.layers
            .iter()
            .map(|l| BackboneLayer::new(l.base_weight.clone()))
            .collect()
    }

    /// Input columns at `indices`.
    pub fn batch_inputs(&self, indices: &[usize]) -> Matrix {
        gather_columns(&self.inputs, indices)
    }

    pub fn batch_targets(&self, layer: usize, indices: &[usize]) -> Matrix {
        gather_columns(&self.layers[layer].targets, indices)
    }

    /// Pooled loss of layer `l` alone with effective weight `weight`.
    pub fn layer_loss(&self, l: usize, weight: &Matrix) -> Result<f64, SimError> {
        let layer = self.layers.get(l).ok_or(SimError::LayerCount {
            expected: self.layers.len(),
            got: l + 1,
        })?;
        let resid = weight.matmul(&self.inputs)?.sub(&layer.targets)?;
        Ok(0.5 * resid.as_slice().iter().map(|v| v * v).sum::<f64>() / self.samples() as f64)
    }

    /// Pooled loss `Σ_ℓ ½‖W_ℓ X − T_ℓ‖²_F / N` for dense effective weights.
    pub fn loss_for_weights(&self, weights: &[Matrix]) -> Result<f64, SimError> {
        if weights.len() != self.layers.len() {
            return Err(SimError::LayerCount {
                expected: self.layers.len(),
                got: weights.len(),
            });
        }
        let mut total = 0.0;
        for (l, w) in weights.iter().enumerate() {
            total += self.layer_loss(l, w)?;
        }
        Ok(total)
    }

    /// Pooled loss of a backbone-plus-adapter model.
    pub fn pooled_loss(&self, backbone: &[BackboneLayer], adapters: &[LoraAdapter]) -> Result<f64, SimError> {
        self.loss_for_weights(&effective_weights(backbone, adapters)?)
    }
}

/// `W_ℓ + ΔW(adapter_ℓ)` per layer.
pub fn effective_weights(backbone: &[BackboneLayer], adapters: &[LoraAdapter]) -> Result<Vec<Matrix>, SimError> {
    if backbone.len() != adapters.len() {
        return Err(SimError::LayerCount {
            expected: backbone.len(),
            got: adapters.len(),
        });
    }
    backbone
        .iter()
        .zip(adapters)
        .map(|(b, a)| Ok(b.weight.add(&crate::lora::delta_weight(a))?))
        .collect()
}

fn gather_columns(m: &Matrix, indices: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), indices.len(), |i, j| m.get(i, indices[j]))
}
