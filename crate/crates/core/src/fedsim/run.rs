//! Round orchestration.
//!
//! Every client holds its own copy of the backbone and adapters. The
//! server never writes client state directly; it produces a broadcast
//! (adapters plus optional backbone merges) that each client applies.
//! At the start of every round all client copies are checked for bitwise
//! equality, which catches any aggregation path that would let them drift.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::task::{effective_weights, SyntheticTask};
use super::train::{local_train, Trainable, TrainerConfig};
use super::{dirichlet_partition, ClientDataset, SimError};
use crate::aggregation::{
    comm_cost_per_layer, fedex_aggregate, fedit_aggregate, fedmomentum_round, ffa_aggregate, flora_aggregate,
    rolora_aggregate, rolora_trains_b, sum_updates, ClientUpdate, CommReport, Method, StrategyConfig,
};
use crate::linalg::Matrix;
use crate::lora::{init_adapter, merge_into_backbone, BackboneLayer, InitScheme, LoraAdapter};
use crate::metrics::SpectrumLog;
use crate::rng::{derive_seed, seeded_rng, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub clients: usize,
    pub rounds: usize,
    /// Dirichlet concentration of the client split.
    pub beta: f64,
    pub rank: usize,
    pub alpha: f64,
    pub init: InitScheme,
    pub seed: u64,
    pub strategy: StrategyConfig,
    pub trainer: TrainerConfig,
    /// Layer whose cumulative effective-weight change is recorded each round.
    pub track_layer: Option<usize>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            rounds: 20,
            beta: 0.5,
            rank: 8,
            alpha: 16.0,
            init: InitScheme::ZeroB,
            seed: 0,
            strategy: StrategyConfig::default(),
            trainer: TrainerConfig::default(),
            track_layer: None,
        }
    }
}

impl SimulationConfig {
    /// All problems with this configuration against `task`.
    pub fn violations(&self, task: &SyntheticTask) -> Vec<String> {
        let mut v = Vec::new();
        if self.clients == 0 {
            v.push("clients must be >= 1".into());
        } else if self.clients > task.samples() {
            v.push(format!("{} clients but only {} samples", self.clients, task.samples()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            v.push(format!("beta must be positive and finite, got {}", self.beta));
        }
        let (d, k) = (task.spec.d, task.spec.k);
        if self.rank == 0 || self.rank > d.min(k) {
            v.push(format!("rank {} must be in 1..={}", self.rank, d.min(k)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            v.push(format!("alpha must be positive and finite, got {}", self.alpha));
        }
        if let Err(e) = self.strategy.validate() {
            v.push(e.to_string());
        }
        v.extend(self.trainer.violations());
        if let Some(l) = self.track_layer {
            if l >= task.layers.len() {
                v.push(format!("track_layer {l} out of range (task has {} layers)", task.layers.len()));
            }
        }
        v
    }
}

/// Metrics for one completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 0-based index of the round that just completed.
    pub round_index: usize,
    pub method: Method,
    /// Pooled training loss of the broadcast model after the round.
    pub loss: f64,
    /// Per-layer spectra of the aggregated update (FedMomentum only).
    pub spectra: Vec<SpectrumLog>,
    pub comm: CommReport,
    /// `‖ΔW_applied − Σ w_i ΔW_i‖ / ‖Σ w_i ΔW_i‖` over all layers: how far
    /// the broadcast model is from applying the exact aggregated update.
    pub update_error: f64,
    /// Cumulative change of the tracked layer's effective weight.
    pub tracked_delta: Option<Matrix>,
    pub wall_time_secs: f64,
}

impl RoundReport {
    /// The report with timing zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Everything needed to resume a run after `next_round` rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundState {
    pub method: Method,
    pub seed: u64,
    pub next_round: usize,
    pub backbone: Vec<BackboneLayer>,
    pub adapters: Vec<LoraAdapter>,
    /// Initial `A` factors (kept frozen by FFA-LoRA).
    pub frozen_a: Vec<Matrix>,
    /// Effective weight of the tracked layer before the first round.
    pub tracked_origin: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
struct ClientState {
    backbone: Vec<BackboneLayer>,
    adapters: Vec<LoraAdapter>,
}

/// Server-to-client broadcast.
struct Broadcast {
    adapters: Vec<LoraAdapter>,
    merges: Vec<Option<Matrix>>,
}

pub struct Simulation<'a> {
    task: &'a SyntheticTask,
    config: SimulationConfig,
    partition: Vec<ClientDataset>,
    clients: Vec<ClientState>,
    frozen_a: Vec<Matrix>,
    tracked_origin: Option<Matrix>,
    next_round: usize,
}

impl<'a> Simulation<'a> {
    /// Partitions the data and initializes every client identically.
    pub fn new(task: &'a SyntheticTask, config: SimulationConfig) -> Result<Self, SimError> {
        let problems = config.violations(task);
        if !problems.is_empty() {
            return Err(SimError::InvalidConfig(problems));
        }
        let mut init_rng = seeded_rng(derive_seed(config.seed, &[stream::INIT]));
        let adapters = task
            .layers
            .iter()
            .map(|l| {
                init_adapter(
                    l.base_weight.rows(),
                    l.base_weight.cols(),
                    config.rank,
                    config.alpha,
                    config.init,
                    &mut init_rng,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let state = RoundState {
            method: config.strategy.method,
            seed: config.seed,
            next_round: 0,
            backbone: task.backbone(),
            frozen_a: adapters.iter().map(|a| a.a().clone()).collect(),
            tracked_origin: None,
            adapters,
        };
        let mut sim = Self::from_state(task, config, state)?;
        if let Some(l) = sim.config.track_layer {
            sim.tracked_origin = Some(effective_weights(&sim.clients[0].backbone, &sim.clients[0].adapters)?.swap_remove(l));
        }
        Ok(sim)
    }

    /// Resumes from a saved state. The partition is re-derived from the seed.
    pub fn from_state(task: &'a SyntheticTask, config: SimulationConfig, state: RoundState) -> Result<Self, SimError> {
        let problems = config.violations(task);
        if !problems.is_empty() {
            return Err(SimError::InvalidConfig(problems));
        }
        if state.method != config.strategy.method || state.seed != config.seed {
            return Err(SimError::Checkpoint("method or seed differs".into()));
        }
        let layers = task.layers.len();
        if state.backbone.len() != layers || state.adapters.len() != layers || state.frozen_a.len() != layers {
            return Err(SimError::Checkpoint(format!("expected {layers} layers")));
        }
        for (l, (bb, ad)) in state.backbone.iter().zip(&state.adapters).enumerate() {
            if bb.weight.shape() != task.layers[l].base_weight.shape()
                || (ad.d(), ad.k(), ad.rank()) != (bb.d(), bb.k(), config.rank)
            {
                return Err(SimError::Checkpoint(format!("layer {l} shape differs")));
            }
        }
        if config.track_layer.is_some() && state.next_round > 0 && state.tracked_origin.is_none() {
            return Err(SimError::Checkpoint("tracked layer origin missing".into()));
        }
        let mut rng = seeded_rng(derive_seed(config.seed, &[stream::PARTITION]));
        let partition = dirichlet_partition(task.samples(), config.clients, config.beta, &mut rng)?;
        let client = ClientState {
            backbone: state.backbone,
            adapters: state.adapters,
        };
        Ok(Self {
            task,
            clients: vec![client; config.clients],
            config,
            partition,
            frozen_a: state.frozen_a,
            tracked_origin: state.tracked_origin,
            next_round: state.next_round,
        })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    pub fn partition(&self) -> &[ClientDataset] {
        &self.partition
    }

    pub fn next_round(&self) -> usize {
        self.next_round
    }

    pub fn is_finished(&self) -> bool {
        self.next_round >= self.config.rounds
    }

    /// Client 0's copy of the global model (all copies are identical).
    pub fn backbone(&self) -> &[BackboneLayer] {
        &self.clients[0].backbone
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.clients[0].adapters
    }

    /// Effective weight of the tracked layer before the first round.
    pub fn tracked_origin(&self) -> Option<&Matrix> {
        self.tracked_origin.as_ref()
    }

    pub fn pooled_loss(&self) -> Result<f64, SimError> {
        self.task.pooled_loss(self.backbone(), self.adapters())
    }

    pub fn state(&self) -> RoundState {
        RoundState {
            method: self.config.strategy.method,
            seed: self.config.seed,
            next_round: self.next_round,
            backbone: self.clients[0].backbone.clone(),
            adapters: self.clients[0].adapters.clone(),
            frozen_a: self.frozen_a.clone(),
            tracked_origin: self.tracked_origin.clone(),
        }
    }

    fn trainable(&self, round: usize) -> Trainable {
        match self.config.strategy.method {
            Method::FfaLora => Trainable::BOnly,
            Method::RoLora if rolora_trains_b(round) => Trainable::BOnly,
            Method::RoLora => Trainable::AOnly,
            _ => Trainable::Both,
        }
    }

    fn check_consistency(&self, round: usize) -> Result<(), SimError> {
        let first = &self.clients[0];
        match self.clients.iter().position(|c| c != first) {
            Some(client) => Err(SimError::StateDivergence { round, client }),
            None => Ok(()),
        }
    }

    /// Runs one round and reports on it.
    pub fn step(&mut self) -> Result<RoundReport, SimError> {
        let round = self.next_round;
        self.step_inner(round).map_err(|e| SimError::Round {
            round,
            source: Box::new(e),
        })
    }

    fn step_inner(&mut self, round: usize) -> Result<RoundReport, SimError> {
        let started = Instant::now();
        self.check_consistency(round)?;
        let cfg = &self.config;
        let trainable = self.trainable(round);

        // stages 1-2: local training and upload
        let updates: Vec<ClientUpdate> = self
            .clients
            .par_iter()
            .zip(self.partition.par_iter())
            .enumerate()
            .map(|(i, (client, data))| {
                let mut rng = seeded_rng(derive_seed(cfg.seed, &[stream::CLIENT, round as u64, i as u64]));
                local_train(self.task, &client.backbone, &client.adapters, data, &cfg.trainer, trainable, &mut rng)
            })
            .collect::<Result<_, _>>()?;

        // stage 3: aggregation
        let layers = self.task.layers.len();
        let weighting = cfg.strategy.weighting;
        let mut spectra = Vec::new();
        let mut residual_ranks = vec![0; layers];
        let broadcast = match cfg.strategy.method {
            Method::FedMomentum => {
                let out = fedmomentum_round(
                    &updates,
                    &cfg.strategy,
                    derive_seed(cfg.seed, &[stream::SERVER, round as u64]),
                )?;
                for (l, dec) in out.decompositions.iter().enumerate() {
                    spectra.push(SpectrumLog {
                        round_index: round,
                        layer_id: l,
                        sigma: dec.sigma.clone(),
                        r_eff: dec.r_eff,
                        s: dec.s,
                    });
                    if cfg.strategy.keep_residual {
                        residual_ranks[l] = dec.s;
                    }
                }
                Broadcast {
                    adapters: out.adapters,
                    merges: out.residuals,
                }
            }
            Method::FedIt => Broadcast {
                adapters: fedit_aggregate(&updates, weighting)?,
                merges: vec![None; layers],
            },
            Method::Flora => {
                let mut rng = seeded_rng(derive_seed(cfg.seed, &[stream::REINIT, round as u64]));
                let (deltas, fresh) = flora_aggregate(&updates, weighting, cfg.init, &mut rng)?;
                Broadcast {
                    adapters: fresh,
                    merges: deltas.into_iter().map(Some).collect(),
                }
            }
            Method::FfaLora => Broadcast {
                adapters: ffa_aggregate(&updates, &self.frozen_a, weighting)?,
                merges: vec![None; layers],
            },
            Method::RoLora => Broadcast {
                adapters: rolora_aggregate(&updates, round, weighting)?,
                merges: vec![None; layers],
            },
            Method::FedExLora => {
                let (adapters, residuals) = fedex_aggregate(&updates, weighting)?;
                Broadcast {
                    adapters,
                    merges: residuals.into_iter().map(Some).collect(),
                }
            }
        };

        // stage 4: every client applies the broadcast
        let old_weights: Vec<Matrix> = self.clients[0].backbone.iter().map(|b| b.weight.clone()).collect();
        self.clients.par_iter_mut().try_for_each(|client| -> Result<(), SimError> {
            for (l, merge) in broadcast.merges.iter().enumerate() {
                if let Some(delta) = merge {
                    client.backbone[l] = merge_into_backbone(&client.backbone[l], delta)?;
                }
            }
            client.adapters = broadcast.adapters.clone();
            Ok(())
        })?;
        self.next_round += 1;

        // metrics
        let state = &self.clients[0];
        let new_eff = effective_weights(&state.backbone, &state.adapters)?;
        let exact = sum_updates(&updates, weighting)?;
        let (mut err2, mut norm2) = (0.0, 0.0);
        for l in 0..layers {
            let applied = new_eff[l].sub(&old_weights[l])?;
            err2 += applied.sub(&exact[l])?.frobenius_norm().powi(2);
            norm2 += exact[l].frobenius_norm().powi(2);
        }
        let update_error = if norm2 > 0.0 { (err2 / norm2).sqrt() } else { err2.sqrt() };
        let shapes: Vec<(usize, usize)> = self.task.layers.iter().map(|l| l.base_weight.shape()).collect();
        let comm = comm_cost_per_layer(cfg.strategy.method, &shapes, cfg.rank, &residual_ranks, cfg.clients)?;
        let tracked_delta = match (cfg.track_layer, &self.tracked_origin) {
            (Some(l), Some(origin)) => Some(new_eff[l].sub(origin)?),
            _ => None,
        };
        let loss = self.task.loss_for_weights(&new_eff)?;

        Ok(RoundReport {
            round_index: round,
            method: cfg.strategy.method,
            loss,
            spectra,
            comm,
            update_error,
            tracked_delta,
            wall_time_secs: started.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining rounds.
    pub fn run(&mut self) -> Result<Vec<RoundReport>, SimError> {
        let mut reports = Vec::with_capacity(self.config.rounds.saturating_sub(self.next_round));
        while !self.is_finished() {
            reports.push(self.step()?);
        }
        Ok(reports)
    }
}

/// Runs a full simulation of `config.rounds` rounds.
pub fn run_federated(task: &SyntheticTask, config: &SimulationConfig) -> Result<Vec<RoundReport>, SimError> {
    Simulation::new(task, config.clone())?.run()
}
