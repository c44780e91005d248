//! Runs every requested method on one shared task and exports the reports.
//!
//! All methods see the same task, partition and initial adapters: each is
//! derived from the master seed alone. The partition and initialization
//! hashes are recorded per method in `run_config.json`, and the runner
//! refuses to export if they ever disagree.

use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use fedlora::aggregation::Method;
use fedlora::fedsim::{make_teacher_student_task, ClientDataset, SimError, Simulation, SyntheticTask};
use fedlora::lora::LoraAdapter;
use fedlora::metrics::{
    export_reports, landscape_grid, trajectory_pca, ExportBundle, GridCell, MethodRun, MetricsError, TrajectoryInput,
    TrajectoryPoint, EFFECTIVE_RANK_FORMULA,
};
use fedlora::rng::{derive_seed, seeded_rng, stream};
use fedlora::Matrix;

use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{method}: {source}")]
    Method {
        method: Method,
        #[source]
        source: SimError,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub rounds: usize,
    pub final_loss: Option<f64>,
    pub partition_hash: String,
    pub init_hash: String,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub methods: Vec<MethodSummary>,
    pub files: Vec<PathBuf>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn partition_hash(partition: &[ClientDataset]) -> String {
    let mut h = Sha256::new();
    for c in partition {
        h.update((c.client_id as u64).to_le_bytes());
        h.update((c.indices.len() as u64).to_le_bytes());
        for &i in &c.indices {
            h.update((i as u64).to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn hash_matrix(h: &mut Sha256, m: &Matrix) {
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.to_bits().to_le_bytes());
    }
}

/// Hash of the initial backbone and adapters, bit for bit.
pub fn init_hash(backbone: &[Matrix], adapters: &[LoraAdapter]) -> String {
    let mut h = Sha256::new();
    for w in backbone {
        hash_matrix(&mut h, w);
    }
    for a in adapters {
        hash_matrix(&mut h, a.a());
        hash_matrix(&mut h, a.b());
        h.update(a.alpha().to_bits().to_le_bytes());
    }
    hex(&h.finalize())
}

pub fn build_task(cfg: &RunConfig) -> Result<SyntheticTask, SimError> {
    let mut rng = seeded_rng(derive_seed(cfg.seed, &[stream::TASK]));
    make_teacher_student_task(&cfg.task_spec(), &mut rng)
}

/// Keeps every `stride`-th round (and always the last) so each method
/// contributes at most `max_points` trajectory points.
fn strided_rounds(rounds: usize, max_points: usize) -> Vec<usize> {
    if rounds == 0 {
        return Vec::new();
    }
    let stride = rounds.div_ceil(max_points.max(1));
    let mut keep: Vec<usize> = (0..rounds).filter(|r| (r + 1) % stride == 0).collect();
    if keep.last() != Some(&(rounds - 1)) {
        keep.push(rounds - 1);
    }
    while keep.len() > max_points.max(1) {
        keep.remove(0);
    }
    keep
}

/// Trajectory PCA over all methods plus the loss landscape on its plane.
fn trajectory_outputs(
    cfg: &RunConfig,
    task: &SyntheticTask,
    runs: &[MethodRun],
    origin: Option<&Matrix>,
) -> Result<(Vec<TrajectoryPoint>, Vec<GridCell>), RunError> {
    let Some(origin) = origin else {
        return Ok((Vec::new(), Vec::new()));
    };
    let mut inputs = Vec::new();
    for run in runs {
        for r in strided_rounds(run.reports.len(), cfg.metrics.max_trajectory_points) {
            let report = &run.reports[r];
            if let Some(delta) = &report.tracked_delta {
                inputs.push(TrajectoryInput {
                    round_index: report.round_index,
                    method: run.method.to_string(),
                    delta: delta.clone(),
                });
            }
        }
    }
    if inputs.len() < 2 {
        return Ok((Vec::new(), Vec::new()));
    }
    let layer = cfg.metrics.pca_layer;
    let reference = task.layer_loss(layer, origin)?;
    let loss_at = |delta: &Matrix| {
        origin
            .add(delta)
            .ok()
            .and_then(|w| task.layer_loss(layer, &w).ok())
            .unwrap_or(f64::NAN)
    };
    let mut pca = trajectory_pca(&inputs)?;
    pca.attach_losses(reference, loss_at);
    let grid = landscape_grid(&pca, cfg.metrics.grid, reference, loss_at);
    Ok((pca.points, grid))
}

/// Runs all configured methods and writes the report files.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    let task = build_task(cfg)?;
    let mut runs = Vec::with_capacity(cfg.methods.len());
    let mut summaries = Vec::with_capacity(cfg.methods.len());
    let mut origin = None;

    for &method in &cfg.methods {
        let started = Instant::now();
        let wrap = |source| RunError::Method { method, source };
        let mut sim = Simulation::new(&task, cfg.simulation_config(method)).map_err(wrap)?;
        let p_hash = partition_hash(sim.partition());
        let backbone: Vec<Matrix> = sim.backbone().iter().map(|b| b.weight.clone()).collect();
        let i_hash = init_hash(&backbone, sim.adapters());
        if origin.is_none() {
            origin = sim.tracked_origin().cloned();
        }
        let reports = sim.run().map_err(wrap)?;
        summaries.push(MethodSummary {
            method,
            rounds: reports.len(),
            final_loss: reports.last().map(|r| r.loss),
            partition_hash: p_hash,
            init_hash: i_hash,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
        runs.push(MethodRun { method, reports });
    }

    if let Some(first) = summaries.first() {
        if summaries
            .iter()
            .any(|s| s.partition_hash != first.partition_hash || s.init_hash != first.init_hash)
        {
            return Err(RunError::Inconsistent(
                "methods did not share the same partition and initialization".into(),
            ));
        }
    }

    let (trajectory, landscape) = trajectory_outputs(cfg, &task, &runs, origin.as_ref())?;

    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let run_config = json!({
        "config": cfg,
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "effective_rounds": cfg.effective_rounds(),
        "effective_rank_formula": EFFECTIVE_RANK_FORMULA,
        "optimizer": {
            "kind": cfg.trainer.optimizer,
            "beta1": cfg.trainer.beta1,
            "beta2": cfg.trainer.beta2,
            "epsilon": cfg.trainer.epsilon,
            "weight_decay": cfg.trainer.weight_decay,
            "moments": "reset every round",
        },
        "partition_hash": summaries.first().map(|s| s.partition_hash.clone()),
        "init_hash": summaries.first().map(|s| s.init_hash.clone()),
        "runs": summaries,
        "generated_unix_time": timestamp,
    });

    let files = export_reports(
        &ExportBundle {
            runs: &runs,
            trajectory: &trajectory,
            landscape: &landscape,
            run_config: &run_config,
        },
        &cfg.out_dir,
    )?;

    Ok(RunSummary {
        out_dir: cfg.out_dir.clone(),
        methods: summaries,
        files,
    })
}
