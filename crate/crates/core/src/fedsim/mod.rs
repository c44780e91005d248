//! Synchronous federated fine-tuning simulator.
//!
//! A round runs four stages: clients train their adapters locally from
//! the broadcast state, upload them, the server aggregates with the
//! configured [`Method`](crate::aggregation::Method), and every client
//! applies the broadcast result (backbone merges plus new adapters).
//! All randomness is derived from a single master seed, so runs are
//! reproducible regardless of thread count.

mod partition;
mod run;
mod task;
mod train;

pub use partition::{dirichlet_partition, ClientDataset};
pub use run::{run_federated, RoundReport, RoundState, Simulation, SimulationConfig};
pub use task::{effective_weights, make_teacher_student_task, SyntheticTask, TaskLayer, TaskSpec};
pub use train::{batch_loss_and_gradients, local_train, OptimizerKind, Trainable, TrainerConfig};

use thiserror::Error;

use crate::aggregation::AggregationError;
use crate::linalg::LinalgError;
use crate::lora::LoraError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("expected {expected} layers, got {got}")]
    LayerCount { expected: usize, got: usize },
    #[error("client {0} has no samples")]
    EmptyClient(usize),
    #[error("client {client} diverged at local step {step} (non-finite parameters)")]
    Diverged { client: usize, step: usize },
    #[error("round {round}: client {client} state differs from client 0")]
    StateDivergence { round: usize, client: usize },
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<SimError>,
    },
    #[error("checkpoint does not match this simulation: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}
