//! Lifted linear modeling of the rigid-body plant: observable dictionary,
//! snapshot dataset generation, least-squares operator fit, and multi-step
//! prediction accuracy evaluation.

mod dataset;
mod edmd;
mod eval;
mod lift;

pub use dataset::{
    generate_dataset, generate_dataset_seq, generate_dataset_with, ForceRanges, SnapshotDataset,
    StateRanges, SysidConfig,
};
pub use edmd::{edmd_fit, EdmdFit, KoopmanModel};
pub use eval::{evaluate_fit, evaluate_fit_seq, evaluate_fit_with, FitReport, GROUP_NAMES};
pub use lift::{hat, lift, lifted_dim, selection_matrix};
