//! Synthetic client tasks and non-IID partitioners.
//!
//! Partitioners assign samples one at a time: each sample of class `c` goes
//! to client `i` with probability `shares[c][i]`. If a draw leaves any
//! client empty, the shares are drawn again (up to
//! [`MAX_EMPTY_SHARD_RETRIES`] times) before giving up with an error.

mod partition;
mod synthetic;

pub use partition::{
    dirichlet_partition, pachinko_partition, pathological_partition, LabeledPool, PartitionPlan,
    MAX_EMPTY_SHARD_RETRIES,
};
pub use synthetic::{
    make_synthetic, random_rotation, rotate, ClientData, PartitionScheme, Shift, SyntheticTask,
    SyntheticWorld, TaskSpec,
};
