//! Monotonic attention: energies, expected alignments, hard boundaries,
//! chunkwise attention, and HeadDrop.

pub mod alignment;
pub mod chunk;
pub mod energy;
pub mod headdrop;

pub use alignment::{expected_alignment, expected_alignment_var, first_activation, hard_boundary, ACTIVATION_THRESHOLD};
pub use chunk::{chunk_weights, chunk_weights_at, chunk_weights_var, chunkwise_attention, ChunkHeadParams, HeadAlignment};
pub use energy::{energy_at, monotonic_energy, selection_probs, MonotonicHeadParams, R_INIT};
pub use headdrop::{HeadDropConfig, HeadDropMask};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Test,
}
