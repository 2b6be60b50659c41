//! Depth and pose networks built from soft-split layers and depth Linformer
//! blocks, plus parameter checkpoints.

pub mod checkpoint;
pub mod depth;
pub mod network;
pub mod ssmlp;

pub use checkpoint::Checkpoint;
pub use depth::{depth_to_disparity_value, disparity_to_depth, disparity_to_depth_value, MAX_DEPTH, MIN_DEPTH};
pub use network::{DepthNet, Encoder, NetworkConfig, PoseNet, DECODER_BLOCKS, POSE_SCALE, STAGES};
pub use ssmlp::{hidden_width, BlockConfig, DlBlock, Ssmlp, SsmlpConfig};
