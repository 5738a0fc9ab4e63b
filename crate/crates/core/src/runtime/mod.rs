//! Distributed execution: nodes exchanging activations over a simulated or
//! TCP network, in centralized (fork-join) or decentralized (replicated
//! attention and router, one all-reduce per layer) mode.

pub mod cluster;
pub mod collective;
pub mod cost;
pub mod envoy;
pub mod frame;
mod node;
pub mod transport;

pub use cluster::{run_cluster, run_tcp_node, RunReport, TokenRow};
pub use collective::all_reduce;
pub use cost::DeviceParams;
pub use frame::{decode_frame, encode_frame, Frame, MsgType, HEADER_LEN, LENGTH_PREFIX, MAX_FRAME_LEN};
pub use node::NodeStats;
pub use transport::{simulated_send, TransportParams};
