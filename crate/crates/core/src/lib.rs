//! Federated learning with residual pooling.
//!
//! Clients train a shared CNN locally and upload the spatially mean-pooled
//! residual of every convolution kernel instead of the full update. The
//! server averages pooled residuals and keeps a history so that any client
//! can rebuild the current global model from the initial one.

pub mod codec;
pub mod data;
pub mod nn;
pub mod params;
pub mod proto;
pub mod rng;
pub mod tensor;

pub use codec::{CodecError, DeltaEntry, FilterMask, FilterPolicy, PooledDelta, ResidualDelta, WireError};
pub use data::{Batch, DataError, Dataset, PartitionPlan};
pub use nn::{Architecture, Evaluation, Hyperparams, LayerSpec, LocalTraining, NnError};
pub use params::{ModelParams, ParamEntry, ParamsError, Role};
pub use proto::{
    ClientState, FaultPlan, FedAvgState, Federation, RoundMetrics, RpnOptions, ServerState, Transfer, Weighting,
};
pub use tensor::{Shape, Tensor, TensorError};
