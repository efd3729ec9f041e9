//! fedsim: a deterministic cross-silo federated learning simulator and
//! benchmark harness.
//!
//! The crate simulates the full federated training loop at desk scale:
//! datasets are partitioned across clients with a Dirichlet sampler, each
//! client runs local minibatch steps on a small hand-differentiated model,
//! and a server combines the results with FedAvg, server-momentum FedOpt,
//! or SCAFFOLD control variates. A grid runner sweeps
//! architecture x initialization x aggregation cells, compares every run
//! against a centralized baseline trained on the pooled data, and writes
//! the per-round metrics to CSV.
//!
//! Everything is driven by counter-based random streams, so runs are
//! bit-for-bit reproducible regardless of thread count or scheduling.

// `!(x > 0.0)` guards intentionally reject NaN; `x <= 0.0` would not.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Indexed loops mirror the written-out math in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod bench;
pub mod data;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod models;
pub mod numkit;
pub mod optim;
pub mod pretrain;

pub use error::{Error, Result};
