//! Phase II: the coupled local objective, client updates, weighted
//! aggregation and the round loop.

mod aggregate;
mod federation;
mod losses;
mod objective;

pub use aggregate::{aggregate, aggregate_heads, ClientUpdate};
pub use federation::{
    architecture, prepare_federation, run_federation, run_pipeline, Anchoring, ClientRoundStats, ClientState,
    FedConfig, FederationOutcome, PreparedFederation, RoundReport,
};
pub use losses::{loss_align, loss_align_grad, loss_id, loss_id_grad, loss_tri, loss_tri_grad, TripletMining};
pub use objective::{local_objective, local_objective_grad, LocalBatch, LocalModel, ObjectiveConfig, Sgd, ViewLosses};
