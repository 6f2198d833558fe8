//! Client/server protocol: local training, aggregation strategies and
//! selective upload of the rectification stream.

mod local;
mod opts;
mod protocol;
mod server;

pub use local::{local_update_dual, local_update_single, ClientUpdate, DualOutcome, StepRecord};
pub use opts::{LocalOpts, Mode, Objective, Strategy, TeacherRefresh};
pub use protocol::{
    global_model, run_round, ClientReport, ClientState, Envelope, Federation, RoundConfig,
    RoundOutcome, RoundReport, ENVELOPE_HEADER_LEN,
};
pub use server::{aggregate, aggregate_detailed, mean_delta, weights, Aggregated, ServerState};
