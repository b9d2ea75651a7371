//! Read-only web monitor over pool snapshots.

pub mod filter;
pub mod render;
mod server;
mod snapshot;

pub use filter::{Clause, Constraint, Field, FieldKind, FilterError, FilterQuery};
pub use render::{respond, Endpoint, Format, QueryError, Response, ViewQuery};
pub use server::{serve, WebServer};
pub use snapshot::{JobView, SnapshotHandle, StateSnapshot, SystemSummary, TaskView};
