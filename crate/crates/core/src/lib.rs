//! Object-query cooperative perception.
//!
//! Each connected vehicle keeps only its `k` most confident object queries, ships them with
//! their predicted centers and class scores, and the ego vehicle aligns the received queries
//! into its own frame, fuses them with a masked self-attention stack, and decodes boxes from
//! every fusion layer. A synthetic multi-agent world stands in for real sensors so the whole
//! pipeline can be trained and evaluated on a desk.

pub mod geometry;
pub mod heads;
pub mod numerics;
pub mod fusion;
pub mod sim;
pub mod verify;
pub mod wire;
