//! Watermarking for discrete-state sequential data with collusion-aware
//! placement, the matching adversary suite, and owner-side leak attribution.
//!
//! The crate is organized around the owner's sharing loop: `data` holds the
//! sequence/pattern/ledger model, `allocation` decides how many points from
//! each watermark-count bucket get re-marked at the next sharing, `embedder`
//! picks the concrete positions (uniformly for independent data, correlation
//! preserving otherwise), `adversary` implements the inference and
//! modification attacks, `detector` attributes leaks back to recipients, and
//! `harness` runs seeded experiment campaigns tying it all together.

pub mod adversary;
pub mod allocation;
pub mod data;
pub mod detector;
pub mod embedder;
pub mod error;
pub mod harness;

pub use data::{counts, utility, CountHistogram, Sequence, SharingLedger, SpId, WatermarkEntry, WatermarkPattern};
pub use error::{Result, SeqmarkError};
