//! The `book/` chapters, compiled as documentation so that every Rust
//! snippet in them is checked by `cargo test`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/semantic-ids.md")]
pub mod semantic_ids {}

#[doc = include_str!("../../../book/src/rewards.md")]
pub mod rewards {}

#[doc = include_str!("../../../book/src/grpo.md")]
pub mod grpo {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
