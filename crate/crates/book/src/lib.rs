//! Runs the code blocks of the guide in `book/src` as doctests.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}
#[doc = include_str!("../../../book/src/worlds.md")]
pub mod worlds {}
#[doc = include_str!("../../../book/src/acoustics.md")]
pub mod acoustics {}
#[doc = include_str!("../../../book/src/rewards.md")]
pub mod rewards {}
#[doc = include_str!("../../../book/src/episodes.md")]
pub mod episodes {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
