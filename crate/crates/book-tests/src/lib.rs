//! The guide's chapters as doc comments, one module each, so `cargo test`
//! runs every Rust block in `book/src` and a failure names its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/glasso.md")]
pub mod glasso {}

#[doc = include_str!("../../../book/src/factor_glasso.md")]
pub mod factor_glasso {}

#[doc = include_str!("../../../book/src/rd_factor_glasso.md")]
pub mod rd_factor_glasso {}

#[doc = include_str!("../../../book/src/backtest.md")]
pub mod backtest {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
