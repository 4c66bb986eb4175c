// mdbook cannot run listings that depend on a workspace crate, so each
// chapter is pulled in as the docs of an empty module and `cargo test --doc`
// runs its code blocks. One module per chapter keeps failures attributable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/selection.md")]
pub mod selection {}
#[doc = include_str!("../../../book/src/cointegration.md")]
pub mod cointegration {}
#[doc = include_str!("../../../book/src/trading.md")]
pub mod trading {}
#[doc = include_str!("../../../book/src/statarb.md")]
pub mod statarb_test {}
#[doc = include_str!("../../../book/src/synthetic.md")]
pub mod synthetic {}
#[doc = include_str!("../../../book/src/runs.md")]
pub mod runs {}
