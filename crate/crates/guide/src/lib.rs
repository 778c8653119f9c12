//! The chapters of `book/` compiled as doc-tests, so the guide's code keeps
//! building against the current library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/factor-gaussian.md")]
pub mod factor_gaussian {}

#[doc = include_str!("../../../book/src/gradients.md")]
pub mod gradients {}

#[doc = include_str!("../../../book/src/fitting.md")]
pub mod fitting {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/full-baseline.md")]
pub mod full_baseline {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
