//! Text-guided, mask-free object addition.
//!
//! The crate covers the whole loop: building `(image without object,
//! caption) → (image with object, mask)` training tuples, a diffusion
//! denoiser trained jointly with an object-mask head, dual-condition
//! classifier-free guided sampling with iterative mask blending, and an
//! evaluation suite over any method's outputs.
//!
//! The narrative guide lives in the `book/` directory of the repository;
//! its code listings are compiled as doc-tests of this crate.

pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
mod http;
pub mod imaging;
pub mod mask;
pub mod oracle;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/dataset.md")]
    mod dataset {}
    #[doc = include_str!("../../../book/src/forward-process.md")]
    mod forward_process {}
    #[doc = include_str!("../../../book/src/mask-head.md")]
    mod mask_head {}
    #[doc = include_str!("../../../book/src/guidance.md")]
    mod guidance {}
    #[doc = include_str!("../../../book/src/iterative-editing.md")]
    mod iterative_editing {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
}
