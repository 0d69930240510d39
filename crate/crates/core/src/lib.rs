//! Progressive domain adaptation for thermal-infrared object tracking.
//!
//! A Siamese tracker trained on labeled source-domain video is adapted to an
//! unlabeled target domain in two stages: adversarial alignment of global
//! feature style, then alignment of clustered subdomains.

pub mod agda;
pub mod config;
pub mod csda;
pub mod data;
pub mod error;
pub mod eval;
pub mod frame;
pub mod geometry;
pub mod nn;
pub mod pipeline;
pub mod synthetic;
pub mod tracker;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use geometry::BBox;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/tracker.md")]
    mod tracker {}
    #[doc = include_str!("../../../book/src/global_adaptation.md")]
    mod global_adaptation {}
    #[doc = include_str!("../../../book/src/subdomain_adaptation.md")]
    mod subdomain_adaptation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
