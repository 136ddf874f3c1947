//! Proxy-based metric learning for multi-label positive-unlabeled data.
//!
//! The library builds a small feed-forward encoder whose outputs live on the
//! unit sphere together with one trainable proxy direction per class plus a
//! shared null proxy. Classification is a per-class comparison of proxy
//! similarities; training minimizes positive-unlabeled risk estimates with
//! optional embedding augmentation (two dropout passes per positive) and
//! proxy-anchored mixup. Everything is driven by a reverse-mode tape over a
//! fixed set of vector operations, so every loss variant is differentiated
//! exactly and checked against finite differences.
//!
//! Modules follow the data flow: [`autodiff`] (tape), [`encoder`] (model),
//! [`priors`] (class-prior bookkeeping), [`losses`] (risk estimators),
//! [`datagen`] (synthetic corpora), [`train_eval`] (optimization and
//! metrics), [`gradcheck`] (finite-difference verification), [`cli`]
//! (subcommand implementations behind the `p3m` binary).

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod priors;
pub mod train_eval;

pub use error::{Error, Result};
