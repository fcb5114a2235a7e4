//! Reuse-then-predict parallel sampling for diffusion models, at toy scale.
//!
//! The crate covers the numerical core ([`numerics`], [`schedule`]), a small
//! MLP noise predictor and its trainer ([`predictor`]), single-process
//! sampling strategies ([`engines`]), the multi-rank message protocol
//! ([`protocol`]) and closed-form communication models ([`commodel`]).

pub mod bench;
pub mod commodel;
pub mod engines;
pub mod numerics;
pub mod par;
pub mod predictor;
pub mod protocol;
pub mod schedule;
