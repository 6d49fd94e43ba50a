//! Object-centric preference adaptation.
//!
//! A graph-structured policy maps every agent-object relation through a
//! shared relation network, gated by a small learned preference vector per
//! object type. Pretraining fits the shared networks and the anchor
//! preferences on synthetic experts; one-shot adaptation then optimizes only
//! the per-object preferences through a differentiable open-loop rollout.

pub mod adapter;
pub mod checkpoint;
pub mod datagen;
pub mod eval;
pub mod grad;
pub mod par;
pub mod policy;
pub mod rotmath;
pub mod scene;
pub mod trainer;
