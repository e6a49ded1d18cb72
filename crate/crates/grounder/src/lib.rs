//! Referential grounding on synthetic scenes with frozen transformer
//! backbones and lightweight tunable fusion modules.
//!
//! The crate is laid out bottom-up: dense math ([`tensor`], [`tape`]),
//! parameter bookkeeping ([`params`], [`config`], [`budget`]), model pieces
//! ([`encoder`], [`fusion`], [`model`]), geometry ([`boxes`]), data
//! ([`data`]), and the training/eval loop ([`trainer`]) with persistence
//! ([`checkpoint`]) and attention export ([`attention`]).

pub mod attention;
pub mod boxes;
pub mod budget;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod fusion;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod trainer;
