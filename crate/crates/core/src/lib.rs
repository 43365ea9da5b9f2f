//! Instance-specific low-rank adaptation at desk scale.
//!
//! A SMILES-subset parser builds a [`mol::MolecularGraph`]; a frozen GIN
//! ([`encoder`]) embeds its atoms; a trainable weight generator
//! ([`mawgen`]) distils the embeddings into low-rank updates that are
//! applied transiently, in factored form, to a frozen character-level
//! decoder ([`backbone`]). [`static_lora`] is the input-independent
//! baseline. [`train`], [`eval`] and [`ablation`] drive experiments;
//! [`checkpoint`] persists them.

pub mod ablation;
pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod inject;
pub mod mawgen;
pub mod metrics;
pub mod mol;
pub mod nn;
pub mod params;
pub mod static_lora;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::ParamGroup;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
