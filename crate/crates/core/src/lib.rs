//! Disentangled local explanations for black-box models over two input
//! modalities.
//!
//! A model's logits at a point are split into a unimodal part (what each
//! modality contributes on its own) and a multimodal interaction part, and a
//! LIME-style weighted linear surrogate is fit to each part over random
//! feature masks of one modality. See [`dime::DimeExplainer`] for the entry
//! point.

pub mod data;
pub mod disentangle;
pub mod gateway;
pub mod numerics;
pub mod dime;
pub mod surrogate;
