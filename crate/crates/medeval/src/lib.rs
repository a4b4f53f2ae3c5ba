//! medeval: a dual-track evaluation harness for comparing two dialogue
//! systems against reference replies.
//!
//! Track A scores lexical similarity (BLEU, ROUGE-1F/2F/LF, METEOR) with
//! Mann-Whitney significance testing; Track B drives a blinded rubric
//! protocol over an OpenAI-compatible chat-completion endpoint; a
//! divergence report reconciles the two tracks. The adapter module holds
//! desk-scale numeric kernels (gated activation, low-rank composition,
//! cross-entropy) with finite-difference gradient verification.

pub mod adapter;
pub mod config;
pub mod corpus;
pub mod judge;
pub mod metrics;
pub mod report;
pub mod stats;
pub mod textnorm;
