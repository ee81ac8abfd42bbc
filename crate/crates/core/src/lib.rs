//! Mining procedural structure out of a corpus of how-to videos.
//!
//! The crate turns per-video transcripts (plus optional pre-extracted frames)
//! into a [`graph::TaskGraph`]: task → outcome types → approaches → steps →
//! methods → clips and tips. Every model interaction goes through the
//! [`gateway`], which renders fixed prompt templates, validates structured
//! outputs and can be backed either by a live chat-completions endpoint or by
//! a deterministic [`gateway::scripted::ScriptedBackend`].

pub mod canonical;
pub mod corpus;
pub mod dai;
pub mod gateway;
pub mod graph;
pub mod method;
pub mod outcome;
pub mod pipeline;
pub mod requirements;

pub use corpus::{Corpus, FrameAsset, Sentence, VideoRecord};
pub use gateway::{Gateway, GatewayConfig, PromptCall, TemplateId};


pub use graph::TaskGraph;
pub use pipeline::{run_pipeline, PipelineConfig, PipelineRun, Stage};
