//! Pipeline library for building SLM-powered user-behavior agents from
//! tabular user-item interaction logs.
//!
//! The pipeline turns raw rating logs into fine-tunable rating agents:
//!
//! 1. [`corpus`] parses interaction logs, selects a user cohort, and splits
//!    each user's history temporally into train/test sides.
//! 2. [`distill`] condenses each user's chronological history into a textual
//!    profile (short-term memory) and per-interaction rationales (long-term
//!    memory) via a chat-completion backend.
//! 3. [`memory`] indexes the long-term memories by embedding for cosine
//!    top-k retrieval.
//! 4. [`persona`] clusters profile embeddings into personas with seeded
//!    KMeans++ and elbow-based selection of the cluster count.
//! 5. [`datasets`] materializes retrieval-augmented fine-tuning datasets
//!    (per-persona and single-adapter variants) plus trainer configuration
//!    files for an external fine-tuning harness.
//! 6. [`simeval`] drives rating simulations against an inference endpoint
//!    and scores them with RMSE, MAE, and the unrelated-response rate.
//!
//! [`gateway`] provides the uniform chat/embedding client (retries, rate
//! limiting, response caching) plus a deterministic scripted mock; [`prompt`]
//! owns the fixed prompt templates and rating-response parsing.

pub mod corpus;
pub mod datasets;
pub mod distill;
pub mod fixtures;
pub mod gateway;
pub mod jsonl;
pub mod memory;
pub mod parallel;
pub mod persona;
pub mod prompt;
pub mod rng;
pub mod simeval;

pub use corpus::{InteractionRecord, ItemCard, SplitCorpus, UserHistory};
pub use gateway::{BackendConfig, ChatRequest, ChatResponse, EmbeddingVector, Gateway};
pub use memory::{MemoryIndex, RetrievalConfig};
pub use persona::PersonaModel;
pub use simeval::{MetricsReport, PredictionRecord};
