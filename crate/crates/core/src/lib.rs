//! Cross-modal contrastive alignment at desk scale: toy dual encoders,
//! sigmoid cross-attention, clustering-guided hard-negative mining with a
//! bidirectional margin on false negatives, SimSiam-style local image
//! alignment, and text-guided masked image reconstruction, trained on a
//! synthetic paired image/report corpus with known correspondences.
//!
//! Everything numeric runs in `f64` on a small reverse-mode tape
//! ([`autodiff`]) and every random draw comes from keyed counter-based
//! streams ([`rng`]), so runs are bit-reproducible from `(seed, config)`.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod crc64;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod mining;
pub mod model;
pub mod recon;
pub mod rng;
pub mod trainer;

pub use config::{load_run_config, EvalConfig, RunConfig, CONFIG_SCHEMA_VERSION};
pub use corpus::{
    generate_corpus, read_corpus, split_ids, write_corpus, CorpusConfig, PairedSample,
};
pub use error::{Error, Result};
pub use eval::{AttnAlignmentReport, Direction, RetrievalReport};
pub use losses::{LossBreakdown, LossWeights};
pub use mining::{CgnsConfig, ClusterOutcome};
pub use model::{ModelConfig, ModelParams};
pub use recon::MaskSpec;
pub use trainer::{Stage2Objective, TrainConfig};
