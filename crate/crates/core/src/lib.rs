//! Toolkit for multilingual Spanish→indigenous-language translation at desk
//! scale: corpus ingestion and normalization, chrF scoring, a character-level
//! transformer trained with language tags and temperature sampling, ensemble
//! beam search, backtranslation, and dev-set checkpoint/ensemble selection.

pub mod codec;
pub mod corpus;
pub mod metrics;
pub mod model;
pub mod report;
pub mod sampler;
pub mod synthetic;
pub mod decode;
pub mod pipeline;
