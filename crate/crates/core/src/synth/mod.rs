//! Procedural corpus: shape renderer, attribute transforms, measurement
//! oracles, subject classification, and corpus generation.

pub mod attrs;
pub mod calib;
pub mod classify;
pub mod corpus;
pub mod oracle;
pub mod render;

pub use attrs::apply_attribute;
pub use calib::{CalibConstants, DEFAULT_CALIBRATION_TOML};
pub use classify::{classify_subject, TemplateBank};
pub use corpus::{expected_label, generate_corpus, load_manifest, planted_shift, CorpusConfig, Manifest, PlantMode, Planted, SampleRecord, Split};
pub use oracle::{measure_attribute, Measurement};
pub use render::{render_record_image, render_subject, RenderOutput};
