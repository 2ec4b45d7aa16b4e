//! Pipeline orchestration behind the `semrec` command.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod transport;

use std::path::Path;

use semrec::synthetic::{generate_mini, MiniConfig};

pub use config::{Overrides, PipelineConfig};
pub use error::{CliError, CliResult};
pub use pipeline::{Pipeline, Stage};

pub const MINI_REVIEWS: &str = "reviews.jsonl";
pub const MINI_METADATA: &str = "meta.jsonl";

/// Write the synthetic mini corpus into `dir`.
pub fn write_mini(dir: &Path, seed: u64) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| semrec::Error::io(dir, e))?;
    let corpus = generate_mini(&MiniConfig {
        seed,
        ..MiniConfig::default()
    });
    let mut reviews = Vec::new();
    corpus.write_reviews(&mut reviews).expect("in-memory write");
    let mut meta = Vec::new();
    corpus.write_metadata(&mut meta).expect("in-memory write");
    for (name, bytes) in [(MINI_REVIEWS, reviews), (MINI_METADATA, meta)] {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| semrec::Error::io(&path, e))?;
    }
    Ok(())
}
