//! Deep cross-media knowledge transfer: paired image/text networks for two
//! domains, coupled by kernel two-sample (MMD) losses at the media and
//! correlation levels, trained under a progressive curriculum that admits
//! target pairs by source-model retrieval consistency, and evaluated with
//! bidirectional cross-media retrieval MAP.

pub mod config;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod nn;
pub mod retrieval;
pub mod runner;

pub use error::{Error, Result};

use std::path::Path;

/// Writes a file atomically: the bytes go to a sibling temp file first and
/// are renamed into place, so a crash never leaves a partial artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}
