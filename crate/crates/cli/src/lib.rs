//! Experiment front end: training runs, parameter sweeps over seeds, and
//! post-hoc analysis of metrics logs.

pub mod analyze;
pub mod manifest;
pub mod plots;
pub mod run;
pub mod sweep;

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};

/// Environment variable naming the scratch directory used when `--out`
/// is omitted.
pub const SCRATCH_ENV: &str = "ILNET_SCRATCH";

/// `explicit`, or `$ILNET_SCRATCH/<sub>` when it is absent.
pub fn resolve_out(explicit: Option<&Path>, scratch: Option<&Path>, sub: &str) -> Result<PathBuf> {
    match (explicit, scratch) {
        (Some(p), _) => Ok(p.to_path_buf()),
        (None, Some(s)) => Ok(s.join(sub)),
        (None, None) => bail!("no --out given and {SCRATCH_ENV} is not set"),
    }
}
