//! Pipeline commands behind the `dds` binary: synthesize a dataset, train one
//! flow per note, decompose with DDS or the NMF baseline, and evaluate.

use std::fs;
use std::path::Path;

use anyhow::Result;

pub mod config;
pub mod decompose;
pub mod eval;
pub mod layout;
pub mod synth;
pub mod table;
pub mod train;

pub use config::RunConfig;
pub use decompose::cmd_decompose;
pub use eval::cmd_eval;
pub use layout::{Layout, Method};
pub use synth::cmd_synth;
pub use train::cmd_train;

/// Write the configuration a command ran with next to its outputs.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

/// Every stage in order, with both decomposition methods.
pub fn run_all(cfg: &RunConfig, layout: &Layout, force: bool) -> Result<eval::EvalReport> {
    cmd_synth(cfg, layout, force)?;
    cmd_train(cfg, layout, force)?;
    for m in Method::ALL {
        cmd_decompose(cfg, layout, m, None)?;
    }
    cmd_eval(cfg, layout)
}
