#![allow(dead_code)]

use dds_cli::config::SplitConfig;
use dds_cli::RunConfig;

/// A configuration small enough to run every stage in seconds.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.n_presets = 3;
    cfg.data.notes = vec![57, 64];
    cfg.data.note_duration_s = 0.4;
    cfg.data.write_note_audio = false;
    cfg.data.splits = vec![SplitConfig {
        name: "s0".into(),
        train_presets: vec![0, 1],
        test_presets: vec![2],
    }];
    cfg.flow.n_coupling = 2;
    cfg.flow.hidden_width = 8;
    cfg.flow.n_hidden = 1;
    cfg.flow.max_epochs = 6;
    cfg.flow.patience = 3;
    cfg.solver.max_steps = 40;
    cfg.decompose.test_frames_per_note = 3;
    cfg.decompose.piece_splits = vec!["s0".into()];
    cfg.decompose.trace_frames = 1;
    cfg
}

/// Every regular file below `dir`, relative and sorted.
pub fn files_below(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.path().strip_prefix(dir).unwrap().to_path_buf())
        .collect()
}
