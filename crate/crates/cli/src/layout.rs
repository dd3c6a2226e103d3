//! Where every artifact lives below the output root.

use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Nmf,
    Dds,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Nmf => "nmf",
            Method::Dds => "dds",
        }
    }

    pub const ALL: [Method; 2] = [Method::Nmf, Method::Dds];
}

/// The two renderings of a piece.
pub const PIECE_KINDS: [&str; 2] = ["train", "test"];

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self) -> PathBuf {
        self.data().join("manifest.json")
    }

    pub fn frames(&self, split: &str, set: &str, pitch: u8) -> PathBuf {
        self.data().join("splits").join(split).join(format!("{set}_note{pitch}.spec"))
    }

    pub fn note_audio(&self, pitch: u8, preset: usize, velocity: u8) -> PathBuf {
        self.data()
            .join("audio")
            .join(format!("note{pitch}_preset{preset}_vel{velocity}.wav"))
    }

    pub fn piece(&self, split: &str, kind: &str, ext: &str) -> PathBuf {
        self.data().join("pieces").join(format!("{split}_{kind}.{ext}"))
    }

    pub fn piece_truth(&self, split: &str, kind: &str) -> PathBuf {
        self.data().join("pieces").join(format!("{split}_{kind}_truth.csv"))
    }

    pub fn models(&self, split: &str) -> PathBuf {
        self.root.join("models").join(split)
    }

    pub fn model(&self, split: &str, pitch: u8) -> PathBuf {
        self.models(split).join(format!("note{pitch}.flow"))
    }

    pub fn history(&self, split: &str, pitch: u8) -> PathBuf {
        self.models(split).join(format!("note{pitch}_history.csv"))
    }

    pub fn training_summary(&self, split: &str) -> PathBuf {
        self.models(split).join("training_summary.csv")
    }

    pub fn decomposition(&self, method: Method, split: &str) -> PathBuf {
        self.root.join("decompose").join(method.as_str()).join(split)
    }

    /// `{target}_{what}.csv` inside a decomposition directory.
    pub fn output(&self, method: Method, split: &str, target: &str, what: &str) -> PathBuf {
        self.decomposition(method, split).join(format!("{target}_{what}.csv"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.reports().join(name)
    }
}

pub fn note_target(pitch: u8) -> String {
    format!("note{pitch}")
}

pub fn piece_target(kind: &str) -> String {
    format!("piece_{kind}")
}
