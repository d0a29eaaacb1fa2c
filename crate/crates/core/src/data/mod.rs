//! Per-frame feature ingestion, windowing, synthetic data and score files.

mod afb1;
mod manifest;
mod scores;
mod synth;
mod window;

pub(crate) use afb1::Reader;
pub use afb1::{decode_video, encode_video, read_video_file, write_video_file, AU_COUNT};
pub use manifest::{Manifest, ManifestEntry, Split};
pub use scores::{
    format_scores, parse_scores, read_scores, write_scores, ScoreKind, VideoScores, AU_NAMES,
};
pub use synth::{linear_probe_ccc, synth_generate, synth_generate_au, SynthSpec};
pub use window::{
    center_stitch, inference_spans, window_sequences, window_spans, BatchLabels, SequenceBatch,
    Span, WindowRef,
};

use crate::error::{Error, Result};

/// Per-frame annotations carried by a [`VideoRecord`].
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    None,
    /// `[valence, arousal]` per frame, each in `[-1, 1]`.
    Va(Vec<[f32; 2]>),
    /// 12 action-unit bits per frame.
    Au(Vec<[u8; AU_COUNT]>),
}

impl Labels {
    pub fn kind_code(&self) -> u8 {
        match self {
            Labels::None => 0,
            Labels::Va(_) => 1,
            Labels::Au(_) => 2,
        }
    }

    pub fn frames(&self) -> Option<usize> {
        match self {
            Labels::None => None,
            Labels::Va(v) => Some(v.len()),
            Labels::Au(v) => Some(v.len()),
        }
    }
}

/// One video's per-frame feature matrix and optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub n_frames: usize,
    pub feat_dim: usize,
    /// Row-major `n_frames × feat_dim`.
    pub features: Vec<f32>,
    pub labels: Labels,
}

impl VideoRecord {
    pub fn new(
        video_id: impl Into<String>,
        feat_dim: usize,
        features: Vec<f32>,
        labels: Labels,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if feat_dim == 0 || features.is_empty() || !features.len().is_multiple_of(feat_dim) {
            return Err(Error::contract(format!(
                "video `{video_id}`: {} feature values do not form rows of width {feat_dim}",
                features.len()
            )));
        }
        let rec = Self {
            n_frames: features.len() / feat_dim,
            video_id,
            feat_dim,
            features,
            labels,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.n_frames * self.feat_dim {
            return Err(Error::contract(format!(
                "video `{}`: feature buffer size {} != {} frames × {} dims",
                self.video_id,
                self.features.len(),
                self.n_frames,
                self.feat_dim
            )));
        }
        if let Some(n) = self.labels.frames() {
            if n != self.n_frames {
                return Err(Error::contract(format!(
                    "video `{}`: {n} label frames for {} feature frames",
                    self.video_id, self.n_frames
                )));
            }
        }
        match &self.labels {
            Labels::Va(v) => {
                if let Some(i) = v
                    .iter()
                    .position(|l| l.iter().any(|x| !(-1.0..=1.0).contains(x)))
                {
                    return Err(Error::contract(format!(
                        "video `{}`: VA label at frame {i} outside [-1, 1]",
                        self.video_id
                    )));
                }
            }
            Labels::Au(v) => {
                if let Some(i) = v.iter().position(|l| l.iter().any(|&b| b > 1)) {
                    return Err(Error::contract(format!(
                        "video `{}`: AU bits at frame {i} outside {{0, 1}}",
                        self.video_id
                    )));
                }
            }
            Labels::None => {}
        }
        Ok(())
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.features[i * self.feat_dim..(i + 1) * self.feat_dim]
    }

    pub fn va_labels(&self) -> Option<&[[f32; 2]]> {
        match &self.labels {
            Labels::Va(v) => Some(v),
            _ => None,
        }
    }

    pub fn au_labels(&self) -> Option<&[[u8; AU_COUNT]]> {
        match &self.labels {
            Labels::Au(v) => Some(v),
            _ => None,
        }
    }
}
