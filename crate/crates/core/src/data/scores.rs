//! Per-frame score files: a CSV header, then `video_id,frame,v1,v2,...`
//! with six decimals, videos written contiguously in the given order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const AU_NAMES: [&str; 12] = [
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    Va,
    Au,
}

impl ScoreKind {
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            ScoreKind::Va => &["valence", "arousal"],
            ScoreKind::Au => &AU_NAMES,
        }
    }

    pub fn width(self) -> usize {
        self.columns().len()
    }

    fn header(self) -> String {
        format!("video_id,frame,{}", self.columns().join(","))
    }
}

/// Row-major `n_frames × kind.width()` scores for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoScores {
    pub video_id: String,
    pub values: Vec<f64>,
}

impl VideoScores {
    pub fn from_va(video_id: impl Into<String>, frames: &[[f64; 2]]) -> Self {
        Self {
            video_id: video_id.into(),
            values: frames.iter().flatten().copied().collect(),
        }
    }

    pub fn n_frames(&self, kind: ScoreKind) -> usize {
        self.values.len() / kind.width()
    }

    pub fn va_frames(&self) -> Vec<[f64; 2]> {
        self.values.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
    }
}

pub fn format_scores(kind: ScoreKind, videos: &[VideoScores]) -> Result<String> {
    let w = kind.width();
    let mut out = kind.header();
    out.push('\n');
    for v in videos {
        if v.video_id.is_empty() || v.video_id.contains([',', '\n', '\r']) {
            return Err(Error::contract(format!(
                "video id `{}` cannot be written to a score file",
                v.video_id
            )));
        }
        if v.values.len() % w != 0 {
            return Err(Error::contract(format!(
                "video `{}`: {} scores is not a multiple of {w} columns",
                v.video_id,
                v.values.len()
            )));
        }
        for (i, row) in v.values.chunks_exact(w).enumerate() {
            write!(out, "{},{i}", v.video_id).unwrap();
            for x in row {
                if !x.is_finite() {
                    return Err(Error::contract(format!(
                        "video `{}` frame {i}: non-finite score",
                        v.video_id
                    )));
                }
                write!(out, ",{x:.6}").unwrap();
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn parse_scores(text: &str, file: &str) -> Result<(ScoreKind, Vec<VideoScores>)> {
    let perr = |offset: usize, reason: String| Error::Parse {
        file: file.to_string(),
        offset: offset as u64,
        reason,
    };
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().unwrap_or("").trim_end();
    let kind = [ScoreKind::Va, ScoreKind::Au]
        .into_iter()
        .find(|k| k.header() == header)
        .ok_or_else(|| perr(0, format!("unrecognised header `{header}`")))?;
    let w = kind.width();
    let mut offset = text.split_inclusive('\n').next().map_or(0, str::len);
    let mut videos: Vec<VideoScores> = Vec::new();
    for line in lines {
        let start = offset;
        offset += line.len();
        let row = line.trim_end();
        if row.is_empty() {
            continue;
        }
        let cols: Vec<&str> = row.split(',').collect();
        if cols.len() != w + 2 {
            return Err(perr(
                start,
                format!("expected {} columns, got {}", w + 2, cols.len()),
            ));
        }
        let frame: usize = cols[1]
            .parse()
            .map_err(|_| perr(start, format!("bad frame index `{}`", cols[1])))?;
        let current = match videos.last_mut() {
            Some(v) if v.video_id == cols[0] => v,
            _ => {
                if videos.iter().any(|v| v.video_id == cols[0]) {
                    return Err(perr(
                        start,
                        format!("video `{}` is not contiguous", cols[0]),
                    ));
                }
                videos.push(VideoScores {
                    video_id: cols[0].to_string(),
                    values: Vec::new(),
                });
                videos.last_mut().unwrap()
            }
        };
        if frame != current.values.len() / w {
            return Err(perr(
                start,
                format!("video `{}`: frame {frame} out of order", current.video_id),
            ));
        }
        for c in &cols[2..] {
            let x: f64 = c
                .parse()
                .map_err(|_| perr(start, format!("bad score `{c}`")))?;
            current.values.push(x);
        }
    }
    Ok((kind, videos))
}

pub fn write_scores(path: impl AsRef<Path>, kind: ScoreKind, videos: &[VideoScores]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_scores(kind, videos)?).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<(ScoreKind, Vec<VideoScores>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<VideoScores> {
        vec![
            VideoScores::from_va("a", &[[0.1234567, -0.5], [1.0, -1.0], [0.0, 0.3333333]]),
            VideoScores::from_va("b", &[[-0.25, 0.75]]),
        ]
    }

    #[test]
    fn round_trip_within_rounding() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let vids = sample();
        write_scores(&p, ScoreKind::Va, &vids).unwrap();
        let (kind, back) = read_scores(&p).unwrap();
        assert_eq!(kind, ScoreKind::Va);
        assert_eq!(back.len(), 2);
        for (a, b) in vids.iter().zip(&back) {
            assert_eq!(a.video_id, b.video_id);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() <= 5e-7);
            }
        }
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1 + 4);
        assert!(text.contains("a,0,0.123457,-0.500000\n"));
    }

    #[test]
    fn empty_list_is_header_only() {
        let text = format_scores(ScoreKind::Au, &[]).unwrap();
        assert_eq!(text, format!("video_id,frame,{}\n", AU_NAMES.join(",")));
        let (kind, v) = parse_scores(&text, "x").unwrap();
        assert_eq!(kind, ScoreKind::Au);
        assert!(v.is_empty());
    }

    #[test]
    fn deterministic_output() {
        let a = format_scores(ScoreKind::Va, &sample()).unwrap();
        let b = format_scores(ScoreKind::Va, &sample()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_rows() {
        let h = "video_id,frame,valence,arousal\n";
        assert!(parse_scores("nope\n", "x").is_err());
        assert!(parse_scores(&format!("{h}a,0,0.1\n"), "x").is_err());
        assert!(parse_scores(&format!("{h}a,1,0.1,0.2\n"), "x").is_err());
        assert!(parse_scores(&format!("{h}a,0,0.1,0.2\nb,0,0,0\na,1,0,0\n"), "x").is_err());
        match parse_scores(&format!("{h}a,0,x,0.2\n"), "x").unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset as usize, h.len()),
            e => panic!("{e}"),
        }
    }
}
