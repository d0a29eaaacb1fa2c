use super::afb1::AU_COUNT;
use super::{Labels, VideoRecord};
use crate::error::{Error, Result};
use crate::losses::VaTargets;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A window `[start, start + len)` over a video, of which the first
/// `valid` frames are real; the rest repeat the last real frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
    pub valid: usize,
}

/// Training windows of length `s` every `stride` frames. The last window
/// is padded when it runs past the end, so every frame is covered.
pub fn window_spans(n_frames: usize, s: usize, stride: usize) -> Result<Vec<Span>> {
    if s == 0 || stride == 0 || stride > s {
        return Err(Error::contract(format!(
            "window length {s} and stride {stride} must satisfy 1 <= stride <= length"
        )));
    }
    if n_frames == 0 {
        return Err(Error::contract("cannot window an empty sequence"));
    }
    let mut spans = Vec::new();
    let mut start = 0;
    loop {
        spans.push(Span {
            start,
            len: s,
            valid: s.min(n_frames - start),
        });
        if start + s >= n_frames {
            break;
        }
        start += stride;
    }
    Ok(spans)
}

/// Inference windows: one unpadded pass when the video fits in `s` frames,
/// otherwise length-`s` windows at half-window stride with the last one
/// flush against the end.
pub fn inference_spans(n_frames: usize, s: usize) -> Vec<Span> {
    if n_frames <= s {
        return vec![Span {
            start: 0,
            len: n_frames,
            valid: n_frames,
        }];
    }
    let stride = (s / 2).max(1);
    let mut spans = Vec::new();
    let mut start = 0;
    while start + s < n_frames {
        spans.push(Span {
            start,
            len: s,
            valid: s,
        });
        start += stride;
    }
    spans.push(Span {
        start: n_frames - s,
        len: s,
        valid: s,
    });
    spans
}

/// For each frame, the `(span index, offset within span)` whose window
/// places that frame furthest from its edges.
pub fn center_stitch(n_frames: usize, spans: &[Span]) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut best: Option<(usize, usize, usize)> = None;
        for (si, sp) in spans.iter().enumerate() {
            if f < sp.start || f >= sp.start + sp.valid {
                continue;
            }
            let off = f - sp.start;
            let margin = off.min(sp.valid - 1 - off);
            if best.is_none_or(|(_, _, m)| margin > m) {
                best = Some((si, off, margin));
            }
        }
        let (si, off, _) =
            best.ok_or_else(|| Error::contract(format!("frame {f} is not covered by any window")))?;
        out.push((si, off));
    }
    Ok(out)
}

/// A window of a specific video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub video: usize,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchLabels {
    None,
    /// `[B·T]` valence/arousal pairs.
    Va(Vec<[f64; 2]>),
    /// `[B·T·12]` bits.
    Au(Vec<u8>),
}

/// `[B, T, d]` feature block with a validity mask over the `B·T` frames.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    pub x: Tensor<f64>,
    pub mask: Vec<bool>,
    pub labels: BatchLabels,
    pub windows: Vec<WindowRef>,
}

impl SequenceBatch {
    /// Gathers equal-length windows into one batch, padding short windows
    /// by repeating their last real frame (features and labels alike).
    pub fn collate(records: &[VideoRecord], windows: &[WindowRef]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::contract("cannot collate an empty batch"))?;
        let t = first.span.len;
        let d = records[first.video].feat_dim;
        let b = windows.len();
        let mut x = Vec::with_capacity(b * t * d);
        let mut mask = Vec::with_capacity(b * t);
        let mut va = Vec::new();
        let mut au = Vec::new();
        let mut kind = None;
        for w in windows {
            let rec = &records[w.video];
            if w.span.len != t || rec.feat_dim != d {
                return Err(Error::contract(
                    "windows in a batch must share length and feature dim",
                ));
            }
            if w.span.valid == 0 || w.span.start + w.span.valid > rec.n_frames {
                return Err(Error::contract(format!(
                    "window {:?} out of range for video `{}` ({} frames)",
                    w.span, rec.video_id, rec.n_frames
                )));
            }
            let code = rec.labels.kind_code();
            if *kind.get_or_insert(code) != code {
                return Err(Error::contract("mixed label kinds in one batch"));
            }
            for k in 0..t {
                let f = w.span.start + k.min(w.span.valid - 1);
                x.extend(rec.frame(f).iter().map(|&v| v as f64));
                mask.push(k < w.span.valid);
                match &rec.labels {
                    Labels::Va(l) => va.push([l[f][0] as f64, l[f][1] as f64]),
                    Labels::Au(l) => au.extend_from_slice(&l[f]),
                    Labels::None => {}
                }
            }
        }
        let labels = match kind {
            Some(1) => BatchLabels::Va(va),
            Some(2) => BatchLabels::Au(au),
            _ => BatchLabels::None,
        };
        Ok(Self {
            x: Tensor::new(vec![b, t, d], x)?,
            mask,
            labels,
            windows: windows.to_vec(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.x.shape()[1]
    }

    /// Flat `b·T + t` indices of real frames.
    pub fn valid_frames(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn va_targets<S: Scalar>(&self) -> Result<VaTargets<S>> {
        let BatchLabels::Va(l) = &self.labels else {
            return Err(Error::contract("batch has no valence/arousal labels"));
        };
        let frames = self.valid_frames();
        let labels: Vec<[S; 2]> = frames
            .iter()
            .map(|&f| [S::of(l[f][0]), S::of(l[f][1])])
            .collect();
        VaTargets::new(frames, &labels)
    }

    /// Flat element indices (into `[B·T·12]`) and bits of real frames.
    pub fn au_targets(&self) -> Result<(Vec<usize>, Vec<u8>)> {
        let BatchLabels::Au(l) = &self.labels else {
            return Err(Error::contract("batch has no action-unit labels"));
        };
        let mut idx = Vec::new();
        let mut bits = Vec::new();
        for f in self.valid_frames() {
            for c in 0..AU_COUNT {
                idx.push(f * AU_COUNT + c);
                bits.push(l[f * AU_COUNT + c]);
            }
        }
        Ok((idx, bits))
    }
}

/// Splits one record into single-window batches of length `s`.
pub fn window_sequences(
    record: &VideoRecord,
    s: usize,
    stride: usize,
) -> Result<Vec<SequenceBatch>> {
    let records = std::slice::from_ref(record);
    window_spans(record.n_frames, s, stride)?
        .into_iter()
        .map(|span| SequenceBatch::collate(records, &[WindowRef { video: 0, span }]))
        .collect()
}
