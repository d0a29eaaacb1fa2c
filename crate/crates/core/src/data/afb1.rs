//! AFB1 per-video feature files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AFB1"
//! 4       2     version (u16 LE) = 1
//! 6       1     label kind: 0 none, 1 VA, 2 AU12
//! 7       1     reserved (0)
//! 8       2     video id length L (u16 LE)
//! 10      L     video id, UTF-8
//! 10+L    4     n_frames (u32 LE)
//! 14+L    4     feat_dim (u32 LE)
//! 18+L    4·N·D features, f32 LE, row-major
//! ...     8·N   VA labels (f32 LE pairs), or 12·N AU bytes
//! ```

use std::fs;
use std::path::Path;

use super::{Labels, VideoRecord};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AFB1";
pub const VERSION: u16 = 1;
pub const AU_COUNT: usize = 12;

pub fn encode_video(rec: &VideoRecord) -> Result<Vec<u8>> {
    rec.validate()?;
    let id = rec.video_id.as_bytes();
    let id_len = u16::try_from(id.len())
        .map_err(|_| Error::contract(format!("video id of {} bytes is too long", id.len())))?;
    let n = u32::try_from(rec.n_frames).map_err(|_| Error::contract("too many frames"))?;
    let d = u32::try_from(rec.feat_dim).map_err(|_| Error::contract("feature dim too large"))?;
    let mut out = Vec::with_capacity(18 + id.len() + rec.features.len() * 4 + rec.n_frames * 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(rec.labels.kind_code());
    out.push(0);
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for v in &rec.features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match &rec.labels {
        Labels::None => {}
        Labels::Va(v) => {
            for pair in v {
                out.extend_from_slice(&pair[0].to_le_bytes());
                out.extend_from_slice(&pair[1].to_le_bytes());
            }
        }
        Labels::Au(v) => {
            for bits in v {
                out.extend_from_slice(bits);
            }
        }
    }
    Ok(out)
}

/// Little-endian cursor that reports truncation as a parse error.
pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
    pub file: &'a str,
}

impl<'a> Reader<'a> {
    pub(crate) fn err(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.to_string(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(
                self.buf.len(),
                format!(
                    "truncated {what}: need {n} bytes at offset {}, file ends at {}",
                    self.pos,
                    self.buf.len()
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses an AFB1 buffer; `file` only labels error messages.
pub fn decode_video(buf: &[u8], file: &str) -> Result<VideoRecord> {
    let mut r = Reader { buf, pos: 0, file };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(r.err(0, format!("bad magic {magic:?}, expected \"AFB1\"")));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.err(4, format!("unsupported version {version}")));
    }
    let kind = r.u8("label kind")?;
    if kind > 2 {
        return Err(r.err(6, format!("unknown label kind {kind}")));
    }
    r.u8("reserved byte")?;
    let id_len = r.u16("video id length")? as usize;
    let id_start = r.pos;
    let id = std::str::from_utf8(r.take(id_len, "video id")?)
        .map_err(|e| r.err(id_start + e.valid_up_to(), "video id is not UTF-8"))?
        .to_string();
    let n = r.u32("frame count")? as usize;
    let d = r.u32("feature dim")? as usize;
    if n == 0 || d == 0 {
        return Err(r.err(r.pos - 8, format!("empty video: {n} frames × {d} dims")));
    }

    let label_bytes = match kind {
        1 => 8 * n,
        2 => AU_COUNT * n,
        _ => 0,
    };
    let expected = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(label_bytes))
        .ok_or_else(|| r.err(r.pos - 8, "frame count × feature dim overflows"))?;
    let available = buf.len() - r.pos;
    if available < expected {
        return Err(r.err(
            buf.len(),
            format!(
                "frame/label mismatch: header declares {n} frames needing {expected} payload bytes, found {available}"
            ),
        ));
    }
    if available > expected {
        return Err(r.err(
            r.pos + expected,
            format!("{} trailing bytes after payload", available - expected),
        ));
    }

    let features: Vec<f32> = r
        .take(4 * n * d, "features")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels_start = r.pos;
    let labels = match kind {
        1 => {
            let raw = r.take(8 * n, "VA labels")?;
            let mut v = Vec::with_capacity(n);
            for (i, c) in raw.chunks_exact(8).enumerate() {
                let pair = [
                    f32::from_le_bytes(c[..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..].try_into().unwrap()),
                ];
                if pair.iter().any(|x| !(-1.0..=1.0).contains(x)) {
                    return Err(r.err(
                        labels_start + 8 * i,
                        format!("VA label {pair:?} outside [-1, 1]"),
                    ));
                }
                v.push(pair);
            }
            Labels::Va(v)
        }
        2 => {
            let raw = r.take(AU_COUNT * n, "AU labels")?;
            if let Some(i) = raw.iter().position(|&b| b > 1) {
                return Err(r.err(
                    labels_start + i,
                    format!("AU bit {} not in {{0, 1}}", raw[i]),
                ));
            }
            Labels::Au(
                raw.chunks_exact(AU_COUNT)
                    .map(|c| c.try_into().unwrap())
                    .collect(),
            )
        }
        _ => Labels::None,
    };
    Ok(VideoRecord {
        video_id: id,
        n_frames: n,
        feat_dim: d,
        features,
        labels,
    })
}

pub fn write_video_file(path: impl AsRef<Path>, rec: &VideoRecord) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_video(rec)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_video_file(path: impl AsRef<Path>) -> Result<VideoRecord> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_video(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn va_record(n: usize, d: usize) -> VideoRecord {
        let features = (0..n * d).map(|i| (i as f32 * 0.1).sin()).collect();
        let labels = (0..n)
            .map(|i| [(i as f32 * 0.3).sin(), (i as f32 * 0.2).cos()])
            .collect();
        VideoRecord::new("vid_01", d, features, Labels::Va(labels)).unwrap()
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_video(&va_record(3, 2)).unwrap();
        bytes[0] = b'X';
        let err = decode_video(&bytes, "f").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncated_file_is_an_error() {
        let bytes = encode_video(&va_record(3, 2)).unwrap();
        for cut in [0, 3, 9, 15, bytes.len() - 1] {
            assert!(matches!(
                decode_video(&bytes[..cut], "f"),
                Err(Error::Parse { .. })
            ));
        }
    }

    #[test]
    fn declared_frames_exceed_payload() {
        // Encode 9 frames, then patch the header to claim 10.
        let (n, d) = (9usize, 5usize);
        let mut bytes = encode_video(&va_record(n, d)).unwrap();
        let id_len = "vid_01".len();
        let frames_at = 10 + id_len;
        bytes[frames_at..frames_at + 4].copy_from_slice(&10u32.to_le_bytes());
        let payload_end = 18 + id_len + n * d * 4 + n * 8;
        assert_eq!(bytes.len(), payload_end);
        match decode_video(&bytes, "f").unwrap_err() {
            Error::Parse { offset, reason, .. } => {
                assert_eq!(offset as usize, payload_end);
                assert!(reason.contains("10 frames"), "{reason}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_video(&va_record(2, 2)).unwrap();
        bytes.push(0);
        assert!(decode_video(&bytes, "f").is_err());
    }

    #[test]
    fn au_round_trip_and_bad_bit() {
        let labels = vec![[0, 1, 0, 0, 1, 1, 0, 0, 0, 1, 0, 1]; 2];
        let rec = VideoRecord::new("au", 3, vec![0.5; 6], Labels::Au(labels)).unwrap();
        let mut bytes = encode_video(&rec).unwrap();
        assert_eq!(decode_video(&bytes, "f").unwrap(), rec);
        let last = bytes.len() - 1;
        bytes[last] = 7;
        assert!(matches!(
            decode_video(&bytes, "f"),
            Err(Error::Parse { offset, .. }) if offset as usize == last
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            n in 1usize..20,
            d in 1usize..9,
            seed in any::<u64>(),
            labelled in any::<bool>(),
        ) {
            let mut x = seed;
            let mut next = || {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((x >> 32) as u32 & 0x7f7f_ffff) * if x & 1 == 0 { 1.0 } else { -1.0 }
            };
            let features: Vec<f32> = (0..n * d).map(|_| next()).collect();
            let labels = if labelled {
                Labels::Va((0..n).map(|i| [i as f32 / n as f32, -0.5]).collect())
            } else {
                Labels::None
            };
            let rec = VideoRecord::new(format!("v{seed}"), d, features, labels).unwrap();
            let bytes = encode_video(&rec).unwrap();
            let back = decode_video(&bytes, "mem").unwrap();
            prop_assert_eq!(encode_video(&back).unwrap(), bytes);
            prop_assert_eq!(back, rec);
        }
    }
}
