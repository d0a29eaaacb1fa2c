//! AFCK checkpoint files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AFCK"
//! 4       2     version (u16 LE) = 1
//! 6       4     text block length L (u32 LE)
//! 10      L     `key = value` lines: run config, `model.*`, `state.*`
//! 10+L    4     tensor count (u32 LE)
//! then per tensor:
//!         2     name length (u16 LE), then the UTF-8 name
//!         1     rank R, then R dims (u32 LE each)
//!         8·n   values, f64 LE, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::{parse_pairs, TrainConfig};
use crate::data::Reader;
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AFCK";
pub const VERSION: u16 = 1;

/// Everything needed to rebuild a model and continue its training run.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointState {
    pub config: TrainConfig,
    pub spec: ModelSpec,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    /// Position of the batch-shuffling stream, in 32-bit words.
    pub rng_word_pos: u128,
    /// Best validation metric so far and the epoch that reached it.
    pub best: Option<(f64, usize)>,
    pub params: Vec<(String, Tensor<f64>)>,
    pub optimizer: Vec<(String, Tensor<f64>)>,
}

impl CheckpointState {
    fn header_text(&self) -> String {
        let mut text = self.config.to_string();
        for (k, v) in self.spec.to_pairs() {
            text.push_str(&format!("{k} = {v}\n"));
        }
        text.push_str(&format!("state.epoch = {}\n", self.epoch));
        text.push_str(&format!("state.step = {}\n", self.step));
        text.push_str(&format!("state.rng_word_pos = {}\n", self.rng_word_pos));
        match self.best {
            Some((m, e)) => text.push_str(&format!(
                "state.best_metric = {m:?}\nstate.best_epoch = {e}\n"
            )),
            None => text.push_str("state.best_metric = none\n"),
        }
        text
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let text = self.header_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(
            &u32::try_from(text.len())
                .map_err(|_| Error::contract("header too long"))?
                .to_le_bytes(),
        );
        out.extend_from_slice(text.as_bytes());
        let tensors: Vec<_> = self.params.iter().chain(&self.optimizer).collect();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            let len =
                u16::try_from(name.len()).map_err(|_| Error::contract("tensor name too long"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank =
                u8::try_from(t.rank()).map_err(|_| Error::contract("tensor rank too large"))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses an AFCK buffer; `file` only labels error messages.
    pub fn decode(buf: &[u8], file: &str) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, file };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.err(0, "bad magic, expected \"AFCK\""));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(r.err(4, format!("unsupported checkpoint version {version}")));
        }
        let text_len = r.u32("header length")? as usize;
        let text_at = r.pos;
        let text = std::str::from_utf8(r.take(text_len, "header")?)
            .map_err(|e| r.err(text_at + e.valid_up_to(), "header is not UTF-8"))?;

        let mut config_pairs = Vec::new();
        let mut model = BTreeMap::new();
        let mut state = BTreeMap::new();
        for (k, v) in parse_pairs(text)? {
            if let Some(rest) = k.strip_prefix("state.") {
                state.insert(rest.to_string(), v);
            } else if k.starts_with("model.") {
                model.insert(k, v);
            } else {
                config_pairs.push((k, v));
            }
        }
        let config = TrainConfig::from_pairs(&config_pairs)?;
        let spec = ModelSpec::from_pairs(&model)?;
        let field = |key: &str| {
            state
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("header lacks `state.{key}`")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Checkpoint(format!("bad `state.{key}` value `{v}`")))
        }
        let best = match field("best_metric")?.as_str() {
            "none" => None,
            v => Some((
                num("best_metric", v)?,
                num("best_epoch", field("best_epoch")?)?,
            )),
        };

        let count = r.u32("tensor count")? as usize;
        let mut params = Vec::new();
        let mut optimizer = Vec::new();
        for _ in 0..count {
            let name_len = r.u16("tensor name length")? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|e| r.err(at + e.valid_up_to(), "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8("tensor rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("tensor dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n.saturating_mul(8) > r.buf.len() - r.pos {
                return Err(r.err(r.buf.len(), format!("truncated data for tensor `{name}`")));
            }
            let data = (0..n)
                .map(|_| r.f64("tensor data"))
                .collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data)?;
            if name.starts_with("opt.") {
                optimizer.push((name, t));
            } else {
                params.push((name, t));
            }
        }
        if r.pos != buf.len() {
            return Err(r.err(r.pos, "trailing bytes after tensor table"));
        }
        Ok(Self {
            config,
            spec,
            epoch: num("epoch", field("epoch")?)?,
            step: num("step", field("step")?)?,
            rng_word_pos: num("rng_word_pos", field("rng_word_pos")?)?,
            best,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Stage2Config;

    fn sample() -> CheckpointState {
        CheckpointState {
            config: TrainConfig::default(),
            spec: ModelSpec::Stage2(Stage2Config::new(5)),
            epoch: 3,
            step: 57,
            rng_word_pos: (1u128 << 70) + 3,
            best: Some((0.1 + 0.2, 2)),
            params: vec![
                (
                    "head.w".into(),
                    Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
                ),
                ("head.b".into(), Tensor::scalar(std::f64::consts::PI)),
            ],
            optimizer: vec![("opt.t".into(), Tensor::scalar(57.0))],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.encode().unwrap();
        let back = CheckpointState::decode(&bytes, "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode().unwrap(), bytes);
        let none = CheckpointState { best: None, ..c };
        assert_eq!(
            CheckpointState::decode(&none.encode().unwrap(), "mem").unwrap(),
            none
        );
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            CheckpointState::decode(&bad, "f"),
            Err(Error::Parse { offset: 0, .. })
        ));
        for cut in [3, 20, bytes.len() - 1] {
            assert!(
                CheckpointState::decode(&bytes[..cut], "f").is_err(),
                "cut {cut}"
            );
        }
        let mut long = bytes;
        long.push(0);
        assert!(CheckpointState::decode(&long, "f").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.afck");
        sample().save(&p).unwrap();
        assert_eq!(CheckpointState::load(&p).unwrap(), sample());
        assert!(CheckpointState::load(dir.path().join("missing"))
            .unwrap_err()
            .is_io());
    }
}
