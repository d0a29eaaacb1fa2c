//! The three trainable networks and their shared inference plumbing.

mod au;
mod stage1;
mod stage2;

pub use au::{au_predict, AuConfig, AuFusion, AuModel, AuOutput};
pub use stage1::{Stage1Config, Stage1Model, Stage1Output};
pub use stage2::{Stage2Config, Stage2Model};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::data::{center_stitch, inference_spans, SequenceBatch, VideoRecord, WindowRef};
use crate::error::{Error, Result};
use crate::layers::{Bound, ParamSet};
use crate::losses::LossSettings;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Network topology, enough to rebuild a model before loading weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelSpec {
    Stage1(Stage1Config),
    Stage2(Stage2Config),
    Au(AuConfig),
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Stage1(_) => "stage1",
            ModelSpec::Stage2(_) => "stage2",
            ModelSpec::Au(_) => "au",
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            ModelSpec::Stage1(c) => c.d_in,
            ModelSpec::Stage2(c) => c.d_in,
            ModelSpec::Au(c) => c.d_in,
        }
    }

    /// `key = value` lines, keys prefixed with `model.`.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![("model.kind".to_string(), self.kind().to_string())];
        let fields: Vec<(&str, String)> = match self {
            ModelSpec::Stage1(c) => vec![
                ("d_in", c.d_in.to_string()),
                ("gru_hidden", c.gru_hidden.to_string()),
                ("gru_layers", c.gru_layers.to_string()),
                ("blocks", c.blocks.to_string()),
                ("heads", c.heads.to_string()),
                ("ff_mult", c.ff_mult.to_string()),
            ],
            ModelSpec::Stage2(c) => vec![
                ("d_in", c.d_in.to_string()),
                ("gru_hidden", c.gru_hidden.to_string()),
                ("gru_layers", c.gru_layers.to_string()),
                ("attn_layers", c.attn_layers.to_string()),
                ("d_attn", c.d_attn.to_string()),
                ("radius", c.radius.to_string()),
            ],
            ModelSpec::Au(c) => vec![
                ("d_in", c.d_in.to_string()),
                ("d_expand", c.d_expand.to_string()),
                ("t1_blocks", c.t1_blocks.to_string()),
                ("t2_blocks", c.t2_blocks.to_string()),
                ("heads", c.heads.to_string()),
                ("ff_mult", c.ff_mult.to_string()),
                ("fusion", c.fusion.to_string()),
            ],
        };
        out.extend(fields.into_iter().map(|(k, v)| (format!("model.{k}"), v)));
        out
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: FromStr>(pairs: &BTreeMap<String, String>, key: &str, ty: &str) -> Result<T> {
            let full = format!("model.{key}");
            let raw = pairs
                .get(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{full}`")))?;
            raw.parse()
                .map_err(|_| Error::Checkpoint(format!("`{full}` = `{raw}` is not a valid {ty}")))
        }
        let kind: String = get(pairs, "kind", "model kind")?;
        Ok(match kind.as_str() {
            "stage1" => ModelSpec::Stage1(Stage1Config {
                d_in: get(pairs, "d_in", "integer")?,
                gru_hidden: get(pairs, "gru_hidden", "integer")?,
                gru_layers: get(pairs, "gru_layers", "integer")?,
                blocks: get(pairs, "blocks", "integer")?,
                heads: get(pairs, "heads", "integer")?,
                ff_mult: get(pairs, "ff_mult", "integer")?,
            }),
            "stage2" => ModelSpec::Stage2(Stage2Config {
                d_in: get(pairs, "d_in", "integer")?,
                gru_hidden: get(pairs, "gru_hidden", "integer")?,
                gru_layers: get(pairs, "gru_layers", "integer")?,
                attn_layers: get(pairs, "attn_layers", "integer")?,
                d_attn: get(pairs, "d_attn", "integer")?,
                radius: get(pairs, "radius", "integer")?,
            }),
            "au" => ModelSpec::Au(AuConfig {
                d_in: get(pairs, "d_in", "integer")?,
                d_expand: get(pairs, "d_expand", "integer")?,
                t1_blocks: get(pairs, "t1_blocks", "integer")?,
                t2_blocks: get(pairs, "t2_blocks", "integer")?,
                heads: get(pairs, "heads", "integer")?,
                ff_mult: get(pairs, "ff_mult", "integer")?,
                fusion: get(pairs, "fusion", "fusion mode")?,
            }),
            other => return Err(Error::Checkpoint(format!("unknown model kind `{other}`"))),
        })
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// A per-frame sequence network over `[B, T, d_in]` inputs.
pub trait SequenceModel<S: Scalar> {
    fn spec(&self) -> ModelSpec;
    fn params(&self) -> &ParamSet<S>;
    fn params_mut(&mut self) -> &mut ParamSet<S>;
    /// Output channels per frame: 2 for VA, 12 for AU.
    fn d_out(&self) -> usize;
    /// Final per-frame output: VA in `[-1, 1]` or AU probabilities.
    fn predict(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var>;
    /// Scalar training loss on the batch's real frames.
    fn loss(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        batch: &SequenceBatch,
        settings: &LossSettings,
    ) -> Result<Var>;
}

/// Any of the three networks, rebuilt from a [`ModelSpec`].
#[derive(Clone, Debug)]
pub enum Model<S> {
    Stage1(Stage1Model<S>),
    Stage2(Stage2Model<S>),
    Au(AuModel<S>),
}

impl<S: Scalar> Model<S> {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Stage1(c) => Model::Stage1(Stage1Model::new(c, seed)?),
            ModelSpec::Stage2(c) => Model::Stage2(Stage2Model::new(c, seed)?),
            ModelSpec::Au(c) => Model::Au(AuModel::new(c, seed)?),
        })
    }

    fn inner(&self) -> &dyn SequenceModel<S> {
        match self {
            Model::Stage1(m) => m,
            Model::Stage2(m) => m,
            Model::Au(m) => m,
        }
    }
}

impl<S: Scalar> SequenceModel<S> for Model<S> {
    fn spec(&self) -> ModelSpec {
        self.inner().spec()
    }

    fn params(&self) -> &ParamSet<S> {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut ParamSet<S> {
        match self {
            Model::Stage1(m) => m.params_mut(),
            Model::Stage2(m) => m.params_mut(),
            Model::Au(m) => m.params_mut(),
        }
    }

    fn d_out(&self) -> usize {
        self.inner().d_out()
    }

    fn predict(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        self.inner().predict(g, p, x)
    }

    fn loss(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        x: Var,
        batch: &SequenceBatch,
        settings: &LossSettings,
    ) -> Result<Var> {
        self.inner().loss(g, p, x, batch, settings)
    }
}

/// Places a batch's features on the graph as a constant.
pub fn batch_input<S: Scalar>(g: &mut Graph<S>, batch: &SequenceBatch) -> Var {
    g.constant(batch.x.cast())
}

/// Full-video prediction: row-major `n_frames × d_out`, produced by
/// windows of length `s` and centre stitching.
pub fn predict_record<S: Scalar, M: SequenceModel<S> + ?Sized>(
    model: &M,
    record: &VideoRecord,
    s: usize,
    max_batch: usize,
) -> Result<Vec<f64>> {
    let d_in = model.spec().d_in();
    if record.feat_dim != d_in {
        return Err(Error::Checkpoint(format!(
            "video `{}` has {}-dim features but the model expects {d_in}",
            record.video_id, record.feat_dim
        )));
    }
    if s == 0 || max_batch == 0 {
        return Err(Error::config(
            "window length and batch size must be positive",
        ));
    }
    let spans = inference_spans(record.n_frames, s);
    let d_out = model.d_out();
    let mut window_out: Vec<Vec<f64>> = Vec::with_capacity(spans.len());
    let records = std::slice::from_ref(record);
    for chunk in spans.chunks(max_batch) {
        let windows: Vec<WindowRef> = chunk
            .iter()
            .map(|&span| WindowRef { video: 0, span })
            .collect();
        let batch = SequenceBatch::collate(records, &windows)?;
        let mut g = Graph::new();
        let p = model.params().bind_frozen(&mut g);
        let x = batch_input(&mut g, &batch);
        let y = model.predict(&mut g, &p, x)?;
        let per = batch.seq_len() * d_out;
        window_out.extend(
            g.value(y)
                .data()
                .chunks(per)
                .map(|c| c.iter().map(|v| v.as_f64()).collect()),
        );
    }
    let mut out = Vec::with_capacity(record.n_frames * d_out);
    for (si, off) in center_stitch(record.n_frames, &spans)? {
        out.extend_from_slice(&window_out[si][off * d_out..(off + 1) * d_out]);
    }
    Ok(out)
}

/// Copies `src`'s values into same-named parameters of `dst`.
pub fn load_params<S: Scalar>(dst: &mut ParamSet<S>, src: &[(String, Tensor<S>)]) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::Checkpoint(format!(
            "model has {} parameters, checkpoint has {}",
            dst.len(),
            src.len()
        )));
    }
    for (name, t) in src {
        let id = dst
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
        if dst.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                dst.get(id).shape(),
                t.shape()
            )));
        }
        *dst.get_mut(id) = t.clone();
    }
    Ok(())
}
