//! Deterministic synthetic videos with a learnable feature → label map.
//!
//! A seed fixes a shared "world": lift matrices `B`, `A`, bias `a`, a VA
//! readout `C` and AU thresholds. Each video draws a smooth latent path
//! `z_t` (sums of slow sinusoids); features are
//! `z B + 0.5 tanh(z A + a) + noise`, VA labels `tanh(z C)` and AU bits
//! `[z E + e > 0]`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::afb1::AU_COUNT;
use super::{Labels, VideoRecord};
use crate::error::{Error, Result};
use crate::metrics::CccResult;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub n_frames: usize,
    pub feat_dim: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_videos: 40,
            n_frames: 400,
            feat_dim: 64,
            seed: 7,
            latent_dim: 6,
            noise: 0.1,
        }
    }
}

impl SynthSpec {
    pub fn new(n_videos: usize, n_frames: usize, feat_dim: usize, seed: u64) -> Self {
        Self {
            n_videos,
            n_frames,
            feat_dim,
            seed,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_videos == 0 || self.n_frames == 0 || self.feat_dim == 0 || self.latent_dim == 0 {
            return Err(Error::config(format!(
                "synthetic sizes must be positive: {} videos × {} frames × {} dims",
                self.n_videos, self.n_frames, self.feat_dim
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!(
                "noise {} must be finite and >= 0",
                self.noise
            )));
        }
        Ok(())
    }
}

struct World {
    lift: Vec<f64>,
    mix: Vec<f64>,
    mix_bias: Vec<f64>,
    va: Vec<f64>,
    au: Vec<f64>,
    au_bias: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

impl World {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let (l, d) = (spec.latent_dim, spec.feat_dim);
        let unit = 1.0 / (l as f64).sqrt();
        Self {
            lift: gaussian(rng, l * d, unit),
            mix: gaussian(rng, l * d, unit),
            mix_bias: gaussian(rng, d, 0.5),
            va: gaussian(rng, l * 2, unit),
            au: gaussian(rng, l * AU_COUNT, unit),
            au_bias: (0..AU_COUNT).map(|_| rng.random_range(-0.4..0.4)).collect(),
        }
    }
}

fn project<'a>(z: &'a [f64], w: &'a [f64], cols: usize) -> impl Iterator<Item = f64> + 'a {
    (0..cols).map(move |j| {
        z.iter()
            .enumerate()
            .map(|(i, zi)| zi * w[i * cols + j])
            .sum()
    })
}

/// Unit-variance latent path: each coordinate is a sum of three slow
/// sinusoids with periods between 40 and 200 frames.
fn latent_path(rng: &mut ChaCha8Rng, n: usize, l: usize) -> Vec<f64> {
    let mut z = vec![0.0; n * l];
    for j in 0..l {
        let comps: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let period = rng.random_range(40.0..200.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(0.5..1.0);
                (std::f64::consts::TAU / period, phase, amp)
            })
            .collect();
        let norm = (comps.iter().map(|c| c.2 * c.2).sum::<f64>() / 2.0).sqrt();
        for t in 0..n {
            z[t * l + j] = comps
                .iter()
                .map(|&(w, p, a)| a * (w * t as f64 + p).sin())
                .sum::<f64>()
                / norm;
        }
    }
    z
}

fn generate(spec: &SynthSpec, au: bool) -> Result<Vec<VideoRecord>> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World::new(spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
    let (l, d, n) = (spec.latent_dim, spec.feat_dim, spec.n_frames);
    let mut out = Vec::with_capacity(spec.n_videos);
    for v in 0..spec.n_videos {
        let z = latent_path(&mut rng, n, l);
        let mut features = Vec::with_capacity(n * d);
        let mut va = Vec::new();
        let mut bits = Vec::new();
        for t in 0..n {
            let zt = &z[t * l..(t + 1) * l];
            let lin = project(zt, &world.lift, d);
            let nl = project(zt, &world.mix, d).zip(&world.mix_bias);
            for (a, (m, b)) in lin.zip(nl) {
                features.push((a + 0.5 * (m + b).tanh() + noise.sample(&mut rng)) as f32);
            }
            if au {
                let mut row = [0u8; AU_COUNT];
                for ((r, s), b) in row
                    .iter_mut()
                    .zip(project(zt, &world.au, AU_COUNT))
                    .zip(&world.au_bias)
                {
                    *r = u8::from(s + b > 0.0);
                }
                bits.push(row);
            } else {
                let mut p = project(zt, &world.va, 2).map(|s| (s.tanh() as f32).clamp(-1.0, 1.0));
                va.push([p.next().unwrap(), p.next().unwrap()]);
            }
        }
        let labels = if au { Labels::Au(bits) } else { Labels::Va(va) };
        let id = format!("{}{v:03}", if au { "au" } else { "va" });
        out.push(VideoRecord::new(id, d, features, labels)?);
    }
    Ok(out)
}

/// Videos with valence/arousal labels.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<VideoRecord>> {
    generate(spec, false)
}

/// Videos with 12-bit action-unit labels.
pub fn synth_generate_au(spec: &SynthSpec) -> Result<Vec<VideoRecord>> {
    generate(spec, true)
}

/// Fits an affine least-squares map from features to VA on `train` and
/// scores it on `test`.
pub fn linear_probe_ccc(train: &[VideoRecord], test: &[VideoRecord]) -> Result<CccResult> {
    let d = train
        .first()
        .ok_or_else(|| Error::contract("linear probe needs training videos"))?
        .feat_dim;
    let rows = |recs: &[VideoRecord]| -> Result<(Vec<f64>, Vec<[f64; 2]>)> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for r in recs {
            let labels = r.va_labels().ok_or_else(|| {
                Error::contract(format!("video `{}` has no VA labels", r.video_id))
            })?;
            if r.feat_dim != d {
                return Err(Error::contract("feature dims differ between videos"));
            }
            for (f, l) in labels.iter().enumerate() {
                x.push(1.0);
                x.extend(r.frame(f).iter().map(|&v| v as f64));
                y.push([l[0] as f64, l[1] as f64]);
            }
        }
        Ok((x, y))
    };
    let (xtr, ytr) = rows(train)?;
    let (xte, yte) = rows(test)?;
    let p = d + 1;
    let xm = DMatrix::from_row_slice(ytr.len(), p, &xtr);
    let gram = xm.transpose() * &xm + DMatrix::identity(p, p) * 1e-9;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::contract("normal equations are singular"))?;
    let mut coef = Vec::new();
    for c in 0..2 {
        let yv = DVector::from_iterator(ytr.len(), ytr.iter().map(|r| r[c]));
        coef.push(chol.solve(&(xm.transpose() * yv)));
    }
    let pred: Vec<[f64; 2]> = xte
        .chunks_exact(p)
        .map(|row| {
            let r = DVector::from_row_slice(row);
            [r.dot(&coef[0]), r.dot(&coef[1])]
        })
        .collect();
    CccResult::from_frames(&pred, &yte)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::encode_video;

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec::new(3, 50, 8, 11);
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(encode_video(x).unwrap(), encode_video(y).unwrap());
        }
        let c = synth_generate(&SynthSpec::new(3, 50, 8, 12)).unwrap();
        assert_ne!(a[0].features, c[0].features);
    }

    #[test]
    fn labels_in_range() {
        let recs = synth_generate(&SynthSpec::new(4, 300, 16, 3)).unwrap();
        for r in &recs {
            assert!(r
                .va_labels()
                .unwrap()
                .iter()
                .flatten()
                .all(|v| (-1.0..=1.0).contains(v)));
        }
        let au = synth_generate_au(&SynthSpec::new(4, 300, 16, 3)).unwrap();
        let bits: Vec<u8> = au
            .iter()
            .flat_map(|r| r.au_labels().unwrap().iter().flatten().copied())
            .collect();
        // Every channel fires sometimes and is off sometimes.
        for c in 0..AU_COUNT {
            let on = bits
                .iter()
                .skip(c)
                .step_by(AU_COUNT)
                .filter(|&&b| b == 1)
                .count();
            assert!(on > 0 && on < bits.len() / AU_COUNT, "channel {c}: {on}");
        }
    }

    #[test]
    fn linear_probe_learns_held_out_frames() {
        let recs = synth_generate(&SynthSpec::default()).unwrap();
        let (train, test) = recs.split_at(32);
        let r = linear_probe_ccc(train, test).unwrap();
        assert!(r.combined >= 0.5, "{r:?}");
    }
}
