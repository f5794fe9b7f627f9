//! Synthetic paired feature streams.
//!
//! A shared latent random walk drives both the visual and the audio feature
//! streams through fixed random linear maps. Fake samples swap the latent of
//! one or both modalities over a few intervals for an independent walk, so the
//! two streams stop carrying the same information there.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::divergence::normalized_divergence_tokens;
use crate::error::{Error, IoContext, Result};
use crate::intervals::{validate_interval_set, Interval, Modality};
use crate::kv::KeyValues;
use crate::tensor::Mat;

/// Walk recursion `c[t+1] = DECAY·c[t] + STEP·ε`.
pub const WALK_DECAY: f64 = 0.95;
pub const WALK_STEP: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub frames: usize,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub p_fake: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub max_intervals: usize,
    /// Probabilities of visual-only, audio-only and both-modality fakes.
    pub modality_mix: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            frames: 120,
            feature_dim: 16,
            latent_dim: 8,
            noise_sigma: 0.1,
            p_fake: 0.5,
            min_len: 8,
            max_len: 30,
            max_intervals: 2,
            modality_mix: [1.0 / 3.0; 3],
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.frames == 0 || self.feature_dim == 0 || self.latent_dim == 0 {
            return bad("frames, feature_dim and latent_dim must be positive".into());
        }
        if !(self.min_len >= 1 && self.min_len <= self.max_len && self.max_len < self.frames) {
            return bad(format!(
                "need 0 < min_len <= max_len < frames, got {}..{} with {} frames",
                self.min_len, self.max_len, self.frames
            ));
        }
        if !(0.0..=1.0).contains(&self.p_fake) {
            return bad(format!("p_fake {} outside [0, 1]", self.p_fake));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be non-negative", self.noise_sigma));
        }
        if self.max_intervals == 0 {
            return bad("max_intervals must be at least 1".into());
        }
        // intervals are kept one frame apart
        if self.max_intervals * self.min_len + self.max_intervals - 1 > self.frames {
            return bad(format!(
                "{} disjoint intervals of at least {} frames cannot fit in {} frames",
                self.max_intervals, self.min_len, self.frames
            ));
        }
        let total: f64 = self.modality_mix.iter().sum();
        if self.modality_mix.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return bad(format!("modality_mix {:?} is not a probability vector", self.modality_mix));
        }
        Ok(())
    }

    /// Reads generator keys from a key/value table, leaving other keys.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            frames: kv.take_or("f", d.frames)?,
            feature_dim: kv.take_or("d0", d.feature_dim)?,
            latent_dim: kv.take_or("k", d.latent_dim)?,
            noise_sigma: kv.take_or("noise_sigma", d.noise_sigma)?,
            p_fake: kv.take_or("p_fake", d.p_fake)?,
            min_len: kv.take_or("min_len", d.min_len)?,
            max_len: kv.take_or("max_len", d.max_len)?,
            max_intervals: kv.take_or("max_intervals", d.max_intervals)?,
            modality_mix: [
                kv.take_or("mix_visual", d.modality_mix[0])?,
                kv.take_or("mix_audio", d.modality_mix[1])?,
                kv.take_or("mix_both", d.modality_mix[2])?,
            ],
            seed: kv.take_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A paired feature sample with its forgery annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub visual: Mat<f32>,
    pub audio: Mat<f32>,
    /// Per-modality fake label, indexed by [`Modality::index`].
    pub labels: [bool; 2],
    pub intervals: Vec<Interval>,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.visual.rows
    }

    pub fn feature_dim(&self) -> usize {
        self.visual.cols
    }

    pub fn is_fake(&self) -> bool {
        self.labels[0] || self.labels[1]
    }

    pub fn stream(&self, m: Modality) -> &Mat<f32> {
        match m {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.audio.rows, self.audio.cols) != (self.visual.rows, self.visual.cols) {
            return Err(Error::InvalidInput(format!(
                "{}: visual {}x{} vs audio {}x{}",
                self.id, self.visual.rows, self.visual.cols, self.audio.rows, self.audio.cols
            )));
        }
        validate_interval_set(&self.intervals, self.frames())?;
        for m in Modality::ALL {
            let has = self.intervals.iter().any(|iv| iv.modality() == m);
            if has != self.labels[m.index()] {
                return Err(Error::InvalidInput(format!(
                    "{}: {m} label {} disagrees with its intervals",
                    self.id, self.labels[m.index()]
                )));
            }
        }
        Ok(())
    }
}

/// Per-modality latent trajectories behind a generated sample.
#[derive(Clone, Debug)]
pub struct Latents {
    pub visual: Mat<f64>,
    pub audio: Mat<f64>,
}

pub struct Generator {
    cfg: SyntheticConfig,
    /// `latent_dim × feature_dim` maps, visual then audio.
    maps: [Mat<f64>; 2],
}

fn walk(rng: &mut ChaCha8Rng, len: usize, mut state: Vec<f64>) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        if t > 0 {
            for c in state.iter_mut() {
                *c = WALK_DECAY * *c + WALK_STEP * rng.sample::<f64, _>(StandardNormal);
            }
        }
        out.push(state.clone());
    }
    out
}

/// An independent walk leaving the origin at the first frame and conditioned
/// to return there one frame after the last, so both splice points of a fake
/// span look alike.
fn bridge(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut w = walk(rng, len + 1, vec![0.0; dim]);
    let end = w.pop().expect("len + 1 states");
    let var = |t: usize| 1.0 - WALK_DECAY.powi(2 * t as i32);
    for (t, state) in w.iter_mut().enumerate() {
        // E[w_t | w_len] = decay^(len - t) var(w_t) / var(w_len) w_len
        let k = WALK_DECAY.powi((len - t) as i32) * var(t) / var(len);
        for (x, e) in state.iter_mut().zip(&end) {
            *x -= k * e;
        }
    }
    w
}

pub fn sample_id(index: u64) -> String {
    format!("syn-{index:06}")
}

impl Generator {
    pub fn new(cfg: SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let mut map = || Mat::from_fn(cfg.latent_dim, cfg.feature_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let maps = [map(), map()];
        Ok(Self { cfg, maps })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    pub fn map(&self, m: Modality) -> &Mat<f64> {
        &self.maps[m.index()]
    }

    /// Random stream for sample `index`; stream 0 belongs to the maps.
    fn sample_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(index.wrapping_add(1));
        rng
    }

    fn draw_spans(&self, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
        let c = &self.cfg;
        let n = rng.random_range(1..=c.max_intervals);
        let mut lengths = Vec::with_capacity(n);
        let mut used = n - 1;
        for i in 0..n {
            let reserve = (n - 1 - i) * c.min_len;
            let hi = c.max_len.min(c.frames - used - reserve);
            let len = rng.random_range(c.min_len..=hi);
            used += len;
            lengths.push(len);
        }
        // distribute the slack over n + 1 gaps
        let slack = c.frames - used;
        let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
        cuts.sort_unstable();
        let mut spans = Vec::with_capacity(n);
        let mut pos = 0;
        let mut prev_cut = 0;
        for (i, len) in lengths.into_iter().enumerate() {
            pos += cuts[i] - prev_cut;
            prev_cut = cuts[i];
            spans.push((pos, pos + len));
            pos += len + 1;
        }
        spans
    }

    pub fn generate_with_latents(&self, index: u64) -> (Sample, Latents) {
        let c = &self.cfg;
        let mut rng = self.sample_rng(index);
        let stationary = WALK_STEP / (1.0 - WALK_DECAY * WALK_DECAY).sqrt();
        let start: Vec<f64> =
            (0..c.latent_dim).map(|_| stationary * rng.sample::<f64, _>(StandardNormal)).collect();
        let shared = walk(&mut rng, c.frames, start);
        let mut lat = [shared.clone(), shared];
        let mut intervals = Vec::new();
        let mut labels = [false; 2];

        if rng.random::<f64>() < c.p_fake {
            let spans = self.draw_spans(&mut rng);
            let u: f64 = rng.random();
            let mods: &[Modality] = if u < c.modality_mix[0] {
                &[Modality::Visual]
            } else if u < c.modality_mix[0] + c.modality_mix[1] {
                &[Modality::Audio]
            } else {
                &[Modality::Visual, Modality::Audio]
            };
            for &(s, e) in &spans {
                for &m in mods {
                    let fresh = bridge(&mut rng, e - s, c.latent_dim);
                    lat[m.index()][s..e].clone_from_slice(&fresh);
                    intervals.push(Interval::new(s as f64, e as f64, m).expect("non-empty span"));
                    labels[m.index()] = true;
                }
            }
        }

        let mut streams = [Mat::zeros(c.frames, c.feature_dim), Mat::zeros(c.frames, c.feature_dim)];
        let mut latents = [Mat::zeros(c.frames, c.latent_dim), Mat::zeros(c.frames, c.latent_dim)];
        for m in Modality::ALL {
            let i = m.index();
            latents[i] = Mat::from_fn(c.frames, c.latent_dim, |t, k| lat[i][t][k]);
            let clean = latents[i].matmul(&self.maps[i]);
            streams[i] = clean;
            for x in streams[i].data.iter_mut() {
                *x += c.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let [v, a] = streams;
        let [lv, la] = latents;
        let sample = Sample { id: sample_id(index), visual: v.cast(), audio: a.cast(), labels, intervals };
        (sample, Latents { visual: lv, audio: la })
    }

    pub fn generate_sample(&self, index: u64) -> Sample {
        self.generate_with_latents(index).0
    }

    /// Samples `start..start + count`, generated in parallel.
    pub fn generate_range(&self, start: u64, count: usize) -> Vec<Sample> {
        (start..start + count as u64).into_par_iter().map(|i| self.generate_sample(i)).collect()
    }

    /// Recovers the latent trajectory of stream `m` by least squares through
    /// the generator's map.
    pub fn recover_latent(&self, x: &Mat<f32>, m: Modality) -> Mat<f64> {
        let a = &self.maps[m.index()];
        // c = x·Aᵀ(A·Aᵀ)⁻¹
        let mut gram = Mat::zeros(a.rows, a.rows);
        a.matmul_into(false, a, true, 0.0, &mut gram);
        let inv = invert_spd(&gram);
        let mut xat = Mat::zeros(x.rows, a.rows);
        x.cast::<f64>().matmul_into(false, a, true, 0.0, &mut xat);
        xat.matmul(&inv)
    }

    /// Quantized per-frame signature of stream `m`: one symbol per frame from
    /// the signs of the first three recovered latent coordinates.
    pub fn signature(&self, sample: &Sample, m: Modality) -> Vec<u8> {
        let lat = self.recover_latent(sample.stream(m), m);
        (0..lat.rows)
            .map(|t| {
                (0..lat.cols.min(3)).fold(b'a', |acc, k| acc + (u8::from(lat.get(t, k) > 0.0) << k))
            })
            .collect()
    }

    /// Normalized divergence between the visual and audio signatures.
    pub fn signature_divergence(&self, sample: &Sample) -> f64 {
        normalized_divergence_tokens(
            &self.signature(sample, Modality::Visual),
            &self.signature(sample, Modality::Audio),
        )
    }
}

/// Inverse of a small symmetric positive definite matrix by Gauss-Jordan.
fn invert_spd(m: &Mat<f64>) -> Mat<f64> {
    let n = m.rows;
    let mut a = m.clone();
    let mut inv = Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a.get(x, col).abs().total_cmp(&a.get(y, col).abs())).unwrap();
        if pivot != col {
            for j in 0..n {
                let (p, q) = (a.get(pivot, j), a.get(col, j));
                a.set(pivot, j, q);
                a.set(col, j, p);
                let (p, q) = (inv.get(pivot, j), inv.get(col, j));
                inv.set(pivot, j, q);
                inv.set(col, j, p);
            }
        }
        let d = a.get(col, col);
        for j in 0..n {
            a.set(col, j, a.get(col, j) / d);
            inv.set(col, j, inv.get(col, j) / d);
        }
        for r in 0..n {
            if r != col {
                let factor = a.get(r, col);
                for j in 0..n {
                    a.set(r, j, a.get(r, j) - factor * a.get(col, j));
                    inv.set(r, j, inv.get(r, j) - factor * inv.get(col, j));
                }
            }
        }
    }
    inv
}

pub const BLOB_MAGIC: [u8; 4] = *b"DMDF";
pub const BLOB_VERSION: u16 = 1;
const BLOB_HEADER: usize = 4 + 2 + 4 + 4;
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub visual: u8,
    pub audio: u8,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub f: usize,
    pub d0: usize,
    pub labels: LabelRecord,
    pub intervals: Vec<Interval>,
}

impl ManifestRecord {
    pub fn of(sample: &Sample) -> Self {
        Self {
            id: sample.id.clone(),
            f: sample.frames(),
            d0: sample.feature_dim(),
            labels: LabelRecord { visual: sample.labels[0].into(), audio: sample.labels[1].into() },
            intervals: sample.intervals.clone(),
        }
    }
}

pub fn encode_blob(sample: &Sample) -> Vec<u8> {
    let mut buf = Vec::with_capacity(BLOB_HEADER + 8 * sample.visual.data.len());
    buf.extend_from_slice(&BLOB_MAGIC);
    buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(sample.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(sample.feature_dim() as u32).to_le_bytes());
    for x in sample.visual.data.iter().chain(&sample.audio.data) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

/// Decodes a feature blob, checking it against the manifest's dimensions.
pub fn decode_blob(bytes: &[u8], f: usize, d0: usize, path: &Path) -> Result<(Mat<f32>, Mat<f32>)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { path: path.into(), expected: BLOB_HEADER, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != BLOB_MAGIC {
        return Err(Error::BadMagic { path: path.into(), found: magic });
    }
    if bytes.len() < BLOB_HEADER {
        return Err(Error::Truncated { path: path.into(), expected: BLOB_HEADER, found: bytes.len() });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BLOB_VERSION {
        return Err(Error::VersionMismatch { path: path.into(), found: version, expected: BLOB_VERSION });
    }
    let bf = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let bd = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if (bf, bd) != (f, d0) {
        return Err(Error::DimensionMismatch {
            path: path.into(),
            detail: format!("manifest says {f}x{d0}, blob header says {bf}x{bd}"),
        });
    }
    let expected = BLOB_HEADER + 2 * f * d0 * 4;
    if bytes.len() < expected {
        return Err(Error::Truncated { path: path.into(), expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::DimensionMismatch {
            path: path.into(),
            detail: format!("{} trailing bytes after {f}x{d0} payload", bytes.len() - expected),
        });
    }
    let floats: Vec<f32> = bytes[BLOB_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (v, a) = floats.split_at(f * d0);
    Ok((Mat::from_vec(f, d0, v.to_vec()), Mat::from_vec(f, d0, a.to_vec())))
}

pub fn blob_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.dmf"))
}

pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
    let manifest_path = dir.join(MANIFEST);
    let mut manifest = BufWriter::new(
        File::create(&manifest_path).context(|| format!("creating {}", manifest_path.display()))?,
    );
    for s in samples {
        s.validate()?;
        let line = serde_json::to_string(&ManifestRecord::of(s)).expect("manifest record serializes");
        writeln!(manifest, "{line}").context(|| format!("writing {}", manifest_path.display()))?;
        let path = blob_path(dir, &s.id);
        fs::write(&path, encode_blob(s)).context(|| format!("writing {}", path.display()))?;
    }
    manifest.flush().context(|| format!("writing {}", manifest_path.display()))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST);
    let file = File::open(&path).context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.clone(),
            line: idx + 1,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|rec| {
            let path = blob_path(dir, &rec.id);
            let bytes = fs::read(&path).context(|| format!("reading {}", path.display()))?;
            let (visual, audio) = decode_blob(&bytes, rec.f, rec.d0, &path)?;
            let sample = Sample {
                id: rec.id,
                visual,
                audio,
                labels: [rec.labels.visual != 0, rec.labels.audio != 0],
                intervals: rec.intervals,
            };
            sample.validate()?;
            Ok(sample)
        })
        .collect()
}
