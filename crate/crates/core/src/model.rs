//! The detection/localization network: a shared convolutional projection of
//! both feature streams, token assembly with modality and position
//! encodings, a pre-norm Transformer encoder restricted to a local attention
//! window, and either a per-layer classification head (detection) or shared
//! convolutional classification/regression heads over the feature pyramid
//! (localization).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervals::Modality;
use crate::nn::{
    gelu, gelu_backward, relu, relu_backward, sigmoid, softplus, Attention, AttentionMask, AttnCache,
    Builder, Conv1d, ConvCache, LayerNorm, Linear, LnCache,
};
use crate::params::{Init, ParamId, ParamStore, INIT_STD};
use crate::tensor::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Dfd,
    Tfl,
}

impl Task {
    /// Number of non-frame tokens.
    pub fn extra_tokens(self) -> usize {
        match self {
            Task::Dfd => 2,
            Task::Tfl => 1,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Dfd => "dfd",
            Task::Tfl => "tfl",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dfd" => Ok(Task::Dfd),
            "tfl" => Ok(Task::Tfl),
            other => Err(Error::InvalidInput(format!("unknown task {other:?} (expected dfd or tfl)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token dimension.
    pub d: usize,
    /// Attention heads.
    pub heads: usize,
    /// MLP width multiplier.
    pub mlp_ratio: usize,
    pub layers: usize,
    /// Local attention window in tokens; 0 means global attention.
    pub window: usize,
    pub f_max: usize,
    /// Input feature dimension.
    pub d0: usize,
    pub task: Task,
    /// Drop the residual around the attention sublayer.
    pub strict_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 2,
            mlp_ratio: 1,
            layers: 3,
            window: 15,
            f_max: 600,
            d0: 16,
            task: Task::Tfl,
            strict_residual: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} must be a positive multiple of r={}", self.d, self.heads));
        }
        if self.layers == 0 || self.mlp_ratio == 0 || self.f_max == 0 || self.d0 == 0 {
            return bad("l, u, f_max and d0 must be at least 1".into());
        }
        Ok(())
    }

    pub fn max_tokens(&self) -> usize {
        2 * self.f_max + self.task.extra_tokens()
    }
}

/// What a token position holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    Classification,
    Separator,
    Frame(Modality, usize),
    Padding,
}

/// Token positions for `frames` real frames padded to `padded` frames:
/// `[c?, v_1..v_f, s, a_1..a_f, padding...]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub task: Task,
    pub frames: usize,
    pub padded: usize,
}

impl TokenLayout {
    fn base(&self) -> usize {
        self.task.extra_tokens() - 1
    }

    pub fn len(&self) -> usize {
        2 * self.padded + self.task.extra_tokens()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn real_len(&self) -> usize {
        2 * self.frames + self.task.extra_tokens()
    }

    pub fn pad_len(&self) -> usize {
        self.len() - self.real_len()
    }

    pub fn classification(&self) -> Option<usize> {
        (self.task == Task::Dfd).then_some(0)
    }

    pub fn separator(&self) -> usize {
        self.base() + self.frames
    }

    pub fn frame(&self, m: Modality, j: usize) -> usize {
        match m {
            Modality::Visual => self.base() + j,
            Modality::Audio => self.base() + self.frames + 1 + j,
        }
    }

    pub fn role(&self, idx: usize) -> TokenRole {
        let b = self.base();
        let f = self.frames;
        match idx {
            0 if self.task == Task::Dfd => TokenRole::Classification,
            i if i >= self.real_len() => TokenRole::Padding,
            i if i == b + f => TokenRole::Separator,
            i if i < b + f => TokenRole::Frame(Modality::Visual, i - b),
            i => TokenRole::Frame(Modality::Audio, i - b - f - 1),
        }
    }
}

/// Per-layer encoder outputs: `levels[l]` holds the `2f` frame tokens
/// (visual then audio) and `cls` row `l` the classification token.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeatures<T> {
    pub levels: Vec<Mat<T>>,
    pub cls: Option<Mat<T>>,
}

impl<T: Real> PyramidFeatures<T> {
    pub fn frames(&self) -> usize {
        self.levels[0].rows / 2
    }

    /// Frame-token sequence of one modality at one level.
    pub fn modality_level(&self, level: usize, m: Modality) -> Mat<T> {
        let f = self.frames();
        let z = &self.levels[level];
        match m {
            Modality::Visual => z.slice_rows(0, f),
            Modality::Audio => z.slice_rows(f, 2 * f),
        }
    }
}

/// Localization outputs of one pyramid level, indexed by modality.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPrediction<T> {
    pub prob: [Vec<T>; 2],
    pub d_start: [Vec<T>; 2],
    pub d_end: [Vec<T>; 2],
}

impl<T: Real> LevelPrediction<T> {
    pub fn zeros(frames: usize) -> Self {
        let z = || [vec![T::zero(); frames], vec![T::zero(); frames]];
        Self { prob: z(), d_start: z(), d_end: z() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction<T> {
    /// `l × 2` logits, columns visual and audio.
    Dfd(Mat<T>),
    Tfl(Vec<LevelPrediction<T>>),
}

/// Gradient of a scalar objective with respect to a [`Prediction`].
pub type PredictionGrad<T> = Prediction<T>;

#[derive(Clone, Debug)]
struct Projection {
    c1: Conv1d,
    c2: Conv1d,
}

struct ProjCache<T> {
    c1: ConvCache<T>,
    h1: Mat<T>,
    c2: ConvCache<T>,
    h2: Mat<T>,
}

impl Projection {
    fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Mat<T>, valid: usize) -> (Mat<T>, ProjCache<T>) {
        let (y1, c1) = self.c1.forward(p, x, valid);
        let h1 = relu(&y1);
        let (y2, c2) = self.c2.forward(p, &h1, valid);
        let h2 = relu(&y2);
        (h2.clone(), ProjCache { c1, h1, c2, h2 })
    }

    fn backward<T: Real>(&self, p: &ParamStore<T>, cache: &ProjCache<T>, dy: &Mat<T>, g: &mut ParamStore<T>) {
        let d2 = relu_backward(&cache.h2, dy);
        let dh1 = self.c2.backward(p, &cache.c2, &d2, g);
        let d1 = relu_backward(&cache.h1, &dh1);
        self.c1.backward(p, &cache.c1, &d1, g);
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    attn: AttnCache<T>,
    ln2: LnCache<T>,
    h2: Mat<T>,
    pre: Mat<T>,
    act: Mat<T>,
}

impl EncoderLayer {
    fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        x: &Mat<T>,
        mask: &AttentionMask,
        strict: bool,
    ) -> (Mat<T>, LayerCache<T>) {
        let (h1, ln1) = self.ln1.forward(p, x);
        let (mut mid, attn) = self.attn.forward(p, &h1, mask);
        if !strict {
            mid.add_assign(x);
        }
        let (h2, ln2) = self.ln2.forward(p, &mid);
        let pre = self.fc1.forward(p, &h2);
        let act = gelu(&pre);
        let mut out = self.fc2.forward(p, &act);
        out.add_assign(&mid);
        (out, LayerCache { ln1, attn, ln2, h2, pre, act })
    }

    fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &LayerCache<T>,
        mask: &AttentionMask,
        strict: bool,
        dy: &Mat<T>,
        g: &mut ParamStore<T>,
    ) -> Mat<T> {
        let dact = self.fc2.backward(p, &cache.act, dy, g);
        let dpre = gelu_backward(&cache.pre, &dact);
        let dh2 = self.fc1.backward(p, &cache.h2, &dpre, g);
        let mut dmid = self.ln2.backward(p, &cache.ln2, &dh2, g);
        dmid.add_assign(dy);
        let dh1 = self.attn.backward(p, &cache.attn, mask, &dmid, g);
        let mut dx = self.ln1.backward(p, &cache.ln1, &dh1, g);
        if !strict {
            dx.add_assign(&dmid);
        }
        dx
    }
}

/// Three-layer temporal conv stack with LayerNorm + ReLU after the first two.
#[derive(Clone, Debug)]
struct ConvHead {
    c1: Conv1d,
    n1: LayerNorm,
    c2: Conv1d,
    n2: LayerNorm,
    c3: Conv1d,
}

struct ConvHeadCache<T> {
    c1: ConvCache<T>,
    n1: LnCache<T>,
    r1: Mat<T>,
    c2: ConvCache<T>,
    n2: LnCache<T>,
    r2: Mat<T>,
    c3: ConvCache<T>,
}

impl ConvHead {
    fn new<T: Real, R: Rng>(bld: &mut Builder<T, R>, name: &str, d: usize, out: usize) -> Self {
        Self {
            c1: Conv1d::new(bld, &format!("{name}.conv1"), d, d),
            n1: LayerNorm::new(bld, &format!("{name}.norm1"), d),
            c2: Conv1d::new(bld, &format!("{name}.conv2"), d, d),
            n2: LayerNorm::new(bld, &format!("{name}.norm2"), d),
            c3: Conv1d::new(bld, &format!("{name}.conv3"), d, out),
        }
    }

    fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Mat<T>) -> (Mat<T>, ConvHeadCache<T>) {
        let f = x.rows;
        let (y1, c1) = self.c1.forward(p, x, f);
        let (z1, n1) = self.n1.forward(p, &y1);
        let r1 = relu(&z1);
        let (y2, c2) = self.c2.forward(p, &r1, f);
        let (z2, n2) = self.n2.forward(p, &y2);
        let r2 = relu(&z2);
        let (y3, c3) = self.c3.forward(p, &r2, f);
        (y3, ConvHeadCache { c1, n1, r1, c2, n2, r2, c3 })
    }

    fn backward<T: Real>(&self, p: &ParamStore<T>, c: &ConvHeadCache<T>, dy: &Mat<T>, g: &mut ParamStore<T>) -> Mat<T> {
        let dr2 = self.c3.backward(p, &c.c3, dy, g);
        let dz2 = relu_backward(&c.r2, &dr2);
        let dy2 = self.n2.backward(p, &c.n2, &dz2, g);
        let dr1 = self.c2.backward(p, &c.c2, &dy2, g);
        let dz1 = relu_backward(&c.r1, &dr1);
        let dy1 = self.n1.backward(p, &c.n1, &dz1, g);
        self.c1.backward(p, &c.c1, &dy1, g)
    }
}

#[derive(Clone, Debug)]
struct DfdHead {
    l1: Linear,
    n1: LayerNorm,
    l2: Linear,
    n2: LayerNorm,
    l3: Linear,
}

struct DfdCache<T> {
    x: Mat<T>,
    n1: LnCache<T>,
    r1: Mat<T>,
    n2: LnCache<T>,
    r2: Mat<T>,
}

impl DfdHead {
    fn forward<T: Real>(&self, p: &ParamStore<T>, cls: &Mat<T>) -> (Mat<T>, DfdCache<T>) {
        let (z1, n1) = self.n1.forward(p, &self.l1.forward(p, cls));
        let r1 = relu(&z1);
        let (z2, n2) = self.n2.forward(p, &self.l2.forward(p, &r1));
        let r2 = relu(&z2);
        let y = self.l3.forward(p, &r2);
        (y, DfdCache { x: cls.clone(), n1, r1, n2, r2 })
    }

    fn backward<T: Real>(&self, p: &ParamStore<T>, c: &DfdCache<T>, dy: &Mat<T>, g: &mut ParamStore<T>) -> Mat<T> {
        let dr2 = self.l3.backward(p, &c.r2, dy, g);
        let dz2 = self.n2.backward(p, &c.n2, &relu_backward(&c.r2, &dr2), g);
        let dr1 = self.l2.backward(p, &c.r1, &dz2, g);
        let dz1 = self.n1.backward(p, &c.n1, &relu_backward(&c.r1, &dr1), g);
        self.l1.backward(p, &c.x, &dz1, g)
    }
}

#[derive(Clone, Debug)]
enum Heads {
    Dfd(DfdHead),
    Tfl { cls: ConvHead, reg: ConvHead },
}

/// Network structure; parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    proj: Projection,
    seq: [ParamId; 2],
    sep: ParamId,
    cls: Option<ParamId>,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    heads: Heads,
}

struct HeadCaches<T> {
    /// Indexed `[level][modality]`.
    cls: Vec<[ConvHeadCache<T>; 2]>,
    reg: Vec<[ConvHeadCache<T>; 2]>,
    raw_cls: Vec<[Mat<T>; 2]>,
    raw_reg: Vec<[Mat<T>; 2]>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache<T> {
    layout: TokenLayout,
    mask: AttentionMask,
    proj: [ProjCache<T>; 2],
    layers: Vec<LayerCache<T>>,
    dfd: Option<DfdCache<T>>,
    tfl: Option<HeadCaches<T>>,
}

impl Model {
    /// Builds the structure and a freshly initialized parameter table.
    pub fn new<T: Real, R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng };
        let d = cfg.d;
        let enc = Init::TruncNormal(INIT_STD);
        let proj = Projection {
            c1: Conv1d::with_init(&mut b, "proj.conv1", cfg.d0, d, enc),
            c2: Conv1d::with_init(&mut b, "proj.conv2", d, d, enc),
        };
        let seq = [b.param("embed.seq_visual", vec![d], enc), b.param("embed.seq_audio", vec![d], enc)];
        let sep = b.param("embed.separator", vec![d], enc);
        let cls = (cfg.task == Task::Dfd).then(|| b.param("embed.classification", vec![d], enc));
        let pos = b.param("embed.position", vec![cfg.max_tokens(), d], enc);
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer {
                ln1: LayerNorm::new(&mut b, &format!("encoder.{i}.norm1"), d),
                attn: Attention::new(&mut b, &format!("encoder.{i}.attn"), d, cfg.heads),
                ln2: LayerNorm::new(&mut b, &format!("encoder.{i}.norm2"), d),
                fc1: Linear::new(&mut b, &format!("encoder.{i}.mlp.fc1"), d, d * cfg.mlp_ratio),
                fc2: Linear::new(&mut b, &format!("encoder.{i}.mlp.fc2"), d * cfg.mlp_ratio, d),
            })
            .collect();
        let heads = match cfg.task {
            Task::Dfd => Heads::Dfd(DfdHead {
                l1: Linear::new(&mut b, "head.fc1", d, d),
                n1: LayerNorm::new(&mut b, "head.norm1", d),
                l2: Linear::new(&mut b, "head.fc2", d, d),
                n2: LayerNorm::new(&mut b, "head.norm2", d),
                l3: Linear::new(&mut b, "head.fc3", d, 2),
            }),
            Task::Tfl => Heads::Tfl {
                cls: ConvHead::new(&mut b, "head.classification", d, 1),
                reg: ConvHead::new(&mut b, "head.regression", d, 2),
            },
        };
        Ok((Self { cfg, proj, seq, sep, cls, pos, layers, heads }, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_frames(&self, frames: usize) -> Result<()> {
        if frames > self.cfg.f_max {
            return Err(Error::InvalidInput(format!("{frames} frames exceed f_max={}", self.cfg.f_max)));
        }
        Ok(())
    }

    /// Projects a `frames × d0` stream to `frames × d`; rows at or beyond
    /// `valid` are padding and come out zero.
    pub fn project_features<T: Real>(&self, p: &ParamStore<T>, x: &Mat<T>, valid: usize) -> Result<Mat<T>> {
        self.check_frames(x.rows)?;
        if x.cols != self.cfg.d0 || valid > x.rows {
            return Err(Error::InvalidInput(format!(
                "expected frames×{} input with valid ≤ frames, got {}×{} (valid {valid})",
                self.cfg.d0, x.rows, x.cols
            )));
        }
        Ok(self.proj.forward(p, x, valid).0)
    }

    /// Builds the token sequence from projected streams of `padded` rows.
    pub fn assemble_tokens<T: Real>(
        &self,
        p: &ParamStore<T>,
        v: &Mat<T>,
        a: &Mat<T>,
        valid: usize,
    ) -> Result<(Mat<T>, TokenLayout)> {
        if v.rows != a.rows || v.cols != a.cols {
            return Err(Error::InvalidInput(format!(
                "visual {}×{} and audio {}×{} projections differ",
                v.rows, v.cols, a.rows, a.cols
            )));
        }
        self.check_frames(v.rows)?;
        let layout = TokenLayout { task: self.cfg.task, frames: valid, padded: v.rows };
        let d = self.cfg.d;
        let pos = p.get(self.pos);
        let mut t = Mat::zeros(layout.len(), d);
        for idx in 0..layout.real_len() {
            let row = t.row_mut(idx);
            match layout.role(idx) {
                TokenRole::Classification => row.copy_from_slice(p.get(self.cls.expect("dfd model"))),
                TokenRole::Separator => row.copy_from_slice(p.get(self.sep)),
                TokenRole::Frame(m, j) => {
                    let src = if m == Modality::Visual { v.row(j) } else { a.row(j) };
                    for ((o, &x), &s) in row.iter_mut().zip(src).zip(p.get(self.seq[m.index()])) {
                        *o = x + s;
                    }
                }
                TokenRole::Padding => unreachable!(),
            }
            for (o, &e) in row.iter_mut().zip(&pos[idx * d..(idx + 1) * d]) {
                *o = *o + e;
            }
        }
        Ok((t, layout))
    }

    pub fn build_mask(&self, layout: &TokenLayout) -> AttentionMask {
        AttentionMask::local(layout.len(), self.cfg.window, layout.pad_len())
    }

    fn encode_cached<T: Real>(
        &self,
        p: &ParamStore<T>,
        tokens: &Mat<T>,
        layout: &TokenLayout,
        mask: &AttentionMask,
    ) -> Result<(PyramidFeatures<T>, Vec<LayerCache<T>>)> {
        let mut x = tokens.clone();
        let mut levels = Vec::with_capacity(self.layers.len());
        let mut cls_rows = Vec::new();
        let mut caches = Vec::with_capacity(self.layers.len());
        let f = layout.frames;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, c) = layer.forward(p, &x, mask, self.cfg.strict_residual);
            if !y.is_finite() {
                return Err(Error::NonFinite(format!("encoder layer {i} activations")));
            }
            let mut z = Mat::zeros(2 * f, self.cfg.d);
            for m in Modality::ALL {
                for j in 0..f {
                    z.row_mut(m.index() * f + j).copy_from_slice(y.row(layout.frame(m, j)));
                }
            }
            levels.push(z);
            if let Some(c) = layout.classification() {
                cls_rows.extend_from_slice(y.row(c));
            }
            caches.push(c);
            x = y;
        }
        let cls = layout.classification().map(|_| Mat::from_vec(self.layers.len(), self.cfg.d, cls_rows));
        Ok((PyramidFeatures { levels, cls }, caches))
    }

    /// Runs the encoder and collects the feature pyramid.
    pub fn encode<T: Real>(
        &self,
        p: &ParamStore<T>,
        tokens: &Mat<T>,
        layout: &TokenLayout,
        mask: &AttentionMask,
    ) -> Result<PyramidFeatures<T>> {
        Ok(self.encode_cached(p, tokens, layout, mask)?.0)
    }

    /// Per-layer detection logits from the classification tokens.
    pub fn head_dfd<T: Real>(&self, p: &ParamStore<T>, cls: &Mat<T>) -> Result<Mat<T>> {
        match &self.heads {
            Heads::Dfd(h) => Ok(h.forward(p, cls).0),
            Heads::Tfl { .. } => Err(Error::TaskMismatch { expected: "dfd".into(), found: "tfl".into() }),
        }
    }

    fn heads_tfl_cached<T: Real>(
        &self,
        p: &ParamStore<T>,
        z: &PyramidFeatures<T>,
    ) -> Result<(Vec<LevelPrediction<T>>, HeadCaches<T>)> {
        let Heads::Tfl { cls, reg } = &self.heads else {
            return Err(Error::TaskMismatch { expected: "tfl".into(), found: "dfd".into() });
        };
        let f = z.frames();
        let mut preds = Vec::with_capacity(z.levels.len());
        let mut caches = HeadCaches { cls: Vec::new(), reg: Vec::new(), raw_cls: Vec::new(), raw_reg: Vec::new() };
        for level in 0..z.levels.len() {
            let mut pred = LevelPrediction::zeros(f);
            let run = |m: Modality| {
                let seq = z.modality_level(level, m);
                (cls.forward(p, &seq), reg.forward(p, &seq))
            };
            let ((cv, ccv), (rv, crv)) = run(Modality::Visual);
            let ((ca, cca), (ra, cra)) = run(Modality::Audio);
            for (mi, (c, r)) in [(&cv, &rv), (&ca, &ra)].into_iter().enumerate() {
                for j in 0..f {
                    pred.prob[mi][j] = sigmoid(c.get(j, 0));
                    pred.d_start[mi][j] = softplus(r.get(j, 0));
                    pred.d_end[mi][j] = -softplus(r.get(j, 1));
                }
            }
            preds.push(pred);
            caches.cls.push([ccv, cca]);
            caches.reg.push([crv, cra]);
            caches.raw_cls.push([cv, ca]);
            caches.raw_reg.push([rv, ra]);
        }
        Ok((preds, caches))
    }

    /// Per-level, per-modality frame probabilities and boundary distances.
    pub fn heads_tfl<T: Real>(&self, p: &ParamStore<T>, z: &PyramidFeatures<T>) -> Result<Vec<LevelPrediction<T>>> {
        Ok(self.heads_tfl_cached(p, z)?.0)
    }

    /// Full forward pass over one (possibly padded) sample.
    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        visual: &Mat<T>,
        audio: &Mat<T>,
        valid: usize,
    ) -> Result<(Prediction<T>, ForwardCache<T>)> {
        self.check_frames(visual.rows)?;
        if visual.rows != audio.rows || valid > visual.rows || valid == 0 {
            return Err(Error::InvalidInput(format!(
                "visual has {} frames, audio {}, valid {valid}",
                visual.rows, audio.rows
            )));
        }
        if visual.cols != self.cfg.d0 || audio.cols != self.cfg.d0 {
            return Err(Error::InvalidInput(format!("feature dimension must be {}", self.cfg.d0)));
        }
        let (pv, cv) = self.proj.forward(p, visual, valid);
        let (pa, ca) = self.proj.forward(p, audio, valid);
        let (tokens, layout) = self.assemble_tokens(p, &pv, &pa, valid)?;
        let mask = self.build_mask(&layout);
        let (z, layer_caches) = self.encode_cached(p, &tokens, &layout, &mask)?;
        let mut cache = ForwardCache { layout, mask, proj: [cv, ca], layers: layer_caches, dfd: None, tfl: None };
        let pred = match &self.heads {
            Heads::Dfd(h) => {
                let (logits, c) = h.forward(p, z.cls.as_ref().expect("dfd pyramid has cls"));
                cache.dfd = Some(c);
                Prediction::Dfd(logits)
            }
            Heads::Tfl { .. } => {
                let (preds, c) = self.heads_tfl_cached(p, &z)?;
                cache.tfl = Some(c);
                Prediction::Tfl(preds)
            }
        };
        Ok((pred, cache))
    }

    /// Backpropagates `grad` (same shape as the forward prediction) and
    /// accumulates parameter gradients into `g`.
    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &ForwardCache<T>,
        grad: &PredictionGrad<T>,
        g: &mut ParamStore<T>,
    ) {
        let layout = cache.layout;
        let f = layout.frames;
        let d = self.cfg.d;
        let l = self.layers.len();
        // gradients w.r.t. each level's frame tokens and cls rows
        let mut dz: Vec<Mat<T>> = vec![Mat::zeros(2 * f, d); l];
        let mut dcls: Option<Mat<T>> = None;
        match (&self.heads, grad) {
            (Heads::Dfd(h), Prediction::Dfd(dlogits)) => {
                dcls = Some(h.backward(p, cache.dfd.as_ref().expect("dfd cache"), dlogits, g));
            }
            (Heads::Tfl { cls, reg }, Prediction::Tfl(levels)) => {
                let hc = cache.tfl.as_ref().expect("tfl cache");
                for (lv, lg) in levels.iter().enumerate() {
                    for m in Modality::ALL {
                        let mi = m.index();
                        let rc = &hc.raw_cls[lv][mi];
                        let rr = &hc.raw_reg[lv][mi];
                        let mut dc = Mat::zeros(f, 1);
                        let mut dr = Mat::zeros(f, 2);
                        for j in 0..f {
                            let pr = sigmoid(rc.get(j, 0));
                            dc.set(j, 0, lg.prob[mi][j] * pr * (T::one() - pr));
                            dr.set(j, 0, lg.d_start[mi][j] * sigmoid(rr.get(j, 0)));
                            dr.set(j, 1, -lg.d_end[mi][j] * sigmoid(rr.get(j, 1)));
                        }
                        let mut ds = cls.backward(p, &hc.cls[lv][mi], &dc, g);
                        ds.add_assign(&reg.backward(p, &hc.reg[lv][mi], &dr, g));
                        dz[lv].data[mi * f * d..(mi + 1) * f * d].copy_from_slice(&ds.data);
                    }
                }
            }
            _ => panic!("gradient does not match the model task"),
        }

        let scatter = |lv: usize, dx: &mut Mat<T>| {
            for m in Modality::ALL {
                for j in 0..f {
                    let dst = dx.row_mut(layout.frame(m, j));
                    for (a, &b) in dst.iter_mut().zip(dz[lv].row(m.index() * f + j)) {
                        *a = *a + b;
                    }
                }
            }
            if let (Some(c), Some(dc)) = (layout.classification(), &dcls) {
                for (a, &b) in dx.row_mut(c).iter_mut().zip(dc.row(lv)) {
                    *a = *a + b;
                }
            }
        };
        let mut dx = Mat::zeros(layout.len(), d);
        for lv in (0..l).rev() {
            scatter(lv, &mut dx);
            dx = self.layers[lv].backward(p, &cache.layers[lv], &cache.mask, self.cfg.strict_residual, &dx, g);
        }

        // token assembly
        let mut dproj = [Mat::zeros(layout.padded, d), Mat::zeros(layout.padded, d)];
        {
            let gp = g.get_mut(self.pos);
            for idx in 0..layout.real_len() {
                for (a, &b) in gp[idx * d..(idx + 1) * d].iter_mut().zip(dx.row(idx)) {
                    *a = *a + b;
                }
            }
        }
        for idx in 0..layout.real_len() {
            let row = dx.row(idx);
            let target = match layout.role(idx) {
                TokenRole::Classification => self.cls.expect("dfd model"),
                TokenRole::Separator => self.sep,
                TokenRole::Frame(m, j) => {
                    dproj[m.index()].row_mut(j).copy_from_slice(row);
                    self.seq[m.index()]
                }
                TokenRole::Padding => unreachable!(),
            };
            for (a, &b) in g.get_mut(target).iter_mut().zip(row) {
                *a = *a + b;
            }
        }
        for m in Modality::ALL {
            self.proj.backward(p, &cache.proj[m.index()], &dproj[m.index()], g);
        }
    }
}

/// Level-averaged localization outputs for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePredictions {
    pub prob: Vec<f64>,
    pub d_start: Vec<f64>,
    pub d_end: Vec<f64>,
}

/// Averages probabilities and distances over pyramid levels.
pub fn average_levels<T: Real>(levels: &[LevelPrediction<T>], m: Modality) -> FramePredictions {
    let mi = m.index();
    let f = levels[0].prob[mi].len();
    let n = levels.len() as f64;
    let avg = |sel: &dyn Fn(&LevelPrediction<T>) -> &Vec<T>| -> Vec<f64> {
        (0..f).map(|j| levels.iter().map(|lv| sel(lv)[j].to_f64().unwrap()).sum::<f64>() / n).collect()
    };
    FramePredictions {
        prob: avg(&|lv| &lv.prob[mi]),
        d_start: avg(&|lv| &lv.d_start[mi]),
        d_end: avg(&|lv| &lv.d_end[mi]),
    }
}

/// Per-modality fake probabilities from layer-averaged detection logits.
pub fn dfd_probabilities<T: Real>(logits: &Mat<T>) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (m, o) in out.iter_mut().enumerate() {
        let mean = (0..logits.rows).map(|r| logits.get(r, m).to_f64().unwrap()).sum::<f64>() / logits.rows as f64;
        *o = sigmoid(mean);
    }
    out
}
