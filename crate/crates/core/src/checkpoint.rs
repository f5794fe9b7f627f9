//! Binary checkpoints: `DMCK` magic, u16 version, the model configuration as
//! `key=value` text, then a named parameter table of little-endian f32.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, IoContext, Result};
use crate::kv::KeyValues;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;

pub const MAGIC: [u8; 4] = *b"DMCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl ModelConfig {
    pub fn to_kv_text(&self) -> String {
        format!(
            "d={}\nr={}\nu={}\nl={}\nq={}\nf_max={}\nd0={}\ntask={}\nstrict_residual={}\n",
            self.d, self.heads, self.mlp_ratio, self.layers, self.window, self.f_max, self.d0, self.task, self.strict_residual
        )
    }

    /// Reads the model keys, leaving others in `kv`.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            d: kv.take_or("d", d.d)?,
            heads: kv.take_or("r", d.heads)?,
            mlp_ratio: kv.take_or("u", d.mlp_ratio)?,
            layers: kv.take_or("l", d.layers)?,
            window: kv.take_or("q", d.window)?,
            f_max: kv.take_or("f_max", d.f_max)?,
            d0: kv.take_or("d0", d.d0)?,
            task: kv.take_or("task", d.task)?,
            strict_residual: kv.take_or("strict_residual", d.strict_residual)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Checkpoint {
    /// Rebuilds the model structure for these parameters.
    pub fn model(&self) -> Result<Model> {
        let (model, fresh) = Model::new::<f32, _>(self.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        check_layout(&fresh, &self.params, Path::new("<checkpoint>"))?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_kv_text();
        put_u32(&mut buf, text.len());
        buf.extend_from_slice(text.as_bytes());
        put_u32(&mut buf, self.params.len());
        for e in self.params.entries() {
            put_u32(&mut buf, e.name.len());
            buf.extend_from_slice(e.name.as_bytes());
            put_u32(&mut buf, e.shape.len());
            for &s in &e.shape {
                put_u32(&mut buf, s);
            }
            for v in &e.value {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { path: path.into(), found: magic });
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch { path: path.into(), found: version, expected: VERSION });
        }
        let len = r.u32()?;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Parse { path: path.into(), line: 0, detail: "config is not UTF-8".into() })?;
        let mut kv = KeyValues::parse(text, path)?;
        let config = ModelConfig::from_kv(&mut kv)?;
        kv.finish()?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let n = r.u32()?;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Parse { path: path.into(), line: 0, detail: "parameter name is not UTF-8".into() })?;
            let dims = r.u32()?;
            let shape = (0..dims).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let value = r
                .take(count * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(name, shape, value);
        }
        if r.pos != bytes.len() {
            return Err(Error::DimensionMismatch {
                path: path.into(),
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let (_, fresh) = Model::new::<f32, _>(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        check_layout(&fresh, &params, path)?;
        Ok(Self { config, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes, path)
    }
}

fn check_layout(expected: &ParamStore<f32>, found: &ParamStore<f32>, path: &Path) -> Result<()> {
    let mismatch = |detail: String| Err(Error::DimensionMismatch { path: path.into(), detail });
    if expected.len() != found.len() {
        return mismatch(format!("expected {} parameters, found {}", expected.len(), found.len()));
    }
    for (e, f) in expected.entries().iter().zip(found.entries()) {
        if e.name != f.name || e.shape != f.shape {
            return mismatch(format!("expected {} {:?}, found {} {:?}", e.name, e.shape, f.name, f.shape));
        }
    }
    Ok(())
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated { path: self.path.into(), expected: end, found: self.bytes.len() });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}
