//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "HVAECKPT"
//! version   u32
//! kind      u8       0 = task VAE, 1 = hyper-VAE
//! arch      u32 × 3 (VAE: input, hidden, latent)
//!           u32 × 6 (hyper: the VAE triple, then enc_hidden, latent, dec_hidden)
//! entries   u32, then per entry:
//!             layer  u16 length + UTF-8 bytes
//!             param  u16 length + UTF-8 bytes
//!             rank   u8, dims u32 × rank
//! payload   u64 count, then count × f32
//! sha256    32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hypernet::{HyperArch, HyperParams, HyperVae};
use crate::layout::ParamLayout;
use crate::scalar::Scalar;
use crate::vae::{TaskVae, ThetaVector, VaeArch};

pub const MAGIC: &[u8; 8] = b"HVAECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Vae(VaeArch),
    Hyper(HyperArch),
}

impl ModelKind {
    pub fn layout(&self) -> ParamLayout {
        match self {
            ModelKind::Vae(a) => a.layout(),
            ModelKind::Hyper(a) => a.layout(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelKind,
    pub layout: ParamLayout,
    pub values: Vec<f32>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(model: ModelKind, values: &[T]) -> Result<Self> {
        let layout = model.layout();
        if values.len() != layout.total_len() {
            return Err(Error::LayoutMismatch { expected: layout.total_len(), actual: values.len() });
        }
        let values = values.iter().map(|v| v.to64() as f32).collect();
        Ok(Self { model, layout, values })
    }

    pub fn values_as<T: Scalar>(&self) -> Vec<T> {
        self.values.iter().map(|&v| T::of(f64::from(v))).collect()
    }

    pub fn theta<T: Scalar>(&self) -> Result<(TaskVae, ThetaVector<T>)> {
        match self.model {
            ModelKind::Vae(arch) => {
                let vae = TaskVae::new(arch);
                let theta = vae.wrap(self.values_as())?;
                Ok((vae, theta))
            }
            ModelKind::Hyper(_) => Err(Error::Checkpoint("checkpoint holds a hyper-VAE, not a VAE".into())),
        }
    }

    pub fn hyper<T: Scalar>(&self) -> Result<(HyperVae, HyperParams<T>)> {
        match self.model {
            ModelKind::Hyper(arch) => {
                let hv = HyperVae::new(arch);
                let gamma = hv.wrap(self.values_as())?;
                Ok((hv, gamma))
            }
            ModelKind::Vae(_) => Err(Error::Checkpoint("checkpoint holds a VAE, not a hyper-VAE".into())),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let dims: Vec<usize> = match self.model {
            ModelKind::Vae(a) => {
                out.push(0);
                vec![a.input_dim, a.hidden, a.latent]
            }
            ModelKind::Hyper(a) => {
                out.push(1);
                vec![a.target.input_dim, a.target.hidden, a.target.latent, a.enc_hidden, a.latent, a.dec_hidden]
            }
        };
        for d in dims {
            put_u32(&mut out, d)?;
        }
        put_u32(&mut out, self.layout.entries().len())?;
        for e in self.layout.entries() {
            put_str(&mut out, &e.layer)?;
            put_str(&mut out, &e.param)?;
            out.push(u8::try_from(e.shape.len()).map_err(|_| Error::Checkpoint("rank exceeds 255".into()))?);
            for &d in &e.shape {
                put_u32(&mut out, d)?;
            }
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(digest.as_slice());
        Ok(out)
    }

    /// Verifies the checksum before interpreting any field.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(Error::Checksum);
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let model = match r.take(1)?[0] {
            0 => ModelKind::Vae(VaeArch::new(r.usize()?, r.usize()?, r.usize()?)),
            1 => {
                let target = VaeArch::new(r.usize()?, r.usize()?, r.usize()?);
                ModelKind::Hyper(HyperArch { target, enc_hidden: r.usize()?, latent: r.usize()?, dec_hidden: r.usize()? })
            }
            k => return Err(Error::Checkpoint(format!("unknown model kind {k}"))),
        };
        if let ModelKind::Hyper(a) = model {
            let side = (a.dec_hidden as f64).sqrt().round() as usize;
            if side * side != a.dec_hidden {
                return Err(Error::Checkpoint("hyper decoder width is not a perfect square".into()));
            }
        }
        if model_dims_zero(&model) {
            return Err(Error::Checkpoint("zero dimension in architecture".into()));
        }
        let mut layout = ParamLayout::new();
        let n = r.u32()?;
        for _ in 0..n {
            let layer = r.string()?;
            let param = r.string()?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            if shape.is_empty() || shape.contains(&0) {
                return Err(Error::Checkpoint(format!("bad shape for {layer}.{param}")));
            }
            layout.push(&layer, &param, &shape);
        }
        if layout != model.layout() {
            return Err(Error::Checkpoint("layout table does not match the architecture".into()));
        }
        let count = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if count != layout.total_len() as u64 {
            return Err(Error::Checkpoint(format!("{count} values for a layout of {}", layout.total_len())));
        }
        let values = (0..count).map(|_| r.take(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))).collect::<Result<Vec<_>>>()?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes before checksum".into()));
        }
        Ok(Self { model, layout, values })
    }
}

fn model_dims_zero(m: &ModelKind) -> bool {
    let v = |a: &VaeArch| a.input_dim == 0 || a.hidden == 0 || a.latent == 0;
    match m {
        ModelKind::Vae(a) => v(a),
        ModelKind::Hyper(a) => v(&a.target) || a.enc_hidden == 0 || a.latent == 0 || a.dec_hidden == 0,
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let n = u16::try_from(s.len()).map_err(|_| Error::Checkpoint("name too long".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

pub fn save_checkpoint<T: Scalar>(model: ModelKind, values: &[T], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, Checkpoint::new(model, values)?.encode()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}
