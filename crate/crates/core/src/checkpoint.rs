//! Binary checkpoint archive. All floats are stored as raw little-endian
//! bits, so a save/load round trip is exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RGBTCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Backbone, projections and prior branches only.
    Pretrain,
    Full,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            CheckpointKind::Pretrain => 0,
            CheckpointKind::Full => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub fingerprint: String,
    /// Model config as TOML.
    pub config: String,
    pub epoch: u64,
    pub step: u64,
    pub params: ParamStore,
    pub opt: AdamW,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.shape().len() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn tensors<'a>(&mut self, it: impl ExactSizeIterator<Item = (&'a String, &'a Tensor)>) {
        self.u64(it.len() as u64);
        for (k, t) in it {
            self.str(k);
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated archive")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> std::result::Result<usize, String> {
        let n = self.u64()?;
        // every counted item needs at least one byte
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(format!("length {n} exceeds archive size"));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.len()?;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|e| e.to_string())
    }
    fn tensor(&mut self) -> std::result::Result<Tensor, String> {
        let nd = self.len()?;
        let shape = (0..nd).map(|_| self.len()).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err("tensor data truncated".into());
        }
        let data = (0..n).map(|_| self.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }
    fn tensors(&mut self) -> std::result::Result<BTreeMap<String, Tensor>, String> {
        let n = self.len()?;
        (0..n).map(|_| Ok((self.str()?, self.tensor()?))).collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.0.push(self.kind.code());
        w.str(&self.fingerprint);
        w.str(&self.config);
        w.u64(self.epoch);
        w.u64(self.step);
        w.tensors(self.params.iter());
        let c = &self.opt.cfg;
        for v in [c.beta1, c.beta2, c.eps, c.weight_decay] {
            w.f64(v);
        }
        w.tensors(self.opt.m.iter());
        w.tensors(self.opt.v.iter());
        w.u64(self.opt.t.len() as u64);
        for (k, &t) in &self.opt.t {
            w.str(k);
            w.u64(t);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        if buf.len() < 13 || &buf[..8] != MAGIC {
            return Err("not a checkpoint archive".into());
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format!("unsupported archive version {version}"));
        }
        let kind = match buf[12] {
            0 => CheckpointKind::Pretrain,
            1 => CheckpointKind::Full,
            k => return Err(format!("unknown checkpoint kind {k}")),
        };
        let mut r = Reader { buf, pos: 13 };
        let fingerprint = r.str()?;
        let config = r.str()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let params = ParamStore::from_map(r.tensors()?);
        let cfg = AdamWConfig { beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()?, weight_decay: r.f64()? };
        let m = r.tensors()?;
        let v = r.tensors()?;
        let nt = r.len()?;
        let t = (0..nt).map(|_| Ok((r.str()?, r.u64()?))).collect::<std::result::Result<_, String>>()?;
        if r.pos != buf.len() {
            return Err("trailing bytes after archive".into());
        }
        Ok(Self { kind, fingerprint, config, epoch, step, params, opt: AdamW { cfg, m, v, t } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|reason| Error::MalformedFile { path: path.to_path_buf(), reason })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rand_tensor;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", rand_tensor(&[2, 3, 3, 3], 1));
        params.insert("b", Tensor::from_parts(vec![3], vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.m.insert("a.w".into(), rand_tensor(&[2, 3, 3, 3], 2));
        opt.v.insert("a.w".into(), rand_tensor(&[2, 3, 3, 3], 3));
        opt.t.insert("a.w".into(), 17);
        Checkpoint {
            kind: CheckpointKind::Full,
            fingerprint: "abc".into(),
            config: "seed = 3\n".into(),
            epoch: 4,
            step: 99,
            params,
            opt,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
        assert_eq!(back.params.get("b").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/ck.bin");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 13, 40, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
