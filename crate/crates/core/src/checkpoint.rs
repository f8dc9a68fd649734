//! Binary checkpoints: parameters, optimizer moments and progress, tagged
//! with the config hash and bank checksum they were trained against.

use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"R2PCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub bank_checksum: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub optimizer: Option<AdamW>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rows() as u32);
        self.u32(t.cols() as u32);
        t.data().iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corruption("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let (r, c) = (self.u32()? as usize, self.u32()? as usize);
        let data = (0..r * c).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::from_vec(r, c, data))
    }
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, opt: Option<&AdamW>, config_hash: u64, bank_checksum: u32, epoch: usize, step: usize) -> Self {
        Self {
            config_hash,
            bank_checksum,
            epoch,
            step,
            names: store.ids().map(|id| store.name(id).to_string()).collect(),
            params: store.tensors().to_vec(),
            optimizer: opt.cloned(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
        w.u64(self.config_hash);
        w.u32(self.bank_checksum);
        w.u64(self.epoch as u64);
        w.u64(self.step as u64);
        w.u32(self.params.len() as u32);
        for (name, t) in self.names.iter().zip(&self.params) {
            w.u32(name.len() as u32);
            w.0.extend_from_slice(name.as_bytes());
            w.tensor(t);
        }
        match &self.optimizer {
            Some(o) => {
                w.u32(1);
                for v in [o.beta1, o.beta2, o.weight_decay] {
                    w.f64(v);
                }
                w.u64(o.t);
                for (i, (m, v)) in o.m.iter().zip(&o.v).enumerate() {
                    w.0.push(u8::from(o.decay[i]));
                    w.tensor(m);
                    w.tensor(v);
                }
            }
            None => w.u32(0),
        }
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic, not a checkpoint".into()));
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body]) != stored {
            return Err(Error::Corruption("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { bytes: &bytes[..body], pos: 8 };
        let config_hash = r.u64()?;
        let bank_checksum = r.u32()?;
        let epoch = r.u64()? as usize;
        let step = r.u64()? as usize;
        let n = r.u32()? as usize;
        let mut names = Vec::with_capacity(n);
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            names.push(String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?);
            params.push(r.tensor()?);
        }
        let optimizer = if r.u32()? == 1 {
            let (beta1, beta2, weight_decay) = (r.f64()?, r.f64()?, r.f64()?);
            let t = r.u64()?;
            let mut decay = Vec::with_capacity(n);
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                decay.push(r.take(1)?[0] == 1);
                m.push(r.tensor()?);
                v.push(r.tensor()?);
            }
            Some(AdamW { beta1, beta2, weight_decay, decay, m, v, t })
        } else {
            None
        };
        if r.pos != body {
            return Err(Error::Corruption("trailing bytes in checkpoint".into()));
        }
        Ok(Self { config_hash, bank_checksum, epoch, step, names, params, optimizer })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Fails unless the checkpoint was written for this config and bank.
    pub fn check_compatible(&self, config_hash: u64, bank_checksum: u32) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::Mismatch(format!("checkpoint config hash {:016x}, run expects {config_hash:016x}", self.config_hash)));
        }
        if self.bank_checksum != bank_checksum {
            return Err(Error::Mismatch(format!("checkpoint bank checksum {:08x}, bank file has {bank_checksum:08x}", self.bank_checksum)));
        }
        Ok(())
    }

    /// Copies parameters into `store`, matching by name and shape.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.names.len() != store.len() {
            return Err(Error::Mismatch(format!("checkpoint has {} parameters, model has {}", self.names.len(), store.len())));
        }
        for (name, t) in self.names.iter().zip(&self.params) {
            let id = store.id(name).ok_or_else(|| Error::Mismatch(format!("unknown parameter {name}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Mismatch(format!("shape mismatch for {name}")));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}
