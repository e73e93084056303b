//! Versioned checkpoint container.
//!
//! ```text
//! magic    8 bytes  "HPLNCKPT"
//! version  u32
//! count    u32
//! table    count × { name_len u16, name, offset u64, length u64, crc32 u32 }
//! payload  concatenated section bodies (offsets are relative to its start)
//! ```
//!
//! All integers and floats are little-endian. Floats are stored as raw `f64`
//! bits so a round trip is exact.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AdamConfig, AdamState, ParamSet, RunningStats, Tensor};
use crate::error::{Error, Result};
use crate::hypernet::{HypernetParams, UpdateMask};
use crate::meta::{EpochSampler, RunLog, TrainConfig};
use crate::target::TargetParams;

use super::{read_bytes, write_atomic};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"HPLNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Encodes named sections into a container.
pub fn encode_container(sections: &[(&str, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, body) in sections {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(body).to_le_bytes());
        offset += body.len() as u64;
    }
    for (_, body) in sections {
        out.extend_from_slice(body);
    }
    out
}

/// Splits a container into verified sections.
pub fn decode_container(bytes: &[u8], path: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut r = Reader::new(bytes, path, "header");
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "magic", "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            "version",
            format!("checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format(path, "section table", "section name is not UTF-8"))?;
        table.push((name, r.u64()?, r.u64()?, r.u32()?));
    }
    let payload = &bytes[r.pos..];
    let mut out = Vec::with_capacity(table.len());
    for (name, offset, length, crc) in table {
        let end = offset.saturating_add(length);
        if end > payload.len() as u64 {
            return Err(Error::format(path, name, "section extends past end of file"));
        }
        let body = &payload[offset as usize..end as usize];
        if crc32fast::hash(body) != crc {
            return Err(Error::format(path, name, "checksum mismatch"));
        }
        out.push((name, body.to_vec()));
    }
    Ok(out)
}

/// Serializable snapshot of a `ChaCha8Rng`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngSnapshot {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume meta-training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub theta: TargetParams,
    pub hyper: HypernetParams,
    pub adam_theta: AdamState,
    pub adam_delta: AdamState,
    pub rng: RngSnapshot,
    pub sampler: EpochSampler,
    pub step: u64,
    pub skipped: u64,
    pub log: RunLog,
}

struct Writer(Vec<u8>);

impl Writer {
    fn new() -> Self {
        Writer(Vec::new())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
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
    fn params(&mut self, p: &ParamSet) {
        self.u64(p.len() as u64);
        for (name, t) in p.iter() {
            self.str(name);
            self.tensor(t);
        }
    }
    fn adam(&mut self, a: &AdamState) {
        for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
            self.f64(v);
        }
        self.u64(a.step);
        self.u64(a.m.len() as u64);
        for t in a.m.iter().chain(&a.v) {
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
    section: &'a str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path, section: &'a str) -> Self {
        Reader {
            bytes,
            pos: 0,
            path,
            section,
        }
    }
    fn fail(&self, msg: &str) -> Error {
        Error::format(self.path, self.section, msg)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail("truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn count(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > self.bytes.len() as u64 {
            return Err(self.fail("implausible element count"));
        }
        Ok(n as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.count()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.fail("invalid UTF-8"))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.count()?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.count()?);
        }
        let n: usize = shape.iter().product();
        if n > self.bytes.len() / 8 {
            return Err(self.fail("truncated tensor"));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| self.fail(&e.to_string()))
    }
    fn params(&mut self) -> Result<ParamSet> {
        let n = self.count()?;
        let mut p = ParamSet::new();
        for _ in 0..n {
            let name = self.str()?;
            p.push(name, self.tensor()?);
        }
        Ok(p)
    }
    fn adam(&mut self) -> Result<AdamState> {
        let config = AdamConfig {
            lr: self.f64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
        };
        let step = self.u64()?;
        let n = self.count()?;
        let m = (0..n).map(|_| self.tensor()).collect::<Result<Vec<_>>>()?;
        let v = (0..n).map(|_| self.tensor()).collect::<Result<Vec<_>>>()?;
        Ok(AdamState { config, step, m, v })
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail("trailing bytes"));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let mut theta = Writer::new();
        theta.params(&self.theta.params);
        let mut hyper = Writer::new();
        hyper.params(&self.hyper.params);
        hyper.u64(self.hyper.running.len() as u64);
        for s in &self.hyper.running {
            hyper.u64(s.mean.len() as u64);
            for &v in s.mean.iter().chain(&s.var) {
                hyper.f64(v);
            }
        }
        let mut adam_theta = Writer::new();
        adam_theta.adam(&self.adam_theta);
        let mut adam_delta = Writer::new();
        adam_delta.adam(&self.adam_delta);
        let mut state = Writer::new();
        state.0.extend_from_slice(&self.rng.seed);
        state.u64(self.rng.stream);
        state.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        state.u64(self.sampler.seed);
        state.u64(self.sampler.epoch);
        state.u64(self.sampler.position as u64);
        state.u64(self.step);
        state.u64(self.skipped);
        let log = self.log.to_csv().into_bytes();
        encode_container(&[
            ("config", config),
            ("theta", theta.0),
            ("hypernet", hyper.0),
            ("adam.theta", adam_theta.0),
            ("adam.delta", adam_delta.0),
            ("state", state.0),
            ("runlog", log),
        ])
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let sections = decode_container(bytes, path)?;
        let get = |name: &str| {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, b)| b.as_slice())
                .ok_or_else(|| Error::format(path, name, "missing section"))
        };
        let config: TrainConfig =
            serde_json::from_slice(get("config")?).map_err(|e| Error::format(path, "config", e.to_string()))?;

        let mut r = Reader::new(get("theta")?, path, "theta");
        let theta_params = r.params()?;
        r.finish()?;
        let theta = TargetParams::from_parts(config.target.clone(), theta_params)
            .map_err(|e| Error::format(path, "theta", e.to_string()))?;

        let mut r = Reader::new(get("hypernet")?, path, "hypernet");
        let hyper_params = r.params()?;
        let n = r.count()?;
        let mut running = Vec::with_capacity(n);
        for _ in 0..n {
            let c = r.count()?;
            let mean = (0..c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let var = (0..c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            running.push(RunningStats { mean, var });
        }
        r.finish()?;
        let mask = UpdateMask::parse(&config.update_mask, &config.target)
            .map_err(|e| Error::format(path, "config", e.to_string()))?;
        let template = config.hypernet_template(&mask)?;
        let same = template.params.names() == hyper_params.names()
            && template
                .params
                .tensors()
                .iter()
                .zip(hyper_params.tensors())
                .all(|(a, b)| a.shape() == b.shape())
            && template.running.len() == running.len();
        if !same {
            return Err(Error::format(
                path,
                "hypernet",
                "parameters do not match the stored config",
            ));
        }
        let hyper = HypernetParams {
            params: hyper_params,
            running,
            ..template
        };

        let mut r = Reader::new(get("adam.theta")?, path, "adam.theta");
        let adam_theta = r.adam()?;
        r.finish()?;
        let mut r = Reader::new(get("adam.delta")?, path, "adam.delta");
        let adam_delta = r.adam()?;
        r.finish()?;

        let mut r = Reader::new(get("state")?, path, "state");
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let rng = RngSnapshot {
            seed,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let sampler = EpochSampler {
            seed: r.u64()?,
            epoch: r.u64()?,
            position: r.u64()? as usize,
        };
        let step = r.u64()?;
        let skipped = r.u64()?;
        r.finish()?;

        let log_text = std::str::from_utf8(get("runlog")?).map_err(|_| Error::format(path, "runlog", "not UTF-8"))?;
        let log = RunLog::from_csv(log_text).map_err(|e| Error::format(path, "runlog", e.to_string()))?;

        Ok(Checkpoint {
            config,
            theta,
            hyper,
            adam_theta,
            adam_delta,
            rng,
            sampler,
            step,
            skipped,
            log,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_bytes(path)?, path)
}
