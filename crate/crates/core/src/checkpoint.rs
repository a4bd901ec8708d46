//! Checkpoint persistence: the RCK1 container.
//!
//! Layout (all integers little-endian, all tensor payloads 32-bit floats):
//!
//! ```text
//! magic          4 bytes  "RCK1"
//! version        u32      currently 1
//! epoch          u64
//! net_seed       u64
//! config_digest  u64      FNV-1a over the canonical train-config JSON
//! opt step       u64
//! opt lr         f32
//! opt decay      f32
//! opt rho        f32
//! opt epsilon    f32
//! rng seed       32 bytes
//! rng stream     u64
//! rng word_pos   u128
//! config_len     u32      network-config JSON byte length
//! config JSON    config_len bytes
//! tensor count   u32
//!   per tensor:  name_len u32, name bytes, rank u32, extents u32 * rank,
//!                payload f32 * numel
//! checksum       u64      FNV-1a over every preceding byte
//! ```
//!
//! Parameters are stored under their network names; optimizer accumulators
//! under `opt/v/<name>`. Save then load is bit-exact, including optimizer
//! and rng state.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{build_network, Network, NetworkConfig};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable snapshot of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub network_config: NetworkConfig,
    pub net_seed: u64,
    /// Parameter tensors, aligned with the network's naming order.
    pub params: Vec<(String, Tensor)>,
    pub optimizer: OptimizerState,
    pub train_config_digest: u64,
    pub rng: RngState,
}

impl Checkpoint {
    /// Snapshots a training state.
    pub fn capture(
        epoch: usize,
        net: &Network,
        optimizer: &OptimizerState,
        train_config_digest: u64,
        rng: &ChaCha8Rng,
    ) -> Checkpoint {
        let params = net
            .param_names()
            .iter()
            .cloned()
            .zip(net.params().iter().cloned())
            .collect();
        Checkpoint {
            epoch,
            network_config: net.config().clone(),
            net_seed: net.seed(),
            params,
            optimizer: optimizer.clone(),
            train_config_digest,
            rng: RngState::capture(rng),
        }
    }

    /// Rebuilds the network with the stored parameters.
    pub fn restore_network(&self) -> Result<Network> {
        let mut net = build_network(&self.network_config, self.net_seed)?;
        if self.params.len() != net.param_names().len() {
            return Err(Error::Format("checkpoint parameter count mismatch".into()));
        }
        for ((name, _), expected) in self.params.iter().zip(net.param_names()) {
            if name != expected {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name:?} where {expected:?} was expected"
                )));
            }
        }
        net.set_params(self.params.iter().map(|(_, t)| t.clone()).collect())?;
        Ok(net)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Digest of a train config's canonical JSON, stored in checkpoints so a
/// resume under a different configuration is caught.
pub fn config_digest<T: serde::Serialize>(cfg: &T) -> u64 {
    fnv1a64(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.u32(name.len() as u32);
        self.buf.extend_from_slice(name.as_bytes());
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f32(v);
        }
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(ck.epoch as u64);
    w.u64(ck.net_seed);
    w.u64(ck.train_config_digest);
    w.u64(ck.optimizer.step);
    w.f32(ck.optimizer.learning_rate);
    w.f32(ck.optimizer.decay);
    w.f32(ck.optimizer.rho);
    w.f32(ck.optimizer.epsilon);
    w.buf.extend_from_slice(&ck.rng.seed);
    w.u64(ck.rng.stream);
    w.u128(ck.rng.word_pos);

    let config_json = serde_json::to_vec(&ck.network_config)
        .map_err(|e| Error::Format(format!("network config serialization: {e}")))?;
    w.u32(config_json.len() as u32);
    w.buf.extend_from_slice(&config_json);

    if ck.params.len() != ck.optimizer.square_avg.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    w.u32((ck.params.len() * 2) as u32);
    for (name, t) in &ck.params {
        w.tensor(name, t);
    }
    for ((name, _), v) in ck.params.iter().zip(&ck.optimizer.square_avg) {
        w.tensor(&format!("opt/v/{name}"), v);
    }

    let checksum = fnv1a64(&w.buf);
    w.u64(checksum);
    fs::write(path, &w.buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = self.take(numel * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::from_vec(&shape, data)?))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::Format("file too short to be a checkpoint".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic: not an RCK1 checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:#018x}, computed {actual:#018x}"
        )));
    }

    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (reader supports {CHECKPOINT_VERSION})"
        )));
    }
    let epoch = r.u64()? as usize;
    let net_seed = r.u64()?;
    let train_config_digest = r.u64()?;
    let opt_step = r.u64()?;
    let lr = r.f32()?;
    let decay = r.f32()?;
    let rho = r.f32()?;
    let opt_eps = r.f32()?;
    let mut seed = [0u8; 32];
    seed.copy_from_slice(r.take(32)?);
    let stream = r.u64()?;
    let word_pos = r.u128()?;

    let config_len = r.u32()? as usize;
    let network_config: NetworkConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| Error::Format(format!("network config JSON: {e}")))?;

    let count = r.u32()? as usize;
    if count % 2 != 0 {
        return Err(Error::Format("tensor table must pair params with optimizer state".into()));
    }
    let mut params = Vec::with_capacity(count / 2);
    for _ in 0..count / 2 {
        params.push(r.tensor()?);
    }
    let mut square_avg = Vec::with_capacity(count / 2);
    for (name, _) in &params {
        let (vname, v) = r.tensor()?;
        if vname != format!("opt/v/{name}") {
            return Err(Error::Format(format!(
                "expected optimizer tensor for {name:?}, found {vname:?}"
            )));
        }
        square_avg.push(v);
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after tensor table".into()));
    }

    Ok(Checkpoint {
        epoch,
        network_config,
        net_seed,
        params,
        optimizer: OptimizerState {
            learning_rate: lr,
            decay,
            rho,
            epsilon: opt_eps,
            step: opt_step,
            square_avg,
        },
        train_config_digest,
        rng: RngState { seed, stream, word_pos },
    })
}
