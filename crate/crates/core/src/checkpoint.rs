//! Binary checkpoint format for trained agents.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VBCK"
//! 4       4     u32 format version (1)
//! 8       16    config hash, 16 ASCII hex digits
//! 24      8     u64 seed
//! 32      1     policy kind (0 vision, 1 blind, 2 noisy_perceptive)
//! 33      1     flags (bit 0: actor consumes the velocity estimate)
//! 34      2     u16 network count
//! then per network:
//!         2     u16 name length, followed by the UTF-8 name
//!         2     u16 count of layer sizes (layers + 1), followed by that many u32 sizes
//!         1     u8 1 if a log-std vector follows the parameters, else 0
//!         4     u32 parameter count P
//!         4P    f32 parameters, layer by layer: weights (out x in, row-major), then biases
//!         4D    f32 log std, D = output size (only if flagged)
//! ```
//!
//! Parameters are held as f64 in memory and rounded to f32 on save, so a loaded
//! checkpoint saves back to identical bytes.

use std::path::Path;

use crate::composer::ReturnEstimator;
use crate::nn::{GaussianPolicy, Mlp};
use crate::rl::{Agent, PolicyKind};
use crate::Error;

pub const MAGIC: &[u8; 4] = b"VBCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub config_hash: String,
    pub seed: u64,
    pub kind: PolicyKind,
}

fn kind_tag(kind: PolicyKind) -> u8 {
    match kind {
        PolicyKind::Vision => 0,
        PolicyKind::Blind => 1,
        PolicyKind::NoisyPerceptive => 2,
    }
}

struct NetBlock<'a> {
    name: &'a str,
    net: &'a Mlp,
    log_std: Option<&'a [f64]>,
}

pub fn encode(agent: &Agent, config_hash: &str, seed: u64) -> Result<Vec<u8>, Error> {
    if config_hash.len() != 16 || !config_hash.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(Error::Checkpoint(format!("config hash must be 16 hex digits, got {config_hash:?}")));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(config_hash.as_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    out.push(kind_tag(agent.kind));
    out.push(agent.use_velocity_estimate as u8);
    let nets = [
        NetBlock { name: "policy", net: &agent.policy.net, log_std: Some(&agent.policy.log_std) },
        NetBlock { name: "critic", net: &agent.critic, log_std: None },
        NetBlock { name: "velocity", net: &agent.velocity, log_std: None },
        NetBlock { name: "estimator", net: &agent.estimator.net, log_std: None },
    ];
    out.extend_from_slice(&(nets.len() as u16).to_le_bytes());
    for b in nets {
        out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.net.sizes().len() as u16).to_le_bytes());
        for s in b.net.sizes() {
            out.extend_from_slice(&(*s as u32).to_le_bytes());
        }
        out.push(b.log_std.is_some() as u8);
        out.extend_from_slice(&(b.net.params().len() as u32).to_le_bytes());
        for p in b.net.params() {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        if let Some(ls) = b.log_std {
            for p in ls {
                out.extend_from_slice(&(*p as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, Error> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, Error> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, Error> {
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Agent, Header), Error> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_hash =
        String::from_utf8(r.take(16)?.to_vec()).map_err(|_| Error::Checkpoint("config hash is not ASCII".into()))?;
    let seed = r.u64()?;
    let kind = match r.u8()? {
        0 => PolicyKind::Vision,
        1 => PolicyKind::Blind,
        2 => PolicyKind::NoisyPerceptive,
        t => return Err(Error::Checkpoint(format!("unknown policy kind tag {t}"))),
    };
    let flags = r.u8()?;
    let count = r.u16()? as usize;
    let (mut policy, mut critic, mut velocity, mut estimator) = (None, None, None, None);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("network name is not UTF-8".into()))?;
        let n_sizes = r.u16()? as usize;
        let sizes = (0..n_sizes).map(|_| r.u32().map(|s| s as usize)).collect::<Result<Vec<_>, _>>()?;
        let has_log_std = r.u8()? != 0;
        let n_params = r.u32()? as usize;
        let params = r.f32s(n_params)?;
        let net = Mlp::from_params(&sizes, params).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        let log_std = if has_log_std { Some(r.f32s(net.output_dim())?) } else { None };
        match name.as_str() {
            "policy" => {
                let log_std = log_std.ok_or_else(|| Error::Checkpoint("policy has no log std".into()))?;
                policy = Some(GaussianPolicy { net, log_std });
            }
            "critic" => critic = Some(net),
            "velocity" => velocity = Some(net),
            "estimator" => estimator = Some(ReturnEstimator::from_net(net, 1e-3)?),
            other => return Err(Error::Checkpoint(format!("unexpected network {other:?}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let missing = |n: &str| Error::Checkpoint(format!("missing network {n:?}"));
    let agent = Agent {
        kind,
        policy: policy.ok_or_else(|| missing("policy"))?,
        critic: critic.ok_or_else(|| missing("critic"))?,
        velocity: velocity.ok_or_else(|| missing("velocity"))?,
        estimator: estimator.ok_or_else(|| missing("estimator"))?,
        use_velocity_estimate: flags & 1 != 0,
    };
    Ok((agent, Header { config_hash, seed, kind }))
}

pub fn save(agent: &Agent, path: &Path, config_hash: &str, seed: u64) -> Result<Vec<u8>, Error> {
    let bytes = encode(agent, config_hash, seed)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn load(path: &Path) -> Result<(Agent, Header), Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}
