//! Binary checkpoint: a JSON header followed by raw little-endian f64 payloads.
//!
//! Layout: `b"DDATCKPT"`, u32 version, u64 header length, JSON header,
//! u64 parameter count, parameters, u8 Adam flag, then (if set) u64 step,
//! four f64 hyper-parameters, first moments, second moments.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, GruNetwork, NetworkConfig, Params};
use crate::error::{DdatError, Result};

const MAGIC: &[u8; 8] = b"DDATCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub parameters: Vec<f64>,
    pub adam: Option<AdamState>,
    /// Free-form provenance (config hash, seed, stage, epoch).
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_network(net: &GruNetwork, adam: Option<&AdamState>) -> Self {
        Checkpoint {
            config: net.config,
            parameters: net.params.flatten(),
            adam: adam.cloned(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn network(&self) -> Result<GruNetwork> {
        self.config.validate()?;
        let mut params = Params::zeros(&self.config);
        params.assign_flat(&self.parameters)?;
        Ok(GruNetwork {
            config: self.config,
            params,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            config: self.config,
            metadata: self.metadata.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(64 + header.len() + 8 * self.parameters.len() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        put_f64s(&mut out, &self.parameters);
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                for v in [a.learning_rate, a.beta1, a.beta2, a.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                put_f64s(&mut out, &a.m);
                put_f64s(&mut out, &a.v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(take(&mut r)?) as usize;
        if header_len > r.len() {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&r[..header_len]).map_err(|e| bad(&e.to_string()))?;
        r = &r[header_len..];
        let parameters = get_f64s(&mut r)?;
        let mut flag = [0u8; 1];
        read_exact(&mut r, &mut flag)?;
        let adam = match flag[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(take(&mut r)?);
                let mut hp = [0.0; 4];
                for v in &mut hp {
                    *v = f64::from_le_bytes(take(&mut r)?);
                }
                let m = get_f64s(&mut r)?;
                let v = get_f64s(&mut r)?;
                Some(AdamState {
                    step,
                    learning_rate: hp[0],
                    beta1: hp[1],
                    beta2: hp[2],
                    eps: hp[3],
                    m,
                    v,
                })
            }
            _ => return Err(bad("corrupt optimizer flag")),
        };
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            config: header.config,
            parameters,
            adam,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| DdatError::io(parent, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| DdatError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| DdatError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| DdatError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| DdatError::format(path, e.to_string()))
    }
}

fn bad(msg: &str) -> DdatError {
    DdatError::invalid(format!("checkpoint: {msg}"))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| bad("truncated"))
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_f64s(r: &mut &[u8]) -> Result<Vec<f64>> {
    let n = u64::from_le_bytes(take(r)?) as usize;
    if n.checked_mul(8).is_none_or(|b| b > r.len()) {
        return Err(bad("truncated tensor"));
    }
    (0..n).map(|_| Ok(f64::from_le_bytes(take(r)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{adam_step, init_network, AuxHead};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = NetworkConfig::new(2, 5, 3)
            .with_aux(AuxHead::Reconstruction { width: 3 })
            .with_seed(77);
        let mut net = init_network(&cfg).unwrap();
        let mut adam = AdamState::for_network(&net, 0.001);
        let mut g = net.params.clone();
        g.scale(0.37);
        adam_step(&mut net, &g, &mut adam).unwrap();
        let mut ck = Checkpoint::from_network(&net, Some(&adam));
        ck.metadata.insert("seed".into(), "77".into());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert_eq!(back.network().unwrap(), net);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let net = init_network(&NetworkConfig::new(1, 2, 2)).unwrap();
        let bytes = Checkpoint::from_network(&net, None).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPTxxxx").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
