//! Binary checkpoint format.
//!
//! Layout: magic `AIO1ASR\0`, version `u32`, tensor count `u32`, then per
//! tensor a `u16` name length, the UTF-8 name, a `u8` rank, `u32` dims and
//! the values as little-endian `f32` in row-major order. Integers are
//! little-endian. Architecture settings travel as ordinary tensors under
//! `meta.` names.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::extlm::{ExtLmConfig, ExternalLm, EXTLM_CONFIG_TENSOR};
use crate::model::{AioModel, ModelConfig, CONFIG_TENSOR};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{Adam, AdamConfig};

pub const MAGIC: &[u8; 8] = b"AIO1ASR\0";
pub const VERSION: u32 = 1;

const ADAM_STEP: &str = "adam.step";
const EPOCH: &str = "train.epoch";

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut seen = HashSet::new();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?.to_le_bytes())?;
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.dims().len()).map_err(|_| Error::Format(format!("rank too large: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[rank])?;
        for &d in t.dims() {
            w.write_all(&u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large: {name}")))?.to_le_bytes())?;
        }
        let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated checkpoint reading {what}: {e}")))?;
    Ok(b)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 8] = take(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic: not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(&mut r, "version")?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut r, "tensor count")?);
    let mut out = Vec::with_capacity(count as usize);
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut r, "name length")?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        let rank = take::<1, _>(&mut r, "rank")?[0] as usize;
        let dims = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(take(&mut r, "dims")?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|e| Error::Format(format!("truncated values of {name}: {e}")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    read_tensors(bytes.as_slice())
}

fn store_from(tensors: &[(String, Tensor)]) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (n, t) in tensors {
        if !n.starts_with("meta.") && !n.starts_with("adam.") && !n.starts_with("train.") {
            s.insert(n.clone(), t.clone())?;
        }
    }
    Ok(s)
}

fn find<'a>(tensors: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
}

/// Saves the model and, for resuming, the optimizer state with the number
/// of completed epochs.
pub fn save_model(path: &Path, model: &AioModel, resume: Option<(&Adam, usize)>) -> Result<()> {
    let cfg = Tensor::vector(model.config().to_values());
    let mut list: Vec<(String, &Tensor)> = vec![(CONFIG_TENSOR.to_string(), &cfg)];
    list.extend(model.store().iter().map(|(n, t)| (n.to_string(), t)));
    let (step, epoch);
    if let Some((o, e)) = resume {
        step = Tensor::vector(vec![o.step as f64]);
        epoch = Tensor::vector(vec![e as f64]);
        list.push((ADAM_STEP.to_string(), &step));
        list.push((EPOCH.to_string(), &epoch));
        for (i, (n, _)) in model.store().iter().enumerate() {
            list.push((format!("adam.m.{n}"), &o.m[i]));
            list.push((format!("adam.v.{n}"), &o.v[i]));
        }
    }
    save_tensors(path, &list)
}

/// Loads a model, plus the optimizer state and completed epochs when the
/// checkpoint has them.
pub fn load_model(path: &Path, adam: AdamConfig) -> Result<(AioModel, Option<(Adam, usize)>)> {
    let tensors = load_tensors(path)?;
    let cfg = ModelConfig::from_values(find(&tensors, CONFIG_TENSOR)?.data())?;
    let model = AioModel::from_store(cfg, &store_from(&tensors)?)?;
    let resume = match tensors.iter().find(|(n, _)| n == ADAM_STEP) {
        None => None,
        Some((_, s)) => {
            let mut o = Adam::new(model.store(), adam);
            o.step = s.data()[0] as u64;
            for (i, (n, _)) in model.store().iter().enumerate() {
                o.m[i] = find(&tensors, &format!("adam.m.{n}"))?.clone();
                o.v[i] = find(&tensors, &format!("adam.v.{n}"))?.clone();
            }
            Some((o, find(&tensors, EPOCH)?.data()[0] as usize))
        }
    };
    Ok((model, resume))
}

pub fn save_extlm(path: &Path, lm: &ExternalLm) -> Result<()> {
    let cfg = Tensor::vector(lm.config().to_values());
    let mut list: Vec<(String, &Tensor)> = vec![(EXTLM_CONFIG_TENSOR.to_string(), &cfg)];
    list.extend(lm.store().iter().map(|(n, t)| (n.to_string(), t)));
    save_tensors(path, &list)
}

pub fn load_extlm(path: &Path) -> Result<ExternalLm> {
    let tensors = load_tensors(path)?;
    let cfg = ExtLmConfig::from_values(find(&tensors, EXTLM_CONFIG_TENSOR)?.data())?;
    ExternalLm::from_store(cfg, &store_from(&tensors)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> AioModel {
        AioModel::new(
            ModelConfig { enc_dim: 8, pred_embed: 4, pred_dim: 8, joiner_dim: 8, enc_heads: 2, joiner_heads: 2, ff_expansion: 2, ..ModelConfig::default() },
            5,
        )
        .unwrap()
    }

    #[test]
    fn model_round_trip() {
        let m = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_model(&p, &m, None).unwrap();
        let (back, opt) = load_model(&p, AdamConfig::default()).unwrap();
        assert!(opt.is_none());
        assert_eq!(back.store().len(), m.store().len());
        for ((na, a), (nb, b)) in m.store().iter().zip(back.store().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.dims(), b.dims());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-30));
            }
        }
        assert_eq!(back.config().enc_dim, 8);
    }

    #[test]
    fn optimizer_state_round_trip() {
        let m = small();
        let mut o = Adam::new(m.store(), AdamConfig::default());
        o.step = 17;
        o.m[0].data_mut()[0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_model(&p, &m, Some((&o, 4))).unwrap();
        let (_, back) = load_model(&p, AdamConfig::default()).unwrap();
        let (back, epoch) = back.unwrap();
        assert_eq!(epoch, 4);
        assert_eq!(back.step, 17);
        assert_eq!(back.m[0].data()[0], 0.25);
    }

    #[test]
    fn byte_layout() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("ab".into(), &t)]).unwrap();
        let mut expect = b"AIO1ASR\0".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u16.to_le_bytes());
        expect.extend(b"ab");
        expect.push(2);
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1f32.to_le_bytes());
        expect.extend((-2f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let t = Tensor::vector(vec![1.0]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x".into(), &t)]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensors(bad.as_slice()), Err(Error::Format(m)) if m.contains("magic")));
        let mut v2 = buf.clone();
        v2[8] = 2;
        assert!(read_tensors(v2.as_slice()).is_err());
        assert!(read_tensors(&buf[..buf.len() - 1]).is_err());
        assert!(write_tensors(Vec::new(), &[("x".into(), &t), ("x".into(), &t)]).is_err());
    }

    #[test]
    fn extlm_round_trip() {
        let lm = ExternalLm::new(ExtLmConfig::default(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.ckpt");
        save_extlm(&p, &lm).unwrap();
        let back = load_extlm(&p).unwrap();
        assert_eq!(back.config(), lm.config());
        assert_eq!(back.store().len(), lm.store().len());
    }
}
