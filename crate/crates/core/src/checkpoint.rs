//! Binary checkpoint format: magic + version header, profile and stage
//! strings, seed, loss history, and named f32 tensors (little-endian,
//! row-major). Writes go through a temp file and an atomic rename.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::distill::LossRecord;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"MVCK";
const VERSION: u32 = 1;

/// Everything needed to resume or serve a trained stage.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Encoder profile name ("tiny" or "paper").
    pub profile: String,
    /// Pipeline stage that produced this file: pretrain, finetune, videocls.
    pub stage: String,
    pub seed: u64,
    pub history: Vec<LossRecord>,
    pub params: ParamStore,
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(bad(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > self.bytes.len() {
            return Err(bad(self.path, "corrupt string length"));
        }
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| bad(self.path, "non-utf8 string field"))
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.profile);
        put_str(&mut out, &self.stage);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.history.len() as u32).to_le_bytes());
        for r in &self.history {
            out.extend_from_slice(&(r.epoch as u32).to_le_bytes());
            out.extend_from_slice(&(r.step as u32).to_le_bytes());
            out.extend_from_slice(&r.loss.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        atomic_write(path, &out)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(bad(path, "bad magic; not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(path, format!("unsupported version {version}, expected {VERSION}")));
        }
        let profile = r.string()?;
        let stage = r.string()?;
        let seed = r.u64()?;
        let history_len = r.u32()? as usize;
        let mut history = Vec::with_capacity(history_len.min(1 << 20));
        for _ in 0..history_len {
            history.push(LossRecord {
                epoch: r.u32()? as usize,
                step: r.u32()? as usize,
                loss: r.f32()?,
            });
        }
        let param_count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..param_count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(bad(path, format!("tensor {name} has {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(bad(path, "trailing bytes after checkpoint payload"));
        }
        Ok(Checkpoint { profile, stage, seed, history, params })
    }
}

/// Write bytes to a sibling temp file, then rename into place so a
/// crash never leaves a half-written checkpoint at the target path.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp: PathBuf = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".tmp");
        dir.join(name)
    };
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn sample() -> Checkpoint {
        let mut rng = SeedStream::new(0).stream("ckpt");
        let mut params = ParamStore::new();
        params.insert("a.weight", Tensor::trunc_normal(&[3, 5], 1.0, &mut rng));
        params.insert("a.bias", Tensor::uniform(&[5], -2.0, 2.0, &mut rng));
        params.insert("scalar", Tensor::scalar(0.125));
        Checkpoint {
            profile: "tiny".into(),
            stage: "pretrain".into(),
            seed: 42,
            history: vec![
                LossRecord { epoch: 0, step: 0, loss: 5.545 },
                LossRecord { epoch: 1, step: 3, loss: 4.2 },
            ],
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.profile, "tiny");
        assert_eq!(back.stage, "pretrain");
        assert_eq!(back.seed, 42);
        assert_eq!(back.history.len(), 2);
        assert_eq!(back.history[1].step, 3);
        assert_eq!(back.history[1].loss.to_bits(), 4.2f32.to_bits());
        assert_eq!(back.params.len(), ck.params.len());
        for (name, t) in ck.params.iter() {
            let bt = back.params.get(name).unwrap();
            assert_eq!(bt.shape(), t.shape());
            for (a, b) in t.data().iter().zip(bt.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // insertion order preserved
        let names: Vec<&str> = back.params.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["a.weight", "a.bias", "scalar"]);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample().save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut corrupt = good.clone();
        corrupt[0] = b'X';
        std::fs::write(&path, &corrupt).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let mut wrong_version = good.clone();
        wrong_version[4] = 99;
        std::fs::write(&path, &wrong_version).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        for cut in [3, 10, good.len() / 2, good.len() - 1] {
            std::fs::write(&path, &good[..cut]).unwrap();
            assert!(Checkpoint::load(&path).is_err(), "accepted truncation at {cut}");
        }

        let mut trailing = good.clone();
        trailing.push(0);
        std::fs::write(&path, &trailing).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn save_overwrites_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ck = sample();
        ck.save(&path).unwrap();
        ck.stage = "finetune".into();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().stage, "finetune");
        assert!(!dir.path().join("model.ckpt.tmp").exists());
    }

    #[test]
    fn empty_history_and_params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ckpt");
        let ck = Checkpoint {
            profile: "paper".into(),
            stage: "videocls".into(),
            seed: 0,
            history: vec![],
            params: ParamStore::new(),
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert!(back.history.is_empty());
        assert_eq!(back.params.len(), 0);
    }
}
