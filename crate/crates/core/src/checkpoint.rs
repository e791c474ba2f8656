//! Checkpoints: a small versioned binary container holding the run phase,
//! root seed, completed-epoch count, the full config text, and every named
//! parameter tensor in f64. Saves are atomic (temp file + rename), and loads
//! reject version or geometry mismatches up front rather than letting a
//! half-compatible model limp along.
//!
//! Because all randomness derives from (seed, purpose, epoch, step) counters,
//! seed + completed_epochs is the complete optimizer-schedule state: resuming
//! replays the exact stream a longer run would have used.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{named_tensors, Params};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HIMTMCKP";
const VERSION: u32 = 1;

/// An in-memory checkpoint, ready to save or just loaded.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Which stage produced it: "pretrain" or "finetune".
    pub phase: String,
    pub seed: u64,
    pub completed_epochs: u64,
    /// Canonical config text of the run that wrote it.
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    /// Capture a model's learnable parameters and buffers.
    pub fn capture(
        phase: &str,
        seed: u64,
        completed_epochs: u64,
        config: &RunConfig,
        model: &dyn Params<f64>,
    ) -> Checkpoint {
        Checkpoint {
            phase: phase.to_string(),
            seed,
            completed_epochs,
            config_text: config.to_text(),
            tensors: named_tensors(model, true),
        }
    }

    pub fn tensors_map(&self) -> HashMap<String, Tensor<f64>> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    fn serialize(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut buf, &self.phase);
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.completed_epochs.to_le_bytes());
        write_str(&mut buf, &self.config_text);
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            write_str(&mut buf, name);
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    /// Write atomically: serialize to `<path>.tmp`, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| {
                    Error::io(format!("cannot create {}", parent.display()), e)
                })?;
            }
        }
        let tmp = path.with_extension("tmp");
        let bytes = self.serialize();
        let mut f = fs::File::create(&tmp)
            .map_err(|e| Error::io(format!("cannot create {}", tmp.display()), e))?;
        f.write_all(&bytes)
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(format!("cannot write {}", tmp.display()), e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| {
            Error::io(
                format!("cannot rename {} to {}", tmp.display(), path.display()),
                e,
            )
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(format!("cannot read {}", path.display()), e))?;
        Self::deserialize(&bytes)
            .map_err(|e| Error::parse(format!("{}: {e}", path.display())))
    }

    fn deserialize(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::parse("not a checkpoint file (bad magic)"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::parse(format!(
                "checkpoint version {version} is not supported (this build reads \
                 version {VERSION})"
            )));
        }
        let phase = cur.string()?;
        let seed = cur.u64()?;
        let completed_epochs = cur.u64()?;
        let config_text = cur.string()?;
        let n_tensors = cur.u64()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = cur.string()?;
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if cur.pos != bytes.len() {
            return Err(Error::parse(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - cur.pos
            )));
        }
        Ok(Checkpoint {
            phase,
            seed,
            completed_epochs,
            config_text,
            tensors,
        })
    }

    /// Reject loading into a run whose architecture no longer matches the one
    /// that wrote the checkpoint. Training hyperparameters may differ freely;
    /// only keys that change tensor shapes or the token grid are pinned.
    pub fn check_geometry(&self, current: &RunConfig) -> Result<()> {
        let saved = RunConfig::parse(&self.config_text)
            .map_err(|e| Error::parse(format!("checkpoint embeds an unreadable config: {e}")))?;
        let pairs: [(&str, String, String); 8] = [
            ("patch.p", saved.patch_p.to_string(), current.patch_p.to_string()),
            (
                "patch.stride",
                saved.patch_stride.to_string(),
                current.patch_stride.to_string(),
            ),
            ("patch.sp", saved.patch_sp.to_string(), current.patch_sp.to_string()),
            ("encoder.d", saved.enc_d.to_string(), current.enc_d.to_string()),
            (
                "encoder.heads",
                saved.enc_heads.to_string(),
                current.enc_heads.to_string(),
            ),
            (
                "encoder.layers",
                format!("{:?}", saved.enc_layers),
                format!("{:?}", current.enc_layers),
            ),
            (
                "encoder.d_ff",
                saved.d_ff().to_string(),
                current.d_ff().to_string(),
            ),
            (
                "data.lookback",
                saved.lookback.to_string(),
                current.lookback.to_string(),
            ),
        ];
        for (key, was, now) in pairs {
            if was != now {
                return Err(Error::config(format!(
                    "checkpoint geometry mismatch on {key}: checkpoint has {was}, \
                     current config has {now}"
                )));
            }
        }
        Ok(())
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::parse("checkpoint string is not valid UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            phase: "pretrain".to_string(),
            seed: 42,
            completed_epochs: 3,
            config_text: RunConfig::default().to_text(),
            tensors: vec![
                (
                    "embed.w".to_string(),
                    Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-9, -7.0]).unwrap(),
                ),
                (
                    "enc.b".to_string(),
                    Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
                ),
            ],
        }
    }

    #[test]
    fn round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.phase, ck.phase);
        assert_eq!(back.seed, ck.seed);
        assert_eq!(back.completed_epochs, ck.completed_epochs);
        assert_eq!(back.config_text, ck.config_text);
        assert_eq!(back.tensors.len(), ck.tensors.len());
        for ((na, ta), (nb, tb)) in ck.tensors.iter().zip(back.tensors.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            // Bit-exact, not approximate.
            for (x, y) in ta.data().iter().zip(tb.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // The temp file must not be left behind.
        assert!(!dir.path().join("ckpt.tmp").exists());
    }

    #[test]
    fn save_creates_missing_directories() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/ckpt.bin");
        sample().save(&path).unwrap();
        assert!(path.exists());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        fs::write(&path, b"NOTACKPT-and-more").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn rejects_future_version() {
        let mut bytes = sample().serialize();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        let err = Checkpoint::deserialize(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }

    #[test]
    fn rejects_truncation() {
        let bytes = sample().serialize();
        let err = Checkpoint::deserialize(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn geometry_guard_names_the_offending_key() {
        let ck = sample();
        let other = RunConfig {
            enc_d: 64,
            ..RunConfig::default()
        };
        let err = ck.check_geometry(&other).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("encoder.d"), "{msg}");
        assert!(msg.contains("128") && msg.contains("64"), "{msg}");
        // Matching geometry passes even if training keys differ.
        let same_geom = RunConfig {
            pre_lr: 5e-3,
            ft_epochs: 99,
            ..RunConfig::default()
        };
        ck.check_geometry(&same_geom).unwrap();
    }

    #[test]
    fn d_ff_guard_compares_resolved_widths() {
        // 0 means "2*d", so an explicit 256 against default d=128 is the same
        // geometry and must pass.
        let ck = sample();
        let explicit = RunConfig::parse("encoder.d_ff = 256\n").unwrap();
        ck.check_geometry(&explicit).unwrap();
        let different = RunConfig::parse("encoder.d_ff = 300\n").unwrap();
        assert!(ck.check_geometry(&different).is_err());
    }
}
