use std::collections::HashMap;
use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use crate::nn::codec::{self, PayloadDtype};
use crate::nn::{Architecture, Parameters};
use crate::{Error, Result};

/// A published parameter snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_id: u32,
    pub step: u64,
    pub params: Parameters,
    pub dtype: PayloadDtype,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        codec::encode(&self.params, self.step, self.model_id, self.dtype)
    }

    pub fn decode(bytes: &[u8], arch: &Arc<Architecture>) -> Result<Self> {
        let (h, params) = codec::decode(bytes, arch)?;
        Ok(Self { model_id: h.model_id, step: h.step, params, dtype: h.dtype })
    }

    /// Logical payload size.
    pub fn payload_bytes(&self) -> u64 {
        (self.params.len() * self.dtype.bytes_per_value()) as u64
    }
}

/// Latest-checkpoint-per-model storage shared by worker groups.
///
/// `load_latest` returns the most recent complete publish for a model, or
/// `None` before the first publish. It never returns a partially written
/// checkpoint. Publishes for one model must carry strictly increasing steps.
pub trait CheckpointStore: Send + Sync {
    fn publish(&self, checkpoint: &Checkpoint) -> Result<()>;
    fn load_latest(&self, model_id: u32) -> Result<Option<Checkpoint>>;
    /// Encoded bytes written so far.
    fn bytes_written(&self) -> u64;
    /// Encoded bytes read so far.
    fn bytes_read(&self) -> u64;
}

fn check_arch(arch: &Architecture, ckpt: &Checkpoint) -> Result<()> {
    let expected = arch.fingerprint().0;
    let found = ckpt.params.fingerprint().0;
    if expected != found {
        return Err(Error::FingerprintMismatch { expected, found });
    }
    if !ckpt.params.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "refusing to publish non-finite parameters for model {}",
            ckpt.model_id
        )));
    }
    Ok(())
}

/// Latest step and encoded bytes for one model.
type Slot = (u64, Arc<Vec<u8>>);

/// In-process store holding encoded checkpoints.
#[derive(Debug)]
pub struct MemoryStore {
    arch: Arc<Architecture>,
    slots: RwLock<HashMap<u32, Slot>>,
    written: AtomicU64,
    read: AtomicU64,
}

impl MemoryStore {
    pub fn new(arch: Arc<Architecture>) -> Self {
        Self { arch, slots: RwLock::default(), written: AtomicU64::new(0), read: AtomicU64::new(0) }
    }
}

impl CheckpointStore for MemoryStore {
    fn publish(&self, checkpoint: &Checkpoint) -> Result<()> {
        check_arch(&self.arch, checkpoint)?;
        let bytes = Arc::new(checkpoint.encode());
        let len = bytes.len() as u64;
        let mut slots = self.slots.write().expect("store lock poisoned");
        if let Some(&(latest, _)) = slots.get(&checkpoint.model_id) {
            if checkpoint.step <= latest {
                return Err(Error::StalePublish {
                    model_id: checkpoint.model_id,
                    step: checkpoint.step,
                    latest,
                });
            }
        }
        slots.insert(checkpoint.model_id, (checkpoint.step, bytes));
        self.written.fetch_add(len, Ordering::Relaxed);
        Ok(())
    }

    fn load_latest(&self, model_id: u32) -> Result<Option<Checkpoint>> {
        let bytes = {
            let slots = self.slots.read().expect("store lock poisoned");
            match slots.get(&model_id) {
                Some((_, b)) => Arc::clone(b),
                None => return Ok(None),
            }
        };
        self.read.fetch_add(bytes.len() as u64, Ordering::Relaxed);
        Checkpoint::decode(&bytes, &self.arch).map(Some)
    }

    fn bytes_written(&self) -> u64 {
        self.written.load(Ordering::Relaxed)
    }

    fn bytes_read(&self) -> u64 {
        self.read.load(Ordering::Relaxed)
    }
}

/// Directory of `ckpt_<model_id>.bin` files. Each publish writes a temp file
/// in the same directory and renames it over the target, so readers see
/// either the old or the new file.
///
/// The step-ordering check covers publishes made through this instance.
#[derive(Debug)]
pub struct DirStore {
    arch: Arc<Architecture>,
    dir: PathBuf,
    latest: Mutex<HashMap<u32, u64>>,
    tmp_counter: AtomicU64,
    written: AtomicU64,
    read: AtomicU64,
}

impl DirStore {
    /// Opens (creating if needed) a checkpoint directory.
    pub fn new(dir: impl AsRef<Path>, arch: Arc<Architecture>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            arch,
            dir,
            latest: Mutex::default(),
            tmp_counter: AtomicU64::new(0),
            written: AtomicU64::new(0),
            read: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, model_id: u32) -> PathBuf {
        self.dir.join(format!("ckpt_{model_id}.bin"))
    }
}

impl CheckpointStore for DirStore {
    fn publish(&self, checkpoint: &Checkpoint) -> Result<()> {
        check_arch(&self.arch, checkpoint)?;
        let mut latest = self.latest.lock().expect("store lock poisoned");
        if let Some(&prev) = latest.get(&checkpoint.model_id) {
            if checkpoint.step <= prev {
                return Err(Error::StalePublish {
                    model_id: checkpoint.model_id,
                    step: checkpoint.step,
                    latest: prev,
                });
            }
        }
        let bytes = checkpoint.encode();
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join(format!(
            ".ckpt_{}.bin.tmp-{}-{n}",
            checkpoint.model_id,
            std::process::id()
        ));
        let result = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.flush()?;
            drop(f);
            fs::rename(&tmp, self.path_for(checkpoint.model_id))
        })();
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        latest.insert(checkpoint.model_id, checkpoint.step);
        self.written.fetch_add(bytes.len() as u64, Ordering::Relaxed);
        Ok(())
    }

    fn load_latest(&self, model_id: u32) -> Result<Option<Checkpoint>> {
        let bytes = match fs::read(self.path_for(model_id)) {
            Ok(b) => b,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        self.read.fetch_add(bytes.len() as u64, Ordering::Relaxed);
        Checkpoint::decode(&bytes, &self.arch).map(Some)
    }

    fn bytes_written(&self) -> u64 {
        self.written.load(Ordering::Relaxed)
    }

    fn bytes_read(&self) -> u64 {
        self.read.load(Ordering::Relaxed)
    }
}
