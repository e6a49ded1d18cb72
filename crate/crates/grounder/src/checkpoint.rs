//! Binary checkpoint container: magic, format version, config JSON, named
//! f64 parameter arrays with shape headers, optimizer state, and a trailing
//! SHA-256 checksum over everything before it. Writes are atomic (temp file
//! then rename) so a crashed save never leaves a half-written checkpoint.

use crate::config::validate_config;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::trainer::AdamW;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"GRND";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("checkpoint does not match model: {0}")]
    ModelMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&(t.rows as u64).to_le_bytes());
    buf.extend_from_slice(&(t.cols as u64).to_le_bytes());
    for &v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::CorruptFile("unexpected end of file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes_field(&mut self) -> Result<&'a [u8], CheckpointError> {
        let len = self.u64()? as usize;
        self.take(len)
    }

    fn tensor(&mut self) -> Result<Tensor, CheckpointError> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Ok(Tensor::from_vec(rows, cols, data))
    }
}

pub fn save(path: &Path, model: &Model, opt: &AdamW) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let cfg_json = model.cfg.to_json().to_string();
    put_bytes(&mut buf, cfg_json.as_bytes());

    buf.extend_from_slice(&(model.store.len() as u64).to_le_bytes());
    for (_, p) in model.store.iter() {
        put_bytes(&mut buf, p.name.as_bytes());
        put_tensor(&mut buf, &p.value);
    }

    buf.extend_from_slice(&opt.step.to_le_bytes());
    buf.extend_from_slice(&(opt.m.len() as u64).to_le_bytes());
    for t in opt.m.iter().chain(opt.v.iter()) {
        put_tensor(&mut buf, t);
    }

    put_tensor(&mut buf, &model.head_center);

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuild the model and optimizer from a checkpoint. The model is
/// reconstructed from the embedded config, then every stored array replaces
/// the fresh one, matched by name with shapes verified.
pub fn load(path: &Path) -> Result<(Model, AdamW), CheckpointError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 + 4 + 32 {
        return Err(CheckpointError::CorruptFile("file too short".into()));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(CheckpointError::CorruptFile("checksum mismatch".into()));
    }

    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::CorruptFile("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, supported: VERSION });
    }

    let cfg_bytes = r.bytes_field()?;
    let raw: serde_json::Value = serde_json::from_slice(cfg_bytes)
        .map_err(|e| CheckpointError::CorruptFile(format!("config json: {e}")))?;
    let cfg = validate_config(&raw)
        .map_err(|e| CheckpointError::CorruptFile(format!("config: {e}")))?;
    let init_seed = cfg.seed;
    let mut model = Model::new(cfg, init_seed);

    let count = r.u64()? as usize;
    if count != model.store.len() {
        return Err(CheckpointError::ModelMismatch(format!(
            "expected {} parameters, checkpoint has {count}",
            model.store.len()
        )));
    }
    for id in 0..count {
        let name = String::from_utf8(r.bytes_field()?.to_vec())
            .map_err(|_| CheckpointError::CorruptFile("non-utf8 name".into()))?;
        let value = r.tensor()?;
        let current = model.store.get(id);
        if current.name != name {
            return Err(CheckpointError::ModelMismatch(format!(
                "parameter {id} is named {:?}, checkpoint has {name:?}",
                current.name
            )));
        }
        if (current.value.rows, current.value.cols) != (value.rows, value.cols) {
            return Err(CheckpointError::ModelMismatch(format!(
                "shape mismatch for {name}: model {}x{}, checkpoint {}x{}",
                current.value.rows, current.value.cols, value.rows, value.cols
            )));
        }
        *model.store.value_mut(id) = value;
    }

    let mut opt = AdamW::new(&model.store);
    opt.step = r.u64()?;
    let buffers = r.u64()? as usize;
    if buffers != opt.m.len() {
        return Err(CheckpointError::ModelMismatch(format!(
            "expected {} moment buffers, checkpoint has {buffers}",
            opt.m.len()
        )));
    }
    for slot in 0..2 * buffers {
        let t = r.tensor()?;
        let dest = if slot < buffers { &mut opt.m[slot] } else { &mut opt.v[slot - buffers] };
        if (t.rows, t.cols) != (dest.rows, dest.cols) {
            return Err(CheckpointError::ModelMismatch("moment shape mismatch".into()));
        }
        *dest = t;
    }
    let center = r.tensor()?;
    if (center.rows, center.cols) != (model.head_center.rows, model.head_center.cols) {
        return Err(CheckpointError::ModelMismatch("head-center shape mismatch".into()));
    }
    model.head_center = center;

    if r.pos != body.len() {
        return Err(CheckpointError::CorruptFile("trailing bytes".into()));
    }
    Ok((model, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{generate_sample, GenConfig, Vocab};
    use crate::trainer::train_step;

    fn trained_pair() -> (Model, AdamW) {
        let cfg = ModelConfig::toy();
        let gen = GenConfig::default();
        let vocab = Vocab::standard();
        let batch: Vec<_> =
            (0..2).map(|s| generate_sample(s, &gen, &vocab, cfg.max_text_len).unwrap()).collect();
        let mut model = Model::new(cfg, 42);
        let mut opt = AdamW::new(&model.store);
        for _ in 0..3 {
            train_step(&mut model, &mut opt, &batch).unwrap();
        }
        (model, opt)
    }

    #[test]
    fn roundtrip_restores_exact_state() {
        let (model, opt) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, &opt).unwrap();
        let (loaded, loaded_opt) = load(&path).unwrap();

        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded_opt.step, opt.step);
        for id in 0..model.store.len() {
            assert_eq!(model.store.value(id).data, loaded.store.value(id).data, "param {id}");
            assert_eq!(opt.m[id].data, loaded_opt.m[id].data);
            assert_eq!(opt.v[id].data, loaded_opt.v[id].data);
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let cfg = ModelConfig::toy();
        let gen = GenConfig::default();
        let vocab = Vocab::standard();
        let batch: Vec<_> =
            (0..2).map(|s| generate_sample(s, &gen, &vocab, cfg.max_text_len).unwrap()).collect();

        let mut straight = Model::new(cfg.clone(), cfg.seed);
        let mut straight_opt = AdamW::new(&straight.store);
        for _ in 0..4 {
            train_step(&mut straight, &mut straight_opt, &batch).unwrap();
        }

        let mut half = Model::new(cfg.clone(), cfg.seed);
        let mut half_opt = AdamW::new(&half.store);
        for _ in 0..2 {
            train_step(&mut half, &mut half_opt, &batch).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        save(&path, &half, &half_opt).unwrap();
        let (mut resumed, mut resumed_opt) = load(&path).unwrap();
        for _ in 0..2 {
            train_step(&mut resumed, &mut resumed_opt, &batch).unwrap();
        }

        for id in 0..straight.store.len() {
            assert_eq!(
                straight.store.value(id).data,
                resumed.store.value(id).data,
                "param {id} diverged after resume"
            );
        }
    }

    #[test]
    fn flipped_byte_detected() {
        let (model, opt) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, &opt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::CorruptFile(_))));
    }

    #[test]
    fn truncated_file_detected() {
        let (model, opt) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, &opt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::CorruptFile(_))));
    }

    #[test]
    fn future_version_rejected() {
        let (model, opt) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, &opt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        // re-seal so only the version differs
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load(&path),
            Err(CheckpointError::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn no_temp_file_left_behind() {
        let (model, opt) = trained_pair();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, &opt).unwrap();
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["model.ckpt"]);
    }
}
