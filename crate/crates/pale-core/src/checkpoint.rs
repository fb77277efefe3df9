//! Bit-exact binary serialization of model weights.
//!
//! Layout: magic `PALE`, format version (u32 LE), tensor count (u32 LE),
//! then per tensor: name length (u16 LE) + UTF-8 name, dtype code (u8,
//! 0 = f32), rank (u8), extents (u64 LE each), raw little-endian IEEE-754
//! payload.
//!
//! The first record is a reserved `__config__` vector carrying the
//! architecture (stage table, head counts, attention mode, class count) so
//! a model can be rebuilt from the file alone. It is metadata, not a
//! weight: parameter accounting excludes it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::attention::AttentionMode;
use crate::backbone::{Model, StageConfig, VariantConfig};
use crate::tensor::Shape;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PALE";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const CONFIG_RECORD: &str = "__config__";

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub extents: Vec<u64>,
    pub values: Vec<f32>,
}

/// Decoded checkpoint: an ordered list of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for rec in &self.records {
            let name = rec.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(DTYPE_F32);
            out.push(rec.extents.len() as u8);
            for &e in &rec.extents {
                out.extend_from_slice(&e.to_le_bytes());
            }
            for &v in &rec.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (expected {VERSION})"
            )));
        }
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = core::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = cur.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("unknown dtype code {dtype} for '{name}'")));
            }
            let rank = cur.take(1)?[0] as usize;
            let mut extents = Vec::with_capacity(rank);
            let mut len = 1usize;
            for _ in 0..rank {
                let e = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
                len = len
                    .checked_mul(e as usize)
                    .ok_or_else(|| Error::Format(format!("extent overflow in '{name}'")))?;
                extents.push(e);
            }
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()));
            }
            records.push(Record { name, extents, values });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { version, records })
    }

    /// Sum of stored weight values, excluding the config record.
    pub fn weight_value_count(&self) -> u64 {
        self.records
            .iter()
            .filter(|r| r.name != CONFIG_RECORD)
            .map(|r| r.values.len() as u64)
            .sum()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("file truncated".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }
}

fn mode_code(mode: AttentionMode) -> f32 {
    AttentionMode::ALL.iter().position(|m| *m == mode).unwrap() as f32
}

fn mode_from_code(code: f32) -> Result<AttentionMode> {
    AttentionMode::ALL
        .get(code as usize)
        .copied()
        .ok_or_else(|| Error::Format(format!("unknown attention mode code {code}")))
}

fn config_record(config: &VariantConfig) -> Record {
    let mut values = alloc::vec![
        config.num_classes as f32,
        config.in_channels as f32,
        mode_code(config.mode),
        if config.interlaced { 1.0 } else { 0.0 },
        config.stages.len() as f32,
    ];
    for s in &config.stages {
        values.extend_from_slice(&[
            s.merge_stride as f32,
            s.channels as f32,
            s.pale_size as f32,
            s.heads as f32,
            s.mlp_ratio as f32,
            s.depth as f32,
        ]);
    }
    Record {
        name: CONFIG_RECORD.to_string(),
        extents: alloc::vec![values.len() as u64],
        values,
    }
}

fn config_from_record(rec: &Record) -> Result<VariantConfig> {
    let v = &rec.values;
    if v.len() < 5 {
        return Err(Error::Format("config record too short".into()));
    }
    let stage_count = v[4] as usize;
    if v.len() != 5 + stage_count * 6 {
        return Err(Error::Format("config record length mismatch".into()));
    }
    let stages = (0..stage_count)
        .map(|i| {
            let base = 5 + i * 6;
            StageConfig {
                merge_stride: v[base] as usize,
                channels: v[base + 1] as usize,
                pale_size: v[base + 2] as usize,
                heads: v[base + 3] as usize,
                mlp_ratio: v[base + 4] as usize,
                depth: v[base + 5] as usize,
            }
        })
        .collect();
    Ok(VariantConfig {
        stages,
        num_classes: v[0] as usize,
        in_channels: v[1] as usize,
        mode: mode_from_code(v[2])?,
        interlaced: v[3] != 0.0,
    })
}

/// Vectors `(1, 1, 1, c)` serialize as rank 1; everything else as rank 4.
fn extents_of(shape: Shape) -> Vec<u64> {
    if shape.b == 1 && shape.h == 1 && shape.w == 1 {
        alloc::vec![shape.c as u64]
    } else {
        alloc::vec![shape.b as u64, shape.h as u64, shape.w as u64, shape.c as u64]
    }
}

fn shape_of(extents: &[u64], name: &str) -> Result<Shape> {
    match extents {
        [c] => Ok(Shape::new(1, 1, 1, *c as usize)),
        [b, h, w, c] => Ok(Shape::new(*b as usize, *h as usize, *w as usize, *c as usize)),
        other => Err(Error::Format(format!("'{name}': unsupported rank {}", other.len()))),
    }
}

/// Serialize a model (f32 weights) into the checkpoint container.
pub fn checkpoint_from_model(model: &Model<f32>) -> Checkpoint {
    let mut records = alloc::vec![config_record(&model.config)];
    model.params.visit(&mut |name, tensor| {
        records.push(Record {
            name,
            extents: extents_of(tensor.shape()),
            values: tensor.data().to_vec(),
        });
    });
    Checkpoint { version: VERSION, records }
}

/// Rebuild the model a checkpoint describes.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model<f32>> {
    let first = ckpt
        .records
        .first()
        .ok_or_else(|| Error::Format("empty checkpoint".into()))?;
    if first.name != CONFIG_RECORD {
        return Err(Error::Format(format!(
            "expected leading {CONFIG_RECORD} record, found '{}'",
            first.name
        )));
    }
    let config = config_from_record(first)?;
    let mut by_name: BTreeMap<&str, &Record> = BTreeMap::new();
    for rec in &ckpt.records[1..] {
        if by_name.insert(rec.name.as_str(), rec).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{}'", rec.name)));
        }
    }

    let mut model = Model::<f32>::zeroed(config)?;
    let mut missing: Vec<String> = Vec::new();
    let mut used = 0usize;
    let mut fill_error: Option<Error> = None;
    model.params.visit_mut(&mut |name, tensor| {
        match by_name.get(name.as_str()) {
            Some(rec) => {
                used += 1;
                match shape_of(&rec.extents, &name) {
                    Ok(shape) if shape == tensor.shape() => {
                        tensor.data_mut().copy_from_slice(&rec.values);
                    }
                    Ok(shape) => {
                        fill_error.get_or_insert(Error::Format(format!(
                            "'{name}': stored shape {shape} does not match expected {}",
                            tensor.shape()
                        )));
                    }
                    Err(e) => {
                        fill_error.get_or_insert(e);
                    }
                }
            }
            None => missing.push(name),
        }
    });
    if let Some(e) = fill_error {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::Format(format!("missing tensors: {}", missing.join(", "))));
    }
    if used != by_name.len() {
        return Err(Error::Format("checkpoint contains unknown tensors".into()));
    }
    Ok(model)
}

/// Model to raw bytes.
pub fn save_model_bytes(model: &Model<f32>) -> Vec<u8> {
    checkpoint_from_model(model).encode()
}

/// Raw bytes to model.
pub fn load_model_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    model_from_checkpoint(&Checkpoint::decode(bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn tiny_model(seed: u64) -> Model<f32> {
        Model::init_variant("tiny", 5, seed).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = tiny_model(3);
        let bytes = save_model_bytes(&model);
        let reloaded = load_model_bytes(&bytes).unwrap();
        let bytes2 = save_model_bytes(&reloaded);
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn logits_survive_round_trip_bitwise() {
        let model = tiny_model(4);
        let mut rng = Rng::new(5);
        let x = Tensor::<f32>::from_fn(Shape::new(1, 64, 64, 3), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        let (before, _) = model.forward(&x).unwrap();
        let reloaded = load_model_bytes(&save_model_bytes(&model)).unwrap();
        let (after, _) = reloaded.forward(&x).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let model = tiny_model(6);
        let mut bytes = save_model_bytes(&model);
        bytes[0] = b'X';
        assert!(matches!(load_model_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let model = tiny_model(7);
        let mut bytes = save_model_bytes(&model);
        bytes[4] = 99;
        assert!(matches!(load_model_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let model = tiny_model(8);
        let bytes = save_model_bytes(&model);
        let cut = &bytes[..bytes.len() - 7];
        assert!(matches!(load_model_bytes(cut), Err(Error::Format(_))));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let model = tiny_model(9);
        let mut bytes = save_model_bytes(&model);
        bytes.extend_from_slice(&[0, 1, 2]);
        assert!(matches!(load_model_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn weight_count_matches_model_params() {
        let model = tiny_model(10);
        let ckpt = checkpoint_from_model(&model);
        assert_eq!(ckpt.weight_value_count(), model.param_count());
    }

    #[test]
    fn config_round_trips_through_the_record() {
        let mut config = VariantConfig::tiny(7);
        config.mode = AttentionMode::PaleSequential;
        let rec = config_record(&config);
        let back = config_from_record(&rec).unwrap();
        assert_eq!(back, config);
    }
}
