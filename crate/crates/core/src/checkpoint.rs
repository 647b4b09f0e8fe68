//! Checkpoints: a JSON manifest line followed by little-endian f32 payloads.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gimtp, ModelConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload following the manifest line.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub epochs_completed: usize,
    pub adam_step: u64,
    pub entries: Vec<Entry>,
}

fn arrays(model: &Gimtp) -> Vec<(String, &Tensor)> {
    let s = &model.store;
    let mut out: Vec<(String, &Tensor)> = s.ids().map(|id| (s.name(id).to_string(), s.value(id))).collect();
    out.extend(s.ids().map(|id| (format!("adam.m/{}", s.name(id)), s.first_moment(id))));
    out.extend(s.ids().map(|id| (format!("adam.v/{}", s.name(id)), s.second_moment(id))));
    out
}

pub fn write_checkpoint(model: &Gimtp, epochs_completed: usize, mut w: impl Write) -> Result<()> {
    let arrays = arrays(model);
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0;
    for (name, t) in &arrays {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
        });
        offset += 4 * t.len();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        epochs_completed,
        adam_step: model.store.step(),
        entries,
    };
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(offset);
    for (_, t) in &arrays {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_checkpoint(model: &Gimtp, epochs_completed: usize, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, epochs_completed, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Model plus the training position stored alongside it.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub model: Gimtp,
    pub epochs_completed: usize,
}

pub fn read_checkpoint(r: impl Read) -> Result<Loaded> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let manifest: Manifest = serde_json::from_slice(&line)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut model = Gimtp::new(manifest.model.clone(), 0)?;
    let read = |e: &Entry| -> Result<Tensor> {
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let bytes = payload
            .get(e.offset..e.offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("{}: payload truncated", e.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Tensor::new(e.shape.clone(), data)
    };
    let find = |name: &str| -> Result<&Entry> {
        manifest
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
    };
    let expected = 3 * model.store.len();
    if manifest.entries.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} arrays, found {}",
            manifest.entries.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let value = read(find(&name)?)?;
        if value.shape() != model.store.value(id).shape() {
            return Err(Error::Checkpoint(format!("{name}: shape {:?} does not match model", value.shape())));
        }
        let m = read(find(&format!("adam.m/{name}"))?)?;
        let v = read(find(&format!("adam.v/{name}"))?)?;
        *model.store.value_mut(id) = value;
        model
            .store
            .set_moments(id, m, v)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    }
    model.store.set_step(manifest.adam_step);
    Ok(Loaded {
        model,
        epochs_completed: manifest.epochs_completed,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let f = fs::File::open(path)
        .map_err(|e| Error::Usage(format!("cannot open checkpoint {}: {e}", path.display())))?;
    read_checkpoint(f)
}
