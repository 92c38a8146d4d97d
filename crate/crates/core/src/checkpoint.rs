//! Checkpoint archive: magic, manifest length (u64 LE), JSON manifest, then raw
//! little-endian f32 blobs addressed by the manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{Conv2d, Module};
use crate::tensor::Tensor;
use crate::training::{Adam, TrainSetup, TrainState};

pub const MAGIC: &[u8; 8] = b"SIVCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: [usize; 4],
    /// Offset into the blob section, in f32 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub iteration: usize,
    pub setup: TrainSetup,
    /// Word position of each random stream, as a decimal string.
    pub rng_word_pos: BTreeMap<String, String>,
    pub adam_steps: BTreeMap<String, u64>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

fn sn_tensors(prefix: &str, convs: Vec<&Conv2d<f32>>, out: &mut BTreeMap<String, Tensor<f32>>) {
    for c in convs {
        if let Some(s) = &c.spectral {
            out.insert(
                format!("{prefix}.sn_u/{}", c.name()),
                Tensor::from_vec([s.u.len(), 1, 1, 1], s.u.clone()),
            );
            out.insert(
                format!("{prefix}.sn_v/{}", c.name()),
                Tensor::from_vec([s.v.len(), 1, 1, 1], s.v.clone()),
            );
        }
    }
}

fn collect_tensors(state: &TrainState) -> BTreeMap<String, Tensor<f32>> {
    let mut out = BTreeMap::new();
    for p in state.generator.params() {
        out.insert(format!("generator/{}", p.name), p.value.clone());
    }
    for p in state.discriminator.params() {
        out.insert(format!("discriminator/{}", p.name), p.value.clone());
    }
    sn_tensors("generator", state.generator.convs(), &mut out);
    sn_tensors("discriminator", state.discriminator.convs(), &mut out);
    for (prefix, opt) in [("adam_g", &state.opt_g), ("adam_d", &state.opt_d)] {
        for (name, m) in &opt.m {
            out.insert(format!("{prefix}.m/{name}"), m.clone());
        }
        for (name, v) in &opt.v {
            out.insert(format!("{prefix}.v/{name}"), v.clone());
        }
    }
    out
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let tensors = collect_tensors(state);
    let mut entries = BTreeMap::new();
    let mut offset = 0;
    for (name, t) in &tensors {
        entries.insert(
            name.clone(),
            TensorEntry {
                shape: t.shape(),
                offset,
            },
        );
        offset += t.len();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        iteration: state.iteration,
        setup: state.setup.clone(),
        rng_word_pos: state
            .rngs
            .named()
            .iter()
            .map(|(k, r)| (k.to_string(), r.get_word_pos().to_string()))
            .collect(),
        adam_steps: BTreeMap::from([
            ("adam_d".to_string(), state.opt_d.t),
            ("adam_g".to_string(), state.opt_g.t),
        ]),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encoding: {e}")))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + offset * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in tensors.values() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    ensure!(
        bytes.len() >= 16 && &bytes[..8] == MAGIC,
        Checkpoint,
        "not a checkpoint archive (bad magic)"
    );
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    ensure!(bytes.len() - 16 >= len, Checkpoint, "truncated manifest");
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + len])
        .map_err(|e| Error::Checkpoint(format!("manifest decoding: {e}")))?;
    ensure!(
        manifest.format_version == FORMAT_VERSION,
        Checkpoint,
        "unsupported checkpoint version {}",
        manifest.format_version
    );
    Ok((manifest, &bytes[16 + len..]))
}

fn restore_sn(
    prefix: &str,
    convs: Vec<&mut Conv2d<f32>>,
    tensors: &mut BTreeMap<String, Tensor<f32>>,
) -> Result<()> {
    for c in convs {
        let name = c.name().to_string();
        if let Some(s) = c.spectral.as_mut() {
            for (kind, vec) in [("sn_u", &mut s.u), ("sn_v", &mut s.v)] {
                let key = format!("{prefix}.{kind}/{name}");
                let t = tensors
                    .remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                ensure!(
                    t.len() == vec.len(),
                    Checkpoint,
                    "tensor {key} has {} values, expected {}",
                    t.len(),
                    vec.len()
                );
                *vec = t.into_vec();
            }
        }
    }
    Ok(())
}

fn restore_params<'a>(
    prefix: &str,
    params: impl IntoIterator<Item = &'a mut crate::nn::Param<f32>>,
    tensors: &mut BTreeMap<String, Tensor<f32>>,
) -> Result<()> {
    for p in params {
        let key = format!("{prefix}/{}", p.name);
        let t = tensors
            .remove(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
        ensure!(
            t.shape() == p.value.shape(),
            Checkpoint,
            "tensor {key} has shape {:?}, expected {:?}",
            t.shape(),
            p.value.shape()
        );
        p.value = t;
    }
    Ok(())
}

fn restore_adam(prefix: &str, opt: &mut Adam, tensors: &mut BTreeMap<String, Tensor<f32>>) {
    for (kind, map) in [("m", &mut opt.m), ("v", &mut opt.v)] {
        let pat = format!("{prefix}.{kind}/");
        let keys: Vec<String> = tensors
            .keys()
            .filter(|k| k.starts_with(&pat))
            .cloned()
            .collect();
        for k in keys {
            let t = tensors.remove(&k).expect("listed key");
            map.insert(k[pat.len()..].to_string(), t);
        }
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let (manifest, blob) = read_manifest(bytes)?;
    ensure!(
        blob.len() % 4 == 0,
        Checkpoint,
        "blob section is not a whole number of f32 values"
    );
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut tensors = BTreeMap::new();
    let mut expected_offset = 0;
    for (name, e) in &manifest.tensors {
        let len: usize = e.shape.iter().product();
        ensure!(
            e.offset == expected_offset,
            Checkpoint,
            "tensor {name} is not contiguous in the blob"
        );
        ensure!(
            e.offset + len <= values.len(),
            Checkpoint,
            "tensor {name} extends past the blob"
        );
        tensors.insert(
            name.clone(),
            Tensor::from_vec(e.shape, values[e.offset..e.offset + len].to_vec()),
        );
        expected_offset += len;
    }
    ensure!(
        expected_offset == values.len(),
        Checkpoint,
        "blob has {} trailing values",
        values.len() - expected_offset
    );

    let mut state = TrainState::new(manifest.setup.clone())
        .map_err(|e| Error::Checkpoint(format!("stored setup: {e}")))?;
    state.iteration = manifest.iteration;
    restore_params("generator", state.generator.params_mut(), &mut tensors)?;
    restore_params(
        "discriminator",
        state.discriminator.params_mut(),
        &mut tensors,
    )?;
    restore_sn("generator", state.generator.convs_mut(), &mut tensors)?;
    restore_sn(
        "discriminator",
        state.discriminator.convs_mut(),
        &mut tensors,
    )?;
    restore_adam("adam_g", &mut state.opt_g, &mut tensors);
    restore_adam("adam_d", &mut state.opt_d, &mut tensors);
    ensure!(
        tensors.is_empty(),
        Checkpoint,
        "unexpected tensors: {:?}",
        tensors.keys().collect::<Vec<_>>()
    );
    state.opt_g.t = manifest.adam_steps.get("adam_g").copied().unwrap_or(0);
    state.opt_d.t = manifest.adam_steps.get("adam_d").copied().unwrap_or(0);
    for (name, rng) in state.rngs.named_mut() {
        let pos = manifest
            .rng_word_pos
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing random stream {name}")))?;
        let pos: u128 = pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("stream {name} position {pos:?}: {e}")))?;
        rng.set_word_pos(pos);
    }
    Ok(state)
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint. I/O failures are reported as checkpoint errors.
pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}
