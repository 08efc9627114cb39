//! Checkpoint serialization.
//!
//! A checkpoint is two files sharing a stem:
//!
//! - `<stem>.manifest` — text, one `key value` pair per line, holding the
//!   format tag, dtype, model config and one `param` line per tensor with
//!   its shape and byte range;
//! - `<stem>.bin` — the concatenated raw little-endian element bytes of
//!   every tensor, in manifest order.
//!
//! Round trips are bit-exact: bytes are written straight from the element
//! representation and read back the same way.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights, Variant};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const FORMAT_TAG: &str = "layerdrop-checkpoint-v1";

fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("manifest")
}

fn payload_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

/// Write `<stem>.manifest` and `<stem>.bin`.
pub fn save_checkpoint<T: Scalar>(weights: &ModelWeights<T>, stem: &Path) -> Result<()> {
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let cfg = &weights.config;
    let mut manifest = String::new();
    manifest.push_str(&format!("format {FORMAT_TAG}\n"));
    manifest.push_str(&format!("dtype {}\n", T::DTYPE.name()));
    manifest.push_str(&format!("layers {}\n", cfg.layers));
    manifest.push_str(&format!("hidden {}\n", cfg.hidden));
    manifest.push_str(&format!("heads {}\n", cfg.heads));
    manifest.push_str(&format!("vocab {}\n", cfg.vocab));
    manifest.push_str(&format!("max_seq {}\n", cfg.max_seq));
    manifest.push_str(&format!("variant {}\n", cfg.variant.name()));
    manifest.push_str(&format!("dropout {}\n", cfg.dropout));
    manifest.push_str(&format!("ln_eps {}\n", cfg.ln_eps));
    manifest.push_str(&format!("init_std {}\n", cfg.init_std));

    let mut payload: Vec<u8> = Vec::new();
    weights.for_each_param(|name, tensor| {
        let offset = payload.len();
        for &v in tensor.data() {
            v.write_le(&mut payload);
        }
        let shape = tensor
            .shape()
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!(
            "param {name} {shape} {offset} {}\n",
            payload.len() - offset
        ));
    });

    fs::write(manifest_path(stem), manifest)?;
    fs::write(payload_path(stem), payload)?;
    Ok(())
}

fn manifest_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Manifest {
    dtype: Dtype,
    config: ModelConfig,
    params: Vec<(String, Vec<usize>, usize, usize)>,
}

fn parse_manifest(stem: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(manifest_path(stem))
        .map_err(|e| manifest_err(format!("cannot read {:?}: {e}", manifest_path(stem))))?;
    let mut fields = std::collections::HashMap::new();
    let mut params = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default();
        if key == "param" {
            let name = parts
                .next()
                .ok_or_else(|| manifest_err(format!("line {}: param name missing", lineno + 1)))?;
            let shape: Vec<usize> = parts
                .next()
                .ok_or_else(|| manifest_err("param shape missing"))?
                .split('x')
                .map(|e| e.parse().map_err(|_| manifest_err("bad shape extent")))
                .collect::<Result<_>>()?;
            let offset: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| manifest_err("bad param offset"))?;
            let len: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| manifest_err("bad param length"))?;
            params.push((name.to_string(), shape, offset, len));
        } else {
            let value = parts.collect::<Vec<_>>().join(" ");
            fields.insert(key.to_string(), value);
        }
    }

    let get = |k: &str| {
        fields
            .get(k)
            .cloned()
            .ok_or_else(|| manifest_err(format!("manifest field {k} missing")))
    };
    if get("format")? != FORMAT_TAG {
        return Err(manifest_err("unrecognized checkpoint format tag"));
    }
    let dtype = match get("dtype")?.as_str() {
        "f32" => Dtype::F32,
        "f64" => Dtype::F64,
        other => return Err(manifest_err(format!("unknown dtype {other}"))),
    };
    let parse_num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| manifest_err(format!("bad integer field {k}")))
    };
    let parse_f = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| manifest_err(format!("bad float field {k}")))
    };
    let config = ModelConfig {
        layers: parse_num("layers")?,
        hidden: parse_num("hidden")?,
        heads: parse_num("heads")?,
        vocab: parse_num("vocab")?,
        max_seq: parse_num("max_seq")?,
        variant: Variant::parse(&get("variant")?)?,
        dropout: parse_f("dropout")?,
        ln_eps: parse_f("ln_eps")?,
        init_std: parse_f("init_std")?,
    };
    Ok(Manifest {
        dtype,
        config,
        params,
    })
}

/// Read just the config and dtype (for compatibility checks).
pub fn load_checkpoint_config(stem: &Path) -> Result<(ModelConfig, Dtype)> {
    let m = parse_manifest(stem)?;
    Ok((m.config, m.dtype))
}

/// Load a checkpoint saved with the same element type.
pub fn load_checkpoint<T: Scalar>(stem: &Path) -> Result<ModelWeights<T>> {
    let manifest = parse_manifest(stem)?;
    if manifest.dtype != T::DTYPE {
        return Err(manifest_err(format!(
            "checkpoint dtype {} does not match requested {}",
            manifest.dtype.name(),
            T::DTYPE.name()
        )));
    }
    manifest.config.validate().map_err(|e| {
        manifest_err(format!("checkpoint carries an invalid model config: {e}"))
    })?;
    let payload = fs::read(payload_path(stem))
        .map_err(|e| manifest_err(format!("cannot read {:?}: {e}", payload_path(stem))))?;

    let elem = T::DTYPE.size_bytes();
    let read_tensor = |name: &str| -> Result<Tensor<T>> {
        let (_, shape, offset, len) = manifest
            .params
            .iter()
            .find(|(n, _, _, _)| n == name)
            .ok_or_else(|| manifest_err(format!("parameter {name} missing from manifest")))?;
        let numel: usize = shape.iter().product();
        if numel * elem != *len || offset + len > payload.len() {
            return Err(manifest_err(format!(
                "parameter {name}: byte range inconsistent with shape {shape:?}"
            )));
        }
        let data: Vec<T> = payload[*offset..offset + len]
            .chunks_exact(elem)
            .map(T::read_le)
            .collect();
        Tensor::new(shape.clone(), data)
    };

    let cfg = manifest.config.clone();
    let mut weights = ModelWeights {
        config: cfg.clone(),
        token_embedding: read_tensor("token_embedding")?,
        position_embedding: read_tensor("position_embedding")?,
        blocks: Vec::with_capacity(cfg.layers),
        final_norm: None,
    };
    for i in 0..cfg.layers {
        let f = |field: &str| read_tensor(&format!("block{i}.{field}"));
        // Keep field order in sync with `block_fields`.
        weights.blocks.push(crate::model::BlockWeights {
            w_q: f("attn.w_q")?,
            w_k: f("attn.w_k")?,
            w_v: f("attn.w_v")?,
            w_o: f("attn.w_o")?,
            w1: f("ffn.w1")?,
            b1: f("ffn.b1")?,
            w2: f("ffn.w2")?,
            b2: f("ffn.b2")?,
            ln1_gain: f("norm1.gain")?,
            ln1_bias: f("norm1.bias")?,
            ln2_gain: f("norm2.gain")?,
            ln2_bias: f("norm2.bias")?,
        });
    }
    if cfg.variant.has_final_norm() {
        weights.final_norm = Some((read_tensor("final_norm.gain")?, read_tensor("final_norm.bias")?));
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            vocab: 13,
            max_seq: 6,
            variant: Variant::St,
            dropout: 0.1,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let w = ModelWeights::<f32>::init(&cfg(), 42);
        save_checkpoint(&w, &stem).unwrap();
        let loaded = load_checkpoint::<f32>(&stem).unwrap();
        let mut pairs = Vec::new();
        w.for_each_param(|name, t| pairs.push((name.to_string(), t.clone())));
        for (name, original) in pairs {
            let got = loaded.param(&name);
            let a: Vec<u32> = original.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = got.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "parameter {name} not bit-identical");
        }
    }

    #[test]
    fn f64_round_trip_and_dtype_guard() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt64");
        let w = ModelWeights::<f64>::init(&cfg(), 7);
        save_checkpoint(&w, &stem).unwrap();
        let loaded = load_checkpoint::<f64>(&stem).unwrap();
        assert_eq!(
            loaded.token_embedding.data(),
            w.token_embedding.data()
        );
        let err = load_checkpoint::<f32>(&stem).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn config_survives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let w = ModelWeights::<f32>::init(&cfg(), 1);
        save_checkpoint(&w, &stem).unwrap();
        let (loaded_cfg, dtype) = load_checkpoint_config(&stem).unwrap();
        assert_eq!(dtype, Dtype::F32);
        assert_eq!(loaded_cfg.layers, 2);
        assert_eq!(loaded_cfg.variant, Variant::St);
        assert_eq!(loaded_cfg.dropout, 0.1);
        assert_eq!(loaded_cfg.ln_eps, 1e-5);
    }

    #[test]
    fn missing_manifest_is_a_checkpoint_error() {
        let err = load_checkpoint::<f32>(Path::new("/nonexistent/ckpt")).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}
