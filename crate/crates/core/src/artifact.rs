//! Single-file binary artifact: magic, version, section table, checksummed
//! little-endian payloads.
//!
//! Layout:
//! ```text
//! "MTRA" | version u32 | section count u32
//! per section: kind u32 | offset u64 | len u64 | crc32 u32
//! payload bytes...
//! ```
//! Sections: model config (JSON), base weights (f32), bank stacks (f32),
//! gate weights (f32), metadata (JSON). Tensor payloads keep their exact
//! f32 bit patterns, so save -> load -> save is byte-identical. Unknown
//! section kinds from future versions are skipped with a warning; a failed
//! checksum is a hard error naming the section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraBank;
use crate::model::{Site, ToyModel, ToyModelConfig, SITES_PER_BLOCK};
use crate::routing::{GatingNetwork, RoutingConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MTRA";
pub const VERSION: u32 = 1;

const KIND_MODEL_CONFIG: u32 = 1;
const KIND_BASE_WEIGHTS: u32 = 2;
const KIND_BANK_STACKS: u32 = 3;
const KIND_GATE_WEIGHTS: u32 = 4;
const KIND_METADATA: u32 = 5;

fn kind_name(kind: u32) -> String {
    match kind {
        KIND_MODEL_CONFIG => "model_config".into(),
        KIND_BASE_WEIGHTS => "base_weights".into(),
        KIND_BANK_STACKS => "bank_stacks".into(),
        KIND_GATE_WEIGHTS => "gate_weights".into(),
        KIND_METADATA => "metadata".into(),
        other => format!("unknown({other})"),
    }
}

/// Bank shape and routing info needed to rebuild the routed layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterSetConfig {
    pub names: Vec<String>,
    pub rank: usize,
    pub alpha: f64,
    pub routing: RoutingConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactConfig {
    pub model: ToyModelConfig,
    /// Present once adapters are attached.
    pub adapters: Option<AdapterSetConfig>,
    /// Seed the base model was built from.
    pub base_seed: u64,
}

/// In-memory form of an artifact file.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub config: ArtifactConfig,
    /// Base tensors flattened in canonical order (see `base_order` docs).
    pub base: Vec<f32>,
    /// Per site: A stack then B stack, flattened; present with adapters.
    pub banks: Option<Vec<f32>>,
    /// Per site gate weights, flattened; present once gates exist.
    pub gates: Option<Vec<f32>>,
    pub metadata: serde_json::Value,
}

fn f32s_to_bytes(v: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn bytes_to_f32s(b: &[u8]) -> Result<Vec<f32>> {
    if b.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "float payload length {} is not a multiple of 4",
            b.len()
        )));
    }
    Ok(b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl Artifact {
    /// Capture a model (base always; banks/gates when attached).
    pub fn from_model(
        model: &ToyModel<f32>,
        base_seed: u64,
        metadata: serde_json::Value,
    ) -> Result<Artifact> {
        let cfg = model.cfg().clone();
        let mut base = Vec::new();
        base.extend_from_slice(model.embedding().data());
        for block in 0..cfg.blocks {
            let (rms1, rms2) = model.block_norms(block);
            base.extend_from_slice(rms1.data());
            base.extend_from_slice(rms2.data());
            for site in 0..SITES_PER_BLOCK {
                base.extend_from_slice(model.site_weight(block * SITES_PER_BLOCK + site).data());
            }
        }
        base.extend_from_slice(model.final_norm().data());

        let (adapters, banks, gates) = if model.has_moe() {
            let sites = model.moe_sites()?;
            let first = &sites[0];
            let mut bank_data = Vec::new();
            let mut gate_data = Vec::new();
            for layer in sites {
                bank_data.extend_from_slice(layer.bank().a_stack().data());
                bank_data.extend_from_slice(layer.bank().b_stack().data());
                gate_data.extend_from_slice(layer.gate().weight().data());
            }
            (
                Some(AdapterSetConfig {
                    names: first.bank().names().to_vec(),
                    rank: first.bank().rank(),
                    alpha: first.bank().alpha(),
                    routing: *first.routing(),
                }),
                Some(bank_data),
                Some(gate_data),
            )
        } else {
            (None, None, None)
        };

        Ok(Artifact {
            config: ArtifactConfig {
                model: cfg,
                adapters,
                base_seed,
            },
            base,
            banks,
            gates,
            metadata,
        })
    }

    /// Rebuild the model: base weights, then banks and gates when present.
    pub fn to_model(&self) -> Result<ToyModel<f32>> {
        let cfg = &self.config.model;
        let mut model = ToyModel::build(cfg.clone(), self.config.base_seed)?;
        let mut cursor = 0usize;
        let mut take = |len: usize, base: &[f32]| -> Result<Vec<f32>> {
            if cursor + len > base.len() {
                return Err(Error::Format(format!(
                    "base weights truncated: need {} more floats",
                    cursor + len - base.len()
                )));
            }
            let out = base[cursor..cursor + len].to_vec();
            cursor += len;
            Ok(out)
        };

        let emb = take(cfg.vocab * cfg.d_model, &self.base)?;
        model.set_embedding(Tensor::new(&[cfg.vocab, cfg.d_model], emb)?)?;
        for block in 0..cfg.blocks {
            let rms1 = take(cfg.d_model, &self.base)?;
            let rms2 = take(cfg.d_model, &self.base)?;
            model.set_block_norms(
                block,
                Tensor::new(&[1, cfg.d_model], rms1)?,
                Tensor::new(&[1, cfg.d_model], rms2)?,
            )?;
            for (s, site) in Site::ALL.iter().enumerate() {
                let (din, dout) = site.dims(cfg);
                let w = take(din * dout, &self.base)?;
                model.set_site_weight(
                    block * SITES_PER_BLOCK + s,
                    Tensor::new(&[din, dout], w)?,
                )?;
            }
        }
        let fin = take(cfg.d_model, &self.base)?;
        model.set_final_norm(Tensor::new(&[1, cfg.d_model], fin)?)?;
        if cursor != self.base.len() {
            return Err(Error::Format(format!(
                "base weights have {} trailing floats",
                self.base.len() - cursor
            )));
        }

        if let (Some(ad), Some(bank_data)) = (&self.config.adapters, &self.banks) {
            let n = ad.names.len();
            let mut cursor = 0usize;
            let mut banks = Vec::with_capacity(cfg.n_sites());
            for block in 0..cfg.blocks {
                for site in Site::ALL {
                    let (din, dout) = site.dims(cfg);
                    let a_len = n * din * ad.rank;
                    let b_len = n * ad.rank * dout;
                    if cursor + a_len + b_len > bank_data.len() {
                        return Err(Error::Format("bank stacks truncated".into()));
                    }
                    let a = Tensor::new(
                        &[n, din, ad.rank],
                        bank_data[cursor..cursor + a_len].to_vec(),
                    )?;
                    cursor += a_len;
                    let b = Tensor::new(
                        &[n, ad.rank, dout],
                        bank_data[cursor..cursor + b_len].to_vec(),
                    )?;
                    cursor += b_len;
                    banks.push(LoraBank::from_stacks(ad.names.clone(), a, b, ad.alpha)?);
                    let _ = block;
                }
            }
            model.attach_prebuilt_banks(banks, ad.routing, self.config.base_seed)?;

            if let Some(gate_data) = &self.gates {
                let mut cursor = 0usize;
                let mut gates = Vec::with_capacity(cfg.n_sites());
                for block in 0..cfg.blocks {
                    for site in Site::ALL {
                        let (din, _) = site.dims(cfg);
                        let len = din * n;
                        if cursor + len > gate_data.len() {
                            return Err(Error::Format("gate weights truncated".into()));
                        }
                        gates.push(GatingNetwork::new(Tensor::new(
                            &[din, n],
                            gate_data[cursor..cursor + len].to_vec(),
                        )?)?);
                        cursor += len;
                        let _ = block;
                    }
                }
                model.set_gates(gates)?;
            }
        }
        Ok(model)
    }

    /// Serialize to the on-disk format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<(u32, Vec<u8>)> = Vec::new();
        sections.push((
            KIND_MODEL_CONFIG,
            serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?,
        ));
        sections.push((KIND_BASE_WEIGHTS, f32s_to_bytes(&self.base)));
        if let Some(banks) = &self.banks {
            sections.push((KIND_BANK_STACKS, f32s_to_bytes(banks)));
        }
        if let Some(gates) = &self.gates {
            sections.push((KIND_GATE_WEIGHTS, f32s_to_bytes(gates)));
        }
        sections.push((
            KIND_METADATA,
            serde_json::to_vec(&self.metadata).map_err(|e| Error::Format(e.to_string()))?,
        ));

        let header_len = 12 + 24 * sections.len();
        let mut out = Vec::with_capacity(
            header_len + sections.iter().map(|(_, p)| p.len()).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        let mut offset = header_len as u64;
        for (kind, payload) in &sections {
            out.extend_from_slice(&kind.to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
            offset += payload.len() as u64;
        }
        for (_, payload) in &sections {
            out.extend_from_slice(payload);
        }
        Ok(out)
    }

    /// Parse the on-disk format; checksums verified per section, unknown
    /// kinds skipped with a warning on stderr.
    pub fn from_bytes(bytes: &[u8]) -> Result<Artifact> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an MTRA artifact (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version > VERSION {
            eprintln!(
                "warning: artifact version {version} is newer than supported {VERSION}; \
                 unknown sections will be skipped"
            );
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_len = 12 + 24 * count;
        if bytes.len() < header_len {
            return Err(Error::Format("artifact header truncated".into()));
        }

        let mut config: Option<ArtifactConfig> = None;
        let mut base: Option<Vec<f32>> = None;
        let mut banks: Option<Vec<f32>> = None;
        let mut gates: Option<Vec<f32>> = None;
        let mut metadata = serde_json::Value::Null;

        for i in 0..count {
            let entry = &bytes[12 + 24 * i..12 + 24 * (i + 1)];
            let kind = u32::from_le_bytes(entry[0..4].try_into().unwrap());
            let offset = u64::from_le_bytes(entry[4..12].try_into().unwrap()) as usize;
            let len = u64::from_le_bytes(entry[12..20].try_into().unwrap()) as usize;
            let crc = u32::from_le_bytes(entry[20..24].try_into().unwrap());
            let payload = bytes
                .get(offset..offset + len)
                .ok_or_else(|| Error::Format(format!(
                    "section {} extends past end of file",
                    kind_name(kind)
                )))?;
            if crc32fast::hash(payload) != crc {
                return Err(Error::Corrupt {
                    section: kind_name(kind),
                });
            }
            match kind {
                KIND_MODEL_CONFIG => {
                    config = Some(
                        serde_json::from_slice(payload)
                            .map_err(|e| Error::Format(format!("model config: {e}")))?,
                    );
                }
                KIND_BASE_WEIGHTS => base = Some(bytes_to_f32s(payload)?),
                KIND_BANK_STACKS => banks = Some(bytes_to_f32s(payload)?),
                KIND_GATE_WEIGHTS => gates = Some(bytes_to_f32s(payload)?),
                KIND_METADATA => {
                    metadata = serde_json::from_slice(payload)
                        .map_err(|e| Error::Format(format!("metadata: {e}")))?;
                }
                other => {
                    eprintln!("warning: skipping unknown artifact section {}", kind_name(other));
                }
            }
        }

        Ok(Artifact {
            config: config.ok_or_else(|| Error::Format("missing model config section".into()))?,
            base: base.ok_or_else(|| Error::Format("missing base weights section".into()))?,
            banks,
            gates,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Artifact> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Artifact::from_bytes(&bytes)
    }
}
