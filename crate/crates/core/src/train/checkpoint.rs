//! Checkpoint container: a safetensors file holding named parameters
//! (`stage1.*`, `ssr.*`), Adam moments (`optim.m.*`, `optim.v.*`) and
//! string metadata (format version, stage, step, config snapshot, checksums).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::adam::Adam;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{SSR_PREFIX, STAGE1_PREFIX};
use crate::params::{checksum_tensors, ParamStore};

pub const FORMAT: &str = "modot-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Training stage that wrote the file (1 or 2).
    pub stage: u8,
    /// Completed optimizer steps of that stage.
    pub step: usize,
    pub config: ExperimentConfig,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Option<Adam>,
    /// Parameter-group checksums keyed by prefix (`stage1.`, `ssr.`).
    pub checksums: BTreeMap<String, String>,
}

fn group_checksum(params: &BTreeMap<String, Tensor>, prefix: &str) -> Result<String> {
    Ok(checksum_tensors(
        params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.as_str(), v)),
    )?)
}

fn f32_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(v.iter().flat_map(|x| x.to_le_bytes()).collect())
}

impl Checkpoint {
    /// Snapshot of every parameter in `store`.
    pub fn capture(
        store: &ParamStore,
        stage: u8,
        step: usize,
        config: &ExperimentConfig,
        optimizer: Option<&Adam>,
    ) -> Result<Self> {
        let params: BTreeMap<String, Tensor> = store
            .all_vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect();
        let mut checksums = BTreeMap::new();
        for prefix in [STAGE1_PREFIX, SSR_PREFIX] {
            if params.keys().any(|k| k.starts_with(prefix)) {
                checksums.insert(prefix.to_string(), group_checksum(&params, prefix)?);
            }
        }
        Ok(Self {
            stage,
            step,
            config: config.clone(),
            params,
            optimizer: optimizer.cloned(),
            checksums,
        })
    }

    pub fn has_group(&self, prefix: &str) -> bool {
        self.params.keys().any(|k| k.starts_with(prefix))
    }

    /// Registers the stored parameters of `prefix` (all when empty) in `store`.
    pub fn restore_into(&self, store: &ParamStore, prefix: &str) -> Result<()> {
        for (k, v) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            store.insert(k, v)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (k, v) in &self.params {
            buffers.push((k.clone(), v.dims().to_vec(), f32_bytes(v)?));
        }
        if let Some(opt) = &self.optimizer {
            for (k, (m, v)) in &opt.moments {
                buffers.push((format!("{M_PREFIX}{k}"), m.dims().to_vec(), f32_bytes(m)?));
                buffers.push((format!("{V_PREFIX}{k}"), v.dims().to_vec(), f32_bytes(v)?));
            }
        }
        let views = buffers
            .iter()
            .map(|(k, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|view| (k.clone(), view))
                    .map_err(|e| Error::io(path, e))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
        meta.insert("stage".to_string(), self.stage.to_string());
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("config".to_string(), self.config.to_json());
        meta.insert(
            "checksums".to_string(),
            serde_json::to_string(&self.checksums).expect("checksums serialize"),
        );
        if let Some(opt) = &self.optimizer {
            meta.insert("optim_t".to_string(), opt.t.to_string());
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        safetensors::tensor::serialize_to_file(views, Some(meta), &tmp).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::io(path, e))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::io(path, "checkpoint has no metadata"))?;
        let get = |key: &str| -> Result<&String> {
            meta.get(key)
                .ok_or_else(|| Error::io(path, format!("checkpoint metadata lacks `{key}`")))
        };
        if get("format")? != FORMAT {
            return Err(Error::io(path, "not a checkpoint file"));
        }
        let version: u32 = get("format_version")?.parse().map_err(|e| Error::io(path, e))?;
        if version != FORMAT_VERSION {
            return Err(Error::io(path, format!("unsupported checkpoint version {version}")));
        }
        let stage: u8 = get("stage")?.parse().map_err(|e| Error::io(path, e))?;
        let step: usize = get("step")?.parse().map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = serde_json::from_str(get("config")?).map_err(|e| Error::io(path, e))?;
        let checksums: BTreeMap<String, String> =
            serde_json::from_str(get("checksums")?).map_err(|e| Error::io(path, e))?;

        let mut params = BTreeMap::new();
        let mut ms = BTreeMap::new();
        let mut vs = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::io(path, format!("tensor {name} is not f32")));
            }
            let t = Tensor::from_raw_buffer(view.data(), DType::F32, view.shape(), &Device::Cpu)?;
            if let Some(k) = name.strip_prefix(M_PREFIX) {
                ms.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(V_PREFIX) {
                vs.insert(k.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        for (prefix, expected) in &checksums {
            if &group_checksum(&params, prefix)? != expected {
                return Err(Error::io(path, format!("checksum mismatch for `{prefix}*` parameters")));
            }
        }
        let optimizer = match meta.get("optim_t") {
            Some(t) => {
                let mut opt = Adam {
                    t: t.parse().map_err(|e| Error::io(path, e))?,
                    ..Adam::default()
                };
                for (k, m) in ms {
                    let v = vs
                        .remove(&k)
                        .ok_or_else(|| Error::io(path, format!("missing second moment for {k}")))?;
                    opt.moments.insert(k, (m, v));
                }
                Some(opt)
            }
            None => None,
        };
        Ok(Self {
            stage,
            step,
            config,
            params,
            optimizer,
            checksums,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let store = ParamStore::new(1);
        let vb = store.var_builder(DType::F32, &Device::Cpu);
        let _ = vb.pp("stage1").pp("a").get_with_hints((2, 3), "w", candle_nn::init::DEFAULT_KAIMING_NORMAL).unwrap();
        let _ = vb.pp("ssr").pp("b").get_with_hints(4, "w", candle_nn::init::DEFAULT_KAIMING_NORMAL).unwrap();
        let mut opt = Adam {
            t: 7,
            ..Adam::default()
        };
        let m = Tensor::new(&[1f32, 2.0, 3.0, 4.0], &Device::Cpu).unwrap();
        opt.moments.insert("ssr.b.w".into(), (m.clone(), (&m * 2.0).unwrap()));
        let cfg = ExperimentConfig::default();
        let ck = Checkpoint::capture(&store, 2, 11, &cfg, Some(&opt)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!((back.stage, back.step), (2, 11));
        assert_eq!(back.config, cfg);
        assert_eq!(back.checksums, ck.checksums);
        assert_eq!(back.checksums[STAGE1_PREFIX], store.checksum(STAGE1_PREFIX).unwrap());
        let bopt = back.optimizer.unwrap();
        assert_eq!(bopt.t, 7);
        assert_eq!(bopt.moments["ssr.b.w"].1.to_vec1::<f32>().unwrap(), vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = Checkpoint::load(Path::new("/nonexistent/ckpt")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
