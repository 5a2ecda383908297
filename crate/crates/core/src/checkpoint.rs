//! Training checkpoints stored in the named-array [`archive`](crate::archive)
//! container. See `docs/checkpoint-format.md` for the entry names.

use std::path::Path;

use crate::archive::{Archive, Array, MetaValue};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const KIND: &str = "checkpoint";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParameterSet<f32>,
    pub optimizer: AdamW<f32>,
    pub epoch: u64,
    pub seed: u64,
}

fn model_table(cfg: &ModelConfig) -> toml::Table {
    toml::Table::try_from(cfg).expect("model config serialises")
}

fn dims_of(t: &Tensor<f32>) -> Vec<usize> {
    t.shape().dims().to_vec()
}

impl Checkpoint {
    pub fn to_archive(&self) -> Archive {
        let mut ar = Archive::new();
        ar.set_meta("kind", MetaValue::Str(KIND.into()));
        for (k, v) in model_table(&self.model) {
            let v = match v {
                toml::Value::Integer(i) => MetaValue::U64(i as u64),
                toml::Value::Boolean(b) => MetaValue::Bool(b),
                other => unreachable!("unexpected model field {k} = {other}"),
            };
            ar.set_meta(format!("model.{k}"), v);
        }
        ar.set_meta("epoch", MetaValue::U64(self.epoch));
        ar.set_meta("seed", MetaValue::U64(self.seed));
        let oc = self.optimizer.cfg;
        ar.set_meta("adam.t", MetaValue::U64(self.optimizer.t));
        ar.set_meta("adam.beta1", MetaValue::F64(oc.beta1));
        ar.set_meta("adam.beta2", MetaValue::F64(oc.beta2));
        ar.set_meta("adam.eps", MetaValue::F64(oc.eps));
        ar.set_meta("adam.weight_decay", MetaValue::F64(oc.weight_decay));

        let array = |t: &Tensor<f32>| Array { dims: dims_of(t), data: t.data().to_vec() };
        for (info, v) in self.params.infos().iter().zip(self.params.values()) {
            ar.push_array(format!("param/{}", info.name), array(v));
        }
        for rs in self.params.running_all() {
            let n = rs.mean.len();
            ar.push_array(format!("buffer/{}.running_mean", rs.name), Array { dims: vec![n], data: rs.mean.clone() });
            ar.push_array(format!("buffer/{}.running_var", rs.name), Array { dims: vec![n], data: rs.var.clone() });
        }
        for (info, m) in self.params.infos().iter().zip(&self.optimizer.m) {
            ar.push_array(format!("adam.m/{}", info.name), array(m));
        }
        for (info, v) in self.params.infos().iter().zip(&self.optimizer.v) {
            ar.push_array(format!("adam.v/{}", info.name), array(v));
        }
        ar
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let kind = ar.meta_str("kind")?;
        if kind != KIND {
            return Err(Error::Format(format!("archive holds a {kind}, not a {KIND}")));
        }
        let mut table = toml::Table::new();
        for (k, v) in ar.meta() {
            if let Some(field) = k.strip_prefix("model.") {
                let v = match v {
                    MetaValue::U64(i) => toml::Value::Integer(*i as i64),
                    MetaValue::Bool(b) => toml::Value::Boolean(*b),
                    other => return Err(Error::Format(format!("model field {field} has unexpected value {other:?}"))),
                };
                table.insert(field.to_string(), v);
            }
        }
        let model: ModelConfig = table
            .try_into()
            .map_err(|e| Error::Format(format!("stored model configuration is invalid: {e}")))?;
        let (_, mut params) = Network::build::<f32>(model)?;

        let fetch = |name: &str, dims: &[usize]| -> Result<Vec<f32>> {
            let a = ar.array(name).ok_or_else(|| Error::Mismatch(format!("checkpoint has no array `{name}`")))?;
            if a.dims != dims {
                return Err(Error::Mismatch(format!("array `{name}` has dims {:?}, model expects {dims:?}", a.dims)));
            }
            Ok(a.data.clone())
        };
        let ids: Vec<_> = params.ids().collect();
        for &id in &ids {
            let (name, shape) = (params.info(id).name.clone(), params.info(id).shape);
            let data = fetch(&format!("param/{name}"), shape.dims().as_slice())?;
            params.set(id, Tensor::from_vec(shape, data)?)?;
        }
        for rs in 0..params.running_all().len() {
            let id = crate::params::BnId(rs);
            let (name, n) = (params.running(id).name.clone(), params.running(id).mean.len());
            let mean = fetch(&format!("buffer/{name}.running_mean"), &[n])?;
            let var = fetch(&format!("buffer/{name}.running_var"), &[n])?;
            let r = params.running_mut(id);
            r.mean = mean;
            r.var = var;
        }
        let expected = ids.len() * 3 + params.running_all().len() * 2;
        if ar.arrays().len() != expected {
            return Err(Error::Mismatch(format!(
                "checkpoint holds {} arrays, the stored configuration implies {expected}",
                ar.arrays().len()
            )));
        }
        let cfg = AdamWConfig {
            beta1: ar.meta_f64("adam.beta1")?,
            beta2: ar.meta_f64("adam.beta2")?,
            eps: ar.meta_f64("adam.eps")?,
            weight_decay: ar.meta_f64("adam.weight_decay")?,
        };
        let mut optimizer = AdamW::new(cfg, &params);
        optimizer.t = ar.meta_u64("adam.t")?;
        for (i, &id) in ids.iter().enumerate() {
            let (name, shape) = (&params.info(id).name, params.info(id).shape);
            optimizer.m[i] = Tensor::from_vec(shape, fetch(&format!("adam.m/{name}"), shape.dims().as_slice())?)?;
            optimizer.v[i] = Tensor::from_vec(shape, fetch(&format!("adam.v/{name}"), shape.dims().as_slice())?)?;
        }
        Ok(Checkpoint {
            model,
            params,
            optimizer,
            epoch: ar.meta_u64("epoch")?,
            seed: ar.meta_u64("seed")?,
        })
    }

    /// Errors unless the stored model configuration equals `cfg`, naming
    /// every field that differs.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        if self.model == *cfg {
            return Ok(());
        }
        let (have, want) = (model_table(&self.model), model_table(cfg));
        let diffs: Vec<String> = want
            .iter()
            .filter(|(k, v)| have.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: checkpoint has {}, configuration has {v}", have[k]))
            .collect();
        Err(Error::Mismatch(diffs.join("; ")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Loads a checkpoint and checks it against the expected configuration.
    pub fn load_for(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_config(cfg)?;
        Ok(ck)
    }
}
