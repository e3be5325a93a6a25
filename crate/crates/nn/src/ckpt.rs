//! Checkpoints: model parameters, optimizer moments, auxiliary state, the
//! step counter, and a plain-text architecture descriptor, all in one
//! tensor container so a run can resume bit for bit.

use crate::opt::AdamState;
use crate::store::ParamStore;
use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;
use tomoforge_core::tnsr::{Dtype, TensorData, TensorFile, TnsrError};
use tomoforge_core::Real;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error(transparent)]
    Tnsr(#[from] TnsrError),
    #[error("checkpoint dtype is {found:?} but {expected:?} was requested")]
    DtypeMismatch { expected: Dtype, found: Dtype },
    #[error("malformed architecture text: {0}")]
    BadArch(String),
    #[error("missing entry `{0}`")]
    Missing(String),
}

/// What kind of network a checkpoint holds and how to rebuild it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelArch {
    End2End { g1: String, g2: String, bridge: usize },
    Generator { g1: String, g2: String, bridge: usize, z_channels: usize },
    Critic { stages: usize, base: usize },
    Posterior { hidden: usize, depth: usize, kernel: usize },
}

impl ModelArch {
    /// Key-per-line text form stored inside the checkpoint.
    pub fn to_text(&self) -> String {
        match self {
            ModelArch::End2End { g1, g2, bridge } => {
                format!("kind = end2end\ng1 = {g1}\ng2 = {g2}\nbridge = {bridge}\n")
            }
            ModelArch::Generator { g1, g2, bridge, z_channels } => format!(
                "kind = generator\ng1 = {g1}\ng2 = {g2}\nbridge = {bridge}\nz_channels = {z_channels}\n"
            ),
            ModelArch::Critic { stages, base } => {
                format!("kind = critic\nstages = {stages}\nbase = {base}\n")
            }
            ModelArch::Posterior { hidden, depth, kernel } => {
                format!("kind = posterior\nhidden = {hidden}\ndepth = {depth}\nkernel = {kernel}\n")
            }
        }
    }

    pub fn from_text(text: &str) -> Result<Self, CkptError> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CkptError::BadArch(format!("no `=` in `{line}`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k).cloned().ok_or_else(|| CkptError::BadArch(format!("missing key `{k}`")))
        };
        let num = |k: &str| -> Result<usize, CkptError> {
            get(k)?.parse().map_err(|_| CkptError::BadArch(format!("bad number for `{k}`")))
        };
        match get("kind")?.as_str() {
            "end2end" => Ok(ModelArch::End2End { g1: get("g1")?, g2: get("g2")?, bridge: num("bridge")? }),
            "generator" => Ok(ModelArch::Generator {
                g1: get("g1")?,
                g2: get("g2")?,
                bridge: num("bridge")?,
                z_channels: num("z_channels")?,
            }),
            "critic" => Ok(ModelArch::Critic { stages: num("stages")?, base: num("base")? }),
            "posterior" => Ok(ModelArch::Posterior {
                hidden: num("hidden")?,
                depth: num("depth")?,
                kernel: num("kernel")?,
            }),
            other => Err(CkptError::BadArch(format!("unknown kind `{other}`"))),
        }
    }
}

/// A full training snapshot.
pub struct Checkpoint<T: Real> {
    pub arch: ModelArch,
    pub step: u64,
    pub params: BTreeMap<String, ArrayD<T>>,
    pub aux: BTreeMap<String, ArrayD<T>>,
    pub adam_m: BTreeMap<String, ArrayD<T>>,
    pub adam_v: BTreeMap<String, ArrayD<T>>,
    pub adam_t: u64,
}

impl<T: Real> Checkpoint<T> {
    pub fn capture(arch: ModelArch, step: u64, store: &ParamStore<T>, opt: &AdamState<T>) -> Self {
        Checkpoint {
            arch,
            step,
            params: store.values.clone(),
            aux: store.aux.clone(),
            adam_m: opt.m.clone(),
            adam_v: opt.v.clone(),
            adam_t: opt.t,
        }
    }

    /// Splits the snapshot back into a live store and optimizer.
    pub fn restore(&self, seed: u64) -> (ParamStore<T>, AdamState<T>) {
        let mut store = ParamStore::new(seed);
        store.values = self.params.clone();
        store.aux = self.aux.clone();
        let mut opt = AdamState::new();
        opt.m = self.adam_m.clone();
        opt.v = self.adam_v.clone();
        opt.t = self.adam_t;
        (store, opt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CkptError> {
        let mut file = TensorFile::new();
        let text = self.arch.to_text();
        let arch_bytes: Vec<f64> = text.bytes().map(|b| b as f64).collect();
        let n_arch = arch_bytes.len();
        file.push(
            "__arch__",
            TensorData::F64(ArrayD::from_shape_vec(IxDyn(&[n_arch]), arch_bytes).unwrap()),
        )?;
        file.push(
            "__step__",
            TensorData::F64(
                ArrayD::from_shape_vec(IxDyn(&[2]), vec![self.step as f64, self.adam_t as f64])
                    .unwrap(),
            ),
        )?;
        for (group, map) in [
            ("param", &self.params),
            ("aux", &self.aux),
            ("adam/m", &self.adam_m),
            ("adam/v", &self.adam_v),
        ] {
            for (name, value) in map {
                file.push(format!("{group}/{name}"), pack(value))?;
            }
        }
        file.save(path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CkptError> {
        let file = TensorFile::load(path)?;
        let arch_bytes = file.require_f64("__arch__")?;
        let text: String = arch_bytes.iter().map(|&b| b as u8 as char).collect();
        let arch = ModelArch::from_text(&text)?;
        let step_pair = file.require_f64("__step__")?;
        if step_pair.len() != 2 {
            return Err(CkptError::BadArch("step entry must hold two values".into()));
        }
        let (step, adam_t) = (step_pair[[0]] as u64, step_pair[[1]] as u64);

        let mut params = BTreeMap::new();
        let mut aux = BTreeMap::new();
        let mut adam_m = BTreeMap::new();
        let mut adam_v = BTreeMap::new();
        for (name, data) in file.entries() {
            let value = || unpack::<T>(data);
            if let Some(rest) = name.strip_prefix("param/") {
                params.insert(rest.to_string(), value()?);
            } else if let Some(rest) = name.strip_prefix("aux/") {
                aux.insert(rest.to_string(), value()?);
            } else if let Some(rest) = name.strip_prefix("adam/m/") {
                adam_m.insert(rest.to_string(), value()?);
            } else if let Some(rest) = name.strip_prefix("adam/v/") {
                adam_v.insert(rest.to_string(), value()?);
            }
        }
        Ok(Checkpoint { arch, step, params, aux, adam_m, adam_v, adam_t })
    }
}

fn pack<T: Real>(a: &ArrayD<T>) -> TensorData {
    match T::DTYPE {
        Dtype::F32 => TensorData::F32(a.mapv(|v| v.to_f64_() as f32)),
        Dtype::F64 => TensorData::F64(a.mapv(|v| v.to_f64_())),
    }
}

fn unpack<T: Real>(d: &TensorData) -> Result<ArrayD<T>, CkptError> {
    match (T::DTYPE, d) {
        (Dtype::F32, TensorData::F32(a)) => Ok(a.mapv(|v| T::from_f64(v as f64))),
        (Dtype::F64, TensorData::F64(a)) => Ok(a.mapv(T::from_f64)),
        _ => Err(CkptError::DtypeMismatch { expected: T::DTYPE, found: d.dtype() }),
    }
}
