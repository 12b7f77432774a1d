//! DCGAN-style encoders/decoders and projection heads.
//!
//! Parameters live in a [`ParamStore`] keyed by slash-separated names
//! (`enc{m}/conv1/w`, `head{m}/bn/gamma`, ...). Forward passes bind the
//! store onto a tape and build the graph through [`ForwardCtx`].

mod forward;
mod init;

pub use forward::{classify, decode, encode, project_conv, EncoderOutputs};
pub use init::{init_decoder, init_encoder, init_head, init_probe, xavier_uniform};

use std::collections::BTreeMap;

use crate::ndgrad::{ndck, Array, BatchNormMode, NdError, Scalar, Tape, ValueRef};

/// Batch-norm momentum for running statistics: running = (1-m)*running + m*batch.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Negative slope of encoder activations.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Input images are SIDE x SIDE.
pub const INPUT_SIDE: usize = 32;
/// The convolutional feature map used by location-based objectives is
/// FEATURE_SIDE x FEATURE_SIDE.
pub const FEATURE_SIDE: usize = 8;

/// Architecture of one modality's encoder (and, mirrored, its decoder).
#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub latent_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { in_channels: 1, base_channels: 64, latent_dim: 64 }
    }
}

impl EncoderConfig {
    /// Channel count of the 8x8 feature map `c`.
    pub fn feature_channels(&self) -> usize {
        2 * self.base_channels
    }

    /// Flattened size entering the final linear layer (4B channels at 4x4).
    pub fn flat_dim(&self) -> usize {
        4 * self.base_channels * 4 * 4
    }
}

/// Trainable parameters plus non-trainable buffers (batchnorm running
/// statistics), both in deterministic name order.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    params: BTreeMap<String, Array<T>>,
    buffers: BTreeMap<String, Array<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Array<T>) {
        let name = name.into();
        assert!(self.params.insert(name.clone(), value).is_none(), "duplicate parameter {name}");
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Array<T>) {
        let name = name.into();
        assert!(self.buffers.insert(name.clone(), value).is_none(), "duplicate buffer {name}");
    }

    pub fn param(&self, name: &str) -> Result<&Array<T>, NdError> {
        self.params.get(name).ok_or_else(|| NdError::Invalid(format!("missing parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Array<T>, NdError> {
        self.params.get_mut(name).ok_or_else(|| NdError::Invalid(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Array<T>, NdError> {
        self.buffers.get(name).ok_or_else(|| NdError::Invalid(format!("missing buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Array<T>, NdError> {
        self.buffers.get_mut(name).ok_or_else(|| NdError::Invalid(format!("missing buffer {name}")))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Array<T>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Array<T>)> {
        self.buffers.iter()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len_params(&self) -> usize {
        self.params.len()
    }

    /// Convert every value to another float width.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |m: &BTreeMap<String, Array<T>>| {
            m.iter().map(|(k, v)| (k.clone(), v.map(|x| U::from_f64(x.to_f64())))).collect()
        };
        ParamStore { params: conv(&self.params), buffers: conv(&self.buffers) }
    }

    /// Serialize to an NDCK checkpoint. Buffers carry a `!buf/` prefix so
    /// the two namespaces survive the round trip.
    pub fn save(&self, path: &std::path::Path) -> Result<(), NdError> {
        let mut arrays = BTreeMap::new();
        for (name, value) in &self.params {
            arrays.insert(name.clone(), ndck::store(value));
        }
        for (name, value) in &self.buffers {
            arrays.insert(format!("!buf/{name}"), ndck::store(value));
        }
        ndck::write_ndck(path, &arrays)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NdError> {
        let arrays = ndck::read_ndck(path)?;
        let mut store = ParamStore::new();
        for (name, value) in arrays {
            let arr = match T::DTYPE {
                crate::ndgrad::Dtype::F32 => {
                    let a = value.to_f32();
                    a.map(|x| T::from_f64(x as f64))
                }
                crate::ndgrad::Dtype::F64 => {
                    let a = value.to_f64();
                    a.map(T::from_f64)
                }
            };
            match name.strip_prefix("!buf/") {
                Some(buf) => store.buffers.insert(buf.to_string(), arr),
                None => store.params.insert(name, arr),
            };
        }
        Ok(store)
    }
}

/// Per-step binding of a [`ParamStore`] onto a tape.
pub struct Binding {
    refs: BTreeMap<String, ValueRef>,
}

impl Binding {
    /// Build a binding from explicit name -> ref pairs, e.g. inside a
    /// gradient-check closure where leaves live outside a [`ParamStore`].
    pub fn from_refs(refs: BTreeMap<String, ValueRef>) -> Binding {
        Binding { refs }
    }

    pub fn get(&self, name: &str) -> Result<ValueRef, NdError> {
        self.refs.get(name).copied().ok_or_else(|| NdError::Invalid(format!("unbound parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ValueRef)> {
        self.refs.iter()
    }
}

/// Everything a forward builder needs: the tape, the parameter binding, the
/// batchnorm mode, and a list of batchnorm sites to fold into running
/// statistics after the step.
pub struct ForwardCtx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub binding: &'a Binding,
    pub bn_mode: BatchNormMode,
    /// (buffer prefix, batchnorm output ref) per train-mode batchnorm call.
    pub bn_sites: Vec<(String, ValueRef)>,
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, binding: &'a Binding, bn_mode: BatchNormMode) -> Self {
        ForwardCtx { tape, binding, bn_mode, bn_sites: Vec::new() }
    }

    pub fn p(&self, name: &str) -> Result<ValueRef, NdError> {
        self.binding.get(name)
    }

    /// batchnorm2d honoring `bn_mode`; records the site in train mode.
    pub fn batchnorm(&mut self, prefix: &str, x: ValueRef) -> Result<ValueRef, NdError> {
        let gamma = self.p(&format!("{prefix}/gamma"))?;
        let beta = self.p(&format!("{prefix}/beta"))?;
        match self.bn_mode {
            BatchNormMode::Train => {
                let out = self.tape.batchnorm_train(x, gamma, beta, BN_EPS)?;
                self.bn_sites.push((prefix.to_string(), out));
                Ok(out)
            }
            BatchNormMode::Eval => {
                let rm = self.p(&format!("{prefix}/running_mean"))?;
                let rv = self.p(&format!("{prefix}/running_var"))?;
                self.tape.batchnorm_eval(x, gamma, beta, rm, rv, BN_EPS)
            }
        }
    }
}

/// Bind every param and buffer in `store` onto `tape`. Params whose name
/// passes `trainable` become differentiated leaves; everything else is bound
/// as a constant.
pub fn bind<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    trainable: impl Fn(&str) -> bool,
) -> Binding {
    let mut refs = BTreeMap::new();
    for (name, value) in &store.params {
        let r = if trainable(name) {
            tape.param(value.shape(), value.data())
        } else {
            tape.constant(value.shape(), value.data())
        };
        refs.insert(name.clone(), r);
    }
    for (name, value) in &store.buffers {
        refs.insert(name.clone(), tape.constant(value.shape(), value.data()));
    }
    Binding { refs }
}

/// Fold train-mode batch statistics into running buffers:
/// running = (1-momentum)*running + momentum*batch, with the unbiased batch
/// variance entering the running variance.
pub fn update_running_stats<T: Scalar>(
    store: &mut ParamStore<T>,
    tape: &Tape<T>,
    sites: &[(String, ValueRef)],
) -> Result<(), NdError> {
    let momentum = T::from_f64(BN_MOMENTUM);
    let keep = T::one() - momentum;
    for (prefix, site) in sites {
        let shape = tape.shape(*site);
        let m = shape[0] * shape[2] * shape[3];
        let bessel = if m > 1 { T::from_f64(m as f64 / (m as f64 - 1.0)) } else { T::one() };
        let (mean, var) = tape
            .batch_stats(*site)
            .ok_or_else(|| NdError::Invalid(format!("{prefix}: site has no batch statistics")))?;
        let (mean, var) = (mean.to_vec(), var.to_vec());
        let rm = store.buffer_mut(&format!("{prefix}/running_mean"))?;
        for (r, b) in rm.data_mut().iter_mut().zip(&mean) {
            *r = keep * *r + momentum * *b;
        }
        let rv = store.buffer_mut(&format!("{prefix}/running_var"))?;
        for (r, b) in rv.data_mut().iter_mut().zip(&var) {
            *r = keep * *r + momentum * bessel * *b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn store_round_trip_keeps_namespaces() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.ndck");
        let mut store = ParamStore::<f32>::new();
        store.insert_param("enc0/conv1/w", Array::from_vec(vec![1.0, 2.0]));
        store.insert_buffer("enc0/bn2/running_mean", Array::from_vec(vec![0.5]));
        store.save(&path).unwrap();
        let back = ParamStore::<f32>::load(&path).unwrap();
        assert_eq!(back.param("enc0/conv1/w").unwrap().data(), &[1.0, 2.0]);
        assert_eq!(back.buffer("enc0/bn2/running_mean").unwrap().data(), &[0.5]);
        assert!(back.param("enc0/bn2/running_mean").is_err());
    }

    #[test]
    fn binding_distinguishes_trainable() {
        let mut store = ParamStore::<f64>::new();
        store.insert_param("enc0/w", Array::from_vec(vec![1.0]));
        store.insert_param("enc1/w", Array::from_vec(vec![2.0]));
        let mut tape = Tape::new();
        let binding = bind(&mut tape, &store, |n| n.starts_with("enc0"));
        let a = binding.get("enc0/w").unwrap();
        let b = binding.get("enc1/w").unwrap();
        let s = tape.add(a, b).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
    }
}
