//! The trainable bundle: feature extractor plus coarse and fine networks.

use ibr_tensor::{AdamConfig, AdamState, ParamStore, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{fnv1a64, Checkpoint, CheckpointError};
use crate::feature_net::{FeatureNet, FeatureNetConfig};
use crate::model::{IbrNet, ModelConfig};

const CONFIG_RECORD: &str = "meta.config";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub feature: FeatureNetConfig,
    pub model: ModelConfig,
}

impl NetworkConfig {
    /// Hash of the canonical JSON form; checkpoints carry it to catch
    /// architecture mismatches.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint fingerprint {found:016x} does not match configuration {expected:016x}")]
    Fingerprint { found: u64, expected: u64 },
    #[error("checkpoint parameter {name} has shape {found:?}, expected {expected:?}")]
    Shape { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("bad embedded config: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct Networks<T> {
    pub config: NetworkConfig,
    pub store: ParamStore<T>,
    pub feature: FeatureNet,
    pub coarse: IbrNet,
    pub fine: IbrNet,
}

impl<T: Real> Networks<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut feature_cfg = config.feature.clone();
        feature_cfg.d = config.model.d_feature;
        let feature = FeatureNet::new(&mut store, "feature", feature_cfg, &mut rng);
        let coarse = IbrNet::new(&mut store, "coarse", config.model.clone(), &mut rng);
        let fine = IbrNet::new(&mut store, "fine", config.model.clone(), &mut rng);
        Networks { config, store, feature, coarse, fine }
    }

    pub fn fingerprint(&self) -> u64 {
        self.config.fingerprint()
    }

    pub fn cast<U: Real>(&self) -> Networks<U> {
        Networks {
            config: self.config.clone(),
            store: self.store.cast(),
            feature: self.feature.clone(),
            coarse: self.coarse.clone(),
            fine: self.fine.clone(),
        }
    }

    pub fn count(&self, prefix: &str) -> usize {
        self.store.count_scalars(prefix)
    }

    /// Parameters (and optionally Adam moments) as a checkpoint.
    pub fn to_checkpoint(&self, step: u64, adam: Option<&AdamState<T>>) -> Checkpoint {
        let mut ck = Checkpoint::new(step, self.fingerprint());
        ck.push_bytes(CONFIG_RECORD, serde_json::to_vec(&self.config).expect("config serializes"));
        for p in self.store.params() {
            ck.push_tensor(p.name.clone(), p.value.cast());
        }
        if let Some(a) = adam {
            ck.push_bytes("adam.t", a.t.to_le_bytes().to_vec());
            for (i, p) in self.store.params().iter().enumerate() {
                let shape = p.value.shape().to_vec();
                let to_f32 = |v: &[T]| v.iter().map(|x| x.to_f32().unwrap()).collect::<Vec<f32>>();
                ck.push_tensor(format!("adam.m.{}", p.name), Tensor::new(shape.clone(), to_f32(&a.m[i])).expect("sized"));
                ck.push_tensor(format!("adam.v.{}", p.name), Tensor::new(shape, to_f32(&a.v[i])).expect("sized"));
            }
        }
        ck
    }

    /// Rebuilds networks from the configuration embedded in a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<AdamState<T>>), NetworkError> {
        let config: NetworkConfig =
            serde_json::from_slice(ck.bytes(CONFIG_RECORD)?).map_err(|e| NetworkError::Config(e.to_string()))?;
        if config.fingerprint() != ck.fingerprint {
            return Err(NetworkError::Fingerprint { found: ck.fingerprint, expected: config.fingerprint() });
        }
        let mut nets = Networks::new(config, 0);
        nets.load_params(ck)?;
        let adam = if ck.get("adam.t").is_some() {
            let mut state = AdamState::new(&nets.store, AdamConfig::default());
            let raw: [u8; 8] =
                ck.bytes("adam.t")?.try_into().map_err(|_| NetworkError::Config("adam.t must be 8 bytes".into()))?;
            state.t = u64::from_le_bytes(raw);
            for (i, p) in nets.store.params().iter().enumerate() {
                state.m[i] = checked::<T>(ck, &format!("adam.m.{}", p.name), p.value.shape())?.into_data();
                state.v[i] = checked::<T>(ck, &format!("adam.v.{}", p.name), p.value.shape())?.into_data();
            }
            Some(state)
        } else {
            None
        };
        Ok((nets, adam))
    }

    fn load_params(&mut self, ck: &Checkpoint) -> Result<(), NetworkError> {
        for p in self.store.params_mut() {
            p.value = checked(ck, &p.name, p.value.shape())?;
        }
        Ok(())
    }
}

fn checked<T: Real>(ck: &Checkpoint, name: &str, shape: &[usize]) -> Result<Tensor<T>, NetworkError> {
    let t = ck.tensor(name)?;
    if t.shape() != shape {
        return Err(NetworkError::Shape { name: name.to_string(), found: t.shape().to_vec(), expected: shape.to_vec() });
    }
    Ok(t.cast())
}
