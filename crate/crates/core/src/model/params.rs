use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::complexity::Granularity;
use crate::tensor::{ParamStore, StoreManifest, Tensor};

/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;

pub fn embed_name(g: Granularity, part: &str) -> String {
    format!("embed.g{}.{part}", g.level())
}

pub fn adapter_in_name(g: Granularity, part: &str) -> String {
    format!("adapter_in.g{}.{part}", g.level())
}

pub fn adapter_out_name(g: Granularity, part: &str) -> String {
    format!("adapter_out.g{}.{part}", g.level())
}

pub fn head_name(g: Granularity, part: &str) -> String {
    format!("head.g{}.{part}", g.level())
}

pub fn block_name(block: usize, part: &str) -> String {
    format!("blocks.{block}.{part}")
}

pub fn rel_bias_name(block: usize, window: usize) -> String {
    block_name(block, &format!("attn.rel_bias.w{window}"))
}

/// Parameters excluded from weight decay: biases, norm affines and
/// relative-position tables.
pub fn is_no_decay(name: &str) -> bool {
    name.ends_with(".bias") || name.contains(".norm") || name.contains("rel_bias")
}

/// Model configuration plus every named parameter. Shared blocks exist once;
/// embeddings, adapters and heads exist per granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    pub seed: u64,
    pub std: f64,
    /// Zero the attention and MLP output projections so every block starts
    /// as the identity.
    pub zero_residual: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self { seed: 0, std: INIT_STD, zero_residual: false }
    }
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::init_with(config, InitOptions { seed, ..Default::default() })
    }

    pub fn init_with(config: ModelConfig, opts: InitOptions) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let normal = Normal::new(0.0, opts.std).expect("positive std");
        let mut trunc = |shape: &[usize]| {
            Tensor::from_fn(shape, |_| loop {
                let v: f64 = normal.sample(&mut rng);
                if v.abs() <= 2.0 * opts.std {
                    break v;
                }
            })
        };
        let mut store = ParamStore::new();
        let d = config.unified_dim;
        let heads = config.heads;
        for g in Granularity::ALL {
            let lvl = *config.level(g);
            if lvl.depth == 0 {
                continue;
            }
            let patch_in = lvl.patch * lvl.patch * 3;
            let dg = lvl.branch_dim;
            store.insert(&embed_name(g, "weight"), trunc(&[patch_in, dg]))?;
            store.insert(&embed_name(g, "bias"), Tensor::zeros(&[dg]))?;
            store.insert(&adapter_in_name(g, "weight"), trunc(&[dg, d]))?;
            store.insert(&adapter_in_name(g, "bias"), Tensor::zeros(&[d]))?;
            store.insert(&adapter_out_name(g, "weight"), trunc(&[d, dg]))?;
            store.insert(&adapter_out_name(g, "bias"), Tensor::zeros(&[dg]))?;
            store.insert(&head_name(g, "weight"), trunc(&[dg, config.classes]))?;
            store.insert(&head_name(g, "bias"), Tensor::zeros(&[config.classes]))?;
        }
        let hidden = config.hidden_dim();
        for b in 0..config.max_depth() {
            let out_init = |t: Tensor| if opts.zero_residual { Tensor::zeros(t.shape()) } else { t };
            store.insert(&block_name(b, "norm1.gamma"), Tensor::full(&[d], 1.0))?;
            store.insert(&block_name(b, "norm1.beta"), Tensor::zeros(&[d]))?;
            store.insert(&block_name(b, "attn.qkv.weight"), trunc(&[d, 3 * d]))?;
            store.insert(&block_name(b, "attn.qkv.bias"), Tensor::zeros(&[3 * d]))?;
            store.insert(&block_name(b, "attn.proj.weight"), out_init(trunc(&[d, d])))?;
            store.insert(&block_name(b, "attn.proj.bias"), Tensor::zeros(&[d]))?;
            for m in config.windows_for_block(b) {
                let rows = (2 * m - 1).pow(2);
                store.insert(&rel_bias_name(b, m), Tensor::zeros(&[rows, heads]))?;
            }
            store.insert(&block_name(b, "norm2.gamma"), Tensor::full(&[d], 1.0))?;
            store.insert(&block_name(b, "norm2.beta"), Tensor::zeros(&[d]))?;
            store.insert(&block_name(b, "mlp.fc1.weight"), trunc(&[d, hidden]))?;
            store.insert(&block_name(b, "mlp.fc1.bias"), Tensor::zeros(&[hidden]))?;
            store.insert(&block_name(b, "mlp.fc2.weight"), out_init(trunc(&[hidden, d])))?;
            store.insert(&block_name(b, "mlp.fc2.bias"), Tensor::zeros(&[d]))?;
        }
        store.round_to_f32();
        Ok(Self { config, store })
    }

    /// Add `N(0, std)` noise to every parameter, biases and tables included.
    pub fn perturb(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("positive std");
        for (_, v, _) in self.store.iter_mut() {
            v.data_mut().iter_mut().for_each(|x| *x += normal.sample(&mut rng));
        }
    }

    /// Shared-block parameter count.
    pub fn shared_scalars(&self) -> usize {
        self.store
            .iter()
            .filter(|(n, _, _)| n.starts_with("blocks."))
            .map(|(_, v, _)| v.numel())
            .sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    /// Write `<stem>.json` (config + tensor manifest) and `<stem>.bin`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf), ModelError> {
        let (json_path, bin_path) = checkpoint_paths(stem.as_ref());
        let (params, blob) = self.store.to_manifest_and_blob();
        let header = CheckpointHeader { config: self.config.clone(), params };
        let text = serde_json::to_string_pretty(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        fs::write(&json_path, text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", json_path.display())))?;
        fs::write(&bin_path, blob).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", bin_path.display())))?;
        Ok((json_path, bin_path))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self, ModelError> {
        let (json_path, bin_path) = checkpoint_paths(stem.as_ref());
        let text = fs::read_to_string(&json_path)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", json_path.display())))?;
        let header: CheckpointHeader =
            serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", json_path.display())))?;
        header.config.validate()?;
        let blob = fs::read(&bin_path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", bin_path.display())))?;
        let store = ParamStore::from_manifest_and_blob(&header.params, &blob)?;
        let expected = Self::init(header.config.clone(), 0)?;
        for (name, v, _) in expected.store.iter() {
            match store.get(name) {
                Some(t) if t.shape() == v.shape() => {}
                Some(t) => {
                    return Err(ModelError::Checkpoint(format!(
                        "{name}: shape {:?}, config expects {:?}",
                        t.shape(),
                        v.shape()
                    )))
                }
                None => return Err(ModelError::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config: header.config, store })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    params: StoreManifest,
}

/// `foo` or `foo.json` -> (`foo.json`, `foo.bin`).
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let base = if stem.extension().is_some_and(|e| e == "json" || e == "bin") {
        stem.with_extension("")
    } else {
        stem.to_path_buf()
    };
    let with = |ext: &str| {
        let mut s = base.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".json"), with(".bin"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_tables_have_expected_rows() {
        let p = ModelParams::init(ModelConfig::tiny(), 0).unwrap();
        assert_eq!(p.store.get(&rel_bias_name(0, 2)).unwrap().shape(), &[9, 1]);
        assert_eq!(p.store.get(&rel_bias_name(0, 4)).unwrap().shape(), &[49, 1]);
        let standard = ModelParams::init(ModelConfig::standard(10), 0).unwrap();
        assert_eq!(standard.store.get(&rel_bias_name(0, 7)).unwrap().shape(), &[169, 4]);
        assert_eq!(standard.store.get(&rel_bias_name(0, 14)).unwrap().shape(), &[729, 4]);
        // block 3 is only used by the fine branch
        assert!(!standard.store.contains(&rel_bias_name(3, 14)));
    }

    #[test]
    fn init_values_are_f32_exact_and_truncated() {
        let p = ModelParams::init(ModelConfig::tiny(), 3).unwrap();
        for (name, v, _) in p.store.iter() {
            for &x in v.data() {
                assert_eq!(x, x as f32 as f64, "{name}");
                if name.ends_with("weight") {
                    assert!(x.abs() <= 2.0 * INIT_STD + 1e-9);
                }
            }
        }
    }

    #[test]
    fn no_decay_classification() {
        assert!(is_no_decay("blocks.0.attn.qkv.bias"));
        assert!(is_no_decay("blocks.1.norm2.gamma"));
        assert!(is_no_decay("blocks.0.attn.rel_bias.w7"));
        assert!(!is_no_decay("head.g1.weight"));
    }

    #[test]
    fn checkpoint_path_forms() {
        let (j, b) = checkpoint_paths(Path::new("out/model.json"));
        assert_eq!((j.to_str().unwrap(), b.to_str().unwrap()), ("out/model.json", "out/model.bin"));
        let (j, _) = checkpoint_paths(Path::new("out/model"));
        assert_eq!(j.to_str().unwrap(), "out/model.json");
    }
}
