//! Modality-aware prompt learning: a per-layer library of visible and
//! infrared prompt blocks plus per-layer projection maps. Selection is a
//! pure lookup on the modality flag; the chosen block is projected row-wise
//! before joining the token sequence.

use crate::config::{Modality, ModelConfig};
use crate::error::{MipError, Result};
use crate::params::{identity_plus_noise, normal_init, zeros, ParamKind, ParamVisit};
use crate::tensor::{Arr, Tape, Var};
use rand_chacha::ChaCha8Rng;

pub struct LayerPrompts {
    pub vis: Arr,
    pub ir: Arr,
    pub proj_w: Arr,
    pub proj_b: Arr,
}

/// Learnable prompt blocks indexed by layer (1-based in the public API)
/// and modality, with one projection per layer.
pub struct ModalityPromptLibrary {
    pub layers: Vec<LayerPrompts>,
}

impl ModalityPromptLibrary {
    pub fn init(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let j = cfg.modality_prompt_len;
        let d = cfg.embed_dim;
        let layers = (0..cfg.num_layers)
            .map(|_| LayerPrompts {
                vis: normal_init(rng, j, d, crate::backbone::INIT_STD),
                ir: normal_init(rng, j, d, crate::backbone::INIT_STD),
                proj_w: identity_plus_noise(rng, d, crate::backbone::INIT_STD),
                proj_b: zeros(1, d),
            })
            .collect();
        Self { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_layer(&self, layer: usize) -> Result<usize> {
        if layer == 0 || layer > self.layers.len() {
            return Err(MipError::LayerIndex { index: layer, num_layers: self.layers.len() });
        }
        Ok(layer - 1)
    }

    /// Pure lookup of the raw prompt block for `(modality, layer)`;
    /// `layer` is 1-based. Returns the live learnable array.
    pub fn select_prompt(&self, modality: Modality, layer: usize) -> Result<&Arr> {
        let idx = self.check_layer(layer)?;
        Ok(match modality {
            Modality::Vis => &self.layers[idx].vis,
            Modality::Ir => &self.layers[idx].ir,
        })
    }

    /// Row-wise affine projection of a raw prompt block by the layer's map.
    pub fn project_prompt(&self, raw: &Arr, layer: usize) -> Result<Arr> {
        let idx = self.check_layer(layer)?;
        let lp = &self.layers[idx];
        if raw.ncols() != lp.proj_w.nrows() {
            return Err(MipError::Shape(format!(
                "prompt width {} does not match projection dim {}",
                raw.ncols(),
                lp.proj_w.nrows()
            )));
        }
        Ok(raw.dot(&lp.proj_w) + &lp.proj_b)
    }

    /// Tape version of select + project for one layer; gradients flow into
    /// the selected block and the projection only.
    pub fn bind_layer(
        &self,
        t: &mut Tape,
        modality: Modality,
        layer: usize,
    ) -> Result<MplLayerVars> {
        let idx = self.check_layer(layer)?;
        let lp = &self.layers[idx];
        let raw = match modality {
            Modality::Vis => t.leaf(lp.vis.clone()),
            Modality::Ir => t.leaf(lp.ir.clone()),
        };
        let w = t.leaf(lp.proj_w.clone());
        let b = t.leaf(lp.proj_b.clone());
        let projected = t.matmul(raw, w);
        let projected = t.add_row(projected, b);
        Ok(MplLayerVars { raw, w, b, projected, modality })
    }
}

pub struct MplLayerVars {
    pub raw: Var,
    pub w: Var,
    pub b: Var,
    pub projected: Var,
    pub modality: Modality,
}

impl ParamVisit for ModalityPromptLibrary {
    fn visit<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Arr, ParamKind)) {
        for (i, lp) in self.layers.iter_mut().enumerate() {
            let layer = i + 1;
            f(format!("{prefix}layer{layer}.vis"), &mut lp.vis, ParamKind::Learnable);
            f(format!("{prefix}layer{layer}.ir"), &mut lp.ir, ParamKind::Learnable);
            f(format!("{prefix}layer{layer}.proj.w"), &mut lp.proj_w, ParamKind::Learnable);
            f(format!("{prefix}layer{layer}.proj.b"), &mut lp.proj_b, ParamKind::Learnable);
        }
    }
}

/// Exact learnable-parameter count of the library:
/// N * (2 * j * D) prompt entries plus N * (D * D + D) projection entries.
pub fn mpl_param_count(cfg: &ModelConfig) -> usize {
    let n = cfg.num_layers;
    let j = cfg.modality_prompt_len;
    let d = cfg.embed_dim;
    n * (2 * j * d) + n * (d * d + d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            num_layers: 3,
            num_heads: 2,
            modality_prompt_len: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn select_returns_the_live_block() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lib = ModalityPromptLibrary::init(&mut rng, &cfg);
        let first_vis = lib.select_prompt(Modality::Vis, 1).unwrap();
        assert!(std::ptr::eq(first_vis, &lib.layers[0].vis));
        let last_ir = lib.select_prompt(Modality::Ir, cfg.num_layers).unwrap();
        assert!(std::ptr::eq(last_ir, &lib.layers[cfg.num_layers - 1].ir));
    }

    #[test]
    fn select_rejects_out_of_range_layers() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lib = ModalityPromptLibrary::init(&mut rng, &cfg);
        assert!(matches!(
            lib.select_prompt(Modality::Vis, 0),
            Err(MipError::LayerIndex { .. })
        ));
        assert!(matches!(
            lib.select_prompt(Modality::Vis, cfg.num_layers + 1),
            Err(MipError::LayerIndex { .. })
        ));
    }

    #[test]
    fn project_identity_map_is_noop() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lib = ModalityPromptLibrary::init(&mut rng, &cfg);
        let d = cfg.embed_dim;
        lib.layers[1].proj_w = Arr::eye(d);
        lib.layers[1].proj_b = Arr::zeros((1, d));
        let raw = lib.layers[1].vis.clone();
        let projected = lib.project_prompt(&raw, 2).unwrap();
        assert_eq!(projected, raw);
    }

    #[test]
    fn project_zero_input_yields_bias_rows() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut lib = ModalityPromptLibrary::init(&mut rng, &cfg);
        let d = cfg.embed_dim;
        lib.layers[0].proj_b = Arr::from_shape_fn((1, d), |(_, j)| 0.1 * j as f64);
        let zero = Arr::zeros((cfg.modality_prompt_len, d));
        let projected = lib.project_prompt(&zero, 1).unwrap();
        for row in projected.rows() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, 0.1 * j as f64);
            }
        }
    }

    #[test]
    fn project_matches_matmul_oracle() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lib = ModalityPromptLibrary::init(&mut rng, &cfg);
        let raw = normal_init(&mut rng, cfg.modality_prompt_len, cfg.embed_dim, 1.0);
        let projected = lib.project_prompt(&raw, 3).unwrap();
        let lp = &lib.layers[2];
        for i in 0..raw.nrows() {
            for jj in 0..raw.ncols() {
                let mut acc = lp.proj_b[[0, jj]];
                for k in 0..raw.ncols() {
                    acc += raw[[i, k]] * lp.proj_w[[k, jj]];
                }
                assert!((acc - projected[[i, jj]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn project_rejects_wrong_width() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lib = ModalityPromptLibrary::init(&mut rng, &cfg);
        let raw = Arr::zeros((2, cfg.embed_dim + 1));
        assert!(matches!(lib.project_prompt(&raw, 1), Err(MipError::Shape(_))));
    }

    #[test]
    fn param_count_formula_examples() {
        // N=4, j=16, D=64 -> 4*2048 + 4*4160 = 24832
        let cfg = ModelConfig {
            num_layers: 4,
            modality_prompt_len: 16,
            embed_dim: 64,
            ..ModelConfig::default()
        };
        assert_eq!(mpl_param_count(&cfg), 24_832);

        // j=0 -> projections only
        let cfg0 = ModelConfig { modality_prompt_len: 0, ..cfg.clone() };
        assert_eq!(mpl_param_count(&cfg0), 4 * (64 * 64 + 64));

        // transformer-base shape: N=12, j=16, D=768
        let big = ModelConfig {
            num_layers: 12,
            modality_prompt_len: 16,
            embed_dim: 768,
            ..ModelConfig::default()
        };
        // oracle: N*(2jD) + N*(D^2+D), evaluated independently
        let oracle = 12 * (2 * 16 * 768) + 12 * (768 * 768 + 768);
        assert_eq!(oracle, 294_912 + 7_087_104);
        assert_eq!(mpl_param_count(&big), oracle);
    }

    #[test]
    fn param_count_matches_enumeration() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut lib = ModalityPromptLibrary::init(&mut rng, &cfg);
        let counted = crate::params::count_learnable(&mut lib, "");
        assert_eq!(counted, mpl_param_count(&cfg));
    }
}
