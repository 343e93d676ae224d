use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::complexity::Granularity;

/// Patch/window/depth settings of one granularity branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GranularityConfig {
    pub level: Granularity,
    /// Patch side in pixels.
    pub patch: usize,
    /// Nominal window side in tokens; clamped to the token grid side.
    pub window: usize,
    /// Number of shared blocks this branch runs (the first `depth` of the
    /// shared stack).
    pub depth: usize,
    /// Branch embedding width.
    pub branch_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub unified_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    /// Indexed by `Granularity::index()`.
    pub levels: [GranularityConfig; 3],
}

impl ModelConfig {
    /// 224-pixel layout: patches 16/8/4, windows 28/14/7, depths 2/3/4,
    /// branch width 96, shared width 192, 4 heads.
    pub fn standard(classes: usize) -> Self {
        let level = |level, patch, window, depth| GranularityConfig { level, patch, window, depth, branch_dim: 96 };
        Self {
            image_size: 224,
            unified_dim: 192,
            heads: 4,
            mlp_ratio: 4,
            classes,
            levels: [
                level(Granularity::Coarse, 16, 28, 2),
                level(Granularity::Medium, 8, 14, 3),
                level(Granularity::Fine, 4, 7, 4),
            ],
        }
    }

    /// 32-pixel desk-scale layout: patches 16/8/4 give 2/4/8-token grids,
    /// windows 2/2/4, depths 1/2/2, width 8, one head, 3 classes.
    pub fn tiny() -> Self {
        let level = |level, patch, window, depth| GranularityConfig { level, patch, window, depth, branch_dim: 8 };
        Self {
            image_size: 32,
            unified_dim: 8,
            heads: 1,
            mlp_ratio: 2,
            classes: 3,
            levels: [
                level(Granularity::Coarse, 16, 2, 1),
                level(Granularity::Medium, 8, 2, 2),
                level(Granularity::Fine, 4, 4, 2),
            ],
        }
    }

    /// A model that only ever runs `g`: the other two branches get depth 0
    /// and are not allocated. Used to compare against independent backbones.
    pub fn single(&self, g: Granularity) -> SingleBranch<'_> {
        SingleBranch { config: self, level: g }
    }

    pub fn level(&self, g: Granularity) -> &GranularityConfig {
        &self.levels[g.index()]
    }

    /// Token grid side for `g`.
    pub fn grid_side(&self, g: Granularity) -> usize {
        self.image_size / self.level(g).patch
    }

    pub fn tokens(&self, g: Granularity) -> usize {
        self.grid_side(g).pow(2)
    }

    /// `min(window, grid side)`.
    pub fn effective_window(&self, g: Granularity) -> usize {
        self.level(g).window.min(self.grid_side(g))
    }

    /// Cyclic shift used by `block` when running `g`: half the window on odd
    /// blocks, none when one window already covers the grid.
    pub fn shift(&self, g: Granularity, block: usize) -> usize {
        let m = self.effective_window(g);
        if block % 2 == 1 && m < self.grid_side(g) {
            m / 2
        } else {
            0
        }
    }

    /// Number of shared blocks allocated (deepest branch).
    pub fn max_depth(&self) -> usize {
        self.levels.iter().map(|l| l.depth).max().unwrap_or(0)
    }

    pub fn head_dim(&self) -> usize {
        self.unified_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.unified_dim * self.mlp_ratio
    }

    /// Distinct effective window sides that block `block` must hold a
    /// relative-position table for.
    pub fn windows_for_block(&self, block: usize) -> Vec<usize> {
        let mut ws: Vec<usize> = Granularity::ALL
            .iter()
            .filter(|&&g| self.level(g).depth > block)
            .map(|&g| self.effective_window(g))
            .collect();
        ws.sort_unstable();
        ws.dedup();
        ws
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.classes == 0 || self.unified_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("classes, unified_dim, heads and mlp_ratio must be positive".into());
        }
        if self.unified_dim % self.heads != 0 {
            return bad(format!("unified_dim {} not divisible by {} heads", self.unified_dim, self.heads));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.level.index() != i {
                return bad(format!("level table slot {i} holds granularity {}", l.level));
            }
            if l.patch == 0 || l.window == 0 || l.branch_dim == 0 {
                return bad(format!("granularity {}: patch, window and branch_dim must be positive", l.level));
            }
            if self.image_size % l.patch != 0 {
                return bad(format!(
                    "granularity {}: patch {} does not divide image size {}",
                    l.level, l.patch, self.image_size
                ));
            }
            let side = self.image_size / l.patch;
            let m = l.window.min(side);
            if side % m != 0 {
                return bad(format!("granularity {}: window {m} does not divide token grid {side}", l.level));
            }
        }
        Ok(())
    }
}

/// View of a config restricted to one branch.
#[derive(Debug, Clone, Copy)]
pub struct SingleBranch<'a> {
    pub config: &'a ModelConfig,
    pub level: Granularity,
}

impl SingleBranch<'_> {
    pub fn to_config(self) -> ModelConfig {
        let mut c = self.config.clone();
        for l in c.levels.iter_mut() {
            if l.level != self.level {
                l.depth = 0;
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::standard(10).validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn standard_effective_windows_clamp_coarse() {
        let c = ModelConfig::standard(10);
        assert_eq!(c.grid_side(Granularity::Coarse), 14);
        assert_eq!(c.effective_window(Granularity::Coarse), 14);
        assert_eq!(c.effective_window(Granularity::Medium), 14);
        assert_eq!(c.effective_window(Granularity::Fine), 7);
        assert_eq!(c.shift(Granularity::Fine, 1), 3);
        assert_eq!(c.shift(Granularity::Fine, 2), 0);
        // single window: never shifted
        assert_eq!(c.shift(Granularity::Coarse, 1), 0);
    }

    #[test]
    fn rejects_bad_layouts() {
        let mut c = ModelConfig::tiny();
        c.levels[2].window = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.levels[0].patch = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
    }
}
