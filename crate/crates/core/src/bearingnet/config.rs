use serde::{Deserialize, Serialize};

use super::ModelError;

/// Which submodules take part in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub use_gluf: bool,
    pub use_rce: bool,
    pub use_psg: bool,
    pub use_ca: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { use_gluf: true, use_rce: true, use_psg: true, use_ca: true }
    }
}

impl Toggles {
    /// The five rows of the ablation grid: full model, then each submodule
    /// disabled in turn.
    pub fn ablation_grid() -> [(&'static str, Toggles); 5] {
        let full = Toggles::default();
        [
            ("full", full),
            ("no-gluf", Toggles { use_gluf: false, ..full }),
            ("no-rce", Toggles { use_rce: false, ..full }),
            ("no-psg", Toggles { use_psg: false, ..full }),
            ("no-ca", Toggles { use_ca: false, ..full }),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Cluster count.
    pub k: usize,
    /// Feature channels.
    pub d: usize,
    /// Side of the square UAV patch in pixels.
    pub patch_px: usize,
    /// Output channels of each backbone stage; the last equals `d`.
    pub backbone_widths: Vec<usize>,
    pub backbone_kernel: usize,
    pub backbone_stride: usize,
    /// Starts at 2 and ends at `k·d`.
    pub rce_dims: Vec<usize>,
    /// Starts at `2·k·d + 2` and ends at 2; shared by both heads.
    pub head_dims: Vec<usize>,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            k: 4,
            d: 32,
            patch_px: 64,
            backbone_widths: vec![8, 16, 32],
            backbone_kernel: 2,
            backbone_stride: 2,
            rce_dims: vec![2, 32, 64, 128],
            head_dims: vec![258, 128, 64, 2],
            toggles: Toggles::default(),
        }
    }

    /// Full-size dimensions: K = 4, D = 256, 256 px patches.
    pub fn paper_scale() -> Self {
        Self {
            k: 4,
            d: 256,
            patch_px: 256,
            backbone_widths: vec![64, 128, 256],
            backbone_kernel: 2,
            backbone_stride: 2,
            rce_dims: vec![2, 64, 256, 1024],
            head_dims: vec![2050, 1024, 256, 64, 2],
            toggles: Toggles::default(),
        }
    }

    /// Small dimensions for fast tests; `d` must be even.
    pub fn tiny(k: usize, d: usize, patch_px: usize) -> Self {
        let kd = k * d;
        Self {
            k,
            d,
            patch_px,
            backbone_widths: vec![4, d],
            backbone_kernel: 2,
            backbone_stride: 2,
            rce_dims: vec![2, 8, kd],
            head_dims: vec![2 * kd + 2, 8, 2],
            toggles: Toggles::default(),
        }
    }

    pub fn kd(&self) -> usize {
        self.k * self.d
    }

    pub fn phi_len(&self) -> usize {
        2 * self.kd() + 2
    }

    /// Spatial side of the backbone output for an input of `side` pixels.
    pub fn feature_side(&self, side: usize) -> Option<usize> {
        let mut s = side;
        for _ in &self.backbone_widths {
            if s < self.backbone_kernel {
                return None;
            }
            s = (s - self.backbone_kernel) / self.backbone_stride + 1;
        }
        Some(s)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.k == 0 || self.d == 0 || !self.d.is_multiple_of(2) {
            return bad(format!("k must be positive and d positive and even (k={}, d={})", self.k, self.d));
        }
        if self.backbone_widths.last() != Some(&self.d) || self.backbone_widths.contains(&0) {
            return bad(format!("backbone widths {:?} must be positive and end at d={}", self.backbone_widths, self.d));
        }
        if self.backbone_kernel == 0 || self.backbone_stride == 0 {
            return bad("backbone kernel and stride must be positive".into());
        }
        if self.feature_side(self.patch_px).is_none() {
            return bad(format!("patch of {} px is too small for the backbone", self.patch_px));
        }
        if self.rce_dims.len() < 2 || self.rce_dims[0] != 2 || *self.rce_dims.last().unwrap() != self.kd() {
            return bad(format!("rce dims {:?} must run from 2 to k·d={}", self.rce_dims, self.kd()));
        }
        if self.head_dims.len() < 2 || self.head_dims[0] != self.phi_len() || *self.head_dims.last().unwrap() != 2 {
            return bad(format!("head dims {:?} must run from 2·k·d+2={} to 2", self.head_dims, self.phi_len()));
        }
        if self.rce_dims.contains(&0) || self.head_dims.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_consistent() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny(2, 4, 8).validate().unwrap();
        let p = ModelConfig::paper_scale();
        p.validate().unwrap();
        assert_eq!(p.phi_len(), 2050);
        assert_eq!(p.head_dims, vec![2050, 1024, 256, 64, 2]);
        assert_eq!(ModelConfig::desk().feature_side(64), Some(8));
    }

    #[test]
    fn inconsistent_dims_are_rejected() {
        let mut c = ModelConfig::desk();
        c.head_dims[0] = 257;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.rce_dims = vec![3, 128];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.patch_px = 4;
        assert!(c.validate().is_err());
    }
}
