use super::Alignment;
use crate::error::{Error, Result};
use crate::rsste::{AttentionKind, RssteConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct GrtnConfig {
    /// Feature width of every hidden layer and of both RSSTEs.
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub epsilon_norm: f64,
    pub leaky_slope: f64,
    /// Stride of the first spatial conv, undone by the pixel shuffle. Fixed at 2.
    pub downsample: usize,
    pub alignment: Alignment,
    /// Displacement search radius at feature scale.
    pub search_radius: usize,
    pub gates_enabled: bool,
    pub attention_kind: AttentionKind,
    pub sigma_normalizer: f64,
    pub image_channels: usize,
}

impl GrtnConfig {
    pub fn toy() -> Self {
        GrtnConfig {
            channels: 32,
            heads: 2,
            window: 8,
            layers: 2,
            mlp_ratio: 2,
            epsilon_norm: 1e-12,
            leaky_slope: 0.1,
            downsample: 2,
            alignment: Alignment::GlobalShift,
            search_radius: 4,
            gates_enabled: true,
            attention_kind: AttentionKind::Euclidean,
            sigma_normalizer: 255.0,
            image_channels: 1,
        }
    }

    pub fn paper() -> Self {
        GrtnConfig {
            channels: 192,
            heads: 6,
            window: 16,
            layers: 3,
            ..Self::toy()
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        GrtnConfig {
            channels: 4,
            heads: 2,
            window: 2,
            layers: 2,
            search_radius: 1,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected toy, paper or tiny)"
            ))),
        }
    }

    pub fn rsste(&self) -> RssteConfig {
        RssteConfig {
            layers: self.layers,
            window: self.window,
            heads: self.heads,
            channels: self.channels,
            attention_kind: self.attention_kind,
            mlp_ratio: self.mlp_ratio,
            epsilon_norm: self.epsilon_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample != 2 {
            return Err(Error::Config(format!(
                "downsample must be 2, got {}",
                self.downsample
            )));
        }
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(Error::Config(format!(
                "channels must be a positive multiple of 4 (pixel shuffle by 2), got {}",
                self.channels
            )));
        }
        if self.image_channels == 0 {
            return Err(Error::Config("image_channels must be positive".into()));
        }
        if !(self.sigma_normalizer > 0.0) {
            return Err(Error::Config(format!(
                "sigma_normalizer must be positive, got {}",
                self.sigma_normalizer
            )));
        }
        if !(self.leaky_slope.is_finite()) {
            return Err(Error::Config("leaky_slope must be finite".into()));
        }
        self.rsste().validate()
    }
}

impl Default for GrtnConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["toy", "paper", "tiny"] {
            GrtnConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(GrtnConfig::preset("huge").is_err());
    }

    #[test]
    fn rejects_odd_channels() {
        let cfg = GrtnConfig {
            channels: 6,
            ..GrtnConfig::tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
