use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture variant. Everything except `Full` exists for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Graph convolution followed by a global-attention encoder per block.
    Full,
    /// Graph convolution only.
    NoTransformer,
    /// Global-attention encoder only; coordinates enter through the embedding.
    NoGraphConv,
    /// Encoder attention restricted to each point's nearest neighbors.
    LocalAttention,
    /// Cascaded scale aggregation in place of the encoder.
    Csa,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoTransformer,
        Variant::NoGraphConv,
        Variant::LocalAttention,
        Variant::Csa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTransformer => "no_transformer",
            Variant::NoGraphConv => "no_graph_conv",
            Variant::LocalAttention => "local_attention",
            Variant::Csa => "csa",
        }
    }

    pub fn has_graph_conv(self) -> bool {
        self != Variant::NoGraphConv
    }

    pub fn has_encoder(self) -> bool {
        matches!(self, Variant::Full | Variant::NoGraphConv | Variant::LocalAttention)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_transformer" => Ok(Variant::NoTransformer),
            "no_graph_conv" | "no_gc" => Ok(Variant::NoGraphConv),
            "local_attention" | "local" => Ok(Variant::LocalAttention),
            "csa" => Ok(Variant::Csa),
            other => Err(Error::InvalidInput(format!("unknown model variant '{other}'"))),
        }
    }
}

/// Which edge inputs the graph convolution sees.
///
/// `xyz` contributes both `x_c` and `x_j`; `delta_xyz` is `x_j − x_c`;
/// `f` is `f_j`; `delta_f` is `f_j − f_c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphFeatures {
    pub xyz: bool,
    pub delta_xyz: bool,
    pub f: bool,
    pub delta_f: bool,
}

impl GraphFeatures {
    pub const ALL: GraphFeatures = GraphFeatures {
        xyz: true,
        delta_xyz: true,
        f: true,
        delta_f: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.xyz || self.delta_xyz || self.f || self.delta_f)
    }

    /// Width of the concatenated edge input for feature width `f`.
    pub fn edge_width(&self, feature_dim: usize) -> usize {
        6 * self.xyz as usize
            + 3 * self.delta_xyz as usize
            + feature_dim * (self.f as usize + self.delta_f as usize)
    }
}

impl Default for GraphFeatures {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for GraphFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            (self.xyz, "xyz"),
            (self.delta_xyz, "delta_xyz"),
            (self.f, "f"),
            (self.delta_f, "delta_f"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, name)| *name)
        .collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for GraphFeatures {
    type Err = Error;

    /// Parses `+`-separated names, e.g. `xyz+delta_xyz+f`.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = GraphFeatures {
            xyz: false,
            delta_xyz: false,
            f: false,
            delta_f: false,
        };
        for part in s.split('+').map(str::trim) {
            let slot = match part {
                "xyz" => &mut out.xyz,
                "delta_xyz" | "dxyz" => &mut out.delta_xyz,
                "f" => &mut out.f,
                "delta_f" | "df" => &mut out.delta_f,
                other => {
                    return Err(Error::InvalidInput(format!("unknown graph feature '{other}'")))
                }
            };
            *slot = true;
        }
        Ok(out)
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub feature_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Neighbors per graph convolution, the point itself included.
    pub graph_k: usize,
    pub variant: Variant,
    /// Neighbors attended to by the local-attention variant.
    pub local_attention_k: usize,
    pub graph_features: GraphFeatures,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 3,
            feature_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            graph_k: 16,
            variant: Variant::Full,
            local_attention_k: 16,
            graph_features: GraphFeatures::ALL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.num_blocks == 0 {
            return bad("num_blocks must be at least 1".into());
        }
        if self.feature_dim == 0 || self.ffn_dim == 0 || self.num_heads == 0 {
            return bad("feature_dim, ffn_dim and num_heads must be positive".into());
        }
        if self.feature_dim % self.num_heads != 0 {
            return bad(format!(
                "feature_dim {} is not divisible by num_heads {}",
                self.feature_dim, self.num_heads
            ));
        }
        if self.graph_k < 2 || self.local_attention_k < 2 {
            return bad("graph_k and local_attention_k must be at least 2".into());
        }
        if self.graph_features.is_empty() {
            return bad("graph_features selects no inputs".into());
        }
        Ok(())
    }

    /// Smallest patch the model accepts.
    pub fn min_patch_size(&self) -> usize {
        match self.variant {
            Variant::NoGraphConv => 1,
            Variant::LocalAttention => self.graph_k.max(self.local_attention_k),
            _ => self.graph_k,
        }
    }

    /// Nested scale sizes used by the CSA variant for a patch of `k` points:
    /// `s_b = max(k >> b, graph_k)` for `b = 0..=num_blocks`.
    pub fn csa_scales(&self, k: usize) -> Vec<usize> {
        (0..=self.num_blocks)
            .map(|b| (k >> b.min(63)).max(self.graph_k).min(k))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.as_str()));
        }
        assert_eq!("no_gc".parse::<Variant>().unwrap(), Variant::NoGraphConv);
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn graph_feature_strings() {
        let g: GraphFeatures = "xyz+delta_xyz+f".parse().unwrap();
        assert!(g.xyz && g.delta_xyz && g.f && !g.delta_f);
        assert_eq!(g.to_string(), "xyz+delta_xyz+f");
        assert_eq!(g.edge_width(8), 6 + 3 + 8);
        assert_eq!(GraphFeatures::ALL.edge_width(8), 25);
        assert!("xyz+q".parse::<GraphFeatures>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = ModelConfig { feature_dim: 30, ..Default::default() };
        assert!(c.validate().is_err());
        c.feature_dim = 32;
        c.graph_k = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn csa_scales_are_nested() {
        let c = ModelConfig { num_blocks: 3, graph_k: 16, ..Default::default() };
        assert_eq!(c.csa_scales(128), vec![128, 64, 32, 16]);
        assert_eq!(c.csa_scales(40), vec![40, 20, 16, 16]);
    }
}
