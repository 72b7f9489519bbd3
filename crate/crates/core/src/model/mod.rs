//! The normal-estimation network: a coordinate embedding, `num_blocks` of
//! enhanced graph convolution followed by a global-attention encoder, and a
//! per-point head whose output rows are normalized to unit length.
//!
//! Weights live in a [`ParamSet`] whose names and shapes are a pure function
//! of [`ModelConfig`]; [`ModelWeights::save`] writes them in the autodiff
//! checkpoint format next to a JSON sidecar holding the config.

mod config;
mod layers;

pub use config::{GraphFeatures, ModelConfig, Variant};
pub use layers::{
    csa_layer, encoder_layer, enhanced_graph_conv, local_attention_layer, mlp2,
    transformer_encoder_layer, CsaWeights, EncoderOutput, EncoderWeights, GraphConvWeights,
    NeighborLists, LAYER_NORM_EPS,
};

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{read_checkpoint, write_checkpoint, NdArray, ParamSet, Tape, Tensor};
use crate::geometry::Vec3;
use crate::{Error, Result};

/// Floor on the head output norm before row normalization.
pub const HEAD_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot(usize, usize),
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn dense(out: &mut Vec<Spec>, prefix: &str, w: &str, b: &str, fan_in: usize, fan_out: usize) {
    out.push(Spec {
        name: format!("{prefix}.{w}"),
        shape: vec![fan_in, fan_out],
        init: Init::Glorot(fan_in, fan_out),
    });
    out.push(Spec {
        name: format!("{prefix}.{b}"),
        shape: vec![fan_out],
        init: Init::Zeros,
    });
}

fn layer_norm(out: &mut Vec<Spec>, prefix: &str, f: usize) {
    out.push(Spec { name: format!("{prefix}.gamma"), shape: vec![f], init: Init::Ones });
    out.push(Spec { name: format!("{prefix}.beta"), shape: vec![f], init: Init::Zeros });
}

/// Every parameter of a model with this config, in storage order.
fn parameter_specs(config: &ModelConfig) -> Vec<Spec> {
    let f = config.feature_dim;
    let mut out = Vec::new();
    dense(&mut out, "embed", "w1", "b1", 3, f);
    dense(&mut out, "embed", "w2", "b2", f, f);
    let gf = config.graph_features;
    // The split first layer shares one fan-in: the full edge input width.
    let edge = gf.edge_width(f);
    for b in 0..config.num_blocks {
        if config.variant.has_graph_conv() {
            let p = format!("block{b}.gc");
            let mut block = |name: &str, rows: usize| {
                out.push(Spec {
                    name: format!("{p}.{name}"),
                    shape: vec![rows, f],
                    init: Init::Glorot(edge, f),
                })
            };
            if gf.delta_xyz {
                block("w_delta_xyz", 3);
            }
            if gf.xyz {
                block("w_xc", 3);
                block("w_xj", 3);
            }
            if gf.f {
                block("w_f", f);
            }
            if gf.delta_f {
                block("w_delta_f", f);
            }
            out.push(Spec { name: format!("{p}.b1"), shape: vec![f], init: Init::Zeros });
            dense(&mut out, &p, "w2", "b2", f, f);
        }
        if config.variant.has_encoder() {
            let p = format!("block{b}.attn");
            for (w, bias) in [("wq", "bq"), ("wv", "bv"), ("wo", "bo")] {
                dense(&mut out, &p, w, bias, f, f);
            }
            // No key bias: it shifts every score in a row by the same amount,
            // which softmax ignores, so its gradient is identically zero.
            out.push(Spec {
                name: format!("{p}.wk"),
                shape: vec![f, f],
                init: Init::Glorot(f, f),
            });
            layer_norm(&mut out, &format!("block{b}.ln1"), f);
            dense(&mut out, &format!("block{b}.ffn"), "w1", "b1", f, config.ffn_dim);
            dense(&mut out, &format!("block{b}.ffn"), "w2", "b2", config.ffn_dim, f);
            layer_norm(&mut out, &format!("block{b}.ln2"), f);
        }
        if config.variant == Variant::Csa {
            let p = format!("block{b}.csa");
            dense(&mut out, &p, "psi_w", "psi_b", f, f);
            dense(&mut out, &p, "phi_w1", "phi_b1", 2 * f, f);
            dense(&mut out, &p, "phi_w2", "phi_b2", f, f);
        }
    }
    dense(&mut out, "head", "w1", "b1", f, f);
    dense(&mut out, "head", "w2", "b2", f, 3);
    out
}

/// Parameter tensors registered on a tape, looked up by name.
#[derive(Clone, Copy)]
pub struct BoundParams<'a> {
    params: &'a ParamSet,
    leaves: &'a [Tensor],
}

impl<'a> BoundParams<'a> {
    /// `leaves[i]` must hold the i-th array of `params`.
    pub fn new(params: &'a ParamSet, leaves: &'a [Tensor]) -> Result<Self> {
        if params.len() != leaves.len() {
            return Err(Error::Shape(format!(
                "{} tape leaves for {} parameters",
                leaves.len(),
                params.len()
            )));
        }
        Ok(Self { params, leaves })
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.params
            .position(name)
            .map(|i| self.leaves[i])
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter {name}")))
    }

    fn opt(&self, name: &str) -> Option<Tensor> {
        self.params.position(name).map(|i| self.leaves[i])
    }

    pub fn graph_conv(&self, block: usize) -> Result<GraphConvWeights> {
        let p = format!("block{block}.gc");
        Ok(GraphConvWeights {
            w_delta_xyz: self.opt(&format!("{p}.w_delta_xyz")),
            w_xc: self.opt(&format!("{p}.w_xc")),
            w_xj: self.opt(&format!("{p}.w_xj")),
            w_f: self.opt(&format!("{p}.w_f")),
            w_delta_f: self.opt(&format!("{p}.w_delta_f")),
            b1: self.get(&format!("{p}.b1"))?,
            w2: self.get(&format!("{p}.w2"))?,
            b2: self.get(&format!("{p}.b2"))?,
        })
    }

    pub fn encoder(&self, block: usize) -> Result<EncoderWeights> {
        let g = |n: &str| self.get(&format!("block{block}.{n}"));
        Ok(EncoderWeights {
            wq: g("attn.wq")?,
            bq: g("attn.bq")?,
            wk: g("attn.wk")?,
            wv: g("attn.wv")?,
            bv: g("attn.bv")?,
            wo: g("attn.wo")?,
            bo: g("attn.bo")?,
            ln1_gamma: g("ln1.gamma")?,
            ln1_beta: g("ln1.beta")?,
            ffn_w1: g("ffn.w1")?,
            ffn_b1: g("ffn.b1")?,
            ffn_w2: g("ffn.w2")?,
            ffn_b2: g("ffn.b2")?,
            ln2_gamma: g("ln2.gamma")?,
            ln2_beta: g("ln2.beta")?,
        })
    }

    pub fn csa(&self, block: usize) -> Result<CsaWeights> {
        let g = |n: &str| self.get(&format!("block{block}.csa.{n}"));
        Ok(CsaWeights {
            psi_w: g("psi_w")?,
            psi_b: g("psi_b")?,
            phi_w1: g("phi_w1")?,
            phi_b1: g("phi_b1")?,
            phi_w2: g("phi_w2")?,
            phi_b2: g("phi_b2")?,
        })
    }
}

/// Runs the network on a canonical patch, returning `k×3` unit normals.
///
/// Rows follow the patch order. The CSA variant additionally assumes rows are
/// sorted by distance from the query (as produced by patch extraction), so
/// that leading rows form nested neighborhoods.
pub fn forward(
    tape: &mut Tape,
    config: &ModelConfig,
    params: BoundParams<'_>,
    positions: &[Vec3],
) -> Result<Tensor> {
    let k = positions.len();
    if k < config.min_patch_size() || k == 0 {
        return Err(Error::InvalidInput(format!(
            "patch of {k} points is smaller than the model minimum {}",
            config.min_patch_size().max(1)
        )));
    }
    let x = tape.constant(vec![k, 3], positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect())?;
    let mut h = mlp2(
        tape,
        x,
        params.get("embed.w1")?,
        params.get("embed.b1")?,
        params.get("embed.w2")?,
        params.get("embed.b2")?,
    )?;
    let graph = if config.variant.has_graph_conv() {
        Some(NeighborLists::knn(positions, config.graph_k)?)
    } else {
        None
    };
    let local = if config.variant == Variant::LocalAttention {
        Some(NeighborLists::knn(positions, config.local_attention_k)?)
    } else {
        None
    };
    let scales = config.csa_scales(k);
    for b in 0..config.num_blocks {
        if let Some(graph) = &graph {
            h = enhanced_graph_conv(tape, &params.graph_conv(b)?, x, h, graph)?;
        }
        h = match config.variant {
            Variant::Full | Variant::NoGraphConv => {
                transformer_encoder_layer(tape, &params.encoder(b)?, h, config.num_heads)?
            }
            Variant::LocalAttention => {
                let local = local.as_ref().expect("built for this variant");
                local_attention_layer(tape, &params.encoder(b)?, h, config.num_heads, local)?
            }
            Variant::NoTransformer => h,
            Variant::Csa => {
                let large: Vec<usize> = (0..scales[b]).collect();
                let small: Vec<usize> = (0..scales[b + 1]).collect();
                let fused = csa_layer(tape, &params.csa(b)?, h, &large, &small)?;
                if small.len() < k {
                    let rest = tape.gather_rows(h, (small.len()..k).collect::<Vec<_>>().into())?;
                    tape.concat_rows(&[fused, rest])?
                } else {
                    fused
                }
            }
        };
    }
    let out = mlp2(
        tape,
        h,
        params.get("head.w1")?,
        params.get("head.b1")?,
        params.get("head.w2")?,
        params.get("head.b2")?,
    )?;
    tape.normalize_rows(out, HEAD_NORM_FLOOR)
}

/// Mean over rows of `‖n̂ᵢ × nᵢ‖`, the sine of the angle between prediction
/// and target. Insensitive to the sign of either.
pub fn sin_loss(tape: &mut Tape, predicted: Tensor, ground_truth: &[Vec3]) -> Result<Tensor> {
    let target: Vec<f64> = ground_truth.iter().flat_map(|n| [n.x, n.y, n.z]).collect();
    let per_point = tape.cross_norm_rows(predicted, &target)?;
    tape.mean(per_point)
}

/// A config plus the parameter values it determines.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    params: ParamSet,
}

impl ModelWeights {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for spec in parameter_specs(&config) {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Glorot(fan_in, fan_out) => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            params.insert(spec.name, NdArray::new(spec.shape, data)?)?;
        }
        Ok(Self { config, params })
    }

    /// Wraps existing values, checking names and shapes against `config`.
    /// Entries not belonging to the model (e.g. optimizer state) are ignored.
    pub fn from_params(config: ModelConfig, available: &ParamSet) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for spec in parameter_specs(&config) {
            let array = available
                .get(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", spec.name)))?;
            if array.shape != spec.shape {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?}, config expects {:?}",
                    spec.name, array.shape, spec.shape
                )));
            }
            params.insert(spec.name, array.clone())?;
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Registers every parameter on `tape`, as trainable leaves or as
    /// constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Tensor>> {
        self.params
            .arrays()
            .map(|a| {
                if trainable {
                    tape.param(a)
                } else {
                    tape.constant(a.shape.clone(), a.data.clone())
                }
            })
            .collect()
    }

    /// Inference on one canonical patch.
    pub fn predict(&self, positions: &[Vec3]) -> Result<Vec<Vec3>> {
        let mut tape = Tape::new();
        let leaves = self.register(&mut tape, false)?;
        let out = forward(&mut tape, &self.config, BoundParams::new(&self.params, &leaves)?, positions)?;
        Ok(tape
            .value(out)
            .chunks_exact(3)
            .map(|r| Vec3::new(r[0], r[1], r[2]))
            .collect())
    }

    /// Writes the checkpoint at `path` and the config to
    /// [`sidecar_path`]`(path)`. `extra` entries (e.g. optimizer state) are
    /// appended to the checkpoint.
    pub fn save(&self, path: &Path, extra: &[(String, NdArray)]) -> Result<()> {
        let mut entries = self.params.entries().to_vec();
        entries.extend_from_slice(extra);
        write_checkpoint(path, &entries)?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config)
            .map_err(|e| Error::Checkpoint(format!("serializing config: {e}")))?;
        fs::write(&sidecar, json + "\n").map_err(|e| Error::io(&sidecar, e))
    }

    /// Loads a checkpoint and its sidecar. Returns the model and every
    /// checkpoint entry that is not a model parameter.
    pub fn load(path: &Path) -> Result<(Self, Vec<(String, NdArray)>)> {
        let sidecar = sidecar_path(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let config: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", sidecar.display())))?;
        let entries = read_checkpoint(path)?;
        let all = ParamSet::from_entries(entries.clone())?;
        let model = Self::from_params(config, &all)?;
        let extra = entries
            .into_iter()
            .filter(|(name, _)| model.params.position(name).is_none())
            .collect();
        Ok((model, extra))
    }
}

/// `<checkpoint>.json`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}
