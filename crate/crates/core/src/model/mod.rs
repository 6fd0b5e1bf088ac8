//! The three-headed output contract on top of a backbone.
//!
//! A backbone produces one raw vector of length `k + k' + 1`. The first `k`
//! entries are classification logits, the next `k'` are overclustering
//! logits, and the last is the ambiguity logit.

mod checkpoint;
pub mod nn;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{argmax, sigmoid, softmax};

pub use checkpoint::Checkpoint;
pub use nn::{Layer, Network, NetworkBuilder, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub k: usize,
    pub k_prime: usize,
    pub embedding_dim: usize,
}

impl HeadConfig {
    /// `k' = 3k` and a 128-dimensional embedding.
    pub fn with_classes(k: usize) -> Self {
        HeadConfig {
            k,
            k_prime: 3 * k,
            embedding_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("k must be >= 2, got {}", self.k)));
        }
        if self.k_prime <= self.k {
            return Err(Error::InvalidConfig(format!(
                "k' ({}) must exceed k ({})",
                self.k_prime, self.k
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::InvalidConfig("embedding_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn raw_len(&self) -> usize {
        self.k + self.k_prime + 1
    }

    /// Index of the ambiguity logit in the raw vector.
    pub fn ambiguity_index(&self) -> usize {
        self.k + self.k_prime
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutputs {
    pub p_n: Vec<f64>,
    pub p_o: Vec<f64>,
    pub p_a: f64,
    pub embedding: Vec<f64>,
    pub logits_n: Vec<f64>,
    pub logits_o: Vec<f64>,
    pub logit_a: f64,
}

/// Softmax over the class block, softmax over the cluster block, sigmoid on
/// the ambiguity unit.
pub fn split_head(raw: &[f64], cfg: &HeadConfig) -> Result<ModelOutputs> {
    if raw.len() != cfg.raw_len() {
        return Err(Error::LengthMismatch {
            expected: cfg.raw_len(),
            actual: raw.len(),
        });
    }
    let logits_n = raw[..cfg.k].to_vec();
    let logits_o = raw[cfg.k..cfg.k + cfg.k_prime].to_vec();
    let logit_a = raw[cfg.ambiguity_index()];
    Ok(ModelOutputs {
        p_n: softmax(&logits_n),
        p_o: softmax(&logits_o),
        p_a: sigmoid(logit_a),
        embedding: Vec::new(),
        logits_n,
        logits_o,
        logit_a,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Route {
    Certain { class: usize },
    Fuzzy { cluster: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(flatten)]
    pub route: Route,
    pub p_a: f64,
}

impl Prediction {
    pub fn is_fuzzy(&self) -> bool {
        matches!(self.route, Route::Fuzzy { .. })
    }
}

/// Certain (classification) when `p_a < 0.5`, fuzzy (overclustering) otherwise.
pub fn route_prediction(outputs: &ModelOutputs) -> Prediction {
    let route = if outputs.p_a < 0.5 {
        Route::Certain {
            class: argmax(&outputs.p_n),
        }
    } else {
        Route::Fuzzy {
            cluster: argmax(&outputs.p_o),
        }
    };
    Prediction {
        route,
        p_a: outputs.p_a,
    }
}

/// Routing used for vanilla baselines, which have no ambiguity estimate.
pub fn route_all_certain(outputs: &ModelOutputs) -> Prediction {
    Prediction {
        route: Route::Certain {
            class: argmax(&outputs.p_n),
        },
        p_a: 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    SmallConv,
    Mlp,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_conv" => Ok(BackboneKind::SmallConv),
            "mlp" => Ok(BackboneKind::Mlp),
            other => Err(Error::UnknownBackbone(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Input image side length in pixels (single channel).
    pub image_size: usize,
    /// Conv channels per block (small_conv) or hidden widths before the
    /// embedding layer (mlp).
    pub widths: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::SmallConv,
            image_size: 32,
            widths: vec![8, 16, 32, 32],
        }
    }
}

/// Builds the trunk plus one extended dense output layer of width
/// `k + k' + 1`.
///
/// `small_conv` stacks conv3x3-relu-maxpool blocks, then a dense embedding
/// layer with relu. `mlp` stacks dense-relu layers ending at the embedding.
pub fn build_backbone(cfg: &BackboneConfig, head: &HeadConfig, seed: u64) -> Result<Network> {
    head.validate()?;
    let side = cfg.image_size;
    let mut b = NetworkBuilder::new(side * side);
    let flat = match cfg.kind {
        BackboneKind::SmallConv => {
            let (mut h, mut ch) = (side, 1);
            for &out in &cfg.widths {
                if h < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "{} conv blocks do not fit a {side}px input",
                        cfg.widths.len()
                    )));
                }
                b = b.conv3x3(ch, out, h, h).relu().max_pool2(out, h, h);
                h /= 2;
                ch = out;
            }
            ch * h * h
        }
        BackboneKind::Mlp => {
            let mut width = side * side;
            for &w in &cfg.widths {
                b = b.dense(width, w).relu();
                width = w;
            }
            width
        }
    };
    let net = b
        .dense(flat, head.embedding_dim)
        .relu()
        .dense(head.embedding_dim, head.raw_len())
        .build(seed);
    Ok(net)
}

/// A backbone with its head layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dc3Model {
    pub head: HeadConfig,
    pub backbone: BackboneConfig,
    pub net: Network,
}

impl Dc3Model {
    pub fn new(backbone: BackboneConfig, head: HeadConfig, seed: u64) -> Result<Self> {
        let net = build_backbone(&backbone, &head, seed)?;
        Ok(Dc3Model {
            head,
            backbone,
            net,
        })
    }

    pub fn outputs_from_trace(&self, trace: &Trace) -> ModelOutputs {
        let mut out = split_head(trace.output(), &self.head).expect("network output width matches head");
        out.embedding = trace.embedding().to_vec();
        out
    }

    pub fn predict(&self, inputs: &[&[f64]]) -> Vec<ModelOutputs> {
        self.net
            .forward_batch(inputs)
            .iter()
            .map(|t| self.outputs_from_trace(t))
            .collect()
    }
}
