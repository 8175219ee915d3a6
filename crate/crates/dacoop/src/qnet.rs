//! The pursuit Q-network: per-neighbor embedding, key/attention scoring with
//! a softmax over the variable-length neighbor axis, weighted integration,
//! and a dueling value/advantage head. A mean-embedding mode replaces the
//! attention pooling for the ablation baselines.
//!
//! Inputs are pre-normalized so every network input lies in [-1, 1]:
//! distances to the evader and nearest obstacle divide by the arena
//! diagonal, neighbor distances by the perception range, azimuths by pi.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffgraph::{
    load_checkpoint, save_checkpoint, Graph, NodeId, ParamId, ParamSet, Segments, Tensor,
};
use crate::error::{Error, Result};
use crate::sim::Observation;

/// How neighbor embeddings are pooled into a fixed-length vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMode {
    /// Attention-weighted pooling with learned scores.
    Attention,
    /// Unweighted mean of neighbor embeddings.
    Mean,
}

impl EmbedMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EmbedMode::Attention => "attention",
            EmbedMode::Mean => "mean",
        }
    }
}

/// Network topology and input normalization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetConfig {
    pub embed_dim: usize,
    pub hidden: (usize, usize),
    pub n_actions: usize,
    pub mode: EmbedMode,
    /// Divisor for evader/obstacle distances (arena diagonal).
    pub dist_scale: f64,
    /// Divisor for neighbor distances (perception range).
    pub neighbor_dist_scale: f64,
}

impl Default for QNetConfig {
    fn default() -> Self {
        QNetConfig {
            embed_dim: 128,
            hidden: (128, 128),
            n_actions: 24,
            mode: EmbedMode::Attention,
            dist_scale: (3.6f64 * 3.6 + 5.0 * 5.0).sqrt(),
            neighbor_dist_scale: 2.0,
        }
    }
}

impl QNetConfig {
    pub fn topology_string(&self) -> String {
        format!(
            "qnet v1 mode={} embed={} hidden={},{} actions={} dist_scale={} neighbor_scale={}",
            self.mode.as_str(),
            self.embed_dim,
            self.hidden.0,
            self.hidden.1,
            self.n_actions,
            self.dist_scale,
            self.neighbor_dist_scale,
        )
    }
}

/// Attention scores for one observation: one entry per neighbor, summing to
/// one whenever the neighbor list is nonempty.
pub type AttentionScores = Vec<f64>;

/// Per-neighbor embedding stage outputs: embeddings, keys, mean embedding,
/// and attention scores.
pub type EmbedOutputs = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>, AttentionScores);

/// Everything a single forward pass exposes for one observation.
#[derive(Debug, Clone)]
pub struct QOutput {
    pub q: Vec<f64>,
    pub state_value: f64,
    pub advantages: Vec<f64>,
    pub alpha: AttentionScores,
    pub integrated_embedding: Vec<f64>,
}

/// Batch forward results, one row per observation.
#[derive(Debug, Clone)]
pub struct QBatch {
    pub q: Tensor,
    pub state_value: Vec<f64>,
    pub alpha: Vec<AttentionScores>,
    pub integrated: Tensor,
}

/// Node handles into a built network graph, for loss construction.
pub struct QHeads {
    pub q: NodeId,
    pub value: NodeId,
    pub advantages: NodeId,
    /// Present in attention mode only.
    pub alpha: Option<NodeId>,
    pub embeddings: NodeId,
    pub keys: Option<NodeId>,
    pub mean_embedding: NodeId,
    pub integrated: NodeId,
}

struct Layers {
    f_e: (ParamId, ParamId),
    f_k: Option<(ParamId, ParamId)>,
    f_a: Option<(ParamId, ParamId)>,
    mlp1: (ParamId, ParamId),
    mlp2: (ParamId, ParamId),
    value: (ParamId, ParamId),
    adv: (ParamId, ParamId),
}

/// The Q-network: a parameter set plus its topology.
#[derive(Debug, Clone)]
pub struct QNet {
    pub cfg: QNetConfig,
    pub params: ParamSet,
}

impl QNet {
    /// Fan-in scaled uniform initialization, fully determined by the seed.
    pub fn init(cfg: QNetConfig, seed: u64) -> Result<QNet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let e = cfg.embed_dim;
        let (h1, h2) = cfg.hidden;
        let a = cfg.n_actions;
        let mut layer =
            |params: &mut ParamSet, name: &str, fan_in: usize, out: usize| -> Result<()> {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = Tensor {
                    rows: fan_in,
                    cols: out,
                    data: (0..fan_in * out)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                };
                let b = Tensor {
                    rows: 1,
                    cols: out,
                    data: (0..out).map(|_| rng.gen_range(-bound..bound)).collect(),
                };
                params.add(&format!("{name}.w"), w)?;
                params.add(&format!("{name}.b"), b)?;
                Ok(())
            };
        layer(&mut params, "f_e", 2, e)?;
        if cfg.mode == EmbedMode::Attention {
            layer(&mut params, "f_k", e, e)?;
            layer(&mut params, "f_a", 4 + 2 * e, 1)?;
        }
        layer(&mut params, "mlp1", 4 + e, h1)?;
        layer(&mut params, "mlp2", h1, h2)?;
        layer(&mut params, "value", h2, 1)?;
        layer(&mut params, "adv", h2, a)?;
        Ok(QNet { cfg, params })
    }

    fn layers(&self) -> Result<Layers> {
        let pair = |name: &str| -> Result<(ParamId, ParamId)> {
            let w = self
                .params
                .id(&format!("{name}.w"))
                .ok_or_else(|| Error::Checkpoint(format!("missing {name}.w")))?;
            let b = self
                .params
                .id(&format!("{name}.b"))
                .ok_or_else(|| Error::Checkpoint(format!("missing {name}.b")))?;
            Ok((w, b))
        };
        Ok(Layers {
            f_e: pair("f_e")?,
            f_k: if self.cfg.mode == EmbedMode::Attention {
                Some(pair("f_k")?)
            } else {
                None
            },
            f_a: if self.cfg.mode == EmbedMode::Attention {
                Some(pair("f_a")?)
            } else {
                None
            },
            mlp1: pair("mlp1")?,
            mlp2: pair("mlp2")?,
            value: pair("value")?,
            adv: pair("adv")?,
        })
    }

    /// Normalize a batch of observations into network inputs.
    pub fn encode(&self, obs: &[&Observation]) -> (Tensor, Tensor, Segments) {
        let n = obs.len();
        let mut o_loc = Tensor::zeros(n, 4);
        let mut segments: Segments = Vec::with_capacity(n);
        let mut feats = Vec::new();
        let mut at = 0usize;
        for (i, o) in obs.iter().enumerate() {
            o_loc.data[i * 4] = o.d_e / self.cfg.dist_scale;
            o_loc.data[i * 4 + 1] = o.phi_e / std::f64::consts::PI;
            o_loc.data[i * 4 + 2] = o.d_o / self.cfg.dist_scale;
            o_loc.data[i * 4 + 3] = o.phi_o / std::f64::consts::PI;
            segments.push((at, o.neighbors.len()));
            for &(d, phi) in &o.neighbors {
                feats.push(d / self.cfg.neighbor_dist_scale);
                feats.push(phi / std::f64::consts::PI);
            }
            at += o.neighbors.len();
        }
        let feats = Tensor {
            rows: at,
            cols: 2,
            data: feats,
        };
        (o_loc, feats, segments)
    }

    /// Build the full network on `graph` over pre-encoded inputs, reading
    /// weights from `params` (the online or the target copy).
    pub fn build_graph(
        &self,
        graph: &mut Graph,
        params: &ParamSet,
        o_loc: Tensor,
        feats: Tensor,
        segments: Segments,
    ) -> Result<QHeads> {
        let l = self.layers()?;
        let o_loc_n = graph.input(o_loc);
        let feats_n = graph.input(feats);
        let p =
            |g: &mut Graph, pr: (ParamId, ParamId)| (g.param(params, pr.0), g.param(params, pr.1));

        let (w_e, b_e) = p(graph, l.f_e);
        let e_lin = graph.affine(feats_n, w_e, b_e)?;
        let e = graph.relu(e_lin);
        let e_m = graph.segment_mean(e, segments.clone())?;

        let (alpha, keys, e_i) = match self.cfg.mode {
            EmbedMode::Attention => {
                let (w_k, b_k) = p(graph, l.f_k.unwrap());
                let k_lin = graph.affine(e, w_k, b_k)?;
                let k = graph.relu(k_lin);
                let query = graph.concat_cols(&[o_loc_n, e_m])?;
                let query_rows = graph.expand_rows(query, segments.clone())?;
                let att_in = graph.concat_cols(&[query_rows, k])?;
                let (w_a, b_a) = p(graph, l.f_a.unwrap());
                let logits_lin = graph.affine(att_in, w_a, b_a)?;
                let logits = graph.relu(logits_lin);
                let alpha = graph.segment_softmax(logits, segments.clone())?;
                let e_i = graph.segment_weighted_sum(e, alpha, segments.clone())?;
                (Some(alpha), Some(k), e_i)
            }
            EmbedMode::Mean => (None, None, e_m),
        };

        let mlp_in = graph.concat_cols(&[o_loc_n, e_i])?;
        let (w_1, b_1) = p(graph, l.mlp1);
        let h1_lin = graph.affine(mlp_in, w_1, b_1)?;
        let h1 = graph.relu(h1_lin);
        let (w_2, b_2) = p(graph, l.mlp2);
        let h2_lin = graph.affine(h1, w_2, b_2)?;
        let h2 = graph.relu(h2_lin);
        let (w_v, b_v) = p(graph, l.value);
        let value = graph.affine(h2, w_v, b_v)?;
        let (w_adv, b_adv) = p(graph, l.adv);
        let advantages = graph.affine(h2, w_adv, b_adv)?;
        let adv_mean = graph.row_mean(advantages);
        let centered = graph.sub_col(advantages, adv_mean)?;
        let q = graph.add_col(centered, value)?;

        Ok(QHeads {
            q,
            value,
            advantages,
            alpha,
            embeddings: e,
            keys,
            mean_embedding: e_m,
            integrated: e_i,
        })
    }

    /// Inference over a batch of observations.
    pub fn forward_batch(&self, obs: &[&Observation]) -> Result<QBatch> {
        let (o_loc, feats, segments) = self.encode(obs);
        let mut graph = Graph::new();
        let heads = self.build_graph(&mut graph, &self.params, o_loc, feats, segments.clone())?;
        let q = graph.value(heads.q).clone();
        let state_value = graph.value(heads.value).data.clone();
        let integrated = graph.value(heads.integrated).clone();
        let alpha = match heads.alpha {
            Some(node) => {
                let all = &graph.value(node).data;
                segments
                    .iter()
                    .map(|&(start, len)| all[start..start + len].to_vec())
                    .collect()
            }
            None => segments.iter().map(|_| Vec::new()).collect(),
        };
        Ok(QBatch {
            q,
            state_value,
            alpha,
            integrated,
        })
    }

    /// Single-observation forward pass.
    pub fn q_forward(&self, obs: &Observation) -> Result<QOutput> {
        let (o_loc, feats, segments) = self.encode(&[obs]);
        let mut graph = Graph::new();
        let heads = self.build_graph(&mut graph, &self.params, o_loc, feats, segments)?;
        let q = graph.value(heads.q).data.clone();
        let advantages = graph.value(heads.advantages).data.clone();
        let state_value = graph.value(heads.value).item();
        let alpha = match heads.alpha {
            Some(node) => graph.value(node).data.clone(),
            None => Vec::new(),
        };
        let integrated_embedding = graph.value(heads.integrated).data.clone();
        Ok(QOutput {
            q,
            state_value,
            advantages,
            alpha,
            integrated_embedding,
        })
    }

    /// Embedding stage only: per-neighbor embeddings, keys, mean embedding,
    /// and attention scores (uniform-free: empty when no neighbors).
    pub fn embed_and_attend(&self, obs: &Observation) -> Result<EmbedOutputs> {
        let (o_loc, feats, segments) = self.encode(&[obs]);
        let mut graph = Graph::new();
        let heads = self.build_graph(&mut graph, &self.params, o_loc, feats, segments)?;
        let rows = |node: NodeId| -> Vec<Vec<f64>> {
            let t = graph.value(node);
            (0..t.rows).map(|r| t.row(r).to_vec()).collect()
        };
        let embeddings = rows(heads.embeddings);
        let keys = heads.keys.map(rows).unwrap_or_default();
        let mean_embedding = graph.value(heads.mean_embedding).data.clone();
        let alpha = heads
            .alpha
            .map(|n| graph.value(n).data.clone())
            .unwrap_or_default();
        Ok((embeddings, keys, mean_embedding, alpha))
    }

    /// Dueling first-stream state value.
    pub fn state_value(&self, obs: &Observation) -> Result<f64> {
        Ok(self.q_forward(obs)?.state_value)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(&self.params, &self.cfg.topology_string(), path)
    }

    /// Save with `(config_hash, seed)` provenance embedded.
    pub fn save_with_meta(
        &self,
        path: &std::path::Path,
        config_hash: u64,
        seed: u64,
    ) -> Result<()> {
        crate::diffgraph::save_checkpoint_meta(
            &self.params,
            &self.cfg.topology_string(),
            Some((config_hash, seed)),
            path,
        )
    }

    /// Provenance of a checkpoint file, when present.
    pub fn checkpoint_meta(path: &std::path::Path) -> Result<Option<(u64, u64)>> {
        let (_, _, meta) = crate::diffgraph::load_checkpoint_meta(path)?;
        Ok(meta)
    }

    /// Load a checkpoint, validating its recorded topology against `cfg`.
    pub fn load(path: &std::path::Path, cfg: QNetConfig) -> Result<QNet> {
        let (params, topology) = load_checkpoint(path)?;
        let expected = cfg.topology_string();
        if topology != expected {
            return Err(Error::Checkpoint(format!(
                "topology mismatch: checkpoint '{topology}' vs config '{expected}'"
            )));
        }
        let net = QNet { cfg, params };
        net.layers()?;
        Ok(net)
    }

    /// Load a checkpoint, reconstructing the config from the stored topology.
    pub fn load_auto(path: &std::path::Path) -> Result<QNet> {
        let (_, topology) = load_checkpoint(path)?;
        let cfg = parse_topology(&topology)?;
        QNet::load(path, cfg)
    }
}

fn parse_topology(topology: &str) -> Result<QNetConfig> {
    let bad = |msg: &str| Error::Checkpoint(format!("bad topology '{topology}': {msg}"));
    let mut it = topology.split(' ');
    if it.next() != Some("qnet") || it.next() != Some("v1") {
        return Err(bad("expected 'qnet v1'"));
    }
    let mut cfg = QNetConfig::default();
    for token in it {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| bad("expected key=value"))?;
        match k {
            "mode" => {
                cfg.mode = match v {
                    "attention" => EmbedMode::Attention,
                    "mean" => EmbedMode::Mean,
                    _ => return Err(bad("unknown mode")),
                }
            }
            "embed" => cfg.embed_dim = v.parse().map_err(|_| bad("embed"))?,
            "hidden" => {
                let (a, b) = v.split_once(',').ok_or_else(|| bad("hidden"))?;
                cfg.hidden = (
                    a.parse().map_err(|_| bad("hidden"))?,
                    b.parse().map_err(|_| bad("hidden"))?,
                );
            }
            "actions" => cfg.n_actions = v.parse().map_err(|_| bad("actions"))?,
            "dist_scale" => cfg.dist_scale = v.parse().map_err(|_| bad("dist_scale"))?,
            "neighbor_scale" => {
                cfg.neighbor_dist_scale = v.parse().map_err(|_| bad("neighbor_scale"))?
            }
            _ => return Err(bad("unknown key")),
        }
    }
    Ok(cfg)
}

/// Weighted integration of embedding rows: `sum_j alpha_j * e_j`. The
/// independent path used by tests and analysis to cross-check the graph op.
pub fn integrate(embeddings: &[Vec<f64>], alpha: &[f64]) -> Result<Vec<f64>> {
    if embeddings.len() != alpha.len() {
        return Err(Error::InvalidInput(format!(
            "{} embeddings vs {} weights",
            embeddings.len(),
            alpha.len()
        )));
    }
    let width = embeddings.first().map(|e| e.len()).unwrap_or(0);
    let mut out = vec![0.0; width];
    for (e, &a) in embeddings.iter().zip(alpha) {
        for (o, v) in out.iter_mut().zip(e) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
