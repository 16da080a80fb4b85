use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{combined_trust, TrustConfig};
use crate::domain::{CommonsenseGraph, RelationType, VehicleState};
use crate::math;

const FEATURES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderParams {
    pub seed: u64,
    pub d_enc: usize,
    pub hidden: usize,
}

impl Default for EncoderParams {
    fn default() -> Self {
        Self {
            seed: 0,
            d_enc: 128,
            hidden: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedState {
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Dense {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Dense {
    fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bias: bool) -> Self {
        let limit = math::sqrt(6.0 / (rows + cols) as f64);
        let w = (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        let b = if bias {
            (0..rows).map(|_| rng.random_range(-0.1..0.1)).collect()
        } else {
            vec![0.0; rows]
        };
        Self { rows, cols, w, b }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                let row = &self.w[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b[r]
            })
            .collect()
    }
}

/// Fixed-weight, seed-initialised encoder of a trust-weighted scene graph.
///
/// Vehicle records go through a two-layer tanh MLP, each relation adds a
/// row of a relation embedding table scaled by that relation's trust, and a
/// single-head attention with the ego embedding as query pools the set.
#[derive(Debug, Clone)]
pub struct TrustEncoder {
    params: EncoderParams,
    layer1: Dense,
    layer2: Dense,
    relation_table: Vec<Vec<f64>>,
    wq: Dense,
    wk: Dense,
    wv: Dense,
}

impl TrustEncoder {
    pub fn new(params: EncoderParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let d = params.d_enc;
        let layer1 = Dense::xavier(&mut rng, params.hidden, FEATURES, true);
        let layer2 = Dense::xavier(&mut rng, d, params.hidden, true);
        let relation_table = (0..RelationType::ALL.len())
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let wq = Dense::xavier(&mut rng, d, d, false);
        let wk = Dense::xavier(&mut rng, d, d, false);
        let wv = Dense::xavier(&mut rng, d, d, false);
        Self {
            params,
            layer1,
            layer2,
            relation_table,
            wq,
            wk,
            wv,
        }
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    fn features(ego: &VehicleState, v: &VehicleState) -> [f64; FEATURES] {
        [
            (v.x - ego.x) / 100.0,
            (v.y - ego.y) / 10.0,
            v.vx / 40.0,
            v.vy / 40.0,
            v.ax / 5.0,
            v.ay / 5.0,
            math::cos(v.heading),
            math::sin(v.heading),
            (v.lane as f64 - ego.lane as f64) / 4.0,
        ]
    }

    fn embed(&self, ego: &VehicleState, v: &VehicleState) -> Vec<f64> {
        let h: Vec<f64> = self
            .layer1
            .apply(&Self::features(ego, v))
            .into_iter()
            .map(libm::tanh)
            .collect();
        self.layer2.apply(&h).into_iter().map(libm::tanh).collect()
    }

    /// Encodes a graph, weighting each relation by the per-vehicle gated trust.
    pub fn encode(&self, graph: &CommonsenseGraph, trust_cfg: &TrustConfig) -> EncodedState {
        self.encode_with(graph, |id| {
            graph
                .trust
                .per_relation
                .get(&id)
                .map(|t| combined_trust(t.llm, t.kin, trust_cfg))
                .unwrap_or(0.0)
        })
    }

    /// Encodes a graph with an explicit trust weight per surrounding vehicle.
    pub fn encode_with(&self, graph: &CommonsenseGraph, weight: impl Fn(u32) -> f64) -> EncodedState {
        let ego = &graph.scene.ego;
        let v0 = self.embed(ego, ego);
        if graph.scene.others.is_empty() {
            return EncodedState { vector: v0 };
        }
        // Sorted by id so pooling order, and hence rounding, is fixed.
        let mut others: Vec<&VehicleState> = graph.scene.others.iter().collect();
        others.sort_by_key(|v| v.id);

        let q = self.wq.apply(&v0);
        let scale = math::sqrt(self.params.d_enc as f64);
        let mut logits = Vec::with_capacity(others.len());
        let mut values = Vec::with_capacity(others.len());
        for v in others {
            let mut token = self.embed(ego, v);
            if let Some(edge) = graph.edges.iter().find(|e| e.other_id == v.id) {
                let c = weight(v.id);
                for (t, e) in token.iter_mut().zip(&self.relation_table[edge.relation.index()]) {
                    *t += c * e;
                }
            }
            let k = self.wk.apply(&token);
            logits.push(q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / scale);
            values.push(self.wv.apply(&token));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| math::exp(l - max)).collect();
        let total: f64 = weights.iter().sum();
        let mut out = vec![0.0; self.params.d_enc];
        for (w, val) in weights.iter().zip(&values) {
            for (o, x) in out.iter_mut().zip(val) {
                *o += w / total * x;
            }
        }
        EncodedState { vector: out }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{TrustScores, VehicleTrust};
    use crate::oracle::tests::fig3_scene;

    fn graph() -> CommonsenseGraph {
        let scene = fig3_scene();
        let edges = scene.ground_truth_edges(5.0);
        let mut trust = TrustScores::zero();
        for (i, o) in scene.others.iter().enumerate() {
            trust.per_relation.insert(
                o.id,
                VehicleTrust {
                    llm: 0.6 + 0.1 * i as f64,
                    kin: 0.9,
                },
            );
        }
        CommonsenseGraph { scene, edges, trust }
    }

    #[test]
    fn deterministic_and_sized() {
        let enc = TrustEncoder::new(EncoderParams::default());
        let a = enc.encode(&graph(), &TrustConfig::default());
        let b = TrustEncoder::new(EncoderParams::default()).encode(&graph(), &TrustConfig::default());
        assert_eq!(a.vector.len(), 128);
        assert!(a.vector.iter().all(|v| v.is_finite()));
        let bits = |s: &EncodedState| s.vector.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn zero_trust_equals_removed_edge() {
        let enc = TrustEncoder::new(EncoderParams::default());
        let mut g = graph();
        g.trust.per_relation.get_mut(&992).unwrap().llm = 0.0;
        let zeroed = enc.encode(&g, &TrustConfig::default());
        g.edges.retain(|e| e.other_id != 992);
        let removed = enc.encode(&g, &TrustConfig::default());
        assert_eq!(zeroed, removed);
    }

    #[test]
    fn permutation_invariant() {
        let enc = TrustEncoder::new(EncoderParams::default());
        let g = graph();
        let mut p = g.clone();
        p.scene.others.reverse();
        p.edges.reverse();
        assert_eq!(enc.encode(&g, &TrustConfig::default()), enc.encode(&p, &TrustConfig::default()));
    }

    #[test]
    fn empty_scene_returns_ego_embedding() {
        let enc = TrustEncoder::new(EncoderParams::default());
        let mut g = graph();
        g.scene.others.clear();
        g.edges.clear();
        let out = enc.encode(&g, &TrustConfig::default());
        assert_eq!(out.vector, enc.embed(&g.scene.ego, &g.scene.ego));
    }

    #[test]
    fn trust_changes_output() {
        let enc = TrustEncoder::new(EncoderParams::default());
        let g = graph();
        let a = enc.encode_with(&g, |_| 1.0);
        let b = enc.encode_with(&g, |_| 0.2);
        assert_ne!(a, b);
    }
}
