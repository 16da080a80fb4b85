//! Structured prompting, response parsing and batch aggregation for the
//! commonsense oracle.

mod mock;
mod parse;
mod prompt;

pub use mock::{ActionRule, ErrorInjection, MockConfig, MockOracle};
pub use parse::{normalize_action, parse_response, ParseError, ParseErrorKind, ParsedResponse};
pub use prompt::{build_prompt, DEFAULT_INTENTION};

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{MetaAction, RelationEdge, RelationType, SceneState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransportErrorKind {
    Timeout,
    Http,
    Decode,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{kind:?}: {detail}")]
pub struct TransportError {
    pub kind: TransportErrorKind,
    pub detail: String,
}

/// Everything a client may need to answer one query.
#[derive(Debug, Clone, Copy)]
pub struct OracleRequest<'a> {
    pub prompt: &'a str,
    pub scene: &'a SceneState,
    /// Index of the query within the batch, `0..M`.
    pub query_index: u32,
}

/// A source of oracle completions. Implementations must be usable from
/// several workers at once; each call is an independent query.
pub trait OracleClient: Sync {
    fn complete(&self, request: &OracleRequest<'_>) -> Result<String, TransportError>;
}

impl<T: OracleClient + ?Sized> OracleClient for &T {
    fn complete(&self, request: &OracleRequest<'_>) -> Result<String, TransportError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ResponseOutcome {
    Parsed(ParsedResponse),
    Rejected(ParseError),
    Transport(TransportError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub raw_text: String,
    pub outcome: ResponseOutcome,
}

impl OracleResponse {
    pub fn from_text(text: String, scene: &SceneState) -> Self {
        let outcome = match parse_response(&text, scene) {
            Ok(p) => ResponseOutcome::Parsed(p),
            Err(e) => ResponseOutcome::Rejected(e),
        };
        Self {
            raw_text: text,
            outcome,
        }
    }

    pub fn transport_failure(err: TransportError) -> Self {
        Self {
            raw_text: String::new(),
            outcome: ResponseOutcome::Transport(err),
        }
    }

    pub fn parsed(&self) -> Option<&ParsedResponse> {
        match &self.outcome {
            ResponseOutcome::Parsed(p) => Some(p),
            _ => None,
        }
    }
}

/// Multiset of relation votes for one vehicle, indexed by [`RelationType::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationCounts(pub [u32; 8]);

impl RelationCounts {
    pub fn add(&mut self, r: RelationType) {
        self.0[r.index()] += 1;
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn count(&self, r: RelationType) -> u32 {
        self.0[r.index()]
    }

    /// Empirical distribution over the eight relation types.
    pub fn frequencies(&self) -> [f64; 8] {
        let n = self.total() as f64;
        let mut p = [0.0; 8];
        if n > 0.0 {
            for (pi, &c) in p.iter_mut().zip(self.0.iter()) {
                *pi = c as f64 / n;
            }
        }
        p
    }

    /// Most frequent relation; ties go to declaration order.
    pub fn mode(&self) -> Option<RelationType> {
        if self.total() == 0 {
            return None;
        }
        let mut best = 0;
        for i in 1..8 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        Some(RelationType::ALL[best])
    }
}

/// Aggregate of `M` independent oracle queries for one planning cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub responses: Vec<OracleResponse>,
    pub effective_m: usize,
    pub per_vehicle_relations: BTreeMap<u32, RelationCounts>,
    pub action_counts: [u32; MetaAction::COUNT],
}

impl QueryBatch {
    pub fn from_responses(responses: Vec<OracleResponse>) -> Self {
        let mut per_vehicle_relations: BTreeMap<u32, RelationCounts> = BTreeMap::new();
        let mut action_counts = [0u32; MetaAction::COUNT];
        let mut effective_m = 0;
        for p in responses.iter().filter_map(OracleResponse::parsed) {
            effective_m += 1;
            action_counts[p.action.index()] += 1;
            for e in &p.relations {
                per_vehicle_relations.entry(e.other_id).or_default().add(e.relation);
            }
        }
        Self {
            responses,
            effective_m,
            per_vehicle_relations,
            action_counts,
        }
    }

    pub fn queried(&self) -> usize {
        self.responses.len()
    }

    /// No response parsed; downstream must plan with zero trust.
    pub fn is_degraded(&self) -> bool {
        self.effective_m == 0
    }

    /// Most voted action, ties broken by declaration order.
    pub fn recommended_action(&self) -> Option<MetaAction> {
        if self.is_degraded() {
            return None;
        }
        let mut best = 0;
        for i in 1..MetaAction::COUNT {
            if self.action_counts[i] > self.action_counts[best] {
                best = i;
            }
        }
        MetaAction::from_index(best)
    }

    /// True when any successful parse needed the alias table.
    pub fn alias_fired(&self) -> bool {
        self.responses
            .iter()
            .filter_map(OracleResponse::parsed)
            .any(|p| p.normalized)
    }

    /// One majority-vote edge per vehicle that received at least one vote.
    pub fn majority_edges(&self, ego_id: u32) -> Vec<RelationEdge> {
        self.per_vehicle_relations
            .iter()
            .filter_map(|(&other_id, counts)| {
                counts.mode().map(|relation| RelationEdge {
                    ego_id,
                    other_id,
                    relation,
                })
            })
            .collect()
    }
}

/// Issues `m` queries sequentially and aggregates them.
///
/// Transport failures are recorded in the batch and never returned as errors.
pub fn query_batch<C: OracleClient + ?Sized>(
    scene: &SceneState,
    intention: &str,
    m: u32,
    client: &C,
) -> QueryBatch {
    let prompt = build_prompt(scene, intention);
    let responses = (0..m.max(1))
        .map(|query_index| {
            let request = OracleRequest {
                prompt: &prompt,
                scene,
                query_index,
            };
            match client.complete(&request) {
                Ok(text) => OracleResponse::from_text(text, scene),
                Err(e) => OracleResponse::transport_failure(e),
            }
        })
        .collect();
    QueryBatch::from_responses(responses)
}
