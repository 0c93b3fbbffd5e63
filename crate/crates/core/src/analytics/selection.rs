use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::AffinitySummary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// All targets come from one layer.
    SameLayer,
    /// Global top-M over every `(layer, expert)` pair.
    CrossLayer,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same-layer" | "same" => Ok(Strategy::SameLayer),
            "cross-layer" | "cross" => Ok(Strategy::CrossLayer),
            other => Err(Error::config(format!("unknown strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::SameLayer => "same-layer",
            Strategy::CrossLayer => "cross-layer",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub layer: usize,
    pub expert: usize,
    pub score: f64,
}

/// Binary target indicator `a^{(l)}` for one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub layer: usize,
    pub targets: Vec<u8>,
}

/// The experts chosen for unlearning and the anchor vectors of their layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub entries: Vec<PlanEntry>,
    pub strategy: Strategy,
    pub m: usize,
    pub anchors: Vec<Anchor>,
}

impl SelectionPlan {
    /// Builds a plan and its anchors, validating the entries.
    pub fn new(entries: Vec<PlanEntry>, strategy: Strategy, num_experts: usize) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if e.expert >= num_experts {
                return Err(Error::Index {
                    what: "plan expert",
                    index: e.expert,
                    bound: num_experts,
                });
            }
            if !seen.insert((e.layer, e.expert)) {
                return Err(Error::config(format!("expert ({}, {}) listed twice", e.layer, e.expert)));
            }
        }
        if strategy == Strategy::SameLayer && entries.windows(2).any(|w| w[0].layer != w[1].layer) {
            return Err(Error::config("same-layer plan spans several layers"));
        }
        let layers: BTreeSet<usize> = entries.iter().map(|e| e.layer).collect();
        let anchors = layers
            .into_iter()
            .map(|layer| {
                let mut targets = vec![0u8; num_experts];
                for e in entries.iter().filter(|e| e.layer == layer) {
                    targets[e.expert] = 1;
                }
                Anchor { layer, targets }
            })
            .collect();
        Ok(Self {
            m: entries.len(),
            entries,
            strategy,
            anchors,
        })
    }

    pub fn empty() -> Self {
        Self {
            entries: Vec::new(),
            strategy: Strategy::CrossLayer,
            m: 0,
            anchors: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Layers that hold at least one target, ascending.
    pub fn layers(&self) -> Vec<usize> {
        self.anchors.iter().map(|a| a.layer).collect()
    }

    pub fn anchor(&self, layer: usize) -> Option<&Anchor> {
        self.anchors.iter().find(|a| a.layer == layer)
    }

    pub fn contains(&self, layer: usize, expert: usize) -> bool {
        self.entries.iter().any(|e| e.layer == layer && e.expert == expert)
    }
}

fn check_m(m: usize, bound: usize) -> Result<()> {
    if m == 0 || m > bound {
        return Err(Error::Index {
            what: "M",
            index: m,
            bound,
        });
    }
    Ok(())
}

/// Picks the `m` highest-affinity experts.
///
/// Cross-layer takes the global top-`m` pairs. Same-layer takes the layer
/// holding the global best expert, then that layer's top `m`. Ties resolve
/// toward the lower layer, then the lower expert index.
pub fn rank_and_select(summary: &AffinitySummary, m: usize, strategy: Strategy) -> Result<SelectionPlan> {
    let (layers, n) = (summary.num_layers(), summary.num_experts());
    if layers == 0 || n == 0 {
        return Err(Error::Empty("affinity summary"));
    }
    let mut pairs: Vec<(usize, usize, f64)> = (0..layers)
        .flat_map(|l| (0..n).map(move |i| (l, i, summary.scores[l][i])))
        .collect();
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let chosen: Vec<(usize, usize, f64)> = match strategy {
        Strategy::CrossLayer => {
            check_m(m, layers * n)?;
            pairs[..m].to_vec()
        }
        Strategy::SameLayer => {
            check_m(m, n)?;
            let layer = pairs[0].0;
            pairs.iter().filter(|p| p.0 == layer).take(m).copied().collect()
        }
    };
    let entries = chosen
        .into_iter()
        .map(|(layer, expert, score)| PlanEntry { layer, expert, score })
        .collect();
    SelectionPlan::new(entries, strategy, n)
}

/// Uniformly random targets, as a comparator for affinity-based selection.
pub fn random_plan<R: Rng + ?Sized>(
    summary: &AffinitySummary,
    m: usize,
    strategy: Strategy,
    rng: &mut R,
) -> Result<SelectionPlan> {
    let (layers, n) = (summary.num_layers(), summary.num_experts());
    let chosen: Vec<(usize, usize)> = match strategy {
        Strategy::CrossLayer => {
            check_m(m, layers * n)?;
            let mut all: Vec<(usize, usize)> = (0..layers).flat_map(|l| (0..n).map(move |i| (l, i))).collect();
            all.shuffle(rng);
            all.truncate(m);
            all
        }
        Strategy::SameLayer => {
            check_m(m, n)?;
            let layer = rng.gen_range(0..layers);
            let mut experts: Vec<usize> = (0..n).collect();
            experts.shuffle(rng);
            experts.into_iter().take(m).map(|i| (layer, i)).collect()
        }
    };
    let entries = chosen
        .into_iter()
        .map(|(layer, expert)| PlanEntry {
            layer,
            expert,
            score: summary.scores[layer][expert],
        })
        .collect();
    SelectionPlan::new(entries, strategy, n)
}
