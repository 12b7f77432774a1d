//! Edge taxonomy and the pair graph a training run optimizes.
//!
//! Edges are written `KIND:i` or `KIND:i-j` (modality indices). CC, RR and
//! CCA are symmetric and canonicalize to i < j; XX is directional.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::ndgrad::NdError;

/// One term of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Edge {
    /// Convolutional features of modality i against its own latent.
    Cr(usize),
    /// Convolutional features of modality i against the latent of modality j.
    Xx(usize, usize),
    /// Convolutional features of both modalities at matching spatial
    /// locations.
    Cc(usize, usize),
    /// Latent against latent.
    Rr(usize, usize),
    /// Reconstruction of modality i from its latent.
    Ae(usize),
    /// Soft CCA surrogate between the two latents.
    Cca(usize, usize),
    /// Supervised cross-entropy on the latent of modality i.
    Sup(usize),
}

impl Edge {
    /// Parse `"CR:0"`, `"XX:0-1"`, etc. Symmetric kinds are canonicalized.
    pub fn parse(s: &str) -> Result<Edge, NdError> {
        let bad = || NdError::Invalid(format!("unrecognized edge {s:?}"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let parse_one = |rest: &str| rest.trim().parse::<usize>().map_err(|_| bad());
        let parse_two = |rest: &str| -> Result<(usize, usize), NdError> {
            let (a, b) = rest.split_once('-').ok_or_else(bad)?;
            let (i, j) = (parse_one(a)?, parse_one(b)?);
            if i == j {
                return Err(NdError::Invalid(format!("edge {s:?} needs two distinct modalities")));
            }
            Ok((i, j))
        };
        match kind.trim() {
            "CR" => Ok(Edge::Cr(parse_one(rest)?)),
            "XX" => parse_two(rest).map(|(i, j)| Edge::Xx(i, j)),
            "CC" => parse_two(rest).map(|(i, j)| Edge::Cc(i.min(j), i.max(j))),
            "RR" => parse_two(rest).map(|(i, j)| Edge::Rr(i.min(j), i.max(j))),
            "CCA" => parse_two(rest).map(|(i, j)| Edge::Cca(i.min(j), i.max(j))),
            "AE" => Ok(Edge::Ae(parse_one(rest)?)),
            "SUP" => Ok(Edge::Sup(parse_one(rest)?)),
            _ => Err(bad()),
        }
    }

    /// Modalities this edge reads.
    pub fn modalities(&self) -> Vec<usize> {
        match *self {
            Edge::Cr(i) | Edge::Ae(i) | Edge::Sup(i) => vec![i],
            Edge::Xx(i, j) | Edge::Cc(i, j) | Edge::Rr(i, j) | Edge::Cca(i, j) => vec![i, j],
        }
    }

    /// Modalities whose conv-head projection this edge consumes.
    pub fn head_modalities(&self) -> Vec<usize> {
        match *self {
            Edge::Cr(i) => vec![i],
            Edge::Xx(i, _) => vec![i],
            Edge::Cc(i, j) => vec![i, j],
            _ => vec![],
        }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Edge::Cr(i) => write!(f, "CR:{i}"),
            Edge::Xx(i, j) => write!(f, "XX:{i}-{j}"),
            Edge::Cc(i, j) => write!(f, "CC:{i}-{j}"),
            Edge::Rr(i, j) => write!(f, "RR:{i}-{j}"),
            Edge::Ae(i) => write!(f, "AE:{i}"),
            Edge::Cca(i, j) => write!(f, "CCA:{i}-{j}"),
            Edge::Sup(i) => write!(f, "SUP:{i}"),
        }
    }
}

/// An edge with its weight in the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedEdge {
    pub edge: Edge,
    pub weight: f64,
}

/// The set of objective edges for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGraph {
    edges: Vec<WeightedEdge>,
    num_modalities: usize,
}

impl PairGraph {
    /// Build and validate a graph over `num_modalities` encoders. `weights`
    /// maps canonical edge strings to loss weights (default 1.0); every key
    /// must name an edge in the list.
    pub fn new(
        edges: &[Edge],
        weights: &BTreeMap<String, f64>,
        num_modalities: usize,
    ) -> Result<PairGraph, NdError> {
        if edges.is_empty() {
            return Err(NdError::Invalid("pair graph needs at least one edge".into()));
        }
        let mut seen = BTreeSet::new();
        for e in edges {
            if !seen.insert(*e) {
                return Err(NdError::Invalid(format!("duplicate edge {e}")));
            }
            for m in e.modalities() {
                if m >= num_modalities {
                    return Err(NdError::Invalid(format!(
                        "edge {e} references modality {m} but only {num_modalities} exist"
                    )));
                }
            }
        }
        let names: BTreeSet<String> = edges.iter().map(|e| e.to_string()).collect();
        for key in weights.keys() {
            if !names.contains(key) {
                return Err(NdError::Invalid(format!("weight for unknown edge {key:?}")));
            }
        }
        let edges = edges
            .iter()
            .map(|e| WeightedEdge { edge: *e, weight: weights.get(&e.to_string()).copied().unwrap_or(1.0) })
            .collect();
        Ok(PairGraph { edges, num_modalities })
    }

    /// Parse a list of edge strings, e.g. from a run config.
    pub fn from_strings(
        specs: &[String],
        weights: &BTreeMap<String, f64>,
        num_modalities: usize,
    ) -> Result<PairGraph, NdError> {
        let edges = specs.iter().map(|s| Edge::parse(s)).collect::<Result<Vec<_>, _>>()?;
        PairGraph::new(&edges, weights, num_modalities)
    }

    /// The named objectives from the experiment grid.
    pub fn named(name: &str) -> Result<PairGraph, NdError> {
        let edges: &[Edge] = match name {
            "CR" => &[Edge::Cr(0), Edge::Cr(1)],
            "XX-CC" => &[Edge::Xx(0, 1), Edge::Xx(1, 0), Edge::Cc(0, 1)],
            "CR-XX-CC" => {
                &[Edge::Cr(0), Edge::Cr(1), Edge::Xx(0, 1), Edge::Xx(1, 0), Edge::Cc(0, 1)]
            }
            "RR" => &[Edge::Rr(0, 1)],
            "RR-AE" => &[Edge::Rr(0, 1), Edge::Ae(0), Edge::Ae(1)],
            "CR-CCA" => &[Edge::Cr(0), Edge::Cr(1), Edge::Cca(0, 1)],
            "AE" => &[Edge::Ae(0), Edge::Ae(1)],
            "Supervised" => &[Edge::Sup(0), Edge::Sup(1)],
            _ => return Err(NdError::Invalid(format!("unknown objective name {name:?}"))),
        };
        PairGraph::new(edges, &BTreeMap::new(), 2)
    }

    /// All named objectives, in grid order.
    pub fn known_names() -> &'static [&'static str] {
        &["CR", "XX-CC", "CR-XX-CC", "RR", "RR-AE", "CR-CCA", "AE", "Supervised"]
    }

    pub fn edges(&self) -> &[WeightedEdge] {
        &self.edges
    }

    pub fn num_modalities(&self) -> usize {
        self.num_modalities
    }

    /// Modalities needing a conv head.
    pub fn required_heads(&self) -> BTreeSet<usize> {
        self.edges.iter().flat_map(|we| we.edge.head_modalities()).collect()
    }

    /// Modalities needing a decoder.
    pub fn required_decoders(&self) -> BTreeSet<usize> {
        self.edges
            .iter()
            .filter_map(|we| match we.edge {
                Edge::Ae(i) => Some(i),
                _ => None,
            })
            .collect()
    }

    /// Modalities needing a supervised classifier.
    pub fn required_classifiers(&self) -> BTreeSet<usize> {
        self.edges
            .iter()
            .filter_map(|we| match we.edge {
                Edge::Sup(i) => Some(i),
                _ => None,
            })
            .collect()
    }

    /// Whether any edge consumes labels.
    pub fn uses_labels(&self) -> bool {
        !self.required_classifiers().is_empty()
    }

    /// Modalities touched by at least one edge.
    pub fn touched_modalities(&self) -> BTreeSet<usize> {
        self.edges.iter().flat_map(|we| we.edge.modalities()).collect()
    }
}
