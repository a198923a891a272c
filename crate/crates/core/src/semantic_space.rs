//! Exact k-nearest-label search over class vectors.
//!
//! Distances are Euclidean, accumulated in f64. Equidistant labels are
//! ordered by ascending label, both in the tree and in the linear scan.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassVectorSet;
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub label: String,
    #[serde(rename = "dist")]
    pub distance: f64,
}

/// Labels sorted by nondecreasing distance from a query point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedLabels {
    pub entries: Vec<Neighbor>,
}

impl RankedLabels {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|n| n.label.as_str())
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self {
            entries: self.entries.iter().take(k).cloned().collect(),
        }
    }
}

/// Anything that can answer ranked k-nearest-label queries.
pub trait NeighborSearch {
    fn dim(&self) -> usize;
    fn labels(&self) -> &[String];
    fn query_k_nearest(&self, point: &[f32], k: usize) -> Result<RankedLabels>;

    fn len(&self) -> usize {
        self.labels().len()
    }

    fn is_empty(&self) -> bool {
        self.labels().is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexOptions {
    /// L2-normalize class vectors and queries before measuring distance.
    pub normalize: bool,
}

/// Indexed points, sorted by label so that point index order is label order.
#[derive(Debug, Clone)]
struct PointSet {
    dim: usize,
    labels: Vec<String>,
    coords: Vec<f32>,
    normalize: bool,
}

impl PointSet {
    fn new(
        cv: &ClassVectorSet,
        candidates: Option<&[String]>,
        options: IndexOptions,
    ) -> Result<Self> {
        if cv.is_empty() {
            return Err(Error::arg("cannot index an empty class-vector set"));
        }
        let labels: BTreeSet<&str> = match candidates {
            Some(c) => {
                let set: BTreeSet<&str> = c.iter().map(String::as_str).collect();
                if set.len() != c.len() {
                    return Err(Error::arg("duplicate candidate labels"));
                }
                if let Some(bad) = set.iter().find(|l| !cv.contains(l)) {
                    return Err(Error::arg(format!(
                        "candidate label '{bad}' has no class vector"
                    )));
                }
                set
            }
            None => cv.labels().iter().map(String::as_str).collect(),
        };
        if labels.is_empty() {
            return Err(Error::arg("empty candidate label set"));
        }
        let dim = cv.dim();
        let mut coords = Vec::with_capacity(labels.len() * dim);
        for l in &labels {
            let v = cv.get(l).expect("checked");
            if options.normalize {
                coords.extend(normalized(v));
            } else {
                coords.extend_from_slice(v);
            }
        }
        Ok(Self {
            dim,
            labels: labels.into_iter().map(str::to_owned).collect(),
            coords,
            normalize: options.normalize,
        })
    }

    fn point(&self, i: usize) -> &[f32] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    fn prepare_query<'a>(&self, point: &'a [f32], k: usize) -> Result<std::borrow::Cow<'a, [f32]>> {
        if point.len() != self.dim {
            return Err(Error::arg(format!(
                "query has dim {}, index has dim {}",
                point.len(),
                self.dim
            )));
        }
        if k == 0 || k > self.labels.len() {
            return Err(Error::arg(format!(
                "k must be in 1..={}, got {k}",
                self.labels.len()
            )));
        }
        if point.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(
                "query point has non-finite components".into(),
            ));
        }
        Ok(if self.normalize {
            normalized(point).collect::<Vec<_>>().into()
        } else {
            point.into()
        })
    }

    fn ranked(&self, best: &[(f64, usize)]) -> RankedLabels {
        RankedLabels {
            entries: best
                .iter()
                .map(|&(d2, i)| Neighbor {
                    label: self.labels[i].clone(),
                    distance: d2.sqrt(),
                })
                .collect(),
        }
    }
}

fn normalized(v: &[f32]) -> impl Iterator<Item = f32> + '_ {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let scale = if norm > 0.0 { 1.0 / norm } else { 1.0 };
    v.iter().map(move |&x| (x as f64 * scale) as f32)
}

/// Squared Euclidean distance with f64 accumulation.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

#[inline]
fn candidate_cmp(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f32,
        left: usize,
        right: usize,
    },
}

/// KD-tree over class vectors. Splits at the median of the axis with the
/// largest spread; leaves hold at most eight points.
#[derive(Debug, Clone)]
pub struct SemanticIndex {
    points: PointSet,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Builds an index over `candidates` (or every label in `cv`).
pub fn build_index(cv: &ClassVectorSet, candidates: Option<&[String]>) -> Result<SemanticIndex> {
    SemanticIndex::build(cv, candidates, IndexOptions::default())
}

impl SemanticIndex {
    pub fn build(
        cv: &ClassVectorSet,
        candidates: Option<&[String]>,
        options: IndexOptions,
    ) -> Result<Self> {
        let points = PointSet::new(cv, candidates, options)?;
        let n = points.labels.len();
        let mut index = Self {
            order: (0..n).collect(),
            nodes: Vec::with_capacity(2 * n / LEAF_SIZE + 1),
            points,
        };
        index.build_node(0, n);
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let dim = self.points.dim;
        let mut best_axis = 0;
        let mut best_spread = 0.0f32;
        for axis in 0..dim {
            let (lo, hi) = self.order[start..end].iter().fold(
                (f32::INFINITY, f32::NEG_INFINITY),
                |(lo, hi), &i| {
                    let x = self.points.point(i)[axis];
                    (lo.min(x), hi.max(x))
                },
            );
            if hi - lo > best_spread {
                best_spread = hi - lo;
                best_axis = axis;
            }
        }
        if best_spread == 0.0 {
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points.point(a)[best_axis]
                .total_cmp(&points.point(b)[best_axis])
                .then(a.cmp(&b))
        });
        let value = self.points.point(self.order[mid])[best_axis];
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis: best_axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn options(&self) -> IndexOptions {
        IndexOptions {
            normalize: self.points.normalize,
        }
    }

    fn search(&self, node: usize, q: &[f32], k: usize, best: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = (squared_distance(q, self.points.point(i)), i);
                    if best.len() == k {
                        if candidate_cmp(&cand, &best[k - 1]) != Ordering::Less {
                            continue;
                        }
                        best.pop();
                    }
                    let at = best
                        .binary_search_by(|b| candidate_cmp(b, &cand))
                        .unwrap_or_else(|e| e);
                    best.insert(at, cand);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] as f64 - value as f64;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, k, best);
                // `<=` keeps equidistant points with a smaller label reachable.
                if best.len() < k || diff * diff <= best[k - 1].0 {
                    self.search(far, q, k, best);
                }
            }
        }
    }
}

impl NeighborSearch for SemanticIndex {
    fn dim(&self) -> usize {
        self.points.dim
    }

    fn labels(&self) -> &[String] {
        &self.points.labels
    }

    fn query_k_nearest(&self, point: &[f32], k: usize) -> Result<RankedLabels> {
        let q = self.points.prepare_query(point, k)?;
        let mut best = Vec::with_capacity(k + 1);
        self.search(0, &q, k, &mut best);
        Ok(self.points.ranked(&best))
    }
}

/// Exhaustive O(N·d) scan with the same metric and tie-break as the tree.
#[derive(Debug, Clone)]
pub struct LinearScan {
    points: PointSet,
}

impl LinearScan {
    pub fn build(
        cv: &ClassVectorSet,
        candidates: Option<&[String]>,
        options: IndexOptions,
    ) -> Result<Self> {
        Ok(Self {
            points: PointSet::new(cv, candidates, options)?,
        })
    }
}

impl NeighborSearch for LinearScan {
    fn dim(&self) -> usize {
        self.points.dim
    }

    fn labels(&self) -> &[String] {
        &self.points.labels
    }

    fn query_k_nearest(&self, point: &[f32], k: usize) -> Result<RankedLabels> {
        let q = self.points.prepare_query(point, k)?;
        let mut all: Vec<(f64, usize)> = (0..self.points.labels.len())
            .map(|i| (squared_distance(&q, self.points.point(i)), i))
            .collect();
        all.sort_by(candidate_cmp);
        all.truncate(k);
        Ok(self.points.ranked(&all))
    }
}
