use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::moments::{split_position, LateMoments, SampleMoments};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Tolerance used for exact (population) moments.
pub const POPULATION_EPSILON: f64 = 1e-9;

/// `P(D = 1 | w, z)` per cell, `p[w * z_card + z]`, `None` for empty cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityTable {
    pub w_card: usize,
    pub z_card: usize,
    pub p: Vec<Option<f64>>,
    pub count: Vec<usize>,
    pub population: bool,
    /// every observed cell is all-treated or all-untreated
    pub degenerate: bool,
}

impl PropensityTable {
    pub fn from_moments(m: &dyn LateMoments) -> Self {
        let (wc, zc) = (m.w_card(), m.z_card());
        let cells: Vec<_> = (0..wc).flat_map(|w| (0..zc).map(move |z| (w, z))).collect();
        let nodes: Vec<_> = cells.iter().map(|&(w, z)| m.node(w, z)).collect();
        let p: Vec<Option<f64>> = nodes.iter().map(|c| c.map(|c| c.p)).collect();
        let observed: Vec<f64> = p.iter().flatten().copied().collect();
        let degenerate = observed.iter().all(|&x| x == 0.0) || observed.iter().all(|&x| x == 1.0);
        PropensityTable {
            w_card: wc,
            z_card: zc,
            p,
            count: nodes.iter().map(|c| c.map_or(0, |c| c.count)).collect(),
            population: m.is_population(),
            degenerate,
        }
    }

    pub fn get(&self, w: usize, z: usize) -> Option<f64> {
        if w >= self.w_card || z >= self.z_card {
            return None;
        }
        self.p[w * self.z_card + z]
    }

    /// Propensity strictly inside `(0, 1)`.
    pub fn interior(&self, w: usize, z: usize) -> Option<f64> {
        self.get(w, z).filter(|&p| p > 0.0 && p < 1.0)
    }

    /// Linear interpolation at knot position `pos`.
    pub fn interpolate(&self, pos: f64, z: usize) -> Option<f64> {
        let (j, t) = split_position(pos, self.w_card)?;
        let a = self.get(j, z)?;
        if t == 0.0 {
            return Some(a);
        }
        Some(a + t * (self.get(j + 1, z)? - a))
    }

    fn count(&self, w: usize, z: usize) -> usize {
        self.count[w * self.z_card + z]
    }

    /// Two standard errors of `P(a, z) - P(b, z)` under the pooled propensity;
    /// the population tolerance for exact moments.
    pub fn default_epsilon(&self, a: usize, b: usize, z: usize) -> Option<f64> {
        if self.population {
            return Some(POPULATION_EPSILON);
        }
        let (pa, pb) = (self.get(a, z)?, self.get(b, z)?);
        let (na, nb) = (self.count(a, z) as f64, self.count(b, z) as f64);
        let pooled = (na * pa + nb * pb) / (na + nb);
        Some(2.0 * (pooled * (1.0 - pooled) * (1.0 / na + 1.0 / nb)).sqrt())
    }
}

/// Cell propensities of a dataset with binary treatment.
pub fn estimate_propensity(data: &Dataset) -> Result<PropensityTable> {
    let table = PropensityTable::from_moments(&SampleMoments::from_dataset(data)?);
    if table.degenerate {
        log::warn!("treatment does not vary within any (w, z) cell; no compliers exist");
    }
    Ok(table)
}

/// A value `z` at which `w` and `w'` have (approximately) equal propensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrrelevanceMatch {
    pub z: usize,
    pub p_w: f64,
    pub p_w_prime: f64,
    pub gap: f64,
    pub epsilon: f64,
}

/// All `z` with `|P(w, z) - P(w', z)| <= epsilon` and both propensities in
/// `(0, 1)`, closest first. `epsilon = None` uses the table default per `z`.
pub fn find_local_irrelevance(
    table: &PropensityTable,
    w: usize,
    w_prime: usize,
    epsilon: Option<f64>,
) -> Vec<IrrelevanceMatch> {
    let mut out: Vec<IrrelevanceMatch> = (0..table.z_card)
        .filter_map(|z| {
            let p_w = table.interior(w, z)?;
            let p_w_prime = table.interior(w_prime, z)?;
            let epsilon = epsilon.or_else(|| table.default_epsilon(w, w_prime, z))?;
            let gap = (p_w - p_w_prime).abs();
            (gap <= epsilon).then_some(IrrelevanceMatch {
                z,
                p_w,
                p_w_prime,
                gap,
                epsilon,
            })
        })
        .collect();
    out.sort_by(|a, b| a.gap.total_cmp(&b.gap).then(a.z.cmp(&b.z)));
    out
}

/// Undirected link `a < b` through `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub z: usize,
    pub gap: f64,
}

/// One oriented hop of a path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hop {
    pub from: usize,
    pub to: usize,
    pub z: usize,
}

/// Graph on W knots with an edge whenever some `z` makes the two knots
/// locally irrelevant. Connected components are the sets `I_W(w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrrelevanceGraph {
    pub w_card: usize,
    pub edges: Vec<Edge>,
}

pub fn build_irrelevance_graph(table: &PropensityTable, epsilon: Option<f64>) -> IrrelevanceGraph {
    let mut edges = Vec::new();
    for a in 0..table.w_card {
        for b in a + 1..table.w_card {
            for m in find_local_irrelevance(table, a, b, epsilon) {
                edges.push(Edge {
                    a,
                    b,
                    z: m.z,
                    gap: m.gap,
                });
            }
        }
    }
    IrrelevanceGraph {
        w_card: table.w_card,
        edges,
    }
}

impl IrrelevanceGraph {
    /// Closest-propensity edge per linked pair.
    fn best_links(&self) -> BTreeMap<(usize, usize), Edge> {
        let mut best: BTreeMap<(usize, usize), Edge> = BTreeMap::new();
        for e in &self.edges {
            best.entry((e.a, e.b))
                .and_modify(|cur| {
                    if e.gap < cur.gap {
                        *cur = *e;
                    }
                })
                .or_insert(*e);
        }
        best
    }

    /// Sorted neighbour lists.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.w_card];
        for &(a, b) in self.best_links().keys() {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Knots reachable from `w`, including `w`, ascending.
    pub fn component(&self, w: usize) -> Vec<usize> {
        if w >= self.w_card {
            return Vec::new();
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.w_card];
        let mut queue = VecDeque::from([w]);
        seen[w] = true;
        while let Some(v) = queue.pop_front() {
            for &n in &adj[v] {
                if !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        (0..self.w_card).filter(|&v| seen[v]).collect()
    }

    /// Share of knots in the component of `w`.
    pub fn coverage(&self, w: usize) -> f64 {
        self.component(w).len() as f64 / self.w_card as f64
    }

    /// Fewest-hop path from `from` to `to`; empty when they coincide.
    pub fn path(&self, from: usize, to: usize) -> Option<Vec<Hop>> {
        if from >= self.w_card || to >= self.w_card {
            return None;
        }
        let links = self.best_links();
        let adj = self.adjacency();
        let mut parent = vec![usize::MAX; self.w_card];
        parent[from] = from;
        let mut queue = VecDeque::from([from]);
        while let Some(v) = queue.pop_front() {
            if v == to {
                break;
            }
            for &n in &adj[v] {
                if parent[n] == usize::MAX {
                    parent[n] = v;
                    queue.push_back(n);
                }
            }
        }
        if parent[to] == usize::MAX {
            return None;
        }
        let mut hops = Vec::new();
        let mut v = to;
        while v != from {
            let u = parent[v];
            let z = links[&(u.min(v), u.max(v))].z;
            hops.push(Hop { from: u, to: v, z });
            v = u;
        }
        hops.reverse();
        Some(hops)
    }

    pub fn require_path(&self, from: usize, to: usize) -> Result<Vec<Hop>> {
        self.path(from, to).ok_or_else(|| {
            Error::not_identified(
                format!(
                    "no local-irrelevance chain links W knots {} and {}: no z equalizes their \
                     propensities, directly or through intermediate knots",
                    from + 1,
                    to + 1
                ),
                None,
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::bundled;
    use crate::late::PopulationMoments;

    fn table(p: &[[f64; 2]], population: bool) -> PropensityTable {
        PropensityTable {
            w_card: p.len(),
            z_card: 2,
            p: p.iter().flat_map(|r| r.iter().map(|&x| Some(x))).collect(),
            count: vec![100; 2 * p.len()],
            population,
            degenerate: false,
        }
    }

    #[test]
    fn sample_epsilon_is_two_pooled_standard_errors() {
        let t = table(&[[0.5, 0.2], [0.5, 0.3]], false);
        let eps = t.default_epsilon(0, 1, 0).unwrap();
        assert!((eps - 2.0 * (0.25_f64 * 0.02).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn matches_are_sorted_and_exclude_boundary_propensities() {
        let t = table(&[[0.40, 1.0], [0.43, 1.0]], false);
        let m = find_local_irrelevance(&t, 0, 1, Some(0.05));
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].z, 0);
        let t = table(&[[0.40, 0.50], [0.43, 0.51]], false);
        let m = find_local_irrelevance(&t, 0, 1, Some(0.05));
        assert_eq!(m.iter().map(|x| x.z).collect::<Vec<_>>(), vec![1, 0]);
    }

    #[test]
    fn chain_design_links_through_the_middle_knot() {
        let m = PopulationMoments::new(&bundled::late_chain());
        let t = PropensityTable::from_moments(&m);
        let g = build_irrelevance_graph(&t, None);
        assert_eq!(g.adjacency(), vec![vec![1], vec![0, 2], vec![1]]);
        assert!(find_local_irrelevance(&t, 0, 2, None).is_empty());
        let path = g.path(0, 2).unwrap();
        assert_eq!(
            path,
            vec![
                Hop {
                    from: 0,
                    to: 1,
                    z: 0
                },
                Hop {
                    from: 1,
                    to: 2,
                    z: 1
                }
            ]
        );
        assert_eq!(g.component(2), vec![0, 1, 2]);
        assert!(g.path(1, 1).unwrap().is_empty());
    }

    #[test]
    fn missing_link_is_reported_as_not_identified() {
        let t = table(&[[0.2, 0.3], [0.6, 0.7]], true);
        let g = build_irrelevance_graph(&t, None);
        let err = g.require_path(0, 1).unwrap_err();
        assert!(err.is_identification_failure());
        assert_eq!(g.coverage(0), 0.5);
    }
}
