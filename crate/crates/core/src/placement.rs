//! DULR-type PMU placement.
//!
//! A DULR sits at one end of a line. Each selected endpoint costs `Δ`, and
//! every substation that receives at least one endpoint costs its outage
//! cost `c_i` once. A bus is observed when some incident line carries a
//! DULR at either end: the relay measures its own bus voltage and the line
//! current, which gives the far-end voltage too. With `strict` set, only
//! an endpoint located at the bus itself observes it.
//!
//! The exact solver is a depth-first branch and bound over endpoint
//! selections. It branches on the uncovered bus with the fewest remaining
//! candidates; in each child one candidate is taken and the previously
//! tried candidates are excluded, so no selection is visited twice.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::{self, BusId, NetworkModel};

const COST_EPS: f64 = 1e-9;

/// Default node budget for [`SolveMode::Exact`].
pub const DEFAULT_NODE_BUDGET: u64 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum End {
    /// The end at the smaller bus id.
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveMode {
    Exact,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementProblem {
    pub buses: Vec<BusId>,
    /// Vertex indices `(low, high)` per edge.
    pub edges: Vec<(usize, usize)>,
    pub substation_of: Vec<usize>,
    pub substation_costs: Vec<f64>,
    pub dulr_cost: f64,
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementSolution {
    /// `(edge index, end)`, sorted.
    pub endpoints: Vec<(usize, End)>,
    pub disrupted: Vec<usize>,
    pub total_cost: f64,
    pub pmu_buses: Vec<BusId>,
    /// False when the exact search ran out of budget.
    pub proven_optimal: bool,
    pub nodes: u64,
}

impl PlacementProblem {
    pub fn new(
        buses: Vec<BusId>,
        edges: Vec<(usize, usize)>,
        substation_of: Vec<usize>,
        substation_costs: Vec<f64>,
        dulr_cost: f64,
        strict: bool,
    ) -> Result<Self> {
        let n = buses.len();
        if substation_of.len() != n {
            return Err(Error::Placement("one substation per bus required".into()));
        }
        if substation_of.iter().any(|&s| s >= substation_costs.len()) {
            return Err(Error::Placement("substation index out of range".into()));
        }
        if substation_costs.iter().chain([&dulr_cost]).any(|c| !(*c >= 0.0)) {
            return Err(Error::Placement("costs must be non-negative".into()));
        }
        let mut degree = vec![0usize; n];
        let mut canon = Vec::with_capacity(edges.len());
        for &(a, b) in &edges {
            if a >= n || b >= n || a == b {
                return Err(Error::Placement(format!("bad edge ({a}, {b})")));
            }
            degree[a] += 1;
            degree[b] += 1;
            canon.push(if buses[a] <= buses[b] { (a, b) } else { (b, a) });
        }
        if let Some(v) = degree.iter().position(|&d| d == 0) {
            return Err(Error::Placement(format!("bus {} has no incident edge", buses[v])));
        }
        Ok(PlacementProblem {
            buses,
            edges: canon,
            substation_of,
            substation_costs,
            dulr_cost,
            strict,
        })
    }

    /// Every branch is an edge; substations group transformer-connected buses.
    pub fn from_network(net: &NetworkModel, substation_cost: f64, dulr_cost: f64, strict: bool) -> Result<Self> {
        let part = grid_model::group_substations(net, substation_cost);
        let group_of = part.group_of();
        let substation_of = net.buses.iter().map(|b| group_of[b]).collect();
        PlacementProblem::new(
            net.buses.clone(),
            net.branch_ends(),
            substation_of,
            part.costs,
            dulr_cost,
            strict,
        )
    }

    fn n_endpoints(&self) -> usize {
        2 * self.edges.len()
    }

    /// Vertex hosting endpoint `j`.
    fn host(&self, j: usize) -> usize {
        let (a, b) = self.edges[j / 2];
        if j % 2 == 0 {
            a
        } else {
            b
        }
    }

    /// Vertices observed by endpoint `j`.
    fn covers(&self, j: usize) -> Vec<usize> {
        let (a, b) = self.edges[j / 2];
        if self.strict {
            vec![self.host(j)]
        } else {
            vec![a, b]
        }
    }

    fn endpoint(j: usize) -> (usize, End) {
        (j / 2, if j % 2 == 0 { End::Low } else { End::High })
    }

    fn index((e, end): (usize, End)) -> usize {
        2 * e + usize::from(end == End::High)
    }

    /// Objective value of a selection, recomputed from scratch.
    pub fn cost_of(&self, endpoints: &[(usize, End)]) -> f64 {
        let subs: BTreeSet<usize> = endpoints
            .iter()
            .map(|&ep| self.substation_of[self.host(Self::index(ep))])
            .collect();
        let sub_cost: f64 = subs.iter().map(|&s| self.substation_costs[s]).sum();
        sub_cost + self.dulr_cost * endpoints.len() as f64
    }

    fn solution(&self, mut sel: Vec<usize>, proven_optimal: bool, nodes: u64) -> PlacementSolution {
        sel.sort_unstable();
        sel.dedup();
        let endpoints: Vec<(usize, End)> = sel.iter().map(|&j| Self::endpoint(j)).collect();
        let disrupted: BTreeSet<usize> = sel.iter().map(|&j| self.substation_of[self.host(j)]).collect();
        let pmu_buses: BTreeSet<BusId> = sel.iter().map(|&j| self.buses[self.host(j)]).collect();
        PlacementSolution {
            total_cost: self.cost_of(&endpoints),
            endpoints,
            disrupted: disrupted.into_iter().collect(),
            pmu_buses: pmu_buses.into_iter().collect(),
            proven_optimal,
            nodes,
        }
    }
}

/// True iff every bus is observed by the selected endpoints.
pub fn verify_observability(sol: &PlacementSolution, p: &PlacementProblem) -> bool {
    let mut seen = vec![false; p.buses.len()];
    for &ep in &sol.endpoints {
        if ep.0 >= p.edges.len() {
            return false;
        }
        for v in p.covers(PlacementProblem::index(ep)) {
            seen[v] = true;
        }
    }
    seen.iter().all(|&s| s)
}

pub fn solve_placement(p: &PlacementProblem, mode: SolveMode) -> PlacementSolution {
    match mode {
        SolveMode::Greedy => greedy(p),
        SolveMode::Exact => exact(p, DEFAULT_NODE_BUDGET),
    }
}

/// Weighted set cover: repeatedly take the endpoint with the most newly
/// observed buses per unit marginal cost, then drop redundant picks.
pub fn greedy(p: &PlacementProblem) -> PlacementSolution {
    let n = p.buses.len();
    let mut seen = vec![false; n];
    let mut left = n;
    let mut used = vec![false; p.substation_costs.len()];
    let mut sel = Vec::new();
    while left > 0 {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..p.n_endpoints() {
            let gain = p.covers(j).iter().filter(|&&v| !seen[v]).count();
            if gain == 0 {
                continue;
            }
            let s = p.substation_of[p.host(j)];
            let marginal = p.dulr_cost + if used[s] { 0.0 } else { p.substation_costs[s] };
            let score = if marginal <= 0.0 {
                f64::INFINITY
            } else {
                gain as f64 / marginal
            };
            if best.is_none_or(|(b, _)| score > b + COST_EPS) {
                best = Some((score, j));
            }
        }
        let (_, j) = best.expect("every bus has an incident edge");
        for v in p.covers(j) {
            if !seen[v] {
                seen[v] = true;
                left -= 1;
            }
        }
        used[p.substation_of[p.host(j)]] = true;
        sel.push(j);
    }
    // Drop picks whose buses are all observed by others, most recent first.
    let mut count = vec![0u32; n];
    for &j in &sel {
        for v in p.covers(j) {
            count[v] += 1;
        }
    }
    for k in (0..sel.len()).rev() {
        let cov = p.covers(sel[k]);
        if cov.iter().all(|&v| count[v] > 1) {
            for v in cov {
                count[v] -= 1;
            }
            sel.remove(k);
        }
    }
    p.solution(sel, false, 0)
}

struct Search<'a> {
    p: &'a PlacementProblem,
    cands: Vec<Vec<usize>>,
    cover_count: Vec<u32>,
    uncovered: usize,
    sub_use: Vec<u32>,
    excluded: Vec<bool>,
    selected: Vec<usize>,
    cost: f64,
    best_cost: f64,
    best: Vec<usize>,
    nodes: u64,
    budget: u64,
    exhausted: bool,
}

impl Search<'_> {
    fn marginal(&self, j: usize) -> f64 {
        let s = self.p.substation_of[self.p.host(j)];
        self.p.dulr_cost
            + if self.sub_use[s] > 0 {
                0.0
            } else {
                self.p.substation_costs[s]
            }
    }

    fn take(&mut self, j: usize) {
        self.cost += self.marginal(j);
        self.sub_use[self.p.substation_of[self.p.host(j)]] += 1;
        for v in self.p.covers(j) {
            if self.cover_count[v] == 0 {
                self.uncovered -= 1;
            }
            self.cover_count[v] += 1;
        }
        self.selected.push(j);
    }

    fn undo(&mut self, j: usize) {
        self.selected.pop();
        for v in self.p.covers(j) {
            self.cover_count[v] -= 1;
            if self.cover_count[v] == 0 {
                self.uncovered += 1;
            }
        }
        self.sub_use[self.p.substation_of[self.p.host(j)]] -= 1;
        self.cost -= self.marginal(j);
    }

    /// Admissible bound on the cost still needed.
    fn lower_bound(&self) -> f64 {
        let per = if self.p.strict { 1 } else { 2 };
        let dulr = self.p.dulr_cost * self.uncovered.div_ceil(per) as f64;
        // Uncovered buses whose live candidates all sit in unused
        // substations, with pairwise disjoint substation sets, each force a
        // distinct new substation.
        let mut claimed = BTreeSet::new();
        let mut subs = 0.0;
        for v in 0..self.p.buses.len() {
            if self.cover_count[v] > 0 {
                continue;
            }
            let mut set = BTreeSet::new();
            let mut free = false;
            for &j in &self.cands[v] {
                if self.excluded[j] {
                    continue;
                }
                let s = self.p.substation_of[self.p.host(j)];
                if self.sub_use[s] > 0 {
                    free = true;
                    break;
                }
                set.insert(s);
            }
            if free || set.is_empty() || set.iter().any(|s| claimed.contains(s)) {
                continue;
            }
            subs += set
                .iter()
                .map(|&s| self.p.substation_costs[s])
                .fold(f64::INFINITY, f64::min);
            claimed.extend(set);
        }
        dulr + subs
    }

    fn run(&mut self) {
        self.nodes += 1;
        if self.nodes > self.budget {
            self.exhausted = true;
            return;
        }
        if self.uncovered == 0 {
            if self.cost < self.best_cost - COST_EPS {
                self.best_cost = self.cost;
                self.best = self.selected.clone();
            }
            return;
        }
        if self.cost + self.lower_bound() >= self.best_cost - COST_EPS {
            return;
        }
        let mut pick: Option<(usize, usize)> = None;
        for v in 0..self.p.buses.len() {
            if self.cover_count[v] > 0 {
                continue;
            }
            let live = self.cands[v].iter().filter(|&&j| !self.excluded[j]).count();
            if pick.is_none_or(|(_, k)| live < k) {
                pick = Some((v, live));
            }
        }
        let (v, live) = pick.expect("uncovered bus exists");
        if live == 0 {
            return;
        }
        let mut options: Vec<usize> = self.cands[v].iter().copied().filter(|&j| !self.excluded[j]).collect();
        options.sort_by(|&a, &b| {
            let gain = |j: usize| self.p.covers(j).iter().filter(|&&u| self.cover_count[u] == 0).count();
            self.marginal(a)
                .total_cmp(&self.marginal(b))
                .then(gain(b).cmp(&gain(a)))
                .then(a.cmp(&b))
        });
        let mut banned = Vec::new();
        for j in options {
            self.take(j);
            self.run();
            self.undo(j);
            if self.exhausted {
                break;
            }
            self.excluded[j] = true;
            banned.push(j);
        }
        for j in banned {
            self.excluded[j] = false;
        }
    }
}

/// Branch and bound seeded with the greedy solution.
pub fn exact(p: &PlacementProblem, budget: u64) -> PlacementSolution {
    let warm = greedy(p);
    let mut cands = vec![Vec::new(); p.buses.len()];
    for j in 0..p.n_endpoints() {
        for v in p.covers(j) {
            cands[v].push(j);
        }
    }
    let mut s = Search {
        p,
        cands,
        cover_count: vec![0; p.buses.len()],
        uncovered: p.buses.len(),
        sub_use: vec![0; p.substation_costs.len()],
        excluded: vec![false; p.n_endpoints()],
        selected: Vec::new(),
        cost: 0.0,
        best_cost: warm.total_cost,
        best: warm.endpoints.iter().map(|&ep| PlacementProblem::index(ep)).collect(),
        nodes: 0,
        budget,
        exhausted: false,
    };
    s.run();
    let (best, nodes, done) = (std::mem::take(&mut s.best), s.nodes, !s.exhausted);
    p.solution(best, done, nodes)
}

/// Exact minimum by enumerating every endpoint subset. Small problems only.
pub fn brute_force_cost(p: &PlacementProblem) -> Option<f64> {
    let m = p.n_endpoints();
    assert!(m <= 20, "brute force limited to 10 edges");
    let mut best: Option<f64> = None;
    for mask in 0u32..(1u32 << m) {
        let sel: Vec<(usize, End)> = (0..m)
            .filter(|j| mask >> j & 1 == 1)
            .map(PlacementProblem::endpoint)
            .collect();
        let sol = PlacementSolution {
            endpoints: sel.clone(),
            disrupted: Vec::new(),
            total_cost: 0.0,
            pmu_buses: Vec::new(),
            proven_optimal: false,
            nodes: 0,
        };
        if verify_observability(&sol, p) {
            let c = p.cost_of(&sel);
            if best.is_none_or(|b| c < b) {
                best = Some(c);
            }
        }
    }
    best
}

/// Short human-readable summary.
pub fn summary(p: &PlacementProblem, sol: &PlacementSolution) -> String {
    let mut per_sub: BTreeMap<usize, usize> = BTreeMap::new();
    for &ep in &sol.endpoints {
        *per_sub.entry(p.substation_of[p.host(PlacementProblem::index(ep))]).or_default() += 1;
    }
    format!(
        "buses {} | edges {} | DULRs {} | substations disrupted {} | PMU buses {} | cost {:.3} | optimal {}",
        p.buses.len(),
        p.edges.len(),
        sol.endpoints.len(),
        per_sub.len(),
        sol.pmu_buses.len(),
        sol.total_cost,
        if sol.proven_optimal { "proven" } else { "not proven" }
    )
}

/// Random connected problem with 2 to 6 buses and at most `max_edges`
/// edges (beyond the spanning tree, which may need up to 5).
pub fn random_problem(rng: &mut impl Rng, max_edges: usize) -> PlacementProblem {
    let n = rng.random_range(2..=6usize);
    let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (rng.random_range(0..v), v)).collect();
    while edges.len() < max_edges && rng.random_bool(0.6) {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            edges.push((a, b));
        }
    }
    let subs = rng.random_range(1..=n);
    let substation_of = (0..n).map(|v| if v < subs { v } else { rng.random_range(0..subs) }).collect();
    let costs = (0..subs).map(|_| rng.random_range(0..5) as f64 * 0.5).collect();
    let strict = rng.random_bool(0.2);
    PlacementProblem::new((1..=n as u32).collect(), edges, substation_of, costs, 0.1 * rng.random_range(0..4) as f64, strict)
        .unwrap()
}
