//! Static network description, substation grouping, wind conversion and
//! island-cut enumeration.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque bus label. Labels need not be contiguous.
pub type BusId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Line,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    pub kind: BranchKind,
    /// Series susceptance magnitude, per unit on the system base.
    pub b_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: BusId,
    /// Inertia constant on the machine base, seconds.
    pub h_s: f64,
    pub rated_mw: f64,
    #[serde(default)]
    pub inverter_based: bool,
    /// Transient reactance on the system base. Defaults to 0.3 pu on the
    /// machine base when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xd_pu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub bus: BusId,
    pub p_mw: f64,
    #[serde(default)]
    pub q_mvar: f64,
}

fn default_base_mva() -> f64 {
    100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_base_mva")]
    pub base_mva: f64,
    pub base_frequency_hz: f64,
    pub buses: Vec<BusId>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub loads: Vec<Load>,
}

const NET18: &str = include_str!("../../../data/net18.json");
const NET118: &str = include_str!("../../../data/net118.json");

impl NetworkModel {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let net: NetworkModel = serde_json::from_str(text).map_err(|source| Error::Parse {
            what: "network".into(),
            source,
        })?;
        net.validate()?;
        Ok(net)
    }

    /// One of the networks shipped in `data/`: `net18` or `net118`.
    pub fn bundled(name: &str) -> Result<Self> {
        match name {
            "net18" => Self::from_json_str(NET18),
            "net118" => Self::from_json_str(NET118),
            other => Err(Error::Validation(format!("unknown bundled network {other:?}"))),
        }
    }

    /// Bundled name or a path to a network JSON file.
    pub fn resolve(id: &str) -> Result<Self> {
        match id {
            "net18" | "net118" => Self::bundled(id),
            path => load_network(path),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let index = self.bus_index();
        if index.len() != self.buses.len() {
            return Err(Error::Validation("duplicate bus label".into()));
        }
        if self.buses.is_empty() {
            return Err(Error::Validation("no buses".into()));
        }
        if !(self.base_frequency_hz > 0.0) || !(self.base_mva > 0.0) {
            return Err(Error::Validation("base frequency and MVA must be positive".into()));
        }
        for (i, br) in self.branches.iter().enumerate() {
            for end in [br.from, br.to] {
                if !index.contains_key(&end) {
                    return Err(Error::Validation(format!(
                        "branch {i} references missing bus {end}"
                    )));
                }
            }
            if br.from == br.to {
                return Err(Error::Validation(format!("branch {i} is a self loop")));
            }
            if !(br.b_pu > 0.0) || !br.b_pu.is_finite() {
                return Err(Error::Validation(format!("branch {i} susceptance must be positive")));
            }
        }
        for (i, g) in self.generators.iter().enumerate() {
            if !index.contains_key(&g.bus) {
                return Err(Error::Validation(format!(
                    "generator {i} references missing bus {}",
                    g.bus
                )));
            }
            if !(g.rated_mw > 0.0) {
                return Err(Error::Validation(format!("generator {i} rating must be positive")));
            }
            if g.inverter_based {
                if g.h_s != 0.0 {
                    return Err(Error::Validation(format!(
                        "inverter-based generator {i} must have zero inertia"
                    )));
                }
            } else if !(g.h_s > 0.0) {
                return Err(Error::Validation(format!(
                    "synchronous generator {i} needs positive inertia"
                )));
            }
        }
        for (i, l) in self.loads.iter().enumerate() {
            if !index.contains_key(&l.bus) {
                return Err(Error::Validation(format!(
                    "load {i} references missing bus {}",
                    l.bus
                )));
            }
        }
        let (_, count) = components(self, &vec![false; self.branches.len()]);
        if count != 1 {
            return Err(Error::Validation(format!("graph has {count} connected components")));
        }
        Ok(())
    }

    pub fn bus_index(&self) -> HashMap<BusId, usize> {
        self.buses.iter().enumerate().map(|(i, &b)| (b, i)).collect()
    }

    /// Branch endpoints as bus indices.
    pub fn branch_ends(&self) -> Vec<(usize, usize)> {
        let index = self.bus_index();
        self.branches
            .iter()
            .map(|br| (index[&br.from], index[&br.to]))
            .collect()
    }

    /// Adjacency list of `(neighbor index, branch id)` per bus index.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.buses.len()];
        for (id, (a, b)) in self.branch_ends().into_iter().enumerate() {
            adj[a].push((b, id));
            adj[b].push((a, id));
        }
        adj
    }

    pub fn total_capacity_mw(&self) -> f64 {
        self.generators.iter().map(|g| g.rated_mw).sum()
    }

    pub fn inverter_capacity_mw(&self) -> f64 {
        self.generators
            .iter()
            .filter(|g| g.inverter_based)
            .map(|g| g.rated_mw)
            .sum()
    }
}

pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    NetworkModel::from_json_str(&text)
}

/// Connected components over branches not flagged in `removed`.
/// Returns the component id of each bus index and the component count.
pub fn components(net: &NetworkModel, removed: &[bool]) -> (Vec<usize>, usize) {
    let n = net.buses.len();
    let adj = net.adjacency();
    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = count;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            for &(v, id) in &adj[u] {
                if !removed[id] && comp[v] == usize::MAX {
                    comp[v] = count;
                    queue.push_back(v);
                }
            }
        }
        count += 1;
    }
    (comp, count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstationPartition {
    pub groups: Vec<Vec<BusId>>,
    pub costs: Vec<f64>,
}

impl SubstationPartition {
    /// Group index of every bus.
    pub fn group_of(&self) -> HashMap<BusId, usize> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(g, buses)| buses.iter().map(move |&b| (b, g)))
            .collect()
    }
}

/// Substations are the connected components of the transformer-only
/// subgraph. Groups are ordered by their smallest bus position in `net.buses`.
pub fn group_substations(net: &NetworkModel, default_cost: f64) -> SubstationPartition {
    let removed: Vec<bool> = net
        .branches
        .iter()
        .map(|br| br.kind != BranchKind::Transformer)
        .collect();
    let (comp, count) = components(net, &removed);
    let mut groups = vec![Vec::new(); count];
    for (i, &c) in comp.iter().enumerate() {
        groups[c].push(net.buses[i]);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    SubstationPartition {
        costs: vec![default_cost; groups.len()],
        groups,
    }
}

/// A set of removed branches that splits the network into two islands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IslandCut {
    pub removed_branches: Vec<usize>,
    /// Side containing the first bus of the network.
    pub side_a: Vec<BusId>,
    pub side_b: Vec<BusId>,
}

/// Bridges of the graph with `removed` branches deleted, as a per-branch flag.
/// Parallel branches are handled by branch id, so they are never bridges.
pub(crate) fn bridges(adj: &[Vec<(usize, usize)>], removed: &[bool]) -> Vec<bool> {
    struct Dfs<'a> {
        adj: &'a [Vec<(usize, usize)>],
        removed: &'a [bool],
        disc: Vec<usize>,
        low: Vec<usize>,
        time: usize,
        out: Vec<bool>,
    }
    impl Dfs<'_> {
        fn visit(&mut self, u: usize, parent_edge: usize) {
            self.time += 1;
            self.disc[u] = self.time;
            self.low[u] = self.time;
            for k in 0..self.adj[u].len() {
                let (v, id) = self.adj[u][k];
                if self.removed[id] || id == parent_edge {
                    continue;
                }
                if self.disc[v] == 0 {
                    self.visit(v, id);
                    self.low[u] = self.low[u].min(self.low[v]);
                    if self.low[v] > self.disc[u] {
                        self.out[id] = true;
                    }
                } else {
                    self.low[u] = self.low[u].min(self.disc[v]);
                }
            }
        }
    }
    let n = adj.len();
    let mut dfs = Dfs {
        adj,
        removed,
        disc: vec![0; n],
        low: vec![0; n],
        time: 0,
        out: vec![false; removed.len()],
    };
    for u in 0..n {
        if dfs.disc[u] == 0 {
            dfs.visit(u, usize::MAX);
        }
    }
    dfs.out
}

/// Enumerates minimal two-island cuts made of 1..=`max_branches` lines.
///
/// Transformers stay in service (they sit inside substations). Cuts come
/// out ordered by size, then lexicographically by branch id, and at most
/// `max_cuts` are returned. Both islands must hold a generator.
///
/// The search grows the island that excludes the first bus as a connected
/// set, deciding each line on its boundary as either cut or absorbed. A
/// branch dies once the edge-disjoint paths from the island to the buses it
/// must not contain outnumber the lines left in the budget.
pub fn enumerate_island_cuts(
    net: &NetworkModel,
    max_branches: usize,
    max_cuts: usize,
) -> Vec<IslandCut> {
    let n = net.buses.len();
    let ends = net.branch_ends();
    // Contract transformers: node ids follow first appearance by bus index.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (br, &(a, b)) in net.branches.iter().zip(&ends) {
        if br.kind == BranchKind::Transformer {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut node_of = vec![usize::MAX; n];
    let mut root_node = HashMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        let next = root_node.len();
        node_of[i] = *root_node.entry(r).or_insert(next);
    }
    let m = root_node.len();
    let mut has_gen = vec![false; m];
    let index = net.bus_index();
    for g in &net.generators {
        has_gen[node_of[index[&g.bus]]] = true;
    }
    let mut edges = Vec::new();
    let mut adj = vec![Vec::new(); m];
    for (id, (br, &(a, b))) in net.branches.iter().zip(&ends).enumerate() {
        let (u, v) = (node_of[a], node_of[b]);
        if br.kind == BranchKind::Line && u != v {
            adj[u].push((v, edges.len()));
            adj[v].push((u, edges.len()));
            edges.push((u, v, id));
        }
    }

    let mut search = SideSearch {
        adj: &adj,
        edges: &edges,
        budget: max_branches.min(5),
        state: vec![Side::Open; m],
        cut: vec![false; edges.len()],
        cut_list: Vec::new(),
        found: Vec::new(),
    };
    for v in 1..m {
        search.state.fill(Side::Open);
        for s in &mut search.state[..v] {
            *s = Side::Out;
        }
        search.state[v] = Side::In;
        search.grow();
    }

    let mut out: Vec<IslandCut> = search
        .found
        .into_iter()
        .filter(|(inside, _)| {
            let gen_in = (0..m).any(|k| inside[k] && has_gen[k]);
            let gen_out = (0..m).any(|k| !inside[k] && has_gen[k]);
            gen_in && gen_out
        })
        .map(|(inside, mut removed_branches)| {
            removed_branches.sort_unstable();
            let (mut side_a, mut side_b) = (Vec::new(), Vec::new());
            for i in 0..n {
                if inside[node_of[i]] {
                    side_b.push(net.buses[i]);
                } else {
                    side_a.push(net.buses[i]);
                }
            }
            side_a.sort_unstable();
            side_b.sort_unstable();
            IslandCut {
                removed_branches,
                side_a,
                side_b,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.removed_branches.len(), &a.removed_branches)
            .cmp(&(b.removed_branches.len(), &b.removed_branches))
    });
    out.truncate(max_cuts);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Open,
    In,
    Out,
}

struct SideSearch<'a> {
    adj: &'a [Vec<(usize, usize)>],
    /// Contracted line edges `(node, node, branch id)`.
    edges: &'a [(usize, usize, usize)],
    budget: usize,
    state: Vec<Side>,
    cut: Vec<bool>,
    cut_list: Vec<usize>,
    /// Membership of the grown side and the branch ids cut around it.
    found: Vec<(Vec<bool>, Vec<usize>)>,
}

impl SideSearch<'_> {
    fn grow(&mut self) {
        let Some((e, w)) = self.open_boundary_edge() else {
            self.record();
            return;
        };
        let left = self.budget - self.cut_list.len();
        if left > 0 {
            let was = self.state[w];
            self.cut[e] = true;
            self.cut_list.push(e);
            self.state[w] = Side::Out;
            if self.separable(left - 1) {
                self.grow();
            }
            self.state[w] = was;
            self.cut_list.pop();
            self.cut[e] = false;
        }
        if self.state[w] == Side::Open {
            self.state[w] = Side::In;
            if self.separable(left) {
                self.grow();
            }
            self.state[w] = Side::Open;
        }
    }

    /// Lowest uncut edge leaving the grown side, with its outer node.
    fn open_boundary_edge(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize)> = None;
        for (u, &s) in self.state.iter().enumerate() {
            if s != Side::In {
                continue;
            }
            for &(w, e) in &self.adj[u] {
                if self.state[w] != Side::In && !self.cut[e] && best.is_none_or(|(b, _)| e < b) {
                    best = Some((e, w));
                }
            }
        }
        best
    }

    /// Whether at most `left` edge-disjoint uncut paths join the grown side
    /// to the excluded nodes.
    fn separable(&self, left: usize) -> bool {
        let m = self.state.len();
        let mut used = vec![0i8; self.edges.len()];
        for _ in 0..=left {
            // BFS in the residual graph of unit-capacity undirected edges.
            let mut prev: Vec<Option<(usize, usize)>> = vec![None; m];
            let mut seen = vec![false; m];
            let mut queue = VecDeque::new();
            for u in 0..m {
                if self.state[u] == Side::In {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
            let mut sink = None;
            while let Some(u) = queue.pop_front() {
                if self.state[u] == Side::Out {
                    sink = Some(u);
                    break;
                }
                for &(w, e) in &self.adj[u] {
                    if seen[w] || self.cut[e] {
                        continue;
                    }
                    let forward = self.edges[e].0 == u;
                    let flow = if forward { used[e] } else { -used[e] };
                    if flow < 1 {
                        seen[w] = true;
                        prev[w] = Some((u, e));
                        queue.push_back(w);
                    }
                }
            }
            let Some(mut x) = sink else {
                return true;
            };
            while let Some((u, e)) = prev[x] {
                used[e] += if self.edges[e].0 == u { 1 } else { -1 };
                x = u;
            }
        }
        false
    }

    fn record(&mut self) {
        let m = self.state.len();
        let inside: Vec<bool> = self.state.iter().map(|&s| s == Side::In).collect();
        // Minimal only if the other side is connected as well.
        let start = (0..m).find(|&u| !inside[u]).expect("first node stays outside");
        let mut seen = vec![false; m];
        seen[start] = true;
        let mut stack = vec![start];
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &(w, _) in &self.adj[u] {
                if !inside[w] && !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        if count + inside.iter().filter(|&&x| x).count() != m {
            return;
        }
        let ids = self.cut_list.iter().map(|&e| self.edges[e].2).collect();
        self.found.push((inside, ids));
    }
}

/// Converts synchronous machines to inverter-based units, largest first,
/// until inverter-based capacity reaches `fraction` of the total.
pub fn apply_wind_penetration(net: &NetworkModel, fraction: f64) -> Result<NetworkModel> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InfeasiblePenetration(fraction));
    }
    let mut out = net.clone();
    let target = fraction * net.total_capacity_mw();
    let mut converted = net.inverter_capacity_mw();
    let mut order: Vec<usize> = (0..net.generators.len())
        .filter(|&i| !net.generators[i].inverter_based)
        .collect();
    // Stable sort keeps file order among equal ratings.
    order.sort_by(|&a, &b| {
        net.generators[b]
            .rated_mw
            .total_cmp(&net.generators[a].rated_mw)
    });
    let mut remaining_sync = order.len();
    for i in order {
        if converted + 1e-9 >= target {
            break;
        }
        if remaining_sync == 1 {
            return Err(Error::InfeasiblePenetration(fraction));
        }
        let g = &mut out.generators[i];
        g.inverter_based = true;
        g.h_s = 0.0;
        converted += g.rated_mw;
        remaining_sync -= 1;
    }
    if converted + 1e-9 < target {
        return Err(Error::InfeasiblePenetration(fraction));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    /// Subset search over lines with bridge pruning, used as an oracle.
    fn subset_search_cuts(
        net: &NetworkModel,
        max_branches: usize,
        max_cuts: usize,
    ) -> Vec<IslandCut> {
        let adj = net.adjacency();
        let ends = net.branch_ends();
        let index = net.bus_index();
        let mut has_gen = vec![false; net.buses.len()];
        for g in &net.generators {
            has_gen[index[&g.bus]] = true;
        }
        let lines: Vec<usize> = net
            .branches
            .iter()
            .enumerate()
            .filter(|(_, br)| br.kind == BranchKind::Line)
            .map(|(i, _)| i)
            .collect();
    
        let mut search = CutSearch {
            net,
            adj: &adj,
            ends: &ends,
            has_gen: &has_gen,
            lines: &lines,
            removed: vec![false; net.branches.len()],
            prefix: Vec::new(),
            out: Vec::new(),
            max_cuts,
        };
        for size in 1..=max_branches.min(5) {
            if search.out.len() >= max_cuts {
                break;
            }
            search.extend(size, 0);
        }
        search.out
    }
    
    struct CutSearch<'a> {
        net: &'a NetworkModel,
        adj: &'a [Vec<(usize, usize)>],
        ends: &'a [(usize, usize)],
        has_gen: &'a [bool],
        lines: &'a [usize],
        removed: Vec<bool>,
        prefix: Vec<usize>,
        out: Vec<IslandCut>,
        max_cuts: usize,
    }
    
    impl CutSearch<'_> {
        /// `first` is the position in `lines` of the smallest admissible next line.
        fn extend(&mut self, size: usize, first: usize) {
            let bridge = bridges(self.adj, &self.removed);
            if self.prefix.len() + 1 == size {
                for pos in first..self.lines.len() {
                    let e = self.lines[pos];
                    if bridge[e] {
                        self.try_cut(e);
                        if self.out.len() >= self.max_cuts {
                            return;
                        }
                    }
                }
                return;
            }
            for pos in first..self.lines.len() {
                let f = self.lines[pos];
                if bridge[f] {
                    continue;
                }
                self.removed[f] = true;
                self.prefix.push(f);
                self.extend(size, pos + 1);
                self.prefix.pop();
                self.removed[f] = false;
                if self.out.len() >= self.max_cuts {
                    return;
                }
            }
        }
    
        fn try_cut(&mut self, e: usize) {
            self.removed[e] = true;
            let (comp, count) = components(self.net, &self.removed);
            self.removed[e] = false;
            debug_assert_eq!(count, 2);
            // Minimal: every removed line must run between the two islands.
            if self.prefix.iter().any(|&f| {
                let (a, b) = self.ends[f];
                comp[a] == comp[b]
            }) {
                return;
            }
            let mut gen_side = [false; 2];
            for (i, &c) in comp.iter().enumerate() {
                if self.has_gen[i] {
                    gen_side[c] = true;
                }
            }
            if !(gen_side[0] && gen_side[1]) {
                return;
            }
            let mut removed_branches = self.prefix.clone();
            removed_branches.push(e);
            let (mut side_a, mut side_b) = (Vec::new(), Vec::new());
            for (i, &c) in comp.iter().enumerate() {
                if c == comp[0] {
                    side_a.push(self.net.buses[i]);
                } else {
                    side_b.push(self.net.buses[i]);
                }
            }
            side_a.sort_unstable();
            side_b.sort_unstable();
            self.out.push(IslandCut {
                removed_branches,
                side_a,
                side_b,
            });
        }
    }

    use super::*;

    fn line(from: BusId, to: BusId) -> Branch {
        Branch {
            from,
            to,
            kind: BranchKind::Line,
            b_pu: 10.0,
        }
    }

    fn xfmr(from: BusId, to: BusId) -> Branch {
        Branch {
            kind: BranchKind::Transformer,
            ..line(from, to)
        }
    }

    fn gen(bus: BusId, mw: f64) -> Generator {
        Generator {
            bus,
            h_s: 4.0,
            rated_mw: mw,
            inverter_based: false,
            xd_pu: None,
        }
    }

    fn net(buses: Vec<BusId>, branches: Vec<Branch>, generators: Vec<Generator>) -> NetworkModel {
        NetworkModel {
            name: "t".into(),
            base_mva: 100.0,
            base_frequency_hz: 60.0,
            buses,
            branches,
            generators,
            loads: vec![],
        }
    }

    #[test]
    fn bundled_networks_validate() {
        let n18 = NetworkModel::bundled("net18").unwrap();
        assert_eq!(n18.buses.len(), 18);
        for label in [1, 11, 14, 23, 31] {
            assert!(n18.buses.contains(&label));
        }
        assert!(n18.generators.len() >= 2);
        let n118 = NetworkModel::bundled("net118").unwrap();
        assert_eq!(n118.buses.len(), 118);
        assert_eq!(n118.branches.len(), 186);
    }

    #[test]
    fn dangling_branch_rejected() {
        let text = r#"{"base_frequency_hz": 60, "buses": [1, 2],
            "branches": [{"from": 1, "to": 3, "kind": "line", "b_pu": 5}],
            "generators": [], "loads": []}"#;
        assert!(matches!(
            NetworkModel::from_json_str(text),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn disconnected_rejected() {
        let n = net(vec![1, 2, 3], vec![line(1, 2)], vec![]);
        assert!(n.validate().is_err());
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(
            NetworkModel::from_json_str("{\"buses\": ["),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn substations_without_transformers_are_singletons() {
        let n = net(vec![1, 2, 3], vec![line(1, 2), line(2, 3)], vec![]);
        let p = group_substations(&n, 1.0);
        assert_eq!(p.groups, vec![vec![1], vec![2], vec![3]]);
        assert_eq!(p.costs, vec![1.0; 3]);
    }

    #[test]
    fn transformer_joins_substation() {
        let n = net(vec![3, 4, 5], vec![line(3, 4), xfmr(4, 5)], vec![]);
        let p = group_substations(&n, 2.0);
        let of = p.group_of();
        assert_eq!(of[&4], of[&5]);
        assert_ne!(of[&3], of[&4]);
    }

    #[test]
    fn transformer_chain_is_one_group() {
        let n = net(vec![7, 8, 9], vec![xfmr(7, 8), xfmr(8, 9)], vec![]);
        assert_eq!(group_substations(&n, 1.0).groups, vec![vec![7, 8, 9]]);
    }

    #[test]
    fn ring_cuts_split_two_two() {
        let n = net(
            vec![1, 2, 3, 4],
            vec![line(1, 2), line(2, 3), line(3, 4), line(4, 1)],
            vec![gen(1, 100.0), gen(3, 100.0)],
        );
        let cuts = enumerate_island_cuts(&n, 5, 100);
        assert!(!cuts.is_empty());
        for c in &cuts {
            assert_eq!(c.removed_branches.len(), 2);
        }
        // 1 and 3 must be separated: {1,2}|{3,4}, {1,4}|{2,3}, {1}|{2,3,4}, {1,2,4}|{3}
        assert_eq!(cuts.len(), 4);
        assert!(cuts.iter().any(|c| c.side_a.len() == 2 && c.side_b.len() == 2));
    }

    #[test]
    fn tree_bridges_are_single_cuts() {
        let n = net(
            vec![1, 2, 3, 4],
            vec![line(1, 2), line(2, 3), xfmr(2, 4)],
            vec![gen(1, 100.0), gen(3, 50.0)],
        );
        let cuts = enumerate_island_cuts(&n, 3, 100);
        let ids: Vec<_> = cuts.iter().map(|c| c.removed_branches.clone()).collect();
        assert_eq!(ids, vec![vec![0], vec![1]]);
    }

    #[test]
    fn cuts_ordered_and_capped() {
        let n = NetworkModel::bundled("net18").unwrap();
        let all = enumerate_island_cuts(&n, 5, usize::MAX);
        let capped = enumerate_island_cuts(&n, 5, 7);
        assert_eq!(capped.len(), 7);
        assert_eq!(&all[..7], &capped[..]);
        for w in all.windows(2) {
            let (a, b) = (&w[0].removed_branches, &w[1].removed_branches);
            assert!((a.len(), a) < (b.len(), b));
        }
    }

    fn random_net(rng: &mut impl rand::Rng) -> NetworkModel {
        let n = rng.random_range(3..=7u32);
        let buses: Vec<BusId> = (1..=n).collect();
        let mut branches = Vec::new();
        // Spanning tree first so the network is connected.
        for b in 2..=n {
            let a = rng.random_range(1..b);
            branches.push(if rng.random_bool(0.15) { xfmr(a, b) } else { line(a, b) });
        }
        for _ in 0..rng.random_range(0..=6) {
            let a = rng.random_range(1..=n);
            let b = rng.random_range(1..=n);
            if a != b {
                branches.push(line(a, b));
            }
        }
        let generators = buses
            .iter()
            .filter(|_| rng.random_bool(0.5))
            .map(|&b| gen(b, 100.0))
            .collect();
        net(buses, branches, generators)
    }

    #[test]
    fn side_search_matches_subset_search() {
        let mut rng = crate::seed::rng(7, &[]);
        for _ in 0..300 {
            let n = random_net(&mut rng);
            for k in 1..=4 {
                assert_eq!(
                    enumerate_island_cuts(&n, k, usize::MAX),
                    subset_search_cuts(&n, k, usize::MAX),
                    "{n:?} k={k}"
                );
            }
        }
        let n18 = NetworkModel::bundled("net18").unwrap();
        assert_eq!(
            enumerate_island_cuts(&n18, 5, usize::MAX),
            subset_search_cuts(&n18, 5, usize::MAX)
        );
    }

    #[test]
    fn cuts_split_into_two_components() {
        let n = NetworkModel::bundled("net118").unwrap();
        let cuts = enumerate_island_cuts(&n, 5, 300);
        assert_eq!(cuts.len(), 300);
        for c in &cuts {
            let mut removed = vec![false; n.branches.len()];
            for &id in &c.removed_branches {
                removed[id] = true;
                assert_eq!(n.branches[id].kind, BranchKind::Line);
            }
            let (comp, count) = components(&n, &removed);
            assert_eq!(count, 2);
            let index = n.bus_index();
            let ca = comp[index[&c.side_a[0]]];
            assert!(c.side_a.iter().all(|b| comp[index[b]] == ca));
            assert!(c.side_b.iter().all(|b| comp[index[b]] != ca));
            // Minimal: restoring any one line reconnects.
            for &id in &c.removed_branches {
                removed[id] = false;
                assert_eq!(components(&n, &removed).1, 1);
                removed[id] = true;
            }
        }
    }

    #[test]
    fn wind_zero_is_identity() {
        let n = NetworkModel::bundled("net118").unwrap();
        assert_eq!(apply_wind_penetration(&n, 0.0).unwrap(), n);
    }

    #[test]
    fn wind_half_of_two_equal_machines() {
        let n = net(vec![1, 2], vec![line(1, 2)], vec![gen(1, 100.0), gen(2, 100.0)]);
        let w = apply_wind_penetration(&n, 0.5).unwrap();
        assert_eq!(w.generators.iter().filter(|g| g.inverter_based).count(), 1);
        assert!(apply_wind_penetration(&n, 0.9).is_err());
    }

    #[test]
    fn wind_118_thirty_percent() {
        let n = NetworkModel::bundled("net118").unwrap();
        let w = apply_wind_penetration(&n, 0.3).unwrap();
        // independent ledger: sum converted ratings by comparing flags
        let total: f64 = n.generators.iter().map(|g| g.rated_mw).sum();
        let converted: f64 = n
            .generators
            .iter()
            .zip(&w.generators)
            .filter(|(a, b)| !a.inverter_based && b.inverter_based)
            .map(|(a, _)| a.rated_mw)
            .sum();
        let largest = n.generators.iter().map(|g| g.rated_mw).fold(0.0, f64::max);
        let share = converted / total;
        assert!(share >= 0.3 && share <= 0.3 + largest / total, "{share}");
        assert_eq!(w.total_capacity_mw(), n.total_capacity_mw());
        assert_eq!(w.branches, n.branches);
        assert_eq!(w.buses, n.buses);
        for g in w.generators.iter().filter(|g| g.inverter_based) {
            assert_eq!(g.h_s, 0.0);
        }
    }
}
