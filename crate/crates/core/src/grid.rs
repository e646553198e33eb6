//! Radial distribution forests.
//!
//! A network is a set of substations (slack buses) and load nodes joined by
//! lines. Its operational part must be a base-constrained spanning forest: every
//! connected component is a tree holding exactly one substation. Load nodes are
//! indexed densely (`0..n_loads`, in ascending [`NodeId`] order) and every matrix
//! produced here is reduced, i.e. substation rows and columns are dropped.
//!
//! Entries of the inverse reduced weighted Laplacian are path sums: for two load
//! nodes `a`, `b` in the same tree, `H⁻¹(a, b)` is the total weight of the edges
//! shared by their paths to the substation, and zero across trees. These are
//! evaluated by walking to the lowest common ancestor, never by inversion.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Substation,
    Load,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub role: NodeRole,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineStatus {
    #[default]
    Operational,
    Open,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub a: NodeId,
    pub b: NodeId,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub status: LineStatus,
}

/// Line resistance and reactance in per-unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impedance {
    pub r: f64,
    pub x: f64,
}

impl Impedance {
    pub fn new(r: f64, x: f64) -> Self {
        Self { r, x }
    }

    pub fn get(self, weight: Weight) -> f64 {
        match weight {
            Weight::Resistance => self.r,
            Weight::Reactance => self.x,
        }
    }
}

/// Which line parameter weights a path sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Weight {
    Resistance,
    Reactance,
}

/// The node one step closer to the substation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upstream {
    /// Index into [`RadialForest::slacks`].
    Slack(usize),
    /// Dense load index.
    Load(usize),
}

/// Full network description as stored on disk.
///
/// ```json
/// {"nodes": [{"id": 0, "role": "substation"}, {"id": 1, "role": "load"}],
///  "lines": [{"a": 0, "b": 1, "r": 0.01, "x": 0.02, "status": "operational"}]}
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub nodes: Vec<Node>,
    pub lines: Vec<Line>,
}

impl Network {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn forest(&self) -> Result<RadialForest> {
        RadialForest::build(&self.nodes, &self.lines)
    }

    /// Impedances of every line, operational or open.
    pub fn catalog(&self) -> LineCatalog {
        LineCatalog::from_lines(&self.lines)
    }

    /// Load nodes wired to each substation through an operational line.
    pub fn substation_children(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let roles: HashMap<NodeId, NodeRole> = self.nodes.iter().map(|n| (n.id, n.role)).collect();
        let mut out: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for n in &self.nodes {
            if n.role == NodeRole::Substation {
                out.insert(n.id, Vec::new());
            }
        }
        for line in self.lines.iter().filter(|l| l.status == LineStatus::Operational) {
            for (s, c) in [(line.a, line.b), (line.b, line.a)] {
                if roles.get(&s) == Some(&NodeRole::Substation) && roles.get(&c) == Some(&NodeRole::Load) {
                    out.entry(s).or_default().push(c);
                }
            }
        }
        for v in out.values_mut() {
            v.sort();
        }
        out
    }
}

/// Lookup of line impedances by unordered endpoint pair.
#[derive(Clone, Debug, Default)]
pub struct LineCatalog {
    lines: HashMap<(NodeId, NodeId), Impedance>,
}

fn pair(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl LineCatalog {
    pub fn from_lines(lines: &[Line]) -> Self {
        let lines = lines.iter().map(|l| (pair(l.a, l.b), Impedance::new(l.r, l.x))).collect();
        Self { lines }
    }

    pub fn insert(&mut self, a: NodeId, b: NodeId, z: Impedance) {
        self.lines.insert(pair(a, b), z);
    }

    pub fn get(&self, a: NodeId, b: NodeId) -> Option<Impedance> {
        self.lines.get(&pair(a, b)).copied()
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

/// An operational base-constrained spanning forest. Immutable once built.
#[derive(Clone, Debug)]
pub struct RadialForest {
    loads: Vec<NodeId>,
    slacks: Vec<NodeId>,
    load_index: HashMap<NodeId, usize>,
    slack_index: HashMap<NodeId, usize>,
    upstream: Vec<Upstream>,
    line: Vec<Impedance>,
    tree: Vec<usize>,
    depth: Vec<usize>,
    children: Vec<Vec<usize>>,
    root_children: Vec<Vec<usize>>,
    /// Parents before children.
    order: Vec<usize>,
    path_r: Vec<f64>,
    path_x: Vec<f64>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }
}

impl RadialForest {
    /// Orients the operational lines toward their substation. Open lines are ignored.
    pub fn build(nodes: &[Node], lines: &[Line]) -> Result<Self> {
        let mut pos: HashMap<NodeId, usize> = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if pos.insert(n.id, i).is_some() {
                return Err(GridError::DuplicateNode(n.id));
            }
        }
        let mut seen_pairs = BTreeSet::new();
        for l in lines {
            if !pos.contains_key(&l.a) {
                return Err(GridError::UnknownNode(l.a));
            }
            if !pos.contains_key(&l.b) {
                return Err(GridError::UnknownNode(l.b));
            }
            if !seen_pairs.insert(pair(l.a, l.b)) {
                return Err(GridError::ParallelLines(l.a, l.b));
            }
            let ok = l.a != l.b && l.r > 0.0 && l.x > 0.0 && l.r.is_finite() && l.x.is_finite();
            if !ok {
                return Err(GridError::InvalidLine(l.a, l.b));
            }
        }

        let operational: Vec<&Line> = lines.iter().filter(|l| l.status == LineStatus::Operational).collect();
        let mut uf = UnionFind((0..nodes.len()).collect());
        let mut adj: Vec<Vec<(usize, Impedance)>> = vec![Vec::new(); nodes.len()];
        for l in &operational {
            let (ia, ib) = (pos[&l.a], pos[&l.b]);
            let (ra, rb) = (uf.find(ia), uf.find(ib));
            if ra == rb {
                return Err(GridError::CycleDetected(l.a, l.b));
            }
            uf.0[ra] = rb;
            let z = Impedance::new(l.r, l.x);
            adj[ia].push((ib, z));
            adj[ib].push((ia, z));
        }

        let mut component_slack: HashMap<usize, NodeId> = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if n.role == NodeRole::Substation {
                let root = uf.find(i);
                if let Some(&other) = component_slack.get(&root) {
                    let (s1, s2) = if other < n.id { (other, n.id) } else { (n.id, other) };
                    return Err(GridError::MultipleSlacksInComponent(s1, s2));
                }
                component_slack.insert(root, n.id);
            }
        }
        let mut sorted_loads: Vec<NodeId> = nodes.iter().filter(|n| n.role == NodeRole::Load).map(|n| n.id).collect();
        sorted_loads.sort();
        for &id in &sorted_loads {
            let root = uf.find(pos[&id]);
            if !component_slack.contains_key(&root) {
                return Err(GridError::DisconnectedLoadNode(id));
            }
        }

        // BFS from every slack.
        let mut slacks: Vec<NodeId> = nodes.iter().filter(|n| n.role == NodeRole::Substation).map(|n| n.id).collect();
        slacks.sort();
        let mut edges = Vec::with_capacity(sorted_loads.len());
        for &s in &slacks {
            let start = pos[&s];
            let mut visited = vec![false; nodes.len()];
            visited[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                let mut next: Vec<(usize, Impedance)> = adj[u].clone();
                next.sort_by_key(|(v, _)| nodes[*v].id);
                for (v, z) in next {
                    if !visited[v] {
                        visited[v] = true;
                        edges.push((nodes[v].id, nodes[u].id, z));
                        queue.push_back(v);
                    }
                }
            }
        }
        Self::from_parent_edges(&slacks, &sorted_loads, &edges)
    }

    /// Builds a forest from `(child, parent, impedance)` triples. Every load
    /// must appear exactly once as a child and parents must be loads or slacks.
    pub fn from_parent_edges(
        slacks: &[NodeId],
        loads: &[NodeId],
        edges: &[(NodeId, NodeId, Impedance)],
    ) -> Result<Self> {
        let mut loads = loads.to_vec();
        loads.sort();
        let mut slacks = slacks.to_vec();
        slacks.sort();
        let load_index: HashMap<NodeId, usize> = loads.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let slack_index: HashMap<NodeId, usize> = slacks.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        if load_index.len() != loads.len() {
            return Err(GridError::DuplicateNode(loads[0]));
        }
        if let Some(&dup) = slacks.iter().find(|s| load_index.contains_key(s)) {
            return Err(GridError::DuplicateNode(dup));
        }
        let n = loads.len();
        let mut upstream: Vec<Option<Upstream>> = vec![None; n];
        let mut line = vec![Impedance::new(0.0, 0.0); n];
        for &(child, parent, z) in edges {
            let ci = *load_index.get(&child).ok_or(GridError::NotALoad(child))?;
            if upstream[ci].is_some() {
                return Err(GridError::ParallelLines(child, parent));
            }
            if !(z.r > 0.0 && z.x > 0.0) || child == parent {
                return Err(GridError::InvalidLine(child, parent));
            }
            upstream[ci] = Some(if let Some(&li) = load_index.get(&parent) {
                Upstream::Load(li)
            } else if let Some(&si) = slack_index.get(&parent) {
                Upstream::Slack(si)
            } else {
                return Err(GridError::UnknownNode(parent));
            });
            line[ci] = z;
        }
        let upstream: Vec<Upstream> = upstream
            .into_iter()
            .enumerate()
            .map(|(i, u)| u.ok_or(GridError::DisconnectedLoadNode(loads[i])))
            .collect::<Result<_>>()?;

        let mut children = vec![Vec::new(); n];
        let mut root_children = vec![Vec::new(); slacks.len()];
        for (i, u) in upstream.iter().enumerate() {
            match *u {
                Upstream::Load(p) => children[p].push(i),
                Upstream::Slack(s) => root_children[s].push(i),
            }
        }

        // Parents-first traversal; anything unreached sits on a cycle.
        let mut order = Vec::with_capacity(n);
        let mut tree = vec![usize::MAX; n];
        let mut depth = vec![0; n];
        let mut path_r = vec![0.0; n];
        let mut path_x = vec![0.0; n];
        for (s, roots) in root_children.iter().enumerate() {
            let mut stack: Vec<usize> = roots.iter().rev().copied().collect();
            while let Some(i) = stack.pop() {
                let (d, pr, px) = match upstream[i] {
                    Upstream::Slack(_) => (1, 0.0, 0.0),
                    Upstream::Load(p) => (depth[p] + 1, path_r[p], path_x[p]),
                };
                depth[i] = d;
                path_r[i] = pr + line[i].r;
                path_x[i] = px + line[i].x;
                tree[i] = s;
                order.push(i);
                stack.extend(children[i].iter().rev().copied());
            }
        }
        if order.len() != n {
            let i = (0..n).find(|&i| tree[i] == usize::MAX).unwrap();
            let p = match upstream[i] {
                Upstream::Load(p) => loads[p],
                Upstream::Slack(s) => slacks[s],
            };
            return Err(GridError::CycleDetected(loads[i], p));
        }

        Ok(Self {
            loads,
            slacks,
            load_index,
            slack_index,
            upstream,
            line,
            tree,
            depth,
            children,
            root_children,
            order,
            path_r,
            path_x,
        })
    }

    pub fn n_loads(&self) -> usize {
        self.loads.len()
    }

    pub fn loads(&self) -> &[NodeId] {
        &self.loads
    }

    pub fn slacks(&self) -> &[NodeId] {
        &self.slacks
    }

    pub fn index_of(&self, id: NodeId) -> Result<usize> {
        self.load_index.get(&id).copied().ok_or_else(|| {
            if self.slack_index.contains_key(&id) {
                GridError::NotALoad(id)
            } else {
                GridError::UnknownNode(id)
            }
        })
    }

    pub fn slack_position(&self, id: NodeId) -> Option<usize> {
        self.slack_index.get(&id).copied()
    }

    pub fn is_slack(&self, id: NodeId) -> bool {
        self.slack_index.contains_key(&id)
    }

    pub fn id(&self, idx: usize) -> NodeId {
        self.loads[idx]
    }

    pub fn upstream(&self, idx: usize) -> Upstream {
        self.upstream[idx]
    }

    pub fn parent_id(&self, idx: usize) -> NodeId {
        match self.upstream[idx] {
            Upstream::Load(p) => self.loads[p],
            Upstream::Slack(s) => self.slacks[s],
        }
    }

    /// Impedance of the line from `idx` to its parent.
    pub fn impedance(&self, idx: usize) -> Impedance {
        self.line[idx]
    }

    pub fn tree_of(&self, idx: usize) -> usize {
        self.tree[idx]
    }

    /// Hops to the substation.
    pub fn depth(&self, idx: usize) -> usize {
        self.depth[idx]
    }

    pub fn children(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    pub fn root_children(&self, slack: usize) -> &[usize] {
        &self.root_children[slack]
    }

    /// Load indices, parents before children.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    /// Load indices, children before parents.
    pub fn postorder(&self) -> impl Iterator<Item = usize> + '_ {
        self.order.iter().rev().copied()
    }

    /// Substation → its immediate load children.
    pub fn substation_children(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        self.slacks
            .iter()
            .enumerate()
            .map(|(s, &id)| {
                let mut ch: Vec<NodeId> = self.root_children[s].iter().map(|&i| self.loads[i]).collect();
                ch.sort();
                (id, ch)
            })
            .collect()
    }

    /// `(child, parent, impedance)` for every operational edge.
    pub fn edges(&self) -> Vec<(NodeId, NodeId, Impedance)> {
        (0..self.n_loads()).map(|i| (self.loads[i], self.parent_id(i), self.line[i])).collect()
    }

    pub fn to_network(&self) -> Network {
        let mut nodes: Vec<Node> = self
            .slacks
            .iter()
            .map(|&id| Node { id, role: NodeRole::Substation })
            .chain(self.loads.iter().map(|&id| Node { id, role: NodeRole::Load }))
            .collect();
        nodes.sort_by_key(|n| n.id);
        let lines = self
            .edges()
            .into_iter()
            .map(|(c, p, z)| Line { a: p, b: c, r: z.r, x: z.x, status: LineStatus::Operational })
            .collect();
        Network { nodes, lines }
    }

    fn path_weight(&self, idx: usize, weight: Weight) -> f64 {
        match weight {
            Weight::Resistance => self.path_r[idx],
            Weight::Reactance => self.path_x[idx],
        }
    }

    /// Lowest common load ancestor, `None` across trees or when the paths meet
    /// only at the substation.
    pub fn lca(&self, mut i: usize, mut j: usize) -> Option<usize> {
        if self.tree[i] != self.tree[j] {
            return None;
        }
        while self.depth[i] > self.depth[j] {
            i = self.load_parent(i)?;
        }
        while self.depth[j] > self.depth[i] {
            j = self.load_parent(j)?;
        }
        while i != j {
            i = self.load_parent(i)?;
            j = self.load_parent(j)?;
        }
        Some(i)
    }

    fn load_parent(&self, i: usize) -> Option<usize> {
        match self.upstream[i] {
            Upstream::Load(p) => Some(p),
            Upstream::Slack(_) => None,
        }
    }

    /// Path-intersection sum by dense index.
    pub fn h_inverse_at(&self, weight: Weight, i: usize, j: usize) -> f64 {
        self.lca(i, j).map_or(0.0, |k| self.path_weight(k, weight))
    }

    /// `H⁻¹(a, b)`: sum of `weight` over edges shared by the paths of `a` and `b`
    /// to their substation; zero if they sit in different trees.
    pub fn h_inverse_entry(&self, weight: Weight, a: NodeId, b: NodeId) -> Result<f64> {
        let (i, j) = (self.index_of(a)?, self.index_of(b)?);
        Ok(self.h_inverse_at(weight, i, j))
    }

    /// `H⁻¹(a, c) − H⁻¹(b, c)` for `b` the parent of `a`: the weight of line
    /// `(a, b)` when `c` descends from `a`, zero otherwise.
    pub fn h_inverse_diff(&self, weight: Weight, a: NodeId, parent_b: NodeId, c: NodeId) -> Result<f64> {
        let ia = self.index_of(a)?;
        let ic = self.index_of(c)?;
        if self.parent_id(ia) != parent_b {
            return Err(GridError::NotParent { child: a, parent: parent_b });
        }
        Ok(if self.is_descendant(ic, ia) { self.line[ia].get(weight) } else { 0.0 })
    }

    /// Whether `c` lies in the subtree rooted at `a` (inclusive).
    pub fn is_descendant(&self, mut c: usize, a: usize) -> bool {
        if self.tree[c] != self.tree[a] {
            return false;
        }
        while self.depth[c] > self.depth[a] {
            match self.load_parent(c) {
                Some(p) => c = p,
                None => return false,
            }
        }
        c == a
    }

    /// Dense indices of the subtree rooted at `idx`, `idx` first.
    pub fn descendants(&self, idx: usize) -> Vec<usize> {
        let mut out = vec![idx];
        let mut k = 0;
        while k < out.len() {
            out.extend_from_slice(&self.children[out[k]]);
            k += 1;
        }
        out
    }

    pub fn descendant_set(&self, a: NodeId) -> Result<BTreeSet<NodeId>> {
        let i = self.index_of(a)?;
        Ok(self.descendants(i).into_iter().map(|k| self.loads[k]).collect())
    }

    /// Hop count between two load nodes; `None` across trees.
    pub fn tree_distance(&self, i: usize, j: usize) -> Option<usize> {
        if self.tree[i] != self.tree[j] {
            return None;
        }
        let meet_depth = self.lca(i, j).map_or(0, |k| self.depth[k]);
        Some(self.depth[i] + self.depth[j] - 2 * meet_depth)
    }

    /// Dense `H⁻¹` over load nodes from path sums.
    pub fn h_inverse_dense(&self, weight: Weight) -> DMatrix<f64> {
        let n = self.n_loads();
        let mut h = DMatrix::zeros(n, n);
        // Walking parents-first lets each row reuse its parent's row.
        for &i in &self.order {
            let w = self.path_weight(i, weight);
            h[(i, i)] = w;
            if let Upstream::Load(p) = self.upstream[i] {
                for j in 0..n {
                    if j != i && !self.is_descendant(j, i) {
                        h[(i, j)] = h[(p, j)];
                    }
                }
            }
            for j in self.descendants(i).into_iter().skip(1) {
                h[(i, j)] = w;
            }
        }
        h
    }

    /// Reduced directed incidence matrix: one row per edge `(child → parent)`,
    /// `+1` at the child, `−1` at a load parent; substation columns dropped.
    /// Row `k` is the edge above load index `k`.
    pub fn incidence_matrix(&self) -> DMatrix<f64> {
        let n = self.n_loads();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
            if let Upstream::Load(p) = self.upstream[i] {
                m[(i, p)] = -1.0;
            }
        }
        m
    }
}
