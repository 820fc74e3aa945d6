//! Flow graph analysis: validation, phase identification, phase ordering
//! and the per-phase propagate/begin/end orders.
//!
//! Edges point along the streaming direction. A push edge `(u, v)` means
//! `u` calls `v.push()`; a pull edge `(u, v)` means `v` calls `u.pull()`; a
//! blocking edge joins the input half of a blocking component to its output
//! half. Phases are the connected components once blocking edges are
//! removed.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fmt::Write as _;

use crate::memory::{assign_memory, MemoryRequest};
use crate::node::{Link, Node, NodeBase, NodeId, NodeKind};

#[derive(Clone, Debug, PartialEq)]
pub struct NodeDescriptor {
    pub id: NodeId,
    pub name: String,
    pub kind: NodeKind,
    pub memory: MemoryRequest,
    pub declared_steps: Option<u64>,
}

impl NodeDescriptor {
    pub fn from_base(base: &NodeBase) -> Self {
        NodeDescriptor {
            id: base.id(),
            name: base.name().to_owned(),
            kind: base.kind(),
            memory: base.memory_request(),
            declared_steps: base.declared_steps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ValidationError {
    #[error("edge references unknown node {0}")]
    UnknownNode(NodeId),

    #[error("{node} has both an outgoing push edge and an outgoing pull edge")]
    PushAndPull { node: String },

    #[error("blocking edge {from} -> {to} is invalid: {reason}")]
    BadBlockingEdge { from: String, to: String, reason: String },

    #[error("{node} is half of a blocking component whose other half is missing")]
    MissingPartner { node: String },

    #[error("both halves of {component} end up in one phase via {}; insert a delay component to split the phase", path.join(" - "))]
    SamePhase { component: String, path: Vec<String> },

    #[error("phases depend on each other cyclically: {}", phases.join(" -> "))]
    PhaseCycle { phases: Vec<String> },

    #[error("push/pull edges form a cycle through {}", nodes.join(" -> "))]
    StreamingCycle { nodes: Vec<String> },

    #[error("phase containing {} has {count} initiators ({}) but needs exactly one", phase.join(", "), initiators.join(", "))]
    InitiatorCount {
        phase: Vec<String>,
        count: usize,
        initiators: Vec<String>,
    },
}

/// Transitive closure over push, pull and blocking edges.
#[derive(Clone, Debug, Default)]
pub struct Reachability {
    descendants: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl Reachability {
    /// True when a nonempty directed path leads from `from` to `to`.
    pub fn reaches(&self, from: NodeId, to: NodeId) -> bool {
        self.descendants.get(&from).is_some_and(|d| d.contains(&to))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowGraph {
    nodes: BTreeMap<NodeId, NodeDescriptor>,
    push_edges: BTreeSet<(NodeId, NodeId)>,
    pull_edges: BTreeSet<(NodeId, NodeId)>,
    blocking_edges: BTreeSet<(NodeId, NodeId)>,
}

impl FlowGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: NodeDescriptor) -> NodeId {
        let id = node.id;
        self.nodes.insert(id, node);
        id
    }

    /// Adds a regular node with a fresh id and default memory request.
    pub fn add_regular(&mut self, name: &str) -> NodeId {
        self.add_node(NodeDescriptor::from_base(&NodeBase::new(name)))
    }

    /// Adds both halves of a blocking component and the edge between them.
    pub fn add_blocking(&mut self, name: &str) -> (NodeId, NodeId) {
        let (i, o) = NodeBase::blocking_pair(format!("{name} input"), format!("{name} output"));
        let (i, o) = (self.add_node(NodeDescriptor::from_base(&i)), self.add_node(NodeDescriptor::from_base(&o)));
        self.blocking_edges.insert((i, o));
        (i, o)
    }

    pub fn add_push(&mut self, from: NodeId, to: NodeId) {
        self.push_edges.insert((from, to));
    }

    /// `source` is pulled from by `puller`.
    pub fn add_pull(&mut self, source: NodeId, puller: NodeId) {
        self.pull_edges.insert((source, puller));
    }

    pub fn add_blocking_edge(&mut self, input: NodeId, output: NodeId) {
        self.blocking_edges.insert((input, output));
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeDescriptor> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut NodeDescriptor> {
        self.nodes.get_mut(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeDescriptor> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn push_edges(&self) -> &BTreeSet<(NodeId, NodeId)> {
        &self.push_edges
    }

    pub fn pull_edges(&self) -> &BTreeSet<(NodeId, NodeId)> {
        &self.pull_edges
    }

    pub fn blocking_edges(&self) -> &BTreeSet<(NodeId, NodeId)> {
        &self.blocking_edges
    }

    fn name(&self, id: NodeId) -> String {
        self.nodes
            .get(&id)
            .map_or_else(|| id.to_string(), |n| format!("{} {}", n.name, id))
    }

    /// Builds the graph of live nodes reachable from `roots`.
    pub fn from_roots(roots: &mut [Box<dyn Node>]) -> Self {
        fn visit(graph: &mut FlowGraph, node: &mut dyn Node) {
            let id = node.base().id();
            graph.add_node(NodeDescriptor::from_base(node.base()));
            node.visit_children(&mut |link, child| {
                let child_id = child.base().id();
                match link {
                    Link::Push => graph.add_push(id, child_id),
                    Link::Pull => graph.add_pull(child_id, id),
                    Link::Owned => {}
                }
                visit(graph, child);
            });
        }
        let mut graph = FlowGraph::new();
        for root in roots.iter_mut() {
            visit(&mut graph, root.as_mut());
        }
        let inputs: Vec<(NodeId, NodeId)> = graph
            .nodes
            .values()
            .filter_map(|n| match n.kind {
                NodeKind::Input { partner } if graph.nodes.contains_key(&partner) => Some((n.id, partner)),
                _ => None,
            })
            .collect();
        for (i, o) in inputs {
            graph.add_blocking_edge(i, o);
        }
        graph
    }

    fn streaming_edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.push_edges.iter().chain(self.pull_edges.iter()).copied()
    }

    pub fn reachability(&self) -> Reachability {
        let mut succ: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for (u, v) in self.streaming_edges().chain(self.blocking_edges.iter().copied()) {
            succ.entry(u).or_default().push(v);
        }
        let mut descendants = BTreeMap::new();
        for &start in self.nodes.keys() {
            let mut seen = BTreeSet::new();
            let mut queue: VecDeque<NodeId> = succ.get(&start).into_iter().flatten().copied().collect();
            while let Some(n) = queue.pop_front() {
                if seen.insert(n) {
                    queue.extend(succ.get(&n).into_iter().flatten().copied());
                }
            }
            descendants.insert(start, seen);
        }
        Reachability { descendants }
    }

    /// Checks edge sanity, that no phase contains both halves of a blocking
    /// component, that phases can be ordered, that streaming edges are
    /// acyclic, and that every phase has exactly one initiator.
    pub fn validate(&self) -> Result<(), ValidationError> {
        for (u, v) in self.streaming_edges().chain(self.blocking_edges.iter().copied()) {
            for id in [u, v] {
                if !self.nodes.contains_key(&id) {
                    return Err(ValidationError::UnknownNode(id));
                }
            }
        }
        let push_sources: BTreeSet<NodeId> = self.push_edges.iter().map(|e| e.0).collect();
        if let Some(&(u, _)) = self.pull_edges.iter().find(|(u, _)| push_sources.contains(u)) {
            return Err(ValidationError::PushAndPull { node: self.name(u) });
        }
        for &(u, v) in &self.blocking_edges {
            let ok = matches!(self.nodes[&u].kind, NodeKind::Input { partner } if partner == v)
                && matches!(self.nodes[&v].kind, NodeKind::Output { partner } if partner == u);
            if !ok {
                return Err(ValidationError::BadBlockingEdge {
                    from: self.name(u),
                    to: self.name(v),
                    reason: "endpoints are not the input and output of one blocking component".into(),
                });
            }
        }
        for n in self.nodes.values() {
            let edge = match n.kind {
                NodeKind::Regular => continue,
                NodeKind::Input { partner } => (n.id, partner),
                NodeKind::Output { partner } => (partner, n.id),
            };
            if !self.blocking_edges.contains(&edge) {
                return Err(ValidationError::MissingPartner { node: self.name(n.id) });
            }
        }

        // Property 1: no blocking component inside a single component.
        let component = self.component_map();
        for &(u, v) in &self.blocking_edges {
            if component[&u] == component[&v] {
                let base = self.nodes[&u].name.trim_end_matches(" input").to_owned();
                return Err(ValidationError::SamePhase {
                    component: base,
                    path: self.undirected_path(u, v).into_iter().map(|n| self.name(n)).collect(),
                });
            }
        }

        // Property 2: contracted graph is acyclic.
        let phases = self.identify_phases();
        if let Some(cycle) = self.phase_cycle(&phases, &component) {
            return Err(ValidationError::PhaseCycle {
                phases: cycle.iter().map(|&p| self.describe_phase(&phases[p])).collect(),
            });
        }

        for phase in &phases {
            if let Some(cycle) = self.directed_cycle(phase) {
                return Err(ValidationError::StreamingCycle {
                    nodes: cycle.into_iter().map(|n| self.name(n)).collect(),
                });
            }
            let initiators = self.initiators(phase);
            if initiators.len() != 1 {
                return Err(ValidationError::InitiatorCount {
                    phase: phase.iter().map(|&n| self.name(n)).collect(),
                    count: initiators.len(),
                    initiators: initiators.into_iter().map(|n| self.name(n)).collect(),
                });
            }
        }
        Ok(())
    }

    fn describe_phase(&self, phase: &[NodeId]) -> String {
        let names: Vec<String> = phase.iter().map(|&n| self.name(n)).collect();
        format!("{{{}}}", names.join(", "))
    }

    /// Union-find over push and pull edges; maps each node to the smallest
    /// node id in its component.
    fn component_map(&self) -> BTreeMap<NodeId, NodeId> {
        let mut parent: BTreeMap<NodeId, NodeId> = self.nodes.keys().map(|&n| (n, n)).collect();
        fn find(parent: &mut BTreeMap<NodeId, NodeId>, n: NodeId) -> NodeId {
            let p = parent[&n];
            if p == n {
                return n;
            }
            let root = find(parent, p);
            parent.insert(n, root);
            root
        }
        for (u, v) in self.streaming_edges() {
            let (a, b) = (find(&mut parent, u), find(&mut parent, v));
            if a != b {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                parent.insert(hi, lo);
            }
        }
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        ids.into_iter().map(|n| (n, find(&mut parent, n))).collect()
    }

    fn undirected_path(&self, from: NodeId, to: NodeId) -> Vec<NodeId> {
        let mut adj: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for (u, v) in self.streaming_edges() {
            adj.entry(u).or_default().push(v);
            adj.entry(v).or_default().push(u);
        }
        let mut prev: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        let mut queue = VecDeque::from([from]);
        prev.insert(from, from);
        while let Some(n) = queue.pop_front() {
            if n == to {
                break;
            }
            for &m in adj.get(&n).into_iter().flatten() {
                if let std::collections::btree_map::Entry::Vacant(e) = prev.entry(m) {
                    e.insert(n);
                    queue.push_back(m);
                }
            }
        }
        let mut path = vec![to];
        let mut cur = to;
        while cur != from {
            cur = prev[&cur];
            path.push(cur);
        }
        path.reverse();
        path
    }

    /// Connected components after dropping blocking edges, each sorted by
    /// node id, listed by smallest member.
    pub fn identify_phases(&self) -> Vec<Vec<NodeId>> {
        let mut groups: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for (n, root) in self.component_map() {
            groups.entry(root).or_default().push(n);
        }
        groups.into_values().collect()
    }

    fn phase_edges(&self, phases: &[Vec<NodeId>], component: &BTreeMap<NodeId, NodeId>) -> Vec<BTreeSet<usize>> {
        let index: BTreeMap<NodeId, usize> = phases.iter().enumerate().map(|(i, p)| (p[0], i)).collect();
        let mut succ = vec![BTreeSet::new(); phases.len()];
        for &(u, v) in &self.blocking_edges {
            let (a, b) = (index[&component[&u]], index[&component[&v]]);
            if a != b {
                succ[a].insert(b);
            }
        }
        succ
    }

    fn phase_cycle(&self, phases: &[Vec<NodeId>], component: &BTreeMap<NodeId, NodeId>) -> Option<Vec<usize>> {
        let succ = self.phase_edges(phases, component);
        find_cycle(phases.len(), |i| succ[i].iter().copied().collect())
    }

    fn directed_cycle(&self, phase: &[NodeId]) -> Option<Vec<NodeId>> {
        let members: BTreeSet<NodeId> = phase.iter().copied().collect();
        let mut succ: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for (u, v) in self.streaming_edges() {
            if members.contains(&u) {
                succ.entry(u).or_default().push(v);
            }
        }
        find_cycle(phase.len(), |i| {
            succ.get(&phase[i])
                .into_iter()
                .flatten()
                .map(|v| phase.binary_search(v).unwrap())
                .collect()
        })
        .map(|c| c.into_iter().map(|i| phase[i]).collect())
    }

    /// Nodes that are neither pushed to nor pulled from.
    pub fn initiators(&self, phase: &[NodeId]) -> Vec<NodeId> {
        phase
            .iter()
            .copied()
            .filter(|&n| {
                !self.push_edges.iter().any(|&(_, v)| v == n) && !self.pull_edges.iter().any(|&(u, _)| u == n)
            })
            .collect()
    }

    /// Topological order of the contracted phase graph; ties go to the phase
    /// holding the smallest node id.
    pub fn phase_order(&self, phases: &[Vec<NodeId>]) -> Vec<usize> {
        let component = self.component_map();
        let succ = self.phase_edges(phases, &component);
        let mut indegree = vec![0usize; phases.len()];
        for s in &succ {
            for &b in s {
                indegree[b] += 1;
            }
        }
        let mut ready: BinaryHeap<Reverse<(NodeId, usize)>> = (0..phases.len())
            .filter(|&i| indegree[i] == 0)
            .map(|i| Reverse((phases[i][0], i)))
            .collect();
        let mut order = Vec::with_capacity(phases.len());
        while let Some(Reverse((_, i))) = ready.pop() {
            order.push(i);
            for &b in &succ[i] {
                indegree[b] -= 1;
                if indegree[b] == 0 {
                    ready.push(Reverse((phases[b][0], b)));
                }
            }
        }
        order
    }

    /// Propagate, begin and end orders for one phase.
    pub fn node_orders(&self, phase: &[NodeId]) -> NodeOrders {
        let members: BTreeSet<NodeId> = phase.iter().copied().collect();
        let inside = |(u, v): &(NodeId, NodeId)| members.contains(u) && members.contains(v);
        let streaming: Vec<(NodeId, NodeId)> = self.streaming_edges().filter(inside).collect();
        let begin_edges: Vec<(NodeId, NodeId)> = self
            .push_edges
            .iter()
            .filter(|e| inside(e))
            .map(|&(u, v)| (v, u))
            .chain(self.pull_edges.iter().filter(|e| inside(e)).copied())
            .collect();
        let propagate = topo_sort(phase, &streaming);
        let begin = topo_sort(phase, &begin_edges);
        let mut end = begin.clone();
        end.reverse();
        NodeOrders { propagate, begin, end }
    }

    /// Validates and produces the full execution plan.
    pub fn plan(&self) -> Result<PhasePlan, ValidationError> {
        self.validate()?;
        let phases = self.identify_phases();
        let order = self.phase_order(&phases);
        let phases = order
            .into_iter()
            .map(|i| {
                let nodes = phases[i].clone();
                let initiator = self.initiators(&nodes)[0];
                let orders = self.node_orders(&nodes);
                Phase {
                    nodes,
                    initiator,
                    orders,
                }
            })
            .collect();
        Ok(PhasePlan { phases })
    }
}

/// Kahn's algorithm with ascending-id tie breaks. Assumes acyclicity.
fn topo_sort(nodes: &[NodeId], edges: &[(NodeId, NodeId)]) -> Vec<NodeId> {
    let mut indegree: BTreeMap<NodeId, usize> = nodes.iter().map(|&n| (n, 0)).collect();
    let mut succ: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for &(u, v) in edges {
        *indegree.get_mut(&v).unwrap() += 1;
        succ.entry(u).or_default().push(v);
    }
    let mut ready: BinaryHeap<Reverse<NodeId>> =
        indegree.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| Reverse(n)).collect();
    let mut out = Vec::with_capacity(nodes.len());
    while let Some(Reverse(n)) = ready.pop() {
        out.push(n);
        for &v in succ.get(&n).into_iter().flatten() {
            let d = indegree.get_mut(&v).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(v));
            }
        }
    }
    out
}

/// Returns the vertices of some directed cycle, if any.
fn find_cycle(n: usize, succ: impl Fn(usize) -> Vec<usize>) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        OnStack,
        Done,
    }
    let mut mark = vec![Mark::New; n];
    for start in 0..n {
        if mark[start] != Mark::New {
            continue;
        }
        let mut stack: Vec<(usize, Vec<usize>)> = vec![(start, succ(start))];
        mark[start] = Mark::OnStack;
        while let Some((v, pending)) = stack.last_mut() {
            let v = *v;
            match pending.pop() {
                Some(w) => match mark[w] {
                    Mark::New => {
                        mark[w] = Mark::OnStack;
                        let next = succ(w);
                        stack.push((w, next));
                    }
                    Mark::OnStack => {
                        let pos = stack.iter().position(|(x, _)| *x == w).unwrap();
                        return Some(stack[pos..].iter().map(|(x, _)| *x).collect());
                    }
                    Mark::Done => {}
                },
                None => {
                    mark[v] = Mark::Done;
                    stack.pop();
                }
            }
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeOrders {
    pub propagate: Vec<NodeId>,
    pub begin: Vec<NodeId>,
    pub end: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Phase {
    pub nodes: Vec<NodeId>,
    pub initiator: NodeId,
    pub orders: NodeOrders,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhasePlan {
    pub phases: Vec<Phase>,
}

impl PhasePlan {
    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    /// Human-readable dump of the plan. Node ids are renumbered by rank so
    /// the text does not depend on how many nodes the process created
    /// before. With `memory` set, each phase also shows its grants.
    pub fn report(&self, graph: &FlowGraph, memory: Option<u64>) -> String {
        let rank: BTreeMap<NodeId, usize> = graph.node_ids().enumerate().map(|(i, n)| (n, i + 1)).collect();
        let label = |n: &NodeId| format!("n{} {}", rank[n], graph.nodes[n].name);
        let list = |ids: &[NodeId]| ids.iter().map(|n| format!("n{}", rank[n])).collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        let _ = writeln!(out, "phases: {}", self.phases.len());
        for (i, phase) in self.phases.iter().enumerate() {
            let _ = writeln!(out, "phase {}: initiator {}", i + 1, label(&phase.initiator));
            for n in &phase.nodes {
                let _ = writeln!(out, "  node {}", label(n));
            }
            let _ = writeln!(out, "  propagate: {}", list(&phase.orders.propagate));
            let _ = writeln!(out, "  begin: {}", list(&phase.orders.begin));
            let _ = writeln!(out, "  end: {}", list(&phase.orders.end));
            if let Some(available) = memory {
                let requests: Vec<MemoryRequest> = phase.nodes.iter().map(|n| graph.nodes[n].memory).collect();
                match assign_memory(&requests, available) {
                    Ok(a) => {
                        let _ = writeln!(out, "  memory: lambda {:.6} total {} of {available}", a.lambda, a.total);
                        for (n, g) in phase.nodes.iter().zip(&a.grants) {
                            let r = graph.nodes[n].memory;
                            let _ = writeln!(
                                out,
                                "    n{}: {g} (min {} max {} priority {})",
                                rank[n], r.minimum, r.maximum, r.priority
                            );
                        }
                    }
                    Err(e) => {
                        let _ = writeln!(out, "  memory: {e}");
                    }
                }
            }
        }
        out
    }
}
