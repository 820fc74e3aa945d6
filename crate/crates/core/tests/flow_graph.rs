use std::collections::{BTreeMap, BTreeSet, VecDeque};

use empipe::graph::{FlowGraph, ValidationError};
use empipe::node::{MetadataStore, Origin};
use empipe::{MetaValue, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random graph of regular nodes and blocking pairs with random push and
/// pull edges. Roughly half the graphs only point edges forward, which
/// keeps a useful share of them valid.
fn random_graph(rng: &mut ChaCha8Rng) -> FlowGraph {
    let mut g = FlowGraph::new();
    let regular = rng.random_range(1..=8);
    let pairs = rng.random_range(0..=2);
    let mut ids = Vec::new();
    for i in 0..regular {
        ids.push(g.add_regular(&format!("r{i}")));
    }
    for i in 0..pairs {
        let (a, b) = g.add_blocking(&format!("b{i}"));
        ids.push(a);
        ids.push(b);
    }
    let forward_only = rng.random_bool(0.5);
    let edges = rng.random_range(0..=ids.len() + 2);
    for _ in 0..edges {
        let mut u = rng.random_range(0..ids.len());
        let mut v = rng.random_range(0..ids.len());
        if u == v {
            continue;
        }
        if forward_only && u > v {
            std::mem::swap(&mut u, &mut v);
        }
        if rng.random_bool(0.6) {
            g.add_push(ids[u], ids[v]);
        } else {
            g.add_pull(ids[u], ids[v]);
        }
    }
    g
}

fn streaming(g: &FlowGraph) -> Vec<(NodeId, NodeId)> {
    g.push_edges().iter().chain(g.pull_edges().iter()).copied().collect()
}

/// Connected components over push and pull edges, by union-find.
fn union_find_phases(g: &FlowGraph) -> BTreeSet<BTreeSet<NodeId>> {
    let ids: Vec<NodeId> = g.node_ids().collect();
    let index: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (u, v) in streaming(g) {
        let (a, b) = (find(&mut parent, index[&u]), find(&mut parent, index[&v]));
        parent[a] = b;
    }
    let mut groups: BTreeMap<usize, BTreeSet<NodeId>> = BTreeMap::new();
    for (i, &n) in ids.iter().enumerate() {
        groups.entry(find(&mut parent, i)).or_default().insert(n);
    }
    groups.into_values().collect()
}

fn has_cycle(nodes: &[usize], edges: &[(usize, usize)]) -> bool {
    let mut indegree: BTreeMap<usize, usize> = nodes.iter().map(|&n| (n, 0)).collect();
    for &(_, v) in edges {
        *indegree.get_mut(&v).unwrap() += 1;
    }
    let mut queue: VecDeque<usize> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
    let mut seen = 0;
    while let Some(n) = queue.pop_front() {
        seen += 1;
        for &(u, v) in edges {
            if u == n {
                let d = indegree.get_mut(&v).unwrap();
                *d -= 1;
                if *d == 0 {
                    queue.push_back(v);
                }
            }
        }
    }
    seen != nodes.len()
}

/// Validity decided from first principles.
fn oracle_valid(g: &FlowGraph) -> bool {
    let ids: Vec<NodeId> = g.node_ids().collect();
    let idx: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let stream: Vec<(usize, usize)> = streaming(g).iter().map(|(u, v)| (idx[u], idx[v])).collect();
    if has_cycle(&(0..ids.len()).collect::<Vec<_>>(), &stream) {
        return false;
    }
    for &n in &ids {
        let pushes = g.push_edges().iter().any(|&(u, _)| u == n);
        let pulled = g.pull_edges().iter().any(|&(s, _)| s == n);
        if pushes && pulled {
            return false;
        }
    }
    let phases: Vec<BTreeSet<NodeId>> = union_find_phases(g).into_iter().collect();
    let phase_of = |n: NodeId| phases.iter().position(|p| p.contains(&n)).unwrap();
    let mut contracted = Vec::new();
    for &(i, o) in g.blocking_edges() {
        if phase_of(i) == phase_of(o) {
            return false;
        }
        contracted.push((phase_of(i), phase_of(o)));
    }
    if has_cycle(&(0..phases.len()).collect::<Vec<_>>(), &contracted) {
        return false;
    }
    phases.iter().all(|p| {
        p.iter()
            .filter(|&&n| {
                !g.push_edges().iter().any(|&(_, v)| v == n) && !g.pull_edges().iter().any(|&(s, _)| s == n)
            })
            .count()
            == 1
    })
}

fn bfs_reaches(g: &FlowGraph, from: NodeId, to: NodeId) -> bool {
    let edges: Vec<(NodeId, NodeId)> = streaming(g).into_iter().chain(g.blocking_edges().iter().copied()).collect();
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<NodeId> = edges.iter().filter(|(u, _)| *u == from).map(|(_, v)| *v).collect();
    while let Some(n) = queue.pop_front() {
        if n == to {
            return true;
        }
        if seen.insert(n) {
            queue.extend(edges.iter().filter(|(u, _)| *u == n).map(|(_, v)| *v));
        }
    }
    false
}

/// Checks one phase's orders against its edges. Returns the violations.
fn order_violations(g: &FlowGraph, phase: &[NodeId], propagate: &[NodeId], begin: &[NodeId], end: &[NodeId]) -> Vec<String> {
    let mut out = Vec::new();
    let members: BTreeSet<NodeId> = phase.iter().copied().collect();
    for (name, order) in [("propagate", propagate), ("begin", begin), ("end", end)] {
        if order.iter().copied().collect::<BTreeSet<_>>() != members || order.len() != members.len() {
            out.push(format!("{name} order is not a permutation of the phase"));
        }
    }
    let pos = |order: &[NodeId], n: NodeId| order.iter().position(|&m| m == n).unwrap_or(usize::MAX);
    for &(u, v) in g.push_edges() {
        if members.contains(&u) && members.contains(&v) {
            if pos(propagate, u) > pos(propagate, v) {
                out.push(format!("push {u}->{v} propagate"));
            }
            if pos(begin, v) > pos(begin, u) {
                out.push(format!("push {u}->{v} begin"));
            }
        }
    }
    for &(s, p) in g.pull_edges() {
        if members.contains(&s) && members.contains(&p) {
            if pos(propagate, s) > pos(propagate, p) {
                out.push(format!("pull {s}->{p} propagate"));
            }
            if pos(begin, s) > pos(begin, p) {
                out.push(format!("pull {s}->{p} begin"));
            }
        }
    }
    let mut reversed = end.to_vec();
    reversed.reverse();
    if reversed != begin {
        out.push("end is not begin reversed".into());
    }
    out
}

#[test]
fn phases_match_union_find() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let g = random_graph(&mut rng);
        let phases: BTreeSet<BTreeSet<NodeId>> = g.identify_phases().into_iter().map(|p| p.into_iter().collect()).collect();
        assert_eq!(phases, union_find_phases(&g));
    }
}

#[test]
fn validation_matches_first_principles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut valid = 0;
    for _ in 0..1000 {
        let g = random_graph(&mut rng);
        let expected = oracle_valid(&g);
        let got = g.validate();
        assert_eq!(got.is_ok(), expected, "{got:?} for {g:?}");
        valid += expected as usize;
    }
    assert!(valid >= 100, "only {valid} valid graphs generated");
}

#[test]
fn plans_of_valid_graphs_obey_the_order_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 300 {
        let g = random_graph(&mut rng);
        let Ok(plan) = g.plan() else { continue };
        checked += 1;

        let mut seen = BTreeSet::new();
        let mut position = BTreeMap::new();
        for (i, phase) in plan.phases.iter().enumerate() {
            for &n in &phase.nodes {
                assert!(seen.insert(n), "{n} in two phases");
                position.insert(n, i);
            }
            assert!(phase.nodes.contains(&phase.initiator));
            let o = &phase.orders;
            let violations = order_violations(&g, &phase.nodes, &o.propagate, &o.begin, &o.end);
            assert!(violations.is_empty(), "{violations:?}");
        }
        assert_eq!(seen.len(), g.len());
        for &(i, o) in g.blocking_edges() {
            assert!(position[&i] < position[&o], "blocking halves out of phase order");
        }
    }
}

#[test]
fn checker_rejects_a_broken_order() {
    let mut g = FlowGraph::new();
    let a = g.add_regular("a");
    let b = g.add_regular("b");
    let c = g.add_regular("c");
    g.add_push(a, b);
    g.add_pull(c, b);
    let phase = [a, b, c];
    assert!(order_violations(&g, &phase, &[a, c, b], &[c, b, a], &[a, b, c]).is_empty());
    assert!(!order_violations(&g, &phase, &[b, a, c], &[c, b, a], &[a, b, c]).is_empty());
    assert!(!order_violations(&g, &phase, &[a, c, b], &[a, b, c], &[c, b, a]).is_empty());
    assert!(!order_violations(&g, &phase, &[a, c, b], &[c, b, a], &[b, a, c]).is_empty());
}

/// Rebuilds `g` with fresh node ids in the same creation order.
fn rebuild(seed: u64) -> FlowGraph {
    random_graph(&mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn plans_are_deterministic() {
    for seed in 0..200 {
        let (a, b) = (rebuild(seed), rebuild(seed));
        match (a.plan(), b.plan()) {
            (Ok(pa), Ok(pb)) => assert_eq!(pa.report(&a, Some(1 << 20)), pb.report(&b, Some(1 << 20))),
            (Err(ea), Err(eb)) => assert_eq!(std::mem::discriminant(&ea), std::mem::discriminant(&eb)),
            _ => panic!("seed {seed}: validity differs between identical graphs"),
        }
    }
}

#[test]
fn reachability_matches_bfs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let g = random_graph(&mut rng);
        let reach = g.reachability();
        for u in g.node_ids() {
            for v in g.node_ids() {
                assert_eq!(reach.reaches(u, v), bfs_reaches(&g, u, v), "{u} -> {v}");
            }
        }
    }
}

#[test]
fn metadata_is_visible_downstream_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let g = random_graph(&mut rng);
        let reach = g.reachability();
        let mut store = MetadataStore::new();
        store.forward(Origin::Boundary, "global", MetaValue::Integer(-1));
        for u in g.node_ids() {
            store.forward(Origin::Node(u), format!("from{}", u.0), MetaValue::Integer(u.0 as i64));
        }
        for u in g.node_ids() {
            for v in g.node_ids() {
                let seen = store.lookup(&format!("from{}", u.0), v, &reach);
                assert_eq!(seen.is_some(), bfs_reaches(&g, u, v));
            }
            assert_eq!(store.lookup("global", u, &reach), Some(&MetaValue::Integer(-1)));
        }
    }
}

#[test]
fn latest_visible_forward_wins() {
    let mut g = FlowGraph::new();
    let a = g.add_regular("a");
    let b = g.add_regular("b");
    let c = g.add_regular("c");
    let d = g.add_regular("d");
    g.add_push(a, b);
    g.add_push(b, c);
    let reach = g.reachability();
    let mut store = MetadataStore::new();
    store.forward(Origin::Boundary, "k", MetaValue::Integer(0));
    store.forward(Origin::Node(a), "k", MetaValue::Integer(1));
    store.forward(Origin::Node(b), "k", MetaValue::Integer(2));
    store.forward(Origin::Node(d), "k", MetaValue::Integer(3));
    assert_eq!(store.lookup("k", c, &reach), Some(&MetaValue::Integer(2)));
    assert_eq!(store.lookup("k", b, &reach), Some(&MetaValue::Integer(1)));
    assert_eq!(store.lookup("k", a, &reach), Some(&MetaValue::Integer(0)));
}

#[test]
fn sorter_shortcut_suggests_a_delay() {
    let mut g = FlowGraph::new();
    let u = g.add_regular("u");
    let (si, so) = g.add_blocking("sorter");
    let w = g.add_regular("w");
    g.add_push(u, si);
    g.add_push(so, w);
    g.add_push(u, w);
    let err = g.validate().unwrap_err();
    assert!(matches!(err, ValidationError::SamePhase { .. }));
    assert!(err.to_string().contains("delay"), "{err}");
}
