//! Instrumented nodes that log their lifecycle calls, plus a generator of
//! random valid graphs made of them and an independent order checker.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use empipe::{Error, Link, Node, NodeBase, NodeId, Pipeline, Pull, Push, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Event {
    Propagate,
    Begin,
    Go,
    End,
}

pub type Log = Rc<RefCell<Vec<(NodeId, Event)>>>;

pub struct Probe {
    base: NodeBase,
    log: Log,
    children: Vec<(Link, Probe)>,
    /// Output half owned by a blocking input.
    partner: Option<Box<Probe>>,
    /// Items this node emits from `go` or hands out through `pull`.
    supply: u64,
    received: u64,
}

impl Probe {
    fn record(&self, event: Event) {
        self.log.borrow_mut().push((self.base.id(), event));
    }

    fn feed_children(&mut self, item: u64) -> Result<()> {
        for (link, child) in &mut self.children {
            match link {
                Link::Push => child.push(item)?,
                Link::Pull => {
                    if child.can_pull() {
                        child.pull()?;
                    }
                }
                Link::Owned => unreachable!(),
            }
        }
        Ok(())
    }
}

impl Node for Probe {
    fn base(&self) -> &NodeBase {
        &self.base
    }

    fn base_mut(&mut self) -> &mut NodeBase {
        &mut self.base
    }

    fn propagate(&mut self, _ctx: &mut empipe::PropagateContext<'_>) -> Result<()> {
        self.record(Event::Propagate);
        Ok(())
    }

    fn begin(&mut self) -> Result<()> {
        self.record(Event::Begin);
        Ok(())
    }

    fn go(&mut self) -> Result<()> {
        self.record(Event::Go);
        for i in 0..self.supply {
            self.feed_children(i)?;
        }
        // Drain whatever the pull sources still hold.
        for (link, child) in &mut self.children {
            if *link == Link::Pull {
                while child.can_pull() {
                    child.pull()?;
                }
            }
        }
        Ok(())
    }

    fn end(&mut self) -> Result<()> {
        self.record(Event::End);
        if let Some(out) = &mut self.partner {
            out.supply = self.received;
        }
        Ok(())
    }

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        for (link, child) in &mut self.children {
            visit(*link, child);
        }
        if let Some(out) = &mut self.partner {
            visit(Link::Owned, out.as_mut());
        }
    }
}

impl Push<u64> for Probe {
    fn push(&mut self, item: u64) -> Result<()> {
        self.base.ensure_active()?;
        self.received += 1;
        if self.partner.is_none() {
            self.feed_children(item)?;
        }
        Ok(())
    }
}

impl Pull<u64> for Probe {
    fn pull(&mut self) -> Result<u64> {
        self.base.ensure_active()?;
        if self.supply == 0 {
            return Err(Error::EndOfStream);
        }
        self.supply -= 1;
        self.feed_children(self.supply)?;
        Ok(self.supply)
    }

    fn can_pull(&mut self) -> bool {
        self.supply > 0
    }
}

/// The structure a random graph was built with, as seen by the checker.
#[derive(Debug, Default)]
pub struct Shape {
    /// Node ids of each phase, in execution order.
    pub phases: Vec<Vec<NodeId>>,
    pub initiators: Vec<NodeId>,
    pub push: Vec<(NodeId, NodeId)>,
    /// (source, puller)
    pub pull: Vec<(NodeId, NodeId)>,
    /// (input, output)
    pub blocking: Vec<(NodeId, NodeId)>,
}

/// Builds `phase_count` phases of `size` probe nodes each, chained by
/// blocking pairs. Each phase is a random tree of push and pull edges
/// rooted at its initiator.
pub fn random_graph(seed: u64, phase_count: usize, size: usize) -> (Pipeline, Shape, Log) {
    assert!(size >= 2 && phase_count >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log: Log = Rc::new(RefCell::new(Vec::new()));
    let mut shape = Shape::default();

    // parents[p][i] = (parent index, link from parent to i)
    let mut parents: Vec<Vec<Option<(usize, Link)>>> = Vec::new();
    let mut bases: Vec<Vec<Option<NodeBase>>> = Vec::new();
    let mut next_root = Some(NodeBase::new("probe"));
    for p in 0..phase_count {
        let last = p + 1 == phase_count;
        let mut phase_bases = vec![next_root.take()];
        let mut phase_parents = vec![None];
        let mut pulled = vec![false];
        for i in 1..size {
            let blocking_input = !last && i + 1 == size;
            let candidates: Vec<usize> = (0..i).filter(|&c| !(blocking_input && pulled[c])).collect();
            let parent = candidates[rng.random_range(0..candidates.len())];
            let link = if blocking_input {
                Link::Push
            } else if pulled[parent] || rng.random_bool(0.5) {
                Link::Pull
            } else {
                Link::Push
            };
            phase_parents.push(Some((parent, link)));
            pulled.push(link == Link::Pull);
            if blocking_input {
                let (input, output) = NodeBase::blocking_pair("probe input", "probe output");
                phase_bases.push(Some(input));
                next_root = Some(output);
            } else {
                phase_bases.push(Some(NodeBase::new("probe")));
            }
        }
        shape.phases.push(phase_bases.iter().map(|b| b.as_ref().unwrap().id()).collect());
        shape.initiators.push(phase_bases[0].as_ref().unwrap().id());
        for (i, parent) in phase_parents.iter().enumerate() {
            if let Some((parent, link)) = parent {
                let (u, v) = (shape.phases[p][*parent], shape.phases[p][i]);
                match link {
                    Link::Push => shape.push.push((u, v)),
                    _ => shape.pull.push((v, u)),
                }
            }
        }
        if p > 0 {
            shape.blocking.push((shape.phases[p - 1][size - 1], shape.phases[p][0]));
        }
        parents.push(phase_parents);
        bases.push(phase_bases);
    }

    fn assemble(
        p: usize,
        i: usize,
        parents: &[Vec<Option<(usize, Link)>>],
        bases: &mut [Vec<Option<NodeBase>>],
        partner: &mut Option<Box<Probe>>,
        log: &Log,
    ) -> Probe {
        let base = bases[p][i].take().unwrap();
        let mut children = Vec::new();
        for (c, parent) in parents[p].iter().enumerate() {
            if let Some((pi, link)) = parent {
                if *pi == i {
                    children.push((*link, assemble(p, c, parents, bases, partner, log)));
                }
            }
        }
        let is_input = i + 1 == parents[p].len() && p + 1 < parents.len();
        Probe {
            base,
            log: Rc::clone(log),
            children,
            partner: if is_input { partner.take() } else { None },
            supply: if p == 0 && i == 0 { 5 } else if parents[p][i].is_some_and(|(_, l)| l == Link::Pull) { 2 } else { 0 },
            received: 0,
        }
    }

    let mut partner: Option<Box<Probe>> = None;
    for p in (0..phase_count).rev() {
        let root = assemble(p, 0, &parents, &mut bases, &mut partner, &log);
        partner = Some(Box::new(root));
    }
    let root: Box<dyn Node> = partner.unwrap();
    (Pipeline::from_node(root), shape, log)
}

/// Every rule the lifecycle must obey, checked against the built shape.
/// Returns one message per violation.
pub fn check_call_order(shape: &Shape, log: &[(NodeId, Event)]) -> Vec<String> {
    let mut violations = Vec::new();
    let mut count: HashMap<(NodeId, Event), usize> = HashMap::new();
    let mut pos: HashMap<(NodeId, Event), usize> = HashMap::new();
    for (i, &(n, e)) in log.iter().enumerate() {
        *count.entry((n, e)).or_default() += 1;
        pos.insert((n, e), i);
    }
    let at = |n: NodeId, e: Event| pos.get(&(n, e)).copied().unwrap_or(usize::MAX);

    for (p, nodes) in shape.phases.iter().enumerate() {
        for &n in nodes {
            for e in [Event::Propagate, Event::Begin, Event::End] {
                let c = count.get(&(n, e)).copied().unwrap_or(0);
                if c != 1 {
                    violations.push(format!("{n} saw {e:?} {c} times"));
                }
            }
            let go = count.get(&(n, Event::Go)).copied().unwrap_or(0);
            let want = usize::from(n == shape.initiators[p]);
            if go != want {
                violations.push(format!("{n} saw go {go} times, expected {want}"));
            }
        }

        let seq = |e: Event| -> Vec<NodeId> {
            log.iter().filter(|(n, ev)| *ev == e && nodes.contains(n)).map(|(n, _)| *n).collect()
        };
        let mut end = seq(Event::End);
        end.reverse();
        if end != seq(Event::Begin) {
            violations.push(format!("phase {p}: end order is not the reverse of begin order"));
        }

        let go = at(shape.initiators[p], Event::Go);
        for &n in nodes {
            if at(n, Event::Begin) > go || at(n, Event::End) < go {
                violations.push(format!("{n}: go outside the begin/end window"));
            }
        }
        if p + 1 < shape.phases.len() {
            let last = nodes.iter().flat_map(|&n| [Event::Propagate, Event::Begin, Event::End].map(|e| at(n, e))).max();
            let first = shape.phases[p + 1].iter().map(|&n| at(n, Event::Propagate)).min();
            if last >= first {
                violations.push(format!("phase {p} overlaps phase {}", p + 1));
            }
        }
    }
    for &(u, v) in &shape.push {
        if at(u, Event::Propagate) > at(v, Event::Propagate) {
            violations.push(format!("push {u}->{v}: propagate out of order"));
        }
        if at(v, Event::Begin) > at(u, Event::Begin) {
            violations.push(format!("push {u}->{v}: destination begun after source"));
        }
    }
    for &(s, p) in &shape.pull {
        if at(s, Event::Propagate) > at(p, Event::Propagate) {
            violations.push(format!("pull {s}->{p}: propagate out of order"));
        }
        if at(s, Event::Begin) > at(p, Event::Begin) {
            violations.push(format!("pull {s}->{p}: source begun after puller"));
        }
    }
    for &(i, o) in &shape.blocking {
        if at(i, Event::End) > at(o, Event::Propagate) {
            violations.push(format!("blocking {i}->{o}: output started before input ended"));
        }
    }
    violations
}
