//! The component contract: lifecycle hooks, push/pull streaming, metadata
//! forwarding, progress steps and memory declarations.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Reachability;
use crate::memory::{MaxMemory, MemoryRequest};
use crate::progress::PhaseTracker;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u64);

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

impl NodeId {
    /// Ids increase in creation order.
    pub fn fresh() -> Self {
        NodeId(NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Whether a node stands alone or is half of a blocking component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Regular,
    Input { partner: NodeId },
    Output { partner: NodeId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Lifecycle {
    Idle,
    Active,
    Ended,
}

/// State every node carries; the framework reads and writes it around the
/// lifecycle calls.
pub struct NodeBase {
    id: NodeId,
    name: String,
    kind: NodeKind,
    memory: MemoryRequest,
    assigned: Option<u64>,
    declared_steps: Option<u64>,
    completed_steps: u64,
    tracker: Option<Arc<PhaseTracker>>,
    state: Lifecycle,
}

impl fmt::Debug for NodeBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NodeBase")
            .field("id", &self.id)
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("memory", &self.memory)
            .field("assigned", &self.assigned)
            .field("declared_steps", &self.declared_steps)
            .field("completed_steps", &self.completed_steps)
            .field("state", &self.state)
            .finish()
    }
}

/// Clones keep the id. Used for replicas that never enter a flow graph,
/// such as the per-worker copies inside a parallel wrapper.
impl Clone for NodeBase {
    fn clone(&self) -> Self {
        NodeBase {
            id: self.id,
            name: self.name.clone(),
            kind: self.kind,
            memory: self.memory,
            assigned: self.assigned,
            declared_steps: self.declared_steps,
            completed_steps: 0,
            tracker: None,
            state: Lifecycle::Idle,
        }
    }
}

impl NodeBase {
    pub fn new(name: impl Into<String>) -> Self {
        NodeBase {
            id: NodeId::fresh(),
            name: name.into(),
            kind: NodeKind::Regular,
            memory: MemoryRequest::default(),
            assigned: None,
            declared_steps: None,
            completed_steps: 0,
            tracker: None,
            state: Lifecycle::Idle,
        }
    }

    /// Fresh bases for the two halves of a blocking component.
    pub fn blocking_pair(input_name: impl Into<String>, output_name: impl Into<String>) -> (Self, Self) {
        let mut input = NodeBase::new(input_name);
        let mut output = NodeBase::new(output_name);
        input.kind = NodeKind::Input { partner: output.id };
        output.kind = NodeKind::Output { partner: input.id };
        (input, output)
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> NodeKind {
        self.kind
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    /// Raises a smaller bounded maximum to match.
    pub fn set_minimum_memory(&mut self, bytes: u64) {
        self.memory.minimum = bytes;
        if let MaxMemory::Bounded(b) = self.memory.maximum {
            self.memory.maximum = MaxMemory::Bounded(b.max(bytes));
        }
    }

    pub fn set_maximum_memory(&mut self, bytes: MaxMemory) {
        self.memory.maximum = bytes;
    }

    pub fn set_memory_priority(&mut self, priority: f64) {
        self.memory.priority = priority;
    }

    pub fn memory_request(&self) -> MemoryRequest {
        self.memory
    }

    /// Bytes granted to this node for its phase.
    pub fn get_available_memory(&self) -> Result<u64> {
        self.assigned.ok_or_else(|| Error::Lifecycle {
            node: self.name.clone(),
            message: "memory has not been assigned yet".into(),
        })
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.declared_steps = Some(steps);
        self.completed_steps = 0;
    }

    pub fn declared_steps(&self) -> Option<u64> {
        self.declared_steps
    }

    pub fn completed_steps(&self) -> u64 {
        self.completed_steps
    }

    #[inline]
    pub fn step(&mut self) {
        self.step_by(1);
    }

    /// Overshoot past the declared count is dropped.
    pub fn step_by(&mut self, k: u64) {
        let Some(declared) = self.declared_steps else {
            return;
        };
        let k = k.min(declared - self.completed_steps);
        if k == 0 {
            return;
        }
        self.completed_steps += k;
        if let Some(tracker) = &self.tracker {
            tracker.advance(k);
        }
    }

    /// Errors unless the node is between its `begin` and `end`.
    #[inline]
    pub fn ensure_active(&self) -> Result<()> {
        if self.state == Lifecycle::Active {
            Ok(())
        } else {
            Err(Error::contract(
                &self.name,
                format!("streaming call outside the begin/end window ({:?})", self.state),
            ))
        }
    }

    pub fn is_active(&self) -> bool {
        self.state == Lifecycle::Active
    }

    pub(crate) fn assign(&mut self, bytes: u64) {
        self.assigned = Some(bytes);
    }

    pub(crate) fn attach_tracker(&mut self, tracker: Option<Arc<PhaseTracker>>) {
        self.tracker = tracker;
    }

    pub(crate) fn activate(&mut self) {
        self.state = Lifecycle::Active;
    }

    pub(crate) fn finish(&mut self) {
        self.state = Lifecycle::Ended;
        self.tracker = None;
    }
}

/// How a node reaches one of the nodes it owns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Link {
    /// The owner pushes items into the child.
    Push,
    /// The owner pulls items out of the child.
    Pull,
    /// Owned without a streaming edge, e.g. the output half of a sorter.
    Owned,
}

pub trait Node {
    fn base(&self) -> &NodeBase;
    fn base_mut(&mut self) -> &mut NodeBase;

    /// Runs before `begin`, in topological order; the only place where
    /// metadata can be forwarded and fetched.
    fn propagate(&mut self, _ctx: &mut PropagateContext<'_>) -> Result<()> {
        Ok(())
    }

    fn begin(&mut self) -> Result<()> {
        Ok(())
    }

    /// Drives a phase. Only called on the phase's initiator.
    fn go(&mut self) -> Result<()> {
        Err(Error::Lifecycle {
            node: self.base().name().to_owned(),
            message: "node has no go() but was chosen as a phase initiator".into(),
        })
    }

    fn end(&mut self) -> Result<()> {
        Ok(())
    }

    /// Hands every owned node to `visit`.
    fn visit_children(&mut self, _visit: &mut dyn FnMut(Link, &mut dyn Node)) {}
}

pub trait Push<T>: Node {
    fn push(&mut self, item: T) -> Result<()>;
}

pub trait Pull<T>: Node {
    fn pull(&mut self) -> Result<T>;
    fn can_pull(&mut self) -> bool;
}

impl<N: Node + ?Sized> Node for Box<N> {
    fn base(&self) -> &NodeBase {
        (**self).base()
    }
    fn base_mut(&mut self) -> &mut NodeBase {
        (**self).base_mut()
    }
    fn propagate(&mut self, ctx: &mut PropagateContext<'_>) -> Result<()> {
        (**self).propagate(ctx)
    }
    fn begin(&mut self) -> Result<()> {
        (**self).begin()
    }
    fn go(&mut self) -> Result<()> {
        (**self).go()
    }
    fn end(&mut self) -> Result<()> {
        (**self).end()
    }
    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        (**self).visit_children(visit)
    }
}

impl<T, P: Push<T> + ?Sized> Push<T> for Box<P> {
    #[inline]
    fn push(&mut self, item: T) -> Result<()> {
        (**self).push(item)
    }
}

impl<T, P: Pull<T> + ?Sized> Pull<T> for Box<P> {
    #[inline]
    fn pull(&mut self) -> Result<T> {
        (**self).pull()
    }
    fn can_pull(&mut self) -> bool {
        (**self).can_pull()
    }
}

/// Pre-order walk over `node` and everything it owns.
pub(crate) fn walk(node: &mut dyn Node, f: &mut dyn FnMut(&mut dyn Node)) {
    f(node);
    node.visit_children(&mut |_, child| walk(child, f));
}

type Visit<'a, R> = Option<Box<dyn FnOnce(&mut dyn Node) -> R + 'a>>;

/// Calls `f` on the node with `id` somewhere under `roots`.
pub(crate) fn with_node<R>(
    roots: &mut [Box<dyn Node>],
    id: NodeId,
    f: impl FnOnce(&mut dyn Node) -> R,
) -> Option<R> {
    fn search<R>(node: &mut dyn Node, id: NodeId, f: &mut Visit<'_, R>, out: &mut Option<R>) {
        if out.is_some() {
            return;
        }
        if node.base().id() == id {
            if let Some(f) = f.take() {
                *out = Some(f(node));
            }
            return;
        }
        node.visit_children(&mut |_, child| search(child, id, f, out));
    }
    let mut f: Visit<'_, R> = Some(Box::new(f));
    let mut out = None;
    for root in roots.iter_mut() {
        search(root.as_mut(), id, &mut f, &mut out);
        if out.is_some() {
            break;
        }
    }
    out
}

/// A metadata value. Kept to a closed set of types so it can be printed
/// and compared.
#[derive(Clone, Debug, PartialEq)]
pub enum MetaValue {
    Integer(i64),
    Rational(f64),
    Text(String),
    Pair(i64, i64),
}

impl MetaValue {
    pub fn type_name(&self) -> &'static str {
        match self {
            MetaValue::Integer(_) => "integer",
            MetaValue::Rational(_) => "rational",
            MetaValue::Text(_) => "string",
            MetaValue::Pair(..) => "integer pair",
        }
    }
}

impl From<i64> for MetaValue {
    fn from(v: i64) -> Self {
        MetaValue::Integer(v)
    }
}

impl From<u64> for MetaValue {
    fn from(v: u64) -> Self {
        MetaValue::Integer(v as i64)
    }
}

impl From<f64> for MetaValue {
    fn from(v: f64) -> Self {
        MetaValue::Rational(v)
    }
}

impl From<&str> for MetaValue {
    fn from(v: &str) -> Self {
        MetaValue::Text(v.to_owned())
    }
}

impl From<String> for MetaValue {
    fn from(v: String) -> Self {
        MetaValue::Text(v)
    }
}

impl From<(i64, i64)> for MetaValue {
    fn from((a, b): (i64, i64)) -> Self {
        MetaValue::Pair(a, b)
    }
}

impl From<(u64, u64)> for MetaValue {
    fn from((a, b): (u64, u64)) -> Self {
        MetaValue::Pair(a as i64, b as i64)
    }
}

/// Types that [`PropagateContext::fetch`] can produce.
pub trait MetaType: Sized {
    const TYPE_NAME: &'static str;
    fn from_meta(value: &MetaValue) -> Option<Self>;
}

impl MetaType for i64 {
    const TYPE_NAME: &'static str = "integer";
    fn from_meta(value: &MetaValue) -> Option<Self> {
        match value {
            MetaValue::Integer(v) => Some(*v),
            _ => None,
        }
    }
}

impl MetaType for u64 {
    const TYPE_NAME: &'static str = "integer";
    fn from_meta(value: &MetaValue) -> Option<Self> {
        match value {
            MetaValue::Integer(v) => u64::try_from(*v).ok(),
            _ => None,
        }
    }
}

impl MetaType for f64 {
    const TYPE_NAME: &'static str = "rational";
    fn from_meta(value: &MetaValue) -> Option<Self> {
        match value {
            MetaValue::Rational(v) => Some(*v),
            _ => None,
        }
    }
}

impl MetaType for String {
    const TYPE_NAME: &'static str = "string";
    fn from_meta(value: &MetaValue) -> Option<Self> {
        match value {
            MetaValue::Text(v) => Some(v.clone()),
            _ => None,
        }
    }
}

impl MetaType for (i64, i64) {
    const TYPE_NAME: &'static str = "integer pair";
    fn from_meta(value: &MetaValue) -> Option<Self> {
        match value {
            MetaValue::Pair(a, b) => Some((*a, *b)),
            _ => None,
        }
    }
}

impl MetaType for (u64, u64) {
    const TYPE_NAME: &'static str = "integer pair";
    fn from_meta(value: &MetaValue) -> Option<Self> {
        match value {
            MetaValue::Pair(a, b) => Some((u64::try_from(*a).ok()?, u64::try_from(*b).ok()?)),
            _ => None,
        }
    }
}

/// Where a metadata entry came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Origin {
    /// Forwarded on the pipeline before execution; visible everywhere.
    Boundary,
    Node(NodeId),
}

#[derive(Clone, Debug, Default)]
pub struct MetadataStore {
    entries: BTreeMap<(Origin, String), (u64, MetaValue)>,
    sequence: u64,
}

impl MetadataStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Last write from the same origin wins.
    pub fn forward(&mut self, origin: Origin, key: impl Into<String>, value: MetaValue) {
        self.sequence += 1;
        self.entries.insert((origin, key.into()), (self.sequence, value));
    }

    /// The most recently forwarded value of `key` whose origin is the
    /// boundary or a node with a path to `at`.
    pub fn lookup(&self, key: &str, at: NodeId, reach: &Reachability) -> Option<&MetaValue> {
        self.entries
            .iter()
            .filter(|((origin, k), _)| {
                k == key
                    && match origin {
                        Origin::Boundary => true,
                        Origin::Node(u) => reach.reaches(*u, at),
                    }
            })
            .max_by_key(|(_, (seq, _))| *seq)
            .map(|(_, (_, v))| v)
    }
}

/// What a node sees during `propagate`.
pub struct PropagateContext<'a> {
    store: &'a mut MetadataStore,
    reach: &'a Reachability,
    node: NodeId,
    node_name: String,
}

impl<'a> PropagateContext<'a> {
    pub fn new(store: &'a mut MetadataStore, reach: &'a Reachability, node: &NodeBase) -> Self {
        PropagateContext {
            store,
            reach,
            node: node.id(),
            node_name: node.name().to_owned(),
        }
    }

    /// Makes `value` visible to every node reachable from this one.
    pub fn forward(&mut self, key: impl Into<String>, value: impl Into<MetaValue>) {
        self.store.forward(Origin::Node(self.node), key, value.into());
    }

    pub fn fetch_value(&self, key: &str) -> Result<&MetaValue> {
        self.store
            .lookup(key, self.node, self.reach)
            .ok_or_else(|| Error::MissingMetadata {
                key: key.to_owned(),
                node: self.node_name.clone(),
            })
    }

    pub fn fetch<T: MetaType>(&self, key: &str) -> Result<T> {
        let value = self.fetch_value(key)?;
        T::from_meta(value).ok_or_else(|| Error::MetadataType {
            key: key.to_owned(),
            expected: T::TYPE_NAME,
            found: value.type_name(),
        })
    }

    pub fn can_fetch(&self, key: &str) -> bool {
        self.store.lookup(key, self.node, self.reach).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_follow_creation_order() {
        let a = NodeBase::new("a");
        let b = NodeBase::new("b");
        assert!(a.id() < b.id());
    }

    #[test]
    fn blocking_pair_links_partners() {
        let (i, o) = NodeBase::blocking_pair("in", "out");
        assert_eq!(i.kind(), NodeKind::Input { partner: o.id() });
        assert_eq!(o.kind(), NodeKind::Output { partner: i.id() });
    }

    #[test]
    fn default_memory_request() {
        let b = NodeBase::new("x");
        let r = b.memory_request();
        assert_eq!((r.minimum, r.maximum, r.priority), (0, MaxMemory::Bounded(0), 1.0));
        assert!(matches!(b.get_available_memory(), Err(Error::Lifecycle { .. })));
    }

    #[test]
    fn steps_clamp_at_declared() {
        let mut b = NodeBase::new("x");
        b.set_steps(3);
        for _ in 0..5 {
            b.step();
        }
        assert_eq!(b.completed_steps(), 3);
    }

    #[test]
    fn streaming_outside_window_is_a_violation() {
        let mut b = NodeBase::new("x");
        assert!(matches!(b.ensure_active(), Err(Error::ContractViolation { .. })));
        b.activate();
        assert!(b.ensure_active().is_ok());
        b.finish();
        assert!(b.ensure_active().is_err());
    }

    #[test]
    fn same_origin_overwrites() {
        let reach = Reachability::default();
        let mut store = MetadataStore::new();
        store.forward(Origin::Boundary, "k", MetaValue::Integer(1));
        store.forward(Origin::Boundary, "k", MetaValue::Integer(2));
        assert_eq!(store.lookup("k", NodeId(99), &reach), Some(&MetaValue::Integer(2)));
    }

    #[test]
    fn typed_fetch() {
        let reach = Reachability::default();
        let mut store = MetadataStore::new();
        store.forward(Origin::Boundary, "n", MetaValue::Integer(7));
        store.forward(Origin::Boundary, "size", (3u64, 4u64).into());
        let base = NodeBase::new("v");
        let ctx = PropagateContext::new(&mut store, &reach, &base);
        assert_eq!(ctx.fetch::<i64>("n").unwrap(), 7);
        assert_eq!(ctx.fetch::<(u64, u64)>("size").unwrap(), (3, 4));
        assert!(matches!(ctx.fetch::<String>("n"), Err(Error::MetadataType { .. })));
        assert!(matches!(ctx.fetch::<i64>("absent"), Err(Error::MissingMetadata { .. })));
    }
}
