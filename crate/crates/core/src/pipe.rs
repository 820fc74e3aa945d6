//! Building push pipelines with the `|` operator.
//!
//! A pipeline is written left to right as `source | middle | ... | sink`.
//! Each piece is a factory; joining a source to a sink builds the nodes
//! back to front so every node owns the node it pushes into, and the push
//! calls compile down to static dispatch.

use std::ops::BitOr;

use crate::error::Result;
use crate::executor::{Executor, PipelineRun};
use crate::graph::{FlowGraph, PhasePlan};
use crate::node::{MetaValue, Node, NodeBase, PropagateContext, Push};
use crate::progress::ProgressIndicator;

/// Builds an initiator that pushes `Out` items into its destination.
pub trait SourceFactory {
    type Out;
    fn build<D: Push<Self::Out> + 'static>(self, dest: D) -> Box<dyn Node>;
}

/// Builds a node that accepts `In` items and pushes `Out` items onward.
pub trait MiddleFactory<In> {
    type Out;
    fn build<D: Push<Self::Out> + 'static>(self, dest: D) -> impl Push<In> + 'static;

    /// Lets a factory read metadata before it is replicated. Wrappers such
    /// as `parallel` call this from their own `propagate`, since the nodes
    /// they build later never see one.
    fn prepare(&mut self, _ctx: &mut PropagateContext<'_>) -> Result<()> {
        Ok(())
    }
}

/// Builds a terminal node that accepts `In` items.
pub trait SinkFactory<In> {
    fn build(self) -> impl Push<In> + 'static;
}

/// Factories of single nodes expose the base they will hand to the node.
pub trait ConfigureNode {
    fn node_base_mut(&mut self) -> &mut NodeBase;
}

macro_rules! configure_methods {
    ($wrapper:ident) => {
        impl<F: ConfigureNode> $wrapper<F> {
            pub fn memory_priority(mut self, priority: f64) -> Self {
                self.0.node_base_mut().set_memory_priority(priority);
                self
            }

            pub fn name(mut self, name: impl Into<String>) -> Self {
                self.0.node_base_mut().set_name(name);
                self
            }

            pub fn id(&mut self) -> crate::node::NodeId {
                self.0.node_base_mut().id()
            }
        }
    };
}

pub struct PipeBegin<S>(pub S);
pub struct PipeMiddle<M>(pub M);
pub struct PipeEnd<E>(pub E);

configure_methods!(PipeBegin);
configure_methods!(PipeMiddle);
configure_methods!(PipeEnd);

impl<M> PipeMiddle<M> {
    pub fn into_inner(self) -> M {
        self.0
    }
}

pub struct Then<A, B>(A, B);

impl<S, M> SourceFactory for Then<S, M>
where
    S: SourceFactory,
    M: MiddleFactory<S::Out>,
{
    type Out = M::Out;
    fn build<D: Push<Self::Out> + 'static>(self, dest: D) -> Box<dyn Node> {
        self.0.build(self.1.build(dest))
    }
}

impl<In, A, B> MiddleFactory<In> for Then<A, B>
where
    A: MiddleFactory<In>,
    B: MiddleFactory<A::Out>,
{
    type Out = B::Out;
    fn build<D: Push<Self::Out> + 'static>(self, dest: D) -> impl Push<In> + 'static {
        self.0.build(self.1.build(dest))
    }

    fn prepare(&mut self, ctx: &mut PropagateContext<'_>) -> Result<()> {
        self.0.prepare(ctx)?;
        self.1.prepare(ctx)
    }
}

impl<In, A, B> SinkFactory<In> for Then<A, B>
where
    A: MiddleFactory<In>,
    B: SinkFactory<A::Out>,
{
    fn build(self) -> impl Push<In> + 'static {
        self.0.build(self.1.build())
    }
}

impl<S, M> BitOr<PipeMiddle<M>> for PipeBegin<S>
where
    S: SourceFactory,
    M: MiddleFactory<S::Out>,
{
    type Output = PipeBegin<Then<S, M>>;
    fn bitor(self, rhs: PipeMiddle<M>) -> Self::Output {
        PipeBegin(Then(self.0, rhs.0))
    }
}

impl<A, B> BitOr<PipeMiddle<B>> for PipeMiddle<A> {
    type Output = PipeMiddle<Then<A, B>>;
    fn bitor(self, rhs: PipeMiddle<B>) -> Self::Output {
        PipeMiddle(Then(self.0, rhs.0))
    }
}

impl<A, B> BitOr<PipeEnd<B>> for PipeMiddle<A> {
    type Output = PipeEnd<Then<A, B>>;
    fn bitor(self, rhs: PipeEnd<B>) -> Self::Output {
        PipeEnd(Then(self.0, rhs.0))
    }
}

impl<S, E> BitOr<PipeEnd<E>> for PipeBegin<S>
where
    S: SourceFactory,
    E: SinkFactory<S::Out>,
{
    type Output = Pipeline;
    fn bitor(self, rhs: PipeEnd<E>) -> Pipeline {
        Pipeline::from_node(self.0.build(rhs.0.build()))
    }
}

/// A set of built node trees plus metadata forwarded from outside.
#[derive(Default)]
pub struct Pipeline {
    roots: Vec<Box<dyn Node>>,
    forwards: Vec<(String, MetaValue)>,
}

impl Pipeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_node(root: Box<dyn Node>) -> Self {
        Pipeline {
            roots: vec![root],
            forwards: Vec::new(),
        }
    }

    /// Makes `key` visible to every node of the pipeline.
    pub fn forward(&mut self, key: impl Into<String>, value: impl Into<MetaValue>) {
        self.forwards.push((key.into(), value.into()));
    }

    /// Merges two pipelines into one that runs as a unit, e.g. the two
    /// halves around a passive component.
    pub fn join(mut self, other: Pipeline) -> Pipeline {
        self.roots.extend(other.roots);
        self.forwards.extend(other.forwards);
        self
    }

    pub fn add_root(&mut self, root: Box<dyn Node>) {
        self.roots.push(root);
    }

    pub fn graph(&mut self) -> FlowGraph {
        FlowGraph::from_roots(&mut self.roots)
    }

    pub fn plan(&mut self) -> Result<PhasePlan> {
        Ok(self.graph().plan()?)
    }

    pub fn forwards(&self) -> &[(String, MetaValue)] {
        &self.forwards
    }

    pub(crate) fn roots_mut(&mut self) -> &mut Vec<Box<dyn Node>> {
        &mut self.roots
    }

    /// Shorthand for [`Executor::run`].
    pub fn run(
        self,
        executor: &Executor,
        instance_size: u64,
        pipeline_id: &str,
        progress: std::sync::Arc<dyn ProgressIndicator>,
    ) -> Result<PipelineRun> {
        executor.run(self, instance_size, pipeline_id, progress)
    }
}
