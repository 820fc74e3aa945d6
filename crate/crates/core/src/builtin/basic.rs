//! Sources, sinks and stateless per-item nodes.

use std::cell::RefCell;
use std::marker::PhantomData;
use std::path::PathBuf;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::node::{Link, Node, NodeBase, PropagateContext, Pull, Push};
use crate::pipe::{ConfigureNode, MiddleFactory, PipeBegin, PipeEnd, PipeMiddle, SinkFactory, SourceFactory};
use crate::stream::{OpenMode, Record, Storage, TypedStream};

macro_rules! node_base {
    () => {
        fn base(&self) -> &NodeBase {
            &self.base
        }
        fn base_mut(&mut self) -> &mut NodeBase {
            &mut self.base
        }
    };
}
pub(crate) use node_base;

macro_rules! configure {
    ($t:ident < $($g:ident),* >) => {
        impl<$($g),*> ConfigureNode for $t<$($g),*> {
            fn node_base_mut(&mut self) -> &mut NodeBase {
                &mut self.base
            }
        }
    };
}

/// Pushes the items of a vector, in order.
pub fn from_vec<T: 'static>(items: Vec<T>) -> PipeBegin<VecSourceFactory<T>> {
    let mut base = NodeBase::new("vector source");
    base.set_steps(items.len() as u64);
    PipeBegin(VecSourceFactory { base, items })
}

pub struct VecSourceFactory<T> {
    base: NodeBase,
    items: Vec<T>,
}
configure!(VecSourceFactory<T>);

impl<T: 'static> SourceFactory for VecSourceFactory<T> {
    type Out = T;
    fn build<D: Push<T> + 'static>(self, dest: D) -> Box<dyn Node> {
        Box::new(VecSource {
            base: self.base,
            items: self.items,
            dest,
        })
    }
}

struct VecSource<T, D> {
    base: NodeBase,
    items: Vec<T>,
    dest: D,
}

impl<T, D: Push<T>> Node for VecSource<T, D> {
    node_base!();

    fn go(&mut self) -> Result<()> {
        for item in std::mem::take(&mut self.items) {
            self.dest.push(item)?;
            self.base.step();
        }
        Ok(())
    }

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        visit(Link::Push, &mut self.dest);
    }
}

/// Pushes `f(0), f(1), ..., f(n - 1)`.
pub fn generate<T: 'static, F: FnMut(u64) -> T + 'static>(n: u64, f: F) -> PipeBegin<GenerateFactory<F>> {
    let mut base = NodeBase::new("generator");
    base.set_steps(n);
    PipeBegin(GenerateFactory { base, n, f })
}

pub struct GenerateFactory<F> {
    base: NodeBase,
    n: u64,
    f: F,
}
configure!(GenerateFactory<F>);

impl<T: 'static, F: FnMut(u64) -> T + 'static> SourceFactory for GenerateFactory<F> {
    type Out = T;
    fn build<D: Push<T> + 'static>(self, dest: D) -> Box<dyn Node> {
        Box::new(Generate {
            base: self.base,
            n: self.n,
            f: self.f,
            dest,
        })
    }
}

struct Generate<F, D> {
    base: NodeBase,
    n: u64,
    f: F,
    dest: D,
}

impl<T, F: FnMut(u64) -> T, D: Push<T>> Node for Generate<F, D> {
    node_base!();

    fn go(&mut self) -> Result<()> {
        for i in 0..self.n {
            self.dest.push((self.f)(i))?;
            self.base.step();
        }
        Ok(())
    }

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        visit(Link::Push, &mut self.dest);
    }
}

fn block_bytes<T: Record>(storage: &Storage) -> u64 {
    storage.config().block_bytes(T::SIZE as u64)
}

/// Pushes every item of a stream file.
pub fn stream_source<T: Record>(storage: &Storage, path: impl Into<PathBuf>) -> PipeBegin<StreamSourceFactory<T>> {
    let mut base = NodeBase::new("stream source");
    base.set_minimum_memory(block_bytes::<T>(storage));
    PipeBegin(StreamSourceFactory {
        base,
        storage: storage.clone(),
        path: path.into(),
        _item: PhantomData,
    })
}

pub struct StreamSourceFactory<T> {
    base: NodeBase,
    storage: Storage,
    path: PathBuf,
    _item: PhantomData<fn() -> T>,
}
configure!(StreamSourceFactory<T>);

impl<T: Record> SourceFactory for StreamSourceFactory<T> {
    type Out = T;
    fn build<D: Push<T> + 'static>(self, dest: D) -> Box<dyn Node> {
        Box::new(StreamSource {
            base: self.base,
            storage: self.storage,
            path: self.path,
            stream: None,
            dest,
        })
    }
}

struct StreamSource<T: Record, D> {
    base: NodeBase,
    storage: Storage,
    path: PathBuf,
    stream: Option<TypedStream<T>>,
    dest: D,
}

impl<T: Record, D: Push<T>> Node for StreamSource<T, D> {
    node_base!();

    fn propagate(&mut self, ctx: &mut PropagateContext<'_>) -> Result<()> {
        let stream = self.storage.open_typed::<T>(&self.path, OpenMode::Read)?;
        self.base.set_steps(stream.len());
        ctx.forward("items", stream.len());
        self.stream = Some(stream);
        Ok(())
    }

    fn go(&mut self) -> Result<()> {
        let stream = self.stream.as_mut().ok_or_else(|| Error::contract(self.base.name(), "stream not open"))?;
        for _ in 0..stream.len() {
            self.dest.push(stream.read()?)?;
            self.base.step();
        }
        Ok(())
    }

    fn end(&mut self) -> Result<()> {
        self.stream = None;
        Ok(())
    }

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        visit(Link::Push, &mut self.dest);
    }
}

/// Writes every pushed item to a stream file, replacing its contents.
pub fn stream_sink<T: Record>(storage: &Storage, path: impl Into<PathBuf>) -> PipeEnd<StreamSinkFactory<T>> {
    let mut base = NodeBase::new("stream sink");
    base.set_minimum_memory(block_bytes::<T>(storage));
    PipeEnd(StreamSinkFactory {
        base,
        storage: storage.clone(),
        path: path.into(),
        _item: PhantomData,
    })
}

pub struct StreamSinkFactory<T> {
    base: NodeBase,
    storage: Storage,
    path: PathBuf,
    _item: PhantomData<fn() -> T>,
}
configure!(StreamSinkFactory<T>);

impl<T: Record> SinkFactory<T> for StreamSinkFactory<T> {
    fn build(self) -> impl Push<T> + 'static {
        StreamSink {
            base: self.base,
            storage: self.storage,
            path: self.path,
            stream: None,
        }
    }
}

struct StreamSink<T: Record> {
    base: NodeBase,
    storage: Storage,
    path: PathBuf,
    stream: Option<TypedStream<T>>,
}

impl<T: Record> Node for StreamSink<T> {
    node_base!();

    fn begin(&mut self) -> Result<()> {
        self.stream = Some(self.storage.open_typed(&self.path, OpenMode::Write)?);
        Ok(())
    }

    fn end(&mut self) -> Result<()> {
        match self.stream.take() {
            Some(s) => s.close(),
            None => Ok(()),
        }
    }
}

impl<T: Record> Push<T> for StreamSink<T> {
    #[inline]
    fn push(&mut self, item: T) -> Result<()> {
        match &mut self.stream {
            Some(s) => s.write(&item),
            None => Err(Error::contract(self.base.name(), "push outside the begin/end window")),
        }
    }
}

/// A pull source over a stream file, for consumers that pull.
pub fn stream_pull<T: Record>(storage: &Storage, path: impl Into<PathBuf>) -> StreamPull<T> {
    let mut base = NodeBase::new("stream pull source");
    base.set_minimum_memory(block_bytes::<T>(storage));
    StreamPull {
        base,
        storage: storage.clone(),
        path: path.into(),
        stream: None,
    }
}

pub struct StreamPull<T: Record> {
    base: NodeBase,
    storage: Storage,
    path: PathBuf,
    stream: Option<TypedStream<T>>,
}

impl<T: Record> Node for StreamPull<T> {
    node_base!();

    fn propagate(&mut self, _ctx: &mut PropagateContext<'_>) -> Result<()> {
        let stream = self.storage.open_typed::<T>(&self.path, OpenMode::Read)?;
        self.base.set_steps(stream.len());
        self.stream = Some(stream);
        Ok(())
    }

    fn end(&mut self) -> Result<()> {
        self.stream = None;
        Ok(())
    }
}

impl<T: Record> Pull<T> for StreamPull<T> {
    fn pull(&mut self) -> Result<T> {
        let stream = self.stream.as_mut().ok_or_else(|| Error::contract(self.base.name(), "pull outside the begin/end window"))?;
        let item = stream.read()?;
        self.base.step();
        Ok(item)
    }

    fn can_pull(&mut self) -> bool {
        self.stream.as_ref().is_some_and(|s| s.cursor() < s.len())
    }
}

/// A pull source over a vector.
pub fn pull_vec<T: 'static>(items: Vec<T>) -> VecPull<T> {
    VecPull {
        base: NodeBase::new("vector pull source"),
        items: items.into_iter().peekable(),
    }
}

pub struct VecPull<T> {
    base: NodeBase,
    items: std::iter::Peekable<std::vec::IntoIter<T>>,
}

impl<T> Node for VecPull<T> {
    node_base!();
}

impl<T> Pull<T> for VecPull<T> {
    fn pull(&mut self) -> Result<T> {
        self.base.ensure_active()?;
        self.items.next().ok_or(Error::EndOfStream)
    }

    fn can_pull(&mut self) -> bool {
        self.items.peek().is_some()
    }
}

/// An initiator that pulls everything from `source` and pushes it on.
pub fn pump<T: 'static, P: Pull<T> + 'static>(source: P) -> PipeBegin<PumpFactory<T, P>> {
    PipeBegin(PumpFactory {
        base: NodeBase::new("pump"),
        source,
        _item: PhantomData,
    })
}

pub struct PumpFactory<T, P> {
    base: NodeBase,
    source: P,
    _item: PhantomData<fn() -> T>,
}
configure!(PumpFactory<T, P>);

impl<T: 'static, P: Pull<T> + 'static> SourceFactory for PumpFactory<T, P> {
    type Out = T;
    fn build<D: Push<T> + 'static>(self, dest: D) -> Box<dyn Node> {
        Box::new(Pump {
            base: self.base,
            source: self.source,
            dest,
            _item: PhantomData,
        })
    }
}

struct Pump<T, P, D> {
    base: NodeBase,
    source: P,
    dest: D,
    _item: PhantomData<fn() -> T>,
}

impl<T, P: Pull<T>, D: Push<T>> Node for Pump<T, P, D> {
    node_base!();

    fn go(&mut self) -> Result<()> {
        while self.source.can_pull() {
            self.dest.push(self.source.pull()?)?;
        }
        Ok(())
    }

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        visit(Link::Pull, &mut self.source);
        visit(Link::Push, &mut self.dest);
    }
}

/// Applies `f` to every item.
pub fn map<In: 'static, Out: 'static, F: FnMut(In) -> Out + 'static>(f: F) -> PipeMiddle<MapFactory<In, Out, F>> {
    PipeMiddle(MapFactory {
        base: NodeBase::new("map"),
        f,
        _types: PhantomData,
    })
}

pub struct MapFactory<In, Out, F> {
    base: NodeBase,
    f: F,
    _types: PhantomData<fn(In) -> Out>,
}
configure!(MapFactory<In, Out, F>);

impl<In, Out, F: Clone> Clone for MapFactory<In, Out, F> {
    fn clone(&self) -> Self {
        MapFactory {
            base: self.base.clone(),
            f: self.f.clone(),
            _types: PhantomData,
        }
    }
}

impl<In: 'static, Out: 'static, F: FnMut(In) -> Out + 'static> MiddleFactory<In> for MapFactory<In, Out, F> {
    type Out = Out;
    fn build<D: Push<Out> + 'static>(self, dest: D) -> impl Push<In> + 'static {
        Map {
            base: self.base,
            f: self.f,
            dest,
            _types: PhantomData,
        }
    }
}

struct Map<In, Out, F, D> {
    base: NodeBase,
    f: F,
    dest: D,
    _types: PhantomData<fn(In) -> Out>,
}

impl<In, Out, F, D: Push<Out>> Node for Map<In, Out, F, D> {
    node_base!();

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        visit(Link::Push, &mut self.dest);
    }
}

impl<In, Out, F: FnMut(In) -> Out, D: Push<Out>> Push<In> for Map<In, Out, F, D> {
    #[inline]
    fn push(&mut self, item: In) -> Result<()> {
        self.base.ensure_active()?;
        self.dest.push((self.f)(item))
    }
}

/// Passes on the items for which `pred` holds.
pub fn filter<T: 'static, P: FnMut(&T) -> bool + 'static>(pred: P) -> PipeMiddle<FilterFactory<T, P>> {
    PipeMiddle(FilterFactory {
        base: NodeBase::new("filter"),
        pred,
        _item: PhantomData,
    })
}

pub struct FilterFactory<T, P> {
    base: NodeBase,
    pred: P,
    _item: PhantomData<fn(T)>,
}
configure!(FilterFactory<T, P>);

impl<T, P: Clone> Clone for FilterFactory<T, P> {
    fn clone(&self) -> Self {
        FilterFactory {
            base: self.base.clone(),
            pred: self.pred.clone(),
            _item: PhantomData,
        }
    }
}

impl<T: 'static, P: FnMut(&T) -> bool + 'static> MiddleFactory<T> for FilterFactory<T, P> {
    type Out = T;
    fn build<D: Push<T> + 'static>(self, dest: D) -> impl Push<T> + 'static {
        Filter {
            base: self.base,
            pred: self.pred,
            dest,
            _item: PhantomData,
        }
    }
}

struct Filter<T, P, D> {
    base: NodeBase,
    pred: P,
    dest: D,
    _item: PhantomData<fn(T)>,
}

impl<T, P, D: Push<T>> Node for Filter<T, P, D> {
    node_base!();

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        visit(Link::Push, &mut self.dest);
    }
}

impl<T, P: FnMut(&T) -> bool, D: Push<T>> Push<T> for Filter<T, P, D> {
    #[inline]
    fn push(&mut self, item: T) -> Result<()> {
        self.base.ensure_active()?;
        if (self.pred)(&item) {
            self.dest.push(item)?;
        }
        Ok(())
    }
}

/// Handle to the items gathered by a [`collect`] sink.
pub struct Collected<T>(Rc<RefCell<Vec<T>>>);

impl<T> Clone for Collected<T> {
    fn clone(&self) -> Self {
        Collected(Rc::clone(&self.0))
    }
}

impl<T> Collected<T> {
    pub fn take(&self) -> Vec<T> {
        std::mem::take(&mut self.0.borrow_mut())
    }

    pub fn len(&self) -> usize {
        self.0.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.borrow().is_empty()
    }
}

/// A sink that keeps every item in memory.
pub fn collect<T: 'static>() -> (PipeEnd<CollectFactory<T>>, Collected<T>) {
    let items = Collected(Rc::new(RefCell::new(Vec::new())));
    let factory = CollectFactory {
        base: NodeBase::new("collector"),
        items: items.clone(),
    };
    (PipeEnd(factory), items)
}

pub struct CollectFactory<T> {
    base: NodeBase,
    items: Collected<T>,
}
configure!(CollectFactory<T>);

impl<T: 'static> SinkFactory<T> for CollectFactory<T> {
    fn build(self) -> impl Push<T> + 'static {
        CollectSink {
            base: self.base,
            items: self.items,
        }
    }
}

struct CollectSink<T> {
    base: NodeBase,
    items: Collected<T>,
}

impl<T> Node for CollectSink<T> {
    node_base!();
}

impl<T> Push<T> for CollectSink<T> {
    #[inline]
    fn push(&mut self, item: T) -> Result<()> {
        self.base.ensure_active()?;
        self.items.0.borrow_mut().push(item);
        Ok(())
    }
}

/// Calls `f` on every item.
pub fn for_each<T: 'static, F: FnMut(T) -> Result<()> + 'static>(f: F) -> PipeEnd<ForEachFactory<T, F>> {
    PipeEnd(ForEachFactory {
        base: NodeBase::new("for each"),
        f,
        _item: PhantomData,
    })
}

pub struct ForEachFactory<T, F> {
    base: NodeBase,
    f: F,
    _item: PhantomData<fn(T)>,
}
configure!(ForEachFactory<T, F>);

impl<T: 'static, F: FnMut(T) -> Result<()> + 'static> SinkFactory<T> for ForEachFactory<T, F> {
    fn build(self) -> impl Push<T> + 'static {
        ForEach {
            base: self.base,
            f: self.f,
            _item: PhantomData,
        }
    }
}

struct ForEach<T, F> {
    base: NodeBase,
    f: F,
    _item: PhantomData<fn(T)>,
}

impl<T, F> Node for ForEach<T, F> {
    node_base!();
}

impl<T, F: FnMut(T) -> Result<()>> Push<T> for ForEach<T, F> {
    #[inline]
    fn push(&mut self, item: T) -> Result<()> {
        self.base.ensure_active()?;
        (self.f)(item)
    }
}
