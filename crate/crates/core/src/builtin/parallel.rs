//! Runs a stateless push component on several worker threads.
//!
//! Items are grouped into batches, batches go to the workers round-robin,
//! and results are re-emitted in the order the batches were sent.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::marker::PhantomData;
use std::rc::Rc;
use std::sync::mpsc::{self, Receiver, Sender, SyncSender};
use std::thread::{self, JoinHandle};

use super::basic::node_base;
use crate::error::{Error, Result};
use crate::memory::MaxMemory;
use crate::node::{walk, Link, Node, NodeBase, PropagateContext, Push};
use crate::pipe::{ConfigureNode, MiddleFactory, PipeMiddle};

pub const DEFAULT_BATCH_SIZE: usize = 2048;

/// Batches queued per worker before the producer blocks.
const QUEUE_DEPTH: usize = 2;

pub fn default_workers() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Wraps `inner`, which must treat every item independently.
pub fn parallel<M>(inner: PipeMiddle<M>) -> PipeMiddle<ParallelFactory<M>> {
    PipeMiddle(ParallelFactory {
        base: NodeBase::new("parallel"),
        inner: inner.into_inner(),
        workers: default_workers(),
        batch_size: DEFAULT_BATCH_SIZE,
    })
}

pub struct ParallelFactory<M> {
    base: NodeBase,
    inner: M,
    workers: usize,
    batch_size: usize,
}

impl<M> ConfigureNode for ParallelFactory<M> {
    fn node_base_mut(&mut self) -> &mut NodeBase {
        &mut self.base
    }
}

impl<M> PipeMiddle<ParallelFactory<M>> {
    pub fn workers(mut self, workers: usize) -> Self {
        assert!(workers >= 1, "worker count must be positive");
        self.0.workers = workers;
        self
    }

    pub fn batch_size(mut self, batch_size: usize) -> Self {
        assert!(batch_size >= 1, "batch size must be positive");
        self.0.batch_size = batch_size;
        self
    }
}

/// Bytes one worker's batches can occupy: its queue, the batch in flight,
/// and the results waiting to be re-emitted.
fn per_worker_bytes<In, Out>(batch_size: usize) -> u64 {
    let item = (std::mem::size_of::<In>() + std::mem::size_of::<Out>()).max(1);
    ((QUEUE_DEPTH + 1) * batch_size * item) as u64
}

impl<In, M> MiddleFactory<In> for ParallelFactory<M>
where
    In: Send + 'static,
    M: MiddleFactory<In> + Clone + Send + 'static,
    M::Out: Send + 'static,
{
    type Out = M::Out;

    fn prepare(&mut self, ctx: &mut PropagateContext<'_>) -> Result<()> {
        self.inner.prepare(ctx)
    }

    fn build<D: Push<M::Out> + 'static>(self, dest: D) -> impl Push<In> + 'static {
        let mut base = self.base;
        let per_worker = per_worker_bytes::<In, M::Out>(self.batch_size);
        base.set_minimum_memory(per_worker);
        base.set_maximum_memory(MaxMemory::Bounded(per_worker * self.workers as u64));
        Parallel {
            base,
            inner: self.inner,
            max_workers: self.workers,
            batch_size: self.batch_size,
            dest,
            pending: Vec::new(),
            workers: Vec::new(),
            results: None,
            next_send: 0,
            next_emit: 0,
            reorder: BTreeMap::new(),
            _input: PhantomData,
        }
    }
}

enum Message<Out> {
    Batch(u64, Result<Vec<Out>>),
    /// A failure outside any batch, in the inner node's begin or end.
    Failed(Error),
}

struct Worker<In> {
    queue: Option<SyncSender<Vec<In>>>,
    handle: Option<JoinHandle<()>>,
}

struct Parallel<In, M: MiddleFactory<In>, D> {
    base: NodeBase,
    inner: M,
    max_workers: usize,
    batch_size: usize,
    dest: D,
    pending: Vec<In>,
    workers: Vec<Worker<In>>,
    results: Option<Receiver<Message<M::Out>>>,
    next_send: u64,
    next_emit: u64,
    reorder: BTreeMap<u64, Result<Vec<M::Out>>>,
    _input: PhantomData<fn(In)>,
}

/// Gathers what a worker's inner node pushes for one batch.
struct Collector<T> {
    base: NodeBase,
    items: Rc<RefCell<Vec<T>>>,
}

impl<T> Node for Collector<T> {
    node_base!();
}

impl<T> Push<T> for Collector<T> {
    #[inline]
    fn push(&mut self, item: T) -> Result<()> {
        self.items.borrow_mut().push(item);
        Ok(())
    }
}

fn worker_loop<In, M>(factory: M, queue: Receiver<Vec<In>>, results: Sender<Message<M::Out>>, first_seq: u64, stride: u64)
where
    In: 'static,
    M: MiddleFactory<In>,
    M::Out: 'static,
{
    let items = Rc::new(RefCell::new(Vec::new()));
    let collector = Collector {
        base: NodeBase::new("parallel collector"),
        items: Rc::clone(&items),
    };
    let mut node = factory.build(collector);
    walk(&mut node, &mut |n| n.base_mut().activate());
    if let Err(e) = node.begin() {
        let _ = results.send(Message::Failed(e));
        return;
    }
    let mut seq = first_seq;
    for batch in queue {
        let outcome = batch.into_iter().try_for_each(|item| node.push(item));
        let produced = std::mem::take(&mut *items.borrow_mut());
        let message = Message::Batch(seq, outcome.map(|()| produced));
        if results.send(message).is_err() {
            return;
        }
        seq += stride;
    }
    if let Err(e) = node.end() {
        let _ = results.send(Message::Failed(e));
    }
}

impl<In, M, D> Parallel<In, M, D>
where
    In: Send + 'static,
    M: MiddleFactory<In> + Clone + Send + 'static,
    M::Out: Send + 'static,
    D: Push<M::Out>,
{
    fn dispatch(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let batch = std::mem::replace(&mut self.pending, Vec::with_capacity(self.batch_size));
        let worker = (self.next_send % self.workers.len() as u64) as usize;
        let sent = match &self.workers[worker].queue {
            Some(queue) => queue.send(batch).is_ok(),
            None => false,
        };
        if !sent {
            return Err(self.shut_down().err().unwrap_or(Error::WorkerPanic));
        }
        self.next_send += 1;
        while let Some(message) = self.results.as_ref().and_then(|r| r.try_recv().ok()) {
            self.handle(message)?;
        }
        Ok(())
    }

    /// Emits finished batches in dispatch order, so a failing batch is
    /// reported only after every earlier batch went through.
    fn handle(&mut self, message: Message<M::Out>) -> Result<()> {
        match message {
            Message::Failed(e) => Err(e),
            Message::Batch(seq, items) => {
                self.reorder.insert(seq, items);
                while let Some(items) = self.reorder.remove(&self.next_emit) {
                    for item in items? {
                        self.dest.push(item)?;
                    }
                    self.next_emit += 1;
                }
                Ok(())
            }
        }
    }

    /// Closes the queues and joins every worker.
    fn shut_down(&mut self) -> Result<()> {
        for w in &mut self.workers {
            w.queue = None;
        }
        let mut panicked = false;
        for w in &mut self.workers {
            if let Some(h) = w.handle.take() {
                panicked |= h.join().is_err();
            }
        }
        if panicked {
            Err(Error::WorkerPanic)
        } else {
            Ok(())
        }
    }
}

impl<In, M, D> Node for Parallel<In, M, D>
where
    In: Send + 'static,
    M: MiddleFactory<In> + Clone + Send + 'static,
    M::Out: Send + 'static,
    D: Push<M::Out>,
{
    node_base!();

    fn propagate(&mut self, ctx: &mut PropagateContext<'_>) -> Result<()> {
        self.inner.prepare(ctx)
    }

    fn begin(&mut self) -> Result<()> {
        let per_worker = per_worker_bytes::<In, M::Out>(self.batch_size);
        let granted = self.base.get_available_memory()?;
        let count = ((granted / per_worker) as usize).clamp(1, self.max_workers);
        let (results_tx, results_rx) = mpsc::channel();
        for i in 0..count {
            let (queue_tx, queue_rx) = mpsc::sync_channel(QUEUE_DEPTH);
            let factory = self.inner.clone();
            let results = results_tx.clone();
            let handle = thread::Builder::new()
                .name(format!("parallel-{i}"))
                .spawn(move || worker_loop(factory, queue_rx, results, i as u64, count as u64))?;
            self.workers.push(Worker {
                queue: Some(queue_tx),
                handle: Some(handle),
            });
        }
        self.results = Some(results_rx);
        self.pending = Vec::with_capacity(self.batch_size);
        Ok(())
    }

    fn end(&mut self) -> Result<()> {
        self.dispatch()?;
        for w in &mut self.workers {
            w.queue = None;
        }
        if let Some(results) = self.results.take() {
            for message in results.iter() {
                self.handle(message)?;
            }
        }
        self.shut_down()?;
        if self.next_emit != self.next_send {
            return Err(Error::WorkerPanic);
        }
        Ok(())
    }

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        visit(Link::Push, &mut self.dest);
    }
}

impl<In, M, D> Push<In> for Parallel<In, M, D>
where
    In: Send + 'static,
    M: MiddleFactory<In> + Clone + Send + 'static,
    M::Out: Send + 'static,
    D: Push<M::Out>,
{
    #[inline]
    fn push(&mut self, item: In) -> Result<()> {
        if self.workers.is_empty() {
            return Err(Error::contract(self.base.name(), "push outside the begin/end window"));
        }
        self.pending.push(item);
        if self.pending.len() >= self.batch_size {
            self.dispatch()?;
        }
        Ok(())
    }
}

impl<In, M: MiddleFactory<In>, D> Drop for Parallel<In, M, D> {
    fn drop(&mut self) {
        for w in &mut self.workers {
            w.queue = None;
        }
        self.results = None;
        for w in &mut self.workers {
            if let Some(h) = w.handle.take() {
                let _ = h.join();
            }
        }
    }
}
