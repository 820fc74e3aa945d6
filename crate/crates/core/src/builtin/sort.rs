//! External merge sorting: run formation, multiway merging, and the
//! active and passive sorter components built on them.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::marker::PhantomData;
use std::rc::Rc;

use rayon::slice::ParallelSliceMut;

use super::basic::node_base;
use crate::error::{Error, Result};
use crate::memory::MaxMemory;
use crate::node::{Link, Node, NodeBase, PropagateContext, Pull, Push};
use crate::pipe::{ConfigureNode, MiddleFactory, PipeEnd, PipeMiddle, SinkFactory};
use crate::stream::{ClosedStream, Record, Storage, TypedStream};

/// A total order over `T`. Blanket-implemented for suitable closures.
pub trait Comparator<T>: Fn(&T, &T) -> Ordering + Clone + Send + Sync + 'static {}

impl<T, C: Fn(&T, &T) -> Ordering + Clone + Send + Sync + 'static> Comparator<T> for C {}

pub type NaturalOrder<T> = fn(&T, &T) -> Ordering;

/// Runs are merged `fanout` at a time: one block per run plus one for the
/// output has to fit in the grant.
pub fn merge_fanout(grant: u64, block_bytes: u64, cap: Option<usize>) -> usize {
    let by_memory = (grant / block_bytes.max(1)).saturating_sub(1) as usize;
    by_memory.min(cap.unwrap_or(usize::MAX)).max(2)
}

/// Items that fit in a run-formation buffer of `grant` bytes.
pub fn run_capacity<T: Record>(grant: u64) -> usize {
    ((grant / T::SIZE as u64) as usize).max(1)
}

/// Collects items into sorted runs of at most `capacity` items each.
pub struct RunFormation<T: Record, C> {
    storage: Storage,
    cmp: C,
    capacity: usize,
    buffer: Vec<T>,
    runs: Vec<ClosedStream>,
    items: u64,
}

impl<T: Record, C: Comparator<T>> RunFormation<T, C> {
    pub fn new(storage: &Storage, cmp: C, capacity: usize) -> Self {
        assert!(capacity >= 1, "run capacity must be positive");
        RunFormation {
            storage: storage.clone(),
            cmp,
            capacity,
            buffer: Vec::new(),
            runs: Vec::new(),
            items: 0,
        }
    }

    #[inline]
    pub fn push(&mut self, item: T) -> Result<()> {
        if self.buffer.len() == self.capacity {
            self.spill()?;
        }
        if self.buffer.capacity() == 0 {
            self.buffer.reserve_exact(self.capacity.min(1 << 20));
        }
        self.buffer.push(item);
        self.items += 1;
        Ok(())
    }

    fn spill(&mut self) -> Result<()> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let cmp = &self.cmp;
        self.buffer.par_sort_unstable_by(|a, b| cmp(a, b));
        let mut run = self.storage.temp_typed::<T>()?;
        for item in self.buffer.drain(..) {
            run.write(&item)?;
        }
        self.runs.push(run.into_closed()?);
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunSet<T, C>> {
        self.spill()?;
        Ok(RunSet {
            storage: self.storage,
            cmp: self.cmp,
            runs: self.runs,
            items: self.items,
            _item: PhantomData,
        })
    }
}

/// Sorted runs waiting to be merged.
pub struct RunSet<T: Record, C> {
    storage: Storage,
    cmp: C,
    runs: Vec<ClosedStream>,
    items: u64,
    _item: PhantomData<fn() -> T>,
}

impl<T: Record, C: Comparator<T>> RunSet<T, C> {
    pub fn run_count(&self) -> usize {
        self.runs.len()
    }

    pub fn run_lengths(&self) -> Vec<u64> {
        self.runs.iter().map(|r| r.len()).collect()
    }

    pub fn items(&self) -> u64 {
        self.items
    }

    /// Merges groups of `fanout` runs until at most `fanout` remain, then
    /// returns a lazy merge of the rest and the number of full passes.
    pub fn merge(self, fanout: usize) -> Result<(MergeStream<T, C>, u64)> {
        assert!(fanout >= 2, "merge fanout must be at least 2");
        let RunSet {
            storage, cmp, mut runs, ..
        } = self;
        let mut passes = 0;
        while runs.len() > fanout {
            let mut next = Vec::with_capacity(runs.len().div_ceil(fanout));
            let mut pending = runs.into_iter();
            loop {
                let group: Vec<ClosedStream> = pending.by_ref().take(fanout).collect();
                if group.is_empty() {
                    break;
                }
                let mut merged = MergeStream::open(&storage, group, cmp.clone())?;
                let mut out = storage.temp_typed::<T>()?;
                while let Some(item) = merged.next_item()? {
                    out.write(&item)?;
                }
                next.push(out.into_closed()?);
            }
            runs = next;
            passes += 1;
        }
        Ok((MergeStream::open(&storage, runs, cmp)?, passes))
    }
}

/// Lazy k-way merge over open runs, driven by a binary heap of run heads.
pub struct MergeStream<T: Record, C> {
    inputs: Vec<TypedStream<T>>,
    heap: Vec<(T, usize)>,
    cmp: C,
    remaining: u64,
}

impl<T: Record, C: Comparator<T>> MergeStream<T, C> {
    fn open(storage: &Storage, runs: Vec<ClosedStream>, cmp: C) -> Result<Self> {
        let remaining = runs.iter().map(|r| r.len()).sum();
        let mut inputs = Vec::with_capacity(runs.len());
        for run in runs {
            inputs.push(run.reopen_typed::<T>(storage)?);
        }
        let mut merge = MergeStream {
            heap: Vec::with_capacity(inputs.len()),
            inputs,
            cmp,
            remaining,
        };
        for i in 0..merge.inputs.len() {
            if !merge.inputs[i].is_empty() {
                let head = merge.inputs[i].read()?;
                merge.heap.push((head, i));
                let last = merge.heap.len() - 1;
                merge.sift_up(last);
            }
        }
        Ok(merge)
    }

    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    fn less(&self, a: usize, b: usize) -> bool {
        let (x, i) = &self.heap[a];
        let (y, j) = &self.heap[b];
        match (self.cmp)(x, y) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => i < j,
        }
    }

    fn sift_up(&mut self, mut at: usize) {
        while at > 0 {
            let parent = (at - 1) / 2;
            if !self.less(at, parent) {
                break;
            }
            self.heap.swap(at, parent);
            at = parent;
        }
    }

    fn sift_down(&mut self, mut at: usize) {
        loop {
            let (l, r) = (2 * at + 1, 2 * at + 2);
            let mut smallest = at;
            if l < self.heap.len() && self.less(l, smallest) {
                smallest = l;
            }
            if r < self.heap.len() && self.less(r, smallest) {
                smallest = r;
            }
            if smallest == at {
                return;
            }
            self.heap.swap(at, smallest);
            at = smallest;
        }
    }

    pub fn next_item(&mut self) -> Result<Option<T>> {
        let Some(&(item, run)) = self.heap.first() else {
            return Ok(None);
        };
        let input = &mut self.inputs[run];
        if input.cursor() < input.len() {
            self.heap[0] = (input.read()?, run);
            self.sift_down(0);
        } else {
            let last = self.heap.pop().expect("heap is nonempty");
            if !self.heap.is_empty() {
                self.heap[0] = last;
                self.sift_down(0);
            }
        }
        self.remaining -= 1;
        Ok(Some(item))
    }
}

fn sorter_minimum<T: Record>(storage: &Storage) -> u64 {
    3 * storage.config().block_bytes(T::SIZE as u64)
}

fn sorter_bases<T: Record>(storage: &Storage, name: &str) -> (NodeBase, NodeBase) {
    let (mut input, mut output) = NodeBase::blocking_pair(format!("{name} input"), format!("{name} output"));
    for base in [&mut input, &mut output] {
        base.set_minimum_memory(sorter_minimum::<T>(storage));
        base.set_maximum_memory(MaxMemory::Unbounded);
    }
    (input, output)
}

/// A sorter whose output half pushes the sorted items in the next phase.
pub fn sort<T: Record + Ord>(storage: &Storage) -> PipeMiddle<SortFactory<T, NaturalOrder<T>>> {
    sort_by(storage, <T as Ord>::cmp as NaturalOrder<T>)
}

pub fn sort_by<T: Record, C: Comparator<T>>(storage: &Storage, cmp: C) -> PipeMiddle<SortFactory<T, C>> {
    let (input, output) = sorter_bases::<T>(storage, "sorter");
    PipeMiddle(SortFactory {
        base: input,
        output,
        storage: storage.clone(),
        cmp,
        fanout_cap: None,
        _item: PhantomData,
    })
}

pub struct SortFactory<T, C> {
    base: NodeBase,
    output: NodeBase,
    storage: Storage,
    cmp: C,
    fanout_cap: Option<usize>,
    _item: PhantomData<fn() -> T>,
}

impl<T, C> ConfigureNode for SortFactory<T, C> {
    fn node_base_mut(&mut self) -> &mut NodeBase {
        &mut self.base
    }
}

impl<T, C> PipeMiddle<SortFactory<T, C>> {
    /// Merges at most `cap` runs at a time.
    pub fn fanout_cap(mut self, cap: usize) -> Self {
        self.0.fanout_cap = Some(cap.max(2));
        self
    }

    /// Priority of both halves' memory requests.
    pub fn sort_priority(mut self, priority: f64) -> Self {
        self.0.base.set_memory_priority(priority);
        self.0.output.set_memory_priority(priority);
        self
    }
}

impl<T: Record, C: Comparator<T>> MiddleFactory<T> for SortFactory<T, C> {
    type Out = T;
    fn build<D: Push<T> + 'static>(self, dest: D) -> impl Push<T> + 'static {
        SortInput {
            base: self.base,
            storage: self.storage.clone(),
            cmp: self.cmp,
            runs: None,
            output: SortOutput {
                base: self.output,
                storage: self.storage,
                fanout_cap: self.fanout_cap,
                runs: None,
                dest,
                passes: 0,
            },
        }
    }
}

struct SortInput<T: Record, C, D> {
    base: NodeBase,
    storage: Storage,
    cmp: C,
    runs: Option<RunFormation<T, C>>,
    output: SortOutput<T, C, D>,
}

impl<T: Record, C: Comparator<T>, D: Push<T>> Node for SortInput<T, C, D> {
    node_base!();

    fn begin(&mut self) -> Result<()> {
        let capacity = run_capacity::<T>(self.base.get_available_memory()?);
        self.runs = Some(RunFormation::new(&self.storage, self.cmp.clone(), capacity));
        Ok(())
    }

    fn end(&mut self) -> Result<()> {
        let runs = self
            .runs
            .take()
            .ok_or_else(|| Error::contract(self.base.name(), "end without begin"))?
            .finish()?;
        self.output.base.set_steps(runs.items());
        self.output.runs = Some(runs);
        Ok(())
    }

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        visit(Link::Owned, &mut self.output);
    }
}

impl<T: Record, C: Comparator<T>, D: Push<T>> Push<T> for SortInput<T, C, D> {
    #[inline]
    fn push(&mut self, item: T) -> Result<()> {
        match &mut self.runs {
            Some(r) => r.push(item),
            None => Err(Error::contract(self.base.name(), "push outside the begin/end window")),
        }
    }
}

struct SortOutput<T: Record, C, D> {
    base: NodeBase,
    storage: Storage,
    fanout_cap: Option<usize>,
    runs: Option<RunSet<T, C>>,
    dest: D,
    passes: u64,
}

impl<T: Record, C: Comparator<T>, D: Push<T>> Node for SortOutput<T, C, D> {
    node_base!();

    fn go(&mut self) -> Result<()> {
        let runs = self
            .runs
            .take()
            .ok_or_else(|| Error::contract(self.base.name(), "input half has not finished"))?;
        let block = self.storage.config().block_bytes(T::SIZE as u64);
        let fanout = merge_fanout(self.base.get_available_memory()?, block, self.fanout_cap);
        let (mut merged, passes) = runs.merge(fanout)?;
        self.passes = passes;
        while let Some(item) = merged.next_item()? {
            self.dest.push(item)?;
            self.base.step();
        }
        Ok(())
    }

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        visit(Link::Push, &mut self.dest);
    }
}

type SharedRuns<T, C> = Rc<RefCell<Option<RunSet<T, C>>>>;

/// A sorter split into a push input and a pull output that live in
/// different pipelines.
pub struct PassiveSorter<T: Record, C> {
    input: Option<NodeBase>,
    output: Option<NodeBase>,
    storage: Storage,
    cmp: C,
    fanout_cap: Option<usize>,
    shared: SharedRuns<T, C>,
}

pub fn passive_sorter<T: Record + Ord>(storage: &Storage) -> PassiveSorter<T, NaturalOrder<T>> {
    passive_sorter_by(storage, <T as Ord>::cmp as NaturalOrder<T>)
}

pub fn passive_sorter_by<T: Record, C: Comparator<T>>(storage: &Storage, cmp: C) -> PassiveSorter<T, C> {
    let (input, output) = sorter_bases::<T>(storage, "passive sorter");
    PassiveSorter {
        input: Some(input),
        output: Some(output),
        storage: storage.clone(),
        cmp,
        fanout_cap: None,
        shared: Rc::new(RefCell::new(None)),
    }
}

impl<T: Record, C: Comparator<T>> PassiveSorter<T, C> {
    pub fn fanout_cap(mut self, cap: usize) -> Self {
        self.fanout_cap = Some(cap.max(2));
        self
    }

    pub fn set_priority(&mut self, priority: f64) {
        for base in [&mut self.input, &mut self.output].into_iter().flatten() {
            base.set_memory_priority(priority);
        }
    }

    /// The push half. Panics when called twice.
    pub fn input(&mut self) -> PipeEnd<PassiveSortInputFactory<T, C>> {
        PipeEnd(PassiveSortInputFactory {
            base: self.input.take().expect("passive sorter input taken twice"),
            storage: self.storage.clone(),
            cmp: self.cmp.clone(),
            shared: Rc::clone(&self.shared),
        })
    }

    /// The pull half. Panics when called twice.
    pub fn output(&mut self) -> SortedPull<T, C> {
        SortedPull {
            base: self.output.take().expect("passive sorter output taken twice"),
            storage: self.storage.clone(),
            fanout_cap: self.fanout_cap,
            shared: Rc::clone(&self.shared),
            merged: None,
        }
    }
}

pub struct PassiveSortInputFactory<T: Record, C> {
    base: NodeBase,
    storage: Storage,
    cmp: C,
    shared: SharedRuns<T, C>,
}

impl<T: Record, C> ConfigureNode for PassiveSortInputFactory<T, C> {
    fn node_base_mut(&mut self) -> &mut NodeBase {
        &mut self.base
    }
}

impl<T: Record, C: Comparator<T>> SinkFactory<T> for PassiveSortInputFactory<T, C> {
    fn build(self) -> impl Push<T> + 'static {
        PassiveSortInput {
            base: self.base,
            storage: self.storage,
            cmp: self.cmp,
            runs: None,
            shared: self.shared,
        }
    }
}

struct PassiveSortInput<T: Record, C> {
    base: NodeBase,
    storage: Storage,
    cmp: C,
    runs: Option<RunFormation<T, C>>,
    shared: SharedRuns<T, C>,
}

impl<T: Record, C: Comparator<T>> Node for PassiveSortInput<T, C> {
    node_base!();

    fn begin(&mut self) -> Result<()> {
        let capacity = run_capacity::<T>(self.base.get_available_memory()?);
        self.runs = Some(RunFormation::new(&self.storage, self.cmp.clone(), capacity));
        Ok(())
    }

    fn end(&mut self) -> Result<()> {
        let runs = self
            .runs
            .take()
            .ok_or_else(|| Error::contract(self.base.name(), "end without begin"))?
            .finish()?;
        *self.shared.borrow_mut() = Some(runs);
        Ok(())
    }
}

impl<T: Record, C: Comparator<T>> Push<T> for PassiveSortInput<T, C> {
    #[inline]
    fn push(&mut self, item: T) -> Result<()> {
        match &mut self.runs {
            Some(r) => r.push(item),
            None => Err(Error::contract(self.base.name(), "push outside the begin/end window")),
        }
    }
}

/// The pull half of a [`PassiveSorter`].
pub struct SortedPull<T: Record, C> {
    base: NodeBase,
    storage: Storage,
    fanout_cap: Option<usize>,
    shared: SharedRuns<T, C>,
    merged: Option<MergeStream<T, C>>,
}

impl<T: Record, C: Comparator<T>> Node for SortedPull<T, C> {
    node_base!();

    fn propagate(&mut self, _ctx: &mut PropagateContext<'_>) -> Result<()> {
        if let Some(runs) = self.shared.borrow().as_ref() {
            self.base.set_steps(runs.items());
        }
        Ok(())
    }

    fn begin(&mut self) -> Result<()> {
        let runs = self
            .shared
            .borrow_mut()
            .take()
            .ok_or_else(|| Error::contract(self.base.name(), "input half has not finished"))?;
        let block = self.storage.config().block_bytes(T::SIZE as u64);
        let fanout = merge_fanout(self.base.get_available_memory()?, block, self.fanout_cap);
        self.merged = Some(runs.merge(fanout)?.0);
        Ok(())
    }

    fn end(&mut self) -> Result<()> {
        self.merged = None;
        Ok(())
    }
}

impl<T: Record, C: Comparator<T>> Pull<T> for SortedPull<T, C> {
    fn pull(&mut self) -> Result<T> {
        let merged = self
            .merged
            .as_mut()
            .ok_or_else(|| Error::contract(self.base.name(), "pull outside the begin/end window"))?;
        let item = merged.next_item()?.ok_or(Error::EndOfStream)?;
        self.base.step();
        Ok(item)
    }

    fn can_pull(&mut self) -> bool {
        self.merged.as_ref().is_some_and(|m| m.remaining() > 0)
    }
}
