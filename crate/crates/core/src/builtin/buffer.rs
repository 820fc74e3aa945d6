//! Delay and reverse: blocking components that store a stream on disk and
//! replay it, in order or backwards, in a later phase.

use std::cell::RefCell;
use std::rc::Rc;

use super::basic::node_base;
use crate::error::{Error, Result};
use crate::memory::MaxMemory;
use crate::node::{Link, Node, NodeBase, PropagateContext, Pull, Push};
use crate::pipe::{ConfigureNode, MiddleFactory, PipeEnd, PipeMiddle, SinkFactory};
use crate::stream::{ClosedStream, Record, Storage, TypedStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Replay {
    Forward,
    Backward,
}

impl Replay {
    fn name(self) -> &'static str {
        match self {
            Replay::Forward => "delay",
            Replay::Backward => "reverse",
        }
    }
}

fn buffer_bases<T: Record>(storage: &Storage, name: &str) -> (NodeBase, NodeBase) {
    let block = storage.config().block_bytes(T::SIZE as u64);
    let (mut input, mut output) = NodeBase::blocking_pair(format!("{name} input"), format!("{name} output"));
    for base in [&mut input, &mut output] {
        base.set_minimum_memory(block);
        base.set_maximum_memory(MaxMemory::Bounded(block));
    }
    (input, output)
}

/// Reads a stored stream forward or backward.
struct Replayer<T: Record> {
    stream: TypedStream<T>,
    replay: Replay,
}

impl<T: Record> Replayer<T> {
    fn open(storage: &Storage, stored: ClosedStream, replay: Replay) -> Result<Self> {
        let mut stream = stored.reopen_typed::<T>(storage)?;
        if replay == Replay::Backward {
            let end = stream.len();
            stream.seek(end)?;
        }
        Ok(Replayer { stream, replay })
    }

    fn remaining(&self) -> u64 {
        match self.replay {
            Replay::Forward => self.stream.len() - self.stream.cursor(),
            Replay::Backward => self.stream.cursor(),
        }
    }

    fn next(&mut self) -> Result<T> {
        match self.replay {
            Replay::Forward => self.stream.read(),
            Replay::Backward => self.stream.read_back(),
        }
    }
}

/// Items come out in the next phase in the order they went in.
pub fn delay<T: Record>(storage: &Storage) -> PipeMiddle<BufferFactory<T>> {
    buffer(storage, Replay::Forward)
}

/// Items come out in the next phase in reverse order.
pub fn reverse<T: Record>(storage: &Storage) -> PipeMiddle<BufferFactory<T>> {
    buffer(storage, Replay::Backward)
}

fn buffer<T: Record>(storage: &Storage, replay: Replay) -> PipeMiddle<BufferFactory<T>> {
    let (base, output) = buffer_bases::<T>(storage, replay.name());
    PipeMiddle(BufferFactory {
        base,
        output,
        storage: storage.clone(),
        replay,
        _item: std::marker::PhantomData,
    })
}

pub struct BufferFactory<T> {
    base: NodeBase,
    output: NodeBase,
    storage: Storage,
    replay: Replay,
    _item: std::marker::PhantomData<fn() -> T>,
}

impl<T> ConfigureNode for BufferFactory<T> {
    fn node_base_mut(&mut self) -> &mut NodeBase {
        &mut self.base
    }
}

impl<T: Record> MiddleFactory<T> for BufferFactory<T> {
    type Out = T;
    fn build<D: Push<T> + 'static>(self, dest: D) -> impl Push<T> + 'static {
        BufferInput {
            base: self.base,
            storage: self.storage.clone(),
            stream: None,
            output: BufferOutput {
                base: self.output,
                storage: self.storage,
                replay: self.replay,
                stored: None,
                dest,
                _item: std::marker::PhantomData,
            },
        }
    }
}

struct BufferInput<T: Record, D> {
    base: NodeBase,
    storage: Storage,
    stream: Option<TypedStream<T>>,
    output: BufferOutput<T, D>,
}

impl<T: Record, D: Push<T>> Node for BufferInput<T, D> {
    node_base!();

    fn begin(&mut self) -> Result<()> {
        self.stream = Some(self.storage.temp_typed()?);
        Ok(())
    }

    fn end(&mut self) -> Result<()> {
        let stream = self
            .stream
            .take()
            .ok_or_else(|| Error::contract(self.base.name(), "end without begin"))?;
        self.output.base.set_steps(stream.len());
        self.output.stored = Some(stream.into_closed()?);
        Ok(())
    }

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        visit(Link::Owned, &mut self.output);
    }
}

impl<T: Record, D: Push<T>> Push<T> for BufferInput<T, D> {
    #[inline]
    fn push(&mut self, item: T) -> Result<()> {
        match &mut self.stream {
            Some(s) => s.write(&item),
            None => Err(Error::contract(self.base.name(), "push outside the begin/end window")),
        }
    }
}

struct BufferOutput<T: Record, D> {
    base: NodeBase,
    storage: Storage,
    replay: Replay,
    stored: Option<ClosedStream>,
    dest: D,
    _item: std::marker::PhantomData<fn() -> T>,
}

impl<T: Record, D: Push<T>> Node for BufferOutput<T, D> {
    node_base!();

    fn go(&mut self) -> Result<()> {
        let stored = self
            .stored
            .take()
            .ok_or_else(|| Error::contract(self.base.name(), "input half has not finished"))?;
        let mut replayer = Replayer::<T>::open(&self.storage, stored, self.replay)?;
        while replayer.remaining() > 0 {
            self.dest.push(replayer.next()?)?;
            self.base.step();
        }
        Ok(())
    }

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        visit(Link::Push, &mut self.dest);
    }
}

type SharedStream = Rc<RefCell<Option<ClosedStream>>>;

/// A delay or reverse split into a push input and a pull output.
pub struct PassiveBuffer<T> {
    input: Option<NodeBase>,
    output: Option<NodeBase>,
    storage: Storage,
    replay: Replay,
    shared: SharedStream,
    _item: std::marker::PhantomData<fn() -> T>,
}

pub fn passive_delay<T: Record>(storage: &Storage) -> PassiveBuffer<T> {
    passive_buffer(storage, Replay::Forward)
}

pub fn passive_reverse<T: Record>(storage: &Storage) -> PassiveBuffer<T> {
    passive_buffer(storage, Replay::Backward)
}

fn passive_buffer<T: Record>(storage: &Storage, replay: Replay) -> PassiveBuffer<T> {
    let (input, output) = buffer_bases::<T>(storage, &format!("passive {}", replay.name()));
    PassiveBuffer {
        input: Some(input),
        output: Some(output),
        storage: storage.clone(),
        replay,
        shared: Rc::new(RefCell::new(None)),
        _item: std::marker::PhantomData,
    }
}

impl<T: Record> PassiveBuffer<T> {
    /// The push half. Panics when called twice.
    pub fn input(&mut self) -> PipeEnd<PassiveBufferInputFactory<T>> {
        PipeEnd(PassiveBufferInputFactory {
            base: self.input.take().expect("input taken twice"),
            storage: self.storage.clone(),
            shared: Rc::clone(&self.shared),
            _item: std::marker::PhantomData,
        })
    }

    /// The pull half. Panics when called twice.
    pub fn output(&mut self) -> BufferPull<T> {
        BufferPull {
            base: self.output.take().expect("output taken twice"),
            storage: self.storage.clone(),
            replay: self.replay,
            shared: Rc::clone(&self.shared),
            replayer: None,
        }
    }
}

pub struct PassiveBufferInputFactory<T> {
    base: NodeBase,
    storage: Storage,
    shared: SharedStream,
    _item: std::marker::PhantomData<fn() -> T>,
}

impl<T> ConfigureNode for PassiveBufferInputFactory<T> {
    fn node_base_mut(&mut self) -> &mut NodeBase {
        &mut self.base
    }
}

impl<T: Record> SinkFactory<T> for PassiveBufferInputFactory<T> {
    fn build(self) -> impl Push<T> + 'static {
        PassiveBufferInput::<T> {
            base: self.base,
            storage: self.storage,
            shared: self.shared,
            stream: None,
        }
    }
}

struct PassiveBufferInput<T: Record> {
    base: NodeBase,
    storage: Storage,
    shared: SharedStream,
    stream: Option<TypedStream<T>>,
}

impl<T: Record> Node for PassiveBufferInput<T> {
    node_base!();

    fn begin(&mut self) -> Result<()> {
        self.stream = Some(self.storage.temp_typed()?);
        Ok(())
    }

    fn end(&mut self) -> Result<()> {
        let stream = self
            .stream
            .take()
            .ok_or_else(|| Error::contract(self.base.name(), "end without begin"))?;
        *self.shared.borrow_mut() = Some(stream.into_closed()?);
        Ok(())
    }
}

impl<T: Record> Push<T> for PassiveBufferInput<T> {
    #[inline]
    fn push(&mut self, item: T) -> Result<()> {
        match &mut self.stream {
            Some(s) => s.write(&item),
            None => Err(Error::contract(self.base.name(), "push outside the begin/end window")),
        }
    }
}

/// The pull half of a [`PassiveBuffer`].
pub struct BufferPull<T: Record> {
    base: NodeBase,
    storage: Storage,
    replay: Replay,
    shared: SharedStream,
    replayer: Option<Replayer<T>>,
}

impl<T: Record> Node for BufferPull<T> {
    node_base!();

    fn propagate(&mut self, _ctx: &mut PropagateContext<'_>) -> Result<()> {
        if let Some(stored) = self.shared.borrow().as_ref() {
            self.base.set_steps(stored.len());
        }
        Ok(())
    }

    fn begin(&mut self) -> Result<()> {
        let stored = self
            .shared
            .borrow_mut()
            .take()
            .ok_or_else(|| Error::contract(self.base.name(), "input half has not finished"))?;
        self.replayer = Some(Replayer::open(&self.storage, stored, self.replay)?);
        Ok(())
    }

    fn end(&mut self) -> Result<()> {
        self.replayer = None;
        Ok(())
    }
}

impl<T: Record> Pull<T> for BufferPull<T> {
    fn pull(&mut self) -> Result<T> {
        let replayer = self
            .replayer
            .as_mut()
            .ok_or_else(|| Error::contract(self.base.name(), "pull outside the begin/end window"))?;
        if replayer.remaining() == 0 {
            return Err(Error::EndOfStream);
        }
        let item = replayer.next()?;
        self.base.step();
        Ok(item)
    }

    fn can_pull(&mut self) -> bool {
        self.replayer.as_ref().is_some_and(|r| r.remaining() > 0)
    }
}
