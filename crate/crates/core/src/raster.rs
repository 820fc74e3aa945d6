//! Raster transformation: every cell of an output raster B takes its value
//! from the cell of an input raster A that a mapping `f` points to.
//!
//! Two implementations are provided. The materialized one runs five
//! separate pipelines and stores every intermediate stream on disk. The
//! pipelined one wires the same components into a single pipeline with
//! three phases, so only the sorters' run files touch the disk.

use std::cmp::Ordering;
use std::fmt;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::builtin::basic::node_base;
use crate::builtin::parallel::{default_workers, ParallelFactory};
use crate::builtin::{parallel, passive_sorter_by, sort_by, stream_pull, stream_sink, stream_source};
use crate::error::{Error, Result};
use crate::executor::{Executor, PipelineRun};
use crate::node::{Link, Node, NodeBase, PropagateContext, Pull, Push};
use crate::pipe::{ConfigureNode, MiddleFactory, PipeBegin, PipeMiddle, Pipeline, SourceFactory};
use crate::progress::{NullProgress, ProgressIndicator};
use crate::stream::{IoCounters, OpenMode, Record, Storage};

/// Cells per block of the block-shuffle transform.
pub const SHUFFLE_BLOCK: u64 = 64;

/// An in-memory raster of 32-bit cells in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    cells: Vec<i32>,
}

impl Raster {
    pub fn new(width: u32, height: u32, cells: Vec<i32>) -> Result<Self> {
        check_dims(width, height)?;
        if cells.len() as u64 != width as u64 * height as u64 {
            return Err(Error::Invalid(format!(
                "{width}x{height} raster needs {} cells, got {}",
                width as u64 * height as u64,
                cells.len()
            )));
        }
        Ok(Raster { width, height, cells })
    }

    /// Cells drawn from a ChaCha8 stream seeded with `seed`.
    pub fn from_seed(width: u32, height: u32, seed: u64) -> Result<Self> {
        check_dims(width, height)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = (0..width as u64 * height as u64).map(|_| rng.random()).collect();
        Ok(Raster { width, height, cells })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn cell_count(&self) -> u64 {
        self.cells.len() as u64
    }

    pub fn cells(&self) -> &[i32] {
        &self.cells
    }

    pub fn get(&self, x: u32, y: u32) -> Option<i32> {
        if x < self.width && y < self.height {
            Some(self.cells[y as usize * self.width as usize + x as usize])
        } else {
            None
        }
    }

    /// Writes the cells to a stream file at `path`.
    pub fn store(&self, storage: &Storage, path: impl Into<PathBuf>) -> Result<RasterFile> {
        let path = path.into();
        let mut stream = storage.open_typed::<i32>(&path, OpenMode::Write)?;
        for cell in &self.cells {
            stream.write(cell)?;
        }
        stream.close()?;
        Ok(RasterFile {
            path,
            width: self.width,
            height: self.height,
        })
    }
}

fn check_dims(width: u32, height: u32) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Invalid(format!("raster dimensions must be positive, got {width}x{height}")));
    }
    Ok(())
}

/// A raster stored on disk as a stream of `i32` cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterFile {
    path: PathBuf,
    width: u32,
    height: u32,
}

impl RasterFile {
    pub fn new(path: impl Into<PathBuf>, width: u32, height: u32) -> Result<Self> {
        check_dims(width, height)?;
        Ok(RasterFile {
            path: path.into(),
            width,
            height,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn cell_count(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn load(&self, storage: &Storage) -> Result<Raster> {
        let mut stream = storage.open_typed::<i32>(&self.path, OpenMode::Read)?;
        if stream.len() != self.cell_count() {
            return Err(Error::Invalid(format!(
                "{} holds {} cells, expected {}",
                self.path.display(),
                stream.len(),
                self.cell_count()
            )));
        }
        let cells = (0..stream.len()).map(|_| stream.read()).collect::<Result<_>>()?;
        Raster::new(self.width, self.height, cells)
    }
}

/// Maps each output cell to the input cell it copies.
pub trait CellMap: Send + Sync {
    fn input_dims(&self) -> (u32, u32);
    fn output_dims(&self) -> (u32, u32);
    /// Source of output cell `(x, y)`. Out-of-range results are reported
    /// by the pipeline, not here.
    fn source(&self, x: u32, y: u32) -> (i64, i64);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformKind {
    Identity,
    Transpose,
    Rot90,
    BlockShuffle,
}

impl TransformKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Transpose => "transpose",
            TransformKind::Rot90 => "rot90",
            TransformKind::BlockShuffle => "block-shuffle",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TransformKind::Identity),
            "transpose" => Ok(TransformKind::Transpose),
            "rot90" => Ok(TransformKind::Rot90),
            "block-shuffle" => Ok(TransformKind::BlockShuffle),
            other => Err(Error::Invalid(format!("unknown transform {other:?}"))),
        }
    }
}

/// One of the built-in transforms, fixed to an input size.
#[derive(Clone, Debug)]
pub struct Transform {
    kind: TransformKind,
    input: (u32, u32),
    output: (u32, u32),
    /// Source block of each full output block, for block-shuffle.
    blocks: Vec<u64>,
}

impl Transform {
    /// `seed` only matters for block-shuffle. There, the full blocks of
    /// `SHUFFLE_BLOCK` consecutive cells are permuted at random and a
    /// trailing partial block maps to itself.
    pub fn new(kind: TransformKind, input: (u32, u32), seed: u64) -> Self {
        let (w, h) = input;
        let output = match kind {
            TransformKind::Identity | TransformKind::BlockShuffle => (w, h),
            TransformKind::Transpose | TransformKind::Rot90 => (h, w),
        };
        let mut blocks = Vec::new();
        if kind == TransformKind::BlockShuffle {
            blocks = (0..w as u64 * h as u64 / SHUFFLE_BLOCK).collect();
            blocks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Transform {
            kind,
            input,
            output,
            blocks,
        }
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }
}

impl CellMap for Transform {
    fn input_dims(&self) -> (u32, u32) {
        self.input
    }

    fn output_dims(&self) -> (u32, u32) {
        self.output
    }

    fn source(&self, x: u32, y: u32) -> (i64, i64) {
        let (x, y) = (x as i64, y as i64);
        match self.kind {
            TransformKind::Identity => (x, y),
            TransformKind::Transpose => (y, x),
            TransformKind::Rot90 => (y, self.input.1 as i64 - 1 - x),
            TransformKind::BlockShuffle => {
                let w = self.input.0 as u64;
                let index = y as u64 * w + x as u64;
                let block = index / SHUFFLE_BLOCK;
                let src = match self.blocks.get(block as usize) {
                    Some(&b) => b * SHUFFLE_BLOCK + index % SHUFFLE_BLOCK,
                    None => index,
                };
                ((src % w) as i64, (src / w) as i64)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Cell {
    pub x: u32,
    pub y: u32,
}

impl Cell {
    fn row_major(self) -> (u32, u32) {
        (self.y, self.x)
    }
}

impl Record for Cell {
    const SIZE: usize = 8;
    fn encode(&self, out: &mut [u8]) {
        self.x.encode(&mut out[..4]);
        self.y.encode(&mut out[4..]);
    }
    fn decode(bytes: &[u8]) -> Self {
        Cell {
            x: u32::decode(&bytes[..4]),
            y: u32::decode(&bytes[4..]),
        }
    }
}

/// An output cell paired with the input cell it reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct S1Item {
    pub src: Cell,
    pub dst: Cell,
}

impl Record for S1Item {
    const SIZE: usize = 16;
    fn encode(&self, out: &mut [u8]) {
        self.src.encode(&mut out[..8]);
        self.dst.encode(&mut out[8..]);
    }
    fn decode(bytes: &[u8]) -> Self {
        S1Item {
            src: Cell::decode(&bytes[..8]),
            dst: Cell::decode(&bytes[8..]),
        }
    }
}

/// An output cell with its final value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct S2Item {
    pub dst: Cell,
    pub value: i32,
}

impl Record for S2Item {
    const SIZE: usize = 12;
    fn encode(&self, out: &mut [u8]) {
        self.dst.encode(&mut out[..8]);
        self.value.encode(&mut out[8..]);
    }
    fn decode(bytes: &[u8]) -> Self {
        S2Item {
            dst: Cell::decode(&bytes[..8]),
            value: i32::decode(&bytes[8..]),
        }
    }
}

type S1Order = fn(&S1Item, &S1Item) -> Ordering;
type S2Order = fn(&S2Item, &S2Item) -> Ordering;

/// Input row-major order of the source cells.
fn s1_order(a: &S1Item, b: &S1Item) -> Ordering {
    a.src.row_major().cmp(&b.src.row_major())
}

/// Output row-major order.
fn s2_order(a: &S2Item, b: &S2Item) -> Ordering {
    a.dst.row_major().cmp(&b.dst.row_major())
}

fn fetch_dims(ctx: &PropagateContext<'_>, key: &str) -> Result<(u32, u32)> {
    let (w, h) = ctx.fetch::<(u64, u64)>(key)?;
    match (u32::try_from(w), u32::try_from(h)) {
        (Ok(w), Ok(h)) => Ok((w, h)),
        _ => Err(Error::Invalid(format!("{key} {w}x{h} is too large"))),
    }
}

fn dims_meta((w, h): (u32, u32)) -> (u64, u64) {
    (w as u64, h as u64)
}

macro_rules! configure {
    ($t:ident $(< $($g:ident),* >)?) => {
        impl$(<$($g),*>)? ConfigureNode for $t$(<$($g),*>)? {
            fn node_base_mut(&mut self) -> &mut NodeBase {
                &mut self.base
            }
        }
    };
}

/// Pushes every cell of the output raster in row-major order. The size
/// comes from the `outputsize` metadata.
pub fn generate_output_points() -> PipeBegin<GenerateOutputPointsFactory> {
    PipeBegin(GenerateOutputPointsFactory {
        base: NodeBase::new("generate_output_points"),
    })
}

pub struct GenerateOutputPointsFactory {
    base: NodeBase,
}
configure!(GenerateOutputPointsFactory);

impl SourceFactory for GenerateOutputPointsFactory {
    type Out = Cell;
    fn build<D: Push<Cell> + 'static>(self, dest: D) -> Box<dyn Node> {
        Box::new(GenerateOutputPoints {
            base: self.base,
            size: None,
            dest,
        })
    }
}

struct GenerateOutputPoints<D> {
    base: NodeBase,
    size: Option<(u32, u32)>,
    dest: D,
}

impl<D: Push<Cell>> Node for GenerateOutputPoints<D> {
    node_base!();

    fn propagate(&mut self, ctx: &mut PropagateContext<'_>) -> Result<()> {
        let (w, h) = fetch_dims(ctx, "outputsize")?;
        self.base.set_steps(w as u64 * h as u64);
        self.size = Some((w, h));
        Ok(())
    }

    fn go(&mut self) -> Result<()> {
        let (w, h) = self
            .size
            .ok_or_else(|| Error::contract(self.base.name(), "go before propagate"))?;
        for y in 0..h {
            for x in 0..w {
                self.dest.push(Cell { x, y })?;
                self.base.step();
            }
        }
        Ok(())
    }

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        visit(Link::Push, &mut self.dest);
    }
}

/// Pairs each output cell with its source under `map`. The source must lie
/// inside the input raster, whose size comes from `inputsize`.
pub fn compute_transformation(map: Arc<dyn CellMap>) -> PipeMiddle<ComputeTransformationFactory> {
    PipeMiddle(ComputeTransformationFactory {
        base: NodeBase::new("compute_transformation"),
        map,
        input: None,
    })
}

#[derive(Clone)]
pub struct ComputeTransformationFactory {
    base: NodeBase,
    map: Arc<dyn CellMap>,
    input: Option<(u32, u32)>,
}
configure!(ComputeTransformationFactory);

impl MiddleFactory<Cell> for ComputeTransformationFactory {
    type Out = S1Item;

    fn prepare(&mut self, ctx: &mut PropagateContext<'_>) -> Result<()> {
        self.input = Some(fetch_dims(ctx, "inputsize")?);
        Ok(())
    }

    fn build<D: Push<S1Item> + 'static>(self, dest: D) -> impl Push<Cell> + 'static {
        ComputeTransformation {
            base: self.base,
            map: self.map,
            input: self.input,
            dest,
        }
    }
}

struct ComputeTransformation<D> {
    base: NodeBase,
    map: Arc<dyn CellMap>,
    input: Option<(u32, u32)>,
    dest: D,
}

impl<D: Push<S1Item>> Node for ComputeTransformation<D> {
    node_base!();

    fn propagate(&mut self, ctx: &mut PropagateContext<'_>) -> Result<()> {
        self.input = Some(fetch_dims(ctx, "inputsize")?);
        Ok(())
    }

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        visit(Link::Push, &mut self.dest);
    }
}

impl<D: Push<S1Item>> Push<Cell> for ComputeTransformation<D> {
    #[inline]
    fn push(&mut self, dst: Cell) -> Result<()> {
        let (w, h) = self
            .input
            .ok_or_else(|| Error::contract(self.base.name(), "push before the input size is known"))?;
        let (sx, sy) = self.map.source(dst.x, dst.y);
        if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
            return Err(Error::OutOfBounds {
                x: dst.x as u64,
                y: dst.y as u64,
                src_x: sx,
                src_y: sy,
                width: w as u64,
                height: h as u64,
            });
        }
        self.dest.push(S1Item {
            src: Cell {
                x: sx as u32,
                y: sy as u32,
            },
            dst,
        })
    }
}

/// Reads the cells of A in row-major order.
pub fn read_raster(storage: &Storage, raster: &RasterFile) -> PipeBegin<crate::builtin::basic::StreamSourceFactory<i32>> {
    stream_source::<i32>(storage, raster.path()).name("read_raster")
}

/// Writes pushed cells to B.
pub fn write_raster(
    storage: &Storage,
    path: impl Into<PathBuf>,
) -> crate::pipe::PipeEnd<crate::builtin::basic::StreamSinkFactory<i32>> {
    stream_sink::<i32>(storage, path).name("write_raster")
}

/// Takes the cells of A in row-major order and pulls S1 sorted by source
/// cell from `source`; emits `(dst, value)` for every S1 item whose source
/// is the current cell.
pub fn construct_s2<P: Pull<S1Item> + 'static>(source: P) -> PipeMiddle<ConstructS2Factory<P>> {
    PipeMiddle(ConstructS2Factory {
        base: NodeBase::new("construct_S2"),
        source,
    })
}

pub struct ConstructS2Factory<P> {
    base: NodeBase,
    source: P,
}
configure!(ConstructS2Factory<P>);

impl<P: Pull<S1Item> + 'static> MiddleFactory<i32> for ConstructS2Factory<P> {
    type Out = S2Item;
    fn build<D: Push<S2Item> + 'static>(self, dest: D) -> impl Push<i32> + 'static {
        ConstructS2 {
            base: self.base,
            source: self.source,
            dest,
            width: 0,
            next: Cell::default(),
            head: None,
        }
    }
}

struct ConstructS2<P, D> {
    base: NodeBase,
    source: P,
    dest: D,
    width: u32,
    /// Cell of A the next pushed value belongs to.
    next: Cell,
    /// Lookahead into the sorted S1 stream.
    head: Option<S1Item>,
}

impl<P: Pull<S1Item>, D: Push<S2Item>> ConstructS2<P, D> {
    fn peek(&mut self) -> Result<Option<S1Item>> {
        if self.head.is_none() && self.source.can_pull() {
            self.head = Some(self.source.pull()?);
        }
        Ok(self.head)
    }
}

impl<P: Pull<S1Item>, D: Push<S2Item>> Node for ConstructS2<P, D> {
    node_base!();

    fn propagate(&mut self, ctx: &mut PropagateContext<'_>) -> Result<()> {
        self.width = fetch_dims(ctx, "inputsize")?.0;
        Ok(())
    }

    fn end(&mut self) -> Result<()> {
        match self.peek()? {
            Some(item) => Err(Error::contract(
                self.base.name(),
                format!(
                    "S1 refers to cell ({}, {}) past the end of the input",
                    item.src.x, item.src.y
                ),
            )),
            None => Ok(()),
        }
    }

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        visit(Link::Pull, &mut self.source);
        visit(Link::Push, &mut self.dest);
    }
}

impl<P: Pull<S1Item>, D: Push<S2Item>> Push<i32> for ConstructS2<P, D> {
    fn push(&mut self, value: i32) -> Result<()> {
        let here = self.next;
        while let Some(item) = self.peek()? {
            match item.src.row_major().cmp(&here.row_major()) {
                Ordering::Equal => {
                    self.head = None;
                    self.dest.push(S2Item { dst: item.dst, value })?;
                }
                Ordering::Greater => break,
                Ordering::Less => {
                    return Err(Error::contract(self.base.name(), "S1 is not sorted by source cell"));
                }
            }
        }
        self.next.x += 1;
        if self.next.x == self.width {
            self.next = Cell { x: 0, y: here.y + 1 };
        }
        Ok(())
    }
}

/// Strips the cell from S2 items that arrive in output row-major order,
/// checking that every output cell shows up exactly once.
pub fn construct_output() -> PipeMiddle<ConstructOutputFactory> {
    PipeMiddle(ConstructOutputFactory {
        base: NodeBase::new("construct_output"),
    })
}

pub struct ConstructOutputFactory {
    base: NodeBase,
}
configure!(ConstructOutputFactory);

impl MiddleFactory<S2Item> for ConstructOutputFactory {
    type Out = i32;
    fn build<D: Push<i32> + 'static>(self, dest: D) -> impl Push<S2Item> + 'static {
        ConstructOutput {
            base: self.base,
            dest,
            size: (0, 0),
            next: Cell::default(),
            _item: PhantomData,
        }
    }
}

struct ConstructOutput<D> {
    base: NodeBase,
    dest: D,
    size: (u32, u32),
    next: Cell,
    _item: PhantomData<fn(S2Item)>,
}

impl<D: Push<i32>> Node for ConstructOutput<D> {
    node_base!();

    fn propagate(&mut self, ctx: &mut PropagateContext<'_>) -> Result<()> {
        self.size = fetch_dims(ctx, "outputsize")?;
        Ok(())
    }

    fn end(&mut self) -> Result<()> {
        if self.next.y != self.size.1 {
            return Err(Error::contract(
                self.base.name(),
                format!("output stopped at cell ({}, {})", self.next.x, self.next.y),
            ));
        }
        Ok(())
    }

    fn visit_children(&mut self, visit: &mut dyn FnMut(Link, &mut dyn Node)) {
        visit(Link::Push, &mut self.dest);
    }
}

impl<D: Push<i32>> Push<S2Item> for ConstructOutput<D> {
    #[inline]
    fn push(&mut self, item: S2Item) -> Result<()> {
        if item.dst != self.next {
            return Err(Error::contract(
                self.base.name(),
                format!(
                    "expected cell ({}, {}), got ({}, {})",
                    self.next.x, self.next.y, item.dst.x, item.dst.y
                ),
            ));
        }
        self.next.x += 1;
        if self.next.x == self.size.0 {
            self.next = Cell { x: 0, y: item.dst.y + 1 };
        }
        self.dest.push(item.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Pipelined,
    Materialized,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pipelined => "pipelined",
            Mode::Materialized => "materialized",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Result of one transform run.
#[derive(Debug)]
pub struct RasterRun {
    pub output: RasterFile,
    /// Items moved to and from disk during the run only.
    pub io: IoCounters,
    pub report: IoReport,
    pub runs: Vec<PipelineRun>,
}

/// A transform to run, with the settings shared by both modes.
#[derive(Clone)]
pub struct RasterJob {
    map: Arc<dyn CellMap>,
    workers: usize,
    progress: Arc<dyn ProgressIndicator>,
}

impl RasterJob {
    pub fn new(map: Arc<dyn CellMap>) -> Self {
        RasterJob {
            map,
            workers: default_workers(),
            progress: Arc::new(NullProgress),
        }
    }

    /// Worker threads for the transform step.
    pub fn workers(mut self, workers: usize) -> Self {
        assert!(workers >= 1, "worker count must be positive");
        self.workers = workers;
        self
    }

    pub fn progress(mut self, progress: Arc<dyn ProgressIndicator>) -> Self {
        self.progress = progress;
        self
    }

    pub fn map(&self) -> &Arc<dyn CellMap> {
        &self.map
    }

    fn transform(&self) -> PipeMiddle<ParallelFactory<ComputeTransformationFactory>> {
        parallel(compute_transformation(Arc::clone(&self.map))).workers(self.workers)
    }

    /// The pipelined transform without its boundary metadata. Callers
    /// forward `inputsize` and `outputsize` before running it.
    pub fn pipeline(&self, storage: &Storage, input: &RasterFile, output: impl Into<PathBuf>) -> Pipeline {
        let mut sort_s1 = passive_sorter_by(storage, s1_order as S1Order);
        let p1 = generate_output_points() | self.transform() | sort_s1.input().name("sort_S1 input");
        let p2 = read_raster(storage, input)
            | construct_s2(sort_s1.output())
            | sort_by(storage, s2_order as S2Order).name("sort_S2")
            | construct_output()
            | write_raster(storage, output);
        p1.join(p2)
    }

    fn prepare(&self, input: &RasterFile, output: &Path) -> Result<RasterFile> {
        if input.dimensions() != self.map.input_dims() {
            let (w, h) = self.map.input_dims();
            let (iw, ih) = input.dimensions();
            return Err(Error::Invalid(format!("transform expects a {w}x{h} input, raster is {iw}x{ih}")));
        }
        let (ow, oh) = self.map.output_dims();
        RasterFile::new(output, ow, oh)
    }

    fn with_sizes(mut pipeline: Pipeline, input: &RasterFile, output: &RasterFile) -> Pipeline {
        pipeline.forward("inputsize", dims_meta(input.dimensions()));
        pipeline.forward("outputsize", dims_meta(output.dimensions()));
        pipeline
    }

    /// Runs the three-phase pipelined transform and writes B to `output`.
    pub fn run_pipelined(&self, executor: &Executor, input: &RasterFile, output: impl Into<PathBuf>) -> Result<RasterRun> {
        let storage = executor.storage();
        let output = output.into();
        let out = self.prepare(input, &output)?;
        let pipeline = Self::with_sizes(self.pipeline(storage, input, &output), input, &out);

        let before = storage.snapshot_counters();
        let n = input.cell_count() + out.cell_count();
        let run = executor.run(pipeline, n, "raster-pipelined", Arc::clone(&self.progress))?;
        let after = storage.snapshot_counters();
        Ok(RasterRun {
            report: io_report(Mode::Pipelined, &before, &after, out.cell_count()),
            io: after.since(&before),
            output: out,
            runs: vec![run],
        })
    }

    /// Runs the five steps as separate pipelines, storing S1, sorted S1,
    /// S2 and sorted S2 on disk in between.
    pub fn run_materialized(&self, executor: &Executor, input: &RasterFile, output: impl Into<PathBuf>) -> Result<RasterRun> {
        let storage = executor.storage();
        let output = output.into();
        let out = self.prepare(input, &output)?;
        let n = out.cell_count();
        let scratch = tempfile::tempdir_in(storage.tmpdir())?;
        let s1 = scratch.path().join("s1");
        let s1_sorted = scratch.path().join("s1-sorted");
        let s2 = scratch.path().join("s2");
        let s2_sorted = scratch.path().join("s2-sorted");

        let steps = [
            generate_output_points() | self.transform() | stream_sink::<S1Item>(storage, &s1),
            stream_source::<S1Item>(storage, &s1)
                | sort_by(storage, s1_order as S1Order).name("sort_S1")
                | stream_sink::<S1Item>(storage, &s1_sorted),
            read_raster(storage, input)
                | construct_s2(stream_pull::<S1Item>(storage, &s1_sorted))
                | stream_sink::<S2Item>(storage, &s2),
            stream_source::<S2Item>(storage, &s2)
                | sort_by(storage, s2_order as S2Order).name("sort_S2")
                | stream_sink::<S2Item>(storage, &s2_sorted),
            stream_source::<S2Item>(storage, &s2_sorted) | construct_output() | write_raster(storage, &output),
        ];

        let before = storage.snapshot_counters();
        let mut runs = Vec::with_capacity(steps.len());
        for (i, step) in steps.into_iter().enumerate() {
            let id = format!("raster-materialized-{}", i + 1);
            let step = Self::with_sizes(step, input, &out);
            runs.push(executor.run(step, n, &id, Arc::clone(&self.progress))?);
        }
        let after = storage.snapshot_counters();
        Ok(RasterRun {
            report: io_report(Mode::Materialized, &before, &after, n),
            io: after.since(&before),
            output: out,
            runs,
        })
    }

    pub fn run(&self, mode: Mode, executor: &Executor, input: &RasterFile, output: impl Into<PathBuf>) -> Result<RasterRun> {
        match mode {
            Mode::Pipelined => self.run_pipelined(executor, input, output),
            Mode::Materialized => self.run_materialized(executor, input, output),
        }
    }
}

/// [`RasterJob::pipeline`] with default settings.
pub fn pipelined_pipeline(
    storage: &Storage,
    input: &RasterFile,
    output: impl Into<PathBuf>,
    map: Arc<dyn CellMap>,
) -> Pipeline {
    RasterJob::new(map).pipeline(storage, input, output)
}

pub fn run_pipelined(
    executor: &Executor,
    input: &RasterFile,
    output: impl Into<PathBuf>,
    map: Arc<dyn CellMap>,
    progress: Arc<dyn ProgressIndicator>,
) -> Result<RasterRun> {
    RasterJob::new(map).progress(progress).run_pipelined(executor, input, output)
}

pub fn run_materialized(
    executor: &Executor,
    input: &RasterFile,
    output: impl Into<PathBuf>,
    map: Arc<dyn CellMap>,
    progress: Arc<dyn ProgressIndicator>,
) -> Result<RasterRun> {
    RasterJob::new(map).progress(progress).run_materialized(executor, input, output)
}

/// Item I/O of one run relative to the raster size N.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IoReport {
    pub mode: Mode,
    pub n: u64,
    pub items_read: u64,
    pub items_written: u64,
}

pub fn io_report(mode: Mode, before: &IoCounters, after: &IoCounters, n: u64) -> IoReport {
    let delta = after.since(before);
    IoReport {
        mode,
        n,
        items_read: delta.items_read,
        items_written: delta.items_written,
    }
}

fn per_n(count: u64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        count as f64 / n as f64
    }
}

impl IoReport {
    pub fn reads_per_n(&self) -> f64 {
        per_n(self.items_read, self.n)
    }

    pub fn writes_per_n(&self) -> f64 {
        per_n(self.items_written, self.n)
    }

    pub fn total(&self) -> u64 {
        self.items_read + self.items_written
    }
}

/// Materialized I/O over pipelined I/O, or 0 when the pipelined run moved
/// nothing.
pub fn savings_ratio(materialized: &IoReport, pipelined: &IoReport) -> f64 {
    if pipelined.total() == 0 {
        0.0
    } else {
        materialized.total() as f64 / pipelined.total() as f64
    }
}

pub const TSV_HEADER: &str = "mode\tN\titems_read\titems_written\treads_per_n\twrites_per_n";

pub fn format_tsv(reports: &[IoReport]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\n",
            r.mode,
            r.n,
            r.items_read,
            r.items_written,
            r.reads_per_n(),
            r.writes_per_n()
        ));
    }
    out
}

pub fn format_text(reports: &[IoReport]) -> String {
    let mut out = format!(
        "{:<13} {:>10} {:>12} {:>14} {:>8} {:>9}\n",
        "mode", "N", "items read", "items written", "reads/N", "writes/N"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<13} {:>10} {:>12} {:>14} {:>8.2} {:>9.2}\n",
            r.mode.as_str(),
            r.n,
            r.items_read,
            r.items_written,
            r.reads_per_n(),
            r.writes_per_n()
        ));
    }
    let find = |mode| reports.iter().find(|r| r.mode == mode);
    if let (Some(m), Some(p)) = (find(Mode::Materialized), find(Mode::Pipelined)) {
        out.push_str(&format!("savings ratio (materialized / pipelined): {:.2}\n", savings_ratio(m, p)));
    }
    out.push_str("counts include reading A and writing B; S1 is generated, not read\n");
    out
}
