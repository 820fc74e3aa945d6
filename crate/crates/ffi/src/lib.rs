//! C ABI for empipe.
//!
//! Every fallible function returns an `EmStatus`. On failure the message is
//! kept per thread and can be copied out with `em_last_error_message`.
//! Handles are opaque pointers created by `*_new`/`*_open` and released
//! with the matching `*_free`; passing NULL to a free function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use empipe::builtin::parallel::default_workers;
use empipe::raster::{CellMap, Mode, Raster, RasterJob, Transform, TransformKind};
use empipe::stream::scan_io_bound;
use empipe::{
    assign_memory, BlockConfig, Error, Executor, FlowGraph, IoCounters, MaxMemory, MemoryRequest, NodeId, NullProgress,
    OpenMode, Storage, StreamFile,
};

/// Marks a memory request without an upper bound.
pub const EM_UNBOUNDED: u64 = u64::MAX;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmStatus {
    Ok = 0,
    /// NULL pointer, bad UTF-8, or an argument out of range.
    InvalidArgument = 1,
    Io = 2,
    EndOfStream = 3,
    InsufficientMemory = 4,
    InvalidGraph = 5,
    /// Input or configuration rejected by the library.
    Invalid = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmOpenMode {
    Read = 0,
    Write = 1,
    ReadWrite = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmTransform {
    Identity = 0,
    Transpose = 1,
    Rot90 = 2,
    BlockShuffle = 3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmMode {
    Pipelined = 0,
    Materialized = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EmMemoryRequest {
    pub minimum: u64,
    /// `EM_UNBOUNDED` for no limit.
    pub maximum: u64,
    pub priority: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EmIoCounters {
    pub items_read: u64,
    pub items_written: u64,
    pub blocks_read: u64,
    pub blocks_written: u64,
}

impl From<IoCounters> for EmIoCounters {
    fn from(c: IoCounters) -> Self {
        EmIoCounters {
            items_read: c.items_read,
            items_written: c.items_written,
            blocks_read: c.blocks_read,
            blocks_written: c.blocks_written,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct EmRasterOptions {
    pub width: u32,
    pub height: u32,
    pub transform: EmTransform,
    pub seed: u64,
    pub mode: EmMode,
    pub block_items: u64,
    pub memory_bytes: u64,
    /// 0 picks the number of available cores.
    pub workers: u32,
    /// Directory for the rasters and temporary streams; NULL for the
    /// system temp directory.
    pub tmpdir: *const c_char,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EmRasterReport {
    /// Cells in the output raster.
    pub n: u64,
    pub items_read: u64,
    pub items_written: u64,
}

/// Block configuration, memory budget and I/O counters shared by streams.
pub struct EmStorage(Storage);

pub struct EmStream(Option<StreamFile>);

pub struct EmGraph(FlowGraph);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = message);
}

fn status_of(e: &Error) -> EmStatus {
    match e.root_cause() {
        Error::Io(_) | Error::StreamHeader { .. } | Error::TimeDb { .. } => EmStatus::Io,
        Error::EndOfStream | Error::BeginningOfStream => EmStatus::EndOfStream,
        Error::InsufficientMemory { .. } | Error::BudgetExceeded { .. } => EmStatus::InsufficientMemory,
        Error::Validation(_) => EmStatus::InvalidGraph,
        Error::WorkerPanic => EmStatus::Panic,
        _ => EmStatus::Invalid,
    }
}

struct Fail(EmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn bad_arg(message: &str) -> Fail {
    Fail(EmStatus::InvalidArgument, message.to_owned())
}

/// Runs `f`, records any failure, and turns panics into `EmStatus::Panic`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EmStatus::Ok,
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_owned());
            set_error(format!("panic: {message}"));
            EmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(bad_arg(&format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| bad_arg(&format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| bad_arg(&format!("{what} is NULL")))
}

/// Copies `text` NUL-terminated into `buf` when it fits. Returns the size
/// needed including the NUL.
unsafe fn copy_text(text: &str, buf: *mut c_char, len: usize) -> usize {
    let needed = text.len() + 1;
    if !buf.is_null() && len >= needed {
        std::ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
        *buf.add(text.len()) = 0;
    }
    needed
}

/// Copies the calling thread's last error message into `buf`. Returns the
/// buffer size the message needs including the terminating NUL; nothing is
/// written when `len` is smaller than that.
///
/// # Safety
/// `buf` must be NULL or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn em_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| copy_text(&e.borrow(), buf, len))
}

/// Number of blocks a scan of `n` items touches with `b` items per block.
/// Returns 0 when `b` is 0.
#[no_mangle]
pub extern "C" fn em_scan_io_bound(n: u64, b: u64) -> u64 {
    if b == 0 {
        return 0;
    }
    scan_io_bound(n, b)
}

/// Splits `available` bytes between `count` requests. Writes one grant per
/// request to `grants` and the chosen lambda to `lambda` (may be NULL).
///
/// # Safety
/// `requests` must point to `count` requests and `grants` to `count`
/// writable slots.
#[no_mangle]
pub unsafe extern "C" fn em_assign_memory(
    requests: *const EmMemoryRequest,
    count: usize,
    available: u64,
    grants: *mut u64,
    lambda: *mut f64,
) -> EmStatus {
    guard(|| {
        if count > 0 && (requests.is_null() || grants.is_null()) {
            return Err(bad_arg("requests or grants is NULL"));
        }
        let raw = if count == 0 { &[][..] } else { std::slice::from_raw_parts(requests, count) };
        let reqs: Vec<MemoryRequest> = raw
            .iter()
            .map(|r| {
                let maximum = if r.maximum == EM_UNBOUNDED {
                    MaxMemory::Unbounded
                } else {
                    MaxMemory::Bounded(r.maximum)
                };
                MemoryRequest::new(r.minimum, maximum, r.priority)
            })
            .collect();
        let assignment = assign_memory(&reqs, available)?;
        if count > 0 {
            std::slice::from_raw_parts_mut(grants, count).copy_from_slice(&assignment.grants);
        }
        if let Some(l) = lambda.as_mut() {
            *l = assignment.lambda;
        }
        Ok(())
    })
}

/// Creates storage with `block_items` items per block, a budget of
/// `memory_bytes`, and temporary files under `tmpdir` (NULL for the system
/// temp directory).
///
/// # Safety
/// `tmpdir` must be NULL or a NUL-terminated string; `storage` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn em_storage_new(
    block_items: u64,
    memory_bytes: u64,
    item_size: u64,
    tmpdir: *const c_char,
    storage: *mut *mut EmStorage,
) -> EmStatus {
    guard(|| {
        let slot = handle(storage, "storage")?;
        let config = BlockConfig::new(block_items, memory_bytes, item_size)?;
        let s = if tmpdir.is_null() {
            Storage::new(config)?
        } else {
            Storage::with_tmpdir(config, str_arg(tmpdir, "tmpdir")?)?
        };
        *slot = Box::into_raw(Box::new(EmStorage(s)));
        Ok(())
    })
}

/// # Safety
/// `storage` must be NULL or a handle from `em_storage_new` not yet freed.
/// Streams opened from it stay valid.
#[no_mangle]
pub unsafe extern "C" fn em_storage_free(storage: *mut EmStorage) {
    if !storage.is_null() {
        drop(Box::from_raw(storage));
    }
}

/// # Safety
/// `storage` must be a live handle and `counters` writable.
#[no_mangle]
pub unsafe extern "C" fn em_storage_counters(storage: *mut EmStorage, counters: *mut EmIoCounters) -> EmStatus {
    guard(|| {
        let s = handle(storage, "storage")?;
        *handle(counters, "counters")? = s.0.snapshot_counters().into();
        Ok(())
    })
}

/// # Safety
/// `storage` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn em_storage_reset_counters(storage: *mut EmStorage) -> EmStatus {
    guard(|| {
        handle(storage, "storage")?.0.reset_counters();
        Ok(())
    })
}

/// Opens the stream at `path` with items of `item_size` bytes.
///
/// # Safety
/// `storage` must be a live handle, `path` a NUL-terminated string and
/// `stream` writable.
#[no_mangle]
pub unsafe extern "C" fn em_stream_open(
    storage: *mut EmStorage,
    path: *const c_char,
    mode: EmOpenMode,
    item_size: usize,
    stream: *mut *mut EmStream,
) -> EmStatus {
    guard(|| {
        let s = handle(storage, "storage")?;
        let path = str_arg(path, "path")?;
        let slot = handle(stream, "stream")?;
        let mode = match mode {
            EmOpenMode::Read => OpenMode::Read,
            EmOpenMode::Write => OpenMode::Write,
            EmOpenMode::ReadWrite => OpenMode::ReadWrite,
        };
        let file = s.0.open_sized(path, mode, item_size)?;
        *slot = Box::into_raw(Box::new(EmStream(Some(file))));
        Ok(())
    })
}

unsafe fn open_stream<'a>(stream: *mut EmStream) -> Result<&'a mut StreamFile, Fail> {
    handle(stream, "stream")?
        .0
        .as_mut()
        .ok_or_else(|| Fail(EmStatus::Invalid, "stream is closed".to_owned()))
}

/// Appends one item of exactly the stream's item size.
///
/// # Safety
/// `stream` must be a live handle and `item` point to `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn em_stream_write(stream: *mut EmStream, item: *const u8, len: usize) -> EmStatus {
    guard(|| {
        let f = open_stream(stream)?;
        if item.is_null() {
            return Err(bad_arg("item is NULL"));
        }
        f.write_item(std::slice::from_raw_parts(item, len))?;
        Ok(())
    })
}

/// Reads the item at the cursor into `item`, which must hold the stream's
/// item size. Returns `EmStatus::EndOfStream` past the last item.
///
/// # Safety
/// `stream` must be a live handle and `item` point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn em_stream_read(stream: *mut EmStream, item: *mut u8, len: usize) -> EmStatus {
    guard(|| {
        let f = open_stream(stream)?;
        if item.is_null() {
            return Err(bad_arg("item is NULL"));
        }
        if len != f.item_size() {
            return Err(Error::ItemSize {
                expected: f.item_size(),
                got: len,
            }
            .into());
        }
        let bytes = f.read_item()?;
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), item, len);
        Ok(())
    })
}

/// # Safety
/// `stream` must be a live handle and `length` writable.
#[no_mangle]
pub unsafe extern "C" fn em_stream_length(stream: *mut EmStream, length: *mut u64) -> EmStatus {
    guard(|| {
        let f = open_stream(stream)?;
        *handle(length, "length")? = f.len();
        Ok(())
    })
}

/// # Safety
/// `stream` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn em_stream_seek(stream: *mut EmStream, position: u64) -> EmStatus {
    guard(|| {
        open_stream(stream)?.seek(position)?;
        Ok(())
    })
}

/// Flushes and closes the file. The handle must still be freed.
///
/// # Safety
/// `stream` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn em_stream_close(stream: *mut EmStream) -> EmStatus {
    guard(|| {
        let h = handle(stream, "stream")?;
        if let Some(f) = h.0.take() {
            f.close()?;
        }
        Ok(())
    })
}

/// Releases the handle. An unclosed stream is flushed on a best-effort
/// basis; call `em_stream_close` first to see write errors.
///
/// # Safety
/// `stream` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn em_stream_free(stream: *mut EmStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// Creates an empty flow graph for planning.
#[no_mangle]
pub extern "C" fn em_graph_new() -> *mut EmGraph {
    Box::into_raw(Box::new(EmGraph(FlowGraph::new())))
}

/// # Safety
/// `graph` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn em_graph_free(graph: *mut EmGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Adds a regular node and writes its id to `id`.
///
/// # Safety
/// `graph` must be a live handle, `name` a NUL-terminated string and `id`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn em_graph_add_regular(graph: *mut EmGraph, name: *const c_char, id: *mut u64) -> EmStatus {
    guard(|| {
        let g = handle(graph, "graph")?;
        let name = str_arg(name, "name")?;
        *handle(id, "id")? = g.0.add_regular(name).0;
        Ok(())
    })
}

/// Adds a blocking component: an input and an output node joined by a
/// blocking edge.
///
/// # Safety
/// `graph` must be a live handle, `name` a NUL-terminated string, and
/// `input` and `output` writable.
#[no_mangle]
pub unsafe extern "C" fn em_graph_add_blocking(
    graph: *mut EmGraph,
    name: *const c_char,
    input: *mut u64,
    output: *mut u64,
) -> EmStatus {
    guard(|| {
        let g = handle(graph, "graph")?;
        let name = str_arg(name, "name")?;
        let (i, o) = (handle(input, "input")?, handle(output, "output")?);
        let (a, b) = g.0.add_blocking(name);
        (*i, *o) = (a.0, b.0);
        Ok(())
    })
}

unsafe fn edge(graph: *mut EmGraph, from: u64, to: u64, add: fn(&mut FlowGraph, NodeId, NodeId)) -> EmStatus {
    guard(|| {
        let g = handle(graph, "graph")?;
        for id in [from, to] {
            if g.0.node(NodeId(id)).is_none() {
                return Err(bad_arg(&format!("node {id} is not in the graph")));
            }
        }
        add(&mut g.0, NodeId(from), NodeId(to));
        Ok(())
    })
}

/// `from` pushes items into `to`.
///
/// # Safety
/// `graph` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn em_graph_add_push(graph: *mut EmGraph, from: u64, to: u64) -> EmStatus {
    edge(graph, from, to, FlowGraph::add_push)
}

/// `puller` pulls items from `source`.
///
/// # Safety
/// `graph` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn em_graph_add_pull(graph: *mut EmGraph, source: u64, puller: u64) -> EmStatus {
    edge(graph, source, puller, FlowGraph::add_pull)
}

/// Validates the graph and writes its number of phases.
///
/// # Safety
/// `graph` must be a live handle and `phases` writable.
#[no_mangle]
pub unsafe extern "C" fn em_graph_phase_count(graph: *mut EmGraph, phases: *mut usize) -> EmStatus {
    guard(|| {
        let g = handle(graph, "graph")?;
        let slot = handle(phases, "phases")?;
        *slot = g.0.plan().map_err(Error::from)?.len();
        Ok(())
    })
}

/// Validates the graph and copies a text description of its phases and
/// call orders into `buf`. `needed` receives the size the text requires
/// including the NUL; nothing is copied when `len` is smaller.
///
/// # Safety
/// `graph` must be a live handle, `buf` NULL or `len` writable bytes, and
/// `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn em_graph_plan_report(
    graph: *mut EmGraph,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> EmStatus {
    guard(|| {
        let g = handle(graph, "graph")?;
        let slot = handle(needed, "needed")?;
        let plan = g.0.plan().map_err(Error::from)?;
        *slot = copy_text(&plan.report(&g.0, None), buf, len);
        Ok(())
    })
}

/// Generates a seeded raster, transforms it in the requested mode and
/// reports the items read and written. When `cells` is not NULL the output
/// raster is copied there row by row; `cells_len` must then equal
/// `report.n`.
///
/// # Safety
/// `options` and `report` must be valid pointers, `options.tmpdir` NULL or
/// a NUL-terminated string, and `cells` NULL or `cells_len` writable slots.
#[no_mangle]
pub unsafe extern "C" fn em_raster_run(
    options: *const EmRasterOptions,
    report: *mut EmRasterReport,
    cells: *mut i32,
    cells_len: usize,
) -> EmStatus {
    guard(|| {
        let o = *options.as_ref().ok_or_else(|| bad_arg("options is NULL"))?;
        let report = handle(report, "report")?;
        let tmpdir = if o.tmpdir.is_null() {
            std::env::temp_dir()
        } else {
            PathBuf::from(str_arg(o.tmpdir, "tmpdir")?)
        };
        let kind = match o.transform {
            EmTransform::Identity => TransformKind::Identity,
            EmTransform::Transpose => TransformKind::Transpose,
            EmTransform::Rot90 => TransformKind::Rot90,
            EmTransform::BlockShuffle => TransformKind::BlockShuffle,
        };
        let mode = match o.mode {
            EmMode::Pipelined => Mode::Pipelined,
            EmMode::Materialized => Mode::Materialized,
        };
        let a = Raster::from_seed(o.width, o.height, o.seed)?;
        let map: Arc<dyn CellMap> = Arc::new(Transform::new(kind, (o.width, o.height), o.seed));
        let n = {
            let (w, h) = map.output_dims();
            w as u64 * h as u64
        };
        if !cells.is_null() && cells_len as u64 != n {
            return Err(bad_arg(&format!("cells holds {cells_len} values, the output has {n}")));
        }

        let config = BlockConfig::new(o.block_items, o.memory_bytes, 16)?;
        let work = tempfile::Builder::new()
            .prefix("empipe-raster")
            .tempdir_in(&tmpdir)
            .map_err(Error::from)?;
        let storage = Storage::with_tmpdir(config, work.path())?;
        let input = a.store(&storage, work.path().join("A"))?;
        let workers = if o.workers == 0 { default_workers() } else { o.workers as usize };
        let job = RasterJob::new(map).workers(workers).progress(Arc::new(NullProgress));
        let run = job.run(mode, &Executor::new(&storage), &input, work.path().join("B"))?;
        if !cells.is_null() {
            let b = run.output.load(&storage)?;
            std::slice::from_raw_parts_mut(cells, cells_len).copy_from_slice(b.cells());
        }
        *report = EmRasterReport {
            n: run.report.n,
            items_read: run.report.items_read,
            items_written: run.report.items_written,
        };
        Ok(())
    })
}
