//! Blocked, file-backed streams of fixed-size items with exact I/O counts.
//!
//! On-disk layout: the 8-byte magic `EMSTREAM`, a little-endian `u32` item
//! size, a `u32` reserved word (always zero), a little-endian `u64` item
//! count, then the items packed back to back. Items move between disk and
//! memory one block of `block_size_items` items at a time.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::memory::{MemoryLedger, Reservation};

pub const MAGIC: &[u8; 8] = b"EMSTREAM";
pub const HEADER_BYTES: u64 = 24;

/// Number of block transfers needed to scan `n` items: `ceil(n / b)`.
pub fn scan_io_bound(n: u64, b: u64) -> u64 {
    assert!(b >= 1, "block size must be positive");
    n.div_ceil(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub block_size_items: u64,
    pub memory_limit_bytes: u64,
    pub item_size_bytes: u64,
}

impl BlockConfig {
    pub fn new(block_size_items: u64, memory_limit_bytes: u64, item_size_bytes: u64) -> Result<Self> {
        let config = BlockConfig {
            block_size_items,
            memory_limit_bytes,
            item_size_bytes,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size_items == 0 {
            return Err(Error::BlockConfig("block size must be at least one item".into()));
        }
        if self.item_size_bytes == 0 {
            return Err(Error::BlockConfig("item size must be positive".into()));
        }
        let floor = 2 * self.block_size_items * self.item_size_bytes;
        if self.memory_limit_bytes < floor {
            return Err(Error::BlockConfig(format!(
                "memory limit {} is below two blocks ({floor} bytes)",
                self.memory_limit_bytes
            )));
        }
        Ok(())
    }

    pub fn block_bytes(&self, item_size: u64) -> u64 {
        self.block_size_items * item_size
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IoCounters {
    pub items_read: u64,
    pub items_written: u64,
    pub blocks_read: u64,
    pub blocks_written: u64,
}

impl IoCounters {
    /// Counter growth from `earlier` to `self`.
    pub fn since(&self, earlier: &IoCounters) -> IoCounters {
        IoCounters {
            items_read: self.items_read - earlier.items_read,
            items_written: self.items_written - earlier.items_written,
            blocks_read: self.blocks_read - earlier.blocks_read,
            blocks_written: self.blocks_written - earlier.blocks_written,
        }
    }
}

#[derive(Debug, Default)]
struct SharedCounters {
    items_read: AtomicU64,
    items_written: AtomicU64,
    blocks_read: AtomicU64,
    blocks_written: AtomicU64,
}

#[derive(Debug)]
struct StorageInner {
    config: BlockConfig,
    ledger: Arc<MemoryLedger>,
    counters: SharedCounters,
    tmpdir: PathBuf,
}

/// Everything streams share: the block configuration, the memory ledger that
/// block buffers are charged to, the I/O counters, and the temp directory.
#[derive(Clone, Debug)]
pub struct Storage {
    inner: Arc<StorageInner>,
}

impl Storage {
    pub fn new(config: BlockConfig) -> Result<Self> {
        Self::with_tmpdir(config, std::env::temp_dir())
    }

    pub fn with_tmpdir(config: BlockConfig, tmpdir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Storage {
            inner: Arc::new(StorageInner {
                config,
                ledger: Arc::new(MemoryLedger::new(config.memory_limit_bytes)),
                counters: SharedCounters::default(),
                tmpdir: tmpdir.into(),
            }),
        })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.inner.config
    }

    pub fn ledger(&self) -> &Arc<MemoryLedger> {
        &self.inner.ledger
    }

    pub fn tmpdir(&self) -> &Path {
        &self.inner.tmpdir
    }

    pub fn snapshot_counters(&self) -> IoCounters {
        let c = &self.inner.counters;
        IoCounters {
            items_read: c.items_read.load(Ordering::Relaxed),
            items_written: c.items_written.load(Ordering::Relaxed),
            blocks_read: c.blocks_read.load(Ordering::Relaxed),
            blocks_written: c.blocks_written.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counters(&self) {
        let c = &self.inner.counters;
        c.items_read.store(0, Ordering::Relaxed);
        c.items_written.store(0, Ordering::Relaxed);
        c.blocks_read.store(0, Ordering::Relaxed);
        c.blocks_written.store(0, Ordering::Relaxed);
    }

    /// Opens a stream of `item_size_bytes`-sized items.
    pub fn open(&self, path: impl AsRef<Path>, mode: OpenMode) -> Result<StreamFile> {
        self.open_sized(path, mode, self.inner.config.item_size_bytes as usize)
    }

    pub fn open_sized(&self, path: impl AsRef<Path>, mode: OpenMode, item_size: usize) -> Result<StreamFile> {
        StreamFile::open(self.clone(), path.as_ref(), mode, item_size, None)
    }

    /// A fresh read-write stream that deletes its file on drop.
    pub fn temp_stream(&self, item_size: usize) -> Result<StreamFile> {
        let tmp = tempfile::Builder::new()
            .prefix("empipe-")
            .suffix(".stream")
            .tempfile_in(&self.inner.tmpdir)?;
        let path = tmp.into_temp_path();
        let p = path.to_path_buf();
        StreamFile::open(self.clone(), &p, OpenMode::Write, item_size, Some(path))
    }

    pub fn open_typed<T: Record>(&self, path: impl AsRef<Path>, mode: OpenMode) -> Result<TypedStream<T>> {
        self.open_sized(path, mode, T::SIZE).map(TypedStream::new)
    }

    pub fn temp_typed<T: Record>(&self) -> Result<TypedStream<T>> {
        self.temp_stream(T::SIZE).map(TypedStream::new)
    }

    fn count(&self, field: fn(&SharedCounters) -> &AtomicU64, n: u64) {
        field(&self.inner.counters).fetch_add(n, Ordering::Relaxed);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpenMode {
    Read,
    /// Truncates.
    Write,
    /// Keeps existing contents (creating the file if absent); writes append.
    ReadWrite,
}

impl OpenMode {
    fn readable(self) -> bool {
        matches!(self, OpenMode::Read | OpenMode::ReadWrite | OpenMode::Write)
    }

    fn writable(self) -> bool {
        matches!(self, OpenMode::Write | OpenMode::ReadWrite)
    }
}

/// A blocked item stream. Writes always append; reads move a cursor that
/// starts at 0, and the cursor sits at the end after each append.
#[derive(Debug)]
pub struct StreamFile {
    storage: Storage,
    file: Option<File>,
    path: PathBuf,
    mode: OpenMode,
    item_size: usize,
    block_items: u64,
    length: u64,
    cursor: u64,
    buffer: Vec<u8>,
    /// Block currently held in `buffer` and how many of its items are valid.
    buffered_block: Option<u64>,
    buffered_items: u64,
    dirty: bool,
    _reservation: Reservation,
    temp: Option<tempfile::TempPath>,
}

impl StreamFile {
    fn open(
        storage: Storage,
        path: &Path,
        mode: OpenMode,
        item_size: usize,
        temp: Option<tempfile::TempPath>,
    ) -> Result<Self> {
        if item_size == 0 {
            return Err(Error::BlockConfig("item size must be positive".into()));
        }
        let block_items = storage.config().block_size_items;
        let block_bytes = block_items as usize * item_size;
        let reservation = storage.ledger().reserve(block_bytes as u64)?;

        let mut file = match mode {
            OpenMode::Read => File::open(path)?,
            OpenMode::Write => OpenOptions::new()
                .read(true)
                .write(true)
                .create(true)
                .truncate(true)
                .open(path)?,
            OpenMode::ReadWrite => OpenOptions::new()
                .read(true)
                .write(true)
                .create(true)
                .truncate(false)
                .open(path)?,
        };

        let on_disk = file.metadata()?.len();
        let length = if mode == OpenMode::Write || (mode == OpenMode::ReadWrite && on_disk == 0) {
            write_header(&mut file, item_size, 0)?;
            0
        } else {
            read_header(&mut file, path, item_size, on_disk)?
        };

        Ok(StreamFile {
            storage,
            file: Some(file),
            path: path.to_path_buf(),
            mode,
            item_size,
            block_items,
            length,
            cursor: 0,
            buffer: vec![0; block_bytes],
            buffered_block: None,
            buffered_items: 0,
            dirty: false,
            _reservation: reservation,
            temp,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn item_size(&self) -> usize {
        self.item_size
    }

    pub fn mode(&self) -> OpenMode {
        self.mode
    }

    pub fn seek(&mut self, position: u64) -> Result<()> {
        if position > self.length {
            return Err(Error::EndOfStream);
        }
        self.cursor = position;
        Ok(())
    }

    pub fn write_item(&mut self, item: &[u8]) -> Result<()> {
        if !self.mode.writable() {
            return Err(Error::StreamMode("writing"));
        }
        if item.len() != self.item_size {
            return Err(Error::ItemSize {
                expected: self.item_size,
                got: item.len(),
            });
        }
        let block = self.length / self.block_items;
        if self.buffered_block != Some(block) {
            self.flush_buffer()?;
            if !self.length.is_multiple_of(self.block_items) {
                // Appending into a partial block already on disk.
                self.load_block(block)?;
            } else {
                self.buffered_block = Some(block);
                self.buffered_items = 0;
            }
        }
        let slot = (self.length % self.block_items) as usize * self.item_size;
        self.buffer[slot..slot + self.item_size].copy_from_slice(item);
        self.length += 1;
        self.buffered_items = self.length - block * self.block_items;
        self.dirty = true;
        self.cursor = self.length;
        self.storage.count(|c| &c.items_written, 1);
        if self.buffered_items == self.block_items {
            self.flush_buffer()?;
        }
        Ok(())
    }

    pub fn read_item(&mut self) -> Result<&[u8]> {
        if !self.mode.readable() {
            return Err(Error::StreamMode("reading"));
        }
        if self.cursor >= self.length {
            return Err(Error::EndOfStream);
        }
        let index = self.cursor;
        self.cursor += 1;
        self.item_at(index)
    }

    pub fn read_item_back(&mut self) -> Result<&[u8]> {
        if !self.mode.readable() {
            return Err(Error::StreamMode("reading"));
        }
        if self.cursor == 0 {
            return Err(Error::BeginningOfStream);
        }
        self.cursor -= 1;
        self.item_at(self.cursor)
    }

    fn item_at(&mut self, index: u64) -> Result<&[u8]> {
        let block = index / self.block_items;
        if self.buffered_block != Some(block) {
            self.flush_buffer()?;
            self.load_block(block)?;
        }
        self.storage.count(|c| &c.items_read, 1);
        let slot = (index % self.block_items) as usize * self.item_size;
        Ok(&self.buffer[slot..slot + self.item_size])
    }

    fn block_offset(&self, block: u64) -> u64 {
        HEADER_BYTES + block * self.block_items * self.item_size as u64
    }

    fn load_block(&mut self, block: u64) -> Result<()> {
        let first = block * self.block_items;
        let items = (self.length - first).min(self.block_items);
        let offset = self.block_offset(block);
        let bytes = items as usize * self.item_size;
        let file = self.file.as_mut().ok_or(Error::StreamMode("I/O after close"))?;
        file.seek(SeekFrom::Start(offset))?;
        file.read_exact(&mut self.buffer[..bytes])?;
        self.buffered_block = Some(block);
        self.buffered_items = items;
        self.dirty = false;
        self.storage.count(|c| &c.blocks_read, 1);
        Ok(())
    }

    fn flush_buffer(&mut self) -> Result<()> {
        if !self.dirty {
            return Ok(());
        }
        let block = self.buffered_block.expect("dirty buffer without a block");
        let offset = self.block_offset(block);
        let bytes = self.buffered_items as usize * self.item_size;
        let file = self.file.as_mut().ok_or(Error::StreamMode("I/O after close"))?;
        file.seek(SeekFrom::Start(offset))?;
        file.write_all(&self.buffer[..bytes])?;
        self.dirty = false;
        self.storage.count(|c| &c.blocks_written, 1);
        Ok(())
    }

    /// Writes out any buffered block and the header.
    pub fn flush(&mut self) -> Result<()> {
        self.flush_buffer()?;
        if self.mode.writable() {
            let length = self.length;
            let item_size = self.item_size;
            let file = self.file.as_mut().ok_or(Error::StreamMode("I/O after close"))?;
            write_header(file, item_size, length)?;
            file.flush()?;
        }
        Ok(())
    }

    pub fn close(mut self) -> Result<()> {
        self.flush()?;
        self.file = None;
        Ok(())
    }

    /// Closes the stream and releases its block buffer but keeps the file
    /// (and, for temporaries, the right to delete it) for a later reopen.
    pub fn into_closed(mut self) -> Result<ClosedStream> {
        self.flush()?;
        self.file = None;
        Ok(ClosedStream {
            path: self.path.clone(),
            item_size: self.item_size,
            length: self.length,
            temp: self.temp.take(),
        })
    }
}

/// A stream with no open handle and no block buffer.
#[derive(Debug)]
pub struct ClosedStream {
    path: PathBuf,
    item_size: usize,
    length: u64,
    temp: Option<tempfile::TempPath>,
}

impl ClosedStream {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn reopen(self, storage: &Storage) -> Result<StreamFile> {
        StreamFile::open(storage.clone(), &self.path, OpenMode::Read, self.item_size, self.temp)
    }

    pub fn reopen_typed<T: Record>(self, storage: &Storage) -> Result<TypedStream<T>> {
        self.reopen(storage).map(TypedStream::new)
    }
}

impl Drop for StreamFile {
    fn drop(&mut self) {
        if self.file.is_some() {
            let _ = self.flush();
        }
    }
}

fn write_header(file: &mut File, item_size: usize, length: u64) -> Result<()> {
    let mut header = [0u8; HEADER_BYTES as usize];
    header[..8].copy_from_slice(MAGIC);
    header[8..12].copy_from_slice(&(item_size as u32).to_le_bytes());
    header[16..24].copy_from_slice(&length.to_le_bytes());
    file.seek(SeekFrom::Start(0))?;
    file.write_all(&header)?;
    Ok(())
}

fn read_header(file: &mut File, path: &Path, item_size: usize, on_disk: u64) -> Result<u64> {
    let bad = |reason: String| Error::StreamHeader {
        path: path.to_path_buf(),
        reason,
    };
    if on_disk < HEADER_BYTES {
        return Err(bad(format!("file is {on_disk} bytes, shorter than the header")));
    }
    let mut header = [0u8; HEADER_BYTES as usize];
    file.seek(SeekFrom::Start(0))?;
    file.read_exact(&mut header)?;
    if &header[..8] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let stored_size = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if stored_size != item_size {
        return Err(bad(format!(
            "stored item size {stored_size} does not match requested {item_size}"
        )));
    }
    let reserved = u32::from_le_bytes(header[12..16].try_into().unwrap());
    if reserved != 0 {
        return Err(bad(format!("reserved word is {reserved:#x}, expected 0")));
    }
    let length = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let needed = HEADER_BYTES + length * item_size as u64;
    if on_disk < needed {
        return Err(bad(format!("header claims {length} items but the file is truncated")));
    }
    Ok(length)
}

/// A fixed-size item that can live in a [`StreamFile`].
pub trait Record: Copy + Send + 'static {
    const SIZE: usize;
    fn encode(&self, out: &mut [u8]);
    fn decode(bytes: &[u8]) -> Self;
}

macro_rules! int_record {
    ($($t:ty),*) => {$(
        impl Record for $t {
            const SIZE: usize = std::mem::size_of::<$t>();
            fn encode(&self, out: &mut [u8]) {
                out.copy_from_slice(&self.to_le_bytes());
            }
            fn decode(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("record width"))
            }
        }
    )*};
}

int_record!(u8, u16, u32, u64, i8, i16, i32, i64, f32, f64);

impl<A: Record, B: Record> Record for (A, B) {
    const SIZE: usize = A::SIZE + B::SIZE;
    fn encode(&self, out: &mut [u8]) {
        self.0.encode(&mut out[..A::SIZE]);
        self.1.encode(&mut out[A::SIZE..]);
    }
    fn decode(bytes: &[u8]) -> Self {
        (A::decode(&bytes[..A::SIZE]), B::decode(&bytes[A::SIZE..]))
    }
}

/// A [`StreamFile`] holding items of type `T`.
#[derive(Debug)]
pub struct TypedStream<T: Record> {
    raw: StreamFile,
    scratch: Vec<u8>,
    _item: PhantomData<fn() -> T>,
}

impl<T: Record> TypedStream<T> {
    pub fn new(raw: StreamFile) -> Self {
        assert_eq!(raw.item_size(), T::SIZE, "stream item size does not match the record type");
        TypedStream {
            raw,
            scratch: vec![0; T::SIZE],
            _item: PhantomData,
        }
    }

    pub fn write(&mut self, item: &T) -> Result<()> {
        item.encode(&mut self.scratch);
        self.raw.write_item(&self.scratch)
    }

    pub fn read(&mut self) -> Result<T> {
        self.raw.read_item().map(T::decode)
    }

    pub fn read_back(&mut self) -> Result<T> {
        self.raw.read_item_back().map(T::decode)
    }

    pub fn len(&self) -> u64 {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn cursor(&self) -> u64 {
        self.raw.cursor()
    }

    pub fn seek(&mut self, position: u64) -> Result<()> {
        self.raw.seek(position)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.raw.flush()
    }

    pub fn close(self) -> Result<()> {
        self.raw.close()
    }

    pub fn raw(&self) -> &StreamFile {
        &self.raw
    }

    pub fn into_raw(self) -> StreamFile {
        self.raw
    }

    pub fn into_closed(self) -> Result<ClosedStream> {
        self.raw.into_closed()
    }
}
