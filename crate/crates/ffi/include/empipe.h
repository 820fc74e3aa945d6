#ifndef EMPIPE_H
#define EMPIPE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Marks a memory request without an upper bound.
 */
#define EM_UNBOUNDED UINT64_MAX

typedef enum EmStatus {
  EM_STATUS_OK = 0,
  /**
   * NULL pointer, bad UTF-8, or an argument out of range.
   */
  EM_STATUS_INVALID_ARGUMENT = 1,
  EM_STATUS_IO = 2,
  EM_STATUS_END_OF_STREAM = 3,
  EM_STATUS_INSUFFICIENT_MEMORY = 4,
  EM_STATUS_INVALID_GRAPH = 5,
  /**
   * Input or configuration rejected by the library.
   */
  EM_STATUS_INVALID = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  EM_STATUS_PANIC = 7,
} EmStatus;

typedef enum EmOpenMode {
  EM_OPEN_MODE_READ = 0,
  EM_OPEN_MODE_WRITE = 1,
  EM_OPEN_MODE_READ_WRITE = 2,
} EmOpenMode;

typedef enum EmTransform {
  EM_TRANSFORM_IDENTITY = 0,
  EM_TRANSFORM_TRANSPOSE = 1,
  EM_TRANSFORM_ROT90 = 2,
  EM_TRANSFORM_BLOCK_SHUFFLE = 3,
} EmTransform;

typedef enum EmMode {
  EM_MODE_PIPELINED = 0,
  EM_MODE_MATERIALIZED = 1,
} EmMode;

typedef struct EmGraph EmGraph;

/**
 * Block configuration, memory budget and I/O counters shared by streams.
 */
typedef struct EmStorage EmStorage;

typedef struct EmStream EmStream;

typedef struct EmMemoryRequest {
  uint64_t minimum;
  /**
   * `EM_UNBOUNDED` for no limit.
   */
  uint64_t maximum;
  double priority;
} EmMemoryRequest;

typedef struct EmIoCounters {
  uint64_t items_read;
  uint64_t items_written;
  uint64_t blocks_read;
  uint64_t blocks_written;
} EmIoCounters;

typedef struct EmRasterOptions {
  uint32_t width;
  uint32_t height;
  enum EmTransform transform;
  uint64_t seed;
  enum EmMode mode;
  uint64_t block_items;
  uint64_t memory_bytes;
  /**
   * 0 picks the number of available cores.
   */
  uint32_t workers;
  /**
   * Directory for the rasters and temporary streams; NULL for the
   * system temp directory.
   */
  const char *tmpdir;
} EmRasterOptions;

typedef struct EmRasterReport {
  /**
   * Cells in the output raster.
   */
  uint64_t n;
  uint64_t items_read;
  uint64_t items_written;
} EmRasterReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf`. Returns the
 * buffer size the message needs including the terminating NUL; nothing is
 * written when `len` is smaller than that.
 *
 * # Safety
 * `buf` must be NULL or point to `len` writable bytes.
 */
size_t em_last_error_message(char *buf, size_t len);

/**
 * Number of blocks a scan of `n` items touches with `b` items per block.
 * Returns 0 when `b` is 0.
 */
uint64_t em_scan_io_bound(uint64_t n, uint64_t b);

/**
 * Splits `available` bytes between `count` requests. Writes one grant per
 * request to `grants` and the chosen lambda to `lambda` (may be NULL).
 *
 * # Safety
 * `requests` must point to `count` requests and `grants` to `count`
 * writable slots.
 */
enum EmStatus em_assign_memory(const struct EmMemoryRequest *requests,
                               size_t count,
                               uint64_t available,
                               uint64_t *grants,
                               double *lambda);

/**
 * Creates storage with `block_items` items per block, a budget of
 * `memory_bytes`, and temporary files under `tmpdir` (NULL for the system
 * temp directory).
 *
 * # Safety
 * `tmpdir` must be NULL or a NUL-terminated string; `storage` must be
 * writable.
 */
enum EmStatus em_storage_new(uint64_t block_items,
                             uint64_t memory_bytes,
                             uint64_t item_size,
                             const char *tmpdir,
                             struct EmStorage **storage);

/**
 * # Safety
 * `storage` must be NULL or a handle from `em_storage_new` not yet freed.
 * Streams opened from it stay valid.
 */
void em_storage_free(struct EmStorage *storage);

/**
 * # Safety
 * `storage` must be a live handle and `counters` writable.
 */
enum EmStatus em_storage_counters(struct EmStorage *storage, struct EmIoCounters *counters);

/**
 * # Safety
 * `storage` must be a live handle.
 */
enum EmStatus em_storage_reset_counters(struct EmStorage *storage);

/**
 * Opens the stream at `path` with items of `item_size` bytes.
 *
 * # Safety
 * `storage` must be a live handle, `path` a NUL-terminated string and
 * `stream` writable.
 */
enum EmStatus em_stream_open(struct EmStorage *storage,
                             const char *path,
                             enum EmOpenMode mode,
                             size_t item_size,
                             struct EmStream **stream);

/**
 * Appends one item of exactly the stream's item size.
 *
 * # Safety
 * `stream` must be a live handle and `item` point to `len` bytes.
 */
enum EmStatus em_stream_write(struct EmStream *stream, const uint8_t *item, size_t len);

/**
 * Reads the item at the cursor into `item`, which must hold the stream's
 * item size. Returns `EmStatus::EndOfStream` past the last item.
 *
 * # Safety
 * `stream` must be a live handle and `item` point to `len` writable bytes.
 */
enum EmStatus em_stream_read(struct EmStream *stream, uint8_t *item, size_t len);

/**
 * # Safety
 * `stream` must be a live handle and `length` writable.
 */
enum EmStatus em_stream_length(struct EmStream *stream, uint64_t *length);

/**
 * # Safety
 * `stream` must be a live handle.
 */
enum EmStatus em_stream_seek(struct EmStream *stream, uint64_t position);

/**
 * Flushes and closes the file. The handle must still be freed.
 *
 * # Safety
 * `stream` must be a live handle.
 */
enum EmStatus em_stream_close(struct EmStream *stream);

/**
 * Releases the handle. An unclosed stream is flushed on a best-effort
 * basis; call `em_stream_close` first to see write errors.
 *
 * # Safety
 * `stream` must be NULL or a live handle.
 */
void em_stream_free(struct EmStream *stream);

/**
 * Creates an empty flow graph for planning.
 */
struct EmGraph *em_graph_new(void);

/**
 * # Safety
 * `graph` must be NULL or a live handle.
 */
void em_graph_free(struct EmGraph *graph);

/**
 * Adds a regular node and writes its id to `id`.
 *
 * # Safety
 * `graph` must be a live handle, `name` a NUL-terminated string and `id`
 * writable.
 */
enum EmStatus em_graph_add_regular(struct EmGraph *graph, const char *name, uint64_t *id);

/**
 * Adds a blocking component: an input and an output node joined by a
 * blocking edge.
 *
 * # Safety
 * `graph` must be a live handle, `name` a NUL-terminated string, and
 * `input` and `output` writable.
 */
enum EmStatus em_graph_add_blocking(struct EmGraph *graph,
                                    const char *name,
                                    uint64_t *input,
                                    uint64_t *output);

/**
 * `from` pushes items into `to`.
 *
 * # Safety
 * `graph` must be a live handle.
 */
enum EmStatus em_graph_add_push(struct EmGraph *graph, uint64_t from, uint64_t to);

/**
 * `puller` pulls items from `source`.
 *
 * # Safety
 * `graph` must be a live handle.
 */
enum EmStatus em_graph_add_pull(struct EmGraph *graph, uint64_t source, uint64_t puller);

/**
 * Validates the graph and writes its number of phases.
 *
 * # Safety
 * `graph` must be a live handle and `phases` writable.
 */
enum EmStatus em_graph_phase_count(struct EmGraph *graph, size_t *phases);

/**
 * Validates the graph and copies a text description of its phases and
 * call orders into `buf`. `needed` receives the size the text requires
 * including the NUL; nothing is copied when `len` is smaller.
 *
 * # Safety
 * `graph` must be a live handle, `buf` NULL or `len` writable bytes, and
 * `needed` writable.
 */
enum EmStatus em_graph_plan_report(struct EmGraph *graph, char *buf, size_t len, size_t *needed);

/**
 * Generates a seeded raster, transforms it in the requested mode and
 * reports the items read and written. When `cells` is not NULL the output
 * raster is copied there row by row; `cells_len` must then equal
 * `report.n`.
 *
 * # Safety
 * `options` and `report` must be valid pointers, `options.tmpdir` NULL or
 * a NUL-terminated string, and `cells` NULL or `cells_len` writable slots.
 */
enum EmStatus em_raster_run(const struct EmRasterOptions *options,
                            struct EmRasterReport *report,
                            int32_t *cells,
                            size_t cells_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMPIPE_H */
