use empipe::stream::scan_io_bound;
use empipe::{BlockConfig, Error, OpenMode, Storage};
use proptest::prelude::*;

const B: u64 = 16;

fn storage(dir: &tempfile::TempDir) -> Storage {
    Storage::with_tmpdir(BlockConfig::new(B, 1 << 20, 8).unwrap(), dir.path()).unwrap()
}

#[test]
fn scan_bound_examples() {
    assert_eq!(scan_io_bound(1000, 100), 10);
    assert_eq!(scan_io_bound(0, 7), 0);
    assert_eq!(scan_io_bound(101, 100), 2);
}

#[test]
fn fifo_and_reverse_order() {
    let dir = tempfile::tempdir().unwrap();
    let s = storage(&dir);
    let path = dir.path().join("abc");
    let mut w = s.open_typed::<u64>(&path, OpenMode::Write).unwrap();
    assert_eq!((w.len(), w.cursor()), (0, 0));
    for v in [1, 2, 3] {
        w.write(&v).unwrap();
    }
    w.close().unwrap();

    let mut r = s.open_typed::<u64>(&path, OpenMode::Read).unwrap();
    assert_eq!(r.len(), 3);
    assert_eq!([r.read().unwrap(), r.read().unwrap(), r.read().unwrap()], [1, 2, 3]);
    assert!(matches!(r.read(), Err(Error::EndOfStream)));
    assert_eq!([r.read_back().unwrap(), r.read_back().unwrap(), r.read_back().unwrap()], [3, 2, 1]);
    assert!(matches!(r.read_back(), Err(Error::BeginningOfStream)));
}

#[test]
fn reopening_with_another_item_size_fails() {
    let dir = tempfile::tempdir().unwrap();
    let s = storage(&dir);
    let path = dir.path().join("wide");
    let mut w = s.open_typed::<u64>(&path, OpenMode::Write).unwrap();
    w.write(&7).unwrap();
    w.close().unwrap();
    assert!(s.open_typed::<u32>(&path, OpenMode::Read).is_err());
}

#[test]
fn block_counts() {
    let dir = tempfile::tempdir().unwrap();
    let s = storage(&dir);
    let path = dir.path().join("blocks");

    s.reset_counters();
    let mut w = s.open_typed::<u64>(&path, OpenMode::Write).unwrap();
    for v in 0..=B {
        w.write(&v).unwrap();
    }
    w.close().unwrap();
    assert_eq!(s.snapshot_counters().blocks_written, 2);

    let mut w = s.open_typed::<u64>(&path, OpenMode::Write).unwrap();
    for v in 0..10 * B {
        w.write(&v).unwrap();
    }
    w.close().unwrap();

    s.reset_counters();
    let mut r = s.open_typed::<u64>(&path, OpenMode::Read).unwrap();
    for _ in 0..10 * B {
        r.read().unwrap();
    }
    assert_eq!(s.snapshot_counters().blocks_read, 10);

    s.reset_counters();
    let mut r = s.open_typed::<u64>(&path, OpenMode::Read).unwrap();
    r.seek(4 * B).unwrap();
    for _ in 0..4 * B {
        r.read_back().unwrap();
    }
    let c = s.snapshot_counters();
    assert_eq!((c.blocks_read, c.items_read), (4, 4 * B));
    assert_eq!(c, s.snapshot_counters());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn roundtrip_and_counter_law(items in prop::collection::vec(any::<u64>(), 0..200)) {
        let dir = tempfile::tempdir().unwrap();
        let s = storage(&dir);
        let path = dir.path().join("items");
        let mut w = s.open_typed::<u64>(&path, OpenMode::Write).unwrap();
        for v in &items {
            w.write(v).unwrap();
        }
        w.close().unwrap();
        let mut r = s.open_typed::<u64>(&path, OpenMode::Read).unwrap();
        let back: Vec<u64> = (0..r.len()).map(|_| r.read().unwrap()).collect();
        prop_assert_eq!(&back, &items);

        let n = items.len() as u64;
        let c = s.snapshot_counters();
        prop_assert_eq!((c.items_written, c.items_read), (n, n));
        prop_assert_eq!((c.blocks_written, c.blocks_read), (scan_io_bound(n, B), scan_io_bound(n, B)));

        let mut r = s.open_typed::<u64>(&path, OpenMode::Read).unwrap();
        r.seek(n).unwrap();
        let mut reversed: Vec<u64> = (0..n).map(|_| r.read_back().unwrap()).collect();
        reversed.reverse();
        prop_assert_eq!(reversed, items);
    }

    #[test]
    fn scan_bound_is_integer_ceiling(n in 0u64..10_000_000, b in 1u64..100_000) {
        let expected = if n % b == 0 { n / b } else { n / b + 1 };
        prop_assert_eq!(scan_io_bound(n, b), expected);
    }
}
