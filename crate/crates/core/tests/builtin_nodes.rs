mod common;

use common::{env, values};
use empipe::builtin::{
    collect, delay, filter, from_vec, map, parallel, passive_delay, passive_reverse, passive_sorter, pump, reverse,
    sort, sort_by, stream_sink, stream_source,
};
use empipe::{Error, OpenMode};

#[test]
fn vector_through_map_and_filter() {
    let e = env(16, 1 << 20);
    let (sink, out) = collect();
    let p = from_vec(vec![1u64, 2, 3]) | map(|x: u64| x * 10) | filter(|x: &u64| *x > 10) | sink;
    let run = e.run(p);
    assert_eq!(out.take(), vec![20, 30]);
    assert_eq!(run.plan.len(), 1);
}

#[test]
fn sort_small_inputs() {
    let e = env(16, 1 << 20);
    let (sink, out) = collect();
    let run = e.run(from_vec(vec![3u64, 1, 2]) | sort(&e.storage) | sink);
    assert_eq!(out.take(), vec![1, 2, 3]);
    assert_eq!(run.plan.len(), 2);
}

#[test]
fn sort_many_runs_matches_oracle() {
    let e = env(8, 64 * 1024);
    let input = values(20_000, 7);
    let (sink, out) = collect();
    e.run(from_vec(input.clone()) | sort(&e.storage).fanout_cap(3) | sink);
    let mut expected = input;
    expected.sort();
    assert_eq!(out.take(), expected);
}

#[test]
fn sort_by_descending() {
    let e = env(8, 1 << 20);
    let (sink, out) = collect();
    e.run(from_vec(values(500, 1)) | sort_by(&e.storage, |a: &u64, b: &u64| b.cmp(a)) | sink);
    let got = out.take();
    assert!(got.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn delay_keeps_order_and_reverse_flips_it() {
    let e = env(4, 1 << 20);
    let (sink, out) = collect();
    let run = e.run(from_vec(vec![1u64, 2, 3]) | delay(&e.storage) | sink);
    assert_eq!(out.take(), vec![1, 2, 3]);
    assert_eq!(run.plan.len(), 2);

    let (sink, out) = collect();
    e.run(from_vec(vec![1u64, 2, 3]) | reverse(&e.storage) | sink);
    assert_eq!(out.take(), vec![3, 2, 1]);
}

#[test]
fn reverse_counts_one_write_and_one_read_per_item() {
    let e = env(64, 1 << 20);
    let input = values(3 * 64, 3);
    let (sink, out) = collect();
    let before = e.storage.snapshot_counters();
    e.run(from_vec(input.clone()) | reverse(&e.storage) | sink);
    let io = e.storage.snapshot_counters().since(&before);
    let mut expected = input;
    expected.reverse();
    assert_eq!(out.take(), expected);
    assert_eq!((io.items_written, io.items_read), (192, 192));
}

#[test]
fn passive_sorter_and_buffers_feed_a_later_phase() {
    let e = env(4, 1 << 20);
    let mut sorter = passive_sorter::<u64>(&e.storage);
    let p1 = from_vec(vec![5u64, 4]) | sorter.input();
    let (sink, out) = collect();
    let p2 = pump(sorter.output()) | sink;
    let run = e.run(p1.join(p2));
    assert_eq!(out.take(), vec![4, 5]);
    assert_eq!(run.plan.len(), 2);

    let mut d = passive_delay::<u64>(&e.storage);
    let mut r = passive_reverse::<u64>(&e.storage);
    let (sink_d, out_d) = collect();
    let (sink_r, out_r) = collect();
    let p = (from_vec(vec![1u64, 2, 3]) | d.input())
        .join(from_vec(vec![1u64, 2, 3]) | r.input())
        .join(pump(d.output()) | sink_d)
        .join(pump(r.output()) | sink_r);
    e.run(p);
    assert_eq!(out_d.take(), vec![1, 2, 3]);
    assert_eq!(out_r.take(), vec![3, 2, 1]);
}

#[test]
fn empty_passive_sorter() {
    let e = env(4, 1 << 20);
    let mut sorter = passive_sorter::<u64>(&e.storage);
    let (sink, out) = collect();
    e.run((from_vec(Vec::<u64>::new()) | sorter.input()).join(pump(sorter.output()) | sink));
    assert!(out.take().is_empty());
}

#[test]
fn stream_copy() {
    let e = env(4, 1 << 20);
    let src = e.dir.path().join("src");
    let dst = e.dir.path().join("dst");
    e.run(from_vec(vec![1u64, 2, 3]) | stream_sink::<u64>(&e.storage, &src));
    e.run(stream_source::<u64>(&e.storage, &src) | stream_sink::<u64>(&e.storage, &dst));
    let mut s = e.storage.open_typed::<u64>(&dst, OpenMode::Read).unwrap();
    let got: Vec<u64> = (0..s.len()).map(|_| s.read().unwrap()).collect();
    assert_eq!(got, vec![1, 2, 3]);
}

#[test]
fn map_then_sink_matches_oracle() {
    let e = env(16, 1 << 20);
    let input = values(1000, 11);
    let (sink, out) = collect();
    e.run(from_vec(input.clone()) | map(|x: u64| x ^ 0x5555) | sink);
    assert_eq!(out.take(), input.iter().map(|x| x ^ 0x5555).collect::<Vec<_>>());
}

#[test]
fn parallel_preserves_order() {
    let e = env(16, 64 << 20);
    let input = values(10 * 100 + 7, 5);
    for workers in [1, 2, 4] {
        let (sink, out) = collect();
        e.run(from_vec(input.clone()) | parallel(map(|x: u64| x + 1)).workers(workers).batch_size(100) | sink);
        assert_eq!(out.take(), input.iter().map(|x| x + 1).collect::<Vec<_>>());
    }
}

#[test]
fn parallel_worker_panic_is_an_error() {
    let e = env(16, 64 << 20);
    let (sink, _out) = collect();
    let p = from_vec((0..100u64).collect()) | parallel(map(|x: u64| if x == 50 { panic!("boom") } else { x })).workers(2).batch_size(10) | sink;
    let err = e.try_run(p).unwrap_err();
    assert!(matches!(err.root_cause(), Error::WorkerPanic), "{err}");
}
