//! End-to-end acceptance checks. Runs without the test harness so every
//! criterion prints its pass/fail line; exits nonzero if any fails.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use empipe::builtin::parallel::DEFAULT_BATCH_SIZE;
use empipe::builtin::sort::{merge_fanout, run_capacity, RunFormation};
use empipe::builtin::{collect, delay, from_vec, map, parallel, sort};
use empipe::graph::{FlowGraph, ValidationError};
use empipe::raster::{run_materialized, savings_ratio, CellMap, Raster, RasterJob, Transform, TransformKind};
use empipe::{
    assign_memory, BlockConfig, ExecutionTimeDb, Executor, MaxMemory, MemoryRequest, NullProgress, RecordingProgress,
    Storage,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::probe::{check_call_order, random_graph};
use common::{env, values};

type Outcome = Result<(), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn memory_table() -> Outcome {
    let reqs = [
        MemoryRequest::new(4, MaxMemory::Bounded(12), 5.0),
        MemoryRequest::new(1, MaxMemory::Bounded(7), 3.0),
        MemoryRequest::new(8, MaxMemory::Unbounded, 3.0),
        MemoryRequest::new(7, MaxMemory::Bounded(12), 7.0),
    ];
    let start = Instant::now();
    let a = assign_memory(&reqs, 36).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check((a.lambda - 2.0).abs() <= 1e-6, || format!("lambda {}", a.lambda))?;
    check(a.grants == [10, 6, 8, 12], || format!("grants {:?}", a.grants))?;
    check(elapsed < Duration::from_millis(1), || format!("took {elapsed:?}"))
}

fn raster_io() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let storage = Storage::with_tmpdir(BlockConfig::new(4096, 4 << 20, 16).unwrap(), dir.path()).unwrap();
    let exec = Executor::new(&storage);
    let (w, h) = (1024, 1024);
    let n = (w * h) as f64;
    let input = Raster::from_seed(w, h, 1)
        .unwrap()
        .store(&storage, dir.path().join("a"))
        .map_err(|e| e.to_string())?;
    let map: Arc<dyn CellMap> = Arc::new(Transform::new(TransformKind::Transpose, (w, h), 0));
    let m = run_materialized(&exec, &input, dir.path().join("bm"), Arc::clone(&map), Arc::new(NullProgress))
        .map_err(|e| e.to_string())?;
    let p = RasterJob::new(map)
        .run_pipelined(&exec, &input, dir.path().join("bp"))
        .map_err(|e| e.to_string())?;
    let within = |v: u64, k: f64, slack: f64| v as f64 >= k * n && v as f64 <= k * n * slack;
    check(within(m.io.items_read, 7.0, 1.05) && within(m.io.items_written, 7.0, 1.05), || {
        format!("materialized {:?}", m.io)
    })?;
    check(within(p.io.items_read, 3.0, 1.05) && within(p.io.items_written, 3.0, 1.05), || {
        format!("pipelined {:?}", p.io)
    })?;
    let ratio = savings_ratio(&m.report, &p.report);
    check(ratio >= 2.0, || format!("savings {ratio}"))?;
    check(m.output.load(&storage).ok() == p.output.load(&storage).ok(), || "outputs differ".into())?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))
}

fn phases() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let storage = Storage::with_tmpdir(BlockConfig::new(64, 1 << 20, 16).unwrap(), dir.path()).unwrap();
    let input = Raster::from_seed(4, 4, 0).unwrap().store(&storage, dir.path().join("a")).unwrap();
    let map: Arc<dyn CellMap> = Arc::new(Transform::new(TransformKind::Transpose, (4, 4), 0));
    let mut pipeline = RasterJob::new(map).workers(1).pipeline(&storage, &input, dir.path().join("b"));
    let graph = pipeline.graph();
    let plan = graph.plan().map_err(|e| e.to_string())?;
    let names: Vec<Vec<&str>> = plan
        .phases
        .iter()
        .map(|p| p.nodes.iter().map(|&n| graph.node(n).unwrap().name.as_str()).collect())
        .collect();
    let expected = [
        vec!["sort_S1 input", "generate_output_points", "parallel"],
        vec!["passive sorter output", "read_raster", "construct_S2", "sort_S2"],
        vec!["sorter output", "construct_output", "write_raster"],
    ];
    check(names == expected, || format!("phases {names:?}"))?;

    let mut g = FlowGraph::new();
    let u = g.add_regular("u");
    let (si, so) = g.add_blocking("sorter");
    let w = g.add_regular("w");
    g.add_push(u, si);
    g.add_pull(so, w);
    let mut shortcut = g.clone();
    shortcut.add_push(u, w);
    let err = shortcut.validate();
    check(matches!(err, Err(ValidationError::SamePhase { .. })), || format!("shortcut gave {err:?}"))?;

    let (di, dout) = g.add_blocking("delay");
    g.add_push(u, di);
    g.add_push(dout, w);
    let plan = g.plan().map_err(|e| e.to_string())?;
    check(plan.len() == 2, || format!("{} phases with a delay", plan.len()))
}

fn call_order() -> Outcome {
    let env = env(64, 1 << 20);
    for seed in 0..200 {
        let phases = 1 + (seed % 3) as usize;
        let (pipeline, shape, log) = random_graph(1000 + seed, phases, 5);
        env.try_run(pipeline).map_err(|e| format!("seed {seed}: {e}"))?;
        let violations = check_call_order(&shape, &log.borrow());
        check(violations.is_empty(), || format!("seed {seed}: {violations:?}"))?;
    }
    Ok(())
}

fn sorter() -> Outcome {
    let env = env(64, 64 * 1024);
    let capacity = run_capacity::<u64>(64 * 1024) as usize;
    for (i, n) in [0, 1, 64, capacity, 4 * capacity].into_iter().enumerate() {
        let input = values(n, 50 + i as u64);
        let mut expected = input.clone();
        expected.sort_unstable();
        let (sink, out) = collect();
        env.try_run(from_vec(input) | sort(&env.storage) | sink).map_err(|e| e.to_string())?;
        check(out.take() == expected, || format!("n = {n} not sorted"))?;
    }

    let small = common::env(4, 64 * 1024);
    let mut runs = RunFormation::new(&small.storage, |a: &u64, b: &u64| a.cmp(b), 16);
    let input = values(20 * 16, 3);
    for &v in &input {
        runs.push(v).map_err(|e| e.to_string())?;
    }
    let runs = runs.finish().map_err(|e| e.to_string())?;
    check(runs.run_lengths().len() == 20, || "expected 20 runs".into())?;
    let before = small.storage.snapshot_counters();
    let (mut merged, passes) = runs.merge(4).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    while let Some(v) = merged.next_item().map_err(|e| e.to_string())? {
        out.push(v);
    }
    let io = small.storage.snapshot_counters().since(&before);
    let mut expected = input;
    expected.sort_unstable();
    check(out == expected, || "merged output not sorted".into())?;
    check(passes == 2, || format!("{passes} passes"))?;
    // Two full passes read and write every item once; the final merge reads them once more.
    check(io.items_written == 2 * 320 && io.items_read == 3 * 320, || format!("{io:?}"))?;
    check(merge_fanout(5 * 64, 64, None) == 4, || "fanout rule".into())
}

fn memory_instances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let grant = |r: &MemoryRequest, lambda: f64| {
        let b = match r.maximum {
            MaxMemory::Bounded(b) => b as f64,
            MaxMemory::Unbounded => f64::INFINITY,
        };
        (r.minimum as f64).max(b.min(lambda * r.priority))
    };
    for case in 0..1000 {
        let k = rng.random_range(1..=20);
        let reqs: Vec<MemoryRequest> = (0..k)
            .map(|_| {
                let a = rng.random_range(0..400u64);
                let c = rng.random_range(0.5..6.0);
                if rng.random_bool(0.3) {
                    MemoryRequest::new(a, MaxMemory::Unbounded, c)
                } else {
                    MemoryRequest::new(a, MaxMemory::Bounded(a + rng.random_range(0..800)), c)
                }
            })
            .collect();
        let floor: u64 = reqs.iter().map(|r| r.minimum).sum();
        let available = floor + rng.random_range(0..5000);
        let got = assign_memory(&reqs, available).map_err(|e| format!("case {case}: {e}"))?;
        let more = assign_memory(&reqs, available + 100).map_err(|e| format!("case {case}: {e}"))?;
        check(got.grants.iter().sum::<u64>() <= available, || format!("case {case}: over budget"))?;
        for (i, (r, &g)) in reqs.iter().zip(&got.grants).enumerate() {
            let high = match r.maximum {
                MaxMemory::Bounded(b) => b,
                MaxMemory::Unbounded => u64::MAX,
            };
            check(r.minimum <= g && g <= high, || format!("case {case} node {i}: sandwich"))?;
            check(g <= more.grants[i], || format!("case {case} node {i}: not monotone"))?;
        }

        // Fine sweep: largest lambda on a 1e-4 grid whose total fits.
        let total = |lambda: f64| reqs.iter().map(|r| grant(r, lambda)).sum::<f64>();
        let mut lambda = 0.0;
        let mut step = 1e6;
        let mut saturated = false;
        while step >= 1e-4 && !saturated {
            let mut taken = 0;
            while total(lambda + step) <= available as f64 {
                lambda += step;
                taken += 1;
                if taken > 100 {
                    saturated = true;
                    break;
                }
            }
            step /= 10.0;
        }
        let lambda = if saturated { f64::INFINITY } else { lambda };
        for (i, (r, &g)) in reqs.iter().zip(&got.grants).enumerate() {
            let want = grant(r, lambda);
            check((g as f64 - want).abs() <= 1.0, || format!("case {case} node {i}: {g} vs sweep {want}"))?;
        }
    }
    Ok(())
}

fn progress() -> Outcome {
    let env = env(64, 1 << 20);
    let db = env.dir.path().join("times.db");
    std::fs::write(&db, "EMTDB 1\nseeded\t1000000000\t3\t10\t30\t60\n").unwrap();
    let exec = Executor::new(&env.storage).with_timedb(&db);
    let three_phase = |n: usize| {
        let (sink, _) = collect::<u64>();
        from_vec(values(n, 4)) | sort(&env.storage) | delay(&env.storage) | sink
    };
    let monotone = |r: &RecordingProgress| r.reports().windows(2).all(|w| w[0].0 <= w[1].0 + 1e-12);

    let recorder = Arc::new(RecordingProgress::new());
    exec.run(three_phase(3000), 3000, "seeded", recorder.clone()).map_err(|e| e.to_string())?;
    let ends: Vec<f64> = recorder.phase_ends().iter().map(|(_, f)| *f).collect();
    check(ends.len() == 3, || format!("{} phase ends", ends.len()))?;
    for (got, want) in ends.iter().zip([0.1, 0.4, 1.0]) {
        check((got - want).abs() <= 0.01, || format!("phase ends {ends:?}"))?;
    }
    check(monotone(&recorder), || "seeded run not monotone".into())?;

    let mut sizes = Vec::new();
    for n in [400, 1600, 200, 1600, 800] {
        let recorder = Arc::new(RecordingProgress::new());
        exec.run(three_phase(n), n as u64, "mixed", recorder.clone()).map_err(|e| e.to_string())?;
        check(monotone(&recorder), || format!("run of {n} not monotone"))?;
        let stored = ExecutionTimeDb::load(&db).map_err(|e| e.to_string())?;
        sizes.push(stored.get("mixed").map_or(0, |r| r.instance_size));
    }
    check(sizes == [400, 1600, 1600, 1600, 1600], || format!("stored sizes {sizes:?}"))?;
    let text = std::fs::read_to_string(&db).map_err(|e| e.to_string())?;
    let records: Vec<&str> = text.lines().skip(1).collect();
    check(records.len() == 2, || format!("db holds {records:?}"))?;
    check(records.iter().any(|l| l.starts_with("seeded\t1000000000\t")), || "seeded record lost".into())
}

fn parallel_order() -> Outcome {
    check(DEFAULT_BATCH_SIZE == 2048, || format!("batch size {DEFAULT_BATCH_SIZE}"))?;
    let env = env(64, 256 << 20);
    let input = values(10 * 2048, 8);
    let expected: Vec<u64> = input.iter().map(|x| x * 3 + 1).collect();
    for workers in [1, 2, 8] {
        let (sink, out) = collect();
        let p = from_vec(input.clone()) | parallel(map(|x: u64| x * 3 + 1)).workers(workers) | sink;
        env.try_run(p).map_err(|e| e.to_string())?;
        check(out.take() == expected, || format!("{workers} workers changed the output"))?;
    }
    Ok(())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("memory table", memory_table),
        ("raster I/O counts", raster_io),
        ("phase identification", phases),
        ("call order", call_order),
        ("sorter", sorter),
        ("memory distributor", memory_instances),
        ("progress", progress),
        ("parallel order", parallel_order),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(()) => println!("criterion {}: pass  {name}", i + 1),
            Err(why) => {
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
