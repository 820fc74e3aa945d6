//! Runs pipelines phase by phase and keeps the execution time database
//! that weights progress across phases.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::graph::{FlowGraph, PhasePlan};
use crate::memory::{assign_memory, MemoryRequest};
use crate::node::{with_node, MetadataStore, Node, NodeId, Origin, PropagateContext};
use crate::pipe::Pipeline;
use crate::progress::{MonotoneSink, PhaseTracker, ProgressIndicator};
use crate::stream::Storage;

const DB_HEADER: &str = "EMTDB 1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimeRecord {
    pub instance_size: u64,
    /// Milliseconds per phase.
    pub durations: Vec<u64>,
}

/// Per-phase timings of the largest instance seen for each pipeline id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExecutionTimeDb {
    records: BTreeMap<String, TimeRecord>,
}

impl ExecutionTimeDb {
    pub fn new() -> Self {
        Self::default()
    }

    /// A missing file is an empty database.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Self::new()),
            Err(e) => return Err(e.into()),
        };
        Self::parse(&text).map_err(|(line, message)| Error::TimeDb {
            path: path.to_path_buf(),
            line,
            message,
        })
    }

    fn parse(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut lines = text.split_terminator('\n').enumerate();
        match lines.next() {
            Some((_, DB_HEADER)) => {}
            Some((_, other)) => return Err((1, format!("expected {DB_HEADER:?}, found {other:?}"))),
            None => return Err((1, "empty file".into())),
        }
        let mut db = Self::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 3 {
                return Err((lineno, format!("expected at least 3 fields, found {}", fields.len())));
            }
            let number = |s: &str, what: &str| {
                s.parse::<u64>()
                    .map_err(|_| (lineno, format!("{what} {s:?} is not a nonnegative integer")))
            };
            let id = fields[0];
            if id.is_empty() {
                return Err((lineno, "empty pipeline id".into()));
            }
            let instance_size = number(fields[1], "instance size")?;
            let k = number(fields[2], "phase count")? as usize;
            if fields.len() != 3 + k {
                return Err((lineno, format!("phase count {k} but {} durations", fields.len() - 3)));
            }
            let durations = fields[3..]
                .iter()
                .map(|d| number(d, "duration"))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if db.records.insert(id.to_owned(), TimeRecord { instance_size, durations }).is_some() {
                return Err((lineno, format!("duplicate pipeline id {id:?}")));
            }
        }
        Ok(db)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{DB_HEADER}\n");
        for (id, r) in &self.records {
            out.push_str(&format!("{id}\t{}\t{}", r.instance_size, r.durations.len()));
            for d in &r.durations {
                out.push_str(&format!("\t{d}"));
            }
            out.push('\n');
        }
        out
    }

    /// Writes to a temporary file next to `path`, then renames it in place.
    pub fn store(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(self.to_text().as_bytes())?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn get(&self, pipeline_id: &str) -> Option<&TimeRecord> {
        self.records.get(pipeline_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stores the timings unless a record for a larger instance with the
    /// same phase count already exists. Returns whether it was stored.
    pub fn record(&mut self, pipeline_id: &str, instance_size: u64, durations: Vec<u64>) -> Result<bool> {
        if pipeline_id.is_empty() || pipeline_id.contains(['\t', '\n', '\r']) {
            return Err(Error::Invalid(format!(
                "pipeline id {pipeline_id:?} must be nonempty and free of tabs and newlines"
            )));
        }
        let replace = match self.records.get(pipeline_id) {
            None => true,
            Some(old) => instance_size >= old.instance_size || old.durations.len() != durations.len(),
        };
        if replace {
            self.records.insert(
                pipeline_id.to_owned(),
                TimeRecord {
                    instance_size,
                    durations,
                },
            );
        }
        Ok(replace)
    }
}

/// Fraction of the run attributed to each phase.
pub fn phase_progress_weights(db: &ExecutionTimeDb, pipeline_id: &str, phase_count: usize) -> Vec<f64> {
    if phase_count == 0 {
        return Vec::new();
    }
    let uniform = vec![1.0 / phase_count as f64; phase_count];
    let Some(record) = db.get(pipeline_id) else {
        return uniform;
    };
    if record.durations.len() != phase_count {
        return uniform;
    }
    let total: u64 = record.durations.iter().sum();
    if total == 0 {
        return uniform;
    }
    record.durations.iter().map(|&d| d as f64 / total as f64).collect()
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub pipeline_id: String,
    pub instance_size: u64,
    /// Milliseconds per phase, in execution order.
    pub phase_durations: Vec<u64>,
    pub plan: PhasePlan,
    pub graph: FlowGraph,
    /// Bytes granted to each node, per phase.
    pub grants: Vec<Vec<(NodeId, u64)>>,
}

pub struct Executor {
    storage: Storage,
    timedb: Option<PathBuf>,
}

impl Executor {
    pub fn new(storage: &Storage) -> Self {
        Executor {
            storage: storage.clone(),
            timedb: None,
        }
    }

    pub fn with_timedb(mut self, path: impl Into<PathBuf>) -> Self {
        self.timedb = Some(path.into());
        self
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    /// Validates the pipeline's graph and executes its phases in order.
    pub fn run(
        &self,
        mut pipeline: Pipeline,
        instance_size: u64,
        pipeline_id: &str,
        progress: Arc<dyn ProgressIndicator>,
    ) -> Result<PipelineRun> {
        let graph = pipeline.graph();
        let plan = graph.plan()?;
        let reach = graph.reachability();
        let mut db = match &self.timedb {
            Some(path) => ExecutionTimeDb::load(path)?,
            None => ExecutionTimeDb::new(),
        };
        let weights = phase_progress_weights(&db, pipeline_id, plan.len());
        let sink = Arc::new(MonotoneSink::new(progress));

        let mut store = MetadataStore::new();
        for (key, value) in pipeline.forwards() {
            store.forward(Origin::Boundary, key.clone(), value.clone());
        }

        let roots = pipeline.roots_mut();
        let mut durations = Vec::with_capacity(plan.len());
        let mut grants = Vec::with_capacity(plan.len());
        let mut base = 0.0;
        let total_phases = plan.len();
        for (index, phase) in plan.phases.iter().enumerate() {
            let number = index + 1;
            let initiator_name = graph.node(phase.initiator).map_or("?", |n| n.name.as_str());
            let label = format!("phase {number}/{total_phases}: {initiator_name}");
            let weight = weights[index];
            sink.report(base, &label);
            let started = Instant::now();

            let fail = |node: NodeId, e: Error| match e {
                e @ Error::Phase { .. } => e,
                e => Error::Phase {
                    phase: number,
                    node: graph.node(node).map_or_else(|| node.to_string(), |n| n.name.clone()),
                    source: Box::new(e),
                },
            };
            let call = |roots: &mut Vec<Box<dyn Node>>, id: NodeId, f: &mut dyn FnMut(&mut dyn Node) -> Result<()>| {
                with_node(roots, id, |n| f(n))
                    .unwrap_or_else(|| {
                        Err(Error::Lifecycle {
                            node: id.to_string(),
                            message: "node is not reachable from the pipeline roots".into(),
                        })
                    })
                    .map_err(|e| fail(id, e))
            };

            let mut requests = Vec::with_capacity(phase.nodes.len());
            for &id in &phase.nodes {
                let mut request = MemoryRequest::default();
                call(roots, id, &mut |n| {
                    request = n.base().memory_request();
                    Ok(())
                })?;
                requests.push(request);
            }
            let available = self.storage.ledger().available_memory();
            let assignment = assign_memory(&requests, available).map_err(|e| fail(phase.initiator, e))?;
            for (&id, &grant) in phase.nodes.iter().zip(&assignment.grants) {
                call(roots, id, &mut |n| {
                    n.base_mut().assign(grant);
                    Ok(())
                })?;
            }
            grants.push(phase.nodes.iter().copied().zip(assignment.grants.iter().copied()).collect());

            for &id in &phase.orders.propagate {
                call(roots, id, &mut |n| {
                    let mut ctx = PropagateContext::new(&mut store, &reach, n.base());
                    n.propagate(&mut ctx)
                })?;
            }

            let mut declared = 0u64;
            for &id in &phase.nodes {
                call(roots, id, &mut |n| {
                    declared += n.base().declared_steps().unwrap_or(0);
                    Ok(())
                })?;
            }
            let tracker = (declared > 0)
                .then(|| Arc::new(PhaseTracker::new(declared, base, weight, label.clone(), Arc::clone(&sink))));
            for &id in &phase.nodes {
                call(roots, id, &mut |n| {
                    let has_steps = n.base().declared_steps().is_some();
                    n.base_mut().attach_tracker(tracker.clone().filter(|_| has_steps));
                    Ok(())
                })?;
            }

            for &id in &phase.orders.begin {
                call(roots, id, &mut |n| {
                    n.base_mut().activate();
                    n.begin()
                })?;
            }
            call(roots, phase.initiator, &mut |n| n.go())?;
            for &id in &phase.orders.end {
                call(roots, id, &mut |n| {
                    let result = n.end();
                    n.base_mut().finish();
                    result
                })?;
            }

            durations.push(started.elapsed().as_millis() as u64);
            base = if number == total_phases { 1.0 } else { base + weight };
            sink.report(base, &label);
        }
        if total_phases == 0 {
            sink.report(1.0, "empty pipeline");
        }

        if let Some(path) = &self.timedb {
            if db.record(pipeline_id, instance_size, durations.clone())? {
                db.store(path)?;
            }
        }

        Ok(PipelineRun {
            pipeline_id: pipeline_id.to_owned(),
            instance_size,
            phase_durations: durations,
            plan,
            graph,
            grants,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_from_record() {
        let mut db = ExecutionTimeDb::new();
        db.record("p", 5, vec![10, 30, 60]).unwrap();
        let w = phase_progress_weights(&db, "p", 3);
        for (a, b) in w.iter().zip([0.1, 0.3, 0.6]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(phase_progress_weights(&db, "q", 3), vec![1.0 / 3.0; 3]);
        assert_eq!(phase_progress_weights(&db, "p", 2), vec![0.5; 2]);
        assert_eq!(phase_progress_weights(&db, "q", 1), vec![1.0]);
    }

    #[test]
    fn zero_durations_fall_back_to_uniform() {
        let mut db = ExecutionTimeDb::new();
        db.record("p", 5, vec![0, 0]).unwrap();
        assert_eq!(phase_progress_weights(&db, "p", 2), vec![0.5, 0.5]);
    }

    #[test]
    fn larger_instances_win() {
        let mut db = ExecutionTimeDb::new();
        assert!(db.record("p", 10, vec![1, 2]).unwrap());
        assert!(!db.record("p", 9, vec![5, 5]).unwrap());
        assert!(db.record("p", 10, vec![3, 4]).unwrap());
        assert_eq!(db.get("p").unwrap().durations, vec![3, 4]);
        // A changed phase count replaces the record regardless of size.
        assert!(db.record("p", 1, vec![7]).unwrap());
    }

    #[test]
    fn text_roundtrip() {
        let mut db = ExecutionTimeDb::new();
        db.record("zeta", 3, vec![1, 2, 3]).unwrap();
        db.record("alpha", 0, vec![]).unwrap();
        let text = db.to_text();
        assert_eq!(text, "EMTDB 1\nalpha\t0\t0\nzeta\t3\t3\t1\t2\t3\n");
        assert_eq!(ExecutionTimeDb::parse(&text).unwrap(), db);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        assert_eq!(ExecutionTimeDb::parse("EMTDB 1\na\t1\t2\t5\n").unwrap_err().0, 2);
        assert_eq!(ExecutionTimeDb::parse("EMTDB 1\na\t1\t1\t5\nb\tx\t0\n").unwrap_err().0, 3);
        assert_eq!(ExecutionTimeDb::parse("EMTDB 2\n").unwrap_err().0, 1);
        assert_eq!(ExecutionTimeDb::parse("").unwrap_err().0, 1);
    }

    #[test]
    fn rejects_ids_with_separators() {
        let mut db = ExecutionTimeDb::new();
        assert!(db.record("a\tb", 1, vec![1]).is_err());
        assert!(db.record("", 1, vec![1]).is_err());
    }

    #[test]
    fn store_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("times.db");
        assert!(ExecutionTimeDb::load(&path).unwrap().is_empty());
        let mut db = ExecutionTimeDb::new();
        db.record("a", 1, vec![4]).unwrap();
        db.record("b", 2, vec![5, 6]).unwrap();
        db.store(&path).unwrap();
        assert_eq!(ExecutionTimeDb::load(&path).unwrap(), db);
    }
}
