//! Progress indicators and the per-phase step tracker that feeds them.

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

/// Receives the overall completion fraction of a pipeline run.
///
/// Called only from the strand driving the pipeline.
pub trait ProgressIndicator: Send + Sync {
    fn report(&self, fraction: f64, phase: &str);
}

pub struct NullProgress;

impl ProgressIndicator for NullProgress {
    fn report(&self, _fraction: f64, _phase: &str) {}
}

/// Keeps every report, for inspection after a run.
#[derive(Default)]
pub struct RecordingProgress {
    reports: Mutex<Vec<(f64, String)>>,
}

impl RecordingProgress {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reports(&self) -> Vec<(f64, String)> {
        self.reports.lock().unwrap().clone()
    }

    /// The last fraction reported under each phase label, in report order.
    pub fn phase_ends(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for (fraction, label) in self.reports.lock().unwrap().iter() {
            match out.last_mut() {
                Some((l, f)) if l == label => *f = *fraction,
                _ => out.push((label.clone(), *fraction)),
            }
        }
        out
    }
}

impl ProgressIndicator for RecordingProgress {
    fn report(&self, fraction: f64, phase: &str) {
        self.reports.lock().unwrap().push((fraction, phase.to_owned()));
    }
}

/// A one-line percentage bar on stderr.
pub struct TextProgress {
    last_percent: Mutex<Option<u32>>,
}

impl TextProgress {
    pub fn new() -> Self {
        TextProgress {
            last_percent: Mutex::new(None),
        }
    }
}

impl Default for TextProgress {
    fn default() -> Self {
        Self::new()
    }
}

impl ProgressIndicator for TextProgress {
    fn report(&self, fraction: f64, phase: &str) {
        let percent = (fraction * 100.0).floor() as u32;
        let mut last = self.last_percent.lock().unwrap();
        if *last == Some(percent) && percent < 100 {
            return;
        }
        *last = Some(percent);
        let filled = (percent / 5) as usize;
        let mut err = std::io::stderr().lock();
        let _ = write!(
            err,
            "\r[{}{}] {percent:3}% {phase:<40}",
            "#".repeat(filled),
            ".".repeat(20 - filled)
        );
        if percent >= 100 {
            let _ = writeln!(err);
        }
        let _ = err.flush();
    }
}

/// Clamps reported fractions to be nondecreasing across a whole run.
pub(crate) struct MonotoneSink {
    sink: Arc<dyn ProgressIndicator>,
    last: Mutex<f64>,
}

impl MonotoneSink {
    pub(crate) fn new(sink: Arc<dyn ProgressIndicator>) -> Self {
        MonotoneSink {
            sink,
            last: Mutex::new(f64::NEG_INFINITY),
        }
    }

    pub(crate) fn report(&self, fraction: f64, phase: &str) {
        let fraction = fraction.clamp(0.0, 1.0);
        let mut last = self.last.lock().unwrap();
        if fraction > *last {
            *last = fraction;
            self.sink.report(fraction, phase);
        }
    }
}

/// Step accounting for one phase: maps completed steps to an overall
/// fraction `base + weight * completed / declared`.
pub struct PhaseTracker {
    declared: u64,
    completed: AtomicU64,
    next_report: AtomicU64,
    stride: u64,
    base: f64,
    weight: f64,
    label: String,
    sink: Arc<MonotoneSink>,
}

impl PhaseTracker {
    pub(crate) fn new(declared: u64, base: f64, weight: f64, label: String, sink: Arc<MonotoneSink>) -> Self {
        let stride = (declared / 1000).max(1);
        PhaseTracker {
            declared,
            completed: AtomicU64::new(0),
            next_report: AtomicU64::new(stride),
            stride,
            base,
            weight,
            label,
            sink,
        }
    }

    pub(crate) fn advance(&self, k: u64) {
        let done = self.completed.fetch_add(k, Ordering::Relaxed) + k;
        if done >= self.next_report.load(Ordering::Relaxed) {
            self.next_report.store(done + self.stride, Ordering::Relaxed);
            self.sink.report(self.fraction_at(done), &self.label);
        }
    }

    fn fraction_at(&self, done: u64) -> f64 {
        let local = if self.declared == 0 {
            1.0
        } else {
            (done as f64 / self.declared as f64).min(1.0)
        };
        self.base + self.weight * local
    }

    /// Phase-local completion in `[0, 1]`.
    pub fn local_fraction(&self) -> f64 {
        if self.declared == 0 {
            return 0.0;
        }
        (self.completed.load(Ordering::Relaxed) as f64 / self.declared as f64).min(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracker_maps_steps_into_phase_window() {
        let rec = Arc::new(RecordingProgress::new());
        let sink = Arc::new(MonotoneSink::new(rec.clone()));
        let t = PhaseTracker::new(10, 0.1, 0.3, "p".into(), sink);
        for _ in 0..10 {
            t.advance(1);
        }
        let reports = rec.reports();
        assert_eq!(reports.len(), 10);
        assert!((reports[4].0 - (0.1 + 0.3 * 0.5)).abs() < 1e-12);
        assert!((reports[9].0 - 0.4).abs() < 1e-12);
        assert_eq!(t.local_fraction(), 1.0);
    }

    #[test]
    fn monotone_sink_drops_regressions() {
        let rec = Arc::new(RecordingProgress::new());
        let sink = MonotoneSink::new(rec.clone());
        sink.report(0.5, "a");
        sink.report(0.4, "a");
        sink.report(0.6, "b");
        let f: Vec<f64> = rec.reports().iter().map(|r| r.0).collect();
        assert_eq!(f, [0.5, 0.6]);
        assert_eq!(rec.phase_ends(), vec![("a".to_string(), 0.5), ("b".to_string(), 0.6)]);
    }
}
