//! Application-wide memory accounting and per-phase memory distribution.
//!
//! Every node in a phase states a minimum `a`, a maximum `b` (possibly
//! unbounded) and a priority `c`. For a scale factor `lambda` node `u` is
//! granted `max(a_u, min(b_u, lambda * c_u))`; [`assign_memory`] finds the
//! largest `lambda` whose total fits the available budget.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Upper bound of a memory request.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaxMemory {
    Bounded(u64),
    Unbounded,
}

impl MaxMemory {
    fn as_f64(self) -> f64 {
        match self {
            MaxMemory::Bounded(b) => b as f64,
            MaxMemory::Unbounded => f64::INFINITY,
        }
    }

    pub fn is_unbounded(self) -> bool {
        matches!(self, MaxMemory::Unbounded)
    }
}

impl fmt::Display for MaxMemory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaxMemory::Bounded(b) => write!(f, "{b}"),
            MaxMemory::Unbounded => f.write_str("inf"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryRequest {
    pub minimum: u64,
    pub maximum: MaxMemory,
    pub priority: f64,
}

impl Default for MemoryRequest {
    fn default() -> Self {
        MemoryRequest {
            minimum: 0,
            maximum: MaxMemory::Bounded(0),
            priority: 1.0,
        }
    }
}

impl MemoryRequest {
    pub fn new(minimum: u64, maximum: MaxMemory, priority: f64) -> Self {
        MemoryRequest {
            minimum,
            maximum,
            priority,
        }
    }

    /// A request for exactly `bytes`.
    pub fn fixed(bytes: u64) -> Self {
        Self::new(bytes, MaxMemory::Bounded(bytes), 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.priority.is_finite() && self.priority > 0.0) {
            return Err(Error::MemoryRequest(format!(
                "priority must be positive, got {}",
                self.priority
            )));
        }
        if let MaxMemory::Bounded(b) = self.maximum {
            if b < self.minimum {
                return Err(Error::MemoryRequest(format!(
                    "minimum {} exceeds maximum {b}",
                    self.minimum
                )));
            }
        }
        Ok(())
    }

    /// `M_u(lambda)` before rounding.
    pub fn grant_at(&self, lambda: f64) -> f64 {
        let scaled = lambda * self.priority;
        (self.minimum as f64).max(self.maximum.as_f64().min(scaled))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryAssignment {
    pub lambda: f64,
    /// Whole-byte grants, in request order.
    pub grants: Vec<u64>,
    pub total: u64,
}

/// `M(lambda)`: the unrounded total over all requests.
pub fn total_assigned(requests: &[MemoryRequest], lambda: f64) -> f64 {
    requests.iter().map(|r| r.grant_at(lambda)).sum()
}

const MAX_ITERATIONS: usize = 64;

/// Distributes `available` bytes over `requests`.
pub fn assign_memory(requests: &[MemoryRequest], available: u64) -> Result<MemoryAssignment> {
    for r in requests {
        r.validate()?;
    }
    let required: u64 = requests.iter().map(|r| r.minimum).sum();
    if required > available {
        return Err(Error::InsufficientMemory {
            required,
            available,
            shortfall: required - available,
        });
    }
    if requests.is_empty() {
        return Ok(MemoryAssignment {
            lambda: 0.0,
            grants: Vec::new(),
            total: 0,
        });
    }

    let avail = available as f64;
    let priority_sum: f64 = requests.iter().map(|r| r.priority).sum();
    let min_priority = requests
        .iter()
        .map(|r| r.priority)
        .fold(f64::INFINITY, f64::min);

    // Everything saturates: report the smallest lambda at which it does.
    if requests.iter().all(|r| !r.maximum.is_unbounded()) {
        let max_total: u64 = requests
            .iter()
            .map(|r| match r.maximum {
                MaxMemory::Bounded(b) => b,
                MaxMemory::Unbounded => unreachable!(),
            })
            .sum();
        if max_total <= available {
            let lambda = requests
                .iter()
                .map(|r| r.maximum.as_f64() / r.priority)
                .fold(0.0, f64::max);
            return Ok(finish(requests, lambda, available));
        }
    }

    let mut lo = 0.0f64;
    let mut hi = (avail + required as f64 + 1.0) / min_priority;
    for _ in 0..MAX_ITERATIONS {
        if (hi - lo) * priority_sum < 1.0 {
            break;
        }
        let mid = lo + (hi - lo) / 2.0;
        if total_assigned(requests, mid) <= avail {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    // The bracket is narrower than one byte of total growth; solve the linear
    // piece exactly so grants at round lambdas do not fall a byte short.
    let mut lambda = lo;
    for probe in [lo, hi] {
        if let Some(candidate) = solve_linear_piece(requests, probe, avail) {
            if candidate >= lo
                && candidate <= hi
                && candidate > lambda
                && total_assigned(requests, candidate) <= avail + 1e-9 * avail.max(1.0)
            {
                lambda = candidate;
            }
        }
    }
    Ok(finish(requests, lambda, available))
}

/// Solves `M(lambda) = avail` assuming the set of proportionally-scaled
/// requests is the one active at `at`.
fn solve_linear_piece(requests: &[MemoryRequest], at: f64, avail: f64) -> Option<f64> {
    let mut fixed = 0.0;
    let mut slope = 0.0;
    for r in requests {
        let scaled = at * r.priority;
        if scaled <= r.minimum as f64 {
            fixed += r.minimum as f64;
        } else if scaled >= r.maximum.as_f64() {
            fixed += r.maximum.as_f64();
        } else {
            slope += r.priority;
        }
    }
    (slope > 0.0).then(|| (avail - fixed) / slope)
}

fn finish(requests: &[MemoryRequest], lambda: f64, available: u64) -> MemoryAssignment {
    let round = |r: &MemoryRequest, snap: bool| {
        let v = r.grant_at(lambda);
        let eps = if snap { 1e-9 * v.max(1.0) } else { 0.0 };
        let g = (v + eps).floor() as u64;
        let g = g.max(r.minimum);
        match r.maximum {
            MaxMemory::Bounded(b) => g.min(b),
            MaxMemory::Unbounded => g,
        }
    };
    let mut grants: Vec<u64> = requests.iter().map(|r| round(r, true)).collect();
    let mut total: u64 = grants.iter().sum();
    if total > available {
        grants = requests.iter().map(|r| round(r, false)).collect();
        total = grants.iter().sum();
    }
    MemoryAssignment {
        lambda,
        grants,
        total,
    }
}

/// Application-wide byte budget.
#[derive(Debug)]
pub struct MemoryLedger {
    limit: u64,
    used: AtomicU64,
}

impl MemoryLedger {
    pub fn new(limit: u64) -> Self {
        MemoryLedger {
            limit,
            used: AtomicU64::new(0),
        }
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::Acquire)
    }

    pub fn available_memory(&self) -> u64 {
        self.limit - self.used()
    }

    pub fn register_allocation(&self, bytes: u64) -> Result<()> {
        self.used
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |used| {
                used.checked_add(bytes).filter(|&n| n <= self.limit)
            })
            .map(|_| ())
            .map_err(|used| Error::BudgetExceeded {
                requested: bytes,
                remaining: self.limit - used,
            })
    }

    pub fn release_allocation(&self, bytes: u64) {
        let prev = self.used.fetch_sub(bytes, Ordering::AcqRel);
        debug_assert!(prev >= bytes, "released more than registered");
    }

    /// Registers `bytes` until the returned guard drops.
    pub fn reserve(self: &Arc<Self>, bytes: u64) -> Result<Reservation> {
        self.register_allocation(bytes)?;
        Ok(Reservation {
            ledger: Arc::clone(self),
            bytes,
        })
    }
}

#[derive(Debug)]
pub struct Reservation {
    ledger: Arc<MemoryLedger>,
    bytes: u64,
}

impl Reservation {
    pub fn bytes(&self) -> u64 {
        self.bytes
    }
}

impl Drop for Reservation {
    fn drop(&mut self) {
        self.ledger.release_allocation(self.bytes);
    }
}
