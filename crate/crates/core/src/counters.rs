//! Work accounting shared by the estimators: atomic hash evaluations plus
//! candidate distance computations. Wall time is reported by the harness but
//! never used in thresholds.

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkCounters {
    /// Atomic LSH evaluations (one inner product / one oracle decision).
    pub hash_evals: u64,
    /// Candidate points whose distance to the query was computed.
    pub candidates: u64,
}

impl WorkCounters {
    pub fn total(&self) -> u64 {
        self.hash_evals + self.candidates
    }

    pub fn add(&mut self, other: WorkCounters) {
        self.hash_evals += other.hash_evals;
        self.candidates += other.candidates;
    }
}
