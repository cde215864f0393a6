//! Exact and empirical evaluation of a trained sampler.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;
use std::hash::Hash;

use crate::env::{Environment, TerminalDistribution};
use crate::error::Result;
use crate::policy::PolicyModel;

/// Enumeration guard for [`exact_terminal_distribution`].
pub const EXACT_DISTRIBUTION_LIMIT: u128 = 1_000_000;

/// Default size of the sliding window of visited terminals.
pub const VISIT_CAPACITY: usize = 200_000;

/// The model's terminal distribution, by forward dynamic programming over
/// the reach probabilities of every interior state.
pub fn exact_terminal_distribution<E: Environment>(
    model: &PolicyModel,
    env: &E,
) -> Result<TerminalDistribution<E::State>> {
    let states = env.interior_states(EXACT_DISTRIBUTION_LIMIT)?;
    let mut index: HashMap<&E::State, usize> = HashMap::with_capacity(states.len());
    for (i, s) in states.iter().enumerate() {
        index.insert(s, i);
    }
    let stop = env.stop_action();
    let mut reach = vec![0.0; states.len()];
    reach[0] = 1.0;
    let mut terminals = Vec::with_capacity(states.len());
    let mut probs = Vec::with_capacity(states.len());
    const CHUNK: usize = 4096;
    for (c, chunk) in states.chunks(CHUNK).enumerate() {
        // states are in topological order, so reach[i] is complete by the
        // time state i is visited
        let logp = model.forward_policy_batch(env, chunk)?;
        for (k, (s, lp)) in chunk.iter().zip(&logp).enumerate() {
            let i = c * CHUNK + k;
            let r = reach[i];
            for (a, child) in env.children(s)? {
                let p = lp[a].exp();
                if a == stop {
                    terminals.push(child);
                    probs.push(r * p);
                } else {
                    reach[index[&child]] += r * p;
                }
            }
        }
    }
    Ok(TerminalDistribution::new(terminals, probs))
}

/// The last `capacity` sampled terminals, with running counts.
#[derive(Clone, Debug)]
pub struct VisitBuffer<S> {
    capacity: usize,
    ring: VecDeque<S>,
    counts: HashMap<S, usize>,
}

impl<S: Clone + Eq + Hash> VisitBuffer<S> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "visit buffer needs room for one state");
        Self {
            capacity,
            ring: VecDeque::with_capacity(capacity.min(1 << 16)),
            counts: HashMap::new(),
        }
    }

    pub fn push(&mut self, s: S) {
        if self.ring.len() == self.capacity {
            let old = self.ring.pop_front().expect("full buffer");
            let c = self.counts.get_mut(&old).expect("counted");
            *c -= 1;
            if *c == 0 {
                self.counts.remove(&old);
            }
        }
        *self.counts.entry(s.clone()).or_insert(0) += 1;
        self.ring.push_back(s);
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn count(&self, s: &S) -> usize {
        self.counts.get(s).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &HashMap<S, usize> {
        &self.counts
    }

    pub fn oldest(&self) -> Option<&S> {
        self.ring.front()
    }
}

/// `KL(P_hat || P_true)` for the empirical distribution of `buffer`.
///
/// States the buffer never saw contribute nothing. A visited state that the
/// target gives zero mass makes the value infinite.
pub fn kl_divergence<S: Clone + Eq + Hash>(
    buffer: &VisitBuffer<S>,
    target: &TerminalDistribution<S>,
) -> f64 {
    if buffer.is_empty() {
        return 0.0;
    }
    let n = buffer.len() as f64;
    let mut terms: Vec<f64> = buffer
        .counts()
        .iter()
        .map(|(s, &c)| {
            let p = c as f64 / n;
            p * (p / target.prob(s)).ln()
        })
        .collect();
    // hash map order varies between instances; sum in a fixed order so the
    // result is reproducible to the last bit
    terms.sort_by(f64::total_cmp);
    terms.iter().sum::<f64>().max(0.0)
}

/// Which modes have been visited, and when the last one first was.
#[derive(Clone, Debug)]
pub struct ModeTracker<S> {
    modes: BTreeSet<S>,
    found: BTreeSet<S>,
    visits: u64,
    all_found_at: Option<u64>,
}

impl<S: Clone + Ord> ModeTracker<S> {
    pub fn new(modes: BTreeSet<S>) -> Self {
        Self {
            modes,
            found: BTreeSet::new(),
            visits: 0,
            all_found_at: None,
        }
    }

    /// Records one sampled terminal; returns true on a first visit to a mode.
    pub fn visit(&mut self, s: &S) -> bool {
        self.visits += 1;
        let new = self.modes.contains(s) && self.found.insert(s.clone());
        if new && self.found.len() == self.modes.len() {
            self.all_found_at = Some(self.visits);
        }
        new
    }

    pub fn found(&self) -> usize {
        self.found.len()
    }

    pub fn total(&self) -> usize {
        self.modes.len()
    }

    pub fn all_found(&self) -> bool {
        self.found.len() == self.modes.len()
    }

    /// Number of visits up to and including the one that completed the set.
    pub fn all_found_at(&self) -> Option<u64> {
        self.all_found_at
    }
}

/// Pushes `terminal` into the buffer and the mode tracker.
pub fn record_visit<S: Clone + Eq + Hash + Ord>(
    buffer: &mut VisitBuffer<S>,
    modes: &mut ModeTracker<S>,
    terminal: &S,
) {
    buffer.push(terminal.clone());
    modes.visit(terminal);
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub trajectories: u64,
    pub modes_found: usize,
    pub kl: f64,
    pub loss_tb: f64,
    pub loss_ot: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: &str = "step,trajectories,modes_found,kl,loss_tb,loss_ot";

impl RunMetrics {
    pub fn push(&mut self, row: MetricsRow) {
        if let Some(last) = self.rows.last() {
            debug_assert!(row.step > last.step && row.modes_found >= last.modes_found);
        }
        self.rows.push(row);
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// CSV text; reals use 12 digits of mantissa in scientific notation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.12e},{:.12e},{:.12e}",
                r.step, r.trajectories, r.modes_found, r.kl, r.loss_tb, r.loss_ot
            )
            .expect("write to string");
        }
        out
    }
}
