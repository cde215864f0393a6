//! Environments: DAGs over states with a stop action and a terminal reward.

pub mod hypergrid;

use std::collections::HashMap;
use std::fmt::Debug;
use std::hash::Hash;

use thiserror::Error;

pub use hypergrid::{Hypergrid, State, StateKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("state {0} has no outgoing actions of this kind")]
    TerminalInput(String),
    #[error("action {action} is not valid at {state}")]
    InvalidAction { state: String, action: usize },
    #[error("the initial state has no parents")]
    NoParents,
    #[error("reward requested for non-terminal state {0}")]
    NotTerminal(String),
    #[error("state space of {states} states exceeds the enumeration limit {limit}")]
    TooLarge { states: u128, limit: u128 },
}

/// A generative DAG with one source, a stop action, and rewards on the
/// terminal (stopped) states.
///
/// Actions are indexed `0..num_actions()`; the last index is the stop
/// action. A stopped state `x^T` has the single child [`Environment::final_state`].
/// The backward policy is indexed by the non-stop action that produced a
/// state, so it has `num_actions() - 1` outputs.
pub trait Environment {
    type State: Clone + Eq + Hash + Ord + Debug;

    fn num_actions(&self) -> usize;

    fn stop_action(&self) -> usize {
        self.num_actions() - 1
    }

    fn initial_state(&self) -> Self::State;

    fn final_state(&self) -> Self::State;

    /// True for stopped states `x^T`.
    fn is_terminal(&self, s: &Self::State) -> bool;

    fn is_final(&self, s: &Self::State) -> bool;

    fn valid_actions(&self, s: &Self::State) -> Result<Vec<bool>, EnvError>;

    fn step(&self, s: &Self::State, action: usize) -> Result<Self::State, EnvError>;

    /// Parents of `s` paired with the action leading from parent to `s`.
    fn parents(&self, s: &Self::State) -> Result<Vec<(Self::State, usize)>, EnvError>;

    fn reward(&self, terminal: &Self::State) -> Result<f64, EnvError>;

    /// Length of the network input for a non-terminal state.
    fn encoding_len(&self) -> usize;

    fn encode(&self, s: &Self::State, out: &mut [f64]);

    /// Whether the action algebra admits the closed-form neighbour OT:
    /// no action is a sum of two actions, and sums of distinct actions
    /// factor uniquely.
    fn closed_form_eligible(&self) -> bool;

    /// Upper bound on transitions from the source to the final state.
    fn max_trajectory_len(&self) -> usize;

    /// Every non-terminal state, parents before children.
    fn interior_states(&self, limit: u128) -> Result<Vec<Self::State>, EnvError>;

    /// Children of a non-final state paired with the action leading there.
    fn children(&self, s: &Self::State) -> Result<Vec<(usize, Self::State)>, EnvError> {
        if self.is_final(s) {
            return Err(EnvError::TerminalInput(format!("{s:?}")));
        }
        if self.is_terminal(s) {
            return Ok(vec![(self.stop_action(), self.final_state())]);
        }
        let mask = self.valid_actions(s)?;
        mask.iter()
            .enumerate()
            .filter(|(_, &ok)| ok)
            .map(|(a, _)| Ok((a, self.step(s, a)?)))
            .collect()
    }
}

/// A normalized distribution over terminal states.
#[derive(Clone, Debug)]
pub struct TerminalDistribution<S> {
    states: Vec<S>,
    probs: Vec<f64>,
    index: HashMap<S, usize>,
}

impl<S: Clone + Eq + Hash> TerminalDistribution<S> {
    pub fn new(states: Vec<S>, probs: Vec<f64>) -> Self {
        assert_eq!(states.len(), probs.len());
        let index = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self {
            states,
            probs,
            index,
        }
    }

    pub fn states(&self) -> &[S] {
        &self.states
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn position(&self, s: &S) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn prob(&self, s: &S) -> f64 {
        self.position(s).map_or(0.0, |i| self.probs[i])
    }

    /// Half the L1 distance to `other`, matched by state.
    pub fn total_variation(&self, other: &Self) -> f64 {
        let mut l1: f64 = self
            .states
            .iter()
            .zip(&self.probs)
            .map(|(s, p)| (p - other.prob(s)).abs())
            .sum();
        l1 += other
            .states
            .iter()
            .zip(&other.probs)
            .filter(|(s, _)| self.position(s).is_none())
            .map(|(_, p)| p.abs())
            .sum::<f64>();
        0.5 * l1
    }
}

/// Reward-proportional target distribution over all terminal states.
pub fn true_distribution<E: Environment>(
    env: &E,
    limit: u128,
) -> Result<TerminalDistribution<E::State>, EnvError> {
    let interior = env.interior_states(limit)?;
    let mut states = Vec::with_capacity(interior.len());
    let mut rewards = Vec::with_capacity(interior.len());
    for x in &interior {
        let t = env.step(x, env.stop_action())?;
        rewards.push(env.reward(&t)?);
        states.push(t);
    }
    let z: f64 = rewards.iter().sum();
    let probs = rewards.into_iter().map(|r| r / z).collect();
    Ok(TerminalDistribution::new(states, probs))
}
