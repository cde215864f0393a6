//! The `D`-dimensional hypergrid of side `H`.
//!
//! Actions `0..D` increment one coordinate, action `D` stops. The reward has
//! high plateaus near the corners and `2^D` sharp modes.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use super::{EnvError, Environment};

/// Default enumeration guard for the exact target distribution.
pub const TRUE_DISTRIBUTION_LIMIT: u128 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StateKind {
    Interior,
    /// The stopped copy `x^T` of an interior state.
    Terminal,
    /// The sink `s_f`.
    Final,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State {
    kind: StateKind,
    coords: SmallVec<[u16; 8]>,
}

impl State {
    pub fn interior(coords: &[u16]) -> Self {
        Self {
            kind: StateKind::Interior,
            coords: SmallVec::from_slice(coords),
        }
    }

    pub fn terminal(coords: &[u16]) -> Self {
        Self {
            kind: StateKind::Terminal,
            coords: SmallVec::from_slice(coords),
        }
    }

    pub fn final_state() -> Self {
        Self {
            kind: StateKind::Final,
            coords: SmallVec::new(),
        }
    }

    pub fn coords(&self) -> &[u16] {
        &self.coords
    }

    pub fn kind(&self) -> StateKind {
        self.kind
    }

    pub fn is_terminal(&self) -> bool {
        self.kind == StateKind::Terminal
    }

    pub fn is_final(&self) -> bool {
        self.kind == StateKind::Final
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_final() {
            return write!(f, "s_f");
        }
        write!(f, "(")?;
        for (i, c) in self.coords.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")?;
        if self.is_terminal() {
            write!(f, "^T")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypergrid {
    dims: usize,
    side: usize,
    r0: f64,
}

impl Hypergrid {
    pub fn new(dims: usize, side: usize, r0: f64) -> Result<Self, EnvError> {
        if dims == 0 {
            return Err(EnvError::InvalidSpec("dims must be at least 1".into()));
        }
        if side < 2 || side > u16::MAX as usize {
            return Err(EnvError::InvalidSpec(format!("side {side} out of range")));
        }
        if !(r0 > 0.0 && r0.is_finite()) {
            return Err(EnvError::InvalidSpec(format!("r0 must be positive, got {r0}")));
        }
        Ok(Self { dims, side, r0 })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn r0(&self) -> f64 {
        self.r0
    }

    pub fn num_interior_states(&self) -> u128 {
        (self.side as u128).saturating_pow(self.dims as u32)
    }

    fn dist_from_center(&self, c: u16) -> f64 {
        (c as f64 / (self.side - 1) as f64 - 0.5).abs()
    }

    fn plateau(&self, c: u16) -> bool {
        let r = self.dist_from_center(c);
        r > 0.25 && r <= 0.5
    }

    fn peak(&self, c: u16) -> bool {
        let r = self.dist_from_center(c);
        r > 0.3 && r < 0.4
    }

    /// Terminal states where every coordinate hits the sharp reward band.
    pub fn modes(&self) -> BTreeSet<State> {
        let per_dim: Vec<u16> = (0..self.side as u16).filter(|&c| self.peak(c)).collect();
        let mut out = BTreeSet::new();
        if per_dim.is_empty() {
            return out;
        }
        let mut idx = vec![0usize; self.dims];
        loop {
            let coords: Vec<u16> = idx.iter().map(|&i| per_dim[i]).collect();
            out.insert(State::terminal(&coords));
            let mut d = 0;
            loop {
                if d == self.dims {
                    return out;
                }
                idx[d] += 1;
                if idx[d] < per_dim.len() {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
    }

    fn check_open(&self, s: &State) -> Result<(), EnvError> {
        if s.kind != StateKind::Interior {
            return Err(EnvError::TerminalInput(s.to_string()));
        }
        debug_assert_eq!(s.coords.len(), self.dims);
        Ok(())
    }
}

impl Environment for Hypergrid {
    type State = State;

    fn num_actions(&self) -> usize {
        self.dims + 1
    }

    fn initial_state(&self) -> State {
        State::interior(&vec![0; self.dims])
    }

    fn final_state(&self) -> State {
        State::final_state()
    }

    fn is_terminal(&self, s: &State) -> bool {
        s.is_terminal()
    }

    fn is_final(&self, s: &State) -> bool {
        s.is_final()
    }

    fn valid_actions(&self, s: &State) -> Result<Vec<bool>, EnvError> {
        self.check_open(s)?;
        let mut mask: Vec<bool> = s
            .coords
            .iter()
            .map(|&c| (c as usize) + 2 <= self.side)
            .collect();
        mask.push(true);
        Ok(mask)
    }

    fn step(&self, s: &State, action: usize) -> Result<State, EnvError> {
        if s.is_terminal() && action == self.stop_action() {
            return Ok(State::final_state());
        }
        self.check_open(s)?;
        if action == self.dims {
            return Ok(State {
                kind: StateKind::Terminal,
                coords: s.coords.clone(),
            });
        }
        if action > self.dims || s.coords[action] as usize + 1 >= self.side {
            return Err(EnvError::InvalidAction {
                state: s.to_string(),
                action,
            });
        }
        let mut next = s.clone();
        next.coords[action] += 1;
        Ok(next)
    }

    fn parents(&self, s: &State) -> Result<Vec<(State, usize)>, EnvError> {
        match s.kind {
            StateKind::Final => Err(EnvError::TerminalInput(s.to_string())),
            StateKind::Terminal => Ok(vec![(State::interior(&s.coords), self.dims)]),
            StateKind::Interior => {
                let mut out = Vec::with_capacity(self.dims);
                for d in 0..self.dims {
                    if s.coords[d] > 0 {
                        let mut p = s.clone();
                        p.coords[d] -= 1;
                        out.push((p, d));
                    }
                }
                if out.is_empty() {
                    return Err(EnvError::NoParents);
                }
                Ok(out)
            }
        }
    }

    fn reward(&self, terminal: &State) -> Result<f64, EnvError> {
        if !terminal.is_terminal() {
            return Err(EnvError::NotTerminal(terminal.to_string()));
        }
        let plateau = terminal.coords.iter().all(|&c| self.plateau(c));
        let peak = terminal.coords.iter().all(|&c| self.peak(c));
        Ok(self.r0 + if plateau { 0.5 } else { 0.0 } + if peak { 2.0 } else { 0.0 })
    }

    fn encoding_len(&self) -> usize {
        self.dims * self.side
    }

    fn encode(&self, s: &State, out: &mut [f64]) {
        out.fill(0.0);
        for (d, &c) in s.coords.iter().enumerate() {
            out[d * self.side + c as usize] = 1.0;
        }
    }

    fn closed_form_eligible(&self) -> bool {
        // Unit increments: no e_i equals e_k + e_h, and e_i + e_h = e_m + e_n
        // with i != m forces (i, h) = (n, m).
        true
    }

    fn max_trajectory_len(&self) -> usize {
        self.dims * (self.side - 1) + 2
    }

    fn interior_states(&self, limit: u128) -> Result<Vec<State>, EnvError> {
        let n = self.num_interior_states();
        if n > limit {
            return Err(EnvError::TooLarge { states: n, limit });
        }
        let mut all: Vec<State> = Vec::with_capacity(n as usize);
        let mut coords = vec![0u16; self.dims];
        'outer: loop {
            all.push(State::interior(&coords));
            for c in coords.iter_mut() {
                *c += 1;
                if (*c as usize) < self.side {
                    continue 'outer;
                }
                *c = 0;
            }
            break;
        }
        // Coordinate sum strictly increases along every edge.
        all.sort_by_key(|s| (s.coords.iter().map(|&c| c as u32).sum::<u32>(), s.clone()));
        Ok(all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::true_distribution;

    fn grid2() -> Hypergrid {
        Hypergrid::new(2, 8, 1e-3).unwrap()
    }

    #[test]
    fn initial_state_is_origin() {
        let g = grid2();
        assert_eq!(g.initial_state(), State::interior(&[0, 0]));
        let g7 = Hypergrid::new(7, 8, 1e-3).unwrap();
        assert_eq!(g7.initial_state().coords(), &[0; 7]);
        assert_eq!(g.valid_actions(&g.initial_state()).unwrap(), vec![true; 3]);
    }

    #[test]
    fn boundary_masks() {
        let g = grid2();
        assert_eq!(
            g.valid_actions(&State::interior(&[7, 3])).unwrap(),
            vec![false, true, true]
        );
        assert_eq!(
            g.valid_actions(&State::interior(&[7, 7])).unwrap(),
            vec![false, false, true]
        );
        assert!(g.valid_actions(&State::terminal(&[1, 1])).is_err());
    }

    #[test]
    fn steps() {
        let g = grid2();
        let s = g.step(&State::interior(&[0, 0]), 0).unwrap();
        assert_eq!(s, State::interior(&[1, 0]));
        let t = g.step(&s, 2).unwrap();
        assert_eq!(t, State::terminal(&[1, 0]));
        assert_eq!(g.step(&t, 2).unwrap(), State::final_state());
        assert!(matches!(
            g.step(&State::interior(&[7, 0]), 0),
            Err(EnvError::InvalidAction { .. })
        ));
    }

    #[test]
    fn parent_enumeration() {
        let g = grid2();
        assert_eq!(
            g.parents(&State::interior(&[1, 1])).unwrap(),
            vec![(State::interior(&[0, 1]), 0), (State::interior(&[1, 0]), 1)]
        );
        assert_eq!(
            g.parents(&State::interior(&[1, 0])).unwrap(),
            vec![(State::interior(&[0, 0]), 0)]
        );
        assert_eq!(
            g.parents(&State::terminal(&[0, 0])).unwrap(),
            vec![(State::interior(&[0, 0]), 2)]
        );
        assert_eq!(g.parents(&g.initial_state()), Err(EnvError::NoParents));
    }

    #[test]
    fn reward_values() {
        let g = grid2();
        let r = |c: &[u16]| g.reward(&State::terminal(c)).unwrap();
        assert!((r(&[6, 6]) - 2.501).abs() < 1e-12);
        assert!((r(&[7, 7]) - 0.501).abs() < 1e-12);
        assert!((r(&[3, 3]) - 0.001).abs() < 1e-12);
        assert!(g.reward(&State::interior(&[3, 3])).is_err());
    }

    #[test]
    fn target_distribution_2d() {
        let g = grid2();
        let dist = true_distribution(&g, TRUE_DISTRIBUTION_LIMIT).unwrap();
        assert_eq!(dist.len(), 64);
        let z: f64 = dist
            .states()
            .iter()
            .map(|s| g.reward(s).unwrap())
            .sum();
        assert!((z - 16.064).abs() < 1e-9);
        assert!((dist.prob(&State::terminal(&[1, 6])) - 2.501 / 16.064).abs() < 1e-12);
        let total: f64 = dist.probs().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_large_grid_is_rejected() {
        let g = Hypergrid::new(8, 8, 1e-3).unwrap();
        assert!(matches!(
            true_distribution(&g, TRUE_DISTRIBUTION_LIMIT),
            Err(EnvError::TooLarge { .. })
        ));
    }

    #[test]
    fn mode_sets() {
        let g = grid2();
        let modes: Vec<State> = g.modes().into_iter().collect();
        let expected: BTreeSet<State> = [[1, 1], [1, 6], [6, 1], [6, 6]]
            .iter()
            .map(|c| State::terminal(c))
            .collect();
        assert_eq!(modes.len(), 4);
        assert_eq!(g.modes(), expected);
        for m in &modes {
            assert!((g.reward(m).unwrap() - 2.501).abs() < 1e-12);
        }
        assert_eq!(Hypergrid::new(4, 8, 1e-3).unwrap().modes().len(), 16);
    }

    #[test]
    fn children_of_terminal_is_final() {
        let g = grid2();
        assert_eq!(
            g.children(&State::terminal(&[2, 2])).unwrap(),
            vec![(2, State::final_state())]
        );
    }

    #[test]
    fn bad_specs() {
        assert!(Hypergrid::new(0, 8, 1e-3).is_err());
        assert!(Hypergrid::new(2, 1, 1e-3).is_err());
        assert!(Hypergrid::new(2, 8, 0.0).is_err());
    }
}
