//! Optimal-transport path regularization.
//!
//! For an edge `s -> s'` of a sampled trajectory the regularizer compares the
//! forward policies `P_F(.|s)` and `P_F(.|s')` with a transport cost built
//! from directed distances inside the local sub-graph `{s, s', children}`.
//! The per-edge value is either the exact OT distance (LP, Sinkhorn, or the
//! closed form available on environments with unit-like action algebras) or
//! its cross-entropy upper bound.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::ot::{exact_ot, sinkhorn, SinkhornConfig};
use crate::policy::PolicyEval;
use crate::tb::TrajectorySample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegMode {
    None,
    /// Add `lambda * L_OT` (smoother policies along trajectories).
    Min,
    /// Subtract `lambda * L_OT`.
    Max,
    /// Add `lambda` times the cross-entropy upper bound.
    Ub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OtMethod {
    Closed,
    Sinkhorn,
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub mode: RegMode,
    /// Ignored when `mode` is `Ub`.
    pub method: OtMethod,
    pub lambda: f64,
    /// Probability of keeping each edge; `1.0` disables dropout.
    pub dropout_p: f64,
    pub sinkhorn: SinkhornConfig,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            mode: RegMode::None,
            method: OtMethod::Closed,
            lambda: 0.02,
            dropout_p: 1.0,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.dropout_p > 0.0 && self.dropout_p <= 1.0) {
            return Err(Error::Config(format!(
                "dropout probability must be in (0, 1], got {}",
                self.dropout_p
            )));
        }
        if self.method == OtMethod::Sinkhorn && !(self.sinkhorn.epsilon > 0.0) {
            return Err(Error::Config("sinkhorn epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Whether the regularizer contributes anything to the loss.
    pub fn is_active(&self) -> bool {
        self.mode != RegMode::None && self.lambda != 0.0
    }
}

/// Children of `s` and `s'` indexed by action id, as in the closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedNeighborhood<S> {
    pub source: S,
    pub target: S,
    /// The action taking `source` to `target`.
    pub action: usize,
    /// `u_i = step(source, i)`, `None` where `i` is invalid.
    pub source_children: Vec<Option<S>>,
    /// `v_i = step(target, i)`, `None` where `i` is invalid.
    pub target_children: Vec<Option<S>>,
}

impl<S: Clone + PartialEq + std::fmt::Debug> AlignedNeighborhood<S> {
    pub fn new<E: Environment<State = S>>(env: &E, s: &S, s_next: &S) -> Result<Self> {
        let aligned = |x: &S| -> Result<Vec<Option<S>>> {
            let mut out = vec![None; env.num_actions()];
            for (a, c) in env.children(x)? {
                out[a] = Some(c);
            }
            Ok(out)
        };
        if env.is_terminal(s) || env.is_final(s) || env.is_final(s_next) {
            return Err(Error::NotAChild(format!("{s_next:?}"), format!("{s:?}")));
        }
        let source_children = aligned(s)?;
        let action = source_children
            .iter()
            .position(|c| c.as_ref() == Some(s_next))
            .ok_or_else(|| Error::NotAChild(format!("{s_next:?}"), format!("{s:?}")))?;
        Ok(Self {
            source: s.clone(),
            target: s_next.clone(),
            action,
            target_children: aligned(s_next)?,
            source_children,
        })
    }

    fn rows(&self) -> impl Iterator<Item = (usize, &S)> {
        flatten(&self.source_children)
    }

    fn cols(&self) -> impl Iterator<Item = (usize, &S)> {
        flatten(&self.target_children)
    }
}

fn flatten<S>(v: &[Option<S>]) -> impl Iterator<Item = (usize, &S)> {
    v.iter().enumerate().filter_map(|(a, c)| c.as_ref().map(|c| (a, c)))
}

/// Directed-distance costs between the children of `s` (rows) and the
/// children of `s'` (columns), as graph nodes.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub entries: Vec<Var>,
}

impl CostMatrix {
    pub fn values(&self, g: &Graph) -> Vec<f64> {
        self.entries.iter().map(|&v| g.item(v)).collect()
    }
}

fn direct_action<E: Environment>(env: &E, from: &E::State, to: &E::State) -> Result<Option<usize>> {
    Ok(env
        .children(from)?
        .into_iter()
        .find(|(_, c)| c == to)
        .map(|(a, _)| a))
}

/// Cost between child `u_i` of `s` and child `v_j` of `s'`:
///
/// * `0` when they coincide,
/// * `min(back-and-forth, -log P_F(v_j|u_i))` when the edge `u_i -> v_j` exists,
/// * the back-and-forth length `-log(P_B(s|u_i) P_F(s'|s) P_F(v_j|s'))` otherwise.
pub fn cost_matrix<E: Environment>(
    g: &mut Graph,
    eval: &mut PolicyEval<E::State>,
    env: &E,
    nbhd: &AlignedNeighborhood<E::State>,
) -> Result<CostMatrix> {
    let (s, t) = (&nbhd.source, &nbhd.target);
    let step = eval.log_pf(g, env, s, nbhd.action)?;
    let rows: Vec<(usize, E::State)> = nbhd.rows().map(|(a, u)| (a, u.clone())).collect();
    let cols: Vec<(usize, E::State)> = nbhd.cols().map(|(a, v)| (a, v.clone())).collect();
    let mut entries = Vec::with_capacity(rows.len() * cols.len());
    for (a, u) in &rows {
        let back = eval.log_pb(g, env, u, *a)?;
        for (b, v) in &cols {
            if u == v {
                entries.push(g.scalar(0.0));
                continue;
            }
            let onward = eval.log_pf(g, env, t, *b)?;
            let loop_len = g.weighted_sum(&[(back, -1.0), (step, -1.0), (onward, -1.0)]);
            let cost = match direct_action(env, u, v)? {
                Some(d) => {
                    let lp = eval.log_pf(g, env, u, d)?;
                    let direct = g.neg(lp);
                    g.min(loop_len, direct)
                }
                None => loop_len,
            };
            entries.push(cost);
        }
    }
    Ok(CostMatrix {
        rows: rows.len(),
        cols: cols.len(),
        entries,
    })
}

/// `P*_B(u_i|s) = P_B(s|u_i)` over the children of `s`, in action order.
/// Not normalized in general.
pub fn pseudo_backward<E: Environment>(
    g: &mut Graph,
    eval: &mut PolicyEval<E::State>,
    env: &E,
    s: &E::State,
) -> Result<Vec<Var>> {
    env.children(s)?
        .into_iter()
        .map(|(a, u)| {
            let lp = eval.log_pb(g, env, &u, a)?;
            Ok(g.exp(lp))
        })
        .collect()
}

/// Forward probabilities and clamped log-probabilities over the children of `x`.
fn forward_row<E: Environment>(
    g: &mut Graph,
    eval: &mut PolicyEval<E::State>,
    env: &E,
    x: &E::State,
    children: &[Option<E::State>],
) -> Result<Vec<(usize, Var, Var)>> {
    flatten(children)
        .map(|(a, _)| Ok((a, eval.pf(g, env, x, a)?, eval.log_pf(g, env, x, a)?)))
        .collect()
}

fn entropy(g: &mut Graph, row: &[(usize, Var, Var)]) -> Var {
    let terms: Vec<Var> = row.iter().map(|&(_, p, lp)| g.mul(p, lp)).collect();
    let s = g.sum(&terms);
    g.neg(s)
}

/// `H(P_F(.|s), P*_B(.|s)) - log P_F(s'|s) + H(P_F(.|s'))`.
fn upper_bound_parts<E: Environment>(
    g: &mut Graph,
    eval: &mut PolicyEval<E::State>,
    env: &E,
    nbhd: &AlignedNeighborhood<E::State>,
) -> Result<Var> {
    let (s, t) = (&nbhd.source, &nbhd.target);
    let src = forward_row(g, eval, env, s, &nbhd.source_children)?;
    let mut cross = Vec::with_capacity(src.len());
    for &(a, p, _) in &src {
        let u = nbhd.source_children[a].as_ref().expect("valid child");
        let lb = eval.log_pb(g, env, u, a)?;
        cross.push(g.mul(p, lb));
    }
    let cross = g.sum(&cross);
    let step = eval.log_pf(g, env, s, nbhd.action)?;
    let mut terms = vec![(cross, -1.0), (step, -1.0)];
    if !env.is_terminal(t) {
        let dst = forward_row(g, eval, env, t, &nbhd.target_children)?;
        terms.push((entropy(g, &dst), 1.0));
    }
    Ok(g.weighted_sum(&terms))
}

/// Cross-entropy upper bound on the OT distance of one edge.
pub fn upper_bound_edge<E: Environment>(
    g: &mut Graph,
    eval: &mut PolicyEval<E::State>,
    env: &E,
    s: &E::State,
    s_next: &E::State,
) -> Result<Var> {
    let nbhd = AlignedNeighborhood::new(env, s, s_next)?;
    upper_bound_parts(g, eval, env, &nbhd)
}

/// Exact OT distance of one edge without solving an LP.
///
/// Equals the upper bound plus `P_F(s'|s) (log P_B(s|s') + log P_F(s'|s))`
/// plus, for every non-stop action `i != a*` valid at both ends,
/// `min(P_F(u_i|s), P_F(v_i|s')) * c'_i` with
/// `c'_i = min(0, log P_B(s|u_i) + log P_F(s'|s) + log P_F(v_i|s') - log P_F(v_i|u_i))`.
pub fn closed_form_ot<E: Environment>(
    g: &mut Graph,
    eval: &mut PolicyEval<E::State>,
    env: &E,
    nbhd: &AlignedNeighborhood<E::State>,
) -> Result<Var> {
    if !env.closed_form_eligible() {
        return Err(Error::ClosedFormIneligible);
    }
    let (s, t, star) = (&nbhd.source, &nbhd.target, nbhd.action);
    let bound = upper_bound_parts(g, eval, env, nbhd)?;
    let step_p = eval.pf(g, env, s, star)?;
    let step = eval.log_pf(g, env, s, star)?;
    let back = eval.log_pb(g, env, t, star)?;
    let inner = g.add(back, step);
    let stay = g.mul(step_p, inner);
    let mut terms = vec![bound, stay];
    if !env.is_terminal(t) {
        let stop = env.stop_action();
        for i in 0..env.num_actions() {
            if i == star || i == stop {
                continue;
            }
            let (Some(u), Some(v)) = (&nbhd.source_children[i], &nbhd.target_children[i]) else {
                continue;
            };
            let Some(d) = direct_action(env, u, v)? else {
                continue;
            };
            let lb = eval.log_pb(g, env, u, i)?;
            let onward = eval.log_pf(g, env, t, i)?;
            let direct = eval.log_pf(g, env, u, d)?;
            let gap = g.weighted_sum(&[(lb, 1.0), (step, 1.0), (onward, 1.0), (direct, -1.0)]);
            let zero = g.scalar(0.0);
            let c = g.min(zero, gap);
            let pu = eval.pf(g, env, s, i)?;
            let pv = eval.pf(g, env, t, i)?;
            let shared = g.min(pu, pv);
            terms.push(g.mul(shared, c));
        }
    }
    Ok(g.sum(&terms))
}

/// OT distance between `P_F(.|s)` and `P_F(.|s')` by the chosen method.
///
/// Exact and Sinkhorn plans are treated as constants; gradients flow through
/// the cost entries only.
pub fn edge_ot<E: Environment>(
    g: &mut Graph,
    eval: &mut PolicyEval<E::State>,
    env: &E,
    s: &E::State,
    s_next: &E::State,
    method: OtMethod,
    sinkhorn_config: &SinkhornConfig,
) -> Result<Var> {
    let nbhd = AlignedNeighborhood::new(env, s, s_next)?;
    if method == OtMethod::Closed {
        return closed_form_ot(g, eval, env, &nbhd);
    }
    let cost = cost_matrix(g, eval, env, &nbhd)?;
    let alpha: Vec<f64> = forward_row(g, eval, env, s, &nbhd.source_children)?
        .iter()
        .map(|&(_, p, _)| g.item(p))
        .collect();
    let beta: Vec<f64> = forward_row(g, eval, env, s_next, &nbhd.target_children)?
        .iter()
        .map(|&(_, p, _)| g.item(p))
        .collect();
    let values = cost.values(g);
    let plan = match method {
        OtMethod::Exact => exact_ot(&alpha, &beta, &values)?.1,
        OtMethod::Sinkhorn => sinkhorn(&alpha, &beta, &values, sinkhorn_config)?.plan,
        OtMethod::Closed => unreachable!(),
    };
    let terms: Vec<(Var, f64)> = cost
        .entries
        .iter()
        .zip(plan.data())
        .filter(|(_, &w)| w != 0.0)
        .map(|(&c, &w)| (c, w))
        .collect();
    Ok(g.weighted_sum(&terms))
}

fn edge_value<E: Environment>(
    g: &mut Graph,
    eval: &mut PolicyEval<E::State>,
    env: &E,
    s: &E::State,
    s_next: &E::State,
    cfg: &RegularizerConfig,
) -> Result<Var> {
    match cfg.mode {
        RegMode::Ub => upper_bound_edge(g, eval, env, s, s_next),
        _ => edge_ot(g, eval, env, s, s_next, cfg.method, &cfg.sinkhorn),
    }
}

/// Sum of per-edge values over the trajectory, skipping the edge into `s_f`.
///
/// With `dropout_p < 1` each edge is kept independently with probability
/// `dropout_p` (drawn from `rng`) and kept edges are scaled by `1 / dropout_p`.
/// `rng` is not touched when dropout is off.
pub fn path_reg_loss<E: Environment, R: Rng + ?Sized>(
    g: &mut Graph,
    eval: &mut PolicyEval<E::State>,
    env: &E,
    sample: &TrajectorySample<E::State>,
    cfg: &RegularizerConfig,
    rng: &mut R,
) -> Result<Var> {
    if cfg.mode == RegMode::None {
        return Ok(g.scalar(0.0));
    }
    let dropout = cfg.dropout_p < 1.0;
    let weight = 1.0 / cfg.dropout_p;
    let mut terms = Vec::new();
    for w in sample.states.windows(2) {
        if env.is_final(&w[1]) {
            continue;
        }
        if dropout && !rng.gen_bool(cfg.dropout_p) {
            continue;
        }
        terms.push((edge_value(g, eval, env, &w[0], &w[1], cfg)?, weight));
    }
    Ok(g.weighted_sum(&terms))
}

/// States whose network outputs the losses for `sample` need: the trajectory
/// itself, plus the children of its interior states when the regularizer is on.
pub fn required_states<E: Environment>(
    env: &E,
    sample: &TrajectorySample<E::State>,
    cfg: &RegularizerConfig,
) -> Result<Vec<E::State>> {
    let mut out: Vec<E::State> = sample.states.clone();
    if cfg.is_active() {
        for s in &sample.states {
            if env.is_terminal(s) || env.is_final(s) {
                continue;
            }
            out.extend(env.children(s)?.into_iter().map(|(_, c)| c));
        }
    }
    Ok(out)
}

/// Loss terms of one trajectory.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub tb: Var,
    pub reg: Var,
}

/// `L_TB + lambda * L_reg` (`-` for [`RegMode::Max`]). When the regularizer
/// is inactive it is not evaluated at all and `reg` is a zero constant.
pub fn combined_loss<E: Environment, R: Rng + ?Sized>(
    g: &mut Graph,
    eval: &mut PolicyEval<E::State>,
    env: &E,
    sample: &TrajectorySample<E::State>,
    cfg: &RegularizerConfig,
    rng: &mut R,
) -> Result<LossParts> {
    let tb = crate::tb::tb_loss(g, eval, env, sample)?;
    if !cfg.is_active() {
        let reg = g.scalar(0.0);
        return Ok(LossParts { total: tb, tb, reg });
    }
    let reg = path_reg_loss(g, eval, env, sample, cfg, rng)?;
    let sign = if cfg.mode == RegMode::Max { -1.0 } else { 1.0 };
    let total = g.weighted_sum(&[(tb, 1.0), (reg, sign * cfg.lambda)]);
    Ok(LossParts { total, tb, reg })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::env::{Hypergrid, State};
    use crate::policy::{PolicyConfig, PolicyModel};

    fn uniform_setup() -> (Hypergrid, PolicyModel) {
        let env = Hypergrid::new(2, 8, 1e-3).unwrap();
        let model = PolicyModel::new(&env, PolicyConfig { hidden: 8, ..Default::default() }, 0);
        (env, model)
    }

    fn with_eval<T>(
        env: &Hypergrid,
        model: &PolicyModel,
        states: &[State],
        f: impl FnOnce(&mut Graph, &mut PolicyEval<State>) -> T,
    ) -> T {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let mut all = states.to_vec();
        for s in states {
            if !s.is_terminal() && !s.is_final() {
                all.extend(env.children(s).unwrap().into_iter().map(|(_, c)| c));
            }
        }
        let mut eval = PolicyEval::new(&mut g, model, &bound, env, all).unwrap();
        f(&mut g, &mut eval)
    }

    #[test]
    fn worked_costs_at_uniform_policy() {
        let (env, model) = uniform_setup();
        let s = State::interior(&[0, 0]);
        let t = State::interior(&[1, 0]);
        let c = with_eval(&env, &model, &[s.clone(), t.clone()], |g, eval| {
            let nb = AlignedNeighborhood::new(&env, &s, &t).unwrap();
            let c = cost_matrix(g, eval, &env, &nb).unwrap();
            assert_eq!((c.rows, c.cols), (3, 3));
            c.values(g)
        });
        // rows (1,0) (0,1) (0,0)^T ; cols (2,0) (1,1) (1,0)^T
        let (l3, l9) = (3f64.ln(), 9f64.ln());
        assert!((c[1 * 3 + 1] - l3).abs() < 1e-12);
        assert!((c[2 * 3 + 1] - l9).abs() < 1e-12);
        // row of s' itself: direct edges to all of its children
        for j in 0..3 {
            assert!((c[j] - l3).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_backward_at_origin_is_unnormalized() {
        let (env, model) = uniform_setup();
        let s = State::interior(&[0, 0]);
        let p = with_eval(&env, &model, std::slice::from_ref(&s), |g, eval| {
            pseudo_backward(g, eval, &env, &s)
                .unwrap()
                .iter()
                .map(|&v| g.item(v))
                .collect::<Vec<_>>()
        });
        assert_eq!(p, vec![1.0, 1.0, 1.0]);
        let s = State::interior(&[1, 0]);
        let p = with_eval(&env, &model, std::slice::from_ref(&s), |g, eval| {
            pseudo_backward(g, eval, &env, &s)
                .unwrap()
                .iter()
                .map(|&v| g.item(v))
                .collect::<Vec<_>>()
        });
        // (2,0) has one parent, (1,1) two, (1,0)^T one
        assert!((p[1] - 0.5).abs() < 1e-15);
        assert_eq!((p[0], p[2]), (1.0, 1.0));
    }

    #[test]
    fn upper_bound_worked_value() {
        let (env, model) = uniform_setup();
        let s = State::interior(&[0, 0]);
        let t = State::interior(&[1, 0]);
        let ub = with_eval(&env, &model, &[s.clone(), t.clone()], |g, eval| {
            let v = upper_bound_edge(g, eval, &env, &s, &t).unwrap();
            g.item(v)
        });
        assert!((ub - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn closed_form_matches_exact_at_uniform_policy() {
        let (env, model) = uniform_setup();
        let s = State::interior(&[0, 0]);
        for t in [State::interior(&[1, 0]), State::terminal(&[0, 0])] {
            let (c, e) = with_eval(&env, &model, &[s.clone(), t.clone()], |g, eval| {
                let cfg = SinkhornConfig::default();
                let c = edge_ot(g, eval, &env, &s, &t, OtMethod::Closed, &cfg).unwrap();
                let e = edge_ot(g, eval, &env, &s, &t, OtMethod::Exact, &cfg).unwrap();
                (g.item(c), g.item(e))
            });
            assert!((c - e).abs() < 1e-8, "{t}: closed {c} exact {e}");
        }
    }

    #[test]
    fn rejects_non_child() {
        let env = Hypergrid::new(2, 8, 1e-3).unwrap();
        let r = AlignedNeighborhood::new(&env, &State::interior(&[0, 0]), &State::interior(&[1, 1]));
        assert!(matches!(r, Err(Error::NotAChild(..))));
    }

    #[test]
    fn config_validation() {
        let mut c = RegularizerConfig::default();
        assert!(c.validate().is_ok());
        c.dropout_p = 0.0;
        assert!(c.validate().is_err());
        c.dropout_p = 1.0;
        c.lambda = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn inactive_regularizer_equals_tb() {
        let (env, model) = uniform_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sample = crate::tb::sample_trajectory(&model, &env, 0.0, &mut rng).unwrap();
        for cfg in [
            RegularizerConfig { lambda: 0.0, mode: RegMode::Min, ..Default::default() },
            RegularizerConfig::default(),
        ] {
            let (total, tb) = with_eval(&env, &model, &sample.states, |g, eval| {
                let parts = combined_loss(g, eval, &env, &sample, &cfg, &mut rng).unwrap();
                (g.item(parts.total), g.item(parts.tb))
            });
            assert_eq!(total, tb);
        }
    }
}
