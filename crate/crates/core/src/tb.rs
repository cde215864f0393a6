//! Trajectory sampling under the exploration mixture and the
//! trajectory-balance loss.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::autodiff::{Graph, Var, LOG_PROB_FLOOR};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::policy::{PolicyEval, PolicyModel};

/// One complete trajectory `s_0 -> ... -> x -> x^T -> s_f`.
///
/// `actions[t]`, `log_pf[t]` and `log_pb[t]` describe the transition from
/// `states[t]` to `states[t + 1]`. Log-probabilities are the model's own
/// (clamped) values at sampling time, not the exploration mixture's.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample<S> {
    pub states: Vec<S>,
    pub actions: Vec<usize>,
    pub log_pf: Vec<f64>,
    pub log_pb: Vec<f64>,
    pub reward: f64,
    /// `sum(log_pf)`.
    pub log_prob: f64,
}

impl<S> TrajectorySample<S> {
    /// The stopped state `x^T`.
    pub fn terminal(&self) -> &S {
        &self.states[self.states.len() - 2]
    }

    /// Number of transitions, including the final one into `s_f`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Samples one trajectory from `(1 - explore) * P_F + explore * Uniform`.
pub fn sample_trajectory<E: Environment, R: Rng + ?Sized>(
    model: &PolicyModel,
    env: &E,
    explore: f64,
    rng: &mut R,
) -> Result<TrajectorySample<E::State>> {
    Ok(sample_batch(model, env, explore, 1, rng)?.pop().expect("one sample"))
}

/// Samples `n` trajectories in lockstep, evaluating the network once per
/// depth for all unfinished trajectories. Random draws are consumed in
/// trajectory order at each depth.
pub fn sample_batch<E: Environment, R: Rng + ?Sized>(
    model: &PolicyModel,
    env: &E,
    explore: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<TrajectorySample<E::State>>> {
    if !(0.0..=1.0).contains(&explore) {
        return Err(Error::Config(format!("exploration rate {explore} outside [0, 1]")));
    }
    let s0 = env.initial_state();
    let mut states: Vec<Vec<E::State>> = vec![vec![s0]; n];
    let mut actions: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut log_pf: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut open: Vec<usize> = (0..n).collect();
    while !open.is_empty() {
        let current: Vec<E::State> = open
            .iter()
            .map(|&t| states[t].last().expect("nonempty").clone())
            .collect();
        let logp = model.forward_policy_batch(env, &current)?;
        let mut still_open = Vec::with_capacity(open.len());
        for ((&t, s), lp) in open.iter().zip(&current).zip(&logp) {
            let valid = lp.iter().filter(|x| x.is_finite()).count() as f64;
            let weights: Vec<f64> = lp
                .iter()
                .map(|&l| {
                    if l.is_finite() {
                        (1.0 - explore) * l.exp() + explore / valid
                    } else {
                        0.0
                    }
                })
                .collect();
            let a = WeightedIndex::new(&weights)
                .map_err(|e| Error::Config(format!("sampling weights at {s:?}: {e}")))?
                .sample(rng);
            let next = env.step(s, a)?;
            actions[t].push(a);
            log_pf[t].push(lp[a].max(LOG_PROB_FLOOR));
            let stopped = env.is_terminal(&next);
            states[t].push(next);
            if !stopped {
                still_open.push(t);
            }
        }
        open = still_open;
    }

    // backward log-probs for every learned transition, in one network pass
    let mut queries: Vec<E::State> = Vec::new();
    for st in &states {
        queries.extend(st[1..st.len() - 1].iter().cloned());
    }
    let mut backward = model.backward_policy_batch(env, &queries)?.into_iter();

    let mut out = Vec::with_capacity(n);
    for ((mut st, mut acts), mut pf) in states.into_iter().zip(actions).zip(log_pf) {
        let terminal = st.last().expect("stopped").clone();
        let reward = env.reward(&terminal)?;
        let mut pb = Vec::with_capacity(acts.len() + 1);
        for t in 0..acts.len() - 1 {
            let child = &st[t + 1];
            let k = env
                .parents(child)?
                .iter()
                .position(|(p, a)| p == &st[t] && *a == acts[t])
                .expect("sampled parent is a parent");
            let lb = backward.next().expect("one row per transition");
            pb.push(lb[k].max(LOG_PROB_FLOOR));
        }
        // x -> x^T and x^T -> s_f both have a single parent
        pb.extend([0.0, 0.0]);
        acts.push(env.stop_action());
        pf.push(0.0);
        st.push(env.final_state());
        let log_prob = pf.iter().sum();
        out.push(TrajectorySample {
            states: st,
            actions: acts,
            log_pf: pf,
            log_pb: pb,
            reward,
            log_prob,
        });
    }
    Ok(out)
}

/// `(log Z + sum log P_F - log R(x) - sum log P_B)^2`, recomputed from the
/// graph so gradients reach both policies and `log Z`.
pub fn tb_loss<E: Environment>(
    g: &mut Graph,
    eval: &mut PolicyEval<E::State>,
    env: &E,
    sample: &TrajectorySample<E::State>,
) -> Result<Var> {
    if !(sample.reward > 0.0) {
        return Err(Error::NonPositiveReward(sample.reward));
    }
    let mut terms: Vec<(Var, f64)> = vec![(eval.log_z(), 1.0)];
    for t in 0..sample.len() {
        let (s, next, a) = (&sample.states[t], &sample.states[t + 1], sample.actions[t]);
        if env.is_final(next) {
            continue;
        }
        terms.push((eval.log_pf(g, env, s, a)?, 1.0));
        if !env.is_terminal(next) {
            terms.push((eval.log_pb(g, env, next, a)?, -1.0));
        }
    }
    let balance = g.weighted_sum(&terms);
    let residual = g.add_scalar(balance, -sample.reward.ln());
    Ok(g.square(residual))
}
