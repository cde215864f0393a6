#![allow(dead_code)]

use gfn_pathreg::autodiff::Graph;
use gfn_pathreg::env::{Environment, Hypergrid, State};
use gfn_pathreg::policy::{PolicyConfig, PolicyEval, PolicyModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small network with every weight drawn uniformly from `[-scale, scale]`,
/// so both policies are far from uniform.
pub fn random_model(env: &Hypergrid, seed: u64, scale: f64) -> PolicyModel {
    let mut model = PolicyModel::new(env, PolicyConfig { hidden: 16, ..Default::default() }, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in model.layers_mut() {
        for x in t.data_mut() {
            *x = rng.gen_range(-scale..scale);
        }
    }
    model.set_log_total_flow(rng.gen_range(-1.0..3.0));
    model
}

/// A uniformly random interior state and one of its children (possibly the
/// stopped state).
pub fn random_edge(env: &Hypergrid, rng: &mut impl Rng) -> (State, State) {
    let coords: Vec<u16> = (0..env.dims())
        .map(|_| rng.gen_range(0..env.side() as u16))
        .collect();
    let s = State::interior(&coords);
    let kids = env.children(&s).unwrap();
    let (_, t) = kids[rng.gen_range(0..kids.len())].clone();
    (s, t)
}

/// Graph with a policy evaluation covering `states` and their children.
pub fn eval_for(
    env: &Hypergrid,
    model: &PolicyModel,
    states: &[State],
) -> (Graph, PolicyEval<State>) {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut all = states.to_vec();
    for s in states {
        if !s.is_terminal() && !s.is_final() {
            all.extend(env.children(s).unwrap().into_iter().map(|(_, c)| c));
        }
    }
    let eval = PolicyEval::new(&mut g, model, &bound, env, all).unwrap();
    (g, eval)
}

/// LP optimum of the transport problem by brute force over basic solutions:
/// every set of `k + l - 1` cells that spans the bipartite row/column graph
/// is solved by peeling leaves, and the cheapest nonnegative one wins.
/// Only meant for tiny instances.
pub fn vertex_enumeration_ot(alpha: &[f64], beta: &[f64], cost: &[f64]) -> f64 {
    let (k, l) = (alpha.len(), beta.len());
    let cells = k * l;
    let basis = k + l - 1;
    assert!(cells <= 25, "too large for enumeration");
    let mut best = f64::INFINITY;
    let mut chosen: Vec<usize> = (0..basis).collect();
    loop {
        if let Some(flow) = basic_solution(k, l, alpha, beta, &chosen) {
            if flow.iter().all(|&(_, x)| x >= -1e-12) {
                let v: f64 = flow.iter().map(|&(c, x)| cost[c] * x).sum();
                best = best.min(v);
            }
        }
        // next combination in lexicographic order
        let mut i = basis;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if chosen[i] < cells - basis + i {
                chosen[i] += 1;
                for j in i + 1..basis {
                    chosen[j] = chosen[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn basic_solution(
    k: usize,
    l: usize,
    alpha: &[f64],
    beta: &[f64],
    chosen: &[usize],
) -> Option<Vec<(usize, f64)>> {
    let mut rem_row = alpha.to_vec();
    let mut rem_col = beta.to_vec();
    let mut open: Vec<usize> = chosen.to_vec();
    let mut flow = Vec::with_capacity(chosen.len());
    while !open.is_empty() {
        let mut progressed = false;
        for node in 0..k + l {
            let incident: Vec<usize> = open
                .iter()
                .copied()
                .filter(|&c| if node < k { c / l == node } else { c % l == node - k })
                .collect();
            if incident.len() != 1 {
                continue;
            }
            let c = incident[0];
            let x = if node < k { rem_row[node] } else { rem_col[node - k] };
            rem_row[c / l] -= x;
            rem_col[c % l] -= x;
            flow.push((c, x));
            open.retain(|&o| o != c);
            progressed = true;
        }
        if !progressed {
            // a cycle among the chosen cells: not a basis
            return None;
        }
    }
    let slack = rem_row.iter().chain(&rem_col).fold(0.0f64, |m, r| m.max(r.abs()));
    // every node must be covered; an uncovered node with mass is infeasible
    (slack < 1e-9).then_some(flow)
}

/// Random probability vector of length `n` with an occasional exact zero.
pub fn random_simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.01..1.0) })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        w[0] = 1.0;
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// A random two-hidden-layer MLP problem with a masked log-softmax head.
pub struct MlpCase {
    pub params: Vec<gfn_pathreg::autodiff::Tensor>,
    pub input: gfn_pathreg::autodiff::Tensor,
    pub mask: Vec<bool>,
    pub coef: Vec<f64>,
}

/// Distance every hidden pre-activation keeps from the leaky-ReLU kink, so
/// that a central difference with a small step never straddles it.
const KINK_MARGIN: f64 = 1e-3;

/// A random MLP instance; parameters are redrawn until no hidden unit sits
/// within [`KINK_MARGIN`] of zero.
pub fn mlp_case(seed: u64) -> MlpCase {
    use gfn_pathreg::autodiff::Tensor;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, h, o) = (
        rng.gen_range(1..4),
        rng.gen_range(2..6),
        rng.gen_range(3..9),
        rng.gen_range(2..5),
    );
    let mut mask: Vec<bool> = (0..n * o).map(|_| rng.gen_bool(0.7)).collect();
    for r in 0..n {
        mask[r * o] = true;
    }
    let coef = (0..n * o).map(|_| rng.gen_range(-1.0..1.0)).collect();
    loop {
        let mut t = |shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let params = vec![t(&[d, h]), t(&[h]), t(&[h, h]), t(&[h]), t(&[h, o]), t(&[o])];
        let input = t(&[n, d]);
        if hidden_preactivations(&params, input.data(), n)
            .iter()
            .all(|z| z.abs() >= KINK_MARGIN)
        {
            return MlpCase {
                params,
                input,
                mask: mask.clone(),
                coef,
            };
        }
    }
}

/// Plain forward pass through the two hidden layers.
fn hidden_preactivations(params: &[gfn_pathreg::autodiff::Tensor], x: &[f64], n: usize) -> Vec<f64> {
    let affine = |x: &[f64], w: &gfn_pathreg::autodiff::Tensor, b: &gfn_pathreg::autodiff::Tensor| {
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        let mut z = vec![0.0; n * fan_out];
        for r in 0..n {
            for j in 0..fan_out {
                z[r * fan_out + j] = b.data()[j]
                    + (0..fan_in).map(|i| x[r * fan_in + i] * w.data()[i * fan_out + j]).sum::<f64>();
            }
        }
        z
    };
    let leaky = |z: &[f64]| z.iter().map(|&v| if v > 0.0 { v } else { 0.01 * v }).collect::<Vec<_>>();
    let z1 = affine(x, &params[0], &params[1]);
    let z2 = affine(&leaky(&z1), &params[2], &params[3]);
    z1.into_iter().chain(z2).collect()
}

/// `sum_ij coef_ij * logp_ij + (logp_00 + 0.3)^2` over the valid entries.
pub fn mlp_loss(case: &MlpCase, params: &[gfn_pathreg::autodiff::Tensor]) -> (f64, Vec<gfn_pathreg::autodiff::Tensor>) {
    let mut g = Graph::new();
    let p: Vec<_> = params.iter().map(|t| g.param(t.clone())).collect();
    let x = g.constant(case.input.clone());
    let h = g.matmul(x, p[0]);
    let h = g.add_bias(h, p[1]);
    let h = g.leaky_relu(h, 0.01);
    let h = g.matmul(h, p[2]);
    let h = g.add_bias(h, p[3]);
    let h = g.leaky_relu(h, 0.01);
    let o = g.matmul(h, p[4]);
    let o = g.add_bias(o, p[5]);
    let lp = g.masked_log_softmax(o, &case.mask).unwrap();
    let mut terms = Vec::new();
    for (i, (&m, &c)) in case.mask.iter().zip(&case.coef).enumerate() {
        if m {
            terms.push((g.pick(lp, i), c));
        }
    }
    let first = g.pick(lp, 0);
    let shifted = g.add_scalar(first, 0.3);
    let sq = g.square(shifted);
    terms.push((sq, 1.0));
    let loss = g.weighted_sum(&terms);
    let v = g.item(loss);
    let grads = g.grad(loss, &p).unwrap();
    (v, grads)
}

/// Largest relative deviation between analytic and central-difference
/// gradients. The denominator is floored at `1e-5`: at `h = 1e-5` the
/// difference quotient carries roundoff around `1e-10`, which would swamp
/// entries much smaller than the floor.
pub fn mlp_fd_error(case: &MlpCase, h: f64) -> f64 {
    let (_, grads) = mlp_loss(case, &case.params);
    let mut worst: f64 = 0.0;
    for (k, gk) in grads.iter().enumerate() {
        for i in 0..gk.len() {
            let mut plus = case.params.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = case.params.clone();
            minus[k].data_mut()[i] -= h;
            let fd = (mlp_loss(case, &plus).0 - mlp_loss(case, &minus).0) / (2.0 * h);
            let a = gk.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
            worst = worst.max(rel);
        }
    }
    worst
}
