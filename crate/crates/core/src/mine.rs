//! Mutual information neural estimation via the Donsker-Varadhan bound.
//!
//! A statistics network `T(x, y)` is trained by gradient ascent on
//! `mean T(joint) - log mean exp(T(marginal))`, which lower-bounds `I(x; y)`
//! in nats. Marginal samples come from shuffling one column of the batch.
//! Everything here works in nats; conversion to bits happens at reporting
//! boundaries only.

use rand::Rng;

use crate::nets::{Activation, ArchParams, Stack};
use crate::nn::{AdamState, Arena, Direction, Graph, NodeId, SetId, Tensor};
use crate::{Error, Result};

/// The statistics network: `(dim_x + dim_y) -> hidden relu (x layers) -> 1`,
/// linear output so the estimate is unbounded.
#[derive(Debug, Clone)]
pub struct MineNet {
    pub set: SetId,
    pub dim_x: usize,
    pub dim_y: usize,
    stack: Stack,
}

pub fn build_mine(
    arena: &mut Arena,
    rng: &mut impl Rng,
    name: &str,
    dim_x: usize,
    dim_y: usize,
    p: &ArchParams,
) -> MineNet {
    let set = arena.add_set(name);
    let mut stack = Stack::new_in(set);
    let mut width = dim_x + dim_y;
    for i in 0..p.mine_layers {
        stack.push_dense(arena, rng, &format!("fc{i}"), width, p.mine_hidden, Activation::Relu);
        width = p.mine_hidden;
    }
    stack.push_dense(arena, rng, "out", width, 1, Activation::Linear);
    MineNet {
        set,
        dim_x,
        dim_y,
        stack,
    }
}

impl MineNet {
    /// Records `T(x, y)` on the graph; output shape `(batch, 1)`.
    pub fn statistic(
        &self,
        arena: &Arena,
        g: &mut Graph,
        x: NodeId,
        y: NodeId,
    ) -> Result<NodeId> {
        let joined = g.concat(x, y)?;
        self.stack.forward(arena, g, joined)
    }

    /// Records the Donsker-Varadhan estimate
    /// `mean T(x, y) - log mean exp(T(x, y_marginal))` as a scalar node,
    /// differentiable w.r.t. the net parameters and the inputs.
    pub fn dv_node(
        &self,
        arena: &Arena,
        g: &mut Graph,
        x: NodeId,
        y: NodeId,
        y_marginal: NodeId,
    ) -> Result<NodeId> {
        let b = g.value(x).dims2().0;
        if b < 2 {
            return Err(Error::Contract(format!(
                "Donsker-Varadhan estimation needs a batch of at least 2, got {b}"
            )));
        }
        let t_joint = self.statistic(arena, g, x, y)?;
        let t_marg = self.statistic(arena, g, x, y_marginal)?;
        let joint_mean = g.batch_mean(t_joint)?;
        let lme = g.log_mean_exp(t_marg)?;
        let neg = g.scale(lme, -1.0)?;
        g.add(joint_mean, neg)
    }

    /// Pure estimate on concrete batches (nats).
    pub fn dv_estimate(
        &self,
        arena: &Arena,
        x: &Tensor,
        y: &Tensor,
        y_marginal: &Tensor,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone())?;
        let yn = g.constant(y.clone())?;
        let ym = g.constant(y_marginal.clone())?;
        let dv = self.dv_node(arena, &mut g, xn, yn, ym)?;
        Ok(g.value(dv).item())
    }
}

/// One gradient-ascent Adam step on the DV objective. Returns the post-step
/// estimate on the same batch.
pub fn mine_ascent_step(
    net: &MineNet,
    arena: &mut Arena,
    adam: &mut AdamState,
    x: &Tensor,
    y: &Tensor,
    y_marginal: &Tensor,
) -> Result<f64> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone())?;
    let yn = g.constant(y.clone())?;
    let ym = g.constant(y_marginal.clone())?;
    let dv = net.dv_node(arena, &mut g, xn, yn, ym)?;
    arena.set_mut(net.set).zero_grads();
    g.backward(dv, arena)?;
    adam.update(arena.set_mut(net.set), Direction::Ascend)?;
    net.dv_estimate(arena, x, y, y_marginal)
}

/// A uniform random permutation of `0..n` (Fisher-Yates).
pub fn random_permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Reorders the rows of a rank-2 tensor.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let (rows, cols) = t.dims2();
    assert_eq!(perm.len(), rows, "permutation length mismatch");
    let mut data = Vec::with_capacity(rows * cols);
    for &src in perm {
        data.extend_from_slice(t.row(src));
    }
    Tensor::from_vec(&[rows, cols], data).expect("permuted tensor")
}

/// Product-of-marginals samples from a joint batch: `x` stays, the other
/// column is shuffled by a uniform random permutation.
pub fn shuffle_marginal(
    x: &Tensor,
    y: &Tensor,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    let rows = x.dims2().0;
    if y.dims2().0 != rows {
        return Err(Error::Contract("joint batch columns disagree in length".into()));
    }
    if rows < 2 {
        return Err(Error::Contract("shuffling needs a batch of at least 2".into()));
    }
    let perm = random_permutation(rows, rng);
    Ok((x.clone(), permute_rows(y, &perm)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngHub, Stream};

    fn tiny_params() -> ArchParams {
        let mut p = ArchParams::ci();
        p.mine_hidden = 16;
        p.mine_layers = 2;
        p
    }

    fn sample_pairs(n: usize, rng: &mut impl Rng) -> (Tensor, Tensor) {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        (
            Tensor::from_vec(&[n, 1], x).unwrap(),
            Tensor::from_vec(&[n, 1], y).unwrap(),
        )
    }

    #[test]
    fn constant_statistic_gives_exactly_zero() {
        let hub = RngHub::new(21);
        let mut arena = Arena::new();
        let net = build_mine(&mut arena, &mut hub.stream(Stream::Init), "psi", 1, 1, &tiny_params());
        // Zero all weights, then pin the output bias at an arbitrary constant.
        for p in &mut arena.set_mut(net.set).params {
            p.value.fill(0.0);
        }
        let out_bias = arena
            .set_mut(net.set)
            .params
            .iter_mut()
            .find(|p| p.name == "out.b")
            .unwrap();
        out_bias.value.fill(2.75);

        let mut rng = hub.stream(Stream::Eval);
        let (x, y) = sample_pairs(64, &mut rng);
        let (xm, ym) = shuffle_marginal(&x, &y, &mut rng).unwrap();
        let dv = net.dv_estimate(&arena, &xm, &y, &ym).unwrap();
        assert!(dv.abs() < 1e-12, "constant T must estimate 0, got {dv}");
    }

    #[test]
    fn zero_capacity_net_stays_pinned_at_zero_under_ascent() {
        let hub = RngHub::new(22);
        let mut arena = Arena::new();
        let net = build_mine(&mut arena, &mut hub.stream(Stream::Init), "psi", 1, 1, &tiny_params());
        for p in &mut arena.set_mut(net.set).params {
            p.value.fill(0.0);
        }
        // Zero learning rate freezes the (already zero) net.
        let mut adam = AdamState::with_defaults(0.0, arena.set(net.set));
        let mut rng = hub.stream(Stream::Eval);
        for _ in 0..5 {
            let (x, y) = sample_pairs(32, &mut rng);
            let (_, ym) = shuffle_marginal(&x, &y, &mut rng).unwrap();
            let dv = mine_ascent_step(&net, &mut arena, &mut adam, &x, &y, &ym).unwrap();
            assert!(dv.abs() < 1e-12);
        }
    }

    #[test]
    fn estimator_ignores_joint_batch_order() {
        let hub = RngHub::new(23);
        let mut arena = Arena::new();
        let net = build_mine(&mut arena, &mut hub.stream(Stream::Init), "psi", 1, 1, &tiny_params());
        let mut rng = hub.stream(Stream::Eval);
        let (x, y) = sample_pairs(32, &mut rng);
        let ym = permute_rows(&y, &random_permutation(32, &mut rng));
        let dv1 = net.dv_estimate(&arena, &x, &y, &ym).unwrap();
        // Relabel the joint batch (same pairs, new order); marginal column
        // permuted consistently with x so the batch is identical as a set.
        let perm = random_permutation(32, &mut rng);
        let xp = permute_rows(&x, &perm);
        let yp = permute_rows(&y, &perm);
        let ymp = permute_rows(&ym, &perm);
        let dv2 = net.dv_estimate(&arena, &xp, &yp, &ymp).unwrap();
        assert!((dv1 - dv2).abs() < 1e-10, "{dv1} vs {dv2}");
    }

    #[test]
    fn shuffled_column_is_the_same_multiset() {
        let hub = RngHub::new(24);
        let mut rng = hub.stream(Stream::Shuffle);
        let (x, y) = sample_pairs(33, &mut rng);
        let (xs, ys) = shuffle_marginal(&x, &y, &mut rng).unwrap();
        assert_eq!(xs, x);
        let mut before: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        let mut after: Vec<u64> = ys.data().iter().map(|v| v.to_bits()).collect();
        before.sort_unstable();
        after.sort_unstable();
        assert_eq!(before, after);
    }

    #[test]
    fn two_row_shuffle_swaps_half_the_time() {
        let hub = RngHub::new(25);
        let mut rng = hub.stream(Stream::Shuffle);
        let y = Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap();
        let x = Tensor::from_vec(&[2, 1], vec![0.0, 0.0]).unwrap();
        let mut swapped = 0usize;
        let trials = 10_000usize;
        for _ in 0..trials {
            let (_, ys) = shuffle_marginal(&x, &y, &mut rng).unwrap();
            if ys.data()[0] == 2.0 {
                swapped += 1;
            } else {
                assert_eq!(ys.data(), y.data());
            }
        }
        let frac = swapped as f64 / trials as f64;
        assert!((frac - 0.5).abs() < 0.02, "swap fraction {frac}");
    }

    #[test]
    fn shuffle_pair_frequencies_match_product_of_marginals() {
        // 2x2 toy: x, y in {0, 1}, perfectly correlated in the joint batch.
        // After shuffling, cell counts should follow the product of marginals;
        // chi-square with 1 dof at the 1% level (critical value 6.63).
        let hub = RngHub::new(26);
        let mut rng = hub.stream(Stream::Shuffle);
        let n = 40usize; // 20 of each
        let xv: Vec<f64> = (0..n).map(|i| f64::from(i % 2 == 0)).collect();
        let x = Tensor::from_vec(&[n, 1], xv.clone()).unwrap();
        let y = Tensor::from_vec(&[n, 1], xv).unwrap();
        let mut counts = [[0f64; 2]; 2];
        let reps = 2_000usize;
        for _ in 0..reps {
            let (xs, ys) = shuffle_marginal(&x, &y, &mut rng).unwrap();
            for (a, b) in xs.data().iter().zip(ys.data()) {
                counts[*a as usize][*b as usize] += 1.0;
            }
        }
        let total: f64 = counts.iter().flatten().sum();
        let expected = total / 4.0; // uniform marginals on both axes
        let chi2: f64 = counts
            .iter()
            .flatten()
            .map(|c| (c - expected) * (c - expected) / expected)
            .sum();
        assert!(chi2 < 6.63, "chi-square {chi2} rejects independence");
    }

    #[test]
    fn dv_estimation_rejects_degenerate_batches() {
        let hub = RngHub::new(27);
        let mut arena = Arena::new();
        let net = build_mine(&mut arena, &mut hub.stream(Stream::Init), "psi", 1, 1, &tiny_params());
        let x = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        assert!(net.dv_estimate(&arena, &x, &x, &x).is_err());
        let mut rng = hub.stream(Stream::Shuffle);
        assert!(shuffle_marginal(&x, &x, &mut rng).is_err());
    }
}
