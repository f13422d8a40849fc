//! BPSK-constrained AWGN main and wiretap channels.
//!
//! Energy per dimension is one (symbols are +1/-1), so the energy per
//! information bit is `Eb = 1/R` with `R = k/n`, and an `Eb/N0` operating
//! point in dB gives per-dimension noise variance `sigma^2 = N0/2`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::nn::{Graph, NodeId, Tensor};
use crate::{Error, Result};

/// Bob's and Eve's operating points for one system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelCfg {
    pub eb_n0_db_bob: f64,
    pub eb_n0_db_eve: f64,
    /// Transmission rate k/n in bits per channel use.
    pub rate: f64,
    pub sigma2_bob: f64,
    pub sigma2_eve: f64,
}

impl ChannelCfg {
    pub fn new(eb_n0_db_bob: f64, eb_n0_db_eve: f64, rate: f64) -> Result<Self> {
        let sigma2_bob = noise_variance(eb_n0_db_bob, rate)?;
        let sigma2_eve = noise_variance(eb_n0_db_eve, rate)?;
        Ok(ChannelCfg {
            eb_n0_db_bob,
            eb_n0_db_eve,
            rate,
            sigma2_bob,
            sigma2_eve,
        })
    }
}

/// Per-dimension noise variance `N0/2` for a given `Eb/N0` (dB) and rate,
/// with `Eb = 1/rate`.
pub fn noise_variance(eb_n0_db: f64, rate: f64) -> Result<f64> {
    if !(rate > 0.0) || rate > 1.0 {
        return Err(Error::Config(format!(
            "rate must lie in (0, 1], got {rate}"
        )));
    }
    let eb = 1.0 / rate;
    let n0 = eb / 10f64.powf(eb_n0_db / 10.0);
    Ok(n0 / 2.0)
}

fn check_bpsk(x: &Tensor) -> Result<()> {
    if x.data().iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Contract(
            "channel input must be BPSK (+1/-1) symbols".into(),
        ));
    }
    Ok(())
}

/// `y = x + w` with `w ~ N(0, sigma2 I)`, outside any computation graph.
pub fn transmit(x: &Tensor, sigma2: f64, rng: &mut impl Rng) -> Result<Tensor> {
    check_bpsk(x)?;
    let std = sigma2.sqrt();
    let data = x
        .data()
        .iter()
        .map(|&v| v + std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Graph variant of [`transmit`]: the noise is recorded as a constant, so the
/// additive-noise Jacobian is the identity and encoder gradients pass through
/// the channel unchanged.
pub fn transmit_node(
    graph: &mut Graph,
    x: NodeId,
    sigma2: f64,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    check_bpsk(graph.value(x))?;
    let std = sigma2.sqrt();
    let shape = graph.value(x).shape().to_vec();
    let noise: Vec<f64> = (0..graph.value(x).len())
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let w = graph.constant(Tensor::from_vec(&shape, noise)?)?;
    graph.add(x, w)
}
