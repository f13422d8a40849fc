//! Loss functions, adaptive gradient clipping, and the alternating
//! optimization loop.
//!
//! Each step samples a minibatch of messages (and random bits), runs the
//! encoder, both channels, both decoders and both statistics networks on one
//! graph, then takes separate backward passes so the encoder's
//! security-originated gradients can be clipped against its reliability
//! gradient before Adam applies them. The statistics networks ascend their
//! Donsker-Varadhan objectives on the same minibatch.

use std::fs::File;
use std::io::Write as _;
use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;

use crate::channel::{transmit_node, ChannelCfg};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, ScheduleMode};
use crate::mine::{build_mine, permute_rows, random_permutation, MineNet};
use crate::nets::{
    build_decoder, build_encoder, sample_bits, ArchParams, CodeSpec, DecoderNet, EncoderNet,
};
use crate::nn::{AdamState, Arena, Direction, Graph, NodeId, Tensor};
use crate::rng::{RngHub, Stream};
use crate::{Error, Result};

/// Relative gains of the three Alice-Bob loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Loss nodes
// ---------------------------------------------------------------------------

/// Batch-averaged L1 distance between the message bits and Bob's soft output.
pub fn loss_reliability(g: &mut Graph, bob_out: NodeId, m: NodeId) -> Result<NodeId> {
    g.l1_loss(bob_out, m)
}

/// Randomized-encoder variant: adds the random-bit head's distance.
pub fn loss_reliability_r(
    g: &mut Graph,
    bob_m_out: NodeId,
    m: NodeId,
    bob_r_out: NodeId,
    r: NodeId,
) -> Result<NodeId> {
    let lm = g.l1_loss(bob_m_out, m)?;
    let lr = g.l1_loss(bob_r_out, r)?;
    g.add(lm, lr)
}

/// Eve's decoding loss; its gradient is only ever applied to Eve's own
/// parameters.
pub fn loss_eve(g: &mut Graph, eve_out: NodeId, m: NodeId) -> Result<NodeId> {
    g.l1_loss(eve_out, m)
}

// ---------------------------------------------------------------------------
// Adaptive clipping
// ---------------------------------------------------------------------------

/// Global L2 norm across a whole gradient collection.
pub fn global_grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales a security-originated gradient so its global L2 norm never
/// exceeds the reliability gradient's:
/// `G_a = min(||G_R||, ||G_M||) * G_M / ||G_M||`.
/// A zero `G_M` is returned unchanged.
pub fn clip_adaptive(g_m: &[Tensor], g_r: &[Tensor]) -> Vec<Tensor> {
    let norm_m = global_grad_norm(g_m);
    let norm_r = global_grad_norm(g_r);
    let mut out: Vec<Tensor> = g_m.to_vec();
    if norm_m > 0.0 && norm_m > norm_r {
        let scale = norm_r / norm_m;
        for t in &mut out {
            t.scale_in_place(scale);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// The system
// ---------------------------------------------------------------------------

/// Every trainable collection plus the channel, code, and RNG state of one
/// training run.
pub struct WiretapSystem {
    pub arena: Arena,
    pub encoder: EncoderNet,
    pub bob_m: DecoderNet,
    pub bob_r: Option<DecoderNet>,
    pub eve: DecoderNet,
    /// psi: statistics network for I(m; c).
    pub mine_alice: MineNet,
    /// phi: statistics network for I(m; y_E).
    pub mine_eve: MineNet,
    pub adam_alice: AdamState,
    pub adam_bob_m: AdamState,
    pub adam_bob_r: Option<AdamState>,
    pub adam_eve: AdamState,
    pub adam_psi: AdamState,
    pub adam_phi: AdamState,
    pub channel: ChannelCfg,
    pub code: CodeSpec,
    pub arch: ArchParams,
    pub weights: LossWeights,
    pub hub: RngHub,
    msg_rng: ChaCha8Rng,
    rbits_rng: ChaCha8Rng,
    bob_noise_rng: ChaCha8Rng,
    eve_noise_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
}

/// What a step updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPhase {
    /// Statistics networks only (the warm-up phase).
    MineOnly,
    /// Everything (the per-iteration update schedule).
    Full,
    /// Alice-Bob and the statistics networks.
    AliceBob,
    /// Eve and the statistics networks.
    EveOnly,
}

/// Per-step losses and diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: usize,
    pub l_r: f64,
    pub l_s_nats: f64,
    pub l_a_nats: f64,
    pub l_e: f64,
    pub xi_nats: f64,
    pub vartheta_nats: f64,
    /// Global norm of the (alpha-weighted) reliability gradient at Alice.
    pub g_r_norm: f64,
    /// Post-clip norm of the beta-weighted security gradient at Alice.
    pub g_s_clipped_norm: f64,
    /// Post-clip norm of the gamma-weighted information gradient at Alice.
    pub g_a_clipped_norm: f64,
}

impl StepMetrics {
    pub fn l_ab(&self, w: &LossWeights) -> f64 {
        w.alpha * self.l_r + w.beta * self.l_s_nats + w.gamma * self.l_a_nats
    }
}

impl WiretapSystem {
    pub fn from_config(cfg: &RunConfig) -> Result<WiretapSystem> {
        let code = cfg.code_spec()?;
        let arch = cfg.arch_params()?;
        let channel = cfg.channel_cfg()?;
        let weights = LossWeights {
            alpha: cfg.loss.alpha,
            beta: cfg.loss.beta,
            gamma: cfg.loss.gamma,
        };
        weights.validate()?;
        WiretapSystem::build(
            code,
            arch,
            channel,
            weights,
            RngHub::new(cfg.seed),
            cfg.optimizer.learning_rate,
            cfg.optimizer.beta1,
            cfg.optimizer.beta2,
            cfg.optimizer.epsilon,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn build(
        code: CodeSpec,
        arch: ArchParams,
        channel: ChannelCfg,
        weights: LossWeights,
        hub: RngHub,
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<WiretapSystem> {
        let mut arena = Arena::new();
        let mut init = hub.stream(Stream::Init);
        let encoder = build_encoder(&mut arena, &mut init, code, &arch)?;
        let bob_m = build_decoder(&mut arena, &mut init, "bob_m", code.n, code.k, &arch)?;
        let bob_r = if code.r > 0 {
            Some(build_decoder(&mut arena, &mut init, "bob_r", code.n, code.r, &arch)?)
        } else {
            None
        };
        let eve = build_decoder(&mut arena, &mut init, "eve", code.n, code.k, &arch)?;
        let mine_alice = build_mine(&mut arena, &mut init, "mine_alice", code.n, code.k, &arch);
        let mine_eve = build_mine(&mut arena, &mut init, "mine_eve", code.n, code.k, &arch);

        let adam = |set| AdamState::new(lr, beta1, beta2, epsilon, arena.set(set));
        let adam_alice = adam(encoder.set);
        let adam_bob_m = adam(bob_m.set);
        let adam_bob_r = bob_r.as_ref().map(|d| adam(d.set));
        let adam_eve = adam(eve.set);
        let adam_psi = adam(mine_alice.set);
        let adam_phi = adam(mine_eve.set);

        Ok(WiretapSystem {
            arena,
            encoder,
            bob_m,
            bob_r,
            eve,
            mine_alice,
            mine_eve,
            adam_alice,
            adam_bob_m,
            adam_bob_r,
            adam_eve,
            adam_psi,
            adam_phi,
            channel,
            code,
            arch,
            weights,
            msg_rng: hub.stream(Stream::Messages),
            rbits_rng: hub.stream(Stream::RandomBits),
            bob_noise_rng: hub.stream(Stream::BobNoise),
            eve_noise_rng: hub.stream(Stream::EveNoise),
            shuffle_rng: hub.stream(Stream::Shuffle),
            hub,
        })
    }

    /// Architecture and channel settings, flattened for the checkpoint header.
    pub fn metadata(&self) -> Vec<(String, String)> {
        let mut m: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| m.push((k.to_string(), v));
        push("arch", self.code.arch.name().to_string());
        push("k", self.code.k.to_string());
        push("r", self.code.r.to_string());
        push("n", self.code.n.to_string());
        push("mix_factor", format!("{}", self.code.mix_factor));
        push("mix_placement", self.code.mix_placement.name().to_string());
        push("binarize_scrambler", self.code.binarize_scrambler.to_string());
        push("enc_hidden", self.arch.enc_hidden.to_string());
        push("enc_hidden_layers", self.arch.enc_hidden_layers.to_string());
        push("enc_embed", self.arch.enc_embed.to_string());
        push("reshape_channels", self.arch.reshape_channels.to_string());
        push("conv_filters_0", self.arch.conv_filters.0.to_string());
        push("conv_filters_1", self.arch.conv_filters.1.to_string());
        push("conv_kernel", self.arch.conv_kernel.to_string());
        push("dec_hidden", self.arch.dec_hidden.to_string());
        push("dec_layers", self.arch.dec_layers.to_string());
        push("mine_hidden", self.arch.mine_hidden.to_string());
        push("mine_layers", self.arch.mine_layers.to_string());
        push("bob_eb_n0_db", format!("{}", self.channel.eb_n0_db_bob));
        push("eve_eb_n0_db", format!("{}", self.channel.eb_n0_db_eve));
        push("alpha", format!("{}", self.weights.alpha));
        push("beta", format!("{}", self.weights.beta));
        push("gamma", format!("{}", self.weights.gamma));
        push("learning_rate", format!("{}", self.adam_alice.learning_rate));
        push("seed", self.hub.seed().to_string());
        m
    }

    /// Rebuilds a system from a checkpoint's metadata and loads its arrays.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<WiretapSystem> {
        let get = |k: &str| ck.require_meta(k);
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata {k} is not an integer")))
        };
        let parse_f64 = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata {k} is not a number")))
        };
        let code = CodeSpec {
            k: parse_usize("k")?,
            r: parse_usize("r")?,
            n: parse_usize("n")?,
            arch: crate::nets::Arch::parse(get("arch")?)?,
            mix_factor: parse_f64("mix_factor")?,
            mix_placement: crate::nets::MixPlacement::parse(get("mix_placement")?)?,
            binarize_scrambler: get("binarize_scrambler")? == "true",
        };
        let arch = ArchParams {
            enc_hidden: parse_usize("enc_hidden")?,
            enc_hidden_layers: parse_usize("enc_hidden_layers")?,
            enc_embed: parse_usize("enc_embed")?,
            reshape_channels: parse_usize("reshape_channels")?,
            conv_filters: (parse_usize("conv_filters_0")?, parse_usize("conv_filters_1")?),
            conv_kernel: parse_usize("conv_kernel")?,
            dec_hidden: parse_usize("dec_hidden")?,
            dec_layers: parse_usize("dec_layers")?,
            mine_hidden: parse_usize("mine_hidden")?,
            mine_layers: parse_usize("mine_layers")?,
        };
        let channel = ChannelCfg::new(
            parse_f64("bob_eb_n0_db")?,
            parse_f64("eve_eb_n0_db")?,
            code.k as f64 / code.n as f64,
        )?;
        let weights = LossWeights {
            alpha: parse_f64("alpha")?,
            beta: parse_f64("beta")?,
            gamma: parse_f64("gamma")?,
        };
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|_| Error::Checkpoint("metadata seed is not an integer".into()))?;
        let lr = parse_f64("learning_rate")?;
        let mut system = WiretapSystem::build(
            code,
            arch,
            channel,
            weights,
            RngHub::new(seed),
            lr,
            0.9,
            0.999,
            1e-8,
        )?;
        ck.load_into_arena(&mut system.arena)?;
        Ok(system)
    }

    fn sample_batch(&mut self, b: usize) -> (Tensor, Option<Tensor>) {
        let m = sample_bits(b, self.code.k, &mut self.msg_rng);
        let r = if self.code.r > 0 {
            Some(sample_bits(b, self.code.r, &mut self.rbits_rng))
        } else {
            None
        };
        (m, r)
    }

    /// One iteration of the learning loop. Which collections move is decided
    /// by `phase`; `train_mine = false` freezes the statistics networks.
    pub fn train_step(
        &mut self,
        step: usize,
        batch: usize,
        phase: StepPhase,
        train_mine: bool,
    ) -> Result<StepMetrics> {
        let (m, r) = self.sample_batch(batch);
        let perm = random_permutation(batch, &mut self.shuffle_rng);
        let m_shuffled = permute_rows(&m, &perm);

        let mut g = Graph::new();
        let m_node = g.constant(m)?;
        let r_node = match &r {
            Some(t) => Some(g.constant(t.clone())?),
            None => None,
        };
        let m_tilde = g.constant(m_shuffled)?;

        // Encode and transmit.
        let c = self.encoder.forward(&self.arena, &mut g, m_node, r_node)?;
        let y_b = transmit_node(&mut g, c, self.channel.sigma2_bob, &mut self.bob_noise_rng)?;
        let y_e = transmit_node(&mut g, c, self.channel.sigma2_eve, &mut self.eve_noise_rng)?;

        // Decoders.
        let bob_m_out = self.bob_m.forward(&self.arena, &mut g, y_b)?;
        let bob_r_out = match &self.bob_r {
            Some(dec) => Some(dec.forward(&self.arena, &mut g, y_b)?),
            None => None,
        };
        let eve_out = self.eve.forward(&self.arena, &mut g, y_e)?;

        // Losses.
        let l_r_node = match (bob_r_out, r_node) {
            (Some(br), Some(rn)) => loss_reliability_r(&mut g, bob_m_out, m_node, br, rn)?,
            _ => loss_reliability(&mut g, bob_m_out, m_node)?,
        };
        let l_e_node = loss_eve(&mut g, eve_out, m_node)?;
        // xi(psi) over (c, m); vartheta(phi) over (y_E, m).
        let xi_node = self.mine_alice.dv_node(&self.arena, &mut g, c, m_node, m_tilde)?;
        let vartheta_node = self.mine_eve.dv_node(&self.arena, &mut g, y_e, m_node, m_tilde)?;

        let l_r = g.value(l_r_node).item();
        let l_e = g.value(l_e_node).item();
        let xi = g.value(xi_node).item();
        let vartheta = g.value(vartheta_node).item();
        for (name, v) in [("L_R", l_r), ("L_E", l_e), ("xi", xi), ("vartheta", vartheta)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} at step {step}")));
            }
        }

        let w = self.weights;
        let update_alice_bob = matches!(phase, StepPhase::Full | StepPhase::AliceBob);
        let update_eve = matches!(phase, StepPhase::Full | StepPhase::EveOnly);
        let update_mine = train_mine;

        // Backward pass 1: reliability term.
        let mut g_r_alice: Vec<Tensor> = Vec::new();
        let mut g_r_bob_m: Vec<Tensor> = Vec::new();
        let mut g_r_bob_r: Vec<Tensor> = Vec::new();
        if update_alice_bob && w.alpha > 0.0 {
            self.arena.zero_all_grads();
            g.backward(l_r_node, &mut self.arena)?;
            g_r_alice = self.arena.set(self.encoder.set).grads();
            scale_grads(&mut g_r_alice, w.alpha);
            g_r_bob_m = self.arena.set(self.bob_m.set).grads();
            scale_grads(&mut g_r_bob_m, w.alpha);
            if let Some(br) = &self.bob_r {
                g_r_bob_r = self.arena.set(br.set).grads();
                scale_grads(&mut g_r_bob_r, w.alpha);
            }
        }

        // Backward pass 2: xi (psi ascent; gamma * L_A = -gamma * xi at Alice).
        let mut g_psi: Vec<Tensor> = Vec::new();
        let mut g_alice_from_xi: Vec<Tensor> = Vec::new();
        let need_xi_grad = update_mine || (update_alice_bob && w.gamma > 0.0);
        if need_xi_grad {
            self.arena.zero_all_grads();
            g.backward(xi_node, &mut self.arena)?;
            g_psi = self.arena.set(self.mine_alice.set).grads();
            if update_alice_bob && w.gamma > 0.0 {
                g_alice_from_xi = self.arena.set(self.encoder.set).grads();
                scale_grads(&mut g_alice_from_xi, -w.gamma);
            }
        }

        // Backward pass 3: vartheta (phi ascent; beta * L_S = beta * vartheta).
        let mut g_phi: Vec<Tensor> = Vec::new();
        let mut g_alice_from_vartheta: Vec<Tensor> = Vec::new();
        let need_vartheta_grad = update_mine || (update_alice_bob && w.beta > 0.0);
        if need_vartheta_grad {
            self.arena.zero_all_grads();
            g.backward(vartheta_node, &mut self.arena)?;
            g_phi = self.arena.set(self.mine_eve.set).grads();
            if update_alice_bob && w.beta > 0.0 {
                g_alice_from_vartheta = self.arena.set(self.encoder.set).grads();
                scale_grads(&mut g_alice_from_vartheta, w.beta);
            }
        }

        // Backward pass 4: Eve's loss. Only her own parameters move.
        let mut g_eve: Vec<Tensor> = Vec::new();
        if update_eve {
            self.arena.zero_all_grads();
            g.backward(l_e_node, &mut self.arena)?;
            g_eve = self.arena.set(self.eve.set).grads();
        }

        // Combine at Alice: alpha G_R + clip(beta G_S) + clip(gamma G_A).
        let g_r_norm = global_grad_norm(&g_r_alice);
        let mut g_s_clipped_norm = 0.0;
        let mut g_a_clipped_norm = 0.0;
        if update_alice_bob {
            let mut total = if g_r_alice.is_empty() {
                zeros_like_set(&self.arena, self.encoder.set)
            } else {
                g_r_alice.clone()
            };
            if !g_alice_from_vartheta.is_empty() {
                let clipped = clip_adaptive(&g_alice_from_vartheta, &g_r_alice);
                g_s_clipped_norm = global_grad_norm(&clipped);
                add_grads(&mut total, &clipped);
            }
            if !g_alice_from_xi.is_empty() {
                let clipped = clip_adaptive(&g_alice_from_xi, &g_r_alice);
                g_a_clipped_norm = global_grad_norm(&clipped);
                add_grads(&mut total, &clipped);
            }
            self.arena.set_mut(self.encoder.set).set_grads(&total);
            self.adam_alice.update(self.arena.set_mut(self.encoder.set), Direction::Descend)?;

            if !g_r_bob_m.is_empty() {
                self.arena.set_mut(self.bob_m.set).set_grads(&g_r_bob_m);
                self.adam_bob_m.update(self.arena.set_mut(self.bob_m.set), Direction::Descend)?;
            }
            if let (Some(br), Some(adam)) = (&self.bob_r, &mut self.adam_bob_r) {
                if !g_r_bob_r.is_empty() {
                    self.arena.set_mut(br.set).set_grads(&g_r_bob_r);
                    adam.update(self.arena.set_mut(br.set), Direction::Descend)?;
                }
            }
        }

        if update_eve && !g_eve.is_empty() {
            self.arena.set_mut(self.eve.set).set_grads(&g_eve);
            self.adam_eve.update(self.arena.set_mut(self.eve.set), Direction::Descend)?;
        }

        if update_mine {
            self.arena.set_mut(self.mine_alice.set).set_grads(&g_psi);
            self.adam_psi
                .update(self.arena.set_mut(self.mine_alice.set), Direction::Ascend)?;
            self.arena.set_mut(self.mine_eve.set).set_grads(&g_phi);
            self.adam_phi
                .update(self.arena.set_mut(self.mine_eve.set), Direction::Ascend)?;
        }

        Ok(StepMetrics {
            step,
            l_r,
            l_s_nats: vartheta,
            l_a_nats: -xi,
            l_e,
            xi_nats: xi,
            vartheta_nats: vartheta,
            g_r_norm,
            g_s_clipped_norm,
            g_a_clipped_norm,
        })
    }
}

fn scale_grads(grads: &mut [Tensor], c: f64) {
    for t in grads {
        t.scale_in_place(c);
    }
}

fn add_grads(into: &mut [Tensor], other: &[Tensor]) {
    assert_eq!(into.len(), other.len(), "gradient collection mismatch");
    for (a, b) in into.iter_mut().zip(other) {
        a.add_in_place(b);
    }
}

fn zeros_like_set(arena: &Arena, set: crate::nn::SetId) -> Vec<Tensor> {
    arena
        .set(set)
        .params
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()))
        .collect()
}

// ---------------------------------------------------------------------------
// The outer loop
// ---------------------------------------------------------------------------

pub const METRICS_HEADER: &str = "step,L_R,L_S_nats,L_A_nats,L_E,xi_nats,vartheta_nats";

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub stopped_on_plateau: bool,
    pub checkpoint_path: PathBuf,
    pub final_metrics: Option<StepMetrics>,
}

/// Runs the full schedule from `cfg`: warm-up, training until `max_iters` or
/// an `L_AB` plateau, periodic checkpoints, and an append-only metrics CSV.
pub fn train(cfg: &RunConfig, system: &mut WiretapSystem) -> Result<TrainOutcome> {
    std::fs::create_dir_all(&cfg.paths.checkpoint_dir)
        .map_err(|e| Error::io(cfg.paths.checkpoint_dir.display().to_string(), e))?;
    if let Some(parent) = cfg.paths.metrics_csv.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let ckpt_path = crate::config::checkpoint_path(cfg);
    let mut metrics_file = File::create(&cfg.paths.metrics_csv)
        .map_err(|e| Error::io(cfg.paths.metrics_csv.display().to_string(), e))?;
    let write_io = |e| Error::io(cfg.paths.metrics_csv.display().to_string(), e);
    writeln!(metrics_file, "{METRICS_HEADER}").map_err(write_io)?;

    let batch = cfg.optimizer.batch_size;
    let plateau_window = cfg.schedule.plateau_window;
    let mut smoothed: Vec<f64> = Vec::new(); // window-100 moving average of L_AB
    let mut raw_lab: Vec<f64> = Vec::new();
    let mut stopped_on_plateau = false;
    let mut final_metrics = None;
    let mut steps_run = 0usize;

    // Warm-up settles the statistics networks; skip it when they are frozen.
    let warmup = if cfg.schedule.train_mine { cfg.schedule.warmup } else { 0 };
    let total = warmup + cfg.schedule.max_iters;
    for step in 0..total {
        let phase = if step < warmup {
            StepPhase::MineOnly
        } else {
            match cfg.schedule.mode {
                ScheduleMode::Simultaneous => StepPhase::Full,
                ScheduleMode::Alternate => {
                    if (step - warmup) % 2 == 0 {
                        StepPhase::AliceBob
                    } else {
                        StepPhase::EveOnly
                    }
                }
            }
        };
        let metrics = match system.train_step(step, batch, phase, cfg.schedule.train_mine) {
            Ok(m) => m,
            Err(err @ Error::NonFinite(_)) => {
                // Abort with a diagnostic snapshot next to the checkpoint.
                let mut meta = system.metadata();
                meta.push(("aborted_at_step".into(), step.to_string()));
                let snap = Checkpoint::from_arena(&system.arena, meta);
                let _ = snap.save(&cfg.paths.checkpoint_dir.join("abort-snapshot.wtfg"));
                return Err(err);
            }
            Err(err) => return Err(err),
        };
        steps_run = step + 1;

        if step % cfg.schedule.log_every == 0 || step + 1 == total {
            writeln!(
                metrics_file,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                metrics.step,
                metrics.l_r,
                metrics.l_s_nats,
                metrics.l_a_nats,
                metrics.l_e,
                metrics.xi_nats,
                metrics.vartheta_nats
            )
            .map_err(write_io)?;
        }

        if (step + 1) % cfg.schedule.checkpoint_every == 0 {
            Checkpoint::from_arena(&system.arena, system.metadata())
                .save(&ckpt_path)?;
        }

        // Plateau detection on the smoothed L_AB, after warm-up.
        if step >= warmup {
            raw_lab.push(metrics.l_ab(&system.weights));
            let window = 100.min(raw_lab.len());
            let avg: f64 =
                raw_lab[raw_lab.len() - window..].iter().sum::<f64>() / window as f64;
            smoothed.push(avg);
            if smoothed.len() > plateau_window + 100 {
                let then = smoothed[smoothed.len() - 1 - plateau_window];
                let now = *smoothed.last().unwrap();
                let rel = (now - then).abs() / then.abs().max(1e-12);
                if rel < cfg.schedule.plateau_tol {
                    stopped_on_plateau = true;
                    final_metrics = Some(metrics);
                    break;
                }
            }
        }
        final_metrics = Some(metrics);
    }

    Checkpoint::from_arena(&system.arena, system.metadata()).save(&ckpt_path)?;
    metrics_file.flush().map_err(write_io)?;
    Ok(TrainOutcome {
        steps_run,
        stopped_on_plateau,
        checkpoint_path: ckpt_path,
        final_metrics,
    })
}
