//! The encoder architectures and the Bob/Eve decoder networks.
//!
//! Three encoders mirror the classical secure-coding schemes: a plain
//! fully-connected + convolutional stack ("classic"), two such stacks
//! composed ("scrambling"), and a two-branch network that mixes message and
//! random bits before the convolutional head ("randomized", the coset-coding
//! analogue). All encoders end in a straight-through sign, so the channel
//! always sees +-1 symbols.

use rand::Rng;
use rand_distr::Normal;

use crate::nn::{Arena, ConvSpec, Graph, NodeId, PaddingMode, SetId, Tensor};
use crate::{Error, Result};

/// Standard deviation of the Gaussian weight init (variance 0.1).
pub const INIT_STD: f64 = 0.31622776601683794;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Classic,
    Scrambling,
    Randomized,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Classic => "classic",
            Arch::Scrambling => "scrambling",
            Arch::Randomized => "randomized",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "classic" => Ok(Arch::Classic),
            "scrambling" => Ok(Arch::Scrambling),
            "randomized" => Ok(Arch::Randomized),
            other => Err(Error::Config(format!("unknown encoder architecture {other:?}"))),
        }
    }
}

/// Which branch of the randomized encoder the mix factor amplifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixPlacement {
    /// `out_m + F * out_r` (amplify the random-bit path).
    RandomBranch,
    /// `F * out_m + out_r`.
    MessageBranch,
}

impl MixPlacement {
    pub fn name(self) -> &'static str {
        match self {
            MixPlacement::RandomBranch => "random-branch",
            MixPlacement::MessageBranch => "message-branch",
        }
    }

    pub fn parse(s: &str) -> Result<MixPlacement> {
        match s {
            "random-branch" => Ok(MixPlacement::RandomBranch),
            "message-branch" => Ok(MixPlacement::MessageBranch),
            other => Err(Error::Config(format!("unknown mix placement {other:?}"))),
        }
    }
}

/// The code being learned: k message bits, r random bits, n channel uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodeSpec {
    pub k: usize,
    pub r: usize,
    pub n: usize,
    pub arch: Arch,
    /// Mix factor F of the randomized encoder.
    pub mix_factor: f64,
    pub mix_placement: MixPlacement,
    /// Whether the scrambling encoder binarizes between its two stacks.
    pub binarize_scrambler: bool,
}

impl CodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.n < self.k {
            return Err(Error::Config(format!(
                "need k >= 1 and n >= k, got k={} n={}",
                self.k, self.n
            )));
        }
        match self.arch {
            Arch::Randomized => {
                if self.r < 1 {
                    return Err(Error::Config("randomized encoder needs r >= 1".into()));
                }
                // F = 0 is the degenerate mix that ignores the random branch;
                // useful in tests, never in a real run.
                if !(self.mix_factor >= 0.0) || !self.mix_factor.is_finite() {
                    return Err(Error::Config("mix factor F must be finite and >= 0".into()));
                }
            }
            _ => {
                if self.r != 0 {
                    return Err(Error::Config(format!(
                        "{} encoder carries no random bits (r must be 0)",
                        self.arch.name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn rate(&self) -> f64 {
        self.k as f64 / self.n as f64
    }
}

/// Layer widths shared by every network in a system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchParams {
    pub enc_hidden: usize,
    pub enc_hidden_layers: usize,
    /// Width of the tanh embedding that gets reshaped for the conv head.
    pub enc_embed: usize,
    pub reshape_channels: usize,
    pub conv_filters: (usize, usize),
    pub conv_kernel: usize,
    pub dec_hidden: usize,
    pub dec_layers: usize,
    pub mine_hidden: usize,
    pub mine_layers: usize,
}

impl ArchParams {
    /// The full-size networks: 500-wide encoder/decoder stacks, a 256-wide
    /// embedding reshaped to 16x16, conv filters 16/32 with kernel 4, and
    /// 400-wide 4-layer statistics networks.
    pub fn paper() -> Self {
        ArchParams {
            enc_hidden: 500,
            enc_hidden_layers: 3,
            enc_embed: 256,
            reshape_channels: 16,
            conv_filters: (16, 32),
            conv_kernel: 4,
            dec_hidden: 500,
            dec_layers: 5,
            mine_hidden: 400,
            mine_layers: 4,
        }
    }

    /// Reduced widths for training on a laptop CPU in minutes rather than
    /// days; same layer counts and topology as [`ArchParams::paper`].
    pub fn desk() -> Self {
        ArchParams {
            enc_hidden: 128,
            enc_hidden_layers: 3,
            enc_embed: 64,
            reshape_channels: 8,
            conv_filters: (8, 16),
            conv_kernel: 4,
            dec_hidden: 128,
            dec_layers: 5,
            mine_hidden: 160,
            mine_layers: 4,
        }
    }

    /// Minimal widths for fast automated tests.
    pub fn ci() -> Self {
        ArchParams {
            enc_hidden: 100,
            enc_hidden_layers: 3,
            enc_embed: 64,
            reshape_channels: 8,
            conv_filters: (8, 16),
            conv_kernel: 4,
            dec_hidden: 100,
            dec_layers: 5,
            mine_hidden: 128,
            mine_layers: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_embed % self.reshape_channels != 0 {
            return Err(Error::Config(format!(
                "embedding width {} is not divisible by {} reshape channels",
                self.enc_embed, self.reshape_channels
            )));
        }
        let conv_len = self.enc_embed / self.reshape_channels;
        if conv_len < self.conv_kernel {
            return Err(Error::Config(format!(
                "conv sequence length {} is shorter than kernel {}",
                conv_len, self.conv_kernel
            )));
        }
        Ok(())
    }

    fn conv_len(&self) -> usize {
        self.enc_embed / self.reshape_channels
    }
}

// ---------------------------------------------------------------------------
// Layer stacks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Stage {
    Dense { w: usize, b: usize, act: Activation },
    Conv { w: usize, b: usize, spec: ConvSpec, act: Activation },
    Reshape { channels: usize, length: usize },
    Flatten,
}

/// An ordered layer list whose parameters live in one arena set.
#[derive(Debug, Clone)]
pub struct Stack {
    set: SetId,
    stages: Vec<Stage>,
}

impl Stack {
    pub(crate) fn new_in(set: SetId) -> Self {
        Stack { set, stages: Vec::new() }
    }

    pub(crate) fn push_dense(
        &mut self,
        arena: &mut Arena,
        rng: &mut impl Rng,
        name: &str,
        in_w: usize,
        out_w: usize,
        act: Activation,
    ) {
        let w = arena.add_param(
            self.set,
            format!("{name}.w"),
            gaussian_tensor(&[in_w, out_w], rng),
        );
        let b = arena.add_param(self.set, format!("{name}.b"), Tensor::zeros(&[out_w]));
        self.stages.push(Stage::Dense { w, b, act });
    }

    fn push_conv(
        &mut self,
        arena: &mut Arena,
        rng: &mut impl Rng,
        name: &str,
        spec: ConvSpec,
        act: Activation,
    ) {
        let w = arena.add_param(
            self.set,
            format!("{name}.w"),
            gaussian_tensor(&[spec.out_filters, spec.in_channels, spec.kernel], rng),
        );
        let b = arena.add_param(
            self.set,
            format!("{name}.b"),
            Tensor::zeros(&[spec.out_filters]),
        );
        self.stages.push(Stage::Conv { w, b, spec, act });
    }

    pub fn forward(&self, arena: &Arena, g: &mut Graph, mut x: NodeId) -> Result<NodeId> {
        for stage in &self.stages {
            x = match *stage {
                Stage::Dense { w, b, act } => {
                    let wn = g.param(arena, self.set, w);
                    let bn = g.param(arena, self.set, b);
                    let y = g.dense(x, wn, bn)?;
                    apply_activation(g, y, act)
                }
                Stage::Conv { w, b, spec, act } => {
                    let wn = g.param(arena, self.set, w);
                    let bn = g.param(arena, self.set, b);
                    let y = g.conv1d(x, wn, bn, spec)?;
                    apply_activation(g, y, act)
                }
                Stage::Reshape { channels, length } => {
                    let batch = g.value(x).shape()[0];
                    g.reshape(x, &[batch, channels, length])?
                }
                Stage::Flatten => g.flatten(x)?,
            };
        }
        Ok(x)
    }
}

fn apply_activation(g: &mut Graph, x: NodeId, act: Activation) -> NodeId {
    match act {
        Activation::Linear => x,
        Activation::Relu => g.relu(x),
        Activation::Tanh => g.tanh(x),
        Activation::Sigmoid => g.sigmoid(x),
    }
}

fn gaussian_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.sample(dist)).collect();
    Tensor::from_vec(shape, data).expect("gaussian tensor shape")
}

/// The fully-connected front of an encoder: `in -> hidden^L relu -> embed tanh`.
fn fc_front(
    arena: &mut Arena,
    set: SetId,
    rng: &mut impl Rng,
    prefix: &str,
    in_w: usize,
    p: &ArchParams,
) -> Stack {
    let mut s = Stack::new_in(set);
    let mut width = in_w;
    for i in 0..p.enc_hidden_layers {
        s.push_dense(arena, rng, &format!("{prefix}fc{i}"), width, p.enc_hidden, Activation::Relu);
        width = p.enc_hidden;
    }
    s.push_dense(arena, rng, &format!("{prefix}embed"), width, p.enc_embed, Activation::Tanh);
    s
}

/// The convolutional back of an encoder:
/// `reshape -> conv relu -> conv relu -> flatten -> dense n`. The caller
/// applies the straight-through sign.
fn conv_head(
    arena: &mut Arena,
    set: SetId,
    rng: &mut impl Rng,
    prefix: &str,
    n: usize,
    p: &ArchParams,
) -> Stack {
    let mut s = Stack::new_in(set);
    let length = p.conv_len();
    s.stages.push(Stage::Reshape { channels: p.reshape_channels, length });
    s.push_conv(
        arena,
        rng,
        &format!("{prefix}conv0"),
        ConvSpec {
            in_channels: p.reshape_channels,
            out_filters: p.conv_filters.0,
            kernel: p.conv_kernel,
            stride: 1,
            padding: PaddingMode::Same,
        },
        Activation::Relu,
    );
    s.push_conv(
        arena,
        rng,
        &format!("{prefix}conv1"),
        ConvSpec {
            in_channels: p.conv_filters.0,
            out_filters: p.conv_filters.1,
            kernel: p.conv_kernel,
            stride: 1,
            padding: PaddingMode::Same,
        },
        Activation::Relu,
    );
    s.stages.push(Stage::Flatten);
    s.push_dense(
        arena,
        rng,
        &format!("{prefix}out"),
        p.conv_filters.1 * length,
        n,
        Activation::Linear,
    );
    s
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum EncoderKind {
    Classic {
        front: Stack,
        head: Stack,
    },
    Scrambling {
        front: Stack,
        head: Stack,
        scr_front: Stack,
        scr_head: Stack,
        binarize_between: bool,
    },
    Randomized {
        m_branch: Stack,
        r_branch: Stack,
        head: Stack,
        mix_factor: f64,
        placement: MixPlacement,
    },
}

/// Alice's network. A deterministic map from (m) or (m, r) to a +-1 codeword.
#[derive(Debug, Clone)]
pub struct EncoderNet {
    pub set: SetId,
    pub spec: CodeSpec,
    kind: EncoderKind,
}

/// Builds the encoder matching `spec.arch`.
pub fn build_encoder(
    arena: &mut Arena,
    rng: &mut impl Rng,
    spec: CodeSpec,
    p: &ArchParams,
) -> Result<EncoderNet> {
    spec.validate()?;
    p.validate()?;
    let set = arena.add_set("alice");
    let kind = match spec.arch {
        Arch::Classic => EncoderKind::Classic {
            front: fc_front(arena, set, rng, "", spec.k, p),
            head: conv_head(arena, set, rng, "", spec.n, p),
        },
        Arch::Scrambling => EncoderKind::Scrambling {
            front: fc_front(arena, set, rng, "", spec.k, p),
            head: conv_head(arena, set, rng, "", spec.n, p),
            scr_front: fc_front(arena, set, rng, "scr.", spec.n, p),
            scr_head: conv_head(arena, set, rng, "scr.", spec.n, p),
            binarize_between: spec.binarize_scrambler,
        },
        Arch::Randomized => EncoderKind::Randomized {
            m_branch: fc_front(arena, set, rng, "m.", spec.k, p),
            r_branch: fc_front(arena, set, rng, "r.", spec.r, p),
            head: conv_head(arena, set, rng, "", spec.n, p),
            mix_factor: spec.mix_factor,
            placement: spec.mix_placement,
        },
    };
    Ok(EncoderNet { set, spec, kind })
}

impl EncoderNet {
    /// Records the encoder on `g`. `m` is a `(batch, k)` bit tensor;
    /// `r` must be `Some((batch, r))` exactly for the randomized encoder.
    /// The output is always a `(batch, n)` tensor of +-1 symbols.
    pub fn forward(
        &self,
        arena: &Arena,
        g: &mut Graph,
        m: NodeId,
        r: Option<NodeId>,
    ) -> Result<NodeId> {
        match &self.kind {
            EncoderKind::Classic { front, head } => {
                if r.is_some() {
                    return Err(Error::Contract("classic encoder takes no random bits".into()));
                }
                let e = front.forward(arena, g, m)?;
                let logits = head.forward(arena, g, e)?;
                Ok(g.ste_sign(logits))
            }
            EncoderKind::Scrambling {
                front,
                head,
                scr_front,
                scr_head,
                binarize_between,
            } => {
                if r.is_some() {
                    return Err(Error::Contract(
                        "scrambling encoder takes no random bits".into(),
                    ));
                }
                let e = front.forward(arena, g, m)?;
                let mut c = head.forward(arena, g, e)?;
                if *binarize_between {
                    // The first stack emits codewords; gradients pass the sign
                    // straight through.
                    c = g.ste_sign(c);
                }
                let e2 = scr_front.forward(arena, g, c)?;
                let logits = scr_head.forward(arena, g, e2)?;
                Ok(g.ste_sign(logits))
            }
            EncoderKind::Randomized {
                m_branch,
                r_branch,
                head,
                mix_factor,
                placement,
            } => {
                let r = r.ok_or_else(|| {
                    Error::Contract("randomized encoder needs random bits".into())
                })?;
                let em = m_branch.forward(arena, g, m)?;
                let er = r_branch.forward(arena, g, r)?;
                let mixed = match placement {
                    MixPlacement::RandomBranch => {
                        let scaled = g.scale(er, *mix_factor)?;
                        g.add(em, scaled)?
                    }
                    MixPlacement::MessageBranch => {
                        let scaled = g.scale(em, *mix_factor)?;
                        g.add(scaled, er)?
                    }
                };
                let logits = head.forward(arena, g, mixed)?;
                Ok(g.ste_sign(logits))
            }
        }
    }

    /// Pure inference: encode a batch outside any persistent graph.
    pub fn encode(&self, arena: &Arena, m: &Tensor, r: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let mn = g.constant(m.clone())?;
        let rn = match r {
            Some(t) => Some(g.constant(t.clone())?),
            None => None,
        };
        let c = self.forward(arena, &mut g, mn, rn)?;
        Ok(g.value(c).clone())
    }
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

/// Bob's or Eve's network: `n -> hidden relu (x layers) -> out sigmoid`.
#[derive(Debug, Clone)]
pub struct DecoderNet {
    pub set: SetId,
    pub out_width: usize,
    stack: Stack,
}

pub fn build_decoder(
    arena: &mut Arena,
    rng: &mut impl Rng,
    name: &str,
    in_width: usize,
    out_width: usize,
    p: &ArchParams,
) -> Result<DecoderNet> {
    if out_width < 1 {
        return Err(Error::Config("decoder output width must be >= 1".into()));
    }
    let set = arena.add_set(name);
    let mut stack = Stack::new_in(set);
    let mut width = in_width;
    for i in 0..p.dec_layers {
        stack.push_dense(arena, rng, &format!("fc{i}"), width, p.dec_hidden, Activation::Relu);
        width = p.dec_hidden;
    }
    stack.push_dense(arena, rng, "out", width, out_width, Activation::Sigmoid);
    Ok(DecoderNet {
        set,
        out_width,
        stack,
    })
}

impl DecoderNet {
    pub fn forward(&self, arena: &Arena, g: &mut Graph, y: NodeId) -> Result<NodeId> {
        self.stack.forward(arena, g, y)
    }

    pub fn infer(&self, arena: &Arena, y: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let yn = g.constant(y.clone())?;
        let out = self.forward(arena, &mut g, yn)?;
        Ok(g.value(out).clone())
    }
}

/// Soft sigmoid outputs to hard bits: values greater than 0.5 decode as 1.
pub fn threshold_bits(soft: &Tensor) -> Vec<u8> {
    soft.data().iter().map(|&v| u8::from(v > 0.5)).collect()
}

// ---------------------------------------------------------------------------
// Bit sampling and codebook enumeration
// ---------------------------------------------------------------------------

/// Uniform random bits as an 0/1 f64 tensor.
pub fn sample_bits(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(&[rows, cols], data).expect("bit tensor")
}

/// Bit tensor row for an integer index, MSB first.
pub fn bits_from_index(index: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|b| ((index >> (width - 1 - b)) & 1) as f64)
        .collect()
}

/// The full learned codebook, indexed `[message][random word]`.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub k: usize,
    pub r: usize,
    pub n: usize,
    /// `words[m * 2^r + r_idx]` is the codeword for `(m, r_idx)`.
    pub words: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn word(&self, m: usize, r_idx: usize) -> &[f64] {
        &self.words[m * (1 << self.r) + r_idx]
    }

    pub fn num_messages(&self) -> usize {
        1 << self.k
    }

    pub fn coset_size(&self) -> usize {
        1 << self.r
    }

    /// Distinct codewords for a fixed message (the learned "coset" support).
    pub fn distinct_in_coset(&self, m: usize) -> usize {
        let mut set: std::collections::HashSet<Vec<u64>> = std::collections::HashSet::new();
        for r_idx in 0..self.coset_size() {
            set.insert(self.word(m, r_idx).iter().map(|v| v.to_bits()).collect());
        }
        set.len()
    }
}

/// Enumerates every (m, r) input through the encoder. Guarded to k + r <= 20.
pub fn enumerate_codebook(enc: &EncoderNet, arena: &Arena) -> Result<Codebook> {
    let (k, r, n) = (enc.spec.k, enc.spec.r, enc.spec.n);
    if k + r > 20 {
        return Err(Error::Contract(format!(
            "codebook enumeration guard: k + r = {} exceeds 20",
            k + r
        )));
    }
    let num_m = 1usize << k;
    let num_r = 1usize << r;
    let mut words = Vec::with_capacity(num_m * num_r);
    // Chunk the enumeration so huge books do not build huge graphs.
    let chunk = 4096usize;
    let mut pending_m: Vec<f64> = Vec::new();
    let mut pending_r: Vec<f64> = Vec::new();
    let mut pending_rows = 0usize;
    let flush = |pm: &mut Vec<f64>,
                 pr: &mut Vec<f64>,
                 rows: &mut usize,
                 words: &mut Vec<Vec<f64>>|
     -> Result<()> {
        if *rows == 0 {
            return Ok(());
        }
        let m_t = Tensor::from_vec(&[*rows, k], std::mem::take(pm))?;
        let out = if r > 0 {
            let r_t = Tensor::from_vec(&[*rows, r], std::mem::take(pr))?;
            enc.encode(arena, &m_t, Some(&r_t))?
        } else {
            pr.clear();
            enc.encode(arena, &m_t, None)?
        };
        for row in 0..*rows {
            words.push(out.row(row).to_vec());
        }
        *rows = 0;
        Ok(())
    };
    for m_idx in 0..num_m {
        for r_idx in 0..num_r {
            pending_m.extend(bits_from_index(m_idx, k));
            if r > 0 {
                pending_r.extend(bits_from_index(r_idx, r));
            }
            pending_rows += 1;
            if pending_rows == chunk {
                flush(&mut pending_m, &mut pending_r, &mut pending_rows, &mut words)?;
            }
        }
    }
    flush(&mut pending_m, &mut pending_r, &mut pending_rows, &mut words)?;
    debug_assert_eq!(words.len(), num_m * num_r);
    Ok(Codebook { k, r, n, words })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngHub, Stream};

    fn classic_spec(k: usize, n: usize) -> CodeSpec {
        CodeSpec {
            k,
            r: 0,
            n,
            arch: Arch::Classic,
            mix_factor: 20.0,
            mix_placement: MixPlacement::RandomBranch,
            binarize_scrambler: true,
        }
    }

    fn randomized_spec(k: usize, r: usize, n: usize, f: f64) -> CodeSpec {
        CodeSpec {
            k,
            r,
            n,
            arch: Arch::Randomized,
            mix_factor: f,
            mix_placement: MixPlacement::RandomBranch,
            binarize_scrambler: true,
        }
    }

    #[test]
    fn classic_encoder_emits_bpsk_symbols_at_batch_size() {
        let hub = RngHub::new(5);
        let mut arena = Arena::new();
        let enc = build_encoder(
            &mut arena,
            &mut hub.stream(Stream::Init),
            classic_spec(5, 16),
            &ArchParams::ci(),
        )
        .unwrap();
        let m = sample_bits(2048, 5, &mut hub.stream(Stream::Messages));
        let c = enc.encode(&arena, &m, None).unwrap();
        assert_eq!(c.shape(), &[2048, 16]);
        assert!(c.data().iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn encoder_is_a_deterministic_map() {
        let hub = RngHub::new(6);
        let mut arena = Arena::new();
        let enc = build_encoder(
            &mut arena,
            &mut hub.stream(Stream::Init),
            classic_spec(4, 8),
            &ArchParams::ci(),
        )
        .unwrap();
        let m = sample_bits(16, 4, &mut hub.stream(Stream::Messages));
        let c1 = enc.encode(&arena, &m, None).unwrap();
        let c2 = enc.encode(&arena, &m, None).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn untrained_classic_encoder_separates_most_messages() {
        let hub = RngHub::new(7);
        let mut arena = Arena::new();
        let enc = build_encoder(
            &mut arena,
            &mut hub.stream(Stream::Init),
            classic_spec(5, 16),
            &ArchParams::ci(),
        )
        .unwrap();
        let book = enumerate_codebook(&enc, &arena).unwrap();
        let distinct: std::collections::HashSet<Vec<u64>> = book
            .words
            .iter()
            .map(|w| w.iter().map(|v| v.to_bits()).collect())
            .collect();
        let collisions = book.words.len() - distinct.len();
        println!("collisions over all 2^5 messages: {collisions}");
        assert!(distinct.len() > 1, "encoder collapsed to a constant map");
    }

    #[test]
    fn scrambling_encoder_doubles_the_parameter_count() {
        let hub = RngHub::new(8);
        let mut arena_c = Arena::new();
        let enc_c = build_encoder(
            &mut arena_c,
            &mut hub.stream(Stream::Init),
            classic_spec(8, 8),
            &ArchParams::ci(),
        )
        .unwrap();
        let mut arena_s = Arena::new();
        let spec_s = CodeSpec {
            arch: Arch::Scrambling,
            ..classic_spec(8, 8)
        };
        let enc_s = build_encoder(
            &mut arena_s,
            &mut hub.stream(Stream::Init),
            spec_s,
            &ArchParams::ci(),
        )
        .unwrap();
        // With k == n the scrambler stack has exactly the classic stack's shape.
        assert_eq!(
            arena_s.set(enc_s.set).scalar_count(),
            2 * arena_c.set(enc_c.set).scalar_count()
        );
        let m = sample_bits(4, 8, &mut hub.stream(Stream::Messages));
        let c = enc_s.encode(&arena_s, &m, None).unwrap();
        assert!(c.data().iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn gradients_reach_the_scrambling_encoders_first_stack() {
        let hub = RngHub::new(9);
        let mut arena = Arena::new();
        let spec = CodeSpec {
            arch: Arch::Scrambling,
            ..classic_spec(3, 8)
        };
        let enc = build_encoder(
            &mut arena,
            &mut hub.stream(Stream::Init),
            spec,
            &ArchParams::ci(),
        )
        .unwrap();
        let mut g = Graph::new();
        let m = sample_bits(32, 3, &mut hub.stream(Stream::Messages));
        let mn = g.constant(m).unwrap();
        let c = enc.forward(&arena, &mut g, mn, None).unwrap();
        let target = g.constant(Tensor::zeros(&[32, 8])).unwrap();
        let loss = g.l1_loss(c, target).unwrap();
        g.backward(loss, &mut arena).unwrap();
        // Parameter 0 is the first stack's first dense weight.
        let first = &arena.set(enc.set).params[0];
        assert_eq!(first.name, "fc0.w");
        let norm = first.grad.l2_norm();
        assert!(norm > 0.0, "no gradient reached the first stack");
    }

    #[test]
    fn randomized_encoder_with_zero_mix_ignores_random_bits() {
        let hub = RngHub::new(10);
        let mut arena = Arena::new();
        let enc = build_encoder(
            &mut arena,
            &mut hub.stream(Stream::Init),
            randomized_spec(3, 4, 8, 0.0),
            &ArchParams::ci(),
        )
        .unwrap();
        let m_row = Tensor::from_vec(&[1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        let mut first: Option<Tensor> = None;
        for r_idx in 0..16usize {
            let r_row = Tensor::from_vec(&[1, 4], bits_from_index(r_idx, 4)).unwrap();
            let c = enc.encode(&arena, &m_row, Some(&r_row)).unwrap();
            match &first {
                None => first = Some(c),
                Some(f) => assert_eq!(&c, f, "codeword changed with r at F = 0"),
            }
        }
    }

    #[test]
    fn randomized_encoder_with_zeroed_r_branch_matches_its_m_path() {
        let hub = RngHub::new(11);
        let mut arena = Arena::new();
        let enc = build_encoder(
            &mut arena,
            &mut hub.stream(Stream::Init),
            randomized_spec(3, 4, 8, 20.0),
            &ArchParams::ci(),
        )
        .unwrap();
        // Zero every r-branch parameter; the mix then passes out_m through.
        for p in &mut arena.set_mut(enc.set).params {
            if p.name.starts_with("r.") {
                p.value.fill(0.0);
            }
        }
        let m_row = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 1.0]).unwrap();
        let mut first: Option<Tensor> = None;
        for r_idx in 0..16usize {
            let r_row = Tensor::from_vec(&[1, 4], bits_from_index(r_idx, 4)).unwrap();
            let c = enc.encode(&arena, &m_row, Some(&r_row)).unwrap();
            match &first {
                None => first = Some(c),
                Some(f) => assert_eq!(&c, f),
            }
        }
    }

    #[test]
    fn randomized_codebook_reports_coset_support() {
        let hub = RngHub::new(12);
        let mut arena = Arena::new();
        let enc = build_encoder(
            &mut arena,
            &mut hub.stream(Stream::Init),
            randomized_spec(2, 3, 8, 20.0),
            &ArchParams::ci(),
        )
        .unwrap();
        let book = enumerate_codebook(&enc, &arena).unwrap();
        assert_eq!(book.words.len(), 1 << (2 + 3));
        for m in 0..book.num_messages() {
            let distinct = book.distinct_in_coset(m);
            println!("message {m}: {distinct} distinct codewords of {}", book.coset_size());
            assert!(distinct >= 1);
        }
        assert_eq!(book.word(1, 2).len(), 8);
    }

    #[test]
    fn decoder_outputs_live_strictly_inside_the_unit_interval() {
        let hub = RngHub::new(13);
        let mut arena = Arena::new();
        let dec = build_decoder(
            &mut arena,
            &mut hub.stream(Stream::Init),
            "bob",
            8,
            3,
            &ArchParams::ci(),
        )
        .unwrap();
        // Shrink the random weights so the sigmoid stays away from the f64
        // rounding boundary; the property under test is the output layer.
        for p in &mut arena.set_mut(dec.set).params {
            p.value.scale_in_place(0.05);
        }
        let y = sample_bits(64, 8, &mut hub.stream(Stream::Eval));
        let out = dec.infer(&arena, &y).unwrap();
        assert_eq!(out.shape(), &[64, 3]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let bits = threshold_bits(&out);
        assert_eq!(bits.len(), 64 * 3);
    }

    #[test]
    fn untrained_decoder_sits_at_chance_level() {
        let hub = RngHub::new(14);
        let mut arena = Arena::new();
        let k = 5usize;
        let dec = build_decoder(
            &mut arena,
            &mut hub.stream(Stream::Init),
            "bob",
            16,
            k,
            &ArchParams::ci(),
        )
        .unwrap();
        let mut rng = hub.stream(Stream::Eval);
        let rows = 20_000usize; // 1e5 bits
        let m = sample_bits(rows, k, &mut rng);
        // Random +-1 observations, unrelated to m.
        let y_bits = sample_bits(rows, 16, &mut rng);
        let y = Tensor::from_vec(
            &[rows, 16],
            y_bits.data().iter().map(|&b| 1.0 - 2.0 * b).collect(),
        )
        .unwrap();
        let out = dec.infer(&arena, &y).unwrap();
        let decoded = threshold_bits(&out);
        let errors: usize = decoded
            .iter()
            .zip(m.data())
            .filter(|(&d, &t)| f64::from(d) != t)
            .count();
        let ber = errors as f64 / (rows * k) as f64;
        assert!((ber - 0.5).abs() < 0.05, "untrained BER {ber}");
    }

    #[test]
    fn code_spec_validation_catches_bad_shapes() {
        assert!(classic_spec(0, 4).validate().is_err());
        assert!(classic_spec(5, 4).validate().is_err());
        assert!(randomized_spec(3, 0, 8, 20.0).validate().is_err());
        assert!(randomized_spec(3, 2, 8, -1.0).validate().is_err());
        let mut with_r = classic_spec(3, 8);
        with_r.r = 2;
        assert!(with_r.validate().is_err());
        assert!(classic_spec(3, 8).validate().is_ok());
    }

    #[test]
    fn arch_params_validation_checks_the_conv_geometry() {
        let mut p = ArchParams::ci();
        p.enc_embed = 65;
        assert!(p.validate().is_err());
        let mut p = ArchParams::ci();
        p.reshape_channels = 32;
        assert!(p.validate().is_err(), "length 2 < kernel 4 must fail");
        assert!(ArchParams::paper().validate().is_ok());
        assert!(ArchParams::desk().validate().is_ok());
    }

    #[test]
    fn bits_from_index_is_msb_first() {
        assert_eq!(bits_from_index(5, 4), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(bits_from_index(0, 3), vec![0.0, 0.0, 0.0]);
    }
}
