//! Post-training evaluation: BER at Bob and Eve, leakage via the neural
//! estimator and via exact codebook enumeration, equivocation points, and
//! the sweep that emits figure data.

use std::io::Write as _;
use std::path::Path;
use std::sync::Mutex;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::channel::transmit;
use crate::checkpoint::Checkpoint;
use crate::config::{checkpoint_path, RunConfig, SweepConfig};
use crate::gf2::{all_bit_vectors, bpsk, coset_encode, Gf2Matrix};
use crate::mine::{build_mine, mine_ascent_step, permute_rows, random_permutation};
use crate::nets::{sample_bits, threshold_bits, Codebook, DecoderNet, EncoderNet};
use crate::nn::{AdamState, Arena, Tensor};
use crate::rng::Stream;
use crate::trainer::{train, WiretapSystem};
use crate::{Error, Result};

pub const LN_2: f64 = std::f64::consts::LN_2;

// ---------------------------------------------------------------------------
// BER
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct BerEstimate {
    pub ber: f64,
    /// Wilson-interval half-width at 95%.
    pub ci_halfwidth: f64,
    pub bits_tested: usize,
    /// Set when fewer than 10^4 bits were measured.
    pub low_sample_warning: bool,
}

/// 95% Wilson interval half-width for an error proportion.
pub fn wilson_halfwidth(errors: usize, trials: usize) -> f64 {
    if trials == 0 {
        return f64::NAN;
    }
    let z = 1.959963984540054_f64;
    let n = trials as f64;
    let p = errors as f64 / n;
    let z2 = z * z;
    z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt()
}

/// Monte-Carlo BER of `decoder` reading the message bits through an AWGN
/// channel of the given variance, over fresh messages and random bits.
pub fn estimate_ber(
    encoder: &EncoderNet,
    decoder: &DecoderNet,
    arena: &Arena,
    sigma2: f64,
    num_info_bits: usize,
    rng: &mut impl Rng,
) -> Result<BerEstimate> {
    let k = encoder.spec.k;
    let messages = num_info_bits.div_ceil(k).max(1);
    let chunk = 2048usize;
    let mut errors = 0usize;
    let mut tested_bits = 0usize;
    let mut remaining = messages;
    while remaining > 0 {
        let b = remaining.min(chunk);
        let m = sample_bits(b, k, rng);
        let r = if encoder.spec.r > 0 {
            Some(sample_bits(b, encoder.spec.r, rng))
        } else {
            None
        };
        let c = encoder.encode(arena, &m, r.as_ref())?;
        let y = transmit(&c, sigma2, rng)?;
        let soft = decoder.infer(arena, &y)?;
        let hard = threshold_bits(&soft);
        errors += hard
            .iter()
            .zip(m.data())
            .filter(|(&h, &t)| f64::from(h) != t)
            .count();
        tested_bits += b * k;
        remaining -= b;
    }
    Ok(BerEstimate {
        ber: errors as f64 / tested_bits as f64,
        ci_halfwidth: wilson_halfwidth(errors, tested_bits),
        bits_tested: tested_bits,
        low_sample_warning: tested_bits < 10_000,
    })
}

// ---------------------------------------------------------------------------
// Exact leakage oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct OracleLeakage {
    /// `I(m; y)` in bits (raw Monte-Carlo mean; may be slightly negative).
    pub bits: f64,
    pub std_error: f64,
    pub draws: usize,
}

/// Monte-Carlo estimate of `I(m; y)` for an enumerable codebook observed
/// through AWGN, via `E[log2 p(y|m) - log2 p(y)]` with log-sum-exp over the
/// full codebook. Cost scales as `num_mc * 2^(k+r) * n`.
pub fn exact_leakage_oracle(
    book: &Codebook,
    sigma2: f64,
    num_mc_per_message: usize,
    rng: &mut impl Rng,
) -> Result<OracleLeakage> {
    if book.k + book.r > 20 {
        return Err(Error::Contract(format!(
            "leakage oracle refuses k + r = {} > 20 (2^(k+r) codewords to enumerate)",
            book.k + book.r
        )));
    }
    if sigma2 <= 0.0 {
        return Err(Error::Contract("oracle needs sigma2 > 0".into()));
    }
    let n = book.n;
    let num_words = book.words.len();
    let coset = book.coset_size();
    // Codeword matrix transposed: n x num_words, so draws x words is one GEMM.
    let mut ct = vec![0.0f64; n * num_words];
    for (j, w) in book.words.iter().enumerate() {
        for (d, &v) in w.iter().enumerate() {
            ct[d * num_words + j] = v;
        }
    }

    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut draws = 0usize;
    let chunk = (1usize << 22) / num_words.max(1); // keep the score matrix small
    let chunk = chunk.clamp(1, 4096);
    let std = sigma2.sqrt();

    for m_idx in 0..book.num_messages() {
        let mut remaining = num_mc_per_message;
        while remaining > 0 {
            let b = remaining.min(chunk);
            // y = c(m, r~uniform) + w
            let mut y = vec![0.0f64; b * n];
            for row in 0..b {
                let r_idx = rng.random_range(0..coset);
                let word = book.word(m_idx, r_idx);
                for d in 0..n {
                    y[row * n + d] = word[d] + std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            // scores[row][j] = y_row . c_j / sigma2
            let mut scores = vec![0.0f64; b * num_words];
            crate::nn::gemm_slices(
                1.0 / sigma2,
                &y,
                (b, n),
                &ct,
                (n, num_words),
                &mut scores,
            );
            for row in 0..b {
                let s = &scores[row * num_words..(row + 1) * num_words];
                let coset_slice = &s[m_idx * coset..(m_idx + 1) * coset];
                let lse_coset = logsumexp(coset_slice);
                let lse_all = logsumexp(s);
                let v = book.k as f64 + (lse_coset - lse_all) / LN_2;
                sum += v;
                sum_sq += v * v;
                draws += 1;
            }
            remaining -= b;
        }
    }
    let mean = sum / draws as f64;
    let var = (sum_sq / draws as f64 - mean * mean).max(0.0);
    Ok(OracleLeakage {
        bits: mean,
        std_error: (var / draws as f64).sqrt(),
        draws,
    })
}

fn logsumexp(vals: &[f64]) -> f64 {
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Coset codebook of a classical `[m r][H; G]` scheme, BPSK-mapped, for
/// baseline comparisons against learned codebooks.
pub fn gf2_coset_codebook(h: &Gf2Matrix, g: &Gf2Matrix) -> Result<Codebook> {
    let k = h.rows();
    let r = g.rows();
    if k + r > 20 {
        return Err(Error::Contract("codebook enumeration guard: k + r > 20".into()));
    }
    let n = h.cols();
    let mut words = Vec::with_capacity(1 << (k + r));
    for m in all_bit_vectors(k) {
        for rb in all_bit_vectors(r) {
            words.push(bpsk(&coset_encode(h, g, &m, &rb)?));
        }
    }
    Ok(Codebook { k, r, n, words })
}

// ---------------------------------------------------------------------------
// Neural leakage read-out
// ---------------------------------------------------------------------------

/// Post-hoc leakage read-out in bits: fine-tunes a copy of the phi network
/// against the frozen encoder, then averages the Donsker-Varadhan estimate
/// over fresh batches.
pub fn leakage_mine(
    system: &WiretapSystem,
    readout_steps: usize,
    readout_batches: usize,
    batch_size: usize,
) -> Result<f64> {
    let mut rng = system.hub.stream(Stream::Eval);
    // A fresh arena holding a copy of phi.
    let mut arena = Arena::new();
    let net = build_mine(
        &mut arena,
        &mut rng,
        "readout",
        system.code.n,
        system.code.k,
        &system.arch,
    );
    {
        let src = system.arena.set(system.mine_eve.set);
        let dst = arena.set_mut(net.set);
        for (d, s) in dst.params.iter_mut().zip(&src.params) {
            assert_eq!(d.value.shape(), s.value.shape(), "phi copy shape");
            d.value = s.value.clone();
        }
    }
    let mut adam = AdamState::new(
        system.adam_phi.learning_rate,
        0.9,
        0.999,
        1e-8,
        arena.set(net.set),
    );

    let fresh_batch = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<(Tensor, Tensor, Tensor)> {
        let m = sample_bits(batch_size, system.code.k, rng);
        let r = if system.code.r > 0 {
            Some(sample_bits(batch_size, system.code.r, rng))
        } else {
            None
        };
        let c = system.encoder.encode(&system.arena, &m, r.as_ref())?;
        let y_e = transmit(&c, system.channel.sigma2_eve, rng)?;
        let m_tilde = permute_rows(&m, &random_permutation(batch_size, rng));
        Ok((y_e, m, m_tilde))
    };

    for _ in 0..readout_steps {
        let (y_e, m, m_tilde) = fresh_batch(&mut rng)?;
        mine_ascent_step(&net, &mut arena, &mut adam, &y_e, &m, &m_tilde)?;
    }
    let mut total = 0.0;
    for _ in 0..readout_batches.max(1) {
        let (y_e, m, m_tilde) = fresh_batch(&mut rng)?;
        total += net.dv_estimate(&arena, &y_e, &m, &m_tilde)?;
    }
    Ok(total / readout_batches.max(1) as f64 / LN_2)
}

// ---------------------------------------------------------------------------
// Equivocation and the report row
// ---------------------------------------------------------------------------

/// Normalized equivocation `1 - leakage/k`, clamped into [0, 1]. The flag
/// reports whether clamping fired.
pub fn equivocation_point(leakage_bits: f64, k: usize) -> (f64, bool) {
    let raw = 1.0 - leakage_bits / k as f64;
    let clamped = raw.clamp(0.0, 1.0);
    (clamped, raw != clamped)
}

/// One evaluated grid point.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub arch: String,
    pub k: usize,
    pub r: usize,
    pub n: usize,
    pub bob_snr_db: f64,
    pub eve_snr_db: f64,
    pub ber_bob: f64,
    pub ber_bob_ci: f64,
    pub ber_eve: f64,
    pub ber_eve_ci: f64,
    pub leak_mine_bits: f64,
    pub leak_oracle_bits: Option<f64>,
    pub leak_oracle_se: Option<f64>,
    pub equivocation: f64,
    pub equivocation_clamped: bool,
    pub bits_tested: usize,
    pub low_sample_warning: bool,
}

pub const REPORT_HEADER: &str =
    "arch,k,r,n,bob_snr_db,eve_snr_db,ber_bob,ber_bob_ci,ber_eve,leak_mine_bits,leak_oracle_bits,equivocation";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let oracle = self
            .leak_oracle_bits
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
            self.arch,
            self.k,
            self.r,
            self.n,
            self.bob_snr_db,
            self.eve_snr_db,
            self.ber_bob,
            self.ber_bob_ci,
            self.ber_eve,
            self.leak_mine_bits,
            oracle,
            self.equivocation
        )
    }
}

/// Options for one evaluation pass.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub ber_bits: usize,
    pub mine_readout_steps: usize,
    pub mine_readout_batches: usize,
    pub readout_batch_size: usize,
    /// Also run the exact enumeration oracle (needs k + r <= 20).
    pub oracle: bool,
    pub oracle_mc: usize,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        EvalOptions {
            ber_bits: cfg.eval.ber_bits,
            mine_readout_steps: cfg.eval.mine_readout_steps,
            mine_readout_batches: cfg.eval.mine_readout_batches,
            readout_batch_size: cfg.optimizer.batch_size,
            oracle: false,
            oracle_mc: cfg.eval.oracle_mc,
        }
    }
}

/// Full evaluation of a trained (frozen) system.
pub fn evaluate(system: &WiretapSystem, opts: &EvalOptions) -> Result<EvalReport> {
    let mut rng = system.hub.stream(Stream::Eval);
    let bob = estimate_ber(
        &system.encoder,
        &system.bob_m,
        &system.arena,
        system.channel.sigma2_bob,
        opts.ber_bits,
        &mut rng,
    )?;
    let eve = estimate_ber(
        &system.encoder,
        &system.eve,
        &system.arena,
        system.channel.sigma2_eve,
        opts.ber_bits,
        &mut rng,
    )?;
    let leak_mine = leakage_mine(
        system,
        opts.mine_readout_steps,
        opts.mine_readout_batches,
        opts.readout_batch_size,
    )?;
    let leak_mine = leak_mine.max(0.0);

    let (leak_oracle, leak_oracle_se) = if opts.oracle {
        let book = crate::nets::enumerate_codebook(&system.encoder, &system.arena)?;
        let mut oracle_rng = system.hub.stream(Stream::OracleMc);
        let est = exact_leakage_oracle(
            &book,
            system.channel.sigma2_eve,
            opts.oracle_mc,
            &mut oracle_rng,
        )?;
        (Some(est.bits.clamp(0.0, book.k as f64)), Some(est.std_error))
    } else {
        (None, None)
    };

    let (equivocation, equivocation_clamped) = equivocation_point(leak_mine, system.code.k);
    Ok(EvalReport {
        arch: system.code.arch.name().to_string(),
        k: system.code.k,
        r: system.code.r,
        n: system.code.n,
        bob_snr_db: system.channel.eb_n0_db_bob,
        eve_snr_db: system.channel.eb_n0_db_eve,
        ber_bob: bob.ber,
        ber_bob_ci: bob.ci_halfwidth,
        ber_eve: eve.ber,
        ber_eve_ci: eve.ci_halfwidth,
        leak_mine_bits: leak_mine,
        leak_oracle_bits: leak_oracle,
        leak_oracle_se,
        equivocation,
        equivocation_clamped,
        bits_tested: bob.bits_tested,
        low_sample_warning: bob.low_sample_warning,
    })
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct SweepSummary {
    pub rows: Vec<EvalReport>,
    /// Labels of grid points that failed, with the error text.
    pub failures: Vec<(String, String)>,
    pub skipped_missing: Vec<String>,
}

/// Trains (when allowed) and evaluates every grid point, writing the combined
/// CSV to the base config's report path. Completed points are detected by
/// checkpoint presence and not retrained.
pub fn run_sweep(sweep: &SweepConfig, jobs: usize, train_missing: bool) -> Result<SweepSummary> {
    let points = sweep.points()?;
    let results: Vec<Mutex<Option<std::result::Result<EvalReport, String>>>> =
        points.iter().map(|_| Mutex::new(None)).collect();
    let skipped: Mutex<Vec<String>> = Mutex::new(Vec::new());
    let next: Mutex<usize> = Mutex::new(0);

    let worker = |_id: usize| {
        loop {
            let idx = {
                let mut guard = next.lock().unwrap();
                let idx = *guard;
                if idx >= points.len() {
                    return;
                }
                *guard += 1;
                idx
            };
            let point = &points[idx];
            let outcome = run_sweep_point(point, train_missing);
            match outcome {
                Ok(Some(report)) => {
                    *results[idx].lock().unwrap() = Some(Ok(report));
                }
                Ok(None) => {
                    skipped.lock().unwrap().push(point.label.clone());
                }
                Err(e) => {
                    *results[idx].lock().unwrap() = Some(Err(e.to_string()));
                }
            }
        }
    };

    let jobs = jobs.max(1).min(points.len().max(1));
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..jobs {
            handles.push(scope.spawn(move || worker(w)));
        }
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (point, slot) in points.iter().zip(&results) {
        match slot.lock().unwrap().take() {
            Some(Ok(report)) => rows.push(report),
            Some(Err(msg)) => failures.push((point.label.clone(), msg)),
            None => {}
        }
    }

    write_report_csv(&sweep.base.paths.report_csv, &rows)?;
    Ok(SweepSummary {
        rows,
        failures,
        skipped_missing: skipped.into_inner().unwrap(),
    })
}

fn run_sweep_point(
    point: &crate::config::SweepPoint,
    train_missing: bool,
) -> Result<Option<EvalReport>> {
    let cfg = &point.config;
    let ckpt = checkpoint_path(cfg);
    let system = if ckpt.exists() {
        let ck = Checkpoint::load(&ckpt)?;
        WiretapSystem::from_checkpoint(&ck)?
    } else if train_missing {
        let mut system = WiretapSystem::from_config(cfg)?;
        train(cfg, &mut system)?;
        system
    } else {
        return Ok(None);
    };
    let opts = EvalOptions {
        oracle: cfg.eval.oracle,
        ..EvalOptions::from_config(cfg)
    };
    evaluate(&system, &opts).map(Some)
}

pub fn write_report_csv(path: &Path, rows: &[EvalReport]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let io = |e| Error::io(path.display().to_string(), e);
    writeln!(f, "{REPORT_HEADER}").map_err(io)?;
    for row in rows {
        writeln!(f, "{}", row.csv_row()).map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngHub;

    #[test]
    fn wilson_halfwidth_matches_hand_computation() {
        // p = 0.5, n = 100: hw = 1.96/(1 + z^2/n) * sqrt(...) = 0.09617.
        let hw = wilson_halfwidth(50, 100);
        assert!((hw - 0.09617).abs() < 1e-4, "{hw}");
        assert!(wilson_halfwidth(0, 0).is_nan());
    }

    #[test]
    fn constant_codebook_leaks_nothing() {
        let hub = RngHub::new(41);
        let word = vec![1.0, -1.0, 1.0];
        let book = Codebook {
            k: 2,
            r: 1,
            n: 3,
            words: vec![word; 8],
        };
        let est = exact_leakage_oracle(&book, 0.5, 2000, &mut hub.stream(Stream::OracleMc))
            .unwrap();
        assert!(est.bits.abs() < 1e-9, "constant book leaked {}", est.bits);
    }

    #[test]
    fn noiseless_limit_of_an_injective_codebook_reveals_everything() {
        let hub = RngHub::new(43);
        // k = 2, r = 0: four distinct words.
        let book = Codebook {
            k: 2,
            r: 0,
            n: 4,
            words: vec![
                vec![1.0, 1.0, 1.0, 1.0],
                vec![1.0, -1.0, 1.0, -1.0],
                vec![-1.0, 1.0, -1.0, 1.0],
                vec![-1.0, -1.0, -1.0, -1.0],
            ],
        };
        let est = exact_leakage_oracle(&book, 1e-4, 2000, &mut hub.stream(Stream::OracleMc))
            .unwrap();
        assert!((est.bits - 2.0).abs() < 0.01, "sigma->0 leakage {}", est.bits);
    }

    #[test]
    fn one_bit_code_agrees_with_numerical_quadrature() {
        let hub = RngHub::new(47);
        let book = Codebook {
            k: 1,
            r: 0,
            n: 1,
            words: vec![vec![1.0], vec![-1.0]],
        };
        for sigma2 in [0.25, 0.5, 1.0] {
            let est = exact_leakage_oracle(
                &book,
                sigma2,
                200_000,
                &mut hub.stream(Stream::OracleMc),
            )
            .unwrap();
            let exact = binary_awgn_mi_quadrature(sigma2);
            assert!(
                (est.bits - exact).abs() < 0.01,
                "sigma2 {sigma2}: oracle {} vs quadrature {exact}",
                est.bits
            );
        }
    }

    /// Simpson-rule MI of a 1-D binary-input AWGN channel, in bits.
    fn binary_awgn_mi_quadrature(sigma2: f64) -> f64 {
        let sigma = sigma2.sqrt();
        let lo = -1.0 - 8.0 * sigma;
        let hi = 1.0 + 8.0 * sigma;
        let steps = 20_000usize;
        let h = (hi - lo) / steps as f64;
        let pdf = |y: f64, c: f64| (-(y - c) * (y - c) / (2.0 * sigma2)).exp()
            / (2.0 * std::f64::consts::PI * sigma2).sqrt();
        let integrand = |y: f64| {
            let p1 = pdf(y, 1.0);
            let p0 = pdf(y, -1.0);
            let py = 0.5 * (p1 + p0);
            let mut acc = 0.0;
            if p1 > 0.0 && py > 0.0 {
                acc += 0.5 * p1 * (p1 / py).log2();
            }
            if p0 > 0.0 && py > 0.0 {
                acc += 0.5 * p0 * (p0 / py).log2();
            }
            acc
        };
        let mut total = integrand(lo) + integrand(hi);
        for i in 1..steps {
            let y = lo + i as f64 * h;
            total += integrand(y) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        total * h / 3.0
    }

    #[test]
    fn equivocation_point_normalizes_and_clamps() {
        let (e, clamped) = equivocation_point(0.02, 5);
        assert!((e - 0.996).abs() < 1e-12);
        assert!(!clamped);
        assert_eq!(equivocation_point(0.0, 5), (1.0, false));
        assert_eq!(equivocation_point(5.0, 5), (0.0, false));
        let (e, clamped) = equivocation_point(-0.2, 5);
        assert_eq!(e, 1.0);
        assert!(clamped);
    }

    #[test]
    fn oracle_guard_refuses_oversized_codebooks() {
        let hub = RngHub::new(49);
        let book = Codebook {
            k: 15,
            r: 6,
            n: 2,
            words: vec![],
        };
        assert!(
            exact_leakage_oracle(&book, 0.5, 10, &mut hub.stream(Stream::OracleMc)).is_err()
        );
    }

    #[test]
    fn gf2_coset_codebook_has_the_right_geometry() {
        let h = Gf2Matrix::from_row_strings(&["1100", "0110"]).unwrap();
        let g = Gf2Matrix::from_row_strings(&["0011"]).unwrap();
        let book = gf2_coset_codebook(&h, &g).unwrap();
        assert_eq!(book.words.len(), 8);
        assert_eq!(book.n, 4);
        assert!(book.words.iter().all(|w| w.iter().all(|&v| v == 1.0 || v == -1.0)));
    }

    #[test]
    fn report_csv_row_matches_the_header_shape() {
        let report = EvalReport {
            arch: "classic".into(),
            k: 5,
            r: 0,
            n: 16,
            bob_snr_db: 10.0,
            eve_snr_db: -2.0,
            ber_bob: 0.008,
            ber_bob_ci: 0.0001,
            ber_eve: 0.26,
            ber_eve_ci: 0.001,
            leak_mine_bits: 0.7,
            leak_oracle_bits: None,
            leak_oracle_se: None,
            equivocation: 0.86,
            equivocation_clamped: false,
            bits_tested: 1_000_000,
            low_sample_warning: false,
        };
        let row = report.csv_row();
        assert_eq!(row.split(',').count(), REPORT_HEADER.split(',').count());
        // Missing oracle leaves the column empty.
        assert!(row.contains(",,"));
    }
}
