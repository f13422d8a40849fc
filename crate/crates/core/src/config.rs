//! Run configuration: TOML in, fully-materialized settings out.
//!
//! Every field has a default matching the full-scale training setup
//! (batch 2048, learning rate 0.0004, 500/400-wide networks, F = 20).
//! The `profile` key rescales those defaults as a block — `"desk"` for
//! laptop-scale training runs, `"ci"` for fast automated tests — and any
//! explicitly written field still wins over its profile default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelCfg;
use crate::gf2::Gf2Matrix;
use crate::nets::{Arch, ArchParams, CodeSpec, MixPlacement};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Desk,
    Ci,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    /// Algorithm-style updates: Alice-Bob, Eve, and both statistics networks
    /// every iteration on the same minibatch.
    Simultaneous,
    /// Alice-Bob and Eve take turns, one minibatch each; the statistics
    /// networks update every minibatch.
    Alternate,
}

/// Fully-materialized run settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,
    pub code: CodeSection,
    pub channel: ChannelSection,
    pub loss: LossSection,
    pub optimizer: OptimizerSection,
    pub schedule: ScheduleSection,
    pub arch: ArchSection,
    pub paths: PathsSection,
    pub eval: EvalSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gf2: Option<Gf2Section>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSection {
    pub arch: String,
    pub k: usize,
    pub r: usize,
    pub n: usize,
    pub mix_factor: f64,
    pub mix_placement: String,
    pub binarize_scrambler: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSection {
    pub bob_eb_n0_db: f64,
    pub eve_eb_n0_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSection {
    pub max_iters: usize,
    /// Statistics-network-only steps before the encoder sees security
    /// gradients.
    pub warmup: usize,
    pub plateau_tol: f64,
    pub plateau_window: usize,
    pub mode: ScheduleMode,
    pub train_mine: bool,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSection {
    pub enc_hidden: usize,
    pub enc_hidden_layers: usize,
    pub enc_embed: usize,
    pub reshape_channels: usize,
    pub conv_filters: [usize; 2],
    pub conv_kernel: usize,
    pub dec_hidden: usize,
    pub dec_layers: usize,
    pub mine_hidden: usize,
    pub mine_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathsSection {
    pub checkpoint_dir: PathBuf,
    pub metrics_csv: PathBuf,
    pub report_csv: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    /// Information bits per BER point.
    pub ber_bits: usize,
    /// Post-hoc ascent steps on the frozen encoder before the leakage
    /// read-out.
    pub mine_readout_steps: usize,
    /// Fresh batches averaged for the read-out.
    pub mine_readout_batches: usize,
    /// Monte-Carlo draws per message for the exact leakage oracle.
    pub oracle_mc: usize,
    /// Run the exact enumeration oracle during evaluation/sweeps.
    pub oracle: bool,
}

/// Optional GF(2) matrices, rows written as 0/1 strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gf2Section {
    pub h: Vec<String>,
    pub g: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s: Option<Vec<String>>,
}

impl Gf2Section {
    pub fn h_matrix(&self) -> Result<Gf2Matrix> {
        Gf2Matrix::from_row_strings(&self.h)
    }

    pub fn g_matrix(&self) -> Result<Gf2Matrix> {
        Gf2Matrix::from_row_strings(&self.g)
    }

    pub fn s_matrix(&self) -> Result<Option<Gf2Matrix>> {
        self.s
            .as_ref()
            .map(|rows| Gf2Matrix::from_row_strings(rows))
            .transpose()
    }
}

// ---------------------------------------------------------------------------
// Raw (sparse) form and materialization
// ---------------------------------------------------------------------------

macro_rules! opt_struct {
    ($raw:ident, $full:ident { $($field:ident : $ty:ty),+ $(,)? }) => {
        #[derive(Debug, Clone, Default, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $raw {
            $( pub $field: Option<$ty>, )+
        }

        impl $raw {
            fn fill(self, d: $full) -> $full {
                $full {
                    $( $field: self.$field.unwrap_or(d.$field), )+
                }
            }
        }
    };
}

opt_struct!(RawCode, CodeSection {
    arch: String,
    k: usize,
    r: usize,
    n: usize,
    mix_factor: f64,
    mix_placement: String,
    binarize_scrambler: bool,
});

opt_struct!(RawChannel, ChannelSection {
    bob_eb_n0_db: f64,
    eve_eb_n0_db: f64,
});

opt_struct!(RawLoss, LossSection {
    alpha: f64,
    beta: f64,
    gamma: f64,
});

opt_struct!(RawOptimizer, OptimizerSection {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    batch_size: usize,
});

opt_struct!(RawSchedule, ScheduleSection {
    max_iters: usize,
    warmup: usize,
    plateau_tol: f64,
    plateau_window: usize,
    mode: ScheduleMode,
    train_mine: bool,
    checkpoint_every: usize,
    log_every: usize,
});

opt_struct!(RawArch, ArchSection {
    enc_hidden: usize,
    enc_hidden_layers: usize,
    enc_embed: usize,
    reshape_channels: usize,
    conv_filters: [usize; 2],
    conv_kernel: usize,
    dec_hidden: usize,
    dec_layers: usize,
    mine_hidden: usize,
    mine_layers: usize,
});

opt_struct!(RawPaths, PathsSection {
    checkpoint_dir: PathBuf,
    metrics_csv: PathBuf,
    report_csv: PathBuf,
});

opt_struct!(RawEval, EvalSection {
    ber_bits: usize,
    mine_readout_steps: usize,
    mine_readout_batches: usize,
    oracle_mc: usize,
    oracle: bool,
});

/// The shape of a config file on disk: everything optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
    #[serde(default)]
    pub code: RawCode,
    #[serde(default)]
    pub channel: RawChannel,
    #[serde(default)]
    pub loss: RawLoss,
    #[serde(default)]
    pub optimizer: RawOptimizer,
    #[serde(default)]
    pub schedule: RawSchedule,
    #[serde(default)]
    pub arch: RawArch,
    #[serde(default)]
    pub paths: RawPaths,
    #[serde(default)]
    pub eval: RawEval,
    pub gf2: Option<Gf2Section>,
}

impl RawConfig {
    pub fn materialize(self) -> Result<RunConfig> {
        let profile = self.profile.unwrap_or(Profile::Paper);
        let d = RunConfig::defaults(profile);
        let cfg = RunConfig {
            seed: self.seed.unwrap_or(d.seed),
            profile,
            code: self.code.fill(d.code),
            channel: self.channel.fill(d.channel),
            loss: self.loss.fill(d.loss),
            optimizer: self.optimizer.fill(d.optimizer),
            schedule: self.schedule.fill(d.schedule),
            arch: self.arch.fill(d.arch),
            paths: self.paths.fill(d.paths),
            eval: self.eval.fill(d.eval),
            gf2: self.gf2,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> RunConfig {
        let arch_params = match profile {
            Profile::Paper => ArchParams::paper(),
            Profile::Desk => ArchParams::desk(),
            Profile::Ci => ArchParams::ci(),
        };
        let (batch_size, max_iters, warmup) = match profile {
            Profile::Paper => (2048, 20_000, 500),
            Profile::Desk => (512, 8_000, 500),
            Profile::Ci => (256, 2_000, 200),
        };
        RunConfig {
            seed: 1,
            profile,
            code: CodeSection {
                arch: "randomized".into(),
                k: 5,
                r: 11,
                n: 16,
                mix_factor: 20.0,
                mix_placement: "random-branch".into(),
                binarize_scrambler: true,
            },
            channel: ChannelSection {
                bob_eb_n0_db: 10.0,
                eve_eb_n0_db: -2.0,
            },
            loss: LossSection {
                alpha: 1.0,
                beta: 1.0,
                gamma: 1.0,
            },
            optimizer: OptimizerSection {
                learning_rate: 0.0004,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
                batch_size,
            },
            schedule: ScheduleSection {
                max_iters,
                warmup,
                plateau_tol: 1e-3,
                plateau_window: 2000,
                mode: ScheduleMode::Simultaneous,
                train_mine: true,
                checkpoint_every: 2000,
                log_every: 1,
            },
            arch: ArchSection {
                enc_hidden: arch_params.enc_hidden,
                enc_hidden_layers: arch_params.enc_hidden_layers,
                enc_embed: arch_params.enc_embed,
                reshape_channels: arch_params.reshape_channels,
                conv_filters: [arch_params.conv_filters.0, arch_params.conv_filters.1],
                conv_kernel: arch_params.conv_kernel,
                dec_hidden: arch_params.dec_hidden,
                dec_layers: arch_params.dec_layers,
                mine_hidden: arch_params.mine_hidden,
                mine_layers: arch_params.mine_layers,
            },
            paths: PathsSection {
                checkpoint_dir: "runs/checkpoints".into(),
                metrics_csv: "runs/metrics.csv".into(),
                report_csv: "runs/report.csv".into(),
            },
            eval: EvalSection {
                ber_bits: 1_000_000,
                mine_readout_steps: 2000,
                mine_readout_batches: 64,
                oracle_mc: 100_000,
                oracle: false,
            },
            gf2: None,
        }
    }

    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        raw.materialize()
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        RunConfig::parse_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Path fields may be overridden from the environment
    /// (`WIRETAP_CHECKPOINT_DIR`, `WIRETAP_METRICS_CSV`, `WIRETAP_REPORT_CSV`);
    /// nothing else is overridable this way.
    pub fn apply_env_overrides(&mut self) {
        if let Ok(v) = std::env::var("WIRETAP_CHECKPOINT_DIR") {
            self.paths.checkpoint_dir = v.into();
        }
        if let Ok(v) = std::env::var("WIRETAP_METRICS_CSV") {
            self.paths.metrics_csv = v.into();
        }
        if let Ok(v) = std::env::var("WIRETAP_REPORT_CSV") {
            self.paths.report_csv = v.into();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.code_spec()?.validate()?;
        self.arch_params()?.validate()?;
        self.channel_cfg()?;
        let w = &self.loss;
        if w.alpha < 0.0 || w.beta < 0.0 || w.gamma < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if w.alpha == 0.0 && w.beta == 0.0 && w.gamma == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if self.optimizer.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.optimizer.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        if self.schedule.log_every == 0 || self.schedule.checkpoint_every == 0 {
            return Err(Error::Config("log/checkpoint intervals must be >= 1".into()));
        }
        if let Some(gf2) = &self.gf2 {
            gf2.h_matrix()?;
            gf2.g_matrix()?;
            gf2.s_matrix()?;
        }
        Ok(())
    }

    pub fn code_spec(&self) -> Result<CodeSpec> {
        let spec = CodeSpec {
            k: self.code.k,
            r: self.code.r,
            n: self.code.n,
            arch: Arch::parse(&self.code.arch)?,
            mix_factor: self.code.mix_factor,
            mix_placement: MixPlacement::parse(&self.code.mix_placement)?,
            binarize_scrambler: self.code.binarize_scrambler,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn arch_params(&self) -> Result<ArchParams> {
        let p = ArchParams {
            enc_hidden: self.arch.enc_hidden,
            enc_hidden_layers: self.arch.enc_hidden_layers,
            enc_embed: self.arch.enc_embed,
            reshape_channels: self.arch.reshape_channels,
            conv_filters: (self.arch.conv_filters[0], self.arch.conv_filters[1]),
            conv_kernel: self.arch.conv_kernel,
            dec_hidden: self.arch.dec_hidden,
            dec_layers: self.arch.dec_layers,
            mine_hidden: self.arch.mine_hidden,
            mine_layers: self.arch.mine_layers,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channel_cfg(&self) -> Result<ChannelCfg> {
        ChannelCfg::new(
            self.channel.bob_eb_n0_db,
            self.channel.eve_eb_n0_db,
            self.code.k as f64 / self.code.n as f64,
        )
    }
}

// ---------------------------------------------------------------------------
// Sweep grids
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCode {
    pub k: usize,
    #[serde(default)]
    pub r: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct GridSection {
    pub archs: Vec<String>,
    pub codes: Vec<GridCode>,
    pub bob_snr_db: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    #[serde(flatten)]
    run: RawConfig,
    grid: GridSection,
}

/// A sweep: one base config plus the grid to expand it over.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub base: RunConfig,
    pub grid: GridSection,
}

/// One expanded grid point.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub label: String,
    pub config: RunConfig,
}

impl SweepConfig {
    pub fn parse_str(text: &str) -> Result<SweepConfig> {
        let raw: RawSweep =
            toml::from_str(text).map_err(|e| Error::Config(format!("sweep parse: {e}")))?;
        let base = raw.run.materialize()?;
        if raw.grid.archs.is_empty() || raw.grid.codes.is_empty() || raw.grid.bob_snr_db.is_empty()
        {
            return Err(Error::Config(
                "sweep grid needs at least one arch, code, and SNR".into(),
            ));
        }
        Ok(SweepConfig {
            base,
            grid: raw.grid,
        })
    }

    pub fn load(path: &Path) -> Result<SweepConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        SweepConfig::parse_str(&text)
    }

    /// Expands the grid. Each point gets its own checkpoint/metrics paths
    /// under the base checkpoint directory and a seed derived from the
    /// point's position, so points are independent and resumable.
    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        let mut out = Vec::new();
        for arch in &self.grid.archs {
            Arch::parse(arch)?;
            for code in &self.grid.codes {
                for &snr in &self.grid.bob_snr_db {
                    let mut cfg = self.base.clone();
                    cfg.code.arch = arch.clone();
                    cfg.code.k = code.k;
                    cfg.code.n = code.n;
                    cfg.code.r = if arch == "randomized" { code.r } else { 0 };
                    cfg.channel.bob_eb_n0_db = snr;
                    let label = format!(
                        "{arch}_k{}_r{}_n{}_bob{}dB",
                        cfg.code.k,
                        cfg.code.r,
                        cfg.code.n,
                        fmt_db(snr)
                    );
                    cfg.paths.metrics_csv =
                        self.base.paths.checkpoint_dir.join(format!("{label}.metrics.csv"));
                    cfg.seed = splitmix_label(self.base.seed, &label);
                    cfg.validate()?;
                    out.push(SweepPoint {
                        label,
                        config: cfg,
                    });
                }
            }
        }
        Ok(out)
    }
}

fn fmt_db(v: f64) -> String {
    if v == v.trunc() {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn splitmix_label(seed: u64, label: &str) -> u64 {
    let mut h = seed ^ 0x51_7c_c1_b7_27_22_0a_95;
    for b in label.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Conventional checkpoint filename for a run.
pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    let label = format!(
        "{}_k{}_r{}_n{}_bob{}dB.wtfg",
        cfg.code.arch,
        cfg.code.k,
        cfg.code.r,
        cfg.code.n,
        fmt_db(cfg.channel.bob_eb_n0_db)
    );
    cfg.paths.checkpoint_dir.join(label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_materializes_the_paper_profile() {
        let cfg = RunConfig::parse_str("").unwrap();
        assert_eq!(cfg.optimizer.batch_size, 2048);
        assert_eq!(cfg.optimizer.learning_rate, 0.0004);
        assert_eq!(cfg.arch.enc_hidden, 500);
        assert_eq!(cfg.arch.mine_hidden, 400);
        assert_eq!(cfg.code.mix_factor, 20.0);
        assert_eq!(cfg.schedule.max_iters, 20_000);
    }

    #[test]
    fn profile_sets_block_defaults_and_explicit_fields_win() {
        let cfg = RunConfig::parse_str(
            r#"
profile = "ci"

[optimizer]
batch_size = 64
"#,
        )
        .unwrap();
        assert_eq!(cfg.optimizer.batch_size, 64); // explicit
        assert_eq!(cfg.arch.enc_hidden, 100); // ci default
        assert_eq!(cfg.optimizer.learning_rate, 0.0004); // shared default
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = RunConfig::parse_str(
            r#"
profile = "desk"
seed = 9

[code]
arch = "classic"
k = 5
r = 0
n = 16

[channel]
bob_eb_n0_db = 8.0
"#,
        )
        .unwrap();
        let text = cfg.to_toml();
        let back = RunConfig::parse_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invalid_configs_are_field_level_errors() {
        // randomized with r = 0
        let err = RunConfig::parse_str("[code]\narch = \"randomized\"\nr = 0\n").unwrap_err();
        assert!(err.to_string().contains("r >= 1"), "{err}");
        // unknown arch
        assert!(RunConfig::parse_str("[code]\narch = \"polar\"\n").is_err());
        // unknown field
        assert!(RunConfig::parse_str("[code]\nwidth = 4\n").is_err());
        // zero weights
        assert!(RunConfig::parse_str("[loss]\nalpha = 0.0\nbeta = 0.0\ngamma = 0.0\n").is_err());
    }

    #[test]
    fn gf2_section_parses_matrices() {
        let cfg = RunConfig::parse_str(
            r#"
[gf2]
h = ["110", "011"]
g = ["101"]
"#,
        )
        .unwrap();
        let gf2 = cfg.gf2.unwrap();
        assert_eq!(gf2.h_matrix().unwrap().rows(), 2);
        assert_eq!(gf2.g_matrix().unwrap().cols(), 3);
        assert!(gf2.s_matrix().unwrap().is_none());

        assert!(RunConfig::parse_str("[gf2]\nh = [\"12\"]\ng = [\"11\"]\n").is_err());
    }

    #[test]
    fn sweep_expands_the_full_grid() {
        let sweep = SweepConfig::parse_str(
            r#"
profile = "ci"

[grid]
archs = ["classic", "randomized"]
codes = [{ k = 3, r = 5, n = 8 }]
bob_snr_db = [6.0, 10.0]
"#,
        )
        .unwrap();
        let points = sweep.points().unwrap();
        assert_eq!(points.len(), 4);
        assert!(points[0].label.contains("classic_k3_r0_n8"));
        assert!(points[2].label.contains("randomized_k3_r5_n8"));
        // Labels are unique and so are seeds.
        let labels: std::collections::HashSet<_> =
            points.iter().map(|p| p.label.clone()).collect();
        assert_eq!(labels.len(), 4);
    }

    #[test]
    fn missing_grid_is_rejected() {
        assert!(SweepConfig::parse_str("profile = \"ci\"").is_err());
        assert!(SweepConfig::parse_str(
            "[grid]\narchs = []\ncodes = []\nbob_snr_db = []\n"
        )
        .is_err());
    }
}
