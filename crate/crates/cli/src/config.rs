//! Run configuration: built-in defaults, then a flat TOML file, then flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Deserialize;

use hgsignal::baselines::FixedTimePlan;
use hgsignal::datamodel::{Phase, FlowMode};
use hgsignal::hypergraph::HGConfig;
use hgsignal::masac::{MasacConfig, SoftUpdateRule};
use hgsignal::par::Exec;
use hgsignal::simulator::SimConfig;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Uni,
    Bi,
}

impl From<Mode> for FlowMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Uni => FlowMode::Unidirectional,
            Mode::Bi => FlowMode::Bidirectional,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Fixed,
    Maxpressure,
    Hgdrl,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Fixed => "fixed",
            ControllerKind::Maxpressure => "maxpressure",
            ControllerKind::Hgdrl => "hgdrl",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftUpdate {
    Printed,
    Conventional,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub rows: usize,
    pub cols: usize,
    pub mode: Mode,
    pub main_rate: f64,
    pub cross_rate: f64,
    pub roadnet: Option<PathBuf>,
    pub flow: Option<PathBuf>,
    pub controller: ControllerKind,
    pub episodes: usize,
    pub batch_size: usize,
    pub target_entropy: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub buffer_size: usize,
    pub heads: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub gamma2: f64,
    pub rho: f64,
    pub zeta: f64,
    pub beta: f64,
    pub d_embed: usize,
    pub hidden: usize,
    pub initial_alpha: f64,
    pub reward_scale: f64,
    pub obs_scale: f64,
    pub soft_update: SoftUpdate,
    pub episode_seconds: u32,
    pub green_seconds: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub sequential: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = MasacConfig::default();
        let h = HGConfig::default();
        Self {
            rows: 3,
            cols: 3,
            mode: Mode::Bi,
            main_rate: 300.0,
            cross_rate: 90.0,
            roadnet: None,
            flow: None,
            controller: ControllerKind::Hgdrl,
            episodes: m.episodes,
            batch_size: m.batch_size,
            target_entropy: m.target_entropy,
            actor_lr: m.actor_lr,
            critic_lr: m.critic_lr,
            alpha_lr: m.alpha_lr,
            buffer_size: m.buffer_size,
            heads: h.heads,
            gamma: m.gamma,
            lambda: h.lambda,
            gamma2: h.gamma2,
            rho: m.rho,
            zeta: h.zeta,
            beta: h.beta,
            d_embed: h.d_embed,
            hidden: m.hidden,
            initial_alpha: m.initial_alpha,
            reward_scale: m.reward_scale,
            obs_scale: m.obs_scale,
            soft_update: SoftUpdate::Printed,
            episode_seconds: SimConfig::default().episode_seconds,
            green_seconds: FixedTimePlan::default().green_seconds,
            seed: 1,
            out_dir: PathBuf::from("out"),
            sequential: false,
        }
    }
}

/// Optional value for every [`RunConfig`] field. Doubles as the flag set
/// and as the config-file schema, so both use the same names.
#[derive(Clone, Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// Flat TOML file with RunConfig keys
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// West-east arrival rate, vehicles per lane per hour
    #[arg(long)]
    pub main_rate: Option<f64>,
    /// South-north arrival rate, vehicles per lane per hour
    #[arg(long)]
    pub cross_rate: Option<f64>,
    /// Roadnet file; replaces the generated grid
    #[arg(long, requires = "flow")]
    pub roadnet: Option<PathBuf>,
    #[arg(long, requires = "roadnet")]
    pub flow: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub controller: Option<ControllerKind>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub target_entropy: Option<f64>,
    #[arg(long)]
    pub actor_lr: Option<f64>,
    #[arg(long)]
    pub critic_lr: Option<f64>,
    #[arg(long)]
    pub alpha_lr: Option<f64>,
    #[arg(long)]
    pub buffer_size: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma2: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub d_embed: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub initial_alpha: Option<f64>,
    #[arg(long)]
    pub reward_scale: Option<f64>,
    #[arg(long)]
    pub obs_scale: Option<f64>,
    #[arg(long, value_enum)]
    pub soft_update: Option<SoftUpdate>,
    #[arg(long)]
    pub episode_seconds: Option<u32>,
    #[arg(long)]
    pub green_seconds: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Disable data-parallel execution
    #[arg(long)]
    pub sequential: Option<bool>,
}

macro_rules! apply {
    ($cfg:ident, $ov:ident; $($field:ident),* ; $($opt:ident),*) => {
        $( if let Some(v) = $ov.$field.clone() { $cfg.$field = v; } )*
        $( if let Some(v) = $ov.$opt.clone() { $cfg.$opt = Some(v); } )*
    };
}

impl RunConfig {
    pub fn apply(&mut self, ov: &Overrides) {
        apply!(self, ov;
            rows, cols, mode, main_rate, cross_rate, controller, episodes, batch_size, target_entropy,
            actor_lr, critic_lr, alpha_lr, buffer_size, heads, gamma, lambda, gamma2, rho, zeta, beta,
            d_embed, hidden, initial_alpha, reward_scale, obs_scale, soft_update, episode_seconds,
            green_seconds, seed, out_dir, sequential;
            roadnet, flow);
    }

    /// Defaults, then `flags.config` if given, then the flags themselves.
    pub fn resolve(flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = &flags.config {
            cfg.apply(&read_file(path)?);
        }
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            episode_seconds: self.episode_seconds,
            ..SimConfig::default()
        }
    }

    pub fn plan(&self) -> Result<FixedTimePlan, CliError> {
        FixedTimePlan::new(Phase::ALL, self.green_seconds, self.sim().step_seconds).map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn masac(&self) -> MasacConfig {
        MasacConfig {
            episodes: self.episodes,
            batch_size: self.batch_size,
            buffer_size: self.buffer_size,
            gamma: self.gamma,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            alpha_lr: self.alpha_lr,
            target_entropy: self.target_entropy,
            initial_alpha: self.initial_alpha,
            rho: self.rho,
            soft_update: match self.soft_update {
                SoftUpdate::Printed => SoftUpdateRule::AsPrinted,
                SoftUpdate::Conventional => SoftUpdateRule::Conventional,
            },
            reward_scale: self.reward_scale,
            obs_scale: self.obs_scale,
            hidden: self.hidden,
            encoder: HGConfig {
                d_embed: self.d_embed,
                heads: self.heads,
                zeta: self.zeta,
                lambda: self.lambda,
                gamma2: self.gamma2,
                beta: self.beta,
            },
            exec: self.exec(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Validation(m));
        if self.roadnet.is_none() && (self.rows == 0 || self.cols == 0) {
            return fail(format!("grid dimensions must be positive, got {}x{}", self.rows, self.cols));
        }
        if !(self.main_rate >= 0.0 && self.cross_rate >= 0.0) {
            return fail("arrival rates must be non-negative".into());
        }
        if self.roadnet.is_some() != self.flow.is_some() {
            return fail("roadnet and flow must be given together".into());
        }
        if self.episode_seconds == 0 || self.episode_seconds % self.sim().step_seconds != 0 {
            return fail(format!("episode_seconds must be a positive multiple of {}", self.sim().step_seconds));
        }
        self.plan()?;
        self.masac().validate().map_err(|e| CliError::Validation(e.to_string()))
    }
}

fn read_file(path: &Path) -> Result<Overrides, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Probe {
        #[command(flatten)]
        ov: Overrides,
    }

    fn flags(args: &[&str]) -> Overrides {
        Probe::parse_from(std::iter::once("probe").chain(args.iter().copied())).ov
    }

    #[test]
    fn defaults_follow_the_parameter_table() {
        let c = RunConfig::default();
        assert_eq!((c.batch_size, c.episodes, c.buffer_size, c.heads), (20, 50, 1000, 1));
        assert_eq!((c.actor_lr, c.critic_lr, c.alpha_lr), (1e-4, 1e-2, 1e-3));
        assert_eq!((c.target_entropy, c.gamma, c.lambda, c.gamma2), (-0.5, 0.98, 0.001, 0.2));
        assert_eq!((c.rho, c.zeta, c.beta), (0.005, 0.1, 0.001));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "episodes = 7\nzeta = 0.4\nmode = \"uni\"\n").unwrap();
        let p = path.to_str().unwrap();
        let c = RunConfig::resolve(&flags(&["--config", p, "--zeta", "0.9"])).unwrap();
        assert_eq!(c.episodes, 7);
        assert_eq!(c.zeta, 0.9);
        assert_eq!(c.mode, Mode::Uni);
        assert_eq!(c.batch_size, 20);
    }

    #[test]
    fn file_errors_are_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "episodez = 3\n").unwrap();
        let err = RunConfig::resolve(&flags(&["--config", path.to_str().unwrap()])).unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
        let missing = dir.path().join("none.toml");
        assert!(matches!(
            RunConfig::resolve(&flags(&["--config", missing.to_str().unwrap()])),
            Err(CliError::Validation(_))
        ));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for args in [
            &["--beta", "1.5"][..],
            &["--batch-size", "0"],
            &["--rows", "0"],
            &["--green-seconds", "25"],
            &["--critic-lr=-1"],
        ] {
            assert!(matches!(RunConfig::resolve(&flags(args)), Err(CliError::Validation(_))), "{args:?}");
        }
        let c = RunConfig::resolve(&flags(&["--target-entropy", "-0.8"])).unwrap();
        assert_eq!(c.target_entropy, -0.8);
    }
}
