//! Server configuration: an optional TOML file overlaid by command-line flags.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;
use wozsim_core::scene::ScenarioLibrary;
use wozsim_core::session::Mode;
use wozsim_core::sync::Topology;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    pub bind: String,
    pub port: u16,
    pub log_dir: PathBuf,
    /// Extra scenario files, layered over the built-in scenarios.
    pub scenario_dir: Option<PathBuf>,
    /// Static web client bundle served at `/`.
    pub web_dir: Option<PathBuf>,
    pub mode_default: Mode,
    pub render_topology: Topology,
    pub turn_timeout_s: u64,
    pub disconnect_timeout_s: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
            log_dir: PathBuf::from("logs"),
            scenario_dir: None,
            web_dir: None,
            mode_default: Mode::Collection,
            render_topology: Topology::LocalRender,
            turn_timeout_s: 30,
            disconnect_timeout_s: 60,
        }
    }
}

/// Keys accepted in the configuration file; all optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub bind: Option<String>,
    pub port: Option<u16>,
    pub log_dir: Option<PathBuf>,
    pub scenario_dir: Option<PathBuf>,
    pub web_dir: Option<PathBuf>,
    pub mode_default: Option<String>,
    pub render_topology: Option<String>,
    pub turn_timeout_s: Option<u64>,
    pub disconnect_timeout_s: Option<u64>,
}

/// Values given on the command line; they win over the file.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct ConfigFlags {
    /// TOML configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    #[arg(long)]
    pub scenario_dir: Option<PathBuf>,
    #[arg(long)]
    pub web_dir: Option<PathBuf>,
    /// collection or evaluation
    #[arg(long)]
    pub mode_default: Option<String>,
    /// remote or local
    #[arg(long)]
    pub render_topology: Option<String>,
    #[arg(long)]
    pub turn_timeout_s: Option<u64>,
    #[arg(long)]
    pub disconnect_timeout_s: Option<u64>,
}

impl ConfigFlags {
    fn overrides(&self) -> FileConfig {
        let f = self.clone();
        FileConfig {
            bind: f.bind,
            port: f.port,
            log_dir: f.log_dir,
            scenario_dir: f.scenario_dir,
            web_dir: f.web_dir,
            mode_default: f.mode_default,
            render_topology: f.render_topology,
            turn_timeout_s: f.turn_timeout_s,
            disconnect_timeout_s: f.disconnect_timeout_s,
        }
    }
}

impl ServerConfig {
    /// Defaults, then the file named by `--config`, then the flags.
    pub fn resolve(flags: &ConfigFlags) -> anyhow::Result<Self> {
        let file = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => FileConfig::default(),
        };
        let mut cfg = ServerConfig::default();
        cfg.apply(file)?;
        cfg.apply(flags.overrides())?;
        Ok(cfg)
    }

    fn apply(&mut self, layer: FileConfig) -> anyhow::Result<()> {
        let FileConfig {
            bind,
            port,
            log_dir,
            scenario_dir,
            web_dir,
            mode_default,
            render_topology,
            turn_timeout_s,
            disconnect_timeout_s,
        } = layer;
        self.bind = bind.unwrap_or(std::mem::take(&mut self.bind));
        self.port = port.unwrap_or(self.port);
        self.log_dir = log_dir.unwrap_or(std::mem::take(&mut self.log_dir));
        self.scenario_dir = scenario_dir.or(self.scenario_dir.take());
        self.web_dir = web_dir.or(self.web_dir.take());
        if let Some(v) = mode_default {
            self.mode_default = v.parse().map_err(anyhow::Error::msg)?;
        }
        if let Some(v) = render_topology {
            self.render_topology = v.parse().map_err(anyhow::Error::msg)?;
        }
        self.turn_timeout_s = turn_timeout_s.unwrap_or(self.turn_timeout_s);
        self.disconnect_timeout_s = disconnect_timeout_s.unwrap_or(self.disconnect_timeout_s);
        Ok(())
    }

    pub fn addr(&self) -> anyhow::Result<SocketAddr> {
        format!("{}:{}", self.bind, self.port)
            .parse()
            .with_context(|| format!("invalid bind address {}:{}", self.bind, self.port))
    }

    /// Loads the scenario library and checks that the log directory can be
    /// written.
    pub fn prepare(&self) -> anyhow::Result<ScenarioLibrary> {
        if self.turn_timeout_s == 0 || self.disconnect_timeout_s == 0 {
            bail!("timeouts must be at least one second");
        }
        let library = match &self.scenario_dir {
            Some(dir) => {
                ScenarioLibrary::with_dir(dir).with_context(|| format!("loading scenarios from {}", dir.display()))?
            }
            None => ScenarioLibrary::builtin(),
        };
        check_writable(&self.log_dir)?;
        if let Some(web) = &self.web_dir {
            if !web.is_dir() {
                bail!("web directory {} does not exist", web.display());
            }
        }
        Ok(library)
    }
}

fn check_writable(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating log directory {}", dir.display()))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").with_context(|| format!("log directory {} is not writable", dir.display()))?;
    fs::remove_file(&probe).with_context(|| format!("cleaning up {}", probe.display()))?;
    Ok(())
}
