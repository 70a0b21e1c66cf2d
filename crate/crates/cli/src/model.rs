//! Checkpoint loading for the prediction commands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use cartnet_core::kernels::Checkpoint;
use cartnet_core::model::{AdpPredictor, CartNet, ModelConfig, TargetOracle, CHECKPOINT_KIND};
use cartnet_core::train::RunConfig;

/// Kind of the stub checkpoint whose predictor returns the dataset targets.
pub const ORACLE_KIND: &str = "target_oracle";

pub enum LoadedModel {
    Net(Box<CartNet>),
    Oracle { cutoff: f64 },
}

pub struct Loaded {
    pub model: LoadedModel,
    pub include_hydrogens: bool,
}

impl Loaded {
    pub fn cutoff(&self) -> f64 {
        match &self.model {
            LoadedModel::Net(m) => m.config.cutoff,
            LoadedModel::Oracle { cutoff } => *cutoff,
        }
    }

    pub fn predictor(&self) -> &dyn AdpPredictor {
        match &self.model {
            LoadedModel::Net(m) => m.as_ref(),
            LoadedModel::Oracle { .. } => &TargetOracle,
        }
    }

    pub fn net(&self) -> Option<&CartNet> {
        match &self.model {
            LoadedModel::Net(m) => Some(m),
            LoadedModel::Oracle { .. } => None,
        }
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn check_config(ckpt: &ModelConfig, cfg: &ModelConfig) -> Result<()> {
    if ckpt.cutoff != cfg.cutoff {
        bail!(
            "cutoff mismatch: config has r_c = {} Å, checkpoint has r_c = {} Å",
            cfg.cutoff,
            ckpt.cutoff
        );
    }
    if ckpt.dim != cfg.dim {
        bail!(
            "dim mismatch: config has dim = {}, checkpoint has dim = {}",
            cfg.dim,
            ckpt.dim
        );
    }
    Ok(())
}

pub fn load(path: &Path, config: Option<&Path>) -> Result<Loaded> {
    let ck =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let include_hydrogens = ck
        .metadata
        .get("include_hydrogens")
        .and_then(|v| v.as_bool())
        .unwrap_or(true);
    let cfg = config.map(load_run_config).transpose()?;
    let model = match ck.kind.as_str() {
        CHECKPOINT_KIND => {
            let net = CartNet::from_checkpoint(&ck)
                .with_context(|| format!("restoring network from {}", path.display()))?;
            if let Some(cfg) = &cfg {
                check_config(&net.config, &cfg.model)?;
            }
            LoadedModel::Net(Box::new(net))
        }
        ORACLE_KIND => {
            let cutoff = ck
                .config
                .get("cutoff")
                .and_then(|v| v.as_f64())
                .context("oracle checkpoint lacks `cutoff`")?;
            if let Some(cfg) = &cfg {
                if cfg.model.cutoff != cutoff {
                    bail!(
                        "cutoff mismatch: config has r_c = {} Å, checkpoint has r_c = {cutoff} Å",
                        cfg.model.cutoff
                    );
                }
            }
            LoadedModel::Oracle { cutoff }
        }
        other => bail!("unknown checkpoint kind `{other}`"),
    };
    Ok(Loaded {
        model,
        include_hydrogens,
    })
}
