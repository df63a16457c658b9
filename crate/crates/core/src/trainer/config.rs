use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, ViewMode};
use crate::error::{Error, Result};
use crate::loss::LossConfig;

/// Which terms and structures are active during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// All terms, one predictor, stop-gradient on.
    Full,
    WoInstance,
    /// Cluster terms replaced by the second branch's softmax term alone.
    WoCluster,
    /// First-branch softmax term dropped.
    WoIntra,
    WoInter,
    /// One branch on the second augmentation, trained with the softmax term only.
    WoInstanceCluster,
    /// Coarse clusters used as pseudo labels directly.
    WoRefine,
    /// No pseudo labels; instance loss only.
    WoClustering,
    WoStopGrad,
    /// Second predictor on the second branch with mirrored instance and inter terms.
    Symmetric,
    SymmetricWoStopGrad,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Full,
        Variant::WoInstance,
        Variant::WoCluster,
        Variant::WoIntra,
        Variant::WoInter,
        Variant::WoInstanceCluster,
        Variant::WoRefine,
        Variant::WoClustering,
        Variant::WoStopGrad,
        Variant::Symmetric,
        Variant::SymmetricWoStopGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoInstance => "wo_LI",
            Variant::WoCluster => "wo_LC",
            Variant::WoIntra => "wo_intra",
            Variant::WoInter => "wo_inter",
            Variant::WoInstanceCluster => "wo_LI_LC",
            Variant::WoRefine => "wo_refine",
            Variant::WoClustering => "wo_clustering",
            Variant::WoStopGrad => "wo_stopgrad",
            Variant::Symmetric => "cscl",
            Variant::SymmetricWoStopGrad => "cscl_wo_stopgrad",
        }
    }

    pub fn loss_config(self, tau: f64) -> LossConfig {
        let base = LossConfig::cacl(tau);
        match self {
            Variant::Full | Variant::WoRefine => base,
            Variant::WoInstance => LossConfig {
                instance: false,
                ..base
            },
            Variant::WoCluster => LossConfig {
                inter: false,
                intra_first: false,
                ..base
            },
            Variant::WoIntra => LossConfig {
                intra_first: false,
                ..base
            },
            Variant::WoInter => LossConfig { inter: false, ..base },
            Variant::WoInstanceCluster => LossConfig {
                instance: false,
                inter: false,
                intra_second: false,
                ..base
            },
            Variant::WoClustering => LossConfig {
                inter: false,
                intra_first: false,
                intra_second: false,
                ..base
            },
            Variant::WoStopGrad => LossConfig {
                stop_grad: false,
                ..base
            },
            Variant::Symmetric => LossConfig {
                symmetric: true,
                ..base
            },
            Variant::SymmetricWoStopGrad => LossConfig {
                symmetric: true,
                stop_grad: false,
                ..base
            },
        }
    }

    pub fn refines(self) -> bool {
        self != Variant::WoRefine
    }

    pub fn clusters(self) -> bool {
        self != Variant::WoClustering
    }

    pub fn single_branch(self) -> bool {
        self == Variant::WoInstanceCluster
    }

    pub fn symmetric(self) -> bool {
        matches!(self, Variant::Symmetric | Variant::SymmetricWoStopGrad)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

/// Source images for the per-epoch clustering features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterOn {
    /// Un-augmented images.
    Raw,
    /// The first-branch augmentation of each image, redrawn every epoch.
    ViewT,
}

impl fmt::Display for ClusterOn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterOn::Raw => "raw",
            ClusterOn::ViewT => "view_t",
        })
    }
}

impl FromStr for ClusterOn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(ClusterOn::Raw),
            "view_t" | "viewT" => Ok(ClusterOn::ViewT),
            _ => Err(Error::UnknownMode(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    /// Bank momentum.
    pub alpha: f64,
    pub dbscan_d: f64,
    pub dbscan_d_fine: f64,
    pub min_pts: usize,
    pub min_cluster_size: usize,
    pub feature_dim: usize,
    pub hidden: Vec<usize>,
    pub variant: Variant,
    pub view_mode: ViewMode,
    pub cluster_on: ClusterOn,
    pub flip_prob: f64,
    pub crop_pad: usize,
    pub erase_prob: f64,
    pub erase_min: f64,
    pub erase_max: f64,
    pub jitter_strength: f64,
    /// First epoch from which the collapse monitor counts.
    pub collapse_after: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        TrainConfig {
            epochs: 80,
            batch_size: 64,
            lr: 3.5e-4,
            lr_decay_every: 20,
            lr_decay_factor: 0.1,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            tau: 0.05,
            alpha: 0.2,
            dbscan_d: 0.6,
            dbscan_d_fine: 0.58,
            min_pts: 4,
            min_cluster_size: 2,
            feature_dim: 64,
            hidden: vec![256],
            variant: Variant::Full,
            view_mode: ViewMode::Grayscale,
            cluster_on: ClusterOn::Raw,
            flip_prob: aug.flip_prob,
            crop_pad: aug.crop_pad,
            erase_prob: aug.erase_prob,
            erase_min: aug.erase_area.0,
            erase_max: aug.erase_area.1,
            jitter_strength: aug.jitter_strength,
            collapse_after: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the 200-image synthetic benchmark: 30 epochs, no decay,
    /// a narrow encoder, and cluster radii matched to how far features
    /// contract once the instance loss takes hold. Flip, crop and erasing
    /// are off since a pixel MLP cannot learn those invariances from ten
    /// training identities.
    pub fn benchmark() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr_decay_every: 30,
            tau: 0.1,
            dbscan_d: 0.08,
            dbscan_d_fine: 0.075,
            hidden: vec![64],
            flip_prob: 0.0,
            crop_pad: 0,
            erase_prob: 0.0,
            ..Default::default()
        }
    }
}

/// Field names accepted by [`TrainConfig::set`], in file order.
pub const CONFIG_KEYS: [&str; 28] = [
    "epochs",
    "batch_size",
    "lr",
    "lr_decay_every",
    "lr_decay_factor",
    "weight_decay",
    "beta1",
    "beta2",
    "tau",
    "alpha",
    "dbscan_d",
    "dbscan_d_fine",
    "min_pts",
    "min_cluster_size",
    "feature_dim",
    "hidden",
    "variant",
    "view_mode",
    "cluster_on",
    "flip_prob",
    "crop_pad",
    "erase_prob",
    "erase_min",
    "erase_max",
    "jitter_strength",
    "collapse_after",
    "seed",
    "mode",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

impl TrainConfig {
    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            flip_prob: self.flip_prob,
            crop_pad: self.crop_pad,
            erase_prob: self.erase_prob,
            erase_area: (self.erase_min, self.erase_max),
            jitter_strength: self.jitter_strength,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        self.variant.loss_config(self.tau)
    }

    /// Sets one field from its textual form. `mode` is an alias of `variant`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_decay_every" => self.lr_decay_every = parse(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "dbscan_d" => self.dbscan_d = parse(key, v)?,
            "dbscan_d_fine" => self.dbscan_d_fine = parse(key, v)?,
            "min_pts" => self.min_pts = parse(key, v)?,
            "min_cluster_size" => self.min_cluster_size = parse(key, v)?,
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "hidden" => {
                self.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|h| parse(key, h)).collect::<Result<_>>()?
                }
            }
            "variant" | "mode" => self.variant = v.parse()?,
            "view_mode" => self.view_mode = v.parse()?,
            "cluster_on" => self.cluster_on = v.parse()?,
            "flip_prob" => self.flip_prob = parse(key, v)?,
            "crop_pad" => self.crop_pad = parse(key, v)?,
            "erase_prob" => self.erase_prob = parse(key, v)?,
            "erase_min" => self.erase_min = parse(key, v)?,
            "erase_max" => self.erase_max = parse(key, v)?,
            "jitter_strength" => self.jitter_strength = parse(key, v)?,
            "collapse_after" => self.collapse_after = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every field as `(key, value)`, parseable back by [`TrainConfig::set`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("tau", self.tau.to_string()),
            ("alpha", self.alpha.to_string()),
            ("dbscan_d", self.dbscan_d.to_string()),
            ("dbscan_d_fine", self.dbscan_d_fine.to_string()),
            ("min_pts", self.min_pts.to_string()),
            ("min_cluster_size", self.min_cluster_size.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("hidden", hidden.join(",")),
            ("variant", self.variant.to_string()),
            ("view_mode", self.view_mode.to_string()),
            ("cluster_on", self.cluster_on.to_string()),
            ("flip_prob", self.flip_prob.to_string()),
            ("crop_pad", self.crop_pad.to_string()),
            ("erase_prob", self.erase_prob.to_string()),
            ("erase_min", self.erase_min.to_string()),
            ("erase_max", self.erase_max.to_string()),
            ("jitter_strength", self.jitter_strength.to_string()),
            ("collapse_after", self.collapse_after.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (k, v) in [
            ("lr", self.lr),
            ("tau", self.tau),
            ("dbscan_d", self.dbscan_d),
            ("dbscan_d_fine", self.dbscan_d_fine),
            ("lr_decay_factor", self.lr_decay_factor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.lr_decay_every == 0 || self.min_pts == 0 || self.min_cluster_size == 0 {
            return bad("lr_decay_every, min_pts and min_cluster_size must be positive".into());
        }
        if self.feature_dim < 2 || self.hidden.contains(&0) {
            return bad("feature_dim must be at least 2 and hidden sizes positive".into());
        }
        Ok(())
    }
}

/// `lr * factor^floor(epoch / every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}
