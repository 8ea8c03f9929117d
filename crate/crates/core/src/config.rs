//! Flat `key = value` run configuration covering every knob.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{InitConfig, MaskHead, ModelConfig};
use crate::recursion::RecursionConfig;
use crate::synthdata::SceneConfig;
use crate::training::TrainConfig;

trait Field: Sized {
    fn parse_field(s: &str) -> Option<Self>;
    fn format_field(&self) -> String;
}

macro_rules! scalar_field {
    ($($t:ty),*) => {$(
        impl Field for $t {
            fn parse_field(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn format_field(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_field!(usize, u64, f64, bool);

impl Field for Vec<usize> {
    fn parse_field(s: &str) -> Option<Self> {
        s.split(',').map(|x| x.trim().parse().ok()).collect()
    }
    fn format_field(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

impl Field for String {
    fn parse_field(s: &str) -> Option<Self> {
        Some(s.to_string())
    }
    fn format_field(&self) -> String {
        self.clone()
    }
}

macro_rules! run_config {
    ($($key:ident : $t:ty = $default:expr;)*) => {
        /// Every knob of a run. Ablation switches are plain booleans here and
        /// are resolved into the component configs on demand.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(pub $key: $t,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key),)*];

            /// Applies one `key = value` assignment.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$t as Field>::parse_field(value).ok_or_else(|| {
                            Error::Config(format!("invalid value {value:?} for {key}"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", stringify!($key), Field::format_field(&self.$key));)*
                s
            }
        }
    };
}

run_config! {
    seed: u64 = 7;
    num_classes: usize = 3;
    img_w: usize = 64;
    img_h: usize = 64;
    min_instances: usize = 1;
    max_instances: usize = 4;
    min_visible: f64 = 0.25;
    overlap_bias: f64 = 0.5;
    color_jitter: f64 = 40.0;
    noise: f64 = 12.0;
    proposals_per_instance: usize = 12;
    random_proposals: usize = 16;
    proposal_shift: f64 = 0.3;
    proposal_log_scale: f64 = 0.4;
    train_images: usize = 200;
    test_images: usize = 200;
    mask_size: usize = 40;
    roi_size: usize = 7;
    feat_stride: usize = 4;
    backbone_channels: Vec<usize> = vec![16, 32, 64];
    seg_channels: usize = 32;
    ae_hidden: usize = 512;
    fc1: usize = 256;
    fc2: usize = 256;
    cls_std: f64 = 0.01;
    reg_std: f64 = 0.001;
    iterations: usize = 4;
    no_gates: bool = false;
    no_autoencoder: bool = false;
    fully_no_autoencoder: bool = false;
    no_seg_aware: bool = false;
    seg_aware_grad: bool = true;
    recursive_only_testing: bool = false;
    lr: f64 = 0.001;
    momentum: f64 = 0.9;
    weight_decay: f64 = 0.0;
    stage1_steps: usize = 4000;
    stage2_steps: usize = 3000;
    batch_size: usize = 64;
    fg_fraction: f64 = 0.25;
    flip_prob: f64 = 0.5;
    checkpoint_every: usize = 500;
    dataset: String = String::new();
    checkpoint: String = String::new();
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_config().validate()?;
        self.model_config().validate()?;
        self.recursion_config().validate()?;
        self.train_config().validate()?;
        if self.img_w % self.feat_stride != 0 || self.img_h % self.feat_stride != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be divisible by feat_stride {}",
                self.img_w, self.img_h, self.feat_stride
            )));
        }
        Ok(())
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            img_w: self.img_w,
            img_h: self.img_h,
            num_classes: self.num_classes,
            min_instances: self.min_instances,
            max_instances: self.max_instances,
            min_visible: self.min_visible,
            overlap_bias: self.overlap_bias,
            color_jitter: self.color_jitter,
            noise: self.noise,
            proposals_per_instance: self.proposals_per_instance,
            random_proposals: self.random_proposals,
            proposal_shift: self.proposal_shift,
            proposal_log_scale: self.proposal_log_scale,
            seed: self.seed,
        }
    }

    /// `fully_no_autoencoder` takes precedence when both mask-head switches are set.
    pub fn model_config(&self) -> ModelConfig {
        let mask_head = if self.fully_no_autoencoder {
            MaskHead::FullyConnected
        } else if self.no_autoencoder {
            MaskHead::Bypass
        } else {
            MaskHead::Autoencoder
        };
        ModelConfig {
            num_classes: self.num_classes,
            mask_size: self.mask_size,
            roi_size: self.roi_size,
            feat_stride: self.feat_stride,
            backbone_channels: self.backbone_channels.clone(),
            seg_channels: self.seg_channels,
            ae_hidden: self.ae_hidden,
            fc1: self.fc1,
            fc2: self.fc2,
            mask_head,
            seg_aware: !self.no_seg_aware,
            seg_aware_grad: self.seg_aware_grad,
        }
    }

    pub fn init_config(&self) -> InitConfig {
        InitConfig {
            cls_std: self.cls_std,
            reg_std: self.reg_std,
        }
    }

    pub fn recursion_config(&self) -> RecursionConfig {
        RecursionConfig {
            iterations: self.iterations,
            gates_enabled: !self.no_gates,
            train_recursive: !self.recursive_only_testing,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            stage1_steps: self.stage1_steps,
            stage2_steps: self.stage2_steps,
            batch_size: self.batch_size,
            fg_fraction: self.fg_fraction,
            flip_prob: self.flip_prob,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
        }
    }

    /// Ablation switches as `(name, on)` pairs, in a fixed order.
    pub fn ablations(&self) -> [(&'static str, bool); 5] {
        [
            ("no_gates", self.no_gates),
            ("no_autoencoder", self.no_autoencoder),
            ("fully_no_autoencoder", self.fully_no_autoencoder),
            ("no_seg_aware", self.no_seg_aware),
            ("recursive_only_testing", self.recursive_only_testing),
        ]
    }
}
