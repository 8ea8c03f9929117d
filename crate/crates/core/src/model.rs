//! Model shape configuration, parameter naming and initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{ParamStore, Trace, Var};
use crate::error::{Error, Result};

/// How the dominant-instance mask `v` is produced from the confidence maps `C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskHead {
    /// Encoder `2M² → hidden` with ReLU, decoder `hidden → 2M²`.
    Autoencoder,
    /// `v = C` (the "w/o autoencoder" variant).
    Bypass,
    /// Two `2M² → 2M²` fully-connected layers (the "fully w/o autoencoder" variant).
    FullyConnected,
}

impl MaskHead {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskHead::Autoencoder => "autoencoder",
            MaskHead::Bypass => "bypass",
            MaskHead::FullyConnected => "fully-connected",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Foreground classes K.
    pub num_classes: usize,
    /// Segmentation ROI side M.
    pub mask_size: usize,
    /// Refinement ROI side R.
    pub roi_size: usize,
    pub feat_stride: usize,
    pub backbone_channels: Vec<usize>,
    /// Width of the hidden 1x1 convolution in front of `C`.
    pub seg_channels: usize,
    pub ae_hidden: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub mask_head: MaskHead,
    /// Feed `v` into the refinement heads.
    pub seg_aware: bool,
    /// Let refinement losses back-propagate through `v` into the segmentation branch.
    pub seg_aware_grad: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 3,
            mask_size: 40,
            roi_size: 7,
            feat_stride: 4,
            backbone_channels: vec![16, 32, 64],
            seg_channels: 32,
            ae_hidden: 512,
            fc1: 256,
            fc2: 256,
            mask_head: MaskHead::Autoencoder,
            seg_aware: true,
            seg_aware_grad: true,
        }
    }
}

impl ModelConfig {
    pub fn mask_len(&self) -> usize {
        2 * self.mask_size * self.mask_size
    }

    pub fn feat_channels(&self) -> usize {
        *self.backbone_channels.last().expect("validated non-empty")
    }

    /// Number of 2x2 max-pools in the backbone.
    pub fn num_pools(&self) -> usize {
        self.feat_stride.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.mask_size == 0 || self.roi_size == 0 || self.seg_channels == 0 || self.fc1 == 0 || self.fc2 == 0 {
            return bad("layer sizes must be positive".into());
        }
        if !self.feat_stride.is_power_of_two() {
            return bad(format!("feat_stride {} must be a power of two", self.feat_stride));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return bad("backbone_channels must be non-empty and positive".into());
        }
        if self.num_pools() > self.backbone_channels.len() {
            return bad(format!(
                "feat_stride {} needs {} pooled blocks but only {} blocks are configured",
                self.feat_stride,
                self.num_pools(),
                self.backbone_channels.len()
            ));
        }
        if self.mask_head == MaskHead::Autoencoder && (self.ae_hidden == 0 || self.ae_hidden >= self.mask_len()) {
            return bad(format!(
                "ae_hidden {} must be in 1..{} (2·M²)",
                self.ae_hidden,
                self.mask_len()
            ));
        }
        Ok(())
    }
}

/// Initialization scales.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitConfig {
    pub cls_std: f64,
    pub reg_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            cls_std: 0.01,
            reg_std: 0.001,
        }
    }
}

fn he(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fresh parameters: fan-in scaled Gaussians for hidden layers, the
/// configured small Gaussians for the two refinement output layers, zero biases.
pub fn init_params(cfg: &ModelConfig, init: &InitConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let mut cin = 3;
    for (i, &c) in cfg.backbone_channels.iter().enumerate() {
        s.insert_gaussian(&format!("backbone.conv{i}.w"), &[c, cin, 3, 3], he(cin * 9), &mut rng)?;
        s.insert_zeros(&format!("backbone.conv{i}.b"), &[c])?;
        cin = c;
    }
    let cf = cfg.feat_channels();
    let sc = cfg.seg_channels;
    s.insert_gaussian("seg.conv1.w", &[sc, cf, 1, 1], he(cf), &mut rng)?;
    s.insert_zeros("seg.conv1.b", &[sc])?;
    s.insert_gaussian("seg.conv2.w", &[2, sc, 1, 1], glorot(sc, 2), &mut rng)?;
    s.insert_zeros("seg.conv2.b", &[2])?;
    let ml = cfg.mask_len();
    match cfg.mask_head {
        MaskHead::Autoencoder => {
            let hd = cfg.ae_hidden;
            s.insert_gaussian("ae.enc.w", &[hd, ml], he(ml), &mut rng)?;
            s.insert_zeros("ae.enc.b", &[hd])?;
            s.insert_gaussian("ae.dec.w", &[ml, hd], glorot(hd, ml), &mut rng)?;
            s.insert_zeros("ae.dec.b", &[ml])?;
        }
        MaskHead::FullyConnected => {
            s.insert_gaussian("ae.fc1.w", &[ml, ml], he(ml), &mut rng)?;
            s.insert_zeros("ae.fc1.b", &[ml])?;
            s.insert_gaussian("ae.fc2.w", &[ml, ml], glorot(ml, ml), &mut rng)?;
            s.insert_zeros("ae.fc2.b", &[ml])?;
        }
        MaskHead::Bypass => {}
    }
    let rin = cf * cfg.roi_size * cfg.roi_size;
    s.insert_gaussian("ref.fc1.w", &[cfg.fc1, rin], he(rin), &mut rng)?;
    s.insert_zeros("ref.fc1.b", &[cfg.fc1])?;
    s.insert_gaussian("ref.fc2.w", &[cfg.fc2, cfg.fc1], he(cfg.fc1), &mut rng)?;
    s.insert_zeros("ref.fc2.b", &[cfg.fc2])?;
    let feat = cfg.fc2 + ml;
    let k = cfg.num_classes;
    s.insert_gaussian("ref.cls.w", &[k + 1, feat], init.cls_std, &mut rng)?;
    s.insert_zeros("ref.cls.b", &[k + 1])?;
    s.insert_gaussian("ref.reg.w", &[4 * k, feat], init.reg_std, &mut rng)?;
    s.insert_zeros("ref.reg.b", &[4 * k])?;
    Ok(s)
}

/// Checks that `store` holds exactly the tensors `cfg` expects, naming the
/// first mismatch.
pub fn check_params(store: &ParamStore, cfg: &ModelConfig) -> Result<()> {
    let want = init_params(cfg, &InitConfig::default(), 0)?;
    for (name, t) in want.iter() {
        match store.get(name) {
            None => return Err(Error::invalid(format!("checkpoint is missing tensor {name:?}"))),
            Some(have) if have.shape() != t.shape() => {
                return Err(Error::invalid(format!(
                    "tensor {name:?} has shape {:?}, config expects {:?}",
                    have.shape(),
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = store.names().find(|n| !want.contains(n)) {
        return Err(Error::invalid(format!("checkpoint has unexpected tensor {extra:?}")));
    }
    Ok(())
}

/// A weight/bias pair registered in a trace.
#[derive(Clone, Copy, Debug)]
pub struct Layer {
    pub w: Var,
    pub b: Var,
}

/// All model parameters registered once in a trace and shared by every
/// proposal and every iteration of that trace.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: Vec<Layer>,
    pub seg1: Layer,
    pub seg2: Layer,
    pub mask1: Option<Layer>,
    pub mask2: Option<Layer>,
    pub fc1: Layer,
    pub fc2: Layer,
    pub cls: Layer,
    pub reg: Layer,
}

fn layer(tr: &mut Trace, s: &ParamStore, prefix: &str) -> Result<Layer> {
    Ok(Layer {
        w: tr.param(s, &format!("{prefix}.w"))?,
        b: tr.param(s, &format!("{prefix}.b"))?,
    })
}

impl ModelVars {
    pub fn register(tr: &mut Trace, s: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let backbone = (0..cfg.backbone_channels.len())
            .map(|i| layer(tr, s, &format!("backbone.conv{i}")))
            .collect::<Result<Vec<_>>>()?;
        let (mask1, mask2) = match cfg.mask_head {
            MaskHead::Autoencoder => (Some(layer(tr, s, "ae.enc")?), Some(layer(tr, s, "ae.dec")?)),
            MaskHead::FullyConnected => (Some(layer(tr, s, "ae.fc1")?), Some(layer(tr, s, "ae.fc2")?)),
            MaskHead::Bypass => (None, None),
        };
        Ok(ModelVars {
            backbone,
            seg1: layer(tr, s, "seg.conv1")?,
            seg2: layer(tr, s, "seg.conv2")?,
            mask1,
            mask2,
            fc1: layer(tr, s, "ref.fc1")?,
            fc2: layer(tr, s, "ref.fc2")?,
            cls: layer(tr, s, "ref.cls")?,
            reg: layer(tr, s, "ref.reg")?,
        })
    }
}
