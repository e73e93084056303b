use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::AdamConfig;
use crate::error::{Error, Result};
use crate::hypernet::{HypernetConfig, HypernetParams, UpdateMask};
use crate::par::ExecPolicy;
use crate::render::RenderConfig;
use crate::target::{Architecture, EncodingConfig, TargetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub target: TargetConfig,
    pub hypernet: HypernetConfig,
    /// With the hypernetwork off, Δθ is zero and only θ trains.
    pub hypernet_enabled: bool,
    /// `last`, `all`, or a comma-separated list of decoder layers.
    pub update_mask: String,
    /// Support views shown to the hypernetwork.
    pub k: usize,
    pub theta_adam: AdamConfig,
    pub delta_adam: AdamConfig,
    pub rays_per_step: usize,
    pub coarse_samples: usize,
    pub fine_samples: usize,
    pub tasks_per_step: usize,
    pub steps: u64,
    /// Evaluate every this many steps; 0 disables periodic evaluation.
    pub eval_every: u64,
    /// Query views rendered per object during evaluation.
    pub eval_views: usize,
    /// Training objects included in the train-PSNR column.
    pub eval_train_tasks: usize,
    pub ft_adam: AdamConfig,
    pub ft_rays: usize,
    pub seed: u64,
    pub policy: ExecPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::profile("shapenet128").expect("built-in profile")
    }
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig::new(Architecture::Pointmultiplane, 8, 256, 25)
    }
}

pub const PROFILES: [&str; 4] = ["shapenet128", "shapenet200", "desk", "micro"];

impl TrainConfig {
    /// Built-in settings: two full-size resolutions, a CPU-sized
    /// profile, and a tiny one for gradient checks.
    pub fn profile(name: &str) -> Result<Self> {
        let adam = AdamConfig::with_lr(1e-4);
        let base = TrainConfig {
            target: TargetConfig::new(Architecture::Pointmultiplane, 8, 256, 25),
            hypernet: HypernetConfig::default(),
            hypernet_enabled: true,
            update_mask: "last".into(),
            k: 5,
            theta_adam: adam,
            delta_adam: adam,
            rays_per_step: 512,
            coarse_samples: 64,
            fine_samples: 128,
            tasks_per_step: 1,
            steps: 100_000,
            eval_every: 1000,
            eval_views: 5,
            eval_train_tasks: 4,
            ft_adam: adam,
            ft_rays: 512,
            seed: 0,
            policy: ExecPolicy::Parallel,
        };
        match name {
            "shapenet128" => Ok(base),
            "shapenet200" => Ok(TrainConfig {
                k: 25,
                hypernet: HypernetConfig {
                    fusion_depth: 10,
                    ..HypernetConfig::default()
                },
                ..base
            }),
            "desk" => {
                let mut target = TargetConfig::new(Architecture::Pointmultiplane, 3, 64, 25);
                target.position_encoding = EncodingConfig::new(6);
                target.direction_encoding = EncodingConfig::new(2);
                target.skip_layer = None;
                Ok(TrainConfig {
                    target,
                    hypernet: HypernetConfig {
                        conv_channels: vec![8, 16, 32],
                        fusion_depth: 2,
                        fusion_width: 64,
                        theta_proj: 32,
                        ..HypernetConfig::default()
                    },
                    theta_adam: AdamConfig::with_lr(1e-3),
                    delta_adam: AdamConfig::with_lr(1e-3),
                    ft_adam: AdamConfig::with_lr(1e-4),
                    rays_per_step: 128,
                    coarse_samples: 16,
                    fine_samples: 16,
                    steps: 600,
                    eval_every: 0,
                    eval_views: 3,
                    eval_train_tasks: 2,
                    ft_rays: 128,
                    ..base
                })
            }
            "micro" => {
                let mut target = TargetConfig::new(Architecture::Pointmultiplane, 2, 8, 4);
                target.position_encoding = EncodingConfig::new(2);
                target.direction_encoding = EncodingConfig::new(1);
                target.skip_layer = None;
                Ok(TrainConfig {
                    target,
                    hypernet: HypernetConfig {
                        conv_channels: vec![4],
                        fusion_depth: 1,
                        fusion_width: 8,
                        theta_proj: 4,
                        ..HypernetConfig::default()
                    },
                    k: 2,
                    rays_per_step: 4,
                    coarse_samples: 8,
                    fine_samples: 8,
                    steps: 10,
                    eval_every: 0,
                    eval_views: 1,
                    eval_train_tasks: 1,
                    ft_rays: 4,
                    policy: ExecPolicy::Sequential,
                    ..base
                })
            }
            other => Err(Error::contract(format!(
                "unknown profile {other:?} (expected one of {})",
                PROFILES.join(", ")
            ))),
        }
    }

    pub fn mask(&self) -> Result<UpdateMask> {
        UpdateMask::parse(&self.update_mask, &self.target)
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        self.mask()?;
        let positive = [
            ("k", self.k),
            ("rays_per_step", self.rays_per_step),
            ("coarse_samples", self.coarse_samples),
            ("tasks_per_step", self.tasks_per_step),
            ("ft_rays", self.ft_rays),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be positive")));
        }
        if self.coarse_samples < 2 {
            return Err(Error::contract("coarse_samples must be at least 2"));
        }
        if self.k > self.target.n_planes && self.target.arch.uses_planes() {
            return Err(Error::contract(format!(
                "k = {} exceeds the {} conditioning planes",
                self.k, self.target.n_planes
            )));
        }
        for (name, a) in [
            ("theta_adam", &self.theta_adam),
            ("delta_adam", &self.delta_adam),
            ("ft_adam", &self.ft_adam),
        ] {
            if !(a.lr >= 0.0 && a.lr.is_finite()) {
                return Err(Error::contract(format!("{name}.lr must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Hypernetwork with this config's layout; weights come from a fixed
    /// seed, so only the shapes are meaningful.
    pub fn hypernet_template(&self, mask: &UpdateMask) -> Result<HypernetParams> {
        HypernetParams::init(
            self.hypernet.clone(),
            self.target.clone(),
            mask.clone(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
    }

    pub fn render_config(&self, near: f64, far: f64, background: [f64; 3]) -> RenderConfig {
        RenderConfig {
            coarse_samples: self.coarse_samples,
            fine_samples: self.fine_samples,
            near,
            far,
            background,
            chunk: 256,
            policy: self.policy,
        }
    }
}
