//! Flat `key = value` configuration. Blank lines and `#` comments are
//! ignored; unknown keys and out-of-range values are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use gpdssm_core::classify::GpClassifierConfig;
use gpdssm_core::cup::CupParams;
use gpdssm_core::gpdssm::{FitConfig, InferConfig, ModelConfig};
use gpdssm_core::lddmm::AtlasConfig;

use crate::error::{AppError, Result};

fn positive(v: &f64) -> bool {
    v.is_finite() && *v > 0.0
}
fn non_negative(v: &f64) -> bool {
    v.is_finite() && *v >= 0.0
}
fn unit_open(v: &f64) -> bool {
    *v > 0.0 && *v < 1.0
}
fn at_least_one(v: &usize) -> bool {
    *v >= 1
}
fn any<T>(_: &T) -> bool {
    true
}

macro_rules! pipeline_config {
    ($($(#[$doc:meta])* $key:ident: $ty:ty = $default:expr, $check:ident, $range:literal;)*) => {
        /// Every tunable of the pipeline.
        #[derive(Debug, Clone, PartialEq)]
        pub struct PipelineConfig {
            $($(#[$doc])* pub $key: $ty,)*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl PipelineConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $(stringify!($key) => {
                        let v: $ty = <$ty>::from_str(value)
                            .map_err(|_| format!("`{value}` is not a valid {}", stringify!($ty)))?;
                        if !$check(&v) {
                            return Err(format!("{} must be {}, got {value}", stringify!($key), $range));
                        }
                        self.$key = v;
                        Ok(())
                    })*
                    _ => Err(format!("unknown key `{key}`")),
                }
            }

            fn check_all(&self) -> std::result::Result<(), String> {
                $(if !$check(&self.$key) {
                    return Err(format!("{} must be {}, got {}", stringify!($key), $range, self.$key));
                })*
                Ok(())
            }

            /// Text form accepted by [`PipelineConfig::parse`].
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", stringify!($key), self.$key);)*
                s
            }
        }
    };
}

pipeline_config! {
    seed: u64 = 0, any, "any integer";
    /// Worker threads; 0 lets the pool decide.
    threads: usize = 0, any, "a non-negative integer";

    count_per_class: usize = 12, at_least_one, ">= 1";
    test_fraction: f64 = 0.5, unit_open, "in (0, 1)";
    cup_rings: usize = 6, at_least_one, ">= 1";
    cup_sectors: usize = 12, at_least_one, ">= 1";
    cup_radius: f64 = 25.0, positive, "positive";
    cup_noise: f64 = 0.3, non_negative, "non-negative";

    extract: bool = true, any, "true or false";
    align: bool = true, any, "true or false";
    /// Training-row index of the alignment reference; -1 selects the medoid.
    align_reference: i64 = -1, align_ref_ok, ">= -1";
    align_iters: usize = 500, at_least_one, ">= 1";
    align_lr: f64 = 0.01, positive, "positive";

    latent_dim: usize = 4, at_least_one, ">= 1";
    num_inducing: usize = 16, at_least_one, ">= 1";
    num_control: usize = 24, at_least_one, ">= 1";
    time_steps: usize = 10, at_least_one, ">= 1";
    sigma_v_scale: f64 = 0.3, positive, "positive";
    sigma_pos_scale: f64 = 0.25, positive, "positive";
    optimize_sigma_v: bool = true, any, "true or false";
    beta_scale: f64 = 100.0, positive, "positive";
    fit_lr: f64 = 0.02, positive, "positive";
    fit_iters: usize = 100, at_least_one, ">= 1";
    /// 0 uses every training shape per step.
    batch_size: usize = 0, any, "a non-negative integer";
    infer_lr: f64 = 0.05, positive, "positive";
    infer_iters: usize = 100, at_least_one, ">= 1";

    lambda_rel: f64 = 1e-3, positive, "positive";
    atlas_lr: f64 = 0.1, positive, "positive";
    atlas_iters: usize = 100, at_least_one, ">= 1";

    clf_variance: f64 = 4.0, positive, "positive";
    clf_max_variance: f64 = 16.0, positive, "positive";
    clf_iters: usize = 50, any, "a non-negative integer";
    clf_lr: f64 = 0.1, positive, "positive";

    bootstrap: usize = 2000, at_least_hundred, ">= 100";
    n_perm: usize = 999, at_least_one, ">= 1";
    alpha: f64 = 0.05, unit_open, "in (0, 1)";
    threshold: f64 = 0.5, unit_open, "in (0, 1)";
}

fn align_ref_ok(v: &i64) -> bool {
    *v >= -1
}
fn at_least_hundred(v: &usize) -> bool {
    *v >= 100
}

impl PipelineConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| AppError::format(path, i + 1, "expected `key = value`"))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(AppError::format(path, i + 1, format!("duplicate key `{key}`")));
            }
            cfg.set(key, value.trim()).map_err(|m| AppError::format(path, i + 1, m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&crate::io::read_text(path)?, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.check_all().map_err(AppError::validation)?;
        if self.clf_max_variance < self.clf_variance {
            return Err(AppError::validation("clf_max_variance must be >= clf_variance"));
        }
        if self.cup_sectors < 3 || self.cup_rings < 2 {
            return Err(AppError::validation("cups need cup_rings >= 2 and cup_sectors >= 3"));
        }
        Ok(())
    }

    pub fn cup(&self) -> CupParams {
        CupParams {
            radius: self.cup_radius,
            rings: self.cup_rings,
            sectors: self.cup_sectors,
            radial_noise_sd: self.cup_noise,
            ..CupParams::default()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            latent_dim: self.latent_dim,
            num_inducing: self.num_inducing,
            num_control: self.num_control,
            steps: self.time_steps,
            sigma_v_scale: self.sigma_v_scale,
            sigma_pos_scale: self.sigma_pos_scale,
            optimize_sigma_v: self.optimize_sigma_v,
            beta_scale: self.beta_scale,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    pub fn fit(&self) -> FitConfig {
        FitConfig { lr: self.fit_lr, iters: self.fit_iters, batch_size: self.batch_size, seed: self.seed }
    }

    pub fn infer(&self) -> InferConfig {
        InferConfig { lr: self.infer_lr, iters: self.infer_iters, seed: self.seed, ..InferConfig::default() }
    }

    pub fn atlas(&self) -> AtlasConfig {
        AtlasConfig { lambda_rel: self.lambda_rel, lr: self.atlas_lr, iters: self.atlas_iters, steps: self.time_steps }
    }

    pub fn classifier(&self) -> GpClassifierConfig {
        GpClassifierConfig {
            variance: self.clf_variance,
            max_variance: self.clf_max_variance,
            lengthscale: None,
            iters: self.clf_iters,
            lr: self.clf_lr,
        }
    }
}
