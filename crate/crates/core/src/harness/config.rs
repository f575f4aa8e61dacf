//! Pipeline configuration read from a flat, dotted-key JSON object such as
//! `{"calib.k": 7, "filter.scorer": "gmm"}`. Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::geom::check_unit;
use crate::membank::{CalibConfig, VesselnessForm};
use crate::spectral::ProfileConfig;

use super::synth::SynthParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    L2,
    Kmeans,
    Gmm,
}

impl std::str::FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Self::L2),
            "kmeans" => Ok(Self::Kmeans),
            "gmm" => Ok(Self::Gmm),
            other => Err(Error::invalid(format!("unknown scorer {other:?} (expected l2, kmeans or gmm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralSettings {
    pub profile: ProfileConfig,
    pub lambda_h: f64,
    pub lambda_cyc: f64,
}

impl Default for SpectralSettings {
    fn default() -> Self {
        Self {
            profile: ProfileConfig::default(),
            lambda_h: 1.0,
            lambda_cyc: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterSettings {
    pub eta: f64,
    pub scorer: ScorerKind,
    pub k: usize,
    pub kmeans_iters: usize,
    pub gmm_m: usize,
    pub gmm_iters: usize,
    pub eps_floor: f64,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            eta: 0.8,
            scorer: ScorerKind::L2,
            k: 3,
            kmeans_iters: 50,
            gmm_m: 3,
            gmm_iters: 100,
            eps_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixSettings {
    pub c_th: f64,
    pub kappa: f64,
}

impl Default for MixSettings {
    fn default() -> Self {
        Self { c_th: 0.5, kappa: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectSettings {
    pub nms_iou: f64,
    pub conf_threshold: f64,
}

impl Default for DetectSettings {
    fn default() -> Self {
        Self {
            nms_iou: 0.5,
            conf_threshold: 0.25,
        }
    }
}

/// Every tunable of the pipeline with its default.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct PipelineConfig {
    pub spectral: SpectralSettings,
    pub filter: FilterSettings,
    pub calib: CalibConfig,
    pub mix: MixSettings,
    pub detect: DetectSettings,
    pub synth: SynthParams,
    pub seed: u64,
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::invalid(format!("{key}: expected a number, got {v}")))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .and_then(|x| usize::try_from(x).ok())
        .ok_or_else(|| Error::invalid(format!("{key}: expected a non-negative integer, got {v}")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::invalid(format!("{key}: expected a boolean, got {v}")))
}

impl PipelineConfig {
    /// Parses a config document, applying its keys over the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| {
            let offset = text
                .split_inclusive('\n')
                .take(e.line().saturating_sub(1))
                .map(str::len)
                .sum::<usize>()
                + e.column().saturating_sub(1);
            Error::malformed(offset as u64, format!("config is not valid JSON: {e}"))
        })?;
        let Value::Object(map) = value else {
            return Err(Error::invalid("config must be a JSON object"));
        };
        let mut cfg = Self::default();
        cfg.apply(&map)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, map: &Map<String, Value>) -> Result<()> {
        for (key, v) in map {
            self.set(key, v)?;
        }
        self.validate()
    }

    fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let f = || as_f64(key, v);
        let u = || as_usize(key, v);
        let g = &mut self.calib.geometry;
        match key {
            "spectral.n_radial" => self.spectral.profile.n_radial = u()?,
            "spectral.n_angular" => self.spectral.profile.n_angular = u()?,
            "spectral.rho_c" => self.spectral.profile.rho_c = f()?,
            "spectral.lambda_h" => self.spectral.lambda_h = f()?,
            "spectral.lambda_cyc" => self.spectral.lambda_cyc = f()?,
            "filter.eta" => self.filter.eta = f()?,
            "filter.scorer" => {
                let s = v
                    .as_str()
                    .ok_or_else(|| Error::invalid(format!("{key}: expected a string")))?;
                self.filter.scorer = s.parse()?;
            }
            "filter.k" => self.filter.k = u()?,
            "filter.kmeans_iters" => self.filter.kmeans_iters = u()?,
            "filter.gmm_m" => self.filter.gmm_m = u()?,
            "filter.gmm_iters" => self.filter.gmm_iters = u()?,
            "filter.eps_floor" => self.filter.eps_floor = f()?,
            "calib.k" => self.calib.k = u()?,
            "calib.gamma" => self.calib.gamma = f()?,
            "calib.delta" => self.calib.delta = f()?,
            "calib.mu" => self.calib.mu = f()?,
            "calib.tau0" => self.calib.tau0 = f()?,
            "calib.lambda" => self.calib.lambda = f()?,
            "calib.eta_adj" => self.calib.eta_adj = f()?,
            "calib.momentum" => self.calib.momentum = f()?,
            "calib.capacity" => self.calib.capacity = u()?,
            "geometry.window" => g.window = u()?,
            "geometry.gamma1" => g.gamma1 = f()?,
            "geometry.gamma2" => g.gamma2 = f()?,
            "geometry.beta" => g.beta = f()?,
            "geometry.c_v" => g.c_v = if v.is_null() { None } else { Some(f()?) },
            "geometry.frangi_standard" => {
                g.form = if as_bool(key, v)? {
                    VesselnessForm::Frangi
                } else {
                    VesselnessForm::Verbatim
                }
            }
            "mix.c_th" => self.mix.c_th = f()?,
            "mix.kappa" => self.mix.kappa = f()?,
            "detect.nms_iou" => self.detect.nms_iou = f()?,
            "detect.conf_threshold" => self.detect.conf_threshold = f()?,
            "synth.amplitude" => self.synth.amplitude = f()?,
            "synth.sigma" => self.synth.sigma = f()?,
            "synth.min_length" => self.synth.min_length = f()?,
            "synth.max_length" => self.synth.max_length = f()?,
            "seed" => {
                self.seed = v
                    .as_u64()
                    .ok_or_else(|| Error::invalid(format!("seed: expected a non-negative integer, got {v}")))?
            }
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.spectral.profile.validate()?;
        if self.spectral.lambda_h < 0.0 || self.spectral.lambda_cyc < 0.0 {
            return Err(Error::invalid("spectral weights must be non-negative"));
        }
        check_unit(self.filter.eta, "filter.eta")?;
        if self.filter.k == 0 || self.filter.gmm_m == 0 {
            return Err(Error::invalid("filter.k and filter.gmm_m must be at least 1"));
        }
        if !(self.filter.eps_floor > 0.0) {
            return Err(Error::invalid("filter.eps_floor must be positive"));
        }
        self.calib.validate()?;
        check_unit(self.mix.c_th, "mix.c_th")?;
        if self.mix.kappa < 0.0 {
            return Err(Error::invalid("mix.kappa must be non-negative"));
        }
        check_unit(self.detect.nms_iou, "detect.nms_iou")?;
        check_unit(self.detect.conf_threshold, "detect.conf_threshold")?;
        self.synth.validate()
    }
}
