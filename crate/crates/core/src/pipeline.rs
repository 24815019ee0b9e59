//! One entry point for every segmentation method, shared by the command line
//! and the HTTP service.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fidelity::{FidelityBundle, FidelityConfig};
use crate::image::{Image, MarkerSet, ScalarField};
use crate::metrics::threshold_mask;
use crate::nets::{fit_dip_bundle, vm_input, Checkpoint, Method, TrainConfig};
use crate::varsolver::{energy_trace_csv, solve_elastica_admm, solve_tv_admm, AdmmConfig};

/// Every method a user can ask for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SegMethod {
    Tv,
    Elastica,
    /// Per-image DIP-like fit.
    Dip,
    /// A trained VM net (M1–M4).
    Net(Method),
}

impl SegMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SegMethod::Tv => "tv",
            SegMethod::Elastica => "elastica",
            SegMethod::Dip => "dip",
            SegMethod::Net(m) => m.as_str(),
        }
    }

    pub fn needs_weights(self) -> bool {
        matches!(self, SegMethod::Net(_))
    }
}

impl fmt::Display for SegMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SegMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tv" => Ok(SegMethod::Tv),
            "elastica" => Ok(SegMethod::Elastica),
            "dip" => Ok(SegMethod::Dip),
            "m1" | "m2" | "m3" | "m4" => Ok(SegMethod::Net(s.parse()?)),
            other => Err(Error::InvalidParameter(format!(
                "unknown method {other:?} (expected tv, elastica, dip, m1, m2, m3 or m4)"
            ))),
        }
    }
}

/// All hyperparameters, flat, with defaults for every key.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub lambda: f64,
    pub theta: f64,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub iota: f64,
    pub gamma: f64,
    pub rho: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub inner_sweeps: usize,
    pub eps_curv: f64,
    pub curv_smoothing: usize,
    pub edge_weighted: bool,
    pub eikonal_beta: f64,
    pub eikonal_eps: f64,
    pub lr: f64,
    pub epochs: usize,
    pub early_stop_epoch: Option<usize>,
    pub dip_epochs: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        let admm = AdmmConfig::default();
        let train = TrainConfig::default();
        Self {
            lambda: train.lambda,
            theta: train.theta,
            mu: train.mu,
            alpha: 1.0,
            beta: admm.beta,
            iota: train.fidelity.iota,
            gamma: admm.gamma,
            rho: admm.rho,
            max_iter: admm.max_iter,
            tol: admm.tol,
            inner_sweeps: admm.inner_sweeps,
            eps_curv: admm.eps_curv,
            curv_smoothing: admm.curv_smoothing,
            edge_weighted: admm.edge_weighted,
            eikonal_beta: train.fidelity.eikonal_beta,
            eikonal_eps: train.fidelity.eikonal_eps,
            lr: train.lr,
            epochs: train.epochs,
            early_stop_epoch: train.early_stop_epoch,
            dip_epochs: train.dip_epochs,
            noise_sigma: train.noise_sigma,
            seed: train.seed,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("bad value {value:?} for {key}")))
}

impl MethodConfig {
    pub const KEYS: [&'static str; 22] = [
        "lambda",
        "theta",
        "mu",
        "alpha",
        "beta",
        "iota",
        "gamma",
        "rho",
        "max_iter",
        "tol",
        "inner_sweeps",
        "eps_curv",
        "curv_smoothing",
        "edge_weighted",
        "eikonal_beta",
        "eikonal_eps",
        "lr",
        "epochs",
        "early_stop_epoch",
        "dip_epochs",
        "noise_sigma",
        "seed",
    ];

    /// Sets one key from its text form; `early_stop_epoch` also takes `none`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lambda" => self.lambda = parse_value(key, value)?,
            "theta" => self.theta = parse_value(key, value)?,
            "mu" => self.mu = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "iota" => self.iota = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "rho" => self.rho = parse_value(key, value)?,
            "max_iter" => self.max_iter = parse_value(key, value)?,
            "tol" => self.tol = parse_value(key, value)?,
            "inner_sweeps" => self.inner_sweeps = parse_value(key, value)?,
            "eps_curv" => self.eps_curv = parse_value(key, value)?,
            "curv_smoothing" => self.curv_smoothing = parse_value(key, value)?,
            "edge_weighted" => self.edge_weighted = parse_value(key, value)?,
            "eikonal_beta" => self.eikonal_beta = parse_value(key, value)?,
            "eikonal_eps" => self.eikonal_eps = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "early_stop_epoch" => {
                self.early_stop_epoch = match value {
                    "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "dip_epochs" => self.dip_epochs = parse_value(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            other => return Err(Error::InvalidParameter(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` lines; `#` starts a comment.
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::InvalidParameter(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.admm().validate()?;
        self.train().validate()?;
        if !(self.iota.is_finite() && self.iota >= 0.0) {
            return Err(Error::InvalidParameter(format!("iota must be nonnegative, got {}", self.iota)));
        }
        if !(self.eikonal_beta.is_finite() && self.eikonal_beta >= 0.0 && self.eikonal_eps > 0.0) {
            return Err(Error::InvalidParameter("eikonal_beta must be ≥ 0 and eikonal_eps > 0".into()));
        }
        Ok(())
    }

    pub fn admm(&self) -> AdmmConfig {
        AdmmConfig {
            mu: self.mu,
            alpha: self.alpha,
            beta: self.beta,
            rho: self.rho,
            max_iter: self.max_iter,
            tol: self.tol,
            gamma: self.gamma,
            edge_weighted: self.edge_weighted,
            inner_sweeps: self.inner_sweeps,
            eps_curv: self.eps_curv,
            curv_smoothing: self.curv_smoothing,
        }
    }

    pub fn fidelity(&self) -> FidelityConfig {
        FidelityConfig {
            iota: self.iota,
            eikonal_beta: self.eikonal_beta,
            eikonal_eps: self.eikonal_eps,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            theta: self.theta,
            mu: self.mu,
            lr: self.lr,
            epochs: self.epochs,
            early_stop_epoch: self.early_stop_epoch,
            dip_epochs: self.dip_epochs,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            fidelity: self.fidelity(),
        }
    }
}

/// Result of one segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub u: ScalarField,
    pub mask: ScalarField,
    /// Energy or loss trace as CSV; absent for a pure network prediction.
    pub trace_csv: Option<String>,
}

/// Runs `method` on one image with precomputed data terms.
pub fn segment(
    f: &Image,
    markers: &MarkerSet,
    bundle: &FidelityBundle,
    method: SegMethod,
    cfg: &MethodConfig,
    weights: Option<&Checkpoint>,
) -> Result<Segmentation> {
    cfg.validate()?;
    if bundle.dims() != f.dims() {
        return Err(Error::ShapeMismatch("bundle and image sizes differ".into()));
    }
    let (u, trace_csv) = match method {
        SegMethod::Tv => {
            let rep = solve_tv_admm(bundle, &cfg.admm(), cfg.lambda, cfg.theta)?;
            let csv = rep.trace_csv();
            (rep.u, Some(csv))
        }
        SegMethod::Elastica => {
            let rep = solve_elastica_admm(bundle, &cfg.admm(), cfg.lambda, cfg.theta)?;
            let csv = energy_trace_csv(&rep.energy_trace);
            (rep.u, Some(csv))
        }
        SegMethod::Dip => {
            let run = fit_dip_bundle(f, bundle, &cfg.train())?;
            let csv = run.loss_csv();
            (run.output.expect("DIP fits report their label"), Some(csv))
        }
        SegMethod::Net(m) => {
            let ck = weights.ok_or_else(|| Error::InvalidParameter(format!("method {m} needs trained weights")))?;
            if ck.method != m {
                return Err(Error::InvalidParameter(format!(
                    "weights were trained for {}, not {m}",
                    ck.method
                )));
            }
            let g = m.geometry(markers, bundle)?;
            (ck.vm.infer(vm_input(f, &g)?)?, None)
        }
    };
    let mask = threshold_mask(&u, cfg.gamma)?;
    Ok(Segmentation { u, mask, trace_csv })
}

/// Builds the data terms and runs `method`.
pub fn segment_image(
    f: &Image,
    markers: &MarkerSet,
    method: SegMethod,
    cfg: &MethodConfig,
    weights: Option<&Checkpoint>,
) -> Result<Segmentation> {
    cfg.validate()?;
    let bundle = FidelityBundle::build(f, markers, &cfg.fidelity())?;
    segment(f, markers, &bundle, method, cfg, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;
    use crate::nets::train;
    use crate::synth::{generate, FixtureKind};

    #[test]
    fn method_names_round_trip() {
        for s in ["tv", "elastica", "dip", "m1", "m2", "m3", "m4"] {
            assert_eq!(s.parse::<SegMethod>().unwrap().as_str(), s);
        }
        assert!("m9".parse::<SegMethod>().is_err());
        assert!("TV ".parse::<SegMethod>().is_err());
    }

    #[test]
    fn kv_parsing() {
        let cfg = MethodConfig::parse_kv("# comment\nlambda = 1.5\n\n theta=0.25 # trailing\nearly_stop_epoch = 40\nedge_weighted = true\n").unwrap();
        assert_eq!(cfg.lambda, 1.5);
        assert_eq!(cfg.theta, 0.25);
        assert_eq!(cfg.early_stop_epoch, Some(40));
        assert!(cfg.edge_weighted);
        assert_eq!(cfg.mu, MethodConfig::default().mu);
        assert!(MethodConfig::parse_kv("lamda = 1").is_err());
        assert!(MethodConfig::parse_kv("lambda 1").is_err());
        assert!(MethodConfig::parse_kv("epochs = -3").is_err());
        assert!(MethodConfig::parse_kv("gamma = 1.5").is_err());
        assert_eq!(MethodConfig::parse_kv("").unwrap(), MethodConfig::default());
    }

    #[test]
    fn every_key_is_settable() {
        let defaults = serde_json::to_value(MethodConfig::default()).unwrap();
        let names: Vec<&String> = defaults.as_object().unwrap().keys().collect();
        assert_eq!(names.len(), MethodConfig::KEYS.len());
        for key in MethodConfig::KEYS {
            assert!(names.iter().any(|n| n.as_str() == key), "{key}");
            let v = match key {
                "edge_weighted" => "false",
                "early_stop_epoch" => "none",
                _ => "1",
            };
            let mut cfg = MethodConfig::default();
            cfg.set(key, v).unwrap();
        }
    }

    #[test]
    fn json_params_reject_unknown_keys() {
        let cfg: MethodConfig = serde_json::from_str(r#"{"mu": 0.3}"#).unwrap();
        assert_eq!(cfg.mu, 0.3);
        assert!(serde_json::from_str::<MethodConfig>(r#"{"mux": 0.3}"#).is_err());
    }

    #[test]
    fn tv_segments_the_disc_fixture() {
        let fx = generate(FixtureKind::Disc, 64, 0.1, 1).unwrap();
        let seg = segment_image(&fx.image, &fx.markers, SegMethod::Tv, &MethodConfig::default(), None).unwrap();
        assert!(dice(&seg.mask, &fx.truth).unwrap() >= 0.99);
        assert!(seg.trace_csv.unwrap().starts_with("iteration,energy\n"));
        let seg = segment_image(&fx.image, &fx.markers, SegMethod::Elastica, &MethodConfig::default(), None).unwrap();
        assert!(dice(&seg.mask, &fx.truth).unwrap() >= 0.99);
    }

    #[test]
    fn network_methods_check_their_weights() {
        let fx = generate(FixtureKind::Disc, 16, 0.1, 2).unwrap();
        let cfg = MethodConfig { epochs: 0, ..Default::default() };
        let m = SegMethod::Net(Method::M2);
        assert!(segment_image(&fx.image, &fx.markers, m, &cfg, None).is_err());
        let run = train(&[(fx.image.clone(), fx.markers.clone())], Method::M2, &cfg.train()).unwrap();
        let ck = run.checkpoint().unwrap();
        let seg = segment_image(&fx.image, &fx.markers, m, &cfg, Some(&ck)).unwrap();
        assert!(seg.trace_csv.is_none());
        assert!(segment_image(&fx.image, &fx.markers, SegMethod::Net(Method::M1), &cfg, Some(&ck)).is_err());
    }
}
