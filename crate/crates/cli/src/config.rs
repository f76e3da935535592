use cmpsim::lieb_liniger::GridSpec;
use cmpsim::trace_dsp::TraceConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Everything a run needs. Frequencies are MHz (value / 2 pi), times us.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
    pub seed: u64,
    pub landscape: LandscapeConfig,
    pub cmps: CmpsConfig,
    pub scan: ScanConfig,
    pub traces: TracesConfig,
    pub calibrate: CalibrateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("out"),
            cache_dir: None,
            jobs: 0,
            seed: 7,
            landscape: LandscapeConfig::default(),
            cmps: CmpsConfig::default(),
            scan: ScanConfig::default(),
            traces: TracesConfig::default(),
            calibrate: CalibrateConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub alpha_mhz: Vec<f64>,
    /// Drive rates in units of `Omega_0`.
    pub omega_factor: Vec<f64>,
    pub n_cav: usize,
    pub n_q: usize,
    pub n_tau: usize,
    pub span_kappa: f64,
    /// Correlation samples kept per cached point.
    pub keep_tau_points: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        let g = GridSpec::default();
        LandscapeConfig {
            alpha_mhz: g.alpha_mhz,
            omega_factor: g.omega_factor,
            n_cav: 6,
            n_q: 3,
            n_tau: 1024,
            span_kappa: 10.0,
            keep_tau_points: 2048,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CmpsConfig {
    pub v_tilde: Vec<f64>,
    pub dims: Vec<usize>,
    pub rel_tol: f64,
}

impl Default for CmpsConfig {
    fn default() -> Self {
        CmpsConfig {
            v_tilde: vec![0.01, 0.1, 1.0, 10.0, 100.0, 1000.0],
            dims: vec![1, 2, 14],
            rel_tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub v: Vec<f64>,
    pub mu: f64,
    pub x_max: f64,
    pub n_x: usize,
    /// cMPS bond dimensions solved at each matched `v_tilde`; empty skips.
    pub reference_dims: Vec<usize>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            v: (0..=8).map(|k| 10f64.powf(-1.5 + 0.4 * k as f64)).collect(),
            mu: 1.0,
            x_max: 2.0,
            n_x: 41,
            reference_dims: vec![2, 14],
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Coherent,
    Thermal,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TracesConfig {
    pub model: SourceKind,
    /// Photons per us.
    pub flux: f64,
    pub f_clock: f64,
    pub f_if: f64,
    pub fir_bandwidth: f64,
    pub fir_taps: usize,
    pub n_samples: usize,
    pub n_traces: usize,
    pub noise_psd: f64,
    pub n_th: f64,
    pub blocks: usize,
    /// Also write the raw ON/OFF batches.
    pub write_raw: bool,
}

impl Default for TracesConfig {
    fn default() -> Self {
        let t = TraceConfig::default();
        TracesConfig {
            model: SourceKind::Coherent,
            flux: 5.0,
            f_clock: t.f_clock,
            f_if: t.f_if,
            fir_bandwidth: t.fir_bandwidth,
            fir_taps: t.fir_taps,
            n_samples: t.n_samples,
            n_traces: t.n_traces,
            noise_psd: t.noise_psd,
            n_th: t.n_th,
            blocks: t.blocks,
            write_raw: false,
        }
    }
}

impl TracesConfig {
    pub fn trace_config(&self, seed: u64) -> TraceConfig {
        TraceConfig {
            f_clock: self.f_clock,
            f_if: self.f_if,
            fir_bandwidth: self.fir_bandwidth,
            fir_taps: self.fir_taps,
            n_samples: self.n_samples,
            n_traces: self.n_traces,
            noise_psd: self.noise_psd,
            n_th: self.n_th,
            seed,
            blocks: self.blocks,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    /// CSV `omega_mhz,t_abs_sq`.
    pub spectroscopy: Option<PathBuf>,
    /// CSV `v1,v2,g_mhz,delta_mhz`.
    pub voltage_samples: Option<PathBuf>,
    /// CSV `drive_mhz,coherent,total`, fluxes per us.
    pub flux_curves: Option<PathBuf>,
    pub s_delta: f64,
    /// Bias of the efficiency predictor, `(Delta, g)` in MHz.
    pub efficiency_bias: [f64; 2],
    pub drive_scale_bracket: [f64; 2],
    /// Closed-loop tuning on a simulated plant built from the fitted map.
    pub tune: bool,
    pub tune_target: [f64; 2],
    pub tune_tol: [f64; 2],
    pub max_iter: usize,
    pub plant_quad: f64,
    pub plant_noise: f64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        CalibrateConfig {
            spectroscopy: None,
            voltage_samples: None,
            flux_curves: None,
            s_delta: 2.0,
            efficiency_bias: [3.0, 5.7],
            drive_scale_bracket: [0.3, 3.0],
            tune: false,
            tune_target: [5.7, 3.0],
            tune_tol: [0.057, 0.03],
            max_iter: 10,
            plant_quad: 0.1,
            plant_noise: 0.002,
        }
    }
}

fn finite_all(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), String> {
        let l = &self.landscape;
        if l.alpha_mhz.is_empty() || l.omega_factor.is_empty() {
            return Err("landscape grid is empty".into());
        }
        if !finite_all(&l.alpha_mhz) || !finite_all(&l.omega_factor) || l.omega_factor.iter().any(|&f| f <= 0.0) {
            return Err("landscape axes must be finite, drive factors positive".into());
        }
        if l.keep_tau_points < 2 {
            return Err("keep_tau_points must be at least 2".into());
        }
        if self.cmps.dims.iter().any(|&d| d == 0 || d > 16) {
            return Err("cMPS bond dimensions must lie in 1..=16".into());
        }
        if self.scan.reference_dims.iter().any(|&d| d == 0 || d > 16) {
            return Err("reference bond dimensions must lie in 1..=16".into());
        }
        if !finite_all(&self.cmps.v_tilde) || self.cmps.v_tilde.iter().any(|&v| v <= 0.0) {
            return Err("v_tilde values must be positive".into());
        }
        if !finite_all(&self.scan.v) || self.scan.v.iter().any(|&v| v <= 0.0) || !(self.scan.mu > 0.0) {
            return Err("scan v values and mu must be positive".into());
        }
        if !(self.scan.x_max > 0.0) || self.scan.n_x < 2 {
            return Err("scan x grid needs x_max > 0 and n_x >= 2".into());
        }
        let c = &self.calibrate;
        if !finite_all(&c.tune_target) || !finite_all(&c.efficiency_bias) || !(c.s_delta >= 1.0) {
            return Err("calibration inputs must be finite with s_delta >= 1".into());
        }
        self.traces.trace_config(self.seed).validate().map_err(|e| e.to_string())?;
        Ok(())
    }
}
