//! Heterodyne trace synthesis for Gaussian fields, digital demodulation,
//! FFT correlators and ON/OFF noise subtraction.
//!
//! Flux units are photons/us. White noise of spectral density `S` (photons
//! per second per Hz, i.e. a photon number) contributes `S * B` to the flux
//! measured in a band `B` (MHz).
//!
//! Noise subtraction. With `S = s + h`, `h` circular Gaussian independent of
//! the signal `s`, and `Y(tau) = <h*(t+tau) h(t)>`,
//!
//! ```text
//! <|S(t+tau)|^2 |S(t)|^2> = G2_s(tau) + <|h(t+tau)|^2 |h(t)|^2>
//!                         + 2 G1_s(0) Y(0) + 2 Re[G1_s(tau) Y*(tau)]
//! ```
//!
//! where the pure-noise term is Gaussian, `Y(0)^2 + |Y(tau)|^2`, so the
//! OFF batch only has to supply its second moment `Y`. A thermal
//! background of flux `n_th` present only during OFF is removed from that
//! reference first: its share of `Y` is `n_th K(tau)`, `K` the normalized
//! filter autocorrelation.

use crate::linalg::{c, C64, ZERO};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("G1(0) = {g1_zero:.4e} is below the statistical floor {floor:.4e}")]
    NegativeFluxEstimate {
        g1_zero: f64,
        floor: f64,
        g1: Box<G1Estimate>,
    },
    #[error("ON and OFF data do not share a configuration")]
    Mismatch,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TraceConfig {
    /// Sample rate, MHz.
    pub f_clock: f64,
    /// Intermediate frequency, MHz.
    pub f_if: f64,
    /// -3 dB point of the FIR low-pass, MHz.
    pub fir_bandwidth: f64,
    pub fir_taps: usize,
    pub n_samples: usize,
    pub n_traces: usize,
    /// Amplifier noise referred to the input, photons/s/Hz.
    pub noise_psd: f64,
    /// Thermal background flux in the detection band during OFF, 1/us.
    pub n_th: f64,
    pub seed: u64,
    /// Blocks for jackknife error bars.
    pub blocks: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            f_clock: 100.0,
            f_if: 25.0,
            fir_bandwidth: 10.0,
            fir_taps: 63,
            n_samples: 1024,
            n_traces: 2000,
            noise_psd: 2.0,
            n_th: 0.03,
            seed: 0,
            blocks: 20,
        }
    }
}

impl TraceConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.f_clock
    }

    pub fn duration(&self) -> f64 {
        self.n_samples as f64 * self.dt()
    }

    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: &str| Err(DspError::Config(m.into()));
        if !(self.f_clock > 0.0) || !(self.f_if > 0.0 && self.f_if < self.f_clock / 2.0) {
            return bad("need 0 < f_if < f_clock / 2");
        }
        if !(self.fir_bandwidth > 0.0 && self.fir_bandwidth < self.f_clock / 2.0) {
            return bad("FIR bandwidth must lie below Nyquist");
        }
        if self.fir_taps % 2 == 0 || self.fir_taps < 3 || self.fir_taps >= self.n_samples {
            return bad("FIR length must be odd and shorter than a trace");
        }
        if self.n_traces == 0 || !(self.noise_psd >= 0.0) || !(self.n_th >= 0.0) {
            return bad("need traces > 0, noise_psd >= 0, n_th >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub enum FieldModel {
    /// Constant amplitude `sqrt(flux)`.
    Coherent { flux: f64 },
    /// One complex Gaussian amplitude per trace with `<|c|^2> = flux`.
    Thermal { flux: f64 },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub enum Label {
    On,
    Off,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TraceBatch {
    pub label: Label,
    pub cfg: TraceConfig,
    /// Photons/us per unit `|S|^2` after demodulation.
    pub flux_scale: f64,
    #[serde(skip)]
    pub traces: Vec<Vec<f64>>,
}

/// Hamming-windowed sinc low-pass, unit DC gain, with its -3 dB point at
/// `fir_bandwidth`.
pub fn fir_design(cfg: &TraceConfig) -> Vec<f64> {
    let n = cfg.fir_taps;
    let build = |fc: f64| -> Vec<f64> {
        let m = (n - 1) as f64 / 2.0;
        let w = 2.0 * fc / cfg.f_clock;
        let mut h: Vec<f64> = (0..n)
            .map(|k| {
                let x = k as f64 - m;
                let sinc = if x == 0.0 { 1.0 } else { (PI * w * x).sin() / (PI * w * x) };
                let win = 0.54 + 0.46 * (PI * x / m).cos();
                w * sinc * win
            })
            .collect();
        let s: f64 = h.iter().sum();
        h.iter_mut().for_each(|x| *x /= s);
        h
    };
    let target = 0.5f64.sqrt();
    let (mut lo, mut hi) = (0.5 * cfg.fir_bandwidth, (2.0 * cfg.fir_bandwidth).min(0.499 * cfg.f_clock));
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if fir_response(&build(mid), cfg.fir_bandwidth, cfg.f_clock).norm() < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    build(0.5 * (lo + hi))
}

/// Frequency response of a centred (zero-phase) FIR at `f` MHz.
pub fn fir_response(taps: &[f64], f: f64, f_clock: f64) -> C64 {
    let m = (taps.len() - 1) as f64 / 2.0;
    taps.iter()
        .enumerate()
        .map(|(k, &h)| C64::from_polar(h, -2.0 * PI * f * (k as f64 - m) / f_clock))
        .sum()
}

/// Circular autocorrelation of the taps on an `n`-point ring, normalized to
/// 1 at zero lag.
pub fn filter_autocorrelation(taps: &[f64], n: usize) -> Vec<f64> {
    let l = taps.len();
    let r0: f64 = taps.iter().map(|h| h * h).sum();
    let mut r = vec![0.0; n];
    for k in 0..l {
        let v: f64 = (0..l - k).map(|j| taps[j] * taps[j + k]).sum::<f64>() / r0;
        r[k] = v;
        if k > 0 {
            r[n - k] = v;
        }
    }
    r
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gauss(rng: &mut ChaCha8Rng, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    c(s * re, s * im)
}

/// Voltage traces `Re[(c + h) e^{i w_IF t}]` in units of sqrt(photons/us).
/// Noise uses stream `2i` of the seed for trace `i` regardless of label, so
/// ON and OFF batches with the same seed share their amplifier noise.
pub fn synthesize_traces(model: FieldModel, cfg: &TraceConfig, label: Label) -> Result<TraceBatch, DspError> {
    cfg.validate()?;
    let flux = match model {
        FieldModel::Coherent { flux } | FieldModel::Thermal { flux } => flux,
    };
    if !(flux >= 0.0) {
        return Err(DspError::Config("flux must be >= 0".into()));
    }
    let taps = fir_design(cfg);
    let taps_sq: f64 = taps.iter().map(|h| h * h).sum();
    // the real mixer folds the image band onto the signal band, so half of
    // the per-sample variance ends up in baseband
    let amp_var = cfg.noise_psd * cfg.f_clock / 2.0;
    let th_var = match label {
        Label::On => 0.0,
        Label::Off => cfg.n_th / taps_sq / 2.0,
    };
    let n = cfg.n_samples;
    let w = 2.0 * PI * cfg.f_if * cfg.dt();
    let phase: Vec<C64> = (0..n).map(|k| C64::from_polar(1.0, w * k as f64)).collect();
    let traces = (0..cfg.n_traces)
        .into_par_iter()
        .map(|i| {
            let mut noise = stream_rng(cfg.seed, 2 * i as u64);
            let mut extra = stream_rng(cfg.seed, 2 * i as u64 + 1);
            let sig = match (label, model) {
                (Label::Off, _) => ZERO,
                (Label::On, FieldModel::Coherent { flux }) => c(flux.sqrt(), 0.0),
                (Label::On, FieldModel::Thermal { flux }) => gauss(&mut extra, flux),
            };
            (0..n)
                .map(|k| {
                    let mut z = sig;
                    if amp_var > 0.0 {
                        z += gauss(&mut noise, amp_var);
                    }
                    if th_var > 0.0 {
                        z += gauss(&mut extra, th_var);
                    }
                    (z * phase[k]).re
                })
                .collect()
        })
        .collect();
    Ok(TraceBatch {
        label,
        cfg: cfg.clone(),
        flux_scale: 4.0,
        traces,
    })
}

/// Complex baseband traces after mixing and FIR filtering.
#[derive(Clone, Debug)]
pub struct Baseband {
    pub label: Label,
    pub cfg: TraceConfig,
    pub taps: Vec<f64>,
    pub flux_scale: f64,
    pub traces: Vec<Vec<C64>>,
}

struct Plans {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(n: usize) -> Self {
        let mut p = FftPlanner::new();
        Plans {
            fwd: p.plan_fft_forward(n),
            inv: p.plan_fft_inverse(n),
        }
    }
}

/// Mix with `e^{-i w_IF t}` and apply the FIR as a zero-phase circular
/// filter.
pub fn demodulate(batch: &TraceBatch) -> Baseband {
    let cfg = &batch.cfg;
    let n = cfg.n_samples;
    let taps = fir_design(cfg);
    let plans = Plans::new(n);
    let mut kernel = vec![ZERO; n];
    let m = taps.len() / 2;
    for (k, &h) in taps.iter().enumerate() {
        kernel[(k + n - m) % n] = c(h, 0.0);
    }
    plans.fwd.process(&mut kernel);
    let w = 2.0 * PI * cfg.f_if * cfg.dt();
    let lo: Vec<C64> = (0..n).map(|k| C64::from_polar(1.0, -w * k as f64)).collect();
    let traces = batch
        .traces
        .par_iter()
        .map(|x| {
            let mut buf: Vec<C64> = x.iter().zip(&lo).map(|(v, l)| l * *v).collect();
            plans.fwd.process(&mut buf);
            buf.iter_mut().zip(&kernel).for_each(|(a, k)| *a *= k);
            plans.inv.process(&mut buf);
            buf.iter_mut().for_each(|a| *a /= n as f64);
            buf
        })
        .collect();
    Baseband {
        label: batch.label,
        cfg: cfg.clone(),
        taps,
        flux_scale: batch.flux_scale,
        traces,
    }
}

/// Trace-averaged circular correlators in flux units, kept per block for
/// error estimates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawCorrelators {
    pub label: Label,
    pub cfg: TraceConfig,
    pub taps: Vec<f64>,
    /// `Gamma1(tau) = <S*(t+tau) S(t)>`.
    pub gamma1: Vec<C64>,
    /// `Gamma2(tau) = <|S(t+tau)|^2 |S(t)|^2>`.
    pub gamma2: Vec<f64>,
    pub block_gamma1: Vec<Vec<C64>>,
    pub block_gamma2: Vec<Vec<f64>>,
}

fn autocorr(plans: &Plans, x: &mut [C64]) {
    plans.fwd.process(x);
    x.iter_mut().for_each(|z| *z = c(z.norm_sqr(), 0.0));
    plans.inv.process(x);
}

pub fn raw_correlators(bb: &Baseband) -> RawCorrelators {
    let n = bb.cfg.n_samples;
    let m = bb.traces.len();
    let blocks = bb.cfg.blocks.clamp(1, m);
    let plans = Plans::new(n);
    let norm1 = bb.flux_scale / (n * n) as f64;
    let norm2 = bb.flux_scale * bb.flux_scale / (n * n) as f64;
    let bounds: Vec<(usize, usize)> = (0..blocks).map(|b| (b * m / blocks, (b + 1) * m / blocks)).collect();
    let per_block: Vec<(Vec<C64>, Vec<f64>)> = bounds
        .par_iter()
        .map(|&(lo, hi)| {
            let mut g1 = vec![ZERO; n];
            let mut g2 = vec![0.0; n];
            let mut buf = vec![ZERO; n];
            for s in &bb.traces[lo..hi] {
                // conj puts the result in <S*(t+tau) S(t)> order
                buf.iter_mut().zip(s).for_each(|(b, z)| *b = z.conj());
                autocorr(&plans, &mut buf);
                g1.iter_mut().zip(&buf).for_each(|(a, b)| *a += b * norm1);
                buf.iter_mut().zip(s).for_each(|(b, z)| *b = c(z.norm_sqr(), 0.0));
                autocorr(&plans, &mut buf);
                g2.iter_mut().zip(&buf).for_each(|(a, b)| *a += b.re * norm2);
            }
            let k = (hi - lo) as f64;
            g1.iter_mut().for_each(|a| *a /= k);
            g2.iter_mut().for_each(|a| *a /= k);
            (g1, g2)
        })
        .collect();
    let mut gamma1 = vec![ZERO; n];
    let mut gamma2 = vec![0.0; n];
    for ((g1, g2), &(lo, hi)) in per_block.iter().zip(&bounds) {
        let wgt = (hi - lo) as f64 / m as f64;
        gamma1.iter_mut().zip(g1).for_each(|(a, b)| *a += b * wgt);
        gamma2.iter_mut().zip(g2).for_each(|(a, b)| *a += b * wgt);
    }
    let (block_gamma1, block_gamma2) = per_block.into_iter().unzip();
    RawCorrelators {
        label: bb.label,
        cfg: bb.cfg.clone(),
        taps: bb.taps.clone(),
        gamma1,
        gamma2,
        block_gamma1,
        block_gamma2,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct G1Estimate {
    pub tau: Vec<f64>,
    pub g1: Vec<C64>,
    pub g1_se: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorrectedEstimate {
    pub g1: G1Estimate,
    pub g2: Vec<f64>,
    pub g2_se: Vec<f64>,
    pub flux: f64,
    pub g2_zero: f64,
    pub g2_zero_se: f64,
}

/// Signal `(G1, G2)` from ON moments and the OFF second moment.
fn subtract(on1: &[C64], on2: &[f64], off1: &[C64], thermal: &[f64], n_th: f64) -> (Vec<C64>, Vec<f64>) {
    let n = on1.len();
    let y: Vec<C64> = (0..n).map(|k| off1[k] - n_th * thermal[k]).collect();
    let g1: Vec<C64> = (0..n).map(|k| on1[k] - y[k]).collect();
    let y0 = y[0].re;
    let g10 = g1[0].re;
    let g2 = (0..n)
        .map(|k| on2[k] - y0 * y0 - y[k].norm_sqr() - 2.0 * g10 * y0 - 2.0 * (g1[k] * y[k].conj()).re)
        .collect();
    (g1, g2)
}

fn jackknife<F: Fn(usize) -> Vec<f64>>(blocks: usize, full: &[f64], leave_out: F) -> Vec<f64> {
    if blocks < 2 {
        return vec![f64::NAN; full.len()];
    }
    let samples: Vec<Vec<f64>> = (0..blocks).map(leave_out).collect();
    let b = blocks as f64;
    (0..full.len())
        .map(|k| {
            let mean = samples.iter().map(|s| s[k]).sum::<f64>() / b;
            let ss: f64 = samples.iter().map(|s| (s[k] - mean).powi(2)).sum();
            ((b - 1.0) / b * ss).sqrt()
        })
        .collect()
}

fn leave_one_out<T: Copy + Default + std::ops::AddAssign + std::ops::Mul<f64, Output = T>>(
    blocks: &[Vec<T>],
    skip: usize,
) -> Vec<T> {
    let w = 1.0 / (blocks.len() - 1) as f64;
    let mut out = vec![T::default(); blocks[0].len()];
    for (b, v) in blocks.iter().enumerate() {
        if b != skip {
            out.iter_mut().zip(v).for_each(|(a, x)| *a += *x * w);
        }
    }
    out
}

/// Signal `G1(tau)` and `g2(tau)` from ON and OFF correlators. Errors are
/// leave-one-block-out jackknife estimates over paired blocks.
pub fn extract_corrected(on: &RawCorrelators, off: &RawCorrelators) -> Result<CorrectedEstimate, DspError> {
    let cfg = &on.cfg;
    if on.cfg.n_samples != off.cfg.n_samples || on.cfg.f_clock != off.cfg.f_clock || on.taps != off.taps {
        return Err(DspError::Mismatch);
    }
    let n = cfg.n_samples;
    let thermal = filter_autocorrelation(&on.taps, n);
    let n_th = off.cfg.n_th;
    let (g1, g2_raw) = subtract(&on.gamma1, &on.gamma2, &off.gamma1, &thermal, n_th);
    let blocks = on.block_gamma1.len().min(off.block_gamma1.len());
    let loo = |skip: usize| {
        let a1 = leave_one_out(&on.block_gamma1[..blocks], skip);
        let a2 = leave_one_out(&on.block_gamma2[..blocks], skip);
        let b1 = leave_one_out(&off.block_gamma1[..blocks], skip);
        subtract(&a1, &a2, &b1, &thermal, n_th)
    };
    let g1_re: Vec<f64> = g1.iter().map(|z| z.re).collect();
    let g1_se = jackknife(blocks, &g1_re, |s| loo(s).0.iter().map(|z| z.re).collect());
    let tau: Vec<f64> = (0..n).map(|k| k as f64 * cfg.dt()).collect();
    let g1_est = G1Estimate { tau, g1, g1_se };
    let flux = g1_est.g1[0].re;
    let floor = 3.0 * g1_est.g1_se[0];
    if !(flux > floor) || !(flux > 0.0) {
        return Err(DspError::NegativeFluxEstimate {
            g1_zero: flux,
            floor,
            g1: Box::new(g1_est),
        });
    }
    let g2: Vec<f64> = g2_raw.iter().map(|x| x / (flux * flux)).collect();
    let g2_se = jackknife(blocks, &g2, |s| {
        let (a, b) = loo(s);
        let f = a[0].re;
        b.iter().map(|x| x / (f * f)).collect()
    });
    Ok(CorrectedEstimate {
        g2_zero: g2[0],
        g2_zero_se: g2_se[0],
        flux,
        g1: g1_est,
        g2,
        g2_se,
    })
}

/// Synthesize ON (seed) and OFF (seed + 1) batches for `model` and run
/// the full chain.
pub fn measure(model: FieldModel, cfg: &TraceConfig) -> Result<CorrectedEstimate, DspError> {
    let on = synthesize_traces(model, cfg, Label::On)?;
    let on = raw_correlators(&demodulate(&on));
    let off_cfg = TraceConfig {
        seed: cfg.seed.wrapping_add(1),
        ..cfg.clone()
    };
    let off = synthesize_traces(model, &off_cfg, Label::Off)?;
    let off = raw_correlators(&demodulate(&off));
    extract_corrected(&on, &off)
}

/// Flat binary: u64 LE header length, JSON header, then f32 LE samples
/// trace by trace.
pub fn write_batch<W: Write>(batch: &TraceBatch, mut out: W) -> Result<(), DspError> {
    let header = serde_json::to_vec(batch)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut buf = Vec::with_capacity(batch.cfg.n_samples * 4);
    for t in &batch.traces {
        buf.clear();
        t.iter().for_each(|&x| buf.extend_from_slice(&(x as f32).to_le_bytes()));
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_batch<R: Read>(mut input: R) -> Result<TraceBatch, DspError> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let mut batch: TraceBatch = serde_json::from_slice(&header)?;
    let n = batch.cfg.n_samples;
    let mut raw = vec![0u8; n * 4];
    batch.traces = (0..batch.cfg.n_traces)
        .map(|_| {
            input.read_exact(&mut raw)?;
            Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect())
        })
        .collect::<Result<_, std::io::Error>>()?;
    Ok(batch)
}
