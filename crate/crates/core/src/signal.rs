//! Spectral heart-rate estimation, the sliding-window protocol and the
//! MAE/RMSE/R metrics.

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

pub const BAND_LO_HZ: f64 = 0.7;
pub const BAND_HI_HZ: f64 = 3.0;
pub const DEFAULT_PAD: usize = 2048;
pub const MIN_LEN: usize = 16;
pub const WINDOW: usize = 128;
pub const STRIDE: usize = 32;
pub const MEDIAN_KERNEL: usize = 5;

/// A sampled pulse waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct BvpWaveform {
    pub samples: Vec<f64>,
    pub fs: f64,
}

impl BvpWaveform {
    pub fn new(samples: Vec<f64>, fs: f64) -> Self {
        Self { samples, fs }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HrEstimate {
    pub bpm: f64,
    pub start: usize,
    pub len: usize,
}

pub struct Spectrum {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
}

/// Symmetric Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Subtracts the mean in place.
pub fn demean(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= m);
}

/// Zero mean, unit variance; a constant input maps to zeros.
pub fn standardize(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    demean(&mut out);
    let n = out.len().max(1) as f64;
    let sd = (out.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    if sd > 1e-12 {
        out.iter_mut().for_each(|v| *v /= sd);
    } else {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

/// One-sided power of the mean-removed, Hann-windowed, zero-padded signal.
pub fn power_spectrum(x: &[f64], fs: f64, pad_to: usize) -> Result<Spectrum> {
    if x.len() < MIN_LEN {
        return Err(Error::invalid(format!(
            "spectrum needs at least {MIN_LEN} samples, got {}",
            x.len()
        )));
    }
    if pad_to < x.len() {
        return Err(Error::invalid(format!("pad length {pad_to} shorter than signal {}", x.len())));
    }
    let mut centred = x.to_vec();
    demean(&mut centred);
    let mut buf = vec![Complex::new(0.0, 0.0); pad_to];
    for ((b, v), w) in buf.iter_mut().zip(&centred).zip(hann(x.len())) {
        b.re = v * w;
    }
    FftPlanner::new().plan_fft_forward(pad_to).process(&mut buf);
    let bins = pad_to / 2 + 1;
    Ok(Spectrum {
        freqs: (0..bins).map(|k| k as f64 * fs / pad_to as f64).collect(),
        power: buf[..bins].iter().map(|c| c.norm_sqr()).collect(),
    })
}

/// Heart rate from the in-band spectral peak with parabolic refinement.
pub fn estimate_hr(x: &[f64], fs: f64) -> Result<f64> {
    let spec = power_spectrum(x, fs, DEFAULT_PAD.max(x.len()))?;
    let band: Vec<usize> = (0..spec.freqs.len())
        .filter(|&k| spec.freqs[k] >= BAND_LO_HZ && spec.freqs[k] <= BAND_HI_HZ)
        .collect();
    let Some(&first) = band.first() else {
        return Err(Error::invalid(format!("no spectral bins in band at fs = {fs}")));
    };
    let mut k = first;
    for &j in &band {
        if spec.power[j] > spec.power[k] {
            k = j;
        }
    }
    let mut offset = 0.0;
    if k > 0 && k + 1 < spec.power.len() {
        let (a, b, c) = (spec.power[k - 1], spec.power[k], spec.power[k + 1]);
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-300 {
            offset = (0.5 * (a - c) / denom).clamp(-1.0, 1.0);
        }
    }
    let df = spec.freqs[1] - spec.freqs[0];
    let hz = (spec.freqs[k] + offset * df).clamp(BAND_LO_HZ, BAND_HI_HZ);
    Ok(60.0 * hz)
}

/// Median filter with numpy-style reflect padding. Short series shrink the
/// kernel to the largest odd length that fits.
pub fn median_filter(values: &[f64], kernel: usize) -> Vec<f64> {
    let n = values.len();
    let mut k = kernel.min(n);
    if k % 2 == 0 {
        k = k.saturating_sub(1);
    }
    if k <= 1 {
        return values.to_vec();
    }
    let half = k / 2;
    let at = |i: isize| -> f64 {
        let n = n as isize;
        let j = if i < 0 {
            -i
        } else if i >= n {
            2 * (n - 1) - i
        } else {
            i
        };
        values[j as usize]
    };
    (0..n as isize)
        .map(|i| {
            let mut w: Vec<f64> = (-(half as isize)..=half as isize).map(|d| at(i + d)).collect();
            w.sort_by(f64::total_cmp);
            w[half]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlidingHr {
    pub windows: Vec<HrEstimate>,
    pub filtered: Vec<f64>,
    pub bpm: f64,
}

/// Windowed estimates (length `min(128, T)`, stride 32), median-filtered
/// with kernel 5 and averaged.
pub fn sliding_hr(x: &[f64], fs: f64) -> Result<SlidingHr> {
    let len = WINDOW.min(x.len());
    let mut windows = Vec::new();
    let mut start = 0;
    while start + len <= x.len() {
        windows.push(HrEstimate {
            bpm: estimate_hr(&x[start..start + len], fs)?,
            start,
            len,
        });
        start += STRIDE;
    }
    let raw: Vec<f64> = windows.iter().map(|w| w.bpm).collect();
    let filtered = median_filter(&raw, MEDIAN_KERNEL);
    let bpm = filtered.iter().sum::<f64>() / filtered.len() as f64;
    Ok(SlidingHr {
        windows,
        filtered,
        bpm,
    })
}

/// Pearson correlation with `eps` added to each standard deviation.
pub fn pearson(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (da, db) = (a[i] - ma, b[i] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    let nf = n as f64;
    (sab / nf) / (((saa / nf).sqrt() + eps) * ((sbb / nf).sqrt() + eps))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Mean per-clip Pearson between predicted and reference signals.
    pub r: f64,
}

pub fn metrics(pred_hr: &[f64], ref_hr: &[f64], pred_sig: &[Vec<f64>], ref_sig: &[Vec<f64>]) -> Result<Metrics> {
    if pred_hr.len() != ref_hr.len() || pred_sig.len() != ref_sig.len() {
        return Err(Error::invalid(format!(
            "metric inputs differ in length: {}/{} rates, {}/{} signals",
            pred_hr.len(),
            ref_hr.len(),
            pred_sig.len(),
            ref_sig.len()
        )));
    }
    if pred_hr.is_empty() {
        return Err(Error::invalid("metrics need at least one clip"));
    }
    let n = pred_hr.len() as f64;
    let mae = pred_hr.iter().zip(ref_hr).map(|(p, r)| (p - r).abs()).sum::<f64>() / n;
    let rmse = (pred_hr.iter().zip(ref_hr).map(|(p, r)| (p - r).powi(2)).sum::<f64>() / n).sqrt();
    let mut r = 0.0;
    for (p, q) in pred_sig.iter().zip(ref_sig) {
        if p.len() != q.len() {
            return Err(Error::invalid("signal pair differs in length"));
        }
        r += pearson(p, q, 1e-8);
    }
    let r = if pred_sig.is_empty() {
        f64::NAN
    } else {
        r / pred_sig.len() as f64
    };
    debug_assert!(rmse + 1e-9 >= mae);
    Ok(Metrics { mae, rmse, r })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(hz: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * std::f64::consts::PI * hz * i as f64 / 30.0).sin()).collect()
    }

    #[test]
    fn constant_spectrum_is_zero() {
        let s = power_spectrum(&[0.7; 32], 30.0, 64).unwrap();
        assert!(s.power.iter().all(|&p| p < 1e-20));
    }

    #[test]
    fn short_signal_rejected() {
        assert!(estimate_hr(&[0.0; 15], 30.0).is_err());
    }

    #[test]
    fn low_rate_has_empty_band() {
        assert!(estimate_hr(&sine(0.1, 64), 1.0).is_err());
    }

    #[test]
    fn scale_and_offset_invariance() {
        let x = sine(1.3, 128);
        let base = estimate_hr(&x, 30.0).unwrap();
        let y: Vec<f64> = x.iter().map(|v| 3.5 * v + 10.0).collect();
        assert!((estimate_hr(&y, 30.0).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn median_reflect() {
        assert_eq!(median_filter(&[1.0, 9.0, 1.0, 1.0, 1.0], 5), vec![1.0; 5]);
        assert_eq!(median_filter(&[4.0, 2.0], 5), vec![4.0, 2.0]);
        assert_eq!(median_filter(&[4.0, 2.0, 3.0], 5), vec![2.0, 3.0, 2.0]);
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&[80.0, 100.0], &[90.0, 90.0], &[], &[]).unwrap();
        assert_eq!((m.mae, m.rmse), (10.0, 10.0));
        let s = vec![sine(1.0, 40)];
        let m = metrics(&[70.0], &[70.0], &s, &s).unwrap();
        assert_eq!((m.mae, m.rmse), (0.0, 0.0));
        assert!((m.r - 1.0).abs() < 1e-6);
        assert!(metrics(&[1.0], &[1.0, 2.0], &[], &[]).is_err());
    }
}
