//! Loss terms for pretraining and fine-tuning.

use crate::error::{Error, Result};
use crate::signal::{hann, BAND_HI_HZ, BAND_LO_HZ, DEFAULT_PAD};
use crate::tensor::{Real, Tensor, Var};

/// Guard added to each standard deviation inside correlation losses.
pub const PEARSON_EPS: f64 = 1e-8;
/// Soft-argmax temperature as a fraction of the peak band power.
pub const SOFT_HR_KAPPA: f64 = 0.05;

pub struct ReconLoss<'g, F: Real> {
    /// Mean squared error over every masked-patch element.
    pub pixel: Var<'g, F>,
    /// `1 - mean_b ρ_b` over flattened per-sample masked sequences.
    pub corr: Var<'g, F>,
}

impl<'g, F: Real> ReconLoss<'g, F> {
    /// `pixel + corr_weight·corr`.
    pub fn total(&self, corr_weight: f64) -> Result<Var<'g, F>> {
        self.pixel.add(self.corr.scale(corr_weight))
    }
}

/// Pixel and correlation terms over `[B, M, P]` masked predictions.
pub fn recon_loss<'g, F: Real>(pred: Var<'g, F>, target: Var<'g, F>) -> Result<ReconLoss<'g, F>> {
    let s = pred.shape();
    if s != target.shape() || s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "recon_loss",
            lhs: s,
            rhs: target.shape(),
        });
    }
    if s[1] * s[2] == 0 {
        return Err(Error::invalid("reconstruction loss over an empty mask"));
    }
    let pixel = pred.sub(target)?.sqr().mean();
    let flat = [s[0], s[1] * s[2]];
    let rho = pred.reshape(&flat)?.pearson(target.reshape(&flat)?, PEARSON_EPS)?;
    let corr = rho.mean().neg().add_scalar(1.0);
    Ok(ReconLoss { pixel, corr })
}

/// Per-sample `1 - ρ(student, teacher)`, shape `[B]`.
pub fn distill_loss<'g, F: Real>(student: Var<'g, F>, teacher: Var<'g, F>) -> Result<Var<'g, F>> {
    Ok(student.pearson(teacher, PEARSON_EPS)?.neg().add_scalar(1.0))
}

/// Constant DFT bases restricted to the heart-rate band.
pub struct SoftHrBasis<F: Real> {
    pub window: Tensor<F>,
    pub cos: Tensor<F>,
    pub sin: Tensor<F>,
    pub freqs: Tensor<F>,
}

impl<F: Real> SoftHrBasis<F> {
    pub fn new(len: usize, fs: f64) -> Result<Self> {
        let pad = DEFAULT_PAD.max(len);
        let bins: Vec<usize> = (0..=pad / 2)
            .filter(|&k| {
                let f = k as f64 * fs / pad as f64;
                (BAND_LO_HZ..=BAND_HI_HZ).contains(&f)
            })
            .collect();
        if bins.is_empty() {
            return Err(Error::invalid(format!("no spectral bins in band at fs = {fs}")));
        }
        let k = bins.len();
        let angle = |t: usize, j: usize| 2.0 * std::f64::consts::PI * (bins[j] * t) as f64 / pad as f64;
        Ok(Self {
            window: Tensor::from_f64(&[len], &hann(len))?,
            cos: Tensor::from_fn(&[len, k], |i| F::c(angle(i / k, i % k).cos())),
            sin: Tensor::from_fn(&[len, k], |i| F::c(angle(i / k, i % k).sin())),
            freqs: Tensor::from_fn(&[k], |j| F::c(bins[j] as f64 * fs / pad as f64)),
        })
    }
}

/// Differentiable heart rate `60·Σ f·softmax(P(f)/κ)` over the band, with
/// `κ = 0.05·max P` held constant. Input `[B, T]`, output `[B]` in bpm.
pub fn soft_hr<'g, F: Real>(wave: Var<'g, F>, basis: &SoftHrBasis<F>) -> Result<Var<'g, F>> {
    let g = wave.graph();
    let centred = wave.sub(wave.mean_axes(&[1], true)?)?;
    let xw = centred.mul(g.constant(basis.window.clone()))?;
    let re = xw.matmul(g.constant(basis.cos.clone()))?;
    let im = xw.matmul(g.constant(basis.sin.clone()))?;
    let power = re.sqr().add(im.sqr())?;
    let pv = power.value();
    let k = *pv.shape().last().unwrap();
    let kappa: Vec<F> = pv
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().fold(F::zero(), |a, &b| if b > a { b } else { a });
            (m * F::c(SOFT_HR_KAPPA)).max(F::c(1e-12))
        })
        .collect();
    let kappa = g.constant(Tensor::new(&[kappa.len(), 1], kappa)?);
    power
        .div(kappa)?
        .softmax(1)?
        .mul(g.constant(basis.freqs.clone()))?
        .sum_axes(&[1], false)
        .map(|v| v.scale(60.0))
}

/// Per-sample `(1 - ρ(ŷ, y)) + λ·|HR_soft(ŷ) - hr_ref|`, shape `[B]`.
pub fn finetune_loss<'g, F: Real>(
    pred: Var<'g, F>,
    truth: Var<'g, F>,
    hr_ref: &[f64],
    lambda_hr: f64,
    basis: &SoftHrBasis<F>,
) -> Result<Var<'g, F>> {
    let corr = distill_loss(pred, truth)?;
    let hr = soft_hr(pred, basis)?;
    let hr_ref = pred.graph().constant(Tensor::vector(hr_ref));
    corr.add(hr.sub(hr_ref)?.abs().scale(lambda_hr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::estimate_hr;
    use crate::tensor::Graph;

    #[test]
    fn perfect_and_shifted_reconstruction() {
        let g = Graph::<f64>::new();
        let t = Tensor::from_fn(&[2, 3, 4], |i| ((i * 7) % 11) as f64 / 11.0);
        let target = g.constant(t.clone());
        let l = recon_loss(g.param(t.clone()), target).unwrap();
        assert!(l.pixel.value().item().abs() < 1e-12);
        assert!(l.corr.value().item().abs() < 1e-6);
        let shifted = g.param(t.map(|v| v + 0.5));
        let l = recon_loss(shifted, target).unwrap();
        assert!((l.pixel.value().item() - 0.25).abs() < 1e-12);
        assert!(l.corr.value().item().abs() < 1e-6);
        let flat = g.param(Tensor::full(&[2, 3, 4], 0.3));
        let l = recon_loss(flat, target).unwrap();
        assert!((l.corr.value().item() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn distill_examples() {
        let g = Graph::<f64>::new();
        let y = Tensor::from_fn(&[1, 16], |i| (i as f64 * 0.7).sin());
        let t = g.constant(y.clone());
        let same = distill_loss(g.param(y.clone()), t).unwrap().value().item();
        let neg = distill_loss(g.param(y.map(|v| -v)), t).unwrap().value().item();
        let affine = distill_loss(g.param(y.map(|v| 3.0 * v - 2.0)), t).unwrap().value().item();
        assert!(same.abs() < 1e-6 && (neg - 2.0).abs() < 1e-6 && affine.abs() < 1e-6);
    }

    #[test]
    fn soft_hr_tracks_hard_estimate_on_long_clean_signal() {
        let basis = SoftHrBasis::<f64>::new(128, 30.0).unwrap();
        for hz in [1.0, 1.5, 2.2] {
            let x: Vec<f64> = (0..128).map(|i| (2.0 * std::f64::consts::PI * hz * i as f64 / 30.0).sin()).collect();
            let g = Graph::<f64>::new();
            let soft = soft_hr(g.param(Tensor::from_f64(&[1, 128], &x).unwrap()), &basis)
                .unwrap()
                .value()
                .item();
            let hard = estimate_hr(&x, 30.0).unwrap();
            assert!((soft - hard).abs() < 1.0, "{hz} Hz: soft {soft} hard {hard}");
        }
    }
}
