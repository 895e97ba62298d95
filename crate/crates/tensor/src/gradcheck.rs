//! Central finite-difference oracle for layer gradients.
//!
//! The loss is a random projection `L = sum(r * y)` of the layer output, so
//! the upstream gradient is `r`. Perturbations that flip a discrete decision
//! (ReLU mask, pooling winner, leaky-max winner) cross a kink of the layer
//! function and are redrawn instead of compared.

use rand::Rng;

use crate::error::Result;
use crate::layers::{Layer, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub redrawn: usize,
}

impl GradCheckReport {
    fn absorb(&mut self, other: GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.redrawn += other.redrawn;
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients
/// from turning rounding noise into large ratios.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-3;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn loss_and_signature(layer: &mut Layer<f64>, x: &Tensor<f64>, r: &Tensor<f64>, mode: Mode) -> Result<(f64, Vec<u8>)> {
    let y = layer.forward(x, mode)?;
    let loss = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
    let mut sig = Vec::new();
    layer.decision_signature(&mut sig);
    Ok((loss, sig))
}

fn param_slot(layer: &mut Layer<f64>, which: usize, idx: usize, delta: f64) {
    let mut k = 0;
    layer.visit_params_mut(&mut |p| {
        if k == which {
            let v = &mut p.value.data_mut()[idx];
            *v += delta;
        }
        k += 1;
    });
}

/// Compares analytic gradients of `layer` at `x` against central differences
/// with step `h` on `elements` random entries of the input and of every
/// parameter tensor.
pub fn check_layer<R: Rng + ?Sized>(
    layer: &mut Layer<f64>,
    x: &Tensor<f64>,
    mode: Mode,
    elements: usize,
    h: f64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let y = layer.forward(x, mode)?;
    let r = Tensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0));
    let mut zeroed = layer.clone();
    zeroed.visit_params_mut(&mut |p| p.zero_grad());
    *layer = zeroed;
    layer.forward(x, mode)?;
    let dx = layer.backward(&r)?;
    let mut param_grads = Vec::new();
    layer.visit_params_mut(&mut |p| param_grads.push(p.grad.clone()));
    let mut base_sig = Vec::new();
    layer.decision_signature(&mut base_sig);

    let mut report = GradCheckReport::default();
    let max_attempts = elements * 20;

    // Input entries.
    let mut attempts = 0;
    let mut done = 0;
    while done < elements && attempts < max_attempts && !x.is_empty() {
        attempts += 1;
        let i = rng.gen_range(0..x.len());
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let (lp, sp) = loss_and_signature(layer, &xp, &r, mode)?;
        xp.data_mut()[i] -= 2.0 * h;
        let (lm, sm) = loss_and_signature(layer, &xp, &r, mode)?;
        if sp != base_sig || sm != base_sig {
            report.redrawn += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        report.absorb(GradCheckReport {
            max_rel_error: relative_error(dx.data()[i], numeric),
            checked: 1,
            redrawn: 0,
        });
        done += 1;
    }

    // Parameter entries.
    for (which, g) in param_grads.iter().enumerate() {
        let mut attempts = 0;
        let mut done = 0;
        while done < elements && attempts < max_attempts && !g.is_empty() {
            attempts += 1;
            let i = rng.gen_range(0..g.len());
            param_slot(layer, which, i, h);
            let (lp, sp) = loss_and_signature(layer, x, &r, mode)?;
            param_slot(layer, which, i, -2.0 * h);
            let (lm, sm) = loss_and_signature(layer, x, &r, mode)?;
            param_slot(layer, which, i, h);
            if sp != base_sig || sm != base_sig {
                report.redrawn += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            report.absorb(GradCheckReport {
                max_rel_error: relative_error(g.data()[i], numeric),
                checked: 1,
                redrawn: 0,
            });
            done += 1;
        }
    }
    Ok(report)
}
