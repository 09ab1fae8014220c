//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

/// Outcome of checking one named input.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    /// `max |analytic − numeric| / max(max |analytic|, max |numeric|)`
    /// over the probed coordinates.
    pub relative_error: f64,
    pub probed: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub label: String,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error() < tol
    }
}

/// Settings for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates probed per input tensor (all of them when smaller).
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_probes: 10,
            seed: 0,
        }
    }
}

/// Compares the gradient of the scalar `loss` with respect to each tensor in
/// `inputs` against central differences. Inputs must be leaves created with
/// [`Tensor::param`]; their gradient buffers are reset.
pub fn check_gradients(
    label: &str,
    inputs: &[(String, Tensor<f64>)],
    loss: impl Fn() -> Result<Tensor<f64>>,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    for (_, t) in inputs {
        t.zero_grad();
    }
    loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::with_capacity(inputs.len());
    for (name, t) in inputs {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.len()]);
        let coords: Vec<usize> = if t.len() <= cfg.max_probes {
            (0..t.len()).collect()
        } else {
            sample(&mut rng, t.len(), cfg.max_probes).into_vec()
        };
        let mut max_diff = 0.0f64;
        let mut scale = 0.0f64;
        for &i in &coords {
            let original = t.data()[i];
            let eval = |v: f64| -> Result<f64> {
                t.update_data(|d| d[i] = v)?;
                no_grad(|| loss()?.item())
            };
            let plus = eval(original + cfg.step)?;
            let minus = eval(original - cfg.step)?;
            t.update_data(|d| d[i] = original)?;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            max_diff = max_diff.max((numeric - analytic[i]).abs());
            scale = scale.max(numeric.abs()).max(analytic[i].abs());
        }
        let relative_error = if scale > 1e-12 { max_diff / scale } else { max_diff };
        entries.push(GradCheckEntry {
            name: name.clone(),
            relative_error,
            probed: coords.len(),
        });
    }
    Ok(GradCheckReport {
        label: label.to_string(),
        entries,
    })
}
