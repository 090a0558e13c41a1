//! Minimal dense network used by every learned component: tanh hidden
//! layers, sigmoid outputs, parameters in one flat vector so gradient
//! checking and optimizer code stay trivial. No autograd; the backward
//! pass is written out by hand and verified by central differences.

use serde::{Deserialize, Serialize};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream, tag};

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Flat parameter count for the given layer sizes.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

/// Fully-connected net. `dims[0]` inputs, `dims.last()` outputs; weights
/// for each layer are stored row-major, followed by that layer's biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    /// Seeded init: weights scaled by 1/sqrt(fan_in), biases zero.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        Self::check_dims(dims)?;
        let mut rng = stream(&[tag("mlpinit"), seed]);
        let mut params = Vec::with_capacity(param_count(dims));
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let n: f64 = rng.sample(StandardNormal);
                params.push(scale * n);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params,
        })
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        Self::check_dims(dims)?;
        let expected = param_count(dims);
        if params.len() != expected {
            return Err(Error::Config(format!(
                "model with dims {dims:?} needs {expected} parameters, got {}",
                params.len()
            )));
        }
        if let Some(bad) = params.iter().find(|p| !p.is_finite()) {
            return Err(Error::Config(format!("non-finite model parameter {bad}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params,
        })
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "model dims {dims:?} must name at least input and output, all positive"
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_inputs(&self) -> usize {
        self.dims[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Post-activation values for every layer, input included. The last
    /// entry is the network output.
    fn activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(input.len(), self.dims[0], "input size mismatch");
        let n_layers = self.dims.len() - 1;
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(input.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let biases = &self.params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            offset += (fan_in + 1) * fan_out;
            let prev = acts.last().unwrap();
            let mut out = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let mut z = biases[o];
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                for (w, a) in row.iter().zip(prev) {
                    z += w * a;
                }
                out.push(if l + 1 == n_layers {
                    sigmoid(z)
                } else {
                    z.tanh()
                });
            }
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.activations(input).pop().unwrap()
    }

    /// Gradient of a scalar loss w.r.t. all parameters, given dL/d(output).
    pub fn grad_from_output(&self, input: &[f64], dl_dout: &[f64]) -> Vec<f64> {
        let acts = self.activations(input);
        let out = acts.last().unwrap();
        assert_eq!(dl_dout.len(), out.len(), "output gradient size mismatch");
        // Sigmoid derivative folds in here; the logit path skips it.
        let dl_dz: Vec<f64> = dl_dout
            .iter()
            .zip(out)
            .map(|(g, y)| g * y * (1.0 - y))
            .collect();
        self.backprop(&acts, dl_dz)
    }

    /// Same as [`grad_from_output`](Self::grad_from_output) but takes
    /// dL/d(logit) of the output layer. Losses of the form BCE(sigmoid(z))
    /// have the simpler and better-conditioned logit gradient p - t.
    pub fn grad_from_logit(&self, input: &[f64], dl_dlogit: &[f64]) -> Vec<f64> {
        let acts = self.activations(input);
        assert_eq!(
            dl_dlogit.len(),
            acts.last().unwrap().len(),
            "logit gradient size mismatch"
        );
        self.backprop(&acts, dl_dlogit.to_vec())
    }

    fn backprop(&self, acts: &[Vec<f64>], mut dl_dz: Vec<f64>) -> Vec<f64> {
        let n_layers = self.dims.len() - 1;
        let mut grads = vec![0.0; self.params.len()];
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for l in 0..n_layers {
            offsets.push(offset);
            offset += (self.dims[l] + 1) * self.dims[l + 1];
        }
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let prev = &acts[l];
            for o in 0..fan_out {
                for i in 0..fan_in {
                    grads[off + o * fan_in + i] = dl_dz[o] * prev[i];
                }
                grads[off + fan_in * fan_out + o] = dl_dz[o];
            }
            if l > 0 {
                let weights = &self.params[off..off + fan_in * fan_out];
                let mut dl_dprev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    for i in 0..fan_in {
                        dl_dprev[i] += weights[o * fan_in + i] * dl_dz[o];
                    }
                }
                // prev holds tanh outputs for every non-input layer
                dl_dz = dl_dprev
                    .iter()
                    .zip(prev)
                    .map(|(g, a)| g * (1.0 - a * a))
                    .collect();
            }
        }
        grads
    }
}

// --- gradient checking -----------------------------------------------------

/// Outcome of a central-difference check over selected coordinates.
#[derive(Debug, Clone, Copy)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
    pub n_checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }

    pub fn to_result(&self, tolerance: f64) -> Result<()> {
        if self.passes(tolerance) {
            Ok(())
        } else {
            Err(Error::GradcheckFailed {
                coordinate: self.worst_coordinate,
                rel_err: self.max_rel_err,
                tolerance,
            })
        }
    }
}

/// Compares `analytic` against central differences of `loss` at `params`,
/// over the coordinates in `coords`. Relative error uses a small floor so
/// near-zero gradients do not blow up the ratio.
pub fn gradcheck<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    step: f64,
) -> GradcheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut work = params.to_vec();
    let mut max_rel_err = 0.0;
    let mut worst_coordinate = 0;
    for &i in coords {
        let orig = work[i];
        work[i] = orig + step;
        let up = loss(&work);
        work[i] = orig - step;
        let down = loss(&work);
        work[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_coordinate = i;
        }
    }
    GradcheckReport {
        max_rel_err,
        worst_coordinate,
        n_checked: coords.len(),
    }
}

/// Evenly spread coordinate sample for checking big parameter vectors.
pub fn spread_coords(n_params: usize, n_coords: usize) -> Vec<usize> {
    if n_params == 0 || n_coords == 0 {
        return Vec::new();
    }
    let n = n_coords.min(n_params);
    (0..n).map(|k| k * n_params / n).collect()
}

// --- model files -----------------------------------------------------------

const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    version: u32,
    kind: String,
    dims: Vec<usize>,
    params: Vec<f64>,
}

pub fn model_to_json(kind: &str, mlp: &Mlp) -> Result<String> {
    let doc = ModelDoc {
        version: MODEL_VERSION,
        kind: kind.to_string(),
        dims: mlp.dims.clone(),
        params: mlp.params.clone(),
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn model_from_json(text: &str, expected_kind: &str) -> Result<Mlp> {
    let doc: ModelDoc = serde_json::from_str(text)?;
    if doc.version != MODEL_VERSION {
        return Err(Error::SchemaVersion {
            what: "model file",
            expected: MODEL_VERSION,
            found: doc.version,
        });
    }
    if doc.kind != expected_kind {
        return Err(Error::ModelKind {
            expected: expected_kind.to_string(),
            found: doc.kind,
        });
    }
    Mlp::from_params(&doc.dims, doc.params)
}

pub fn save_model(path: &std::path::Path, kind: &str, mlp: &Mlp) -> Result<()> {
    std::fs::write(path, model_to_json(kind, mlp)?)?;
    Ok(())
}

pub fn load_model(path: &std::path::Path, expected_kind: &str) -> Result<Mlp> {
    model_from_json(&std::fs::read_to_string(path)?, expected_kind)
}
