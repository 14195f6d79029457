//! Central finite-difference gradient checks.
//!
//! The numerical side only ever evaluates the forward function, so it is
//! independent of the backward rules it verifies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::FrontendConfig;
use crate::cross_modal::CrossModal;
use crate::encoder::{uniform, CrnnConfig};
use crate::graph::{aggregate, edge_weights, ConvGru};
use crate::head::{bce_loss, similarity};
use crate::model::{ModelConfig, Qgca};
use crate::tensor::{ParamStore, ReduceKind, Tape, Tensor, Var};
use crate::text::TokenizedQuery;
use crate::Result;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Outcome of comparing analytic and numerical gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error.is_finite() && self.rel_error < tol
    }
}

/// Norm-wise relative error, with both norms vanishing counted as exact.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks `d f / d inputs` for a scalar function of several tensors.
///
/// `f` receives the inputs as leaves on a fresh tape and returns the scalar
/// output. Every coordinate of every input is perturbed.
pub fn check<F>(name: &str, inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.wrt(*v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for which in 0..inputs.len() {
        for k in 0..inputs[which].numel() {
            let base = inputs[which].to_vec();
            let shape = inputs[which].shape().to_vec();
            let mut plus = base.clone();
            plus[k] += STEP;
            work[which] = Tensor::new(shape.clone(), plus)?;
            let fp = eval(&work)?;
            let mut minus = base;
            minus[k] -= STEP;
            work[which] = Tensor::new(shape, minus)?;
            let fm = eval(&work)?;
            numeric.push((fp - fm) / (2.0 * STEP));
        }
        work[which] = inputs[which].clone();
    }
    Ok(GradCheck {
        name: name.to_string(),
        rel_error: relative_error(&analytic, &numeric),
        checked: numeric.len(),
    })
}

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Tolerance for the assembled model.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub check: GradCheck,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.check.passes(self.tolerance)
    }
}

// Weighted sum with fixed random weights so every output coordinate matters.
fn weighted<'t>(tape: &'t Tape, y: Var<'t>, rng_seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = tape.leaf(uniform(&y.shape(), 1.0, &mut rng));
    Ok(y.mul(w)?.sum()?)
}

/// Tiny model used for the end-to-end check: `d = 8`, two graph layers.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        encoder: CrnnConfig {
            n_mels: 16,
            ..CrnnConfig::with_channels(vec![2, 2, 2, 2, 2])
        },
        frontend: FrontendConfig {
            n_mels: 16,
            ..FrontendConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Finite-difference checks of every differentiable op, the model
/// components and the full model (`I = 8`, `L = 4`) on random inputs.
pub fn suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut op = |name: &str,
                  inputs: Vec<Tensor>,
                  f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>|
     -> Result<()> {
        let check = check(name, &inputs, |tape, v| weighted(tape, f(tape, v)?, seed ^ 0x5eed))?;
        out.push(SuiteEntry {
            check,
            tolerance: OP_TOLERANCE,
        });
        Ok(())
    };
    let mut r = |s: &[usize]| uniform(s, 1.0, &mut rng);

    op("sigmoid", vec![r(&[3, 2])], &|_, v| Ok(v[0].sigmoid()?))?;
    op("tanh", vec![r(&[3, 2])], &|_, v| Ok(v[0].tanh()?))?;
    op("exp", vec![r(&[3, 2])], &|_, v| Ok(v[0].exp()?))?;
    op("log", vec![r(&[3, 2]).map(|x| x.abs() + 0.5)], &|_, v| Ok(v[0].log()?))?;
    op("neg", vec![r(&[4])], &|_, v| Ok(v[0].neg()?))?;
    op("scale", vec![r(&[4])], &|_, v| Ok(v[0].scale(-1.7)?.add_scalar(0.3)?.one_minus()?))?;
    op("leaky_relu", vec![r(&[3, 3])], &|_, v| Ok(v[0].leaky_relu(0.1)?))?;
    op("add_broadcast", vec![r(&[3, 2]), r(&[2])], &|_, v| Ok(v[0].add(v[1])?))?;
    op("sub_broadcast", vec![r(&[3, 1]), r(&[3, 2])], &|_, v| Ok(v[0].sub(v[1])?))?;
    op("mul", vec![r(&[2, 3]), r(&[2, 3])], &|_, v| Ok(v[0].mul(v[1])?))?;
    op("mul_rank3", vec![r(&[3, 1, 2]), r(&[1, 4, 2])], &|_, v| Ok(v[0].mul(v[1])?))?;
    op("matmul", vec![r(&[3, 4]), r(&[4, 2])], &|_, v| Ok(v[0].matmul(v[1])?))?;
    op("transpose", vec![r(&[3, 4])], &|_, v| Ok(v[0].transpose()?))?;
    op("conv1d", vec![r(&[5, 2]), r(&[3, 2, 3])], &|_, v| Ok(v[0].conv1d(v[1])?))?;
    op("conv2d", vec![r(&[4, 4, 2]), r(&[3, 3, 2, 2])], &|_, v| Ok(v[0].conv2d(v[1])?))?;
    op("lp_pool", vec![r(&[4, 6, 2])], &|_, v| Ok(v[0].lp_pool(4.0, &[2, 3], &[2, 3])?))?;
    op("softmax_rows", vec![r(&[3, 4])], &|_, v| Ok(v[0].softmax(1)?))?;
    op("softmax_cols", vec![r(&[3, 4])], &|_, v| Ok(v[0].softmax(0)?))?;
    op("sum_axis", vec![r(&[3, 4])], &|_, v| Ok(v[0].reduce(ReduceKind::Sum, Some(0))?))?;
    op("mean_axis", vec![r(&[3, 4])], &|_, v| Ok(v[0].reduce(ReduceKind::Mean, Some(1))?))?;
    op("l2norm_axis", vec![r(&[3, 4])], &|_, v| Ok(v[0].reduce(ReduceKind::L2Norm, Some(1))?))?;
    op("gather_rows", vec![r(&[4, 3])], &|_, v| Ok(v[0].gather_rows(&[2, 0, 2])?))?;
    op("concat", vec![r(&[2, 3]), r(&[2, 2])], &|t, v| Ok(t.concat(&[v[0], v[1]], 1)?))?;
    op("slice", vec![r(&[5, 3])], &|_, v| Ok(v[0].slice(0, 1, 4)?))?;
    op("reshape", vec![r(&[2, 6])], &|_, v| Ok(v[0].reshape(vec![3, 4])?))?;
    op("upsample_rows", vec![r(&[3, 2])], &|_, v| Ok(v[0].upsample_rows(4, 10)?))?;
    op("clamp", vec![r(&[6]).map(|x| 0.4 * x + 0.5)], &|_, v| Ok(v[0].clamp(0.3, 0.7)?))?;
    op("similarity", vec![r(&[5, 4]), r(&[5, 4])], &|_, v| similarity(v[0], v[1]))?;
    op("edge_weights", vec![r(&[4, 6])], &|t, v| edge_weights(t, v[0], 1.0, 1e4))?;
    op("aggregate", vec![r(&[4, 4]), r(&[4, 3])], &|_, v| Ok(aggregate(v[0], v[1])?.1))?;
    let labels = [1.0, 0.0, 1.0, 1.0, 0.0];
    let z = r(&[5]).map(|x| 0.4 * x + 0.5);
    out.push(SuiteEntry {
        check: check("bce_loss", &[z], |t, v| bce_loss(t, v[0], &labels))?,
        tolerance: OP_TOLERANCE,
    });

    // ConvGRU and cross-modal block with their parameters as inputs.
    let mut store = ParamStore::new();
    let gru = ConvGru::init(&mut store, "gru", 4, 3, &mut rng)?;
    let mut inputs: Vec<Tensor> = store.iter().map(|p| p.tensor.map(|x| x + 0.1)).collect();
    let n = inputs.len();
    inputs.push(uniform(&[5, 4], 1.0, &mut rng));
    inputs.push(uniform(&[5, 4], 1.0, &mut rng));
    out.push(SuiteEntry {
        check: check("conv_gru", &inputs, |t, v| weighted(t, gru.update(t, v[n], v[n + 1], &v[..n])?, seed))?,
        tolerance: OP_TOLERANCE,
    });

    let mut store = ParamStore::new();
    let cross = CrossModal::init(&mut store, 4, &mut rng)?;
    let mut inputs: Vec<Tensor> = store.iter().map(|p| p.tensor.map(|x| x + 0.1)).collect();
    let n = inputs.len();
    inputs.push(uniform(&[3, 4], 1.0, &mut rng));
    inputs.push(uniform(&[6, 4], 1.0, &mut rng));
    out.push(SuiteEntry {
        check: check("cross_modal", &inputs, |t, v| {
            let pair = cross.forward(t, v[n], v[n + 1], true, &v[..n])?;
            weighted(t, similarity(pair.audio, pair.query)?, seed)
        })?,
        tolerance: OP_TOLERANCE,
    });

    let model = Qgca::new(tiny_model_config(), 6, seed)?;
    let inputs: Vec<Tensor> = model.params.iter().map(|p| p.tensor.clone()).collect();
    let frames = uniform(&[8, 16], 1.0, &mut rng);
    let query = TokenizedQuery {
        token_ids: vec![2, 3, 4, 5],
        surface_tokens: ["w2", "w3", "w4", "w5"].map(String::from).to_vec(),
    };
    let labels = [0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    out.push(SuiteEntry {
        check: check("full_model", &inputs, |t, v| {
            let fwd = model.forward_with(t, v, &frames, &query)?;
            bce_loss(t, fwd.z, &labels)
        })?,
        tolerance: MODEL_TOLERANCE,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_suite_passes() {
        let entries = suite(0).unwrap();
        for e in &entries {
            assert!(e.passes(), "{}: {}", e.check.name, e.check.rel_error);
            assert!(e.check.checked > 0);
        }
        assert!(entries.len() > 30);
    }
}
