//! CRNN audio encoder: padded 3×3 convolution blocks with L4-norm
//! subsampling, a linear projection, a bidirectional GRU and nearest-neighbour
//! upsampling back to the input frame rate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrnnConfig {
    /// Output channels of each convolution block.
    pub channels: Vec<usize>,
    /// Blocks (0-based) followed by a ×2 temporal subsampling.
    pub time_pool_after: Vec<usize>,
    /// Blocks (0-based) followed by a ×2 frequency subsampling.
    pub freq_pool_after: Vec<usize>,
    pub pool_p: f64,
    pub leaky_slope: f64,
    pub n_mels: usize,
}

impl Default for CrnnConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 128, 256],
            time_pool_after: vec![1, 3],
            freq_pool_after: vec![0, 1, 2, 3],
            pool_p: 4.0,
            leaky_slope: 0.1,
            n_mels: 64,
        }
    }
}

impl CrnnConfig {
    /// Same layout with narrower blocks, for quick experiments.
    pub fn with_channels(channels: Vec<usize>) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn time_factor(&self) -> usize {
        1 << self.time_pool_after.len()
    }

    pub fn freq_bins_out(&self) -> usize {
        self.n_mels >> self.freq_pool_after.len()
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.channels.len();
        if blocks == 0 || self.channels.contains(&0) {
            return Err(Error::Config("encoder needs at least one non-empty block".into()));
        }
        if self.time_pool_after.len() != 2 {
            return Err(Error::Config(format!(
                "encoder subsamples time exactly twice, got {:?}",
                self.time_pool_after
            )));
        }
        let in_range = |v: &[usize]| v.iter().all(|&b| b < blocks);
        if !in_range(&self.time_pool_after) || !in_range(&self.freq_pool_after) {
            return Err(Error::Config("pooling position past the last block".into()));
        }
        if self.freq_bins_out() == 0 || !self.n_mels.is_multiple_of(1 << self.freq_pool_after.len()) {
            return Err(Error::Config(format!(
                "{} mel bands cannot be halved {} times",
                self.n_mels,
                self.freq_pool_after.len()
            )));
        }
        if self.pool_p < 1.0 {
            return Err(Error::Config(format!("pool exponent {} < 1", self.pool_p)));
        }
        Ok(())
    }
}

/// Parameter indices of one GRU direction; gate columns are ordered `[z | r | n]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruParams {
    pub w_input: usize,
    pub w_hidden: usize,
    pub bias: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_input: store.add(format!("{prefix}.w_input"), uniform(&[input, 3 * hidden], bound, rng), true)?,
            w_hidden: store.add(format!("{prefix}.w_hidden"), uniform(&[hidden, 3 * hidden], bound, rng), true)?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(vec![3 * hidden]), true)?,
            hidden,
        })
    }

    /// Runs the recurrence over the rows of `x` (`T × input`), in reverse
    /// order when `reverse` is set. Output rows stay aligned with input rows.
    pub fn run<'t>(&self, tape: &'t Tape, x: Var<'t>, params: &[Var<'t>], reverse: bool) -> Result<Var<'t>> {
        let h = self.hidden;
        let steps = x.shape()[0];
        let projected = x.matmul(params[self.w_input])?.add(params[self.bias])?;
        let w_gates = params[self.w_hidden].slice(1, 0, 2 * h)?;
        let w_cand = params[self.w_hidden].slice(1, 2 * h, 3 * h)?;
        let mut state = tape.leaf(Tensor::zeros(vec![1, h]));
        let mut outputs = Vec::with_capacity(steps);
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..steps).rev())
        } else {
            Box::new(0..steps)
        };
        for t in order {
            let row = projected.slice(0, t, t + 1)?;
            let gates = row.slice(1, 0, 2 * h)?.add(state.matmul(w_gates)?)?.sigmoid()?;
            let update = gates.slice(1, 0, h)?;
            let reset = gates.slice(1, h, 2 * h)?;
            let candidate = row
                .slice(1, 2 * h, 3 * h)?
                .add(reset.mul(state)?.matmul(w_cand)?)?
                .tanh()?;
            state = state.add(update.mul(candidate.sub(state)?)?)?;
            outputs.push(state);
        }
        if reverse {
            outputs.reverse();
        }
        Ok(tape.concat(&outputs, 0)?)
    }
}

/// Bidirectional GRU whose output concatenates the forward and backward halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiGru {
    pub forward: GruParams,
    pub backward: GruParams,
}

impl BiGru {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        if !d.is_multiple_of(2) {
            return Err(Error::Config(format!("BiGRU width {d} must be even")));
        }
        Ok(Self {
            forward: GruParams::init(store, &format!("{prefix}.forward"), input, d / 2, rng)?,
            backward: GruParams::init(store, &format!("{prefix}.backward"), input, d / 2, rng)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, params: &[Var<'t>]) -> Result<Var<'t>> {
        if x.shape()[0] == 0 {
            return Err(Error::Input("BiGRU needs at least one step".into()));
        }
        let fwd = self.forward.run(tape, x, params, false)?;
        let bwd = self.backward.run(tape, x, params, true)?;
        Ok(tape.concat(&[fwd, bwd], 1)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrnnEncoder {
    pub config: CrnnConfig,
    pub d: usize,
    /// Frozen per-band feature mean.
    pub input_mean: usize,
    /// Frozen per-band inverse standard deviation.
    pub input_inv_std: usize,
    pub conv_weights: Vec<usize>,
    pub conv_biases: Vec<usize>,
    pub proj_weight: usize,
    pub proj_bias: usize,
    pub gru: BiGru,
}

impl CrnnEncoder {
    pub fn init(store: &mut ParamStore, config: CrnnConfig, d: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let m = config.n_mels;
        let input_mean = store.add("encoder.input_mean", Tensor::zeros(vec![m]), false)?;
        let input_inv_std = store.add("encoder.input_inv_std", Tensor::full(vec![m], 1.0), false)?;
        let mut conv_weights = Vec::new();
        let mut conv_biases = Vec::new();
        let mut cin = 1;
        for (b, &cout) in config.channels.iter().enumerate() {
            // He-uniform for the leaky rectifier; keeps activations from
            // shrinking through the stack.
            let bound = (6.0 / ((1.0 + config.leaky_slope.powi(2)) * (9 * cin) as f64)).sqrt();
            conv_weights.push(store.add(format!("encoder.conv{b}.weight"), uniform(&[3, 3, cin, cout], bound, rng), true)?);
            conv_biases.push(store.add(format!("encoder.conv{b}.bias"), Tensor::zeros(vec![cout]), true)?);
            cin = cout;
        }
        let flat = config.freq_bins_out() * cin;
        let proj_weight = store.add("encoder.proj.weight", uniform(&[flat, d], 1.0 / (flat as f64).sqrt(), rng), true)?;
        let proj_bias = store.add("encoder.proj.bias", Tensor::zeros(vec![d]), true)?;
        let gru = BiGru::init(store, "encoder.gru", d, d, rng)?;
        Ok(Self {
            config,
            d,
            input_mean,
            input_inv_std,
            conv_weights,
            conv_biases,
            proj_weight,
            proj_bias,
            gru,
        })
    }

    /// Maps `I × n_mels` log-mel frames to `I × d` snippet features.
    pub fn forward<'t>(&self, tape: &'t Tape, frames: &Tensor, params: &[Var<'t>]) -> Result<Var<'t>> {
        let cfg = &self.config;
        let (rows, bands) = (frames.shape()[0], frames.shape()[1]);
        if bands != cfg.n_mels {
            return Err(Error::Input(format!("expected {} mel bands, got {bands}", cfg.n_mels)));
        }
        let factor = cfg.time_factor();
        if rows < factor {
            return Err(Error::Input(format!(
                "{rows} frames cannot be subsampled by {factor}"
            )));
        }
        let mut x = tape
            .leaf(frames.clone())
            .sub(params[self.input_mean])?
            .mul(params[self.input_inv_std])?
            .reshape(vec![rows, bands, 1])?;
        for b in 0..cfg.channels.len() {
            x = x
                .conv2d(params[self.conv_weights[b]])?
                .add(params[self.conv_biases[b]])?
                .leaky_relu(cfg.leaky_slope)?;
            let wt = if cfg.time_pool_after.contains(&b) { 2 } else { 1 };
            let wf = if cfg.freq_pool_after.contains(&b) { 2 } else { 1 };
            if wt * wf > 1 {
                x = x.lp_pool(cfg.pool_p, &[wt, wf], &[wt, wf])?;
            }
        }
        let shape = x.shape();
        let x = x
            .reshape(vec![shape[0], shape[1] * shape[2]])?
            .matmul(params[self.proj_weight])?
            .add(params[self.proj_bias])?;
        let x = self.gru.forward(tape, x, params)?;
        Ok(x.upsample_rows(factor, rows)?)
    }
}

/// Centered uniform initialisation in `[-bound, bound]`.
pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> CrnnConfig {
        CrnnConfig::with_channels(vec![2, 3, 3, 4, 4])
    }

    fn zero_all(store: &mut ParamStore) {
        for i in 0..store.len() {
            let shape = store.get(i).tensor.shape().to_vec();
            store.set(i, Tensor::zeros(shape)).unwrap();
        }
    }

    fn encode(enc: &CrnnEncoder, store: &ParamStore, frames: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = store.bind(&tape);
        Ok(enc.forward(&tape, frames, &p)?.value())
    }

    fn random_frames(rows: usize, rng: &mut ChaCha8Rng) -> Tensor {
        uniform(&[rows, 64], 1.0, rng)
    }

    #[test]
    fn output_length_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = CrnnEncoder::init(&mut store, small(), 8, &mut rng).unwrap();
        for rows in [4, 5, 16, 17, 23] {
            let out = encode(&enc, &store, &random_frames(rows, &mut rng)).unwrap();
            assert_eq!(out.shape(), &[rows, 8]);
        }
    }

    #[test]
    fn default_width_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = CrnnEncoder::init(&mut store, CrnnConfig::default(), 256, &mut rng).unwrap();
        for rows in [16, 17] {
            let out = encode(&enc, &store, &random_frames(rows, &mut rng)).unwrap();
            assert_eq!(out.shape(), &[rows, 256]);
        }
    }

    #[test]
    fn rows_come_from_subsampled_row_t_over_4() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = CrnnEncoder::init(&mut store, small(), 8, &mut rng).unwrap();
        let out = encode(&enc, &store, &random_frames(18, &mut rng)).unwrap();
        // 18 frames -> 9 -> 4 subsampled rows; rows 16 and 17 repeat row 3
        for t in 0..18 {
            let src = (t / 4).min(3);
            assert_eq!(out.row(t), out.row(src * 4));
        }
        assert_ne!(out.row(0), out.row(4));
    }

    #[test]
    fn zero_everything_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = CrnnEncoder::init(&mut store, small(), 8, &mut rng).unwrap();
        zero_all(&mut store);
        let out = encode(&enc, &store, &Tensor::zeros(vec![12, 64])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_few_frames_is_an_input_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = CrnnEncoder::init(&mut store, small(), 8, &mut rng).unwrap();
        assert!(matches!(encode(&enc, &store, &Tensor::zeros(vec![3, 64])), Err(Error::Input(_))));
        assert!(matches!(encode(&enc, &store, &Tensor::zeros(vec![8, 40])), Err(Error::Input(_))));
    }

    #[test]
    fn config_validation() {
        assert!(CrnnConfig::default().validate().is_ok());
        let mut c = CrnnConfig::default();
        c.time_pool_after = vec![1];
        assert!(c.validate().is_err());
        let mut c = CrnnConfig::default();
        c.freq_pool_after = vec![0, 1, 2, 3, 4, 4, 4];
        assert!(c.validate().is_err());
    }

    fn gru_output(gru: &BiGru, store: &ParamStore, x: &Tensor) -> Tensor {
        let tape = Tape::new();
        let p = store.bind(&tape);
        gru.forward(&tape, tape.leaf(x.clone()), &p).unwrap().value()
    }

    #[test]
    fn single_step_halves_are_one_step_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let gru = BiGru::init(&mut store, "g", 3, 4, &mut rng).unwrap();
        let x = uniform(&[1, 3], 1.0, &mut rng);
        let out = gru_output(&gru, &store, &x);
        // hand evaluation of one step from h = 0: h' = z ⊙ tanh(x W_n + b_n)
        for (half, params) in [(0, gru.forward), (1, gru.backward)] {
            let wi = &store.get(params.w_input).tensor;
            let b = &store.get(params.bias).tensor;
            for j in 0..2 {
                let pre = |col: usize| (0..3).map(|k| x.data()[k] * wi.get(&[k, col])).sum::<f64>() + b.data()[col];
                let z = 1.0 / (1.0 + (-pre(j)).exp());
                let n = pre(4 + j).tanh();
                assert!((out.get(&[0, half * 2 + j]) - z * n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reversing_time_swaps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let gru = BiGru::init(&mut store, "g", 3, 4, &mut rng).unwrap();
        // share weights between the two directions
        for (a, b) in [
            (gru.forward.w_input, gru.backward.w_input),
            (gru.forward.w_hidden, gru.backward.w_hidden),
            (gru.forward.bias, gru.backward.bias),
        ] {
            let t = store.get(a).tensor.clone();
            store.set(b, t).unwrap();
        }
        let x = uniform(&[5, 3], 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = (0..5).rev().map(|r| x.row(r).to_vec()).collect();
        let xr = Tensor::from_rows(&rows).unwrap();
        let (a, b) = (gru_output(&gru, &store, &x), gru_output(&gru, &store, &xr));
        for t in 0..5 {
            let ra = a.row(t);
            let rb = b.row(4 - t);
            for j in 0..2 {
                assert!((ra[j] - rb[2 + j]).abs() < 1e-14);
                assert!((ra[2 + j] - rb[j]).abs() < 1e-14);
            }
        }
    }
}
