//! Cross-modal attention and cross-gating.
//!
//! Every audio snippet attends over the query words to build a
//! snippet-specific query vector, then each modality gates the other.

use rand::Rng;

use crate::encoder::uniform;
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};
use crate::Result;

/// Parameters of `r_li = w_rᵀ tanh(W_s x_l + W_a u_i + b_r)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub w_query: usize,
    pub w_audio: usize,
    pub bias: usize,
    pub w_score: usize,
}

impl AttentionParams {
    pub fn init(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            w_query: store.add("attention.w_query", uniform(&[d, d], bound, rng), true)?,
            w_audio: store.add("attention.w_audio", uniform(&[d, d], bound, rng), true)?,
            bias: store.add("attention.bias", Tensor::zeros(vec![d]), true)?,
            w_score: store.add("attention.w_score", uniform(&[d], bound, rng), true)?,
        })
    }
}

/// Gate parameters: the audio-driven gate applies to the query side and the
/// query-driven gate to the audio side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatingParams {
    pub w_audio_gate: usize,
    pub b_audio_gate: usize,
    pub w_query_gate: usize,
    pub b_query_gate: usize,
}

impl GatingParams {
    pub fn init(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            w_audio_gate: store.add("gating.w_audio", uniform(&[d, d], bound, rng), true)?,
            b_audio_gate: store.add("gating.b_audio", Tensor::zeros(vec![d]), true)?,
            w_query_gate: store.add("gating.w_query", uniform(&[d, d], bound, rng), true)?,
            b_query_gate: store.add("gating.b_query", Tensor::zeros(vec![d]), true)?,
        })
    }
}

fn check_width(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[1] {
        return Err(TensorError::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Raw attention scores `r` (`L × I`) between words and snippets.
pub fn attention_scores<'t>(words: Var<'t>, audio: Var<'t>, p: &AttentionParams, params: &[Var<'t>]) -> Result<Var<'t>> {
    let (ws, us) = (words.shape(), audio.shape());
    check_width("attention_scores", &ws, &us)?;
    let (l, i, d) = (ws[0], us[0], ws[1]);
    let q = words.matmul(params[p.w_query])?.reshape(vec![l, 1, d])?;
    let a = audio
        .matmul(params[p.w_audio])?
        .add(params[p.bias])?
        .reshape(vec![1, i, d])?;
    let hidden = q.add(a)?.tanh()?.reshape(vec![l * i, d])?;
    let w = params[p.w_score].reshape(vec![d, 1])?;
    Ok(hidden.matmul(w)?.reshape(vec![l, i])?)
}

/// Softmax of `r` over the words for each snippet, and the weighted word
/// summaries `S̄ = αᵀ X` (`I × d`).
pub fn snippet_query<'t>(scores: Var<'t>, words: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (rs, ws) = (scores.shape(), words.shape());
    if rs.len() != 2 || ws.len() != 2 || rs[0] != ws[0] {
        return Err(TensorError::Shape {
            op: "snippet_query",
            lhs: rs,
            rhs: ws,
        }
        .into());
    }
    let alpha = scores.softmax(0)?;
    let summary = alpha.transpose()?.matmul(words)?;
    Ok((alpha, summary))
}

/// Gated pair `(Ũ, S̃)` plus the two gates.
#[derive(Debug, Clone, Copy)]
pub struct Gated<'t> {
    pub audio: Var<'t>,
    pub query: Var<'t>,
    /// `σ(U W_u + b_u)`, applied to the query side.
    pub audio_gate: Var<'t>,
    /// `σ(S̄ W_s + b_s)`, applied to the audio side.
    pub query_gate: Var<'t>,
}

/// `s̃ = s̄ ⊙ σ(W_u u + b_u)` and `ũ = u ⊙ σ(W_s s̄ + b_s)`.
pub fn cross_gate<'t>(audio: Var<'t>, summary: Var<'t>, p: &GatingParams, params: &[Var<'t>]) -> Result<Gated<'t>> {
    let (us, ss) = (audio.shape(), summary.shape());
    if us != ss {
        return Err(TensorError::Shape {
            op: "cross_gate",
            lhs: us,
            rhs: ss,
        }
        .into());
    }
    let audio_gate = audio
        .matmul(params[p.w_audio_gate])?
        .add(params[p.b_audio_gate])?
        .sigmoid()?;
    let query_gate = summary
        .matmul(params[p.w_query_gate])?
        .add(params[p.b_query_gate])?
        .sigmoid()?;
    Ok(Gated {
        audio: audio.mul(query_gate)?,
        query: summary.mul(audio_gate)?,
        audio_gate,
        query_gate,
    })
}

/// Output of the whole block for one pair.
#[derive(Debug, Clone, Copy)]
pub struct AlignedPair<'t> {
    /// Gated audio `Ũ` (`I × d`).
    pub audio: Var<'t>,
    /// Gated snippet-specific query `S̃` (`I × d`).
    pub query: Var<'t>,
    /// Raw scores `r` (`L × I`).
    pub scores: Var<'t>,
    /// Scores normalised over the words.
    pub attention: Var<'t>,
    /// Ungated `S̄`.
    pub summary: Var<'t>,
    pub gates: Option<(Var<'t>, Var<'t>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossModal {
    pub attention: AttentionParams,
    pub gating: GatingParams,
}

impl CrossModal {
    pub fn init(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams::init(store, d, rng)?,
            gating: GatingParams::init(store, d, rng)?,
        })
    }

    /// With `gate` off the ungated `U` and `S̄` pass straight through.
    pub fn forward<'t>(
        &self,
        _tape: &'t Tape,
        words: Var<'t>,
        audio: Var<'t>,
        gate: bool,
        params: &[Var<'t>],
    ) -> Result<AlignedPair<'t>> {
        let scores = attention_scores(words, audio, &self.attention, params)?;
        let (attention, summary) = snippet_query(scores, words)?;
        let (audio_out, query_out, gates) = if gate {
            let g = cross_gate(audio, summary, &self.gating, params)?;
            (g.audio, g.query, Some((g.audio_gate, g.query_gate)))
        } else {
            (audio, summary, None)
        };
        Ok(AlignedPair {
            audio: audio_out,
            query: query_out,
            scores,
            attention,
            summary,
            gates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, seed: u64) -> (ParamStore, CrossModal, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = CrossModal::init(&mut store, d, &mut rng).unwrap();
        for i in 0..store.len() {
            // non-zero biases so the oracles exercise every term
            let t = store.get(i).tensor.map(|v| v + 0.05);
            store.set(i, t).unwrap();
        }
        (store, block, rng)
    }

    fn matvec_row(x: &[f64], w: &Tensor) -> Vec<f64> {
        let d = w.shape()[1];
        (0..d).map(|c| x.iter().enumerate().map(|(k, v)| v * w.get(&[k, c])).sum()).collect()
    }

    #[test]
    fn scores_match_per_pair_loop() {
        let (store, block, mut rng) = setup(4, 1);
        let (x, u) = (uniform(&[2, 4], 1.0, &mut rng), uniform(&[3, 4], 1.0, &mut rng));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let r = attention_scores(tape.leaf(x.clone()), tape.leaf(u.clone()), &block.attention, &p)
            .unwrap()
            .value();
        let t = |i: usize| &store.get(i).tensor;
        let a = &block.attention;
        for l in 0..2 {
            for i in 0..3 {
                let sx = matvec_row(x.row(l), t(a.w_query));
                let su = matvec_row(u.row(i), t(a.w_audio));
                let want: f64 = (0..4)
                    .map(|k| t(a.w_score).data()[k] * (sx[k] + su[k] + t(a.bias).data()[k]).tanh())
                    .sum();
                assert!((r.get(&[l, i]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_scores() {
        let (mut store, block, mut rng) = setup(3, 2);
        let (x, u) = (uniform(&[2, 3], 1.0, &mut rng), uniform(&[4, 3], 1.0, &mut rng));
        let a = block.attention;
        let run = |store: &ParamStore| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            attention_scores(tape.leaf(x.clone()), tape.leaf(u.clone()), &a, &p).unwrap().value()
        };
        let saved = store.get(a.w_score).tensor.clone();
        store.set(a.w_score, Tensor::zeros(vec![3])).unwrap();
        assert!(run(&store).data().iter().all(|&v| v == 0.0));
        store.set(a.w_score, saved.clone()).unwrap();
        store.set(a.w_query, Tensor::zeros(vec![3, 3])).unwrap();
        store.set(a.w_audio, Tensor::zeros(vec![3, 3])).unwrap();
        let b = Tensor::vector(vec![0.3, -0.2, 0.9]);
        store.set(a.bias, b.clone()).unwrap();
        let want: f64 = (0..3).map(|k| saved.data()[k] * b.data()[k].tanh()).sum();
        assert!(run(&store).data().iter().all(|&v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn snippet_query_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let x = uniform(&[3, 2], 1.0, &mut rng);
        let (_, s) = snippet_query(tape.leaf(Tensor::zeros(vec![3, 4])), tape.leaf(x.clone())).unwrap();
        for i in 0..4 {
            for k in 0..2 {
                let mean = (0..3).map(|l| x.get(&[l, k])).sum::<f64>() / 3.0;
                assert!((s.value().get(&[i, k]) - mean).abs() < 1e-15);
            }
        }
        let one = uniform(&[1, 2], 1.0, &mut rng);
        let (_, s) = snippet_query(tape.leaf(uniform(&[1, 5], 3.0, &mut rng)), tape.leaf(one.clone())).unwrap();
        for i in 0..5 {
            assert_eq!(s.value().row(i), one.row(0));
        }
        let r = uniform(&[3, 2], 2.0, &mut rng);
        let (alpha, s) = snippet_query(tape.leaf(r.clone()), tape.leaf(x.clone())).unwrap();
        let (alpha, s) = (alpha.value(), s.value());
        for i in 0..2 {
            let z: f64 = (0..3).map(|l| r.get(&[l, i]).exp()).sum();
            assert!(((0..3).map(|l| alpha.get(&[l, i])).sum::<f64>() - 1.0).abs() < 1e-9);
            for k in 0..2 {
                let want: f64 = (0..3).map(|l| r.get(&[l, i]).exp() / z * x.get(&[l, k])).sum();
                assert!((s.get(&[i, k]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_cases() {
        let (mut store, block, mut rng) = setup(4, 4);
        let (u, s) = (uniform(&[3, 4], 1.0, &mut rng), uniform(&[3, 4], 1.0, &mut rng));
        let g = block.gating;
        let run = |store: &ParamStore| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let out = cross_gate(tape.leaf(u.clone()), tape.leaf(s.clone()), &g, &p).unwrap();
            (out.audio.value(), out.query.value())
        };
        let (ua, sq) = run(&store);
        let t = |i: usize| store.get(i).tensor.clone();
        for i in 0..3 {
            let gu = matvec_row(u.row(i), &t(g.w_audio_gate));
            let gs = matvec_row(s.row(i), &t(g.w_query_gate));
            for k in 0..4 {
                let want_q = s.get(&[i, k]) * sigmoid(gu[k] + t(g.b_audio_gate).data()[k]);
                let want_a = u.get(&[i, k]) * sigmoid(gs[k] + t(g.b_query_gate).data()[k]);
                assert!((sq.get(&[i, k]) - want_q).abs() < 1e-12);
                assert!((ua.get(&[i, k]) - want_a).abs() < 1e-12);
            }
        }
        for i in [g.w_audio_gate, g.b_audio_gate, g.w_query_gate, g.b_query_gate] {
            let shape = store.get(i).tensor.shape().to_vec();
            store.set(i, Tensor::zeros(shape)).unwrap();
        }
        let (ua, sq) = run(&store);
        assert_eq!(ua, u.map(|v| 0.5 * v));
        assert_eq!(sq, s.map(|v| 0.5 * v));
        store.set(g.b_audio_gate, Tensor::full(vec![4], 40.0)).unwrap();
        store.set(g.b_query_gate, Tensor::full(vec![4], 40.0)).unwrap();
        let (ua, sq) = run(&store);
        assert!(ua.max_abs_diff(&u) < 1e-6 && sq.max_abs_diff(&s) < 1e-6);
    }

    #[test]
    fn gates_only_attenuate_and_summaries_stay_in_the_hull() {
        for seed in 0..20 {
            let (store, block, mut rng) = setup(5, 100 + seed);
            let (x, u) = (uniform(&[4, 5], 2.0, &mut rng), uniform(&[6, 5], 2.0, &mut rng));
            let tape = Tape::new();
            let p = store.bind(&tape);
            let out = block.forward(&tape, tape.leaf(x.clone()), tape.leaf(u.clone()), true, &p).unwrap();
            let (ua, sq, sum) = (out.audio.value(), out.query.value(), out.summary.value());
            for i in 0..6 {
                for k in 0..5 {
                    assert!(ua.get(&[i, k]).abs() <= u.get(&[i, k]).abs());
                    assert!(sq.get(&[i, k]).abs() <= sum.get(&[i, k]).abs());
                    let col: Vec<f64> = (0..4).map(|l| x.get(&[l, k])).collect();
                    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert!(sum.get(&[i, k]) >= lo - 1e-12 && sum.get(&[i, k]) <= hi + 1e-12);
                }
            }
            let (ga, gq) = out.gates.unwrap();
            assert!(ga.value().data().iter().chain(gq.value().data()).all(|&g| g > 0.0 && g < 1.0));
        }
    }

    #[test]
    fn block_matches_finite_differences() {
        let (store, block, mut rng) = setup(4, 5);
        let mut inputs: Vec<Tensor> = store.iter().map(|p| p.tensor.clone()).collect();
        inputs.push(uniform(&[3, 4], 1.0, &mut rng));
        inputs.push(uniform(&[5, 4], 1.0, &mut rng));
        let n = store.len();
        let w = uniform(&[5, 4], 1.0, &mut rng);
        let r = crate::gradcheck::check("cross_modal", &inputs, |tape, v| {
            let out = block.forward(tape, v[n], v[n + 1], true, &v[..n])?;
            Ok(out.audio.sub(out.query)?.mul(tape.leaf(w.clone()))?.sum()?)
        })
        .unwrap();
        assert!(r.passes(1e-4), "{}", r.rel_error);
    }
}
