//! Minimal pre-norm Transformer encoder used to produce FFN activation dumps.
//!
//! Each block computes
//!
//! ```text
//! h = x + Attn(LN_a(x))
//! y = h + FFN(LN_f(h))
//! ```
//!
//! with single-head attention `softmax(q Kᵀ) V` followed by an output projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ffn::{ffn_forward, Activation, FfnWeights, Real};
use crate::tensor::{DType, Tensor, TensorArchive};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T = f32> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn identity(d: usize) -> Self {
        LayerNorm { gain: vec![T::one(); d], bias: vec![T::zero(); d] }
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let n = T::from_f64(x.len() as f64);
        let mean = x.iter().copied().sum::<T>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::from_f64(LN_EPS)).sqrt();
        x.iter()
            .zip(self.gain.iter().zip(&self.bias))
            .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
            .collect()
    }
}

/// Single-head attention projections, each `d x d` row-major and applied as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T = f32> {
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T = f32> {
    pub ln_attn: LayerNorm<T>,
    pub attn: AttentionWeights<T>,
    pub ln_ffn: LayerNorm<T>,
    pub ffn: FfnWeights<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T = f32> {
    pub d: usize,
    pub layers: Vec<EncoderLayer<T>>,
}

/// Per-layer captures from one forward pass over a sequence.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T = f32> {
    pub frames: usize,
    /// Per layer, `frames x m_layer` post-nonlinearity FFN activations.
    pub inner: Vec<Vec<T>>,
    /// Per layer, `frames x d` FFN block outputs (the value-weighted sums plus `b_out`).
    pub ffn_out: Vec<Vec<T>>,
    /// `frames x d` final hidden states.
    pub hidden: Vec<T>,
}

fn vec_mat<T: Real>(x: &[T], w: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * d..(i + 1) * d];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o = *o + xi * wij;
        }
    }
    out
}

/// Softmax weights of `q` against each row of `keys` (max-subtracted).
pub fn attention_weights<T: Real>(q: &[T], keys: &[T], d: usize) -> Vec<T> {
    let scores: Vec<T> = keys
        .chunks_exact(d)
        .map(|k| k.iter().zip(q).map(|(&a, &b)| a * b).sum::<T>())
        .collect();
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total = exps.iter().copied().sum::<T>();
    exps.into_iter().map(|e| e / total).collect()
}

/// `softmax(q Kᵀ) V` for one query; `keys` is `n x d`, `values` is `n x dv`.
pub fn attention_forward<T: Real>(q: &[T], keys: &[T], values: &[T], d: usize) -> Result<Vec<T>> {
    if q.len() != d || keys.len() % d != 0 || keys.is_empty() {
        return Err(Error::Dimension(format!(
            "query width {} / key buffer {} inconsistent with d = {d}",
            q.len(),
            keys.len()
        )));
    }
    let n = keys.len() / d;
    if values.len() % n != 0 {
        return Err(Error::Dimension(format!("{} value entries for {n} keys", values.len())));
    }
    let dv = values.len() / n;
    let w = attention_weights(q, keys, d);
    let mut out = vec![T::zero(); dv];
    for (wi, v) in w.iter().zip(values.chunks_exact(dv)) {
        for (o, &x) in out.iter_mut().zip(v) {
            *o = *o + *wi * x;
        }
    }
    Ok(out)
}

impl<T: Real> EncoderLayer<T> {
    fn check(&self, d: usize, layer: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::Dimension(format!("layer {layer}: {what} inconsistent with d = {d}")));
        for (name, w) in [("wq", &self.attn.wq), ("wk", &self.attn.wk), ("wv", &self.attn.wv), ("wo", &self.attn.wo)] {
            if w.len() != d * d {
                return bad(name);
            }
        }
        if self.ln_attn.gain.len() != d || self.ln_attn.bias.len() != d || self.ln_ffn.gain.len() != d || self.ln_ffn.bias.len() != d {
            return bad("layer norm");
        }
        if self.ffn.d != d {
            return bad("ffn");
        }
        self.ffn
            .validate()
            .map_err(|e| Error::Dimension(format!("layer {layer}: {e}")))
    }

    fn attend(&self, x: &[T], frames: usize, d: usize) -> Vec<T> {
        let normed: Vec<Vec<T>> = x.par_chunks(d).map(|r| self.ln_attn.apply(r)).collect();
        let project = |w: &[T]| -> Vec<T> {
            normed.par_iter().flat_map_iter(|r| vec_mat(r, w, d)).collect()
        };
        let (q, k, v) = (project(&self.attn.wq), project(&self.attn.wk), project(&self.attn.wv));
        let out: Vec<T> = (0..frames)
            .into_par_iter()
            .flat_map_iter(|t| {
                let ctx = attention_forward(&q[t * d..(t + 1) * d], &k, &v, d).expect("validated dims");
                let proj = vec_mat(&ctx, &self.attn.wo, d);
                x[t * d..(t + 1) * d].iter().zip(proj).map(|(&a, b)| a + b).collect::<Vec<_>>()
            })
            .collect();
        out
    }
}

impl<T: Real> EncoderModel<T> {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.check(self.d, l)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> EncoderModel<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64(Real::as_f64(*x))).collect::<Vec<U>>();
        EncoderModel {
            d: self.d,
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    ln_attn: LayerNorm { gain: c(&l.ln_attn.gain), bias: c(&l.ln_attn.bias) },
                    attn: AttentionWeights { wq: c(&l.attn.wq), wk: c(&l.attn.wk), wv: c(&l.attn.wv), wo: c(&l.attn.wo) },
                    ln_ffn: LayerNorm { gain: c(&l.ln_ffn.gain), bias: c(&l.ln_ffn.bias) },
                    ffn: l.ffn.cast(),
                })
                .collect(),
        }
    }

    /// Random model with weights uniform in `±scale / sqrt(d)`.
    pub fn random(n_layers: usize, d: usize, m: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = scale / (d as f64).sqrt();
        let mut g = |n: usize| -> Vec<T> {
            if bound == 0.0 {
                return vec![T::zero(); n];
            }
            (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
        };
        let layers = (0..n_layers)
            .map(|_| EncoderLayer {
                ln_attn: LayerNorm::identity(d),
                attn: AttentionWeights { wq: g(d * d), wk: g(d * d), wv: g(d * d), wo: g(d * d) },
                ln_ffn: LayerNorm::identity(d),
                ffn: FfnWeights {
                    m,
                    d,
                    w_in: g(m * d),
                    b_in: g(m),
                    w_out: g(m * d),
                    b_out: g(d),
                    activation: Activation::Gelu,
                },
            })
            .collect();
        EncoderModel { d, layers }
    }
}

/// Runs the encoder over one sequence `x` (`frames x d`, row-major).
pub fn encoder_forward<T: Real>(model: &EncoderModel<T>, x: &[T]) -> Result<ForwardTrace<T>> {
    let d = model.d;
    if d == 0 || x.len() % d != 0 {
        return Err(Error::Dimension(format!("input of {} values is not a multiple of d = {d}", x.len())));
    }
    let frames = x.len() / d;
    let mut h = x.to_vec();
    let mut inner = Vec::with_capacity(model.layers.len());
    let mut ffn_out = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        layer.check(d, l)?;
        let attended = layer.attend(&h, frames, d);
        let rows: Vec<(Vec<T>, Vec<T>)> = attended
            .par_chunks(d)
            .map(|r| ffn_forward(&layer.ffn, &layer.ln_ffn.apply(r)).expect("validated dims"))
            .collect();
        let mut acts = Vec::with_capacity(frames * layer.ffn.m);
        let mut outs = Vec::with_capacity(frames * d);
        h = attended;
        for (t, (out, act)) in rows.into_iter().enumerate() {
            for (hv, &o) in h[t * d..(t + 1) * d].iter_mut().zip(&out) {
                *hv = *hv + o;
            }
            acts.extend(act);
            outs.extend(out);
        }
        inner.push(acts);
        ffn_out.push(outs);
    }
    Ok(ForwardTrace { frames, inner, ffn_out, hidden: h })
}

fn layer_name(l: usize, field: &str) -> String {
    format!("layer{l}/{field}")
}

fn floats<T: Real>(t: &Tensor) -> Result<Vec<T>> {
    match t.dtype() {
        DType::F32 => Ok(t.to_f32_vec()?.into_iter().map(|v| T::from_f64(f64::from(v))).collect()),
        DType::F64 => Ok(t.to_f64_vec()?.into_iter().map(T::from_f64).collect()),
        other => Err(Error::Format(format!("expected floating tensor, found {other:?}"))),
    }
}

impl EncoderModel<f32> {
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let d = self.d;
        let mut a = TensorArchive::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let m = layer.ffn.m;
            let entries: [(&str, &[usize], &[f32]); 12] = [
                ("ln_attn/gain", &[d], &layer.ln_attn.gain),
                ("ln_attn/bias", &[d], &layer.ln_attn.bias),
                ("attn/wq", &[d, d], &layer.attn.wq),
                ("attn/wk", &[d, d], &layer.attn.wk),
                ("attn/wv", &[d, d], &layer.attn.wv),
                ("attn/wo", &[d, d], &layer.attn.wo),
                ("ln_ffn/gain", &[d], &layer.ln_ffn.gain),
                ("ln_ffn/bias", &[d], &layer.ln_ffn.bias),
                ("w_in", &[m, d], &layer.ffn.w_in),
                ("b_in", &[m], &layer.ffn.b_in),
                ("w_out", &[m, d], &layer.ffn.w_out),
                ("b_out", &[d], &layer.ffn.b_out),
            ];
            for (field, shape, values) in entries {
                a.insert(layer_name(l, field), Tensor::from_f32(shape, values)?)?;
            }
            a.insert(layer_name(l, "activation"), Tensor::from_u8(&[1], &[layer.ffn.activation.code()])?)?;
        }
        Ok(a)
    }
}

impl<T: Real> EncoderModel<T> {
    /// Reads a model archive; f32 and f64 entries are both accepted.
    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let mut layers = Vec::new();
        let mut d = None;
        for l in 0.. {
            let Some(w_in) = a.get(&layer_name(l, "w_in")) else { break };
            let (m, dl) = w_in.matrix_dims();
            let dm = *d.get_or_insert(dl);
            if dm != dl {
                return Err(Error::Dimension(format!("layer {l}: width {dl}, expected {dm}")));
            }
            let get = |field: &str| -> Result<Vec<T>> { floats(a.require(&layer_name(l, field))?) };
            let activation = match a.get(&layer_name(l, "activation")) {
                Some(t) => Activation::from_code(*t.to_u8_vec()?.first().unwrap_or(&0))?,
                None => Activation::Gelu,
            };
            let ln = |prefix: &str| -> Result<LayerNorm<T>> {
                Ok(match (a.get(&layer_name(l, &format!("{prefix}/gain"))), a.get(&layer_name(l, &format!("{prefix}/bias")))) {
                    (Some(g), Some(b)) => LayerNorm { gain: floats(g)?, bias: floats(b)? },
                    _ => LayerNorm::identity(dm),
                })
            };
            let layer = EncoderLayer {
                ln_attn: ln("ln_attn")?,
                attn: AttentionWeights { wq: get("attn/wq")?, wk: get("attn/wk")?, wv: get("attn/wv")?, wo: get("attn/wo")? },
                ln_ffn: ln("ln_ffn")?,
                ffn: FfnWeights::new(m, dm, floats(w_in)?, get("b_in")?, get("w_out")?, get("b_out")?, activation)
                    .map_err(|e| Error::Dimension(format!("layer {l}: {e}")))?,
            };
            layer.check(dm, l)?;
            layers.push(layer);
        }
        let d = d.ok_or_else(|| Error::MissingData("model archive has no `layer0/w_in`".into()))?;
        Ok(EncoderModel { d, layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn single_pair_returns_value() {
        let out = attention_forward(&[0.3f64, -1.0], &[2.0, 5.0], &[7.0, -1.0, 0.5], 2).unwrap();
        assert_eq!(out, [7.0, -1.0, 0.5]);
    }

    #[test]
    fn identical_keys_average_values() {
        let out = attention_forward(&[1.0f64, 2.0], &[0.5, 0.5, 0.5, 0.5], &[1.0, 3.0], 2).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(1..20);
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let k: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let w = attention_weights(&q, &k, 4);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let raw: Vec<f64> = (0..n).map(|i| (0..4).map(|j| q[j] * k[i * 4 + j]).sum::<f64>().exp()).collect();
            let z: f64 = raw.iter().sum();
            for (a, b) in w.iter().zip(&raw) {
                assert!((a - b / z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_model_gives_bias_activations() {
        let d = 4;
        let mut model = EncoderModel::<f32>::random(1, d, 6, 0.0, 0);
        model.layers[0].ffn.b_in = vec![-1.0, 0.0, 0.5, 1.0, 2.0, -3.0];
        let x: Vec<f32> = (0..3 * d).map(|i| i as f32 * 0.1).collect();
        let trace = encoder_forward(&model, &x).unwrap();
        for t in 0..3 {
            for i in 0..6 {
                let want = Activation::Gelu.apply(model.layers[0].ffn.b_in[i]);
                assert_eq!(trace.inner[0][t * 6 + i], want);
            }
        }
    }

    #[test]
    fn identical_rows_identical_activations() {
        let model = EncoderModel::<f32>::random(2, 8, 16, 1.0, 9);
        let row: Vec<f32> = (0..8).map(|i| (i as f32).sin()).collect();
        let x: Vec<f32> = row.iter().cycle().take(8 * 5).copied().collect();
        let trace = encoder_forward(&model, &x).unwrap();
        for l in 0..2 {
            let acts = &trace.inner[l];
            for t in 1..5 {
                assert_eq!(&acts[t * 16..(t + 1) * 16], &acts[..16]);
            }
        }
    }

    #[test]
    fn rerun_is_bit_identical() {
        let model = EncoderModel::<f32>::random(2, 8, 32, 1.0, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f32> = (0..16 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = encoder_forward(&model, &x).unwrap();
        let b = encoder_forward(&model, &x).unwrap();
        assert_eq!(a.inner, b.inner);
        assert_eq!(a.hidden, b.hidden);
    }

    #[test]
    fn width_mismatch_names_layer() {
        let mut model = EncoderModel::<f32>::random(2, 4, 8, 1.0, 0);
        model.layers[1].ffn.d = 3;
        let err = encoder_forward(&model, &[0.0; 8]).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
        assert!(encoder_forward(&model, &[0.0; 7]).is_err());
    }

    #[test]
    fn archive_round_trip() {
        let model = EncoderModel::<f32>::random(2, 4, 8, 1.0, 3);
        let a = model.to_archive().unwrap();
        assert_eq!(EncoderModel::<f32>::from_archive(&a).unwrap(), model);
        assert_eq!(a.get("layer1/w_in").unwrap().shape(), &[8, 4]);
    }

    proptest! {
        #[test]
        fn f32_tracks_f64_reference(seed in any::<u64>(), frames in 1usize..12) {
            let model = EncoderModel::<f64>::random(2, 16, 64, 1.0, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            let x: Vec<f64> = (0..frames * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let want = encoder_forward(&model, &x).unwrap();
            let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            let got = encoder_forward(&model.cast::<f32>(), &x32).unwrap();
            let scale = want.hidden.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
            for (a, b) in got.hidden.iter().zip(&want.hidden) {
                prop_assert!((*a as f64 - b).abs() <= 1e-4 * scale);
            }
        }

        #[test]
        fn row_permutation_without_attention_mixing(seed in any::<u64>()) {
            // with zero attention output the blocks act row-wise, so permuting frames permutes outputs
            let mut model = EncoderModel::<f32>::random(1, 8, 16, 1.0, seed);
            model.layers[0].attn.wo = vec![0.0; 64];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f32> = (0..4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let perm = [2usize, 0, 3, 1];
            let px: Vec<f32> = perm.iter().flat_map(|&p| x[p * 8..(p + 1) * 8].to_vec()).collect();
            let a = encoder_forward(&model, &x).unwrap();
            let b = encoder_forward(&model, &px).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert_eq!(&b.inner[0][i * 16..(i + 1) * 16], &a.inner[0][p * 16..(p + 1) * 16]);
            }
        }
    }
}
