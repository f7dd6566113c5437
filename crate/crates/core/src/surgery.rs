//! Neuron scoring, protected pruning and value-slot erasure on FFN weights.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn::{Activation, FfnWeights, Real};
use crate::patterns::NeuronSet;
use crate::tensor::{DType, Tensor, TensorArchive};

/// `‖k_i‖₁ + ‖v_i‖₁` per neuron; biases are not part of the score.
pub fn l1_scores<T: Real>(w: &FfnWeights<T>) -> Vec<f64> {
    (0..w.m)
        .map(|i| {
            w.key(i).iter().chain(w.value(i)).map(|x| Real::as_f64(*x).abs()).sum()
        })
        .collect()
}

/// Which neurons survive pruning; `protected ⊆ keep`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub m: usize,
    pub keep: Vec<usize>,
    pub protected: Vec<usize>,
    /// Set when the protected set alone met or exceeded the keep budget.
    pub budget_exceeded: bool,
}

impl PruneMask {
    pub fn keep_all(m: usize) -> Self {
        PruneMask { m, keep: (0..m).collect(), protected: Vec::new(), budget_exceeded: false }
    }

    pub fn keeps_all(&self) -> bool {
        self.keep.len() == self.m
    }

    /// Per-neuron i32 codes: 0 pruned, 1 kept, 2 kept and protected.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let mut codes = vec![0i32; self.m];
        for &i in &self.keep {
            codes[i] = 1;
        }
        for &i in &self.protected {
            codes[i] = 2;
        }
        Tensor::from_i32(&[self.m], &codes)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let codes = t.to_i32_vec()?;
        let mut keep = Vec::new();
        let mut protected = Vec::new();
        for (i, &c) in codes.iter().enumerate() {
            match c {
                0 => {}
                1 => keep.push(i),
                2 => {
                    keep.push(i);
                    protected.push(i);
                }
                other => return Err(Error::Format(format!("invalid mask code {other} at {i}"))),
            }
        }
        Ok(PruneMask { m: codes.len(), keep, protected, budget_exceeded: false })
    }
}

/// Keeps every protected neuron, then fills `round(keep_fraction * m)` slots with the
/// highest-scoring unprotected neurons (lower index first on ties).
pub fn make_prune_mask(scores: &[f64], protected: &NeuronSet, keep_fraction: f64) -> Result<PruneMask> {
    let m = scores.len();
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep fraction must be in (0, 1], got {keep_fraction}")));
    }
    if protected.m() != m {
        return Err(Error::Dimension(format!(
            "protected set over {} neurons, scores over {m}",
            protected.m()
        )));
    }
    let budget = (keep_fraction * m as f64).round() as usize;
    let budget_exceeded = !protected.is_empty() && protected.len() >= budget;
    if budget_exceeded {
        warn!(
            "{} protected neurons exceed the keep budget of {budget}; keeping all protected",
            protected.len()
        );
    }
    let mut rest: Vec<usize> = (0..m).filter(|&i| !protected.contains(i)).collect();
    rest.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let fill = budget.saturating_sub(protected.len());
    let mut keep: Vec<usize> = protected.members().iter().copied().chain(rest.into_iter().take(fill)).collect();
    keep.sort_unstable();
    Ok(PruneMask { m, keep, protected: protected.members().to_vec(), budget_exceeded })
}

fn gather_rows<T: Copy>(v: &[T], width: usize, rows: &[usize]) -> Vec<T> {
    rows.iter().flat_map(|&r| v[r * width..(r + 1) * width].iter().copied()).collect()
}

/// Removes every neuron not in `mask.keep`; kept neurons retain their order.
pub fn apply_prune<T: Real>(w: &FfnWeights<T>, mask: &PruneMask) -> Result<FfnWeights<T>> {
    if mask.m != w.m {
        return Err(Error::Dimension(format!("mask over {} neurons, layer has {}", mask.m, w.m)));
    }
    if mask.keep.is_empty() {
        return Err(Error::Dimension("prune mask keeps no neurons".into()));
    }
    FfnWeights::new(
        mask.keep.len(),
        w.d,
        gather_rows(&w.w_in, w.d, &mask.keep),
        gather_rows(&w.b_in, 1, &mask.keep),
        gather_rows(&w.w_out, w.d, &mask.keep),
        w.b_out.clone(),
        w.activation,
    )
}

/// Zeroes the value rows of `neurons`; everything else is untouched.
pub fn erase_value_slots<T: Real>(w: &FfnWeights<T>, neurons: &NeuronSet) -> Result<FfnWeights<T>> {
    if let Some(&bad) = neurons.members().iter().find(|&&i| i >= w.m) {
        return Err(Error::Dimension(format!("neuron {bad} out of range for m = {}", w.m)));
    }
    let mut out = w.clone();
    for &i in neurons.members() {
        out.w_out[i * w.d..(i + 1) * w.d].fill(T::zero());
    }
    Ok(out)
}

pub(crate) fn ffn_entry(layer: usize, field: &str) -> String {
    format!("layer{layer}/{field}")
}

/// Number of consecutive `layer<L>/w_in` entries starting at layer 0.
pub fn archive_layer_count(a: &TensorArchive) -> usize {
    (0..).take_while(|&l| a.get(&ffn_entry(l, "w_in")).is_some()).count()
}

/// Reads one layer's feed-forward weights (f32 or f64 entries) as f64.
pub fn ffn_from_archive(a: &TensorArchive, layer: usize) -> Result<FfnWeights<f64>> {
    let get = |field: &str| -> Result<Vec<f64>> {
        let t = a.require(&ffn_entry(layer, field))?;
        match t.dtype() {
            DType::F32 => Ok(t.to_f32_vec()?.into_iter().map(f64::from).collect()),
            DType::F64 => t.to_f64_vec(),
            other => Err(Error::Format(format!("layer {layer}/{field}: expected float, found {other:?}"))),
        }
    };
    let (m, d) = a.require(&ffn_entry(layer, "w_in"))?.matrix_dims();
    let activation = match a.get(&ffn_entry(layer, "activation")) {
        Some(t) => Activation::from_code(*t.to_u8_vec()?.first().unwrap_or(&0))?,
        None => Activation::Gelu,
    };
    FfnWeights::new(m, d, get("w_in")?, get("b_in")?, get("w_out")?, get("b_out")?, activation)
        .map_err(|e| Error::Dimension(format!("layer {layer}: {e}")))
}

/// Applies a prune mask to one layer of a model archive at the byte level,
/// preserving dtype and entry order; other entries pass through untouched.
pub fn prune_archive_layer(a: &TensorArchive, layer: usize, mask: &PruneMask) -> Result<TensorArchive> {
    let w_in = a.require(&ffn_entry(layer, "w_in"))?;
    if w_in.shape()[0] != mask.m {
        return Err(Error::Dimension(format!(
            "layer {layer}: mask over {} neurons, layer has {}",
            mask.m,
            w_in.shape()[0]
        )));
    }
    if mask.keeps_all() {
        return Ok(a.clone());
    }
    let mut out = a.clone();
    for field in ["w_in", "b_in", "w_out"] {
        let name = ffn_entry(layer, field);
        out.set(&name, a.require(&name)?.select_rows(&mask.keep)?);
    }
    Ok(out)
}

/// Zeroes value rows of one layer in a model archive.
pub fn erase_archive_layer(a: &TensorArchive, layer: usize, neurons: &NeuronSet) -> Result<TensorArchive> {
    let name = ffn_entry(layer, "w_out");
    let w_out = a.require(&name)?;
    let m = w_out.shape()[0];
    if let Some(&bad) = neurons.members().iter().find(|&&i| i >= m) {
        return Err(Error::Dimension(format!("layer {layer}: neuron {bad} out of range for m = {m}")));
    }
    let mut out = a.clone();
    out.set(&name, w_out.zero_rows(neurons.members())?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ffn::ffn_forward;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_weights<T: Real>(m: usize, d: usize, seed: u64) -> FfnWeights<T> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut g = |n: usize| (0..n).map(|_| T::from_f64(rng.gen_range(-0.3..0.3))).collect::<Vec<T>>();
        FfnWeights::new(m, d, g(m * d), g(m), g(m * d), g(d), Activation::Gelu).unwrap()
    }

    #[test]
    fn l1_example() {
        let w = FfnWeights::<f32>::new(
            2,
            2,
            vec![1.0, -2.0, 0.0, 0.0],
            vec![5.0, 5.0],
            vec![0.0, 3.0, 0.0, 0.0],
            vec![0.0; 2],
            Activation::Gelu,
        )
        .unwrap();
        assert_eq!(l1_scores(&w), [6.0, 0.0]);
        let mut doubled = w.clone();
        doubled.w_in.iter_mut().chain(doubled.w_out.iter_mut()).for_each(|x| *x *= 2.0);
        assert_eq!(l1_scores(&doubled), [12.0, 0.0]);
    }

    #[test]
    fn mask_examples() {
        let scores: Vec<f64> = (0..10).map(f64::from).collect();
        let none = NeuronSet::empty(10);
        assert_eq!(make_prune_mask(&scores, &none, 0.2).unwrap().keep, [8, 9]);
        let one = NeuronSet::new(10, [0]).unwrap();
        let m = make_prune_mask(&scores, &one, 0.2).unwrap();
        assert_eq!(m.keep, [0, 9]);
        assert_eq!(m.protected, [0]);
        assert!(make_prune_mask(&scores, &none, 1.0).unwrap().keeps_all());
        let many = NeuronSet::new(10, [0, 1, 2]).unwrap();
        let m = make_prune_mask(&scores, &many, 0.2).unwrap();
        assert_eq!(m.keep, [0, 1, 2]);
        assert!(m.budget_exceeded);
        assert!(make_prune_mask(&scores, &none, 0.0).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let m = make_prune_mask(&[1.0, 2.0, 2.0, 2.0], &NeuronSet::empty(4), 0.5).unwrap();
        assert_eq!(m.keep, [1, 2]);
    }

    #[test]
    fn mask_tensor_round_trip() {
        let scores: Vec<f64> = (0..10).map(f64::from).collect();
        let m = make_prune_mask(&scores, &NeuronSet::new(10, [0, 3]).unwrap(), 0.4).unwrap();
        let back = PruneMask::from_tensor(&m.to_tensor().unwrap()).unwrap();
        assert_eq!((back.keep, back.protected), (m.keep, m.protected));
    }

    #[test]
    fn keep_all_is_identity() {
        let w = random_weights::<f32>(16, 4, 1);
        assert_eq!(apply_prune(&w, &PruneMask::keep_all(16)).unwrap(), w);
    }

    #[test]
    fn erase_examples() {
        let w = random_weights::<f32>(16, 4, 2);
        assert_eq!(erase_value_slots(&w, &NeuronSet::empty(16)).unwrap(), w);
        let all = erase_value_slots(&w, &NeuronSet::new(16, 0..16).unwrap()).unwrap();
        let (out, _) = ffn_forward(&all, &[0.3, -1.0, 2.0, 0.1]).unwrap();
        assert_eq!(out, w.b_out);
        assert!(erase_value_slots(&w, &NeuronSet::new(32, [20]).unwrap()).is_err());
    }

    #[test]
    fn archive_surgery_matches_typed() {
        let w = random_weights::<f32>(8, 3, 3);
        let mut a = TensorArchive::new();
        a.insert("layer0/w_in", Tensor::from_f32(&[8, 3], &w.w_in).unwrap()).unwrap();
        a.insert("layer0/b_in", Tensor::from_f32(&[8], &w.b_in).unwrap()).unwrap();
        a.insert("layer0/w_out", Tensor::from_f32(&[8, 3], &w.w_out).unwrap()).unwrap();
        a.insert("layer0/b_out", Tensor::from_f32(&[3], &w.b_out).unwrap()).unwrap();
        let mask = make_prune_mask(&l1_scores(&w), &NeuronSet::new(8, [1]).unwrap(), 0.5).unwrap();
        let pruned = prune_archive_layer(&a, 0, &mask).unwrap();
        let typed = apply_prune(&w, &mask).unwrap();
        assert_eq!(pruned.require("layer0/w_in").unwrap().to_f32_vec().unwrap(), typed.w_in);
        assert_eq!(pruned.require("layer0/b_in").unwrap().to_f32_vec().unwrap(), typed.b_in);
        assert_eq!(pruned.require("layer0/w_out").unwrap().to_f32_vec().unwrap(), typed.w_out);
        assert_eq!(prune_archive_layer(&a, 0, &PruneMask::keep_all(8)).unwrap(), a);

        let e = NeuronSet::new(8, [2, 5]).unwrap();
        let erased = erase_archive_layer(&a, 0, &e).unwrap();
        assert_eq!(
            erased.require("layer0/w_out").unwrap().to_f32_vec().unwrap(),
            erase_value_slots(&w, &e).unwrap().w_out
        );
    }

    /// Full forward with the given neurons' value rows zeroed.
    fn zero_masked_forward<T: Real>(w: &FfnWeights<T>, dropped: &[usize], x: &[T]) -> Vec<T> {
        let mut z = w.clone();
        for &i in dropped {
            z.w_out[i * w.d..(i + 1) * w.d].fill(T::zero());
        }
        ffn_forward(&z, x).unwrap().0
    }

    proptest! {
        #[test]
        fn prune_equals_zero_masked_forward(seed in any::<u64>(), keep in 0.05f64..1.0) {
            let w = random_weights::<f32>(32, 8, seed);
            let mask = make_prune_mask(&l1_scores(&w), &NeuronSet::empty(32), keep).unwrap();
            let pruned = apply_prune(&w, &mask).unwrap();
            let dropped: Vec<usize> = (0..32).filter(|i| !mask.keep.contains(i)).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let x: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = ffn_forward(&pruned, &x).unwrap().0;
            let b = zero_masked_forward(&w, &dropped, &x);
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() < 1e-6);
            }
        }

        #[test]
        fn mask_keeps_protected(seed in any::<u64>(), keep in 0.01f64..1.0, prot in prop::collection::btree_set(0usize..40, 0..20)) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..10.0)).collect();
            let p = NeuronSet::new(40, prot.iter().copied()).unwrap();
            let mask = make_prune_mask(&scores, &p, keep).unwrap();
            let budget = (keep * 40.0).round() as usize;
            prop_assert_eq!(mask.keep.len(), budget.max(p.len()));
            for &i in p.members() {
                prop_assert!(mask.keep.contains(&i));
            }
        }

        #[test]
        fn l1_permutation_equivariant(seed in any::<u64>()) {
            let w = random_weights::<f64>(12, 5, seed);
            let perm: Vec<usize> = (0..12).map(|i| (i * 5 + 3) % 12).collect();
            let pw = FfnWeights::new(
                12, 5,
                gather_rows(&w.w_in, 5, &perm), gather_rows(&w.b_in, 1, &perm),
                gather_rows(&w.w_out, 5, &perm), w.b_out.clone(), w.activation,
            ).unwrap();
            let s = l1_scores(&w);
            let ps = l1_scores(&pw);
            for (i, &p) in perm.iter().enumerate() {
                prop_assert_eq!(ps[i], s[p]);
            }
        }

        #[test]
        fn erasure_delta_identity(seed in any::<u64>(), erase in prop::collection::btree_set(0usize..24, 0..24)) {
            let e = NeuronSet::new(24, erase.iter().copied()).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let xs: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let w64 = random_weights::<f64>(24, 6, seed);
            let full = ffn_forward(&w64, &xs).unwrap().0;
            let erased = ffn_forward(&erase_value_slots(&w64, &e).unwrap(), &xs).unwrap().0;
            for c in 0..6 {
                let mut delta = 0.0;
                for &i in e.members() {
                    let z: f64 = (0..6).map(|j| xs[j] * w64.w_in[i * 6 + j]).sum::<f64>() + w64.b_in[i];
                    delta += Activation::Gelu.apply(z) * w64.w_out[i * 6 + c];
                }
                prop_assert!((full[c] - erased[c] - delta).abs() < 1e-12);
            }

            let w32: FfnWeights<f32> = w64.cast();
            let x32: Vec<f32> = xs.iter().map(|&v| v as f32).collect();
            let full = ffn_forward(&w32, &x32).unwrap().0;
            let erased = ffn_forward(&erase_value_slots(&w32, &e).unwrap(), &x32).unwrap().0;
            for c in 0..6 {
                let mut delta = 0.0f32;
                for &i in e.members() {
                    let z: f32 = (0..6).map(|j| x32[j] * w32.w_in[i * 6 + j]).sum::<f32>() + w32.b_in[i];
                    delta += Activation::Gelu.apply(z) * w32.w_out[i * 6 + c];
                }
                prop_assert!((full[c] - erased[c] - delta).abs() < 1e-6);
            }
        }
    }
}
