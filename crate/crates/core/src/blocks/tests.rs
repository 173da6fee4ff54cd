use rand::Rng;

use super::*;
use crate::kernel::{check_gradients, RngStream};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 1.0)
}

fn lin_apply(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.value(l.weight).data();
    let b = store.value(l.bias).data();
    (0..l.d_out)
        .map(|j| b[j] + (0..l.d_in).map(|i| x[i] * w[i * l.d_out + j]).sum::<f64>())
        .collect()
}

/// Direct evaluation of joint attention for one batch element: keys and
/// values are the primary projections followed by the secondary ones, and
/// each head normalizes `q . k * scale` over the attendable joint positions.
fn joint_oracle(
    store: &ParamStore,
    blk: &JointAttentionBlock,
    primary: &[Vec<f64>],
    secondary: &[Vec<f64>],
    mask: &[Vec<bool>],
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let dh = blk.d_model / blk.n_heads;
    let scale = match blk.scale {
        AttnScale::PerHead => 1.0 / (dh as f64).sqrt(),
        AttnScale::Model => 1.0 / (blk.d_model as f64).sqrt(),
    };
    let mut keys: Vec<Vec<f64>> = primary.iter().map(|r| lin_apply(store, &blk.primary_key, r)).collect();
    let mut vals: Vec<Vec<f64>> = primary.iter().map(|r| lin_apply(store, &blk.primary_value, r)).collect();
    for s in secondary {
        keys.push(lin_apply(store, blk.secondary_key.as_ref().unwrap(), s));
        vals.push(lin_apply(store, blk.secondary_value.as_ref().unwrap(), s));
    }
    let mut outs = Vec::new();
    let mut all_w = Vec::new();
    for (i, r) in primary.iter().enumerate() {
        let q = lin_apply(store, &blk.query, r);
        let mut mixed = vec![0.0; blk.d_model];
        let mut head_w = Vec::new();
        for h in 0..blk.n_heads {
            let e: Vec<f64> = keys
                .iter()
                .map(|k| (0..dh).map(|c| q[h * dh + c] * k[h * dh + c]).sum::<f64>() * scale)
                .collect();
            let z: f64 = e.iter().zip(&mask[i]).filter(|(_, m)| **m).map(|(v, _)| v.exp()).sum();
            let w: Vec<f64> = e
                .iter()
                .zip(&mask[i])
                .map(|(v, m)| if *m { v.exp() / z } else { 0.0 })
                .collect();
            for (j, wj) in w.iter().enumerate() {
                for c in 0..dh {
                    mixed[h * dh + c] += wj * vals[j][h * dh + c];
                }
            }
            head_w.push(w);
        }
        outs.push(lin_apply(store, &blk.output, &mixed));
        all_w.push(head_w);
    }
    (outs, all_w)
}

fn rows(t: &Tensor, b: usize) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (n, d) = (s[1], s[2]);
    (0..n).map(|i| t.data()[(b * n + i) * d..(b * n + i + 1) * d].to_vec()).collect()
}

fn random_mask(rng: &mut ChaCha8Rng, b: usize, n: usize, k: usize) -> Mask {
    let mut data: Vec<bool> = (0..b * n * k).map(|_| rng.random::<f64>() < 0.6).collect();
    for row in data.chunks_mut(k) {
        let j = rng.random_range(0..k);
        row[j] = true;
    }
    Mask::new(vec![b, n, k], data).unwrap()
}

#[test]
fn empty_secondary_is_self_attention_on_100_configs() {
    for cfg in 0..100u64 {
        let mut rng = RngStream::new(cfg, 0).rng();
        let heads = [1, 2, 4][cfg as usize % 3];
        let d = heads * rng.random_range(1..4);
        let (b, n) = (rng.random_range(1..3), rng.random_range(1..5));
        let mut store = ParamStore::new();
        let blk = JointAttentionBlock::new(&mut store, "att", ParamGroup::EncDec, d, heads, Some(3), 0.0, &mut rng).unwrap();
        let x = rand_tensor(&mut rng, &[b, n, d]);
        let mask = random_mask(&mut rng, b, n, n);
        let tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let empty = tape.constant(Tensor::zeros(&[b, 0, 3]));
        let empty_mask = Mask::full(&[b, n, 0], true);
        let got = blk.forward(&tape, xv, Some(empty), &mask, Some(&empty_mask)).unwrap().value();
        for bi in 0..b {
            let m: Vec<Vec<bool>> = (0..n).map(|i| mask.data()[(bi * n + i) * n..(bi * n + i + 1) * n].to_vec()).collect();
            let (want, _) = joint_oracle(&store, &blk, &rows(&x, bi), &[], &m);
            for (i, wr) in want.iter().enumerate() {
                for (c, w) in wr.iter().enumerate() {
                    let g = got.data()[(bi * n + i) * d + c];
                    assert!((g - w).abs() <= 1e-9, "cfg {cfg}: {g} vs {w}");
                }
            }
        }
    }
}

#[test]
fn identical_keys_split_attention_evenly() {
    let mut rng = RngStream::new(7, 0).rng();
    let d = 4;
    let mut store = ParamStore::new();
    let blk = JointAttentionBlock::new(&mut store, "att", ParamGroup::EncDec, d, 1, Some(d), 0.0, &mut rng).unwrap();
    // secondary key projection = primary key projection
    let (pk, sk) = (blk.primary_key.clone(), blk.secondary_key.clone().unwrap());
    *store.value_mut(sk.weight) = store.value(pk.weight).clone();
    *store.value_mut(sk.bias) = store.value(pk.bias).clone();
    let x = rand_tensor(&mut rng, &[1, 1, d]);
    let s = x.clone();
    let tape = Tape::new(&store);
    let full = Mask::full(&[1, 1, 1], true);
    let (out, w) = blk
        .forward_with_weights(&tape, tape.constant(x.clone()), Some(tape.constant(s.clone())), &full, Some(&full))
        .unwrap();
    let w = w.value();
    assert!((w.data()[0] - 0.5).abs() < 1e-15 && (w.data()[1] - 0.5).abs() < 1e-15);
    let vp = lin_apply(&store, &blk.primary_value, x.data());
    let vs = lin_apply(&store, blk.secondary_value.as_ref().unwrap(), s.data());
    let mean: Vec<f64> = vp.iter().zip(&vs).map(|(a, b)| 0.5 * (a + b)).collect();
    let want = lin_apply(&store, &blk.output, &mean);
    for (g, w) in out.value().data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn joint_attention_matches_direct_equations() {
    for (seed, heads, scale) in [(1u64, 1, AttnScale::PerHead), (2, 2, AttnScale::PerHead), (3, 2, AttnScale::Model)] {
        let mut rng = RngStream::new(seed, 3).rng();
        let (n, m, d, ds) = (3, 2, 4, 5);
        let mut store = ParamStore::new();
        let mut blk = JointAttentionBlock::new(&mut store, "att", ParamGroup::EncDec, d, heads, Some(ds), 0.0, &mut rng).unwrap();
        blk.scale = scale;
        let x = rand_tensor(&mut rng, &[1, n, d]);
        let s = rand_tensor(&mut rng, &[1, m, ds]);
        let pm = random_mask(&mut rng, 1, n, n);
        let sm = Mask::new(vec![1, n, m], vec![true, false, false, true, true, true]).unwrap();
        let tape = Tape::new(&store);
        let (out, w) = blk
            .forward_with_weights(&tape, tape.constant(x.clone()), Some(tape.constant(s.clone())), &pm, Some(&sm))
            .unwrap();
        let joint = join_masks(&pm, &sm).unwrap();
        let mrows: Vec<Vec<bool>> = (0..n).map(|i| joint.data()[i * (n + m)..(i + 1) * (n + m)].to_vec()).collect();
        let (want, want_w) = joint_oracle(&store, &blk, &rows(&x, 0), &rows(&s, 0), &mrows);
        let got = out.value();
        for (i, wr) in want.iter().enumerate() {
            for (c, v) in wr.iter().enumerate() {
                assert!((got.data()[i * d + c] - v).abs() <= 1e-9);
            }
        }
        // weights: [1 x h x n x (n+m)]; rows sum to one and respect the mask
        let w = w.value();
        for h in 0..heads {
            for i in 0..n {
                let row = &w.data()[(h * n + i) * (n + m)..(h * n + i + 1) * (n + m)];
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                for (j, v) in row.iter().enumerate() {
                    if !mrows[i][j] {
                        assert_eq!(*v, 0.0);
                    }
                    assert!((v - want_w[i][h][j]).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn attention_argmax_invariant_to_logit_shift() {
    let tape = Tape::detached();
    let row = vec![0.3, -1.2, 2.5, 0.7];
    let mask = Mask::new(vec![1, 4], vec![true, true, false, true]).unwrap();
    let a = tape.constant(Tensor::from_rows(&[row.clone()])).masked_softmax(&mask).unwrap().value();
    let shifted: Vec<f64> = row.iter().map(|v| v + 17.0).collect();
    let b = tape.constant(Tensor::from_rows(&[shifted])).masked_softmax(&mask).unwrap().value();
    let argmax = |t: &Tensor| {
        t.data().iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0
    };
    assert_eq!(argmax(&a), argmax(&b));
    assert_eq!(argmax(&a), 3);
}

#[test]
fn fully_masked_query_row_is_an_error() {
    let mut rng = RngStream::new(1, 0).rng();
    let mut store = ParamStore::new();
    let blk = JointAttentionBlock::new(&mut store, "a", ParamGroup::EncDec, 2, 1, Some(2), 0.0, &mut rng).unwrap();
    let tape = Tape::new(&store);
    let x = tape.constant(rand_tensor(&mut rng, &[1, 1, 2]));
    let none = Mask::full(&[1, 1, 1], false);
    assert!(matches!(
        blk.forward(&tape, x, Some(x), &none, Some(&none)),
        Err(Error::FullyMasked { .. })
    ));
}

#[test]
fn heads_must_divide_width() {
    let mut rng = RngStream::new(1, 0).rng();
    let mut store = ParamStore::new();
    assert!(JointAttentionBlock::new(&mut store, "a", ParamGroup::EncDec, 6, 4, None, 0.0, &mut rng).is_err());
}

fn combiner_with(store: &mut ParamStore, alpha: &[f64], beta: &[f64]) -> GluCombiner {
    let mut c = GluCombiner::new(store, "glu", CombinerKind::Gated, alpha.len()).unwrap();
    store.value_mut(c.alpha.unwrap()).data_mut().copy_from_slice(alpha);
    store.value_mut(c.beta.unwrap()).data_mut().copy_from_slice(beta);
    c.compensation_active = false;
    c
}

#[test]
fn combiner_at_initialization_passes_last_layer_through() {
    let mut rng = RngStream::new(4, 0).rng();
    let mut store = ParamStore::new();
    let c = GluCombiner::new(&mut store, "glu", CombinerKind::Gated, 3).unwrap();
    assert!(c.compensation_active);
    assert_eq!(store.value(c.alpha.unwrap()).data(), &[0.0, 0.0, 1.0]);
    assert_eq!(store.value(c.beta.unwrap()).data(), &[0.0, 0.0, 0.0]);
    let states: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[2, 4])).collect();
    let tape = Tape::new(&store);
    let vars: Vec<Var> = states.iter().map(|s| tape.constant(s.clone())).collect();
    let out = glu_combine(&tape, &vars, &c).unwrap().value();
    assert_eq!(out.data(), states[2].data());
}

#[test]
fn zero_gate_weights_halve_the_mix() {
    let mut rng = RngStream::new(5, 0).rng();
    let mut store = ParamStore::new();
    let alpha = [0.7, -1.3];
    let c = combiner_with(&mut store, &alpha, &[0.0, 0.0]);
    let states: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, &[3, 2])).collect();
    let tape = Tape::new(&store);
    let vars: Vec<Var> = states.iter().map(|s| tape.constant(s.clone())).collect();
    let out = glu_combine(&tape, &vars, &c).unwrap().value();
    for i in 0..6 {
        let want = 0.5 * (alpha[0] * states[0].data()[i] + alpha[1] * states[1].data()[i]);
        assert!((out.data()[i] - want).abs() < 1e-15);
    }
}

#[test]
fn combiner_matches_elementwise_oracle() {
    let mut rng = RngStream::new(6, 0).rng();
    let mut store = ParamStore::new();
    let alpha = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let beta = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let c = combiner_with(&mut store, &alpha, &beta);
    let states: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, &[4, 3])).collect();
    let tape = Tape::new(&store);
    let vars: Vec<Var> = states.iter().map(|s| tape.constant(s.clone())).collect();
    let out = glu_combine(&tape, &vars, &c).unwrap().value();
    for i in 0..12 {
        let (b1, b2) = (states[0].data()[i], states[1].data()[i]);
        let g = 1.0 / (1.0 + (-(beta[0] * b1 + beta[1] * b2)).exp());
        let want = g * (alpha[0] * b1 + alpha[1] * b2);
        assert!((out.data()[i] - want).abs() <= 1e-12);
    }
}

#[test]
fn combiner_rejects_wrong_state_count() {
    let mut store = ParamStore::new();
    let c = GluCombiner::new(&mut store, "glu", CombinerKind::Gated, 3).unwrap();
    let tape = Tape::new(&store);
    let v = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(glu_combine(&tape, &[v, v], &c).is_err());
}

#[test]
fn combiner_is_linear_in_states_without_gate_weights() {
    let mut rng = RngStream::new(8, 0).rng();
    let mut store = ParamStore::new();
    let c = combiner_with(&mut store, &[0.4, 1.1], &[0.0, 0.0]);
    let a: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, &[2, 2])).collect();
    let b: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, &[2, 2])).collect();
    let tape = Tape::new(&store);
    let eval = |xs: &[Tensor]| {
        let vars: Vec<Var> = xs.iter().map(|s| tape.constant(s.clone())).collect();
        glu_combine(&tape, &vars, &c).unwrap().value()
    };
    let sum: Vec<Tensor> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| Tensor::new(x.shape().to_vec(), x.data().iter().zip(y.data()).map(|(p, q)| 2.0 * p + q).collect()).unwrap())
        .collect();
    let (fa, fb, fs) = (eval(&a), eval(&b), eval(&sum));
    for i in 0..4 {
        assert!((fs.data()[i] - (2.0 * fa.data()[i] + fb.data()[i])).abs() < 1e-12);
    }
}

#[test]
fn folding_keeps_the_function() {
    let mut rng = RngStream::new(9, 0).rng();
    let mut store = ParamStore::new();
    let mut c = GluCombiner::new(&mut store, "glu", CombinerKind::Gated, 2).unwrap();
    let states: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, &[2, 3])).collect();
    let eval = |store: &ParamStore, c: &GluCombiner| {
        let tape = Tape::new(store);
        let vars: Vec<Var> = states.iter().map(|s| tape.constant(s.clone())).collect();
        glu_combine(&tape, &vars, c).unwrap().value().as_ref().clone()
    };
    let before = eval(&store, &c);
    c.fold_compensation(&mut store);
    assert!(!c.compensation_active);
    assert_eq!(store.value(c.alpha.unwrap()).data(), &[0.0, 2.0]);
    assert!(eval(&store, &c).max_abs_diff(&before) <= 1e-9);
}

#[test]
fn last_layer_combiner_reads_only_the_top_state() {
    let mut store = ParamStore::new();
    let c = GluCombiner::new(&mut store, "glu", CombinerKind::LastLayer, 3).unwrap();
    assert!(store.is_empty());
    let tape = Tape::new(&store);
    let seen = std::cell::RefCell::new(Vec::new());
    let top = tape.constant(Tensor::full(&[1, 2], 3.0));
    let out = c
        .combine(&tape, 3, |i| {
            seen.borrow_mut().push(i);
            top
        })
        .unwrap();
    assert_eq!(*seen.borrow(), vec![2]);
    assert_eq!(out.value().data(), &[3.0, 3.0]);
}

#[test]
fn positional_encoding_examples() {
    let pe = SinusoidalPositions::new(4, 8);
    let tape = Tape::detached();
    let x = tape.constant(Tensor::zeros(&[2, 4]));
    let y = pe.encode(&tape, x, 0).unwrap().value();
    assert_eq!(y.row(0), &[0.0, 1.0, 0.0, 1.0]);
    // position 1, d = 4: frequencies 1 and 1/100
    let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
    for (a, b) in y.row(1).iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
    let again = pe.encode(&tape, x, 0).unwrap().value();
    assert_eq!(y.data(), again.data());
    let long = tape.constant(Tensor::zeros(&[9, 4]));
    assert!(pe.encode(&tape, long, 0).is_err());
    assert!(pe.encode(&tape, x, 7).is_err());
}

fn ffn_fixture(seed: u64) -> (ParamStore, FeedForward, ChaCha8Rng) {
    let mut rng = RngStream::new(seed, 0).rng();
    let mut store = ParamStore::new();
    let f = FeedForward::new(&mut store, "ffn", ParamGroup::EncDec, 3, 5, &mut rng).unwrap();
    (store, f, rng)
}

#[test]
fn feed_forward_zero_and_relu_kill() {
    let (mut store, f, mut rng) = ffn_fixture(1);
    for id in [f.inner.weight, f.inner.bias, f.outer.weight, f.outer.bias] {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = rand_tensor(&mut rng, &[2, 3]);
    {
        let tape = Tape::new(&store);
        let y = f.forward(&tape, tape.constant(x.clone())).unwrap().value();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }
    // all pre-activations negative
    store.value_mut(f.inner.bias).data_mut().iter_mut().for_each(|v| *v = -100.0);
    let b2 = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
    *store.value_mut(f.outer.bias) = b2.clone();
    *store.value_mut(f.outer.weight) = rand_tensor(&mut rng, &[5, 3]);
    let tape = Tape::new(&store);
    let y = f.forward(&tape, tape.constant(x)).unwrap().value();
    for r in 0..2 {
        assert_eq!(y.row(r), b2.data());
    }
}

#[test]
fn feed_forward_matches_loop_oracle() {
    let (store, f, mut rng) = ffn_fixture(2);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let tape = Tape::new(&store);
    let y = f.forward(&tape, tape.constant(x.clone())).unwrap().value();
    for r in 0..4 {
        let h: Vec<f64> = lin_apply(&store, &f.inner, x.row(r)).into_iter().map(|v| v.max(0.0)).collect();
        let want = lin_apply(&store, &f.outer, &h);
        for (a, b) in y.row(r).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn embedding_rejects_out_of_vocab_ids() {
    let mut rng = RngStream::new(1, 0).rng();
    let mut store = ParamStore::new();
    let e = EmbeddingTable::new(&mut store, "emb", ParamGroup::EncDec, 5, 4, &mut rng).unwrap();
    let tape = Tape::new(&store);
    assert!(e.forward(&tape, &[1, 5], &[2]).is_err());
    assert_eq!(e.forward(&tape, &[1, 4], &[1, 2]).unwrap().shape(), vec![1, 2, 4]);
}

/// Finite-difference agreement for each block at 64-bit precision.
#[test]
fn block_gradients_match_finite_differences() {
    let mut rng = RngStream::new(21, 0).rng();
    let mut store = ParamStore::new();
    let blk = JointAttentionBlock::new(&mut store, "att", ParamGroup::EncDec, 4, 2, Some(3), 0.0, &mut rng).unwrap();
    let ffn = FeedForward::new(&mut store, "ffn", ParamGroup::EncDec, 4, 6, &mut rng).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", ParamGroup::EncDec, 4).unwrap();
    let emb = EmbeddingTable::new(&mut store, "emb", ParamGroup::EncDec, 7, 4, &mut rng).unwrap();
    let glu = GluCombiner::new(&mut store, "glu", CombinerKind::Gated, 2).unwrap();
    // move off the symmetric initialization so every path carries gradient
    for id in [glu.alpha.unwrap(), glu.beta.unwrap()] {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    for id in [ln.gain, ln.bias] {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    let s1 = rand_tensor(&mut rng, &[1, 2, 3]);
    let s2 = rand_tensor(&mut rng, &[1, 2, 3]);
    let probe = rand_tensor(&mut rng, &[1, 3, 4]);
    let pe = SinusoidalPositions::new(4, 8);
    let pm = causal_mask(1, 3);
    let sm = Mask::new(vec![1, 3, 2], vec![true, true, true, false, false, true]).unwrap();
    let err = check_gradients(&mut store, 1e-5, |t| {
        let x = pe.encode(t, emb.forward(t, &[1, 6, 2], &[1, 3])?, 0)?;
        let b = glu_combine(t, &[t.constant(s1.clone()), t.constant(s2.clone())], &glu)?;
        let a = blk.forward(t, x, Some(b), &pm, Some(&sm))?;
        let h = ln.forward(t, x.add(&a)?)?;
        let y = ffn.forward(t, h)?;
        Ok(y.mul(&t.constant(probe.clone()))?.sum())
    })
    .unwrap();
    assert!(err <= 1e-6, "relative error {err}");
}
