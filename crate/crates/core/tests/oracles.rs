//! Forward kernels against independently written reference loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wintent::attention::{cross_attention, multi_head, multi_head_cross, self_attention, AttentionParams, MultiHeadParams};
use wintent::losses::{accept_probability, bound, contrastive_loss, head_loss, sequence_loss, LossWeights};
use wintent::numerics::{layer_norm, linear, mlp, softmax, Activation, Axis, LinearParams, Matrix};
use wintent::signals::{rep_vector, RepLayout, SignalTriple, Stage};
use wintent::stack::{decode_step, encode, DecoderParams, EncoderParams, StackConfig};

fn rand_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| r.gen_range(-1.0..1.0))
}

fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let diff = a.max_abs_diff(b);
    assert!(diff <= tol, "max abs diff {diff:e} > {tol:e}");
}

#[test]
fn softmax_of_one_two_three() {
    let s = softmax(&Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap(), Axis::Rows).unwrap();
    for (got, want) in s.row(0).iter().zip([0.09003057, 0.24472847, 0.66524096]) {
        assert!((got - want).abs() < 1e-8);
    }
    // Columns axis on the transpose gives the same distribution.
    let c = softmax(&Matrix::column(&[1.0, 2.0, 3.0]).unwrap(), Axis::Cols).unwrap();
    assert_eq!(c.col(0), s.row(0));
}

#[test]
fn softmax_is_shift_stable_for_large_logits() {
    let s = softmax(&Matrix::from_rows(&[vec![1000.0, 1001.0]]).unwrap(), Axis::Rows).unwrap();
    let e = 1f64.exp();
    assert!((s.get(0, 1) - e / (1.0 + e)).abs() < 1e-15);
}

#[test]
fn layer_norm_hand_case() {
    // mean 2, population variance 1; gain 2 and shift 1 give (-1, 3).
    let y = layer_norm(&[1.0, 3.0], 2.0, 1.0, 0.0).unwrap();
    assert_eq!(y, vec![-1.0, 3.0]);
    let c = layer_norm(&[5.0, 5.0, 5.0], 1.0, 0.25, 0.0).unwrap();
    assert_eq!(c, vec![0.25; 3]);
}

#[test]
fn linear_hand_case() {
    let p = LinearParams::new(Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap(), vec![0.0]).unwrap();
    let y = linear(&Matrix::column(&[5.0, 6.0]).unwrap(), &p).unwrap();
    assert_eq!(y.item(), Some(17.0));
}

#[test]
fn stopping_softmax_hand_case() {
    let p = accept_probability(&[-2.0, 2.0]);
    assert!((p - 0.98201379).abs() < 1e-8);
    assert_eq!(accept_probability(&[0.0, 0.0]), 0.5);
}

/// `softmax_i((W_k y_i)·(W_q x_j) / √d_k)` with `i ≤ j` when causal.
fn naive_attention(x: &Matrix, y: &Matrix, p: &AttentionParams, causal: bool) -> Matrix {
    let q = p.wq.matmul(x).unwrap();
    let k = p.wk.matmul(y).unwrap();
    let v = p.wv.matmul(y).unwrap();
    let d_k = p.wq.rows() as f64;
    let mut out = vec![vec![0.0; p.wv.rows()]; x.cols()];
    for j in 0..x.cols() {
        let visible: Vec<usize> = (0..y.cols()).filter(|i| !causal || *i <= j).collect();
        let scores: Vec<f64> = visible
            .iter()
            .map(|&i| (0..q.rows()).map(|r| k.get(r, i) * q.get(r, j)).sum::<f64>() / d_k.sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for (&i, s) in visible.iter().zip(&scores) {
            let w = (s - m).exp() / z;
            for r in 0..v.rows() {
                out[j][r] += w * v.get(r, i);
            }
        }
    }
    Matrix::from_columns(&out).unwrap()
}

fn naive_multi_head(x: &Matrix, y: &Matrix, p: &MultiHeadParams, causal: bool) -> Matrix {
    let heads: Vec<Matrix> = p.heads.iter().map(|h| naive_attention(x, y, h, causal)).collect();
    let rows: usize = heads.iter().map(Matrix::rows).sum();
    let cat = Matrix::from_fn(rows, x.cols(), |r, c| {
        let mut r = r;
        for h in &heads {
            if r < h.rows() {
                return h.get(r, c);
            }
            r -= h.rows();
        }
        unreachable!()
    });
    p.wo.matmul(&cat).unwrap()
}

#[test]
fn attention_matches_reference_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..20 {
        let d = r.gen_range(2..=8);
        let (n, m) = (r.gen_range(1..=5), r.gen_range(1..=5));
        let p = AttentionParams::init(seed, d, r.gen_range(1..=d), r.gen_range(1..=d));
        let x = rand_matrix(&mut r, d, n);
        let y = rand_matrix(&mut r, d, m);
        assert_close(&self_attention(&x, &p).unwrap(), &naive_attention(&x, &x, &p, false), 1e-12);
        assert_close(
            &wintent::attention::masked_self_attention(&x, &p).unwrap(),
            &naive_attention(&x, &x, &p, true),
            1e-12,
        );
        assert_close(&cross_attention(&x, &y, &p).unwrap(), &naive_attention(&x, &y, &p, false), 1e-12);
    }
}

#[test]
fn multi_head_matches_reference_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..20 {
        let heads = [1, 2, 4][seed as usize % 3];
        let d = 8;
        let p = MultiHeadParams::init(seed, d, heads).unwrap();
        let x = rand_matrix(&mut r, d, 4);
        let y = rand_matrix(&mut r, d, 3);
        for masked in [false, true] {
            assert_close(&multi_head(&x, &p, masked).unwrap(), &naive_multi_head(&x, &x, &p, masked), 1e-12);
        }
        assert_close(&multi_head_cross(&x, &y, &p).unwrap(), &naive_multi_head(&x, &y, &p, false), 1e-12);
    }
}

#[test]
fn single_query_attends_to_itself_only_when_masked() {
    let p = AttentionParams::init(3, 4, 4, 4);
    let x = Matrix::from_fn(4, 3, |r, c| (r + 2 * c) as f64 * 0.1);
    let masked = wintent::attention::masked_self_attention(&x, &p).unwrap();
    let v0 = p.wv.matmul(&x).unwrap().col(0);
    for (a, b) in masked.col(0).iter().zip(&v0) {
        assert!((a - b).abs() < 1e-15);
    }
}

fn column_norm(h: &Matrix, gamma: f64, beta: f64, eps: f64) -> Matrix {
    let cols: Vec<Vec<f64>> = (0..h.cols()).map(|c| layer_norm(&h.col(c), gamma, beta, eps).unwrap()).collect();
    Matrix::from_columns(&cols).unwrap()
}

fn stack(act: Activation) -> StackConfig {
    StackConfig {
        n_layers: 2,
        d_model: 8,
        n_heads_self: 2,
        n_heads_cross: 4,
        d_ffn_inner: 16,
        activation: act,
        layer_norm_epsilon: 1e-5,
    }
}

#[test]
fn encoder_is_the_composition_of_its_sublayers() {
    let mut r = ChaCha8Rng::seed_from_u64(13);
    for act in [Activation::Relu, Activation::Gelu, Activation::Geglu] {
        let p = EncoderParams::init(stack(act), 5).unwrap();
        let x = rand_matrix(&mut r, 8, 5);
        let eps = p.config.layer_norm_epsilon;
        let mut h = x.clone();
        for l in &p.layers {
            let a = naive_multi_head(&h, &h, &l.attention, false);
            h = column_norm(&h.add(&a).unwrap(), l.ln1.gamma, l.ln1.beta, eps);
            let f = mlp(&h, &l.ffn).unwrap();
            h = column_norm(&h.add(&f).unwrap(), l.ln2.gamma, l.ln2.beta, eps);
        }
        assert_close(&encode(&x, &p).unwrap(), &h, 1e-12);
    }
}

#[test]
fn decoder_is_the_composition_of_its_sublayers() {
    let mut r = ChaCha8Rng::seed_from_u64(14);
    let p = DecoderParams::init(stack(Activation::Geglu), 6).unwrap();
    let s = rand_matrix(&mut r, 8, 3);
    let ctx = rand_matrix(&mut r, 8, 6);
    let eps = p.config.layer_norm_epsilon;
    let mut h = s.clone();
    for l in &p.layers {
        let a = naive_multi_head(&h, &h, &l.self_attention, true);
        h = column_norm(&h.add(&a).unwrap(), l.ln1.gamma, l.ln1.beta, eps);
        let c = naive_multi_head(&h, &ctx, &l.cross_attention, false);
        h = column_norm(&h.add(&c).unwrap(), l.ln2.gamma, l.ln2.beta, eps);
        let f = mlp(&h, &l.ffn).unwrap();
        h = column_norm(&h.add(&f).unwrap(), l.ln3.gamma, l.ln3.beta, eps);
    }
    assert_close(&decode_step(&s, &ctx, &p).unwrap(), &h, 1e-12);
}

#[test]
fn rep_vectors() {
    let h = Matrix::from_rows(&[vec![1.0, 5.0, -2.0], vec![0.0, -1.0, 3.0]]).unwrap();
    assert_eq!(rep_vector(&h, &RepLayout::Text, true).unwrap(), vec![1.0, 0.0]);
    assert_eq!(rep_vector(&h, &RepLayout::Image, false).unwrap(), vec![5.0, 3.0]);
}

#[test]
fn loss_hand_cases() {
    let w = LossWeights::default();
    assert_eq!(bound(0.5, 1.0, 0.5), 0.5);
    let inner = 3.0 * std::f64::consts::LN_2;
    assert!((bound(inner, 1.0, 0.5) - 1.0 / (1.0 + (0.5 - inner).exp())).abs() < 1e-15);
    let seq = sequence_loss(2.0 / 3.0, 3, 4, &w).unwrap();
    assert!((seq - 0.3).abs() < 1e-12);
    assert!(sequence_loss(1.0, 2, 2, &w).unwrap().abs() < 1e-15);

    let t = |i: Vec<f64>| SignalTriple::new(i, vec![0.0], vec![0.0], Stage::Intention).unwrap();
    assert_eq!(contrastive_loss(&[t(vec![1.0]), t(vec![1.0])]), 1.0);
    assert_eq!(contrastive_loss(&[t(vec![1.0])]), 0.0);
    let q = contrastive_loss(&[t(vec![4f64.ln().sqrt()]), t(vec![0.0])]);
    assert!((q - 0.25).abs() < 1e-15);

    // Two recorded steps, one true intention: accept at t=1, stop at t=2.
    let l = head_loss(&[1.0, 0.25], 1, 1);
    assert!((l - (-(0.75f64).ln()) / 2.0).abs() < 1e-15);
}
