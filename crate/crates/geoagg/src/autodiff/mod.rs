//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Everything is 64-bit and deterministic: identical inputs replay to
//! bit-identical values and gradients. The op set is exactly what the
//! aggregation model and its training loop need, nothing more.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: incompatible shapes {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("softmax lane has every position masked; callers must guarantee at least one context point")]
    FullyMaskedRow,
    #[error("backward() requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward() already ran on this tape; record a fresh tape per pass")]
    BackwardTwice,
    #[error("concat of zero tensors")]
    EmptyConcat,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    /// Central finite differences of `f` at `x`, h = 1e-5.
    fn finite_diff(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor) -> Vec<f64> {
        let h = 1e-5;
        let mut out = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            out.push((f(&xp) - f(&xm)) / (2.0 * h));
        }
        out
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64], what: &str) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs());
            let err = if denom > 1e-6 {
                (a - n).abs() / denom
            } else {
                (a - n).abs()
            };
            assert!(
                err < 1e-4,
                "{what}[{i}]: analytic {a} vs numeric {n} (err {err:.3e})"
            );
        }
    }

    // ── matmul ───────────────────────────────────────────────────────

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let x = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let a = tape.input(&eye);
        let b = tape.input(&x);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), x.data());
    }

    #[test]
    fn matmul_ones() {
        let mut tape = Tape::new();
        let a = tape.input(&Tensor::full(vec![2, 3], 1.0));
        let b = tape.input(&Tensor::full(vec![3, 2], 1.0));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ta = rand_tensor(&mut rng, &[4, 4]);
        let tb = rand_tensor(&mut rng, &[4, 4]);
        // Oracle: naive triple loop, no shortcuts.
        let mut expect = vec![0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += ta.data()[i * 4 + k] * tb.data()[k * 4 + j];
                }
                expect[i * 4 + j] = s;
            }
        }
        let mut tape = Tape::new();
        let a = tape.input(&ta);
        let b = tape.input(&tb);
        let c = tape.matmul(a, b).unwrap();
        for (got, want) in tape.data(c).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(&Tensor::zeros(vec![2, 3]));
        let b = tape.input(&Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    // ── masked softmax ───────────────────────────────────────────────

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::new();
        let l = tape.input(&Tensor::matrix(1, 4, vec![0.7; 4]).unwrap());
        let m = tape.input(&Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
        let w = tape.masked_softmax(l, m, 1).unwrap();
        for &v in tape.data(w) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_survivor() {
        let mut tape = Tape::new();
        let l = tape.input(&Tensor::vector(&[0.0, 0.0]));
        let m = tape.input(&Tensor::vector(&[0.0, 1.0]));
        let w = tape.masked_softmax(l, m, 0).unwrap();
        assert_eq!(tape.data(w), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = rand_tensor(&mut rng, &[8]);
        let mask = Tensor::vector(&[0., 1., 0., 0., 1., 0., 1., 0.]);
        // Oracle: direct exp/sum over unmasked entries.
        let mut expect = vec![0.0; 8];
        let mut denom = 0.0;
        for k in 0..8 {
            if mask.data()[k] < 0.5 {
                denom += logits.data()[k].exp();
            }
        }
        for k in 0..8 {
            if mask.data()[k] < 0.5 {
                expect[k] = logits.data()[k].exp() / denom;
            }
        }
        let mut tape = Tape::new();
        let l = tape.input(&logits);
        let m = tape.input(&mask);
        let w = tape.masked_softmax(l, m, 0).unwrap();
        for (got, want) in tape.data(w).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_masked_positions_are_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let logits = rand_tensor(&mut rng, &[2, 6]);
            let mask = Tensor::vector(&[1., 0., 0., 1., 0., 1.]);
            let mut tape = Tape::new();
            let l = tape.input(&logits);
            let m = tape.input(&mask);
            let w = tape.masked_softmax(l, m, 1).unwrap();
            for row in 0..2 {
                let r = &tape.data(w)[row * 6..(row + 1) * 6];
                assert_eq!(r[0], 0.0);
                assert_eq!(r[3], 0.0);
                assert_eq!(r[5], 0.0);
                let sum: f64 = r.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let mut tape = Tape::new();
        let l = tape.input(&Tensor::vector(&[1.0, 2.0]));
        let m = tape.input(&Tensor::vector(&[1.0, 1.0]));
        assert!(matches!(
            tape.masked_softmax(l, m, 0),
            Err(AdError::FullyMaskedRow)
        ));
    }

    // ── tanhshrink ───────────────────────────────────────────────────

    #[test]
    fn tanhshrink_values() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(&[0.0, 20.0, 0.5]));
        let y = tape.tanhshrink(x);
        let d = tape.data(y);
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 19.0).abs() < 1e-8, "saturation: {}", d[1]);
        // Oracle: direct scalar evaluation.
        let expect = 0.5 - 0.5f64.tanh();
        assert!((d[2] - expect).abs() < 1e-15);
    }

    // ── elementwise / structural ─────────────────────────────────────

    #[test]
    fn concat_keeps_order_and_slice_round_trips() {
        let mut tape = Tape::new();
        let a = tape.input(&Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = tape.input(&Tensor::matrix(2, 3, vec![5., 6., 7., 8., 9., 10.]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 5]);
        assert_eq!(tape.data(c), &[1., 2., 5., 6., 7., 3., 4., 8., 9., 10.]);
        let a2 = tape.narrow(c, 1, 0, 2).unwrap();
        let b2 = tape.narrow(c, 1, 2, 3).unwrap();
        assert_eq!(tape.data(a2), tape.data(a));
        assert_eq!(tape.data(b2), tape.data(b));
        let back = tape.concat(&[a2, b2], 1).unwrap();
        assert_eq!(tape.data(back), tape.data(c));
    }

    #[test]
    fn mean_of_three() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(&[1.0, 2.0, 3.0]));
        let m = tape.mean_all(x);
        assert_eq!(tape.data(m), &[2.0]);
    }

    #[test]
    fn broadcast_add_row_and_col() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::matrix(2, 3, vec![0.; 6]).unwrap());
        let row = tape.input(&Tensor::vector(&[1., 2., 3.]));
        let col = tape.input(&Tensor::matrix(2, 1, vec![10., 20.]).unwrap());
        let y = tape.add(x, row).unwrap();
        let z = tape.add(y, col).unwrap();
        assert_eq!(tape.data(z), &[11., 12., 13., 21., 22., 23.]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.input(&Tensor::vector(&[1., 2., 3.]));
        let b = tape.input(&Tensor::vector(&[1., 2.]));
        assert!(tape.add(a, b).is_err());
    }

    // ── backward ─────────────────────────────────────────────────────

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::matrix(2, 3, vec![5.; 6]).unwrap());
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_square_sum() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(&[1.0, 2.0]));
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum_all(xx);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(&[1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(AdError::NonScalarLoss { .. })
        ));
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(&[1.0, 2.0]));
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(AdError::BackwardTwice)));
    }

    /// Every differentiable op against central finite differences.
    #[test]
    fn gradcheck_each_operation() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);

        type Builder = fn(&mut Tape, Var) -> Var;
        let unary_cases: Vec<(&str, &[usize], Builder)> = vec![
            ("neg", &[3, 2], |t, x| t.neg(x)),
            ("abs", &[5], |t, x| t.abs(x)),
            ("tanhshrink", &[4], |t, x| t.tanhshrink(x)),
            ("softplus", &[4], |t, x| t.softplus(x)),
            ("scale", &[4], |t, x| t.scale(x, -1.7)),
            ("offset", &[4], |t, x| t.offset(x, 0.3)),
            ("mean", &[6], |t, x| t.mean_all(x)),
            ("transpose", &[3, 4], |t, x| t.transpose(x).unwrap()),
            ("reshape", &[2, 6], |t, x| t.reshape(x, vec![3, 4]).unwrap()),
            ("narrow", &[3, 4], |t, x| t.narrow(x, 1, 1, 2).unwrap()),
            ("pair_rotate", &[2, 4], |t, x| t.pair_rotate(x).unwrap()),
        ];
        for (name, shape, build) in unary_cases {
            let x0 = rand_tensor(&mut rng, shape);
            let mut f = |x: &Tensor| {
                let mut tape = Tape::new();
                let v = tape.input(x);
                let y = build(&mut tape, v);
                let y2 = tape.mul(y, y).unwrap();
                let s = tape.sum_all(y2);
                tape.data(s)[0]
            };
            let numeric = finite_diff(&mut f, &x0);
            let mut tape = Tape::new();
            let v = tape.param(&x0);
            let y = build(&mut tape, v);
            let y2 = tape.mul(y, y).unwrap();
            let s = tape.sum_all(y2);
            tape.backward(s).unwrap();
            assert_grad_close(tape.grad(v).unwrap().data(), &numeric, name);
        }

        // sqrt needs positive input
        {
            let mut x0 = rand_tensor(&mut rng, &[5]);
            for v in x0.data_mut() {
                *v = v.abs() + 0.5;
            }
            let mut f = |x: &Tensor| {
                let mut tape = Tape::new();
                let v = tape.input(x);
                let y = tape.sqrt(v);
                let s = tape.sum_all(y);
                tape.data(s)[0]
            };
            let numeric = finite_diff(&mut f, &x0);
            let mut tape = Tape::new();
            let v = tape.param(&x0);
            let y = tape.sqrt(v);
            let s = tape.sum_all(y);
            tape.backward(s).unwrap();
            assert_grad_close(tape.grad(v).unwrap().data(), &numeric, "sqrt");
        }

        // binary ops with broadcasting, both sides
        for kind in ["add", "sub", "mul", "div"] {
            let a0 = rand_tensor(&mut rng, &[3, 4]);
            let mut b0 = rand_tensor(&mut rng, &[4]);
            if kind == "div" {
                for v in b0.data_mut() {
                    *v = v.abs() + 0.5;
                }
            }
            let run = |a: &Tensor, b: &Tensor| {
                let mut tape = Tape::new();
                let va = tape.input(a);
                let vb = tape.input(b);
                let y = match kind {
                    "add" => tape.add(va, vb),
                    "sub" => tape.sub(va, vb),
                    "mul" => tape.mul(va, vb),
                    _ => tape.div(va, vb),
                }
                .unwrap();
                let y2 = tape.mul(y, y).unwrap();
                let s = tape.sum_all(y2);
                tape.data(s)[0]
            };
            let mut fa = |x: &Tensor| run(x, &b0);
            let mut fb = |x: &Tensor| run(&a0, x);
            let na = finite_diff(&mut fa, &a0);
            let nb = finite_diff(&mut fb, &b0);
            let mut tape = Tape::new();
            let va = tape.param(&a0);
            let vb = tape.param(&b0);
            let y = match kind {
                "add" => tape.add(va, vb),
                "sub" => tape.sub(va, vb),
                "mul" => tape.mul(va, vb),
                _ => tape.div(va, vb),
            }
            .unwrap();
            let y2 = tape.mul(y, y).unwrap();
            let s = tape.sum_all(y2);
            tape.backward(s).unwrap();
            assert_grad_close(tape.grad(va).unwrap().data(), &na, kind);
            assert_grad_close(tape.grad(vb).unwrap().data(), &nb, &format!("{kind}-rhs"));
        }

        // matmul, both operands
        {
            let a0 = rand_tensor(&mut rng, &[3, 4]);
            let b0 = rand_tensor(&mut rng, &[4, 2]);
            let run = |a: &Tensor, b: &Tensor| {
                let mut tape = Tape::new();
                let va = tape.input(a);
                let vb = tape.input(b);
                let y = tape.matmul(va, vb).unwrap();
                let y2 = tape.mul(y, y).unwrap();
                let s = tape.sum_all(y2);
                tape.data(s)[0]
            };
            let mut fa = |x: &Tensor| run(x, &b0);
            let mut fb = |x: &Tensor| run(&a0, x);
            let na = finite_diff(&mut fa, &a0);
            let nb = finite_diff(&mut fb, &b0);
            let mut tape = Tape::new();
            let va = tape.param(&a0);
            let vb = tape.param(&b0);
            let y = tape.matmul(va, vb).unwrap();
            let y2 = tape.mul(y, y).unwrap();
            let s = tape.sum_all(y2);
            tape.backward(s).unwrap();
            assert_grad_close(tape.grad(va).unwrap().data(), &na, "matmul-a");
            assert_grad_close(tape.grad(vb).unwrap().data(), &nb, "matmul-b");
        }

        // masked softmax + concat through a small composite
        {
            let x0 = rand_tensor(&mut rng, &[2, 5]);
            let mask = Tensor::vector(&[0., 1., 0., 0., 1.]);
            let weights = rand_tensor(&mut rng, &[2, 5]);
            let run = |x: &Tensor| {
                let mut tape = Tape::new();
                let v = tape.input(x);
                let m = tape.input(&mask);
                let wc = tape.input(&weights);
                let sm = tape.masked_softmax(v, m, 1).unwrap();
                let left = tape.narrow(sm, 1, 0, 2).unwrap();
                let right = tape.narrow(sm, 1, 2, 3).unwrap();
                let joined = tape.concat(&[right, left], 1).unwrap();
                let weighted = tape.mul(joined, wc).unwrap();
                let s = tape.sum_all(weighted);
                tape.data(s)[0]
            };
            let mut f = |x: &Tensor| run(x);
            let numeric = finite_diff(&mut f, &x0);
            let mut tape = Tape::new();
            let v = tape.param(&x0);
            let m = tape.input(&mask);
            let wc = tape.input(&weights);
            let sm = tape.masked_softmax(v, m, 1).unwrap();
            let left = tape.narrow(sm, 1, 0, 2).unwrap();
            let right = tape.narrow(sm, 1, 2, 3).unwrap();
            let joined = tape.concat(&[right, left], 1).unwrap();
            let weighted = tape.mul(joined, wc).unwrap();
            let s = tape.sum_all(weighted);
            tape.backward(s).unwrap();
            assert_grad_close(tape.grad(v).unwrap().data(), &numeric, "masked_softmax");
        }
    }

    #[test]
    fn gradient_accumulates_across_consumers() {
        // y = sum(x·x) + 3·sum(x)  ⇒  dy/dx = 2x + 3
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(&[1.5, -0.5]));
        let xx = tape.mul(x, x).unwrap();
        let s1 = tape.sum_all(xx);
        let s2 = tape.sum_all(x);
        let s2s = tape.scale(s2, 3.0);
        let loss = tape.add(s1, s2s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0, 2.0]);
    }

    #[test]
    fn identical_seeds_replay_bit_identically() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let a0 = rand_tensor(&mut rng, &[4, 4]);
            let b0 = rand_tensor(&mut rng, &[4, 4]);
            let mut tape = Tape::new();
            let a = tape.param(&a0);
            let b = tape.param(&b0);
            let c = tape.matmul(a, b).unwrap();
            let t = tape.tanhshrink(c);
            let s = tape.mean_all(t);
            tape.backward(s).unwrap();
            (
                tape.data(s).to_vec(),
                tape.grad(a).unwrap().data().to_vec(),
                tape.grad(b).unwrap().data().to_vec(),
            )
        };
        let (v1, ga1, gb1) = run();
        let (v2, ga2, gb2) = run();
        assert_eq!(v1, v2);
        assert_eq!(ga1, ga2);
        assert_eq!(gb1, gb2);
    }
}
