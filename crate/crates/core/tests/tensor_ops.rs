use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segmote_core::tensor::{grad_check, topk_rows};
use segmote_core::{Result, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts an arbitrary output against fixed random weights so every
/// output coordinate contributes to the scalar.
fn contract(tp: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tp.shape(y));
    let w = tp.constant(w);
    let p = tp.mul(y, w)?;
    Ok(tp.sum(p))
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_examples() {
    let mut tp = Tape::<f64>::new();
    let a = tp.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tp.constant(Tensor::from_f64([2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap());
    let c = tp.matmul(a, b).unwrap();
    assert_eq!(tp.value(c).data(), naive_matmul(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 1.0, 0.0], 2, 2, 2).as_slice());
    assert_eq!(tp.value(c).data(), &[2.0, 1.0, 4.0, 3.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let xv = tp.constant(x.clone());
    let id = tp.constant(Tensor::identity(5));
    let y = tp.matmul(xv, id).unwrap();
    assert_eq!(tp.value(y).data(), x.data());
    let z = tp.constant(Tensor::zeros([5, 4]));
    let y = tp.matmul(xv, z).unwrap();
    assert!(tp.value(y).data().iter().all(|&v| v == 0.0));

    let bad = tp.constant(Tensor::zeros([4, 4]));
    assert!(tp.matmul(xv, bad).is_err());
}

#[test]
fn matmul_matches_naive_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (m, k, n) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let mut tp = Tape::new();
        let (av, bv) = (tp.constant(a.clone()), tp.constant(b.clone()));
        let c = tp.matmul(av, bv).unwrap();
        let oracle = naive_matmul(a.data(), b.data(), m, k, n);
        for (x, y) in tp.value(c).data().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let mut tp = Tape::<f64>::new();
    let x = tp.constant(Tensor::from_f64([1, 2], &[0.0, 0.0]).unwrap());
    let y = tp.softmax(x);
    assert_eq!(tp.value(y).data(), &[0.5, 0.5]);
    let x = tp.constant(Tensor::from_f64([1], &[3.7]).unwrap());
    let y = tp.softmax(x);
    assert_eq!(tp.value(y).data(), &[1.0]);
    let x = tp.constant(Tensor::from_f64([2], &[2.0, 1.0]).unwrap());
    let y = tp.softmax(x);
    let z = 2f64.exp() + 1f64.exp();
    let oracle = [2f64.exp() / z, 1f64.exp() / z];
    for (a, b) in tp.value(y).data().iter().zip(oracle) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((tp.value(y).data()[0] - 0.7311).abs() < 1e-4);
    assert!((tp.value(y).data()[1] - 0.2689).abs() < 1e-4);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tp = Tape::<f64>::new();
    let mut x = rand_tensor(&mut rng, &[50, 7]);
    x.data_mut().iter_mut().for_each(|v| *v *= 40.0);
    let xv = tp.constant(x);
    let y = tp.softmax(xv);
    for row in tp.value(y).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn softplus_examples() {
    let mut tp = Tape::<f64>::new();
    let x = tp.constant(Tensor::from_f64([4], &[0.0, 100.0, -50.0, 31.0]).unwrap());
    let y = tp.softplus(x);
    let v = tp.value(y).data();
    assert!((v[0] - 2f64.ln()).abs() < 1e-12);
    assert!((v[1] - 100.0).abs() < 1e-6);
    assert!(v[2] > 0.0);
    assert_eq!(v[3], 31.0);
}

#[test]
fn layer_norm_examples() {
    let mut tp = Tape::<f64>::new();
    let g = tp.constant(Tensor::full([2], 1.0));
    let b = tp.constant(Tensor::zeros([2]));
    let x = tp.constant(Tensor::from_f64([1, 2], &[1.0, 3.0]).unwrap());
    let y = tp.layer_norm(x, g, b).unwrap();
    // mean 2, var 1: (x - 2) / sqrt(1 + 1e-5)
    let s = (1.0f64 + 1e-5).sqrt();
    let v = tp.value(y).data();
    assert!((v[0] + 1.0 / s).abs() < 1e-12 && (v[1] - 1.0 / s).abs() < 1e-12);
    assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);

    let g3 = tp.constant(Tensor::from_f64([3], &[2.0, -1.0, 0.5]).unwrap());
    let b3 = tp.constant(Tensor::from_f64([3], &[0.1, 0.2, 0.3]).unwrap());
    let c = tp.constant(Tensor::full([1, 3], 4.2));
    let y = tp.layer_norm(c, g3, b3).unwrap();
    assert_eq!(tp.value(y).data(), &[0.1, 0.2, 0.3]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g8 = tp.constant(Tensor::full([8], 1.0));
    let b8 = tp.constant(Tensor::zeros([8]));
    let x = tp.constant(rand_tensor(&mut rng, &[5, 8]));
    let y = tp.layer_norm(x, g8, b8).unwrap();
    for row in tp.value(y).data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn backward_simple_rules() {
    let x0 = Tensor::<f64>::from_f64([3], &[1.0, -2.0, 0.5]).unwrap();
    let mut tp = Tape::new();
    let x = tp.leaf(x0.clone(), true);
    let s = tp.sum(x);
    tp.backward(s).unwrap();
    assert_eq!(tp.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tp = Tape::new();
    let x = tp.leaf(x0.clone(), true);
    let sq = tp.mul(x, x).unwrap();
    let s = tp.sum(sq);
    tp.backward(s).unwrap();
    assert_eq!(tp.grad(x).unwrap(), &[2.0, -4.0, 1.0]);

    let mut tp = Tape::new();
    let x = tp.leaf(x0, true);
    assert!(tp.backward(x).is_err());
}

#[test]
fn backward_accumulates_across_uses() {
    let mut tp = Tape::<f64>::new();
    let x = tp.leaf(Tensor::from_f64([2], &[1.5, -0.5]).unwrap(), true);
    let a = tp.scale(x, 3.0);
    let b = tp.add(a, x).unwrap();
    let c = tp.add(b, x).unwrap();
    let s = tp.sum(c);
    tp.backward(s).unwrap();
    assert_eq!(tp.grad(x).unwrap(), &[5.0, 5.0]);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tp = Tape::<f32>::new();
        let a = tp.constant(rand_tensor(&mut rng, &[6, 16]).cast());
        let w = tp.constant(rand_tensor(&mut rng, &[16, 16]).cast());
        let y = tp.matmul(a, w).unwrap();
        let y = tp.gelu(y);
        let y = tp.softmax(y);
        tp.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn topk_matches_full_sort_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.random_range(1..10);
        let k = rng.random_range(1..=n);
        // coarse values so ties occur
        let data: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-3..3))).collect();
        let t = Tensor::new([1, n], data.clone()).unwrap();
        let (vals, idx) = topk_rows(&t, k).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| data[b].partial_cmp(&data[a]).unwrap().then(a.cmp(&b)));
        assert_eq!(idx, order[..k]);
        assert_eq!(vals, order[..k].iter().map(|&i| data[i]).collect::<Vec<_>>());
    }
}

fn check(name: &str, x: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) {
    let err = grad_check(f, x, H).unwrap();
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let other = rand_tensor(&mut rng, &[3, 4]);
    let row = rand_tensor(&mut rng, &[4]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    let pos = Tensor::new([3, 4], other.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();

    check("add", &x, |t, x| {
        let o = t.constant(other.clone());
        let y = t.add(x, o)?;
        contract(t, y, 1)
    });
    check("sub", &x, |t, x| {
        let o = t.constant(other.clone());
        let y = t.sub(o, x)?;
        contract(t, y, 2)
    });
    check("mul", &x, |t, x| {
        let y = t.mul(x, x)?;
        contract(t, y, 3)
    });
    check("div numerator", &x, |t, x| {
        let o = t.constant(pos.clone());
        let y = t.div(x, o)?;
        contract(t, y, 4)
    });
    check("div denominator", &pos, |t, p| {
        let o = t.constant(x.clone());
        let y = t.div(o, p)?;
        contract(t, y, 5)
    });
    check("add_row x", &x, |t, x| {
        let r = t.constant(row.clone());
        let y = t.add_row(x, r)?;
        contract(t, y, 6)
    });
    check("add_row row", &row, |t, r| {
        let xv = t.constant(x.clone());
        let y = t.add_row(xv, r)?;
        contract(t, y, 7)
    });
    check("scale/add_const", &x, |t, x| {
        let y = t.scale(x, -2.5);
        let y = t.add_const(y, 0.3);
        contract(t, y, 8)
    });
    check("matmul lhs", &x, |t, x| {
        let wv = t.constant(w.clone());
        let y = t.matmul(x, wv)?;
        contract(t, y, 9)
    });
    check("matmul rhs", &w, |t, wv| {
        let xv = t.constant(x.clone());
        let y = t.matmul(xv, wv)?;
        contract(t, y, 10)
    });
    check("softmax", &x, |t, x| {
        let y = t.softmax(x);
        contract(t, y, 11)
    });
    check("softplus", &x, |t, x| {
        let y = t.softplus(x);
        contract(t, y, 12)
    });
    check("gelu", &x, |t, x| {
        let y = t.gelu(x);
        contract(t, y, 13)
    });
    check("sigmoid", &x, |t, x| {
        let y = t.sigmoid(x);
        contract(t, y, 14)
    });
    check("normal_cdf", &x, |t, x| {
        let y = t.normal_cdf(x);
        contract(t, y, 15)
    });
    check("sum_rows", &x, |t, x| {
        let y = t.sum_rows(x);
        contract(t, y, 16)
    });
    check("sum_last", &x, |t, x| {
        let y = t.sum_last(x);
        contract(t, y, 17)
    });
    check("mean/broadcast", &x, |t, x| {
        let m = t.mean(x);
        let b = t.broadcast(m, &[3, 4])?;
        let d = t.sub(x, b)?;
        let sq = t.mul(d, d)?;
        contract(t, sq, 18)
    });
    check("reshape", &x, |t, x| {
        let y = t.reshape(x, &[2, 6])?;
        let y = t.softmax(y);
        contract(t, y, 19)
    });
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[3, 6]);
    let g = rand_tensor(&mut rng, &[6]);
    let b = rand_tensor(&mut rng, &[6]);
    check("layer_norm x", &x, |t, x| {
        let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone()));
        let y = t.layer_norm(x, gv, bv)?;
        contract(t, y, 20)
    });
    check("layer_norm gain", &g, |t, gv| {
        let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
        let y = t.layer_norm(xv, gv, bv)?;
        contract(t, y, 21)
    });
    check("layer_norm bias", &b, |t, bv| {
        let (xv, gv) = (t.constant(x.clone()), t.constant(g.clone()));
        let y = t.layer_norm(xv, gv, bv)?;
        contract(t, y, 22)
    });
}

#[test]
fn structural_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 2, 4]);
    check("concat first", &a, |t, a| {
        let bv = t.constant(b.clone());
        let y = t.concat(&[a, bv])?;
        contract(t, y, 30)
    });
    check("concat second", &b, |t, bv| {
        let av = t.constant(a.clone());
        let y = t.concat(&[av, bv, av])?;
        contract(t, y, 31)
    });
    check("slice", &a, |t, a| {
        let y = t.slice(a, 1, 2)?;
        contract(t, y, 32)
    });
    let p = rand_tensor(&mut rng, &[2, 3, 2, 4]);
    check("permute_0213", &p, |t, p| {
        let y = t.permute_0213(p)?;
        contract(t, y, 33)
    });
    let m = rand_tensor(&mut rng, &[5, 3]);
    check("gather_rows", &m, |t, m| {
        let y = t.gather_rows(m, &[4, 0, 4, 2])?;
        contract(t, y, 34)
    });
    let src = rand_tensor(&mut rng, &[3, 3]);
    check("scatter_rows", &src, |t, s| {
        let y = t.scatter_rows(s, &[1, 4, 1], 5)?;
        contract(t, y, 35)
    });
    check("gather_cols", &m, |t, m| {
        let y = t.gather_cols(m, &[2, 0, 1, 1, 0, 0, 2, 1, 1, 2], 2)?;
        contract(t, y, 36)
    });
    let s2 = rand_tensor(&mut rng, &[5, 2]);
    check("scatter_cols", &s2, |t, s| {
        let y = t.scatter_cols(s, &[2, 0, 1, 3, 0, 1, 2, 3, 3, 1], 4)?;
        contract(t, y, 37)
    });
    check("scale_rows x", &m, |t, m| {
        let s = t.constant(Tensor::from_f64([5], &[0.5, -1.0, 2.0, 0.1, 3.0]).unwrap());
        let y = t.scale_rows(m, s)?;
        contract(t, y, 38)
    });
    let sv = rand_tensor(&mut rng, &[5]);
    check("scale_rows s", &sv, |t, s| {
        let mv = t.constant(m.clone());
        let y = t.scale_rows(mv, s)?;
        contract(t, y, 39)
    });
    let img = rand_tensor(&mut rng, &[2, 3, 4]);
    check("upsample_bilinear", &img, |t, x| {
        let y = t.upsample_bilinear(x, 7, 9)?;
        contract(t, y, 40)
    });
}

#[test]
fn bmm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 4, 5]);
    let bt = rand_tensor(&mut rng, &[2, 5, 4]);
    check("bmm lhs", &a, |t, a| {
        let bv = t.constant(b.clone());
        let y = t.bmm(a, bv, false)?;
        contract(t, y, 50)
    });
    check("bmm rhs", &b, |t, bv| {
        let av = t.constant(a.clone());
        let y = t.bmm(av, bv, false)?;
        contract(t, y, 51)
    });
    check("bmm lhs trans", &a, |t, a| {
        let bv = t.constant(bt.clone());
        let y = t.bmm(a, bv, true)?;
        contract(t, y, 52)
    });
    check("bmm rhs trans", &bt, |t, bv| {
        let av = t.constant(a.clone());
        let y = t.bmm(av, bv, true)?;
        contract(t, y, 53)
    });
}

#[test]
fn bmm_transposed_matches_explicit_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = rand_tensor(&mut rng, &[1, 2, 3]);
    let bt = rand_tensor(&mut rng, &[1, 4, 3]);
    let mut b = vec![0.0; 12];
    for i in 0..4 {
        for j in 0..3 {
            b[j * 4 + i] = bt.data()[i * 3 + j];
        }
    }
    let mut tp = Tape::new();
    let (av, btv) = (tp.constant(a.clone()), tp.constant(bt));
    let y = tp.bmm(av, btv, true).unwrap();
    let oracle = naive_matmul(a.data(), &b, 2, 3, 4);
    for (x, o) in tp.value(y).data().iter().zip(&oracle) {
        assert!((x - o).abs() < 1e-12);
    }
}

#[test]
fn upsample_preserves_constants_and_identity() {
    let mut tp = Tape::<f64>::new();
    let c = tp.constant(Tensor::full([1, 2, 2], 3.5));
    let y = tp.upsample_bilinear(c, 8, 8).unwrap();
    assert!(tp.value(y).data().iter().all(|&v| (v - 3.5).abs() < 1e-12));
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_tensor(&mut rng, &[1, 3, 3]);
    let xv = tp.constant(x.clone());
    let y = tp.upsample_bilinear(xv, 3, 3).unwrap();
    assert_eq!(tp.value(y).data(), x.data());
}
