use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sarcasm_core::tensor::{grad_check_with, Stencil, Tape, Tensor};

const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

/// Random `[a, b, c]` with every extent in 1..=4, 1..=8, 1..=8.
fn shape3(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=8)]
}

fn check<F>(f: F, inputs: &[Tensor]) -> Result<(), TestCaseError>
where
    F: Fn(&mut Tape<'static>, &[sarcasm_core::tensor::Var]) -> sarcasm_core::Result<sarcasm_core::tensor::Var>,
{
    let rep = grad_check_with(f, inputs, 1e-3, Stencil::Central4).unwrap();
    prop_assert!(rep.max_rel_error < TOL, "{rep:?}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_ops_pass_grad_check(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = shape3(&mut rng);
        let a = random(&s, &mut rng);
        let b = random(&[s[2]], &mut rng);
        check(|t, v| {
            let x = t.add(v[0], v[1])?;
            let y = t.mul(x, v[0])?;
            let z = t.scale(y, 0.7);
            let g = t.gelu(z);
            Ok(t.mean(g))
        }, &[a, b])?;
    }

    #[test]
    fn matmul_and_layout_ops_pass_grad_check(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = shape3(&mut rng);
        let k = rng.random_range(1..=8);
        let a = random(&s, &mut rng);
        let w = random(&[s[2], k], &mut rng);
        let w2 = random(&[s[2], k], &mut rng);
        let start = rng.random_range(0..s[1]);
        check(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.permute(y, &[1, 0, 2])?;
            let y = t.narrow(y, 0, start, 1)?;
            let y = t.reshape(y, &[s[0] * k])?;
            let y = t.mul(y, y)?;
            let yt = t.transpose(v[2])?;
            let z = t.mul(yt, yt)?;
            let zs = t.sum(z);
            let ys = t.sum(y);
            t.add(ys, zs)
        }, &[a, w, w2])?;
    }

    #[test]
    fn softmax_layer_norm_pass_grad_check(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = shape3(&mut rng);
        let d = s[2];
        // Columns spaced 0.5 apart keep layer-norm variance away from zero,
        // where the map approaches a step function.
        let x = Tensor::from_fn(&s, |i| 0.5 * (i % d) as f64 + rng.random_range(-0.2..0.2));
        let gain = random(&[d], &mut rng);
        let bias = random(&[d], &mut rng);
        let weights = random(&s, &mut rng);
        // Keep column 0 unmasked so no row is fully masked.
        let mask = Tensor::from_fn(&[1, 1, d], |j| if j == 0 || rng.random::<bool>() { 1.0 } else { 0.0 });
        check(|t, v| {
            let p = t.softmax_masked(v[0], &mask)?;
            let w = t.constant(weights.clone());
            let p = t.mul(p, w)?;
            let n = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let n = t.mul(n, n)?;
            let a = t.sum(p);
            let b = t.mean(n);
            t.add(a, b)
        }, &[x, gain, bias])?;
    }

    #[test]
    fn embedding_cross_entropy_dropout_pass_grad_check(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(2..=8);
        let b = rng.random_range(1..=4);
        let table = random(&[rows, 2], &mut rng);
        let ids: Vec<usize> = (0..b).map(|_| rng.random_range(0..rows)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
        let drop_seed = rng.random::<u64>();
        check(|t, v| {
            let e = t.embedding(v[0], &ids, &[b])?;
            let e = t.dropout(e, 0.3, &mut ChaCha8Rng::seed_from_u64(drop_seed))?;
            t.cross_entropy(e, &labels)
        }, &[table])?;
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_are_zero(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = shape3(&mut rng);
        let d = s[2];
        let mask = Tensor::from_fn(&[s[0], 1, d], |i| if i % d == 0 || rng.random::<bool>() { 1.0 } else { 0.0 });
        let x = Tensor::from_fn(&s, |_| rng.random_range(-30.0..30.0));
        let mut t = Tape::new();
        let v = t.constant(x);
        let p = t.softmax_masked(v, &mask).unwrap();
        for (r, row) in t.value(p).data().chunks(d).enumerate() {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            let m = &mask.data()[(r / s[1]) * d..(r / s[1] + 1) * d];
            for (w, &keep) in row.iter().zip(m) {
                if keep == 0.0 {
                    prop_assert_eq!(*w, 0.0);
                }
            }
        }
    }

    #[test]
    fn backward_is_linear(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = shape3(&mut rng);
        let x = random(&s, &mut rng);
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), true);
            let g = t.gelu(v);
            let fsum = t.sum(g);
            let sq = t.mul(v, v).unwrap();
            let gsum = t.mean(sq);
            let out = match which {
                0 => fsum,
                1 => gsum,
                _ => t.add(fsum, gsum).unwrap(),
            };
            t.backward(out).unwrap();
            t.grad(v).unwrap().to_vec()
        };
        let (f, g, fg) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..f.len() {
            prop_assert!((fg[i] - (f[i] + g[i])).abs() <= 1e-12);
        }
    }
}
