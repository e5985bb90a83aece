use super::AttnIds;
use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Var};

/// Attention values together with the row-stochastic weight matrix.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub values: Var,
    pub weights: Var,
}

/// `softmax(Q K^T / sqrt(d_k)) V`, with disallowed `(query, key)` pairs
/// (`mask[i*m + j] == false`) given zero weight.
pub fn scaled_dot_attention<F: Float>(
    g: &mut Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let dk = g.shape(q)[1];
    if g.shape(k).len() != 2 || g.shape(k)[1] != dk {
        return Err(Error::shape("attention q/k", g.shape(q), g.shape(k)));
    }
    if g.shape(k)[0] != g.shape(v)[0] {
        return Err(Error::shape("attention k/v", g.shape(k), g.shape(v)));
    }
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, F::one() / F::c(dk as f64).sqrt());
    let weights = g.masked_softmax(scaled, 1, mask)?;
    let values = g.matmul(weights, v)?;
    Ok(AttentionOutput { values, weights })
}

/// Multi-head attention: per-head column blocks of the `W^Q`, `W^K`, `W^V`
/// projections, concatenated heads, then the `W^O` projection.
pub fn multi_head_attention<F: Float>(
    g: &mut Graph<F>,
    p: &[Var],
    ids: AttnIds,
    num_heads: usize,
    x_q: Var,
    x_kv: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = g.shape(x_q)[1];
    if g.shape(x_kv)[1] != d {
        return Err(Error::shape("multi_head_attention", g.shape(x_q), g.shape(x_kv)));
    }
    let dh = d / num_heads;
    let q = g.matmul(x_q, p[ids.wq])?;
    let k = g.matmul(x_kv, p[ids.wk])?;
    let v = g.matmul(x_kv, p[ids.wv])?;
    let heads = if num_heads == 1 {
        vec![scaled_dot_attention(g, q, k, v, mask)?.values]
    } else {
        let mut heads = Vec::with_capacity(num_heads);
        for h in 0..num_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            heads.push(scaled_dot_attention(g, qh, kh, vh, mask)?.values);
        }
        heads
    };
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat(&heads, 1)?
    };
    g.matmul(cat, p[ids.wo])
}

/// Lower-triangular `[m, m]` mask: query `t` may attend to keys `<= t`.
pub fn causal_mask(m: usize) -> Vec<bool> {
    (0..m).flat_map(|i| (0..m).map(move |j| j <= i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_element_returns_value() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 1], &[0.37]).unwrap());
        let out = scaled_dot_attention(&mut g, x, x, x, None).unwrap();
        assert_abs_diff_eq!(g.value(out.values).item(), 0.37, epsilon = 1e-15);
    }

    #[test]
    fn identical_keys_give_column_mean_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let q = g.constant(random(&[2, 3], &mut rng));
        let k = g.constant(Tensor::from_f64(&[4, 3], &[0.2, -0.5, 0.9].repeat(4)).unwrap());
        let vt = random(&[4, 2], &mut rng);
        let v = g.constant(vt.clone());
        let out = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        for c in 0..2 {
            let mean = (0..4).map(|r| vt.at2(r, c)).sum::<f64>() / 4.0;
            for r in 0..2 {
                assert_abs_diff_eq!(g.value(out.values).at2(r, c), mean, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_query_gives_uniform_weights() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let k = g.constant(Tensor::from_f64(&[3, 2], &[0.0, 1.0, 0.0, -2.0, 0.0, 5.0]).unwrap());
        let v = g.constant(Tensor::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap());
        let out = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        for &w in g.value(out.weights).data() {
            assert_abs_diff_eq!(w, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn weights_rows_sum_to_one_and_respect_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let q = g.constant(random(&[3, 4], &mut rng));
        let k = g.constant(random(&[3, 4], &mut rng));
        let v = g.constant(random(&[3, 2], &mut rng));
        let mask = causal_mask(3);
        let out = scaled_dot_attention(&mut g, q, k, v, Some(&mask)).unwrap();
        let w = g.value(out.weights);
        for r in 0..3 {
            assert_abs_diff_eq!(w.row(r).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            for c in r + 1..3 {
                assert_eq!(w.at2(r, c), 0.0);
            }
        }
    }

    #[test]
    fn fully_masked_query_row_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(&[2, 2]));
        let mask = [true, true, false, false];
        assert!(scaled_dot_attention(&mut g, x, x, x, Some(&mask)).is_err());
    }

    fn attn_params(g: &mut Graph<f64>, d: usize, rng: &mut ChaCha8Rng) -> (Vec<Var>, AttnIds) {
        let p: Vec<Var> = (0..4).map(|_| g.constant(random(&[d, d], rng))).collect();
        (
            p,
            AttnIds {
                wq: 0,
                wk: 1,
                wv: 2,
                wo: 3,
            },
        )
    }

    #[test]
    fn one_head_is_attention_between_linear_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let (p, ids) = attn_params(&mut g, 4, &mut rng);
        let x = g.constant(random(&[3, 4], &mut rng));
        let y = g.constant(random(&[5, 4], &mut rng));
        let mh = multi_head_attention(&mut g, &p, ids, 1, x, y, None).unwrap();
        let q = g.matmul(x, p[0]).unwrap();
        let k = g.matmul(y, p[1]).unwrap();
        let v = g.matmul(y, p[2]).unwrap();
        let a = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        let manual = g.matmul(a.values, p[3]).unwrap();
        assert_eq!(g.value(mh).data(), g.value(manual).data());
    }

    #[test]
    fn output_shape_follows_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let (p, ids) = attn_params(&mut g, 8, &mut rng);
        for (n, m) in [(1, 1), (2, 7), (6, 3)] {
            let x = g.constant(random(&[n, 8], &mut rng));
            let y = g.constant(random(&[m, 8], &mut rng));
            let out = multi_head_attention(&mut g, &p, ids, 4, x, y, None).unwrap();
            assert_eq!(g.shape(out), &[n, 8]);
        }
    }

    #[test]
    fn permuting_keys_and_values_together_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let (p, ids) = attn_params(&mut g, 8, &mut rng);
        let x = g.constant(random(&[3, 8], &mut rng));
        let yt = random(&[5, 8], &mut rng);
        let perm = [3, 0, 4, 2, 1];
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| yt.row(r).to_vec()).collect();
        let y = g.constant(yt.clone());
        let yp = g.constant(Tensor::new(vec![5, 8], permuted).unwrap());
        let a = multi_head_attention(&mut g, &p, ids, 2, x, y, None).unwrap();
        let b = multi_head_attention(&mut g, &p, ids, 2, x, yp, None).unwrap();
        for (u, v) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
    }
}
