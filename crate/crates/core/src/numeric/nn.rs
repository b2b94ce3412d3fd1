//! Layers assembled from tape primitives.

use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamStore};
use super::NumericError;

/// Affine map `x·W + b` for `x: n×d_in`, `W: d_in×d_out`, `b: 1×d_out`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, NumericError> {
    let (_, d_in) = tape.shape(x);
    let (w_in, d_out) = tape.shape(w);
    if d_in != w_in || tape.shape(b) != (1, d_out) {
        return Err(NumericError::ShapeMismatch(format!(
            "linear: x {:?}, W {:?}, b {:?}",
            tape.shape(x),
            tape.shape(w),
            tape.shape(b)
        )));
    }
    let y = tape.matmul(x, w);
    Ok(tape.add_row(y, b))
}

/// Row softmax that rejects non-finite logits.
pub fn softmax(tape: &mut Tape, logits: Var) -> Result<Var, NumericError> {
    if tape.value(logits).iter().any(|v| !v.is_finite()) {
        return Err(NumericError::NaNInput);
    }
    Ok(tape.softmax(logits))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: store.weight(&format!("{name}.w"), d_in, d_out),
            b: store.zeros(&format!("{name}.b"), &[1, d_out]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericError> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        linear(tape, x, w, b)
    }
}

/// Two-layer perceptron `W2·gelu(W1·x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.0"), d_in, hidden),
            outer: Linear::new(store, &format!("{name}.1"), hidden, d_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericError> {
        let h = self.inner.forward(tape, x)?;
        let h = tape.gelu(h);
        self.outer.forward(tape, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.ones(&format!("{name}.g"), &[1, d]),
            beta: store.zeros(&format!("{name}.b"), &[1, d]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, n_heads: usize) -> Self {
        Attention {
            q: Linear::new(store, &format!("{name}.q"), d, d),
            k: Linear::new(store, &format!("{name}.k"), d, d),
            v: Linear::new(store, &format!("{name}.v"), d, d),
            out: Linear::new(store, &format!("{name}.o"), d, d),
            n_heads,
        }
    }

    /// `queries: a×d` attend over `keys: b×d` / `values: b×d`.
    pub fn forward(&self, tape: &mut Tape, queries: Var, keys: Var, values: Var) -> Result<Var, NumericError> {
        let q = self.q.forward(tape, queries)?;
        let k = self.k.forward(tape, keys)?;
        let v = self.v.forward(tape, values)?;
        let mixed = scaled_dot_attention(tape, q, k, v, self.n_heads)?;
        self.out.forward(tape, mixed)
    }
}

/// Per-head `softmax(Q_h K_hᵀ / sqrt(d_h)) V_h`, heads concatenated by column.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var, NumericError> {
    let (_, d) = tape.shape(q);
    let (b, dk) = tape.shape(k);
    if n_heads == 0 || d % n_heads != 0 || dk != d || tape.shape(v) != (b, d) {
        return Err(NumericError::ShapeMismatch(format!(
            "attention: q {:?}, k {:?}, v {:?}, heads {n_heads}",
            tape.shape(q),
            tape.shape(k),
            tape.shape(v)
        )));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh),
                tape.slice_cols(k, h * dh, dh),
                tape.slice_cols(v, h * dh, dh),
            )
        };
        let scores = tape.matmul_bt(qh, kh);
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores);
        heads.push(tape.matmul(weights, vh));
    }
    Ok(if n_heads == 1 { heads[0] } else { tape.concat_cols(&heads) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn linear_identity_and_bias() {
        let p = ParamStore::new(0);
        let mut t = Tape::new(&p);
        let x = t.input(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = t.input(3, 3, eye);
        let b = t.input(1, 3, vec![0.0; 3]);
        let y = linear(&mut t, x, w, b).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let zw = t.input(3, 2, vec![0.0; 6]);
        let c = t.input(1, 2, vec![0.5, -1.5]);
        let y = linear(&mut t, x, zw, c).unwrap();
        assert_eq!(t.value(y), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (xd, wd, bd) = (random(&mut rng, 12), random(&mut rng, 8), random(&mut rng, 2));
        let p = ParamStore::new(0);
        let mut t = Tape::new(&p);
        let x = t.input(3, 4, xd.clone());
        let w = t.input(4, 2, wd.clone());
        let b = t.input(1, 2, bd.clone());
        let y = linear(&mut t, x, w, b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = bd[j];
                for k in 0..4 {
                    s += xd[i * 4 + k] * wd[k * 2 + j];
                }
                assert!((t.value(y)[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_shape_mismatch() {
        let p = ParamStore::new(0);
        let mut t = Tape::new(&p);
        let x = t.input(2, 3, vec![0.0; 6]);
        let w = t.input(4, 2, vec![0.0; 8]);
        let b = t.input(1, 2, vec![0.0; 2]);
        assert!(matches!(linear(&mut t, x, w, b), Err(NumericError::ShapeMismatch(_))));
    }

    #[test]
    fn softmax_cases() {
        let p = ParamStore::new(0);
        let mut t = Tape::new(&p);
        let x = t.input(1, 3, vec![0.0; 3]);
        let y = softmax(&mut t, x).unwrap();
        for v in t.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.input(1, 2, vec![1000.0, 0.0]);
        let y = softmax(&mut t, x).unwrap();
        assert!((t.value(y)[0] - 1.0).abs() < 1e-12 && t.value(y)[1] >= 0.0);
        let x = t.input(1, 2, vec![f64::NAN, 0.0]);
        assert!(matches!(softmax(&mut t, x), Err(NumericError::NaNInput)));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = random(&mut rng, 5);
        let x = t.input(1, 5, raw.clone());
        let y = softmax(&mut t, x).unwrap();
        let z: f64 = raw.iter().map(|v| v.exp()).sum();
        for (got, r) in t.value(y).iter().zip(&raw) {
            assert!((got - r.exp() / z).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_over_single_key_returns_projected_value() {
        let mut store = ParamStore::new(1);
        let attn = Attention::new(&mut store, "a", 4, 2);
        let mut t = Tape::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = t.input(3, 4, random(&mut rng, 12));
        let kv = t.input(1, 4, random(&mut rng, 4));
        let y = attn.forward(&mut t, q, kv, kv).unwrap();
        // Single key: every query row sees the same projected value row.
        let v = attn.v.forward(&mut t, kv).unwrap();
        let o = attn.out.forward(&mut t, v).unwrap();
        for r in 0..3 {
            for (a, b) in t.row(y, r).iter().zip(t.row(o, 0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_queries_average_values() {
        let p = ParamStore::new(0);
        let mut t = Tape::new(&p);
        let q = t.input(1, 2, vec![1.0, 0.0]);
        let k = t.input(3, 2, vec![0.0, 1.0, 0.0, -2.0, 0.0, 0.5]);
        let v = t.input(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let y = scaled_dot_attention(&mut t, q, k, v, 1).unwrap();
        assert!((t.value(y)[0] - 3.0).abs() < 1e-12);
        assert!((t.value(y)[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn two_heads_match_per_head_slicing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b, d, h) = (3, 5, 4, 2);
        let qd = random(&mut rng, a * d);
        let kd = random(&mut rng, b * d);
        let vd = random(&mut rng, b * d);
        let p = ParamStore::new(0);
        let mut t = Tape::new(&p);
        let q = t.input(a, d, qd.clone());
        let k = t.input(b, d, kd.clone());
        let v = t.input(b, d, vd.clone());
        let y = scaled_dot_attention(&mut t, q, k, v, h).unwrap();
        let dh = d / h;
        for head in 0..h {
            for i in 0..a {
                let mut w: Vec<f64> = (0..b)
                    .map(|j| {
                        (0..dh).map(|c| qd[i * d + head * dh + c] * kd[j * d + head * dh + c]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = w.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = w.iter().map(|x| (x - m).exp()).sum();
                w.iter_mut().for_each(|x| *x = (*x - m).exp() / z);
                for c in 0..dh {
                    let want: f64 = (0..b).map(|j| w[j] * vd[j * d + head * dh + c]).sum();
                    assert!((t.value(y)[i * d + head * dh + c] - want).abs() < 1e-12);
                }
            }
        }
        assert!(scaled_dot_attention(&mut t, q, k, v, 3).is_err());
    }
}
