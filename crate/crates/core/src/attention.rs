//! Positional encoding, multi-head self-attention, and the transformer
//! layer, applied independently inside each local region.
//!
//! All forward functions take an `[M, K, C]` feature block plus the matching
//! `[M, K, 3]` region-relative coordinates and treat the M regions as a
//! batch: every attention score matrix is K×K, never across regions.

use rand::Rng;

use crate::tensor::{Tensor, TensorError, Var};

/// Epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Two-layer perceptron mapping 3-D coordinates to the feature width.
#[derive(Debug, Clone)]
pub struct PeParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Per-head query/key/value projections packed as C×C matrices, plus the
/// output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T> {
    pub gain: T,
    pub bias: T,
}

/// One transformer layer: positional encoding, MHSA with residual, FFN with
/// residual, and optional post-norms after each residual.
#[derive(Debug, Clone)]
pub struct TransformerLayerParams<T> {
    pub pe: PeParams<T>,
    pub attn: AttentionParams<T>,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
    pub norm1: Option<LayerNormParams<T>>,
    pub norm2: Option<LayerNormParams<T>>,
}

impl<T> PeParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> PeParams<U> {
        PeParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }

    pub fn for_each<'a>(&'a self, path: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{path}.w1"), &self.w1);
        f(format!("{path}.b1"), &self.b1);
        f(format!("{path}.w2"), &self.w2);
        f(format!("{path}.b2"), &self.b2);
    }

    pub fn for_each_mut(&mut self, path: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{path}.w1"), &mut self.w1);
        f(format!("{path}.b1"), &mut self.b1);
        f(format!("{path}.w2"), &mut self.w2);
        f(format!("{path}.b2"), &mut self.b2);
    }
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            heads: self.heads,
        }
    }

    pub fn for_each<'a>(&'a self, path: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{path}.wq"), &self.wq);
        f(format!("{path}.wk"), &self.wk);
        f(format!("{path}.wv"), &self.wv);
        f(format!("{path}.wo"), &self.wo);
    }

    pub fn for_each_mut(&mut self, path: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{path}.wq"), &mut self.wq);
        f(format!("{path}.wk"), &mut self.wk);
        f(format!("{path}.wv"), &mut self.wv);
        f(format!("{path}.wo"), &mut self.wo);
    }
}

impl<T> LayerNormParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    pub fn for_each<'a>(&'a self, path: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{path}.gain"), &self.gain);
        f(format!("{path}.bias"), &self.bias);
    }

    pub fn for_each_mut(&mut self, path: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{path}.gain"), &mut self.gain);
        f(format!("{path}.bias"), &mut self.bias);
    }
}

impl<T> TransformerLayerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> TransformerLayerParams<U> {
        TransformerLayerParams {
            pe: self.pe.map(f),
            attn: self.attn.map(f),
            ffn_w1: f(&self.ffn_w1),
            ffn_b1: f(&self.ffn_b1),
            ffn_w2: f(&self.ffn_w2),
            ffn_b2: f(&self.ffn_b2),
            norm1: self.norm1.as_ref().map(|n| n.map(f)),
            norm2: self.norm2.as_ref().map(|n| n.map(f)),
        }
    }

    pub fn for_each<'a>(&'a self, path: &str, f: &mut impl FnMut(String, &'a T)) {
        self.pe.for_each(&format!("{path}.pe"), f);
        self.attn.for_each(&format!("{path}.attn"), f);
        f(format!("{path}.ffn_w1"), &self.ffn_w1);
        f(format!("{path}.ffn_b1"), &self.ffn_b1);
        f(format!("{path}.ffn_w2"), &self.ffn_w2);
        f(format!("{path}.ffn_b2"), &self.ffn_b2);
        if let Some(n) = &self.norm1 {
            n.for_each(&format!("{path}.norm1"), f);
        }
        if let Some(n) = &self.norm2 {
            n.for_each(&format!("{path}.norm2"), f);
        }
    }

    pub fn for_each_mut(&mut self, path: &str, f: &mut impl FnMut(String, &mut T)) {
        self.pe.for_each_mut(&format!("{path}.pe"), f);
        self.attn.for_each_mut(&format!("{path}.attn"), f);
        f(format!("{path}.ffn_w1"), &mut self.ffn_w1);
        f(format!("{path}.ffn_b1"), &mut self.ffn_b1);
        f(format!("{path}.ffn_w2"), &mut self.ffn_w2);
        f(format!("{path}.ffn_b2"), &mut self.ffn_b2);
        if let Some(n) = &mut self.norm1 {
            n.for_each_mut(&format!("{path}.norm1"), f);
        }
        if let Some(n) = &mut self.norm2 {
            n.for_each_mut(&format!("{path}.norm2"), f);
        }
    }
}

/// Uniform init in ±1/√fan_in.
pub fn uniform_init(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .unwrap()
}

pub fn init_pe(width: usize, rng: &mut impl Rng) -> PeParams<Tensor> {
    PeParams {
        w1: uniform_init(rng, vec![3, width], 3),
        b1: uniform_init(rng, vec![width], 3),
        w2: uniform_init(rng, vec![width, width], width),
        b2: uniform_init(rng, vec![width], width),
    }
}

pub fn init_attention(width: usize, heads: usize, rng: &mut impl Rng) -> AttentionParams<Tensor> {
    assert!(heads >= 1 && width % heads == 0, "heads must divide width");
    AttentionParams {
        wq: uniform_init(rng, vec![width, width], width),
        wk: uniform_init(rng, vec![width, width], width),
        wv: uniform_init(rng, vec![width, width], width),
        wo: uniform_init(rng, vec![width, width], width),
        heads,
    }
}

pub fn init_layer_norm(width: usize) -> LayerNormParams<Tensor> {
    LayerNormParams {
        gain: Tensor::full(vec![width], 1.0),
        bias: Tensor::zeros(vec![width]),
    }
}

pub fn init_transformer_layer(
    width: usize,
    heads: usize,
    with_norm: bool,
    rng: &mut impl Rng,
) -> TransformerLayerParams<Tensor> {
    let hidden = 2 * width;
    TransformerLayerParams {
        pe: init_pe(width, rng),
        attn: init_attention(width, heads, rng),
        ffn_w1: uniform_init(rng, vec![width, hidden], width),
        ffn_b1: uniform_init(rng, vec![hidden], width),
        ffn_w2: uniform_init(rng, vec![hidden, width], hidden),
        ffn_b2: uniform_init(rng, vec![width], hidden),
        norm1: with_norm.then(|| init_layer_norm(width)),
        norm2: with_norm.then(|| init_layer_norm(width)),
    }
}

/// `PE(X)`: the coordinate MLP, applied pointwise. Callers add the result
/// to the features themselves.
pub fn positional_encode(coords: &Var, pe: &PeParams<Var>) -> Result<Var, TensorError> {
    let h = coords.matmul(&pe.w1)?.add(&pe.b1)?.relu();
    h.matmul(&pe.w2)?.add(&pe.b2)
}

/// Multi-head self-attention within each region: per head,
/// `softmax(Q Kᵀ / √d) V`, heads concatenated and projected.
pub fn mhsa(
    coords: &Var,
    features: &Var,
    params: &AttentionParams<Var>,
    pe: &PeParams<Var>,
) -> Result<Var, TensorError> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "mhsa",
            lhs: shape,
            rhs: vec![],
        });
    }
    let (m, k, c) = (shape[0], shape[1], shape[2]);
    let heads = params.heads;
    assert!(heads >= 1 && c % heads == 0, "heads must divide feature width");
    let d = c / heads;

    let fp = positional_encode(coords, pe)?.add(features)?;
    let split = |x: Var| -> Result<Var, TensorError> {
        x.reshape(vec![m, k, heads, d])?.swap_axes(1, 2)
    };
    let q = split(fp.matmul(&params.wq)?)?;
    let key = split(fp.matmul(&params.wk)?)?;
    let v = split(fp.matmul(&params.wv)?)?;

    let scores = q.matmul_nt(&key)?.scale(1.0 / (d as f64).sqrt());
    let weights = scores.softmax(3)?; // errors on non-finite scores
    let per_head = weights.matmul(&v)?;
    let merged = per_head.swap_axes(1, 2)?.reshape(vec![m, k, c])?;
    merged.matmul(&params.wo)
}

/// `Y = MHSA(X, F) + F` then `O = Y + FFN(Y)`, with optional post-norm
/// after each residual.
pub fn transformer_layer(
    coords: &Var,
    features: &Var,
    params: &TransformerLayerParams<Var>,
) -> Result<Var, TensorError> {
    let att = mhsa(coords, features, &params.attn, &params.pe)?;
    let mut y = att.add(features)?;
    if let Some(n) = &params.norm1 {
        y = y.layer_norm(&n.gain, &n.bias, LAYER_NORM_EPS)?;
    }
    let ffn = y
        .matmul(&params.ffn_w1)?
        .add(&params.ffn_b1)?
        .relu()
        .matmul(&params.ffn_w2)?
        .add(&params.ffn_b2)?;
    let mut out = y.add(&ffn)?;
    if let Some(n) = &params.norm2 {
        out = out.layer_norm(&n.gain, &n.bias, LAYER_NORM_EPS)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, DEFAULT_STEP};
    use crate::tensor::Tape;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn zero_pe(c: usize) -> PeParams<Tensor> {
        PeParams {
            w1: Tensor::zeros(vec![3, c]),
            b1: Tensor::zeros(vec![c]),
            w2: Tensor::zeros(vec![c, c]),
            b2: Tensor::zeros(vec![c]),
        }
    }

    fn zero_layer(c: usize, heads: usize) -> TransformerLayerParams<Tensor> {
        TransformerLayerParams {
            pe: zero_pe(c),
            attn: AttentionParams {
                wq: Tensor::zeros(vec![c, c]),
                wk: Tensor::zeros(vec![c, c]),
                wv: Tensor::zeros(vec![c, c]),
                wo: Tensor::zeros(vec![c, c]),
                heads,
            },
            ffn_w1: Tensor::zeros(vec![c, 2 * c]),
            ffn_b1: Tensor::zeros(vec![2 * c]),
            ffn_w2: Tensor::zeros(vec![2 * c, c]),
            ffn_b2: Tensor::zeros(vec![c]),
            norm1: None,
            norm2: None,
        }
    }

    fn rand_tensor(rng: &mut StdRng, shape: &[usize], scale: f64) -> Tensor {
        use rand::Rng;
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
        )
        .unwrap()
    }

    /// Step-by-step attention oracle in plain loops, independent of the
    /// tape ops. Also asserts that each query's weights sum to 1.
    fn mhsa_oracle(
        coords: &Tensor,
        feats: &Tensor,
        p: &AttentionParams<Tensor>,
        pe: &PeParams<Tensor>,
    ) -> Vec<f64> {
        let (m, k, c) = (feats.shape()[0], feats.shape()[1], feats.shape()[2]);
        let heads = p.heads;
        let d = c / heads;
        let matvec = |w: &Tensor, x: &[f64]| -> Vec<f64> {
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for cc in 0..cols {
                    out[cc] += x[r] * w.data()[r * cols + cc];
                }
            }
            out
        };
        let mut out = vec![0.0; m * k * c];
        for j in 0..m {
            // F' = PE(X) + F per token
            let mut fp = vec![vec![0.0; c]; k];
            for s in 0..k {
                let xyz = &coords.data()[(j * k + s) * 3..(j * k + s) * 3 + 3];
                let mut h = matvec(&pe.w1, xyz);
                for (i, v) in h.iter_mut().enumerate() {
                    *v = (*v + pe.b1.data()[i]).max(0.0);
                }
                let mut enc = matvec(&pe.w2, &h);
                for (i, v) in enc.iter_mut().enumerate() {
                    *v += pe.b2.data()[i];
                }
                for ch in 0..c {
                    fp[s][ch] = enc[ch] + feats.data()[(j * k + s) * c + ch];
                }
            }
            let q: Vec<Vec<f64>> = fp.iter().map(|t| matvec(&p.wq, t)).collect();
            let key: Vec<Vec<f64>> = fp.iter().map(|t| matvec(&p.wk, t)).collect();
            let val: Vec<Vec<f64>> = fp.iter().map(|t| matvec(&p.wv, t)).collect();
            let mut concat = vec![vec![0.0; c]; k];
            for h in 0..heads {
                for s in 0..k {
                    let mut scores = vec![0.0; k];
                    for (t, score) in scores.iter_mut().enumerate() {
                        let mut dot = 0.0;
                        for e in 0..d {
                            dot += q[s][h * d + e] * key[t][h * d + e];
                        }
                        *score = dot / (d as f64).sqrt();
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let weights: Vec<f64> = exps.iter().map(|e| e / sum).collect();
                    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    for e in 0..d {
                        let mut acc = 0.0;
                        for t in 0..k {
                            acc += weights[t] * val[t][h * d + e];
                        }
                        concat[s][h * d + e] = acc;
                    }
                }
            }
            for s in 0..k {
                let o = matvec(&p.wo, &concat[s]);
                out[(j * k + s) * c..(j * k + s) * c + c].copy_from_slice(&o);
            }
        }
        out
    }

    #[test]
    fn zero_pe_leaves_features_unchanged() {
        let tape = Tape::new();
        let mut rng = StdRng::seed_from_u64(40);
        let coords = tape.constant(rand_tensor(&mut rng, &[2, 3, 3], 1.0));
        let feats = rand_tensor(&mut rng, &[2, 3, 4], 1.0);
        let fv = tape.constant(feats.clone());
        let pe = zero_pe(4).map(&mut |t| tape.constant(t.clone()));
        let enc = positional_encode(&coords, &pe).unwrap();
        let fp = enc.add(&fv).unwrap();
        assert_eq!(fp.value().data(), feats.data());
    }

    #[test]
    fn equal_coordinates_get_equal_encodings() {
        let tape = Tape::new();
        let mut rng = StdRng::seed_from_u64(41);
        let pe = init_pe(4, &mut rng).map(&mut |t| tape.constant(t.clone()));
        let coords = tape.constant(
            Tensor::new(vec![2, 3], vec![0.3, -0.7, 0.1, 0.3, -0.7, 0.1]).unwrap(),
        );
        let enc = positional_encode(&coords, &pe).unwrap().value();
        assert_eq!(&enc.data()[..4], &enc.data()[4..]);
    }

    #[test]
    fn pe_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(42);
        let pe = init_pe(4, &mut rng);
        let coords = rand_tensor(&mut rng, &[3, 3], 1.0);
        let params = vec![
            ("w1".to_string(), pe.w1),
            ("b1".to_string(), pe.b1),
            ("w2".to_string(), pe.w2),
            ("b2".to_string(), pe.b2),
        ];
        let report = finite_diff_check(&params, DEFAULT_STEP, move |tape, v| {
            let pe = PeParams {
                w1: v[0].clone(),
                b1: v[1].clone(),
                w2: v[2].clone(),
                b2: v[3].clone(),
            };
            let c = tape.constant(coords.clone());
            Ok(positional_encode(&c, &pe)?.sum_all())
        })
        .unwrap();
        assert!(report.all_below(1e-4), "worst {}", report.worst());
    }

    #[test]
    fn single_token_attention_is_projection() {
        let mut rng = StdRng::seed_from_u64(43);
        let c = 4;
        let p = init_attention(c, 2, &mut rng);
        let pe = zero_pe(c);
        let coords = Tensor::zeros(vec![1, 1, 3]);
        let feats = rand_tensor(&mut rng, &[1, 1, c], 1.0);

        let tape = Tape::new();
        let pv = p.map(&mut |t| tape.constant(t.clone()));
        let pev = pe.map(&mut |t| tape.constant(t.clone()));
        let out = mhsa(
            &tape.constant(coords),
            &tape.constant(feats.clone()),
            &pv,
            &pev,
        )
        .unwrap()
        .value();

        // softmax over one key is 1, so the output is (F W^V) W^O
        let mut v = vec![0.0; c];
        for r in 0..c {
            for cc in 0..c {
                v[cc] += feats.data()[r] * p.wv.data()[r * c + cc];
            }
        }
        let mut want = vec![0.0; c];
        for r in 0..c {
            for cc in 0..c {
                want[cc] += v[r] * p.wo.data()[r * c + cc];
            }
        }
        for (g, w) in out.data().iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_produce_identical_rows() {
        let mut rng = StdRng::seed_from_u64(44);
        let c = 8;
        let p = init_attention(c, 4, &mut rng);
        let pe = init_pe(c, &mut rng);
        let row: Vec<f64> = (0..c).map(|i| (i as f64) * 0.1 - 0.3).collect();
        let mut fdata = row.clone();
        fdata.extend_from_slice(&row);
        let feats = Tensor::new(vec![1, 2, c], fdata).unwrap();
        let coords = Tensor::new(vec![1, 2, 3], vec![0.2, 0.4, -0.1, 0.2, 0.4, -0.1]).unwrap();

        let tape = Tape::new();
        let out = mhsa(
            &tape.constant(coords),
            &tape.constant(feats),
            &p.map(&mut |t| tape.constant(t.clone())),
            &pe.map(&mut |t| tape.constant(t.clone())),
        )
        .unwrap()
        .value();
        assert_eq!(&out.data()[..c], &out.data()[c..]);
    }

    #[test]
    fn mhsa_matches_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(45);
        for &(m, k, c, heads) in &[(1usize, 2usize, 4usize, 1usize), (3, 2, 4, 2), (2, 5, 8, 4)] {
            let p = init_attention(c, heads, &mut rng);
            let pe = init_pe(c, &mut rng);
            let coords = rand_tensor(&mut rng, &[m, k, 3], 1.0);
            let feats = rand_tensor(&mut rng, &[m, k, c], 1.0);
            let want = mhsa_oracle(&coords, &feats, &p, &pe);

            let tape = Tape::new();
            let got = mhsa(
                &tape.constant(coords),
                &tape.constant(feats),
                &p.map(&mut |t| tape.constant(t.clone())),
                &pe.map(&mut |t| tape.constant(t.clone())),
            )
            .unwrap()
            .value();
            for (g, w) in got.data().iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-10, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn zero_weights_no_norm_layer_is_identity() {
        let mut rng = StdRng::seed_from_u64(46);
        let feats = rand_tensor(&mut rng, &[2, 3, 4], 1.5);
        let coords = rand_tensor(&mut rng, &[2, 3, 3], 1.0);
        let tape = Tape::new();
        let params = zero_layer(4, 2).map(&mut |t| tape.constant(t.clone()));
        let out = transformer_layer(&tape.constant(coords), &tape.constant(feats.clone()), &params)
            .unwrap()
            .value();
        assert_eq!(out.data(), feats.data());
    }

    #[test]
    fn permutation_equivariance() {
        use rand::Rng;
        let mut rng = StdRng::seed_from_u64(47);
        let (m, k, c) = (2, 6, 8);
        let layer = init_transformer_layer(c, 4, true, &mut rng);
        for _ in 0..20 {
            let coords = rand_tensor(&mut rng, &[m, k, 3], 1.0);
            let feats = rand_tensor(&mut rng, &[m, k, c], 1.0);
            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let permute = |t: &Tensor, width: usize| {
                let mut data = vec![0.0; t.numel()];
                for j in 0..m {
                    for s in 0..k {
                        let src = (j * k + perm[s]) * width;
                        let dst = (j * k + s) * width;
                        data[dst..dst + width].copy_from_slice(&t.data()[src..src + width]);
                    }
                }
                Tensor::new(t.shape().to_vec(), data).unwrap()
            };

            let tape = Tape::new();
            let pv = layer.map(&mut |t| tape.constant(t.clone()));
            let base = transformer_layer(
                &tape.constant(coords.clone()),
                &tape.constant(feats.clone()),
                &pv,
            )
            .unwrap()
            .value();
            let tape2 = Tape::new();
            let pv2 = layer.map(&mut |t| tape2.constant(t.clone()));
            let permuted = transformer_layer(
                &tape2.constant(permute(&coords, 3)),
                &tape2.constant(permute(&feats, c)),
                &pv2,
            )
            .unwrap()
            .value();
            let base_permuted = permute(&base, c);
            for (a, b) in permuted.data().iter().zip(base_permuted.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn full_layer_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(48);
        let (m, k, c) = (2, 3, 4);
        let layer = init_transformer_layer(c, 2, true, &mut rng);
        let coords = rand_tensor(&mut rng, &[m, k, 3], 1.0);
        let feats = rand_tensor(&mut rng, &[m, k, c], 1.0);

        let mut params = Vec::new();
        layer.for_each("layer", &mut |name, t| params.push((name, t.clone())));
        let report = finite_diff_check(&params, DEFAULT_STEP, move |tape, vars| {
            let mut it = vars.iter().cloned();
            let mounted = layer.map(&mut |_| it.next().unwrap());
            let out = transformer_layer(
                &tape.constant(coords.clone()),
                &tape.constant(feats.clone()),
                &mounted,
            )?;
            // weight the outputs so every gradient path is exercised
            let w = tape.constant(
                Tensor::new(
                    vec![m, k, c],
                    (0..m * k * c).map(|i| 0.05 * (i as f64) - 0.3).collect(),
                )
                .unwrap(),
            );
            Ok(out.mul(&w)?.sum_all())
        })
        .unwrap();
        assert!(report.all_below(1e-4), "worst {}", report.worst());
    }

    #[test]
    fn post_norm_output_has_unit_variance_at_init() {
        let mut rng = StdRng::seed_from_u64(49);
        let (m, k, c) = (4, 6, 8);
        let layer = init_transformer_layer(c, 4, true, &mut rng);
        let coords = rand_tensor(&mut rng, &[m, k, 3], 1.0);
        let feats = rand_tensor(&mut rng, &[m, k, c], 1.0);
        let tape = Tape::new();
        let out = transformer_layer(
            &tape.constant(coords),
            &tape.constant(feats),
            &layer.map(&mut |t| tape.constant(t.clone())),
        )
        .unwrap()
        .value();
        // gain 1 / bias 0 at init: each row of the post-norm output is
        // exactly normalized
        for row in 0..m * k {
            let slice = &out.data()[row * c..(row + 1) * c];
            let mean = slice.iter().sum::<f64>() / c as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            assert!((var - 1.0).abs() < 0.1, "variance {var}");
        }
    }
}
