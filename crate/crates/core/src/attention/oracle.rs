use super::AttentionWorkload;
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Materialized `softmax(Q Kᵀ · scale) V`, accumulated in `f64`. With
/// `causal`, query row `i` sees keys `0..=i + (n_k - n_q)`.
pub fn dense_attention(q: &Tensor2D, k: &Tensor2D, v: &Tensor2D, causal: bool, scale: f32) -> Result<Tensor2D> {
    let (n_q, d) = q.shape();
    let n_k = k.rows();
    if k.cols() != d || v.shape() != (n_k, d) {
        return Err(Error::Shape(format!(
            "q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if causal && n_q > n_k {
        return Err(Error::Config(format!(
            "causal attention with {n_q} queries over {n_k} keys"
        )));
    }
    let scale = f64::from(scale);
    let mut out = vec![0.0f32; n_q * d];
    let mut scores = vec![0.0f64; n_k];
    for i in 0..n_q {
        let visible = if causal { i + 1 + n_k - n_q } else { n_k };
        if visible == 0 {
            return Err(Error::Config("query row with no visible keys".into()));
        }
        let qi = q.row(i);
        for (j, s) in scores.iter_mut().enumerate().take(visible) {
            let dot: f64 = qi
                .iter()
                .zip(k.row(j))
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            *s = dot * scale;
        }
        let max = scores[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in &mut scores[..visible] {
            *s = (*s - max).exp();
            sum += *s;
        }
        let row = &mut out[i * d..(i + 1) * d];
        for (c, o) in row.iter_mut().enumerate() {
            let acc: f64 = (0..visible).map(|j| scores[j] * f64::from(v.get(j, c))).sum();
            *o = (acc / sum) as f32;
        }
    }
    Ok(Tensor2D::from_parts(n_q, d, out))
}

/// Oracle for a workload: decompress both caches and run [`dense_attention`]
/// for every query head.
pub fn dense_attention_oracle(w: &AttentionWorkload) -> Result<Vec<Tensor2D>> {
    let k = w.key.to_dense()?;
    let v = w.value.to_dense()?;
    w.queries
        .iter()
        .map(|q| dense_attention(q, &k, &v, w.causal, w.scale))
        .collect()
}
