use crate::error::{Error, Result};
use crate::nm::{GroupMetadata, NmPattern};
use crate::tensor::Tensor2D;

pub fn dense_gemm(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    a.matmul(b)
}

/// `expand(nnz, meta) × dense`, computed straight from the compressed
/// operand. Only kept elements contribute; each output accumulates them in
/// ascending reduction index, so the result is bit-identical to the
/// expand-then-multiply route.
pub fn sparse_gemm_emulated(
    nnz: &Tensor2D,
    meta: &GroupMetadata,
    pattern: NmPattern,
    dense: &Tensor2D,
) -> Result<Tensor2D> {
    pattern.require_codec()?;
    let (m, n) = (pattern.m_group(), pattern.n_keep());
    let groups_per_row = nnz.cols() / n;
    let reduction = groups_per_row * m;
    if !nnz.cols().is_multiple_of(n) || reduction != dense.rows() {
        return Err(Error::Shape(format!(
            "sparse operand {}x{} (reduction {reduction}) by dense {}x{}",
            nnz.rows(),
            nnz.cols(),
            dense.rows(),
            dense.cols()
        )));
    }
    if meta.group_count() < nnz.rows() * groups_per_row {
        return Err(Error::Shape(format!(
            "metadata covers {} groups, operand needs {}",
            meta.group_count(),
            nnz.rows() * groups_per_row
        )));
    }
    let cols = dense.cols();
    let mut out = vec![0.0f32; nnz.rows() * cols];
    for r in 0..nnz.rows() {
        let src = nnz.row(r);
        let acc = &mut out[r * cols..(r + 1) * cols];
        for g in 0..groups_per_row {
            let codes = meta.codes(r * groups_per_row + g)?;
            for (k, &code) in codes.iter().enumerate() {
                let a = src[g * n + k];
                let b = dense.row(g * m + usize::from(code));
                for (o, &bv) in acc.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
    }
    Ok(Tensor2D::from_parts(nnz.rows(), cols, out))
}
