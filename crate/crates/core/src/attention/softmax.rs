use crate::tensor::Tensor2D;

/// Online-softmax state for a tile of query rows, kept in the transposed
/// layout: scores arrive as `Sᵀ` (keys × queries) and the output
/// accumulator is `Oᵀ` (d × queries).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxState {
    max: Vec<f32>,
    sum: Vec<f32>,
    acc_t: Tensor2D,
}

/// Unnormalized output of one decode split, scaled to its own running max.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPartial {
    /// `rows × d`.
    pub output: Tensor2D,
    pub max: Vec<f32>,
    pub sum: Vec<f32>,
}

impl SoftmaxState {
    pub fn new(head_dim: usize, rows: usize) -> Self {
        Self {
            max: vec![f32::NEG_INFINITY; rows],
            sum: vec![0.0; rows],
            acc_t: Tensor2D::zeros(head_dim, rows),
        }
    }

    pub fn rows(&self) -> usize {
        self.max.len()
    }

    pub fn running_max(&self) -> &[f32] {
        &self.max
    }

    pub fn running_sum(&self) -> &[f32] {
        &self.sum
    }

    /// The `d × rows` accumulator `Oᵀ`.
    pub fn accumulator(&self) -> &Tensor2D {
        &self.acc_t
    }

    /// Folds a scaled, masked score tile `Sᵀ` (keys × rows) into the running
    /// statistics, rescales the accumulator, and overwrites the tile with
    /// `Pᵀ = exp(Sᵀ - m_new)`.
    pub fn absorb_scores(&mut self, s_t: &mut Tensor2D) {
        let rows = self.rows();
        assert_eq!(
            s_t.cols(),
            rows,
            "score tile has {} query columns, state has {rows}",
            s_t.cols()
        );
        let keys = s_t.rows();
        let d = self.acc_t.rows();
        let scores = s_t.data_mut();
        let acc = self.acc_t.data_mut();
        for r in 0..rows {
            let tile_max = (0..keys)
                .map(|j| scores[j * rows + r])
                .fold(f32::NEG_INFINITY, f32::max);
            let m_old = self.max[r];
            let m_new = m_old.max(tile_max);
            if m_new == f32::NEG_INFINITY {
                // every key so far is masked for this row
                for j in 0..keys {
                    scores[j * rows + r] = 0.0;
                }
                continue;
            }
            let corr = (m_old - m_new).exp();
            let mut tile_sum = 0.0f32;
            for j in 0..keys {
                let p = (scores[j * rows + r] - m_new).exp();
                scores[j * rows + r] = p;
                tile_sum += p;
            }
            self.sum[r] = self.sum[r] * corr + tile_sum;
            self.max[r] = m_new;
            if corr != 1.0 {
                for c in 0..d {
                    acc[c * rows + r] *= corr;
                }
            }
        }
    }

    /// Adds a `d × rows` contribution `Vᵀ Pᵀ` to the accumulator.
    pub fn accumulate(&mut self, o_t: &Tensor2D) {
        assert_eq!(o_t.shape(), self.acc_t.shape(), "accumulator shape mismatch");
        for (a, &b) in self.acc_t.data_mut().iter_mut().zip(o_t.data()) {
            *a += b;
        }
    }

    /// `max + ln(sum)` per row.
    pub fn logsumexp(&self) -> Vec<f32> {
        self.max.iter().zip(&self.sum).map(|(&m, &l)| m + l.ln()).collect()
    }

    /// Normalized `rows × d` output.
    pub fn finish(&self) -> Tensor2D {
        let (d, rows) = self.acc_t.shape();
        Tensor2D::from_fn(rows, d, |r, c| self.acc_t.get(c, r) / self.sum[r])
    }

    pub fn into_partial(self) -> SplitPartial {
        SplitPartial {
            output: self.acc_t.transpose(),
            max: self.max,
            sum: self.sum,
        }
    }
}
