//! Cosine similarity matrix, bidirectional contrastive loss and the masked
//! reconstruction loss.

use super::ModelError;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Guard against division by a zero norm when normalizing embeddings.
pub const NORM_EPS: f64 = 1e-12;
/// Floor on the per-patch target variance.
pub const TARGET_VAR_FLOOR: f64 = 1e-6;

/// `S[m][n] = cos(audio_m, text_n)` for two `B x d` batches.
pub fn similarity_matrix(tape: &mut Tape, audio: Var, text: Var) -> Result<Var, ModelError> {
    let (a_shape, t_shape) = (tape.shape(audio).to_vec(), tape.shape(text).to_vec());
    if a_shape.len() != 2 || a_shape != t_shape {
        return Err(TensorError::ShapeMismatch {
            op: "similarity_matrix",
            lhs: a_shape,
            rhs: t_shape,
        }
        .into());
    }
    let an = tape.l2_normalize(audio, 1, NORM_EPS)?;
    let tn = tape.l2_normalize(text, 1, NORM_EPS)?;
    let tt = tape.transpose(tn)?;
    Ok(tape.matmul(an, tt)?)
}

/// Symmetric cross-entropy over the columns and rows of `S / tau`, with
/// `tau = exp(log_tau)`.
///
/// `-(1/2B) sum_i [log softmax_j(S_ji / tau)_i + log softmax_j(S_ij / tau)_i]`
pub fn clap_loss(tape: &mut Tape, sim: Var, log_tau: Var) -> Result<Var, ModelError> {
    let shape = tape.shape(sim).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(ModelError::NonSquare(shape));
    }
    let b = shape[0] as f64;
    let neg = tape.scale(log_tau, -1.0);
    let inv_tau = tape.exp(neg);
    let logits = tape.mul_scalar_var(sim, inv_tau)?;
    // column-wise: normalize over the audio index for each text column
    let by_col = tape.log_softmax(logits, 0)?;
    let by_row = tape.log_softmax(logits, 1)?;
    let dc = tape.diag(by_col)?;
    let dr = tape.diag(by_row)?;
    let both = tape.add(dc, dr)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -1.0 / (2.0 * b)))
}

/// Per-patch standardized targets: `(x - mean) / sqrt(max(var, floor))`.
pub fn normalize_targets(patches: &Tensor) -> Tensor {
    let (rows, cols) = patches.dims2().expect("patch matrix");
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = patches.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
        let sd = var.max(TARGET_VAR_FLOOR).sqrt();
        out.extend(row.iter().map(|x| (x - mean) / sd));
    }
    Tensor::new(vec![rows, cols], out).expect("same shape")
}

/// Mean squared error between the reconstruction and normalized targets,
/// over masked patches only. Zero when nothing is masked.
pub fn mae_loss(
    tape: &mut Tape,
    reconstruction: Var,
    targets: &Tensor,
    masked: &[usize],
) -> Result<Var, ModelError> {
    if tape.shape(reconstruction) != targets.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mae_loss",
            lhs: tape.shape(reconstruction).to_vec(),
            rhs: targets.shape().to_vec(),
        }
        .into());
    }
    if masked.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let norm = normalize_targets(targets);
    let cols = norm.shape()[1];
    let mut sel = Vec::with_capacity(masked.len() * cols);
    for &p in masked {
        sel.extend_from_slice(norm.row(p));
    }
    let target = tape.constant(Tensor::new(vec![masked.len(), cols], sel)?);
    let pred = tape.gather_rows(reconstruction, masked)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// `lambda * clap + mae`.
pub fn total_loss(tape: &mut Tape, clap: Var, mae: Var, lambda: f64) -> Result<Var, ModelError> {
    let weighted = tape.scale(clap, lambda);
    Ok(tape.add(weighted, mae)?)
}

/// A materialized similarity matrix with its temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub s: Tensor,
    pub tau: f64,
}

impl SimilarityMatrix {
    /// Cosine similarities between row-aligned audio and text embeddings.
    pub fn from_embeddings(audio: &[Vec<f64>], text: &[Vec<f64>], tau: f64) -> Result<Self, ModelError> {
        if audio.is_empty() || text.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(audio)?);
        let t = tape.constant(Tensor::from_rows(text)?);
        let s = similarity_matrix(&mut tape, a, t)?;
        Ok(Self {
            s: tape.value(s).clone(),
            tau,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn clap_loss(&self) -> Result<f64, ModelError> {
        if !(self.tau > 0.0) {
            return Err(ModelError::Config(format!("tau {} must be positive", self.tau)));
        }
        let mut tape = Tape::new();
        let s = tape.constant(self.s.clone());
        let lt = tape.constant(Tensor::scalar(self.tau.ln()));
        let l = clap_loss(&mut tape, s, lt)?;
        Ok(tape.value(l).item())
    }
}

/// Plain-value masked reconstruction loss.
pub fn mae_loss_value(reconstruction: &Tensor, targets: &Tensor, masked: &[usize]) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let r = tape.constant(reconstruction.clone());
    let l = mae_loss(&mut tape, r, targets, masked)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(rows: &[Vec<f64>], tau: f64) -> SimilarityMatrix {
        SimilarityMatrix {
            s: Tensor::from_rows(rows).unwrap(),
            tau,
        }
    }

    #[test]
    fn single_pair_has_zero_loss() {
        assert_eq!(sim(&[vec![0.3]], 0.07).clap_loss().unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_identity() {
        let l = sim(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).clap_loss().unwrap();
        // each term is -log(e / (e + 1)) = log(1 + e^-1)
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_rows_give_identity() {
        let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 2.0], vec![0.0, -3.0, 0.0]];
        let s = SimilarityMatrix::from_embeddings(&rows, &rows, 1.0).unwrap();
        let id = Tensor::identity(3);
        for (a, b) in s.s.data().iter().zip(id.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let c = SimilarityMatrix::from_embeddings(&[vec![2.0, 0.0]], &[vec![1.0, 0.0]], 1.0).unwrap();
        assert_eq!(c.s.data(), &[1.0]);
        let o = SimilarityMatrix::from_embeddings(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]], 1.0).unwrap();
        assert_eq!(o.s.data(), &[0.0]);
        assert!(matches!(
            SimilarityMatrix::from_embeddings(&[], &[], 1.0),
            Err(ModelError::EmptyBatch)
        ));
    }

    #[test]
    fn non_square_rejected() {
        let s = sim(&[vec![1.0, 0.0, 0.5], vec![0.0, 1.0, 0.2]], 1.0);
        assert!(matches!(s.clap_loss(), Err(ModelError::NonSquare(_))));
    }

    #[test]
    fn mae_edge_cases() {
        let targets = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 0.0, 2.0]]).unwrap();
        let norm = normalize_targets(&targets);
        assert_eq!(mae_loss_value(&norm, &targets, &[0, 1]).unwrap(), 0.0);
        let shifted = Tensor::new(vec![2, 4], norm.data().iter().map(|v| v + 1.0).collect()).unwrap();
        assert!((mae_loss_value(&shifted, &targets, &[0, 1]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(mae_loss_value(&shifted, &targets, &[]).unwrap(), 0.0);
        // constant patch: variance floor keeps it finite
        let flat = Tensor::from_rows(&[vec![5.0; 4]]).unwrap();
        assert!(normalize_targets(&flat).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn total_loss_weights() {
        let mut tape = Tape::new();
        for (lambda, c, m, want) in [(1.0, 0.3, 0.2, 0.5), (2.0, 0.25, 0.0, 0.5), (0.0, 7.0, 0.2, 0.2)] {
            let cv = tape.constant(Tensor::scalar(c));
            let mv = tape.constant(Tensor::scalar(m));
            let t = total_loss(&mut tape, cv, mv, lambda).unwrap();
            assert!((tape.value(t).item() - want).abs() < 1e-15);
        }
    }
}
