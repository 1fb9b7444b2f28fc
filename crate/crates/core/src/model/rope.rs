use crate::linalg::{BlockRotation, Matrix, Pairing};

/// Rotary position table: position `s` rotates plane `i` by `s·base^(−2i/d_H)`.
#[derive(Clone, Debug)]
pub struct RopeTable {
    head_dim: usize,
    pairing: Pairing,
    inv_freq: Vec<f64>,
}

impl RopeTable {
    pub fn new(head_dim: usize, base: f64, pairing: Pairing) -> Self {
        let inv_freq = (0..head_dim / 2)
            .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Self {
            head_dim,
            pairing,
            inv_freq,
        }
    }

    pub fn pairing(&self) -> Pairing {
        self.pairing
    }

    pub fn angles(&self, pos: f64) -> Vec<f64> {
        self.inv_freq.iter().map(|f| pos * f).collect()
    }

    /// `R_Θ,pos` as a block rotation (pos may be negative for offsets).
    pub fn rotation(&self, pos: f64) -> BlockRotation {
        BlockRotation {
            angles: self.angles(pos),
            pairing: self.pairing,
        }
    }

    /// Rotates row `t` of `x` (T × d_H) by position `start + t`.
    pub fn rotate_rows(&self, x: &Matrix, start: usize) -> Matrix {
        self.rotate_rows_signed(x, start, 1.0)
    }

    /// Applies the transpose rotation; the adjoint of [`Self::rotate_rows`].
    pub fn unrotate_rows(&self, x: &Matrix, start: usize) -> Matrix {
        self.rotate_rows_signed(x, start, -1.0)
    }

    fn rotate_rows_signed(&self, x: &Matrix, start: usize, sign: f64) -> Matrix {
        assert_eq!(x.cols(), self.head_dim, "rope width mismatch");
        let pairs = self.pairing.pairs(self.head_dim);
        let mut out = x.clone();
        for t in 0..x.rows() {
            let pos = (start + t) as f64;
            let row = x.row(t);
            let dst = out.row_mut(t);
            for (&(a, b), f) in pairs.iter().zip(&self.inv_freq) {
                let (sin, cos) = (sign * pos * f).sin_cos();
                dst[a] = cos * row[a] - sin * row[b];
                dst[b] = sin * row[a] + cos * row[b];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn composition_adds_positions() {
        let rope = RopeTable::new(8, 10_000.0, Pairing::HalfSplit);
        for (s, t) in [(0.0, 3.0), (5.0, 11.0), (17.0, 2.0)] {
            let lhs = rope.rotation(s).to_matrix().matmul(&rope.rotation(t).to_matrix());
            let rhs = rope.rotation(s + t).to_matrix();
            assert!(lhs.max_abs_diff(&rhs) < 1e-12);
            assert!(rope.rotation(s).to_matrix().orthogonality_error() < 1e-12);
        }
    }

    #[test]
    fn relative_position_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for pairing in [Pairing::HalfSplit, Pairing::Interleaved] {
            let rope = RopeTable::new(8, 10_000.0, pairing);
            let q = Matrix::random_normal(8, 1, 1.0, &mut rng);
            let k = Matrix::random_normal(8, 1, 1.0, &mut rng);
            for (s, t) in [(3usize, 9usize), (12, 4), (0, 0), (31, 30)] {
                let qs = rope.rotation(s as f64).apply(&q);
                let kt = rope.rotation(t as f64).apply(&k);
                let lhs = dot(qs.data(), kt.data());
                let rel = rope.rotation(t as f64 - s as f64).apply(&k);
                let rhs = dot(q.data(), rel.data());
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_rotation_matches_block_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rope = RopeTable::new(6, 500.0, Pairing::HalfSplit);
        let x = Matrix::random_normal(4, 6, 1.0, &mut rng);
        let rotated = rope.rotate_rows(&x, 7);
        for t in 0..4 {
            let col = Matrix::new(6, 1, x.row(t).to_vec()).unwrap();
            let want = rope.rotation((7 + t) as f64).apply(&col);
            for c in 0..6 {
                assert!((rotated[(t, c)] - want[(c, 0)]).abs() < 1e-14);
            }
        }
        assert!(rope.unrotate_rows(&rotated, 7).max_abs_diff(&x) < 1e-14);
    }
}
