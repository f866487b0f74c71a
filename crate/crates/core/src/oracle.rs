//! Literal complex-domain reference evaluations.
//!
//! Everything here is f64, loops over scalars and builds rotations from
//! `Complex64::from_polar`. Nothing is shared with [`crate::rope`] or
//! [`crate::roce`], so agreement between the two is meaningful.

use ndarray::Array2;
use num_complex::Complex64;

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| Complex64::new(1.0, 0.0))
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Self) -> Self {
        Self::from_fn(self.rows * other.rows, self.cols * other.cols, |r, c| {
            self.get(r / other.rows, c / other.cols) * other.get(r % other.rows, c % other.cols)
        })
    }

    /// Concatenation along columns.
    pub fn hcat(parts: &[&Self]) -> Self {
        let rows = parts[0].rows;
        assert!(parts.iter().all(|p| p.rows == rows));
        let cols = parts.iter().map(|p| p.cols).sum();
        Self::from_fn(rows, cols, |r, mut c| {
            for p in parts {
                if c < p.cols {
                    return p.get(r, c);
                }
                c -= p.cols;
            }
            unreachable!()
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// `θ_c = base^(−2c/d)` for `c = 0..d/2`.
pub fn oracle_theta(d: usize, base: f64) -> Vec<f64> {
    (0..d / 2).map(|c| base.powf(-2.0 * c as f64 / d as f64)).collect()
}

/// `R[n, c] = e^{i n θ_c}` for a length-`len` sequence and head size `d`.
pub fn oracle_rope_1d(len: usize, d: usize, base: f64) -> ComplexMatrix {
    let theta = oracle_theta(d, base);
    ComplexMatrix::from_fn(len, d / 2, |n, c| Complex64::from_polar(1.0, n as f64 * theta[c]))
}

/// 3D rotary field as `[R_f ⊗ 1_h ⊗ 1_w | 1_f ⊗ R_h ⊗ 1_w | 1_f ⊗ 1_h ⊗ R_w]`.
pub fn oracle_rope_3d(f: usize, h: usize, w: usize, d_head: usize, base: f64) -> ComplexMatrix {
    let d_axis = d_head / 3;
    let rf = oracle_rope_1d(f, d_axis, base);
    let rh = oracle_rope_1d(h, d_axis, base);
    let rw = oracle_rope_1d(w, d_axis, base);
    let ones = |n| ComplexMatrix::ones(n, 1);
    let frame = rf.kron(&ones(h)).kron(&ones(w));
    let height = ones(f).kron(&rh).kron(&ones(w));
    let width = ones(f).kron(&ones(h)).kron(&rw);
    ComplexMatrix::hcat(&[&frame, &height, &width])
}

fn as_complex(x: &[f64]) -> Vec<Complex64> {
    x.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

/// `Σ_c Re[q̄_n,c · (k̄_m,c)^* · R_n,c · (R_m,c)^* · e^{i(φ_n,c − φ_m,c)}]`,
/// before softmax scaling.
pub fn oracle_attention_logit(
    q_row: &[f64],
    k_row: &[f64],
    rope_n: &[Complex64],
    rope_m: &[Complex64],
    phi_n: &[f64],
    phi_m: &[f64],
) -> f64 {
    let q = as_complex(q_row);
    let k = as_complex(k_row);
    let mut total = 0.0;
    for c in 0..q.len() {
        let camera = Complex64::from_polar(1.0, phi_n[c] - phi_m[c]);
        total += (q[c] * k[c].conj() * rope_n[c] * rope_m[c].conj() * camera).re;
    }
    total
}

/// `(Σ_m A_m · v̄_m · e^{−iφ_m}) · e^{+iφ_query}`, as interleaved real pairs.
pub fn oracle_geometry_aware_output(
    a_row: &[f64],
    v_rows: &[Vec<f64>],
    phi_vo_rows: &[Vec<f64>],
    phi_vo_query: &[f64],
) -> Vec<f64> {
    let channels = phi_vo_query.len();
    let mut acc = vec![Complex64::new(0.0, 0.0); channels];
    for (m, (v, phi)) in v_rows.iter().zip(phi_vo_rows).enumerate() {
        let v = as_complex(v);
        for c in 0..channels {
            acc[c] += a_row[m] * v[c] * Complex64::from_polar(1.0, -phi[c]);
        }
    }
    let mut out = Vec::with_capacity(2 * channels);
    for c in 0..channels {
        let z = acc[c] * Complex64::from_polar(1.0, phi_vo_query[c]);
        out.push(z.re);
        out.push(z.im);
    }
    out
}

pub fn oracle_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn rows_of(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.outer_iter().map(|r| r.to_vec()).collect()
}

/// Full scaled logit matrix `A'(n, m)/√d` of a single head.
pub fn oracle_logit_matrix(q: &Array2<f64>, k: &Array2<f64>, rope: &ComplexMatrix, phi_qk: &Array2<f64>) -> Array2<f64> {
    let d = q.ncols() as f64;
    let (q, k, phi) = (rows_of(q), rows_of(k), rows_of(phi_qk));
    Array2::from_shape_fn((q.len(), k.len()), |(n, m)| {
        oracle_attention_logit(&q[n], &k[m], rope.row(n), rope.row(m), &phi[n], &phi[m]) / d.sqrt()
    })
}

/// Output of a single camera-conditioned attention head.
pub fn oracle_head_output(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    rope: &ComplexMatrix,
    phi_qk: &Array2<f64>,
    phi_vo: &Array2<f64>,
) -> Array2<f64> {
    let logits = oracle_logit_matrix(q, k, rope, phi_qk);
    let (v_rows, phi_rows) = (rows_of(v), rows_of(phi_vo));
    let mut out = Array2::zeros(q.raw_dim());
    for n in 0..q.nrows() {
        let a = oracle_softmax(&logits.row(n).to_vec());
        let o = oracle_geometry_aware_output(&a, &v_rows, &phi_rows, &phi_rows[n]);
        for (j, x) in o.into_iter().enumerate() {
            out[[n, j]] = x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn logit_trivial_cases() {
        let q = [0.3, -1.2, 2.0, 0.5];
        let k = [1.1, 0.4, -0.7, 0.9];
        let one = [Complex64::new(1.0, 0.0); 2];
        let zero = [0.0; 2];
        let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((oracle_attention_logit(&q, &k, &one, &one, &zero, &zero) - dot).abs() < 1e-15);
        let v = oracle_attention_logit(&[1.0, 0.0], &[1.0, 0.0], &one[..1], &one[..1], &[PI], &[0.0]);
        assert!((v + 1.0).abs() < 1e-15);
    }

    #[test]
    fn logit_hand_expansion() {
        // q̄ = 1 + 2i, k̄ = 3 − i, total phase π/2:
        // (1 + 2i)(3 + i)·i = (1 + 7i)·i = −7 + i
        let rope_n = [Complex64::from_polar(1.0, 0.25)];
        let rope_m = [Complex64::from_polar(1.0, 0.25 - PI / 4.0)];
        let v = oracle_attention_logit(&[1.0, 2.0], &[3.0, -1.0], &rope_n, &rope_m, &[PI / 8.0], &[-PI / 8.0]);
        assert!((v + 7.0).abs() < 1e-12);
    }

    #[test]
    fn geometry_output_cases() {
        let v = vec![vec![1.0, 2.0, -0.5, 0.25], vec![3.0, -1.0, 0.0, 1.0]];
        let zeros = vec![vec![0.0, 0.0]; 2];
        let out = oracle_geometry_aware_output(&[0.25, 0.75], &v, &zeros, &[0.0, 0.0]);
        for j in 0..4 {
            assert!((out[j] - (0.25 * v[0][j] + 0.75 * v[1][j])).abs() < 1e-15);
        }
        // one value, A = 1: rotation by φ_query − φ_value
        let out = oracle_geometry_aware_output(&[1.0], &v[..1], &[vec![0.4, -1.0]], &[1.0, 0.5]);
        let z0 = Complex64::new(1.0, 2.0) * Complex64::from_polar(1.0, 0.6);
        let z1 = Complex64::new(-0.5, 0.25) * Complex64::from_polar(1.0, 1.5);
        for (a, b) in out.iter().zip([z0.re, z0.im, z1.re, z1.im]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rope_3d_kronecker_layout() {
        let (f, h, w, d) = (2, 3, 2, 12);
        let r = oracle_rope_3d(f, h, w, d, 10000.0);
        assert_eq!((r.rows, r.cols), (12, 6));
        assert!(r.is_finite());
        let theta = oracle_theta(4, 10000.0);
        for fi in 0..f {
            for hi in 0..h {
                for wi in 0..w {
                    let row = r.row((fi * h + hi) * w + wi);
                    for (axis, p) in [fi, hi, wi].into_iter().enumerate() {
                        for c in 0..2 {
                            let want = Complex64::from_polar(1.0, p as f64 * theta[c]);
                            assert!((row[axis * 2 + c] - want).norm() < 1e-15);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = oracle_softmax(&[1.0, 900.0, -3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p[1] > 0.999);
    }
}
