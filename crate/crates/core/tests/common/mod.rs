//! Brute-force oracles and measurement helpers shared by the integration tests.
#![allow(dead_code)]

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Solves `A X = B` by Gaussian elimination with partial pivoting.
pub fn dense_solve(a: &Rows, b: &Rows) -> Rows {
    let n = a.len();
    let m = b[0].len();
    let mut aug: Rows = a
        .iter()
        .zip(b)
        .map(|(r, s)| r.iter().chain(s).copied().collect())
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
            .unwrap();
        aug.swap(col, pivot);
        for row in col + 1..n {
            let f = aug[row][col] / aug[col][col];
            for k in col..n + m {
                aug[row][k] -= f * aug[col][k];
            }
        }
    }
    let mut x = vec![vec![0.0; m]; n];
    for row in (0..n).rev() {
        for k in 0..m {
            let mut acc = aug[row][n + k];
            for j in row + 1..n {
                acc -= aug[row][j] * x[j][k];
            }
            x[row][k] = acc / aug[row][row];
        }
    }
    x
}

/// Gaussian product kernel on concatenated windows of scalar sources:
/// `exp(-Σ_d Σ_τ (a − b)² / 2ξ²)`, for pasts (`past = true`) or futures of
/// the anchors.
pub fn gaussian_gram(columns: &[Vec<f64>], anchors: &[usize], len: usize, past: bool, bandwidth: f64) -> Rows {
    let window = |t: usize| -> Vec<f64> {
        let times: Vec<usize> = if past {
            (0..len).map(|k| t - k).collect()
        } else {
            (1..=len).map(|k| t + k).collect()
        };
        columns.iter().flat_map(|c| times.iter().map(|&s| c[s])).collect()
    };
    let windows: Vec<Vec<f64>> = anchors.iter().map(|&t| window(t)).collect();
    let mut g = vec![vec![0.0; anchors.len()]; anchors.len()];
    for i in 0..anchors.len() {
        for j in 0..anchors.len() {
            let d2: f64 = windows[i].iter().zip(&windows[j]).map(|(x, y)| (x - y) * (x - y)).sum();
            g[i][j] = (-d2 / (2.0 * bandwidth * bandwidth)).exp();
        }
    }
    g
}

/// `A = (Gˣ + λN I)⁻¹ Gˣ`.
pub fn coefficients(gx: &Rows, lambda: f64) -> Rows {
    let n = gx.len();
    let mut lhs = gx.clone();
    for (i, row) in lhs.iter_mut().enumerate() {
        row[i] += lambda * n as f64;
    }
    dense_solve(&lhs, gx)
}

/// `G_il = Σ_j Σ_k A_ji A_kl Gʸ_jk`.
pub fn state_gram(a: &Rows, gy: &Rows) -> Rows {
    let n = a.len();
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for l in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                for k in 0..n {
                    acc += a[j][i] * a[k][l] * gy[j][k];
                }
            }
            g[i][l] = acc;
        }
    }
    g
}

/// Density-normalized Markov matrix and its row sums, with negative
/// similarities clamped to zero.
pub fn markov(gcs: &Rows) -> (Rows, Vec<f64>) {
    let n = gcs.len();
    let g: Rows = gcs.iter().map(|r| r.iter().map(|&x| x.max(0.0)).collect()).collect();
    let q: Vec<f64> = g.iter().map(|r| r.iter().sum()).collect();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for l in 0..n {
            k[i][l] = g[i][l] / (q[i] * q[l]);
        }
    }
    let r: Vec<f64> = k.iter().map(|row| row.iter().sum()).collect();
    let p = (0..n).map(|i| (0..n).map(|l| k[i][l] / r[i]).collect()).collect();
    (p, r)
}

/// Spectrum of a general square matrix from the real Schur form, sorted by
/// decreasing modulus then decreasing value. Panics on complex pairs.
pub fn real_spectrum(p: &Rows) -> Vec<f64> {
    let n = p.len();
    let m = DMatrix::from_fn(n, n, |i, j| p[i][j]);
    let mut values: Vec<f64> = m
        .complex_eigenvalues()
        .iter()
        .map(|z| {
            assert!(z.im.abs() < 1e-9, "complex eigenvalue {z}");
            z.re
        })
        .collect();
    values.sort_by(|a, b| b.abs().total_cmp(&a.abs()).then(b.total_cmp(a)));
    values
}

/// Right eigenvector of `p` for the eigenvalue `lambda` by shifted inverse
/// iteration, scaled to unit `π`-weighted norm with `π = r / Σr` and signed so
/// that the largest `√r_i x_i` is positive. The flag is set when the two
/// largest entries tie in magnitude, leaving the sign undetermined.
pub fn right_eigenvector(p: &Rows, lambda: f64, r: &[f64]) -> (Vec<f64>, bool) {
    let n = p.len();
    let shift = lambda + 1e-9 * lambda.abs().max(1.0);
    let mut shifted = p.clone();
    for (i, row) in shifted.iter_mut().enumerate() {
        row[i] -= shift;
    }
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
    for _ in 0..6 {
        let rhs: Rows = x.iter().map(|&v| vec![v]).collect();
        x = dense_solve(&shifted, &rhs).into_iter().map(|v| v[0]).collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().for_each(|v| *v /= norm);
    }
    let total: f64 = r.iter().sum();
    let weighted = x.iter().zip(r).map(|(v, ri)| v * v * ri / total).sum::<f64>().sqrt();
    let mut order: Vec<usize> = (0..n).collect();
    let size = |i: usize| (x[i] * r[i].sqrt()).abs();
    order.sort_by(|&i, &j| size(j).total_cmp(&size(i)));
    let lead = order[0];
    let tied = n > 1 && size(order[0]) - size(order[1]) <= 1e-9 * size(order[0]);
    let sign = if x[lead] < 0.0 { -1.0 } else { 1.0 };
    (x.iter().map(|v| sign * v / weighted).collect(), tied)
}

/// Length of the mean resultant of `angles − s·targets`, maximized over the
/// orientation `s = ±1`; 1 when the angles track the targets up to a constant
/// offset and orientation.
pub fn circular_resultant(angles: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(angles.len(), targets.len());
    [1.0, -1.0]
        .iter()
        .map(|s| {
            let (mut c, mut si) = (0.0, 0.0);
            for (a, t) in angles.iter().zip(targets) {
                c += (a - s * t).cos();
                si += (a - s * t).sin();
            }
            (c * c + si * si).sqrt() / angles.len() as f64
        })
        .fold(0.0, f64::max)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with farthest-point initialization from the first point.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iter: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut centers = vec![points[0].clone()];
    while centers.len() < k {
        let far = points
            .iter()
            .max_by(|a, b| {
                let da = centers.iter().map(|c| sq_dist(a, c)).fold(f64::MAX, f64::min);
                let db = centers.iter().map(|c| sq_dist(b, c)).fold(f64::MAX, f64::min);
                da.total_cmp(&db)
            })
            .unwrap();
        centers.push(far.clone());
    }
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..max_iter {
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                (0..k)
                    .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                    .unwrap()
            })
            .collect();
        if next == labels {
            break;
        }
        labels = next;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| p)
                .collect();
            if !members.is_empty() {
                for (d, x) in center.iter_mut().enumerate() {
                    *x = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
    }
    (labels, centers)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Fraction of matching labels under the best relabeling of `found`.
pub fn best_agreement(found: &[usize], truth: &[usize], k: usize) -> f64 {
    permutations(k)
        .iter()
        .map(|perm| found.iter().zip(truth).filter(|(&f, &t)| perm[f] == t).count())
        .max()
        .unwrap() as f64
        / found.len() as f64
}

/// One row of a coordinates.csv file.
#[derive(Clone, Debug)]
pub struct CoordinateRow {
    pub anchor: usize,
    pub block: String,
    pub time: usize,
    pub psi: Vec<f64>,
}

pub fn read_coordinates(path: &Path) -> Vec<CoordinateRow> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let psi_cols: Vec<usize> = (0..headers.len()).filter(|&i| headers[i].starts_with("psi_")).collect();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            CoordinateRow {
                anchor: r[0].parse().unwrap(),
                block: r[1].to_string(),
                time: r[2].parse().unwrap(),
                psi: psi_cols.iter().map(|&c| r[c].parse().unwrap()).collect(),
            }
        })
        .collect()
}

/// Prints a criterion verdict past the test harness output capture.
pub fn report(criterion: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[acceptance] {criterion}: {verdict} ({detail})");
}
