//! Real spherical harmonics, Wigner-D rotation matrices, and real
//! Clebsch-Gordan coefficients for l <= 2, plus the irreps layout shared by
//! all equivariant features.
//!
//! Conventions: orthonormal real spherical harmonics with components ordered
//! m = -l..l, and the (y, z, x) ordering for l = 1 so that D(1, R) is a
//! permutation-similarity of R.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3};
use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Coeff3, Tensor};
use crate::error::{Result, XaneError};

pub const L_MAX: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn sign(self) -> f64 {
        match self {
            Parity::Even => 1.0,
            Parity::Odd => -1.0,
        }
    }

    /// Natural parity of the order-l spherical harmonics: (-1)^l.
    pub fn of_l(l: usize) -> Parity {
        if l % 2 == 0 {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    pub fn product(self, other: Parity) -> Parity {
        if self == other {
            Parity::Even
        } else {
            Parity::Odd
        }
    }
}

/// One (multiplicity, l, parity) entry of an irreps layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Irrep {
    pub mult: usize,
    pub l: usize,
    pub parity: Parity,
}

impl Irrep {
    pub fn comps(&self) -> usize {
        2 * self.l + 1
    }

    pub fn width(&self) -> usize {
        self.mult * self.comps()
    }
}

/// Ordered irrep entries with flat column offsets. Feature blocks are laid
/// out channel-major: channel c occupies comps consecutive columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IrrepsLayout {
    pub entries: Vec<Irrep>,
    pub offsets: Vec<usize>,
}

impl IrrepsLayout {
    pub fn new(entries: Vec<Irrep>) -> Self {
        let mut offsets = Vec::with_capacity(entries.len());
        let mut off = 0;
        for e in &entries {
            offsets.push(off);
            off += e.width();
        }
        IrrepsLayout { entries, offsets }
    }

    /// The hidden layout m0 x 0e + m1 x 1o + m2 x 2e; zero multiplicities
    /// are dropped.
    pub fn hidden(m0: usize, m1: usize, m2: usize) -> Self {
        let mut entries = Vec::new();
        for (mult, l, parity) in [
            (m0, 0, Parity::Even),
            (m1, 1, Parity::Odd),
            (m2, 2, Parity::Even),
        ] {
            if mult > 0 {
                entries.push(Irrep { mult, l, parity });
            }
        }
        IrrepsLayout::new(entries)
    }

    pub fn scalars(m0: usize) -> Self {
        IrrepsLayout::new(vec![Irrep {
            mult: m0,
            l: 0,
            parity: Parity::Even,
        }])
    }

    pub fn dim(&self) -> usize {
        self.entries.iter().map(|e| e.width()).sum()
    }

    pub fn mult_of_l(&self, l: usize) -> usize {
        self.entries
            .iter()
            .filter(|e| e.l == l)
            .map(|e| e.mult)
            .sum()
    }
}

/// Orthonormal real spherical harmonics for l <= 2 at a unit vector,
/// component order m = -l..l.
pub fn real_sph_harm(l: usize, u: [f64; 3]) -> Result<Vec<f64>> {
    let n2 = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
    if (n2.sqrt() - 1.0).abs() > 1e-9 {
        return Err(XaneError::InvalidArgument(format!(
            "real_sph_harm: |u| = {} not unit",
            n2.sqrt()
        )));
    }
    let (x, y, z) = (u[0], u[1], u[2]);
    match l {
        0 => Ok(vec![0.5 / PI.sqrt()]),
        1 => {
            let c = (3.0 / (4.0 * PI)).sqrt();
            Ok(vec![c * y, c * z, c * x])
        }
        2 => {
            let c1 = 0.5 * (15.0 / PI).sqrt();
            let c2 = 0.25 * (5.0 / PI).sqrt();
            let c3 = 0.25 * (15.0 / PI).sqrt();
            Ok(vec![
                c1 * x * y,
                c1 * y * z,
                c2 * (3.0 * z * z - 1.0),
                c1 * x * z,
                c3 * (x * x - y * y),
            ])
        }
        _ => Err(XaneError::InvalidArgument(format!(
            "real_sph_harm: l = {} > 2",
            l
        ))),
    }
}

/// All spherical harmonics 0..=l_max stacked into one vector.
pub fn sph_harm_stack(l_max: usize, u: [f64; 3]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity((l_max + 1) * (l_max + 1));
    for l in 0..=l_max {
        out.extend(real_sph_harm(l, u)?);
    }
    Ok(out)
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let rtr = r.transpose() * r;
    let mut dev = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((rtr[(i, j)] - id).abs());
        }
    }
    if dev > 1e-9 {
        return Err(XaneError::InvalidArgument(format!(
            "wigner_d: R not orthogonal (dev {})",
            dev
        )));
    }
    if (r.determinant() - 1.0).abs() > 1e-9 {
        return Err(XaneError::InvalidArgument(
            "wigner_d: det R != +1; factor reflections as rotation x inversion".into(),
        ));
    }
    Ok(())
}

/// Fixed set of well-spread unit vectors used to solve for D(2, R).
fn sample_units() -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5048);
    (0..12).map(|_| random_unit(&mut rng)).collect()
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Wigner-D matrix of the real order-l irrep: real_sph_harm(l, R u) =
/// D(l, R) real_sph_harm(l, u).
pub fn wigner_d(l: usize, r: &Matrix3<f64>) -> Result<DMatrix<f64>> {
    check_rotation(r)?;
    match l {
        0 => Ok(DMatrix::identity(1, 1)),
        1 => {
            // similarity through the (y, z, x) component ordering
            let perm = [1usize, 2, 0];
            let mut d = DMatrix::zeros(3, 3);
            for a in 0..3 {
                for b in 0..3 {
                    d[(a, b)] = r[(perm[a], perm[b])];
                }
            }
            Ok(d)
        }
        2 => {
            // solve D A = B from samples: A columns Y(u), B columns Y(R u)
            let units = sample_units();
            let n = units.len();
            let mut a = DMatrix::zeros(5, n);
            let mut b = DMatrix::zeros(5, n);
            for (k, &u) in units.iter().enumerate() {
                let yu = real_sph_harm(2, u)?;
                let ru = r * nalgebra::Vector3::new(u[0], u[1], u[2]);
                let yru = real_sph_harm(2, [ru[0], ru[1], ru[2]])?;
                for i in 0..5 {
                    a[(i, k)] = yu[i];
                    b[(i, k)] = yru[i];
                }
            }
            let aat = &a * a.transpose();
            let bat = &b * a.transpose();
            let inv = aat.try_inverse().ok_or_else(|| {
                XaneError::Other("wigner_d: degenerate sample matrix".into())
            })?;
            Ok(bat * inv)
        }
        _ => Err(XaneError::InvalidArgument(format!(
            "wigner_d: l = {} > 2",
            l
        ))),
    }
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    // QR of a random Gaussian-ish matrix, sign-fixed to det +1
    loop {
        let m = Matrix3::from_fn(|_, _| rng.gen_range(-1.0f64..1.0));
        let qr = m.qr();
        let mut q = qr.q();
        let r = qr.r();
        for i in 0..3 {
            if r[(i, i)] < 0.0 {
                for j in 0..3 {
                    q[(j, i)] = -q[(j, i)];
                }
            }
        }
        if q.determinant() < 0.0 {
            for j in 0..3 {
                q[(j, 2)] = -q[(j, 2)];
            }
        }
        if (q.determinant() - 1.0).abs() < 1e-12 {
            return q;
        }
    }
}

/// Real Clebsch-Gordan block for (l1, l2 -> l3), Frobenius-normalized, or
/// the zero block when the selection rule fails. Obtained by solving the
/// rotation-invariance constraint numerically.
pub fn cg_real(l1: usize, l2: usize, l3: usize) -> Result<Arc<Coeff3>> {
    if l1 > L_MAX || l2 > L_MAX || l3 > L_MAX {
        return Err(XaneError::InvalidArgument(format!(
            "cg_real: ({}, {}, {}) out of range",
            l1, l2, l3
        )));
    }
    Ok(CG_CACHE[l1 * 9 + l2 * 3 + l3].clone())
}

static CG_CACHE: Lazy<Vec<Arc<Coeff3>>> = Lazy::new(|| {
    let mut out = Vec::with_capacity(27);
    for l1 in 0..=L_MAX {
        for l2 in 0..=L_MAX {
            for l3 in 0..=L_MAX {
                out.push(Arc::new(compute_cg(l1, l2, l3)));
            }
        }
    }
    out
});

fn compute_cg(l1: usize, l2: usize, l3: usize) -> Coeff3 {
    let (d1, d2, d3) = (2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1);
    let dim = d1 * d2 * d3;
    if l3 + l1 < l2 || l3 + l2 < l1 || l3 > l1 + l2 {
        return Coeff3::from_dense(d1, d2, d3, &vec![0.0; dim]);
    }
    // Stack (D1 x D2 x D3 - I) over sampled rotations; the invariant C is
    // the null vector.
    let mut rng = ChaCha8Rng::seed_from_u64(0xC6C6);
    let n_rot = 6;
    let mut m = DMatrix::zeros(n_rot * dim, dim);
    for s in 0..n_rot {
        let r = random_rotation(&mut rng);
        let da = wigner_d(l1, &r).unwrap();
        let db = wigner_d(l2, &r).unwrap();
        let dc = wigner_d(l3, &r).unwrap();
        for a in 0..d1 {
            for b in 0..d2 {
                for c in 0..d3 {
                    let row = s * dim + (a * d2 + b) * d3 + c;
                    for ap in 0..d1 {
                        for bp in 0..d2 {
                            for cp in 0..d3 {
                                let col = (ap * d2 + bp) * d3 + cp;
                                let mut v = da[(a, ap)] * db[(b, bp)] * dc[(c, cp)];
                                if col == (a * d2 + b) * d3 + c && ap == a && bp == b && cp == c {
                                    v -= 1.0;
                                }
                                m[(row, col)] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    let svd = m.svd(false, true);
    let vt = svd.v_t.unwrap();
    let sv = svd.singular_values;
    // smallest singular value's right vector
    let mut min_i = 0;
    for i in 1..sv.len() {
        if sv[i] < sv[min_i] {
            min_i = i;
        }
    }
    let mut c: DVector<f64> = vt.row(min_i).transpose();
    // Frobenius norm 1; deterministic sign: first entry above tolerance positive
    let norm = c.norm();
    c /= norm;
    for i in 0..c.len() {
        if c[i].abs() > 1e-8 {
            if c[i] < 0.0 {
                c = -c;
            }
            break;
        }
    }
    // snap tiny residuals to exact zero so the sparse nonzero list stays small
    let vals: Vec<f64> = c.iter().map(|&v| if v.abs() < 1e-12 { 0.0 } else { v }).collect();
    Coeff3::from_dense(d1, d2, d3, &vals)
}

/// Apply the block-diagonal Wigner-D of a rotation (optionally composed with
/// inversion) to every row of an equivariant feature tensor.
pub fn rotate_feature(
    x: &Tensor,
    layout: &IrrepsLayout,
    r: &Matrix3<f64>,
    improper: bool,
) -> Result<Tensor> {
    if x.cols() != layout.dim() {
        return Err(XaneError::ShapeMismatch {
            op: "rotate_feature",
            detail: format!("feature cols {} != layout dim {}", x.cols(), layout.dim()),
        });
    }
    let mut out = x.clone();
    for (e, entry) in layout.entries.iter().enumerate() {
        let d = wigner_d(entry.l, r)?;
        let sign = if improper { entry.parity.sign() } else { 1.0 };
        let k = entry.comps();
        let off = layout.offsets[e];
        for row in 0..x.rows() {
            for ch in 0..entry.mult {
                let base = off + ch * k;
                let mut rotated = vec![0.0; k];
                for a in 0..k {
                    let mut s = 0.0;
                    for b in 0..k {
                        s += d[(a, b)] * x.at(row, base + b);
                    }
                    rotated[a] = sign * s;
                }
                for a in 0..k {
                    out.set(row, base + a, rotated[a]);
                }
            }
        }
    }
    Ok(out)
}
