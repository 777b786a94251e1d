//! Periodic atomic graphs: shift-corrected edge vectors, absorber masks,
//! per-absorber graph expansion, and batching.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, XaneError};

/// A periodic (or partially periodic) atomic structure in Cartesian
/// angstroms. Lattice rows are the cell vectors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Structure {
    pub lattice: [[f64; 3]; 3],
    pub pbc: [bool; 3],
    pub positions: Vec<[f64; 3]>,
    pub numbers: Vec<u32>,
    pub absorber_sites: Vec<usize>,
}

impl Structure {
    pub fn n_atoms(&self) -> usize {
        self.positions.len()
    }

    fn lattice_matrix(&self) -> Matrix3<f64> {
        // rows are cell vectors
        Matrix3::from_fn(|i, j| self.lattice[i][j])
    }

    fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(XaneError::InvalidArgument("structure has no atoms".into()));
        }
        if self.numbers.len() != self.positions.len() {
            return Err(XaneError::InvalidArgument(
                "numbers/positions length mismatch".into(),
            ));
        }
        for &a in &self.absorber_sites {
            if a >= self.n_atoms() {
                return Err(XaneError::InvalidArgument(format!(
                    "absorber site {} out of range",
                    a
                )));
            }
        }
        if self.pbc.iter().any(|&b| b) {
            let det = self.lattice_matrix().determinant();
            if det.abs() < 1e-9 {
                return Err(XaneError::InvalidArgument(
                    "lattice rows are linearly dependent".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Directed graph over one structure with PBC-corrected edge vectors
/// x_ij = r_j - r_i + s_ij and exactly one absorber marked.
#[derive(Clone, Debug)]
pub struct AtomicGraph {
    pub numbers: Vec<u32>,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_vec: Vec<[f64; 3]>,
    pub edge_len: Vec<f64>,
    pub absorber_mask: Vec<bool>,
}

impl AtomicGraph {
    pub fn n_atoms(&self) -> usize {
        self.numbers.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_src.len()
    }
}

const MAX_IMAGES_PER_AXIS: i64 = 16;

/// Number of periodic images needed per axis so that every pair within
/// r_max is found, from the perpendicular cell heights.
fn image_bounds(lattice: &Matrix3<f64>, pbc: [bool; 3], r_max: f64) -> Result<[i64; 3]> {
    let a0 = Vector3::new(lattice[(0, 0)], lattice[(0, 1)], lattice[(0, 2)]);
    let a1 = Vector3::new(lattice[(1, 0)], lattice[(1, 1)], lattice[(1, 2)]);
    let a2 = Vector3::new(lattice[(2, 0)], lattice[(2, 1)], lattice[(2, 2)]);
    let vol = a0.dot(&a1.cross(&a2)).abs();
    let heights = [
        vol / a1.cross(&a2).norm(),
        vol / a2.cross(&a0).norm(),
        vol / a0.cross(&a1).norm(),
    ];
    let mut out = [0i64; 3];
    for ax in 0..3 {
        if pbc[ax] {
            let n = (r_max / heights[ax]).ceil() as i64;
            if n > MAX_IMAGES_PER_AXIS {
                return Err(XaneError::InvalidArgument(format!(
                    "r_max {} needs {} images along axis {} (> {})",
                    r_max, n, ax, MAX_IMAGES_PER_AXIS
                )));
            }
            out[ax] = n;
        }
    }
    Ok(out)
}

/// Build the directed neighbor graph of a structure with cutoff `r_max`,
/// marking `absorber` in the mask. Includes self-image pairs (i == j with a
/// nonzero shift); edges at exactly d == r_max are kept.
pub fn build_graph(s: &Structure, r_max: f64, absorber: usize) -> Result<AtomicGraph> {
    s.validate()?;
    if r_max <= 0.0 {
        return Err(XaneError::InvalidArgument("r_max must be positive".into()));
    }
    if absorber >= s.n_atoms() {
        return Err(XaneError::InvalidArgument(format!(
            "absorber {} out of range",
            absorber
        )));
    }
    let lat = s.lattice_matrix();
    let bounds = image_bounds(&lat, s.pbc, r_max)?;
    let mut shifts: Vec<Vector3<f64>> = Vec::new();
    for i0 in -bounds[0]..=bounds[0] {
        for i1 in -bounds[1]..=bounds[1] {
            for i2 in -bounds[2]..=bounds[2] {
                let s_vec = lat.transpose()
                    * Vector3::new(i0 as f64, i1 as f64, i2 as f64);
                shifts.push(s_vec);
            }
        }
    }
    let n = s.n_atoms();
    let mut g = AtomicGraph {
        numbers: s.numbers.clone(),
        edge_src: Vec::new(),
        edge_dst: Vec::new(),
        edge_vec: Vec::new(),
        edge_len: Vec::new(),
        absorber_mask: vec![false; n],
    };
    g.absorber_mask[absorber] = true;
    for i in 0..n {
        let ri = Vector3::from_row_slice(&s.positions[i]);
        for j in 0..n {
            let rj = Vector3::from_row_slice(&s.positions[j]);
            for shift in &shifts {
                let x = rj - ri + shift;
                let d = x.norm();
                if d > 1e-12 && d <= r_max {
                    // message flows source j -> destination i
                    g.edge_src.push(j);
                    g.edge_dst.push(i);
                    g.edge_vec.push([x[0], x[1], x[2]]);
                    g.edge_len.push(d);
                }
            }
        }
    }
    Ok(g)
}

/// One graph per absorber site; identical topology, masks differ.
pub fn expand_absorber_graphs(s: &Structure, r_max: f64) -> Result<Vec<AtomicGraph>> {
    if s.absorber_sites.is_empty() {
        return Err(XaneError::InvalidArgument(
            "structure has no absorber sites".into(),
        ));
    }
    s.absorber_sites
        .iter()
        .map(|&a| build_graph(s, r_max, a))
        .collect()
}

/// Concatenated graphs with per-graph segment ids for pooling and losses.
#[derive(Clone, Debug)]
pub struct Batch {
    pub numbers: Vec<u32>,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_vec: Vec<[f64; 3]>,
    pub edge_len: Vec<f64>,
    pub absorber_mask: Vec<bool>,
    /// graph id per atom
    pub segments: Vec<usize>,
    pub n_graphs: usize,
}

impl Batch {
    pub fn n_atoms(&self) -> usize {
        self.numbers.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_src.len()
    }
}

pub fn batch(graphs: &[AtomicGraph]) -> Result<Batch> {
    if graphs.is_empty() {
        return Err(XaneError::InvalidArgument("empty batch".into()));
    }
    let mut b = Batch {
        numbers: Vec::new(),
        edge_src: Vec::new(),
        edge_dst: Vec::new(),
        edge_vec: Vec::new(),
        edge_len: Vec::new(),
        absorber_mask: Vec::new(),
        segments: Vec::new(),
        n_graphs: graphs.len(),
    };
    let mut offset = 0usize;
    for (gi, g) in graphs.iter().enumerate() {
        b.numbers.extend_from_slice(&g.numbers);
        b.absorber_mask.extend_from_slice(&g.absorber_mask);
        b.segments.extend(std::iter::repeat(gi).take(g.n_atoms()));
        b.edge_src.extend(g.edge_src.iter().map(|&s| s + offset));
        b.edge_dst.extend(g.edge_dst.iter().map(|&d| d + offset));
        b.edge_vec.extend_from_slice(&g.edge_vec);
        b.edge_len.extend_from_slice(&g.edge_len);
        offset += g.n_atoms();
    }
    Ok(b)
}
