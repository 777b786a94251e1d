//! Composite training loss: spectrum MSE plus first/second finite-difference
//! derivative MSEs and the auxiliary E0 L1 term, with the linear annealing
//! schedule for the derivative weights.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, XaneError};
use crate::spectra::SpectrumGrid;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_grad: f64,
    pub lambda_curv: f64,
    pub lambda_e0: f64,
    pub anneal_start: usize,
    pub anneal_len: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_grad: 1.0,
            lambda_curv: 1.0,
            lambda_e0: 0.1,
            anneal_start: 20,
            anneal_len: 15,
        }
    }
}

/// Effective derivative weights at a given epoch: zero before the ramp,
/// linear over [start, start+len), final afterwards. lambda_e0 is constant.
pub fn anneal_weight(epoch: usize, w: &LossWeights) -> (f64, f64) {
    let frac = if w.anneal_len == 0 {
        if epoch >= w.anneal_start { 1.0 } else { 0.0 }
    } else {
        ((epoch as f64 - w.anneal_start as f64) / w.anneal_len as f64).clamp(0.0, 1.0)
    };
    (w.lambda_grad * frac, w.lambda_curv * frac)
}

/// Per-term unweighted values plus the weighted total actually optimized.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub spec: f64,
    pub grad: f64,
    pub curv: f64,
    pub e0: f64,
}

/// Forward first differences of each row, on the tape; matches
/// spectra::finite_derivatives applied rowwise.
pub fn tape_derivatives(tape: &mut Tape, y: Var, grid: &SpectrumGrid) -> Result<(Var, Var)> {
    let n = grid.n();
    let (_, cols) = tape.value(y).shape();
    if cols != n {
        return Err(XaneError::ShapeMismatch {
            op: "tape_derivatives",
            detail: format!("spectrum cols {} != grid {}", cols, n),
        });
    }
    if n < 3 {
        return Err(XaneError::InvalidArgument(
            "tape_derivatives: need >= 3 grid points".into(),
        ));
    }
    let e = grid.energies();
    let hi = tape.slice_cols(y, 1, n - 1)?;
    let lo = tape.slice_cols(y, 0, n - 1)?;
    let diff = tape.sub(hi, lo)?;
    let inv_de = tape.constant(crate::autodiff::Tensor::row(
        (0..n - 1).map(|i| 1.0 / (e[i + 1] - e[i])).collect(),
    ))?;
    let dy = tape.mul(diff, inv_de)?;

    let dhi = tape.slice_cols(dy, 1, n - 2)?;
    let dlo = tape.slice_cols(dy, 0, n - 2)?;
    let ddiff = tape.sub(dhi, dlo)?;
    let inv_mid = tape.constant(crate::autodiff::Tensor::row(
        (0..n - 2)
            .map(|i| 1.0 / (0.5 * ((e[i + 1] + e[i + 2]) - (e[i] + e[i + 1]))))
            .collect(),
    ))?;
    let d2y = tape.mul(ddiff, inv_mid)?;
    Ok((dy, d2y))
}

fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

/// Weighted composite loss over a batch of spectra (rows) and E0 scalars.
/// pred/target: [G, n] on the grid; e0 values: [G, 1], z-scored.
pub fn composite_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    pred_e0: Var,
    target_e0: Var,
    grid: &SpectrumGrid,
    lambda_grad: f64,
    lambda_curv: f64,
    lambda_e0: f64,
) -> Result<(Var, LossReport)> {
    let ps = tape.value(pred).shape();
    let ts = tape.value(target).shape();
    if ps != ts {
        return Err(XaneError::ShapeMismatch {
            op: "composite_loss",
            detail: format!("pred {:?} vs target {:?}", ps, ts),
        });
    }

    let l_spec = mse(tape, pred, target)?;
    let (dp, d2p) = tape_derivatives(tape, pred, grid)?;
    let (dt, d2t) = tape_derivatives(tape, target, grid)?;
    let l_grad = mse(tape, dp, dt)?;
    let l_curv = mse(tape, d2p, d2t)?;
    let de0 = tape.sub(pred_e0, target_e0)?;
    let abs_de0 = tape.abs(de0)?;
    let l_e0 = tape.mean_all(abs_de0)?;

    let wg = tape.scale(l_grad, lambda_grad)?;
    let wc = tape.scale(l_curv, lambda_curv)?;
    let we = tape.scale(l_e0, lambda_e0)?;
    let t1 = tape.add(l_spec, wg)?;
    let t2 = tape.add(t1, wc)?;
    let total = tape.add(t2, we)?;

    let report = LossReport {
        total: tape.value(total).item(),
        spec: tape.value(l_spec).item(),
        grad: tape.value(l_grad).item(),
        curv: tape.value(l_curv).item(),
        e0: tape.value(l_e0).item(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{finite_diff_check, ParamStore, Tensor};
    use crate::spectra::finite_derivatives;

    fn rand_rows(rng: &mut ChaCha8Rng, g: usize, n: usize) -> Tensor {
        Tensor::from_vec(g, n, (0..g * n).map(|_| rng.gen_range(-1.0..1.5)).collect()).unwrap()
    }

    #[test]
    fn identical_inputs_give_zero_everywhere() {
        let grid = SpectrumGrid::canonical();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = rand_rows(&mut rng, 3, grid.n());
        let e0 = Tensor::col(vec![0.3, -0.1, 1.0]);
        let mut tape = Tape::new();
        let a = tape.constant(y.clone()).unwrap();
        let b = tape.constant(y).unwrap();
        let ea = tape.constant(e0.clone()).unwrap();
        let eb = tape.constant(e0).unwrap();
        let (_, rep) =
            composite_loss(&mut tape, a, b, ea, eb, &grid, 1.0, 1.0, 0.1).unwrap();
        assert_eq!(rep.total, 0.0);
        assert_eq!(rep.spec, 0.0);
        assert_eq!(rep.grad, 0.0);
        assert_eq!(rep.curv, 0.0);
        assert_eq!(rep.e0, 0.0);
    }

    #[test]
    fn constant_offset_hits_only_the_spec_term() {
        let grid = SpectrumGrid::canonical();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = rand_rows(&mut rng, 2, grid.n());
        let c = 0.37;
        let mut shifted = y.clone();
        for v in shifted.data_mut() {
            *v += c;
        }
        let e0 = Tensor::col(vec![0.0, 0.0]);
        let mut tape = Tape::new();
        let a = tape.constant(shifted).unwrap();
        let b = tape.constant(y).unwrap();
        let ea = tape.constant(e0.clone()).unwrap();
        let eb = tape.constant(e0).unwrap();
        let (_, rep) =
            composite_loss(&mut tape, a, b, ea, eb, &grid, 1.0, 1.0, 0.1).unwrap();
        assert!((rep.spec - c * c).abs() < 1e-12);
        assert!(rep.grad < 1e-24);
        assert!(rep.curv < 1e-24);
    }

    #[test]
    fn matches_standalone_derivative_oracle() {
        let grid = SpectrumGrid::canonical();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = 4;
        let p = rand_rows(&mut rng, g, grid.n());
        let t = rand_rows(&mut rng, g, grid.n());
        let pe: Vec<f64> = (0..g).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let te: Vec<f64> = (0..g).map(|_| rng.gen_range(-2.0..2.0)).collect();

        // independent recomputation from the plain finite-difference oracle
        let (mut spec, mut grad, mut curv, mut e0s) = (0.0, 0.0, 0.0, 0.0);
        for r in 0..g {
            let pr = p.row_slice(r).to_vec();
            let tr = t.row_slice(r).to_vec();
            for (a, b) in pr.iter().zip(&tr) {
                spec += (a - b) * (a - b);
            }
            let (dp, d2p) = finite_derivatives(&pr, &grid).unwrap();
            let (dt, d2t) = finite_derivatives(&tr, &grid).unwrap();
            for (a, b) in dp.iter().zip(&dt) {
                grad += (a - b) * (a - b);
            }
            for (a, b) in d2p.iter().zip(&d2t) {
                curv += (a - b) * (a - b);
            }
            e0s += (pe[r] - te[r]).abs();
        }
        spec /= (g * grid.n()) as f64;
        grad /= (g * (grid.n() - 1)) as f64;
        curv /= (g * (grid.n() - 2)) as f64;
        e0s /= g as f64;
        let (lg, lc, le) = (0.8, 0.4, 0.1);
        let expected_total = spec + lg * grad + lc * curv + le * e0s;

        let mut tape = Tape::new();
        let a = tape.constant(p).unwrap();
        let b = tape.constant(t).unwrap();
        let ea = tape.constant(Tensor::col(pe)).unwrap();
        let eb = tape.constant(Tensor::col(te)).unwrap();
        let (_, rep) = composite_loss(&mut tape, a, b, ea, eb, &grid, lg, lc, le).unwrap();
        assert!((rep.spec - spec).abs() < 1e-12);
        assert!((rep.grad - grad).abs() < 1e-12);
        assert!((rep.curv - curv).abs() < 1e-12);
        assert!((rep.e0 - e0s).abs() < 1e-12);
        assert!((rep.total - expected_total).abs() < 1e-12);
    }

    #[test]
    fn anneal_schedule() {
        let w = LossWeights::default();
        assert_eq!(anneal_weight(0, &w), (0.0, 0.0));
        assert_eq!(anneal_weight(19, &w), (0.0, 0.0));
        assert_eq!(anneal_weight(20, &w), (0.0, 0.0));
        let (g27, c27) = anneal_weight(27, &w);
        assert!((g27 - 7.0 / 15.0).abs() < 1e-15);
        assert!((c27 - 7.0 / 15.0).abs() < 1e-15);
        assert_eq!(anneal_weight(35, &w), (1.0, 1.0));
        assert_eq!(anneal_weight(300, &w), (1.0, 1.0));
        let w2 = LossWeights {
            lambda_grad: 2.0,
            lambda_curv: 0.5,
            ..w
        };
        let (g, c) = anneal_weight(26, &w2);
        assert!((g - 2.0 * 6.0 / 15.0).abs() < 1e-15);
        assert!((c - 0.5 * 6.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn composite_loss_gradcheck() {
        let grid = SpectrumGrid::uniform(-30.0, 100.0, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.add("pred", rand_rows(&mut rng, 2, grid.n())).unwrap();
        store
            .add("pred_e0", Tensor::col(vec![0.7, -0.4]))
            .unwrap();
        let target = rand_rows(&mut rng, 2, grid.n());
        let te0 = Tensor::col(vec![0.1, 0.2]);
        let max_rel = finite_diff_check(
            |tape, vars| {
                let t = tape.constant(target.clone())?;
                let e = tape.constant(te0.clone())?;
                let (total, _) =
                    composite_loss(tape, vars[0], t, vars[1], e, &grid, 0.7, 0.3, 0.1)?;
                Ok(total)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(max_rel < 1e-6, "max rel {}", max_rel);
    }
}
