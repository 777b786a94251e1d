use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::finite_diff_check;
use crate::graph::{batch, build_graph, Structure};
use crate::so3::{random_rotation, rotate_feature};
use crate::spectra::SpectrumGrid;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        m0: 3,
        m1: 2,
        m2: 1,
        n_radial: 4,
        r_max: 4.0,
        readout_hidden: 8,
        attention_hidden: 4,
        gate_hidden: 4,
        e0_hidden: 4,
        dropout: 0.0,
        ..Default::default()
    }
}

fn random_molecule(seed: u64, n: usize) -> Structure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
            ]
        })
        .collect();
    let numbers = (0..n).map(|i| if i % 2 == 0 { 26 } else { 8 }).collect();
    Structure {
        lattice: [[20.0, 0.0, 0.0], [0.0, 20.0, 0.0], [0.0, 0.0, 20.0]],
        pbc: [false, false, false],
        positions,
        numbers,
        absorber_sites: vec![0],
    }
}

fn single_batch(s: &Structure, r_max: f64) -> crate::graph::Batch {
    let g = build_graph(s, r_max, 0).unwrap();
    batch(&[g]).unwrap()
}

#[test]
fn radial_basis_bessel_values() {
    let rc = 5.0;
    // vanishes at the cutoff
    let at_rc = radial_basis(rc, 16, rc, RadialKind::Bessel).unwrap();
    for v in at_rc {
        assert!(v.abs() < 1e-12);
    }
    // closed form at rc/2 for n = 1: cutoff factor is exactly 1/2 there
    let d = rc / 2.0;
    let b = radial_basis(d, 16, rc, RadialKind::Bessel).unwrap();
    let expect = (2.0 / rc).sqrt() * (PI * d / rc).sin() / d * 0.5;
    assert!((b[0] - expect).abs() < 1e-12);
    // series guard agrees with the analytic d -> 0 limit
    let near = radial_basis(1e-9, 4, rc, RadialKind::Bessel).unwrap();
    for (k, v) in near.iter().enumerate() {
        let limit = (2.0 / rc).sqrt() * (k + 1) as f64 * PI / rc;
        assert!((v - limit).abs() / limit < 1e-6, "n={} {} vs {}", k, v, limit);
    }
    assert!(radial_basis(0.0, 4, rc, RadialKind::Bessel).is_err());
    assert!(radial_basis(-1.0, 4, rc, RadialKind::Bessel).is_err());
    // beyond the cutoff everything is zero
    let far = radial_basis(rc + 1.0, 4, rc, RadialKind::Gaussian).unwrap();
    assert!(far.iter().all(|&v| v == 0.0));
}

#[test]
fn path_enumeration_counts() {
    let cfg = ModelConfig::default();
    let first = enumerate_paths(0, &IrrepsLayout::scalars(32), &cfg.tp_layout());
    assert_eq!(first.len(), 3); // 0e -> each output l via l_f = l
    let later = enumerate_paths(1, &cfg.hidden_layout(), &cfg.tp_layout());
    let count = |l_out: usize| {
        later
            .iter()
            .filter(|p| cfg.tp_layout().entries[p.out_entry].l == l_out)
            .count()
    };
    assert_eq!(count(0), 3);
    assert_eq!(count(1), 4);
    assert_eq!(count(2), 4);
    assert_eq!(later.len(), 11);

    let so = ModelConfig::scalar_only_variant();
    let sp = enumerate_paths(0, &IrrepsLayout::scalars(63), &so.tp_layout());
    assert_eq!(sp.len(), 1); // only 0e x 0e -> 0e survives
}

#[test]
fn isolated_atom_has_zero_features_and_zero_initial_spectrum() {
    let s = Structure {
        lattice: [[10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [0.0, 0.0, 10.0]],
        pbc: [false, false, false],
        positions: vec![[1.0, 1.0, 1.0]],
        numbers: vec![26],
        absorber_sites: vec![0],
    };
    let b = single_batch(&s, 4.0);
    assert_eq!(b.n_edges(), 0);
    let model = Model::new(tiny_config(), 7).unwrap();
    let grid = SpectrumGrid::canonical();
    let mut tape = Tape::new();
    let vars = model.store.inject(&mut tape).unwrap();
    let out = model
        .forward(&mut tape, &vars, &b, &grid, Mode::Eval, None)
        .unwrap();
    for &f in &out.block_features {
        for &v in tape.value(f).data() {
            assert!(v.abs() < 1e-12);
        }
    }
    for &v in tape.value(out.spectra).data() {
        assert_eq!(v, 0.0); // readout final layer is zero-initialized
    }
}

#[test]
fn initial_spectrum_is_zero_on_a_real_graph() {
    let s = random_molecule(11, 5);
    let b = single_batch(&s, 4.0);
    assert!(b.n_edges() > 0);
    let model = Model::new(tiny_config(), 3).unwrap();
    let grid = SpectrumGrid::canonical();
    let mut tape = Tape::new();
    let vars = model.store.inject(&mut tape).unwrap();
    let out = model
        .forward(&mut tape, &vars, &b, &grid, Mode::Eval, None)
        .unwrap();
    for &v in tape.value(out.coeffs).data() {
        assert_eq!(v, 0.0);
    }
    for &v in tape.value(out.spectra).data() {
        assert_eq!(v, 0.0);
    }
    // the E0 head is not zero-initialized, but must be finite
    assert!(tape.value(out.e0).item().is_finite());
}

fn forward_features(
    model: &Model,
    s: &Structure,
    grid: &SpectrumGrid,
) -> (Vec<Tensor>, Vec<f64>, f64) {
    let b = single_batch(s, model.config.r_max);
    let mut tape = Tape::new();
    let vars = model.store.inject(&mut tape).unwrap();
    let out = model
        .forward(&mut tape, &vars, &b, grid, Mode::Eval, None)
        .unwrap();
    let feats = out
        .block_features
        .iter()
        .map(|&f| tape.value(f).clone())
        .collect();
    (
        feats,
        tape.value(out.spectra).data().to_vec(),
        tape.value(out.e0).item(),
    )
}

#[test]
fn rotation_equivariance_of_features_and_invariance_of_outputs() {
    let cfg = tiny_config();
    let hidden = cfg.hidden_layout();
    let model = Model::new(cfg, 42).unwrap();
    let grid = SpectrumGrid::canonical();
    let s = random_molecule(5, 6);
    let (feats, spec, e0) = forward_features(&model, &s, &grid);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..3 {
        let r = random_rotation(&mut rng);
        let rot = |p: &[f64; 3]| {
            [
                r[(0, 0)] * p[0] + r[(0, 1)] * p[1] + r[(0, 2)] * p[2],
                r[(1, 0)] * p[0] + r[(1, 1)] * p[1] + r[(1, 2)] * p[2],
                r[(2, 0)] * p[0] + r[(2, 1)] * p[1] + r[(2, 2)] * p[2],
            ]
        };
        let mut s2 = s.clone();
        s2.positions = s.positions.iter().map(&rot).collect();
        s2.lattice = [
            rot(&s.lattice[0]),
            rot(&s.lattice[1]),
            rot(&s.lattice[2]),
        ];
        let (feats2, spec2, e02) = forward_features(&model, &s2, &grid);
        for (blk, (f, f2)) in feats.iter().zip(&feats2).enumerate() {
            let expected = rotate_feature(f, &hidden, &r, false).unwrap();
            let mut max_err: f64 = 0.0;
            for (a, b) in expected.data().iter().zip(f2.data()) {
                max_err = max_err.max((a - b).abs());
            }
            assert!(max_err < 1e-9, "block {} feature error {}", blk, max_err);
        }
        for (a, b) in spec.iter().zip(&spec2) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((e0 - e02).abs() < 1e-9);
    }
}

#[test]
fn inversion_flips_odd_blocks_and_preserves_outputs() {
    let cfg = tiny_config();
    let hidden = cfg.hidden_layout();
    let model = Model::new(cfg, 42).unwrap();
    let grid = SpectrumGrid::canonical();
    let s = random_molecule(8, 6);
    let (feats, spec, e0) = forward_features(&model, &s, &grid);

    let mut s2 = s.clone();
    s2.positions = s.positions.iter().map(|p| [-p[0], -p[1], -p[2]]).collect();
    s2.lattice = [
        [-s.lattice[0][0], -s.lattice[0][1], -s.lattice[0][2]],
        [-s.lattice[1][0], -s.lattice[1][1], -s.lattice[1][2]],
        [-s.lattice[2][0], -s.lattice[2][1], -s.lattice[2][2]],
    ];
    let (feats2, spec2, e02) = forward_features(&model, &s2, &grid);
    let ident = nalgebra::Matrix3::identity();
    for (f, f2) in feats.iter().zip(&feats2) {
        let expected = rotate_feature(f, &hidden, &ident, true).unwrap();
        for (a, b) in expected.data().iter().zip(f2.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
    for (a, b) in spec.iter().zip(&spec2) {
        assert!((a - b).abs() < 1e-10);
    }
    assert!((e0 - e02).abs() < 1e-10);
}

#[test]
fn forward_is_deterministic_and_seeded() {
    let s = random_molecule(21, 5);
    let grid = SpectrumGrid::canonical();
    let m1 = Model::new(tiny_config(), 9).unwrap();
    let m2 = Model::new(tiny_config(), 9).unwrap();
    for id in 0..m1.store.len() {
        assert_eq!(m1.store.value(id).data(), m2.store.value(id).data());
    }
    let (_, spec_a, e0_a) = forward_features(&m1, &s, &grid);
    let (_, spec_b, e0_b) = forward_features(&m1, &s, &grid);
    assert_eq!(spec_a, spec_b);
    assert_eq!(e0_a.to_bits(), e0_b.to_bits());
    let m3 = Model::new(tiny_config(), 10).unwrap();
    assert_ne!(
        m1.store.value(m1.store.id("embed.table").unwrap()).data(),
        m3.store.value(m3.store.id("embed.table").unwrap()).data()
    );
}

#[test]
fn tiny_model_end_to_end_gradcheck() {
    let mut cfg = tiny_config();
    cfg.layers = 2;
    let small_basis = BasisSpec::new(10, 2, true);
    let mut model = Model::with_basis(cfg, small_basis, 17).unwrap();
    // the zero-initialized readout head would hide most gradients; give it
    // small random values for the check
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for name in ["readout.w2", "readout.b2"] {
        let id = model.store.id(name).unwrap();
        for v in model.store.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
    }
    let s = random_molecule(31, 4);
    let b = single_batch(&s, model.config.r_max);
    let grid = SpectrumGrid::uniform(-30.0, 100.0, 20);
    let target: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin() * 0.5 + 0.8).collect();

    let max_rel = finite_diff_check(
        |tape, vars| {
            let out = model.forward(tape, vars, &b, &grid, Mode::Gradcheck, None)?;
            let t = tape.constant(Tensor::from_vec(1, 20, target.clone())?)?;
            let d = tape.sub(out.spectra, t)?;
            let sq = tape.mul(d, d)?;
            let spec_loss = tape.mean_all(sq)?;
            let e0sq = tape.mul(out.e0, out.e0)?;
            let e0_loss = tape.mean_all(e0sq)?;
            tape.add(spec_loss, e0_loss)
        },
        &model.store,
        1e-4,
    )
    .unwrap();
    assert!(max_rel < 1e-5, "max rel grad error {}", max_rel);
}

#[test]
fn e0_loss_leaves_backbone_gradients_exactly_zero() {
    let model = Model::new(tiny_config(), 2).unwrap();
    let s = random_molecule(77, 5);
    let b = single_batch(&s, model.config.r_max);
    let grid = SpectrumGrid::canonical();
    let mut tape = Tape::new();
    let vars = model.store.inject(&mut tape).unwrap();
    let out = model
        .forward(&mut tape, &vars, &b, &grid, Mode::Eval, None)
        .unwrap();
    let sq = tape.mul(out.e0, out.e0).unwrap();
    let loss = tape.mean_all(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    for id in 0..model.store.len() {
        let name = model.store.name(id);
        let g = grads.get(vars[id]);
        if name.starts_with("e0.") {
            let nonzero = g
                .map(|t| t.data().iter().any(|&v| v != 0.0))
                .unwrap_or(false);
            assert!(nonzero, "{} should receive gradient", name);
        } else if let Some(t) = g {
            assert!(
                t.data().iter().all(|&v| v == 0.0),
                "{} leaked gradient through detach",
                name
            );
        }
    }
}

#[test]
fn ablation_toggles_run_and_scalar_only_capacity_matches() {
    let s = random_molecule(13, 6);
    let grid = SpectrumGrid::canonical();
    for cfg in [
        ModelConfig {
            use_layernorm: false,
            ..tiny_config()
        },
        ModelConfig {
            use_gated_residual: false,
            ..tiny_config()
        },
        ModelConfig {
            use_attention_pool: false,
            ..tiny_config()
        },
        ModelConfig {
            use_background: false,
            ..tiny_config()
        },
        ModelConfig {
            m0: 7,
            scalar_only: true,
            ..tiny_config()
        },
    ] {
        let model = Model::new(cfg, 1).unwrap();
        let (_, spec, e0) = forward_features(&model, &s, &grid);
        assert!(spec.iter().all(|v| v.is_finite()));
        assert!(e0.is_finite());
    }

    let full = Model::new(ModelConfig::default(), 0).unwrap();
    let scalar = Model::new(ModelConfig::scalar_only_variant(), 0).unwrap();
    let (a, b) = (full.param_count() as f64, scalar.param_count() as f64);
    assert!(
        (a - b).abs() / a < 0.25,
        "capacity mismatch: full {} scalar-only {}",
        a,
        b
    );
}
