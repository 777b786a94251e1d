//! The E(3)-equivariant backbone and heads: embedding, radial basis,
//! tensor-product interaction blocks with equivariant layer norm, gate and
//! adaptive gated residual, absorber-query attention pooling, invariant
//! readout to basis coefficients, and the detached E0 head.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Result, XaneError};
use crate::graph::Batch;
use crate::so3::{cg_real, real_sph_harm, IrrepsLayout, Parity, L_MAX};
use crate::spectra::{BasisSpec, SpectrumGrid};

pub const EMBED_TABLE_SIZE: usize = 119;
const LN_EPS: f64 = 1e-5;
const NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RadialKind {
    Bessel,
    Gaussian,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub m0: usize,
    pub m1: usize,
    pub m2: usize,
    pub n_radial: usize,
    pub r_max: f64,
    pub radial: RadialKind,
    pub readout_hidden: usize,
    pub attention_hidden: usize,
    pub gate_hidden: usize,
    pub e0_hidden: usize,
    pub dropout: f64,
    pub use_layernorm: bool,
    pub use_gated_residual: bool,
    pub use_attention_pool: bool,
    pub use_background: bool,
    pub scalar_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            m0: 32,
            m1: 16,
            m2: 8,
            n_radial: 16,
            r_max: 5.0,
            radial: RadialKind::Bessel,
            readout_hidden: 256,
            attention_hidden: 64,
            gate_hidden: 64,
            e0_hidden: 64,
            dropout: 0.01,
            use_layernorm: true,
            use_gated_residual: true,
            use_attention_pool: true,
            use_background: true,
            scalar_only: false,
        }
    }
}

impl ModelConfig {
    /// The capacity-matched scalar-only ablation variant.
    pub fn scalar_only_variant() -> Self {
        ModelConfig {
            m0: 63,
            m1: 0,
            m2: 0,
            scalar_only: true,
            ..Default::default()
        }
    }

    /// Effective multiplicities; scalar_only disables all l > 0 paths.
    pub fn mults(&self) -> (usize, usize, usize) {
        if self.scalar_only {
            (self.m0, 0, 0)
        } else {
            (self.m0, self.m1, self.m2)
        }
    }

    pub fn hidden_layout(&self) -> IrrepsLayout {
        let (m0, m1, m2) = self.mults();
        IrrepsLayout::hidden(m0, m1, m2)
    }

    /// Tensor-product output layout: the scalar block is widened to
    /// m0 + m1 + m2 so the trailing scalars can gate the l > 0 channels.
    pub fn tp_layout(&self) -> IrrepsLayout {
        let (m0, m1, m2) = self.mults();
        IrrepsLayout::hidden(m0 + m1 + m2, m1, m2)
    }

    /// Readout input width: [s_abs || c || n1 || n2].
    pub fn z_dim(&self) -> usize {
        let (m0, m1, m2) = self.mults();
        2 * m0 + m1 + m2
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.m0 == 0 || self.n_radial == 0 {
            return Err(XaneError::InvalidArgument(
                "layers, m0 and n_radial must be >= 1".into(),
            ));
        }
        if self.r_max <= 0.0 {
            return Err(XaneError::InvalidArgument("r_max must be > 0".into()));
        }
        Ok(())
    }
}

/// Bessel (or Gaussian) radial features times the smooth cosine cutoff.
pub fn radial_basis(d: f64, n: usize, r_max: f64, kind: RadialKind) -> Result<Vec<f64>> {
    if d <= 0.0 {
        return Err(XaneError::InvalidArgument(format!(
            "radial_basis: d = {} <= 0",
            d
        )));
    }
    if d > r_max {
        return Ok(vec![0.0; n]);
    }
    let fc = 0.5 * ((PI * d / r_max).cos() + 1.0);
    let mut out = Vec::with_capacity(n);
    match kind {
        RadialKind::Bessel => {
            let pref = (2.0 / r_max).sqrt();
            for k in 1..=n {
                let x = k as f64 * PI * d / r_max;
                // sin(x)/d with the series guard near zero
                let b = if x.abs() < 1e-6 {
                    pref * k as f64 * PI / r_max * (1.0 - x * x / 6.0)
                } else {
                    pref * x.sin() / d
                };
                out.push(b * fc);
            }
        }
        RadialKind::Gaussian => {
            let width = r_max / n as f64;
            for k in 0..n {
                let c = r_max * (k + 1) as f64 / n as f64;
                out.push((-(d - c) * (d - c) / (2.0 * width * width)).exp() * fc);
            }
        }
    }
    Ok(out)
}

/// One allowed tensor-product path l_in (x) l_f -> l_out.
#[derive(Clone, Debug)]
struct TpPath {
    in_entry: usize,
    l_f: usize,
    out_entry: usize,
    param: String,
}

/// Paths for one interaction layer given input and output layouts: parity of
/// input times (-1)^l_f must match the output parity, and the triangle rule
/// must hold.
fn enumerate_paths(
    layer: usize,
    input: &IrrepsLayout,
    output: &IrrepsLayout,
) -> Vec<TpPath> {
    let mut paths = Vec::new();
    for (oi, out) in output.entries.iter().enumerate() {
        for (ii, inp) in input.entries.iter().enumerate() {
            for l_f in 0..=L_MAX {
                let parity_ok =
                    inp.parity.product(Parity::of_l(l_f)) == out.parity;
                let triangle_ok = out.l + inp.l >= l_f
                    && out.l + l_f >= inp.l
                    && out.l <= inp.l + l_f;
                if parity_ok && triangle_ok {
                    paths.push(TpPath {
                        in_entry: ii,
                        l_f,
                        out_entry: oi,
                        param: format!(
                            "layer{}.path.{}_{}_{}.w",
                            layer, inp.l, l_f, out.l
                        ),
                    });
                }
            }
        }
    }
    paths
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    /// Like Eval, but the E0 head reads the live (non-detached) features so
    /// the whole loss is finite-difference checkable. The stop-gradient
    /// contract itself is verified exactly at the op level.
    Gradcheck,
}

/// Everything the forward pass produces, plus per-block hidden features for
/// the equivariance harness.
pub struct ForwardOut {
    pub spectra: Var,
    pub e0: Var,
    pub coeffs: Var,
    pub block_features: Vec<Var>,
}

pub struct Model {
    pub config: ModelConfig,
    pub basis: BasisSpec,
    pub store: ParamStore,
    layer_paths: Vec<Vec<TpPath>>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let basis = BasisSpec::new(
            crate::spectra::BASIS_K,
            crate::spectra::BASIS_PER_SCALE,
            config.use_background,
        );
        Self::with_basis(config, basis, seed)
    }

    pub fn with_basis(config: ModelConfig, basis: BasisSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (m0, m1, m2) = config.mults();
        let hidden = config.hidden_layout();
        let tp_out = config.tp_layout();

        let uniform = |rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64| {
            Tensor::from_vec(
                r,
                c,
                (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect(),
            )
            .unwrap()
        };

        store.add(
            "embed.table",
            uniform(&mut rng, EMBED_TABLE_SIZE, m0, 1.0),
        )?;

        let mut layer_paths = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let input = if l == 0 {
                IrrepsLayout::scalars(m0)
            } else {
                hidden.clone()
            };
            let paths = enumerate_paths(l, &input, &tp_out);
            for path in &paths {
                let m_in = input.entries[path.in_entry].mult;
                let m_out = tp_out.entries[path.out_entry].mult;
                // radial features have RMS well below 1; boost the fan-in
                // scale so first-layer activations start near unit RMS
                let scale = 3.0 / (config.n_radial as f64).sqrt();
                store.add(
                    &path.param,
                    uniform(&mut rng, config.n_radial, m_in * m_out, scale),
                )?;
            }
            layer_paths.push(paths);

            if config.use_layernorm {
                let s0 = tp_out.entries[0].mult;
                store.add(&format!("layer{}.ln.gamma0", l), Tensor::full(1, s0, 1.0))?;
                store.add(&format!("layer{}.ln.beta0", l), Tensor::zeros(1, s0))?;
                if m1 > 0 {
                    store.add(&format!("layer{}.ln.gamma1", l), Tensor::full(1, m1, 1.0))?;
                }
                if m2 > 0 {
                    store.add(&format!("layer{}.ln.gamma2", l), Tensor::full(1, m2, 1.0))?;
                }
            }

            if l > 0 {
                // equivariant self-connection W_sc, channel mixing per l
                let s = 1.0 / (m0 as f64).sqrt();
                store.add(&format!("layer{}.sc.w0", l), uniform(&mut rng, m0, m0, s))?;
                store.add(&format!("layer{}.sc.b0", l), Tensor::zeros(1, m0))?;
                if m1 > 0 {
                    let s = 1.0 / (m1 as f64).sqrt();
                    store.add(&format!("layer{}.sc.w1", l), uniform(&mut rng, m1, m1, s))?;
                }
                if m2 > 0 {
                    let s = 1.0 / (m2 as f64).sqrt();
                    store.add(&format!("layer{}.sc.w2", l), uniform(&mut rng, m2, m2, s))?;
                }
                if config.use_gated_residual {
                    let gh = config.gate_hidden;
                    let s1 = 1.0 / ((2 * m0) as f64).sqrt();
                    store.add(
                        &format!("layer{}.res.w1", l),
                        uniform(&mut rng, 2 * m0, gh, s1),
                    )?;
                    store.add(&format!("layer{}.res.b1", l), Tensor::zeros(1, gh))?;
                    let s2 = 1.0 / (gh as f64).sqrt();
                    store.add(
                        &format!("layer{}.res.w2", l),
                        uniform(&mut rng, gh, m0 + m1 + m2, s2),
                    )?;
                    store.add(
                        &format!("layer{}.res.b2", l),
                        Tensor::zeros(1, m0 + m1 + m2),
                    )?;
                }
            }
        }

        if config.use_attention_pool {
            let ah = config.attention_hidden;
            let s1 = 1.0 / ((2 * m0) as f64).sqrt();
            store.add("attn.w1", uniform(&mut rng, 2 * m0, ah, s1))?;
            store.add("attn.b1", Tensor::zeros(1, ah))?;
            let s2 = 1.0 / (ah as f64).sqrt();
            store.add("attn.w2", uniform(&mut rng, ah, 1, s2))?;
            store.add("attn.b2", Tensor::zeros(1, 1))?;
        }

        let zdim = config.z_dim();
        let rh = config.readout_hidden;
        let s1 = 1.0 / (zdim as f64).sqrt();
        store.add("readout.w1", uniform(&mut rng, zdim, rh, s1))?;
        store.add("readout.b1", Tensor::zeros(1, rh))?;
        // zero-initialized final layer: training starts from the zero
        // spectrum plus background
        store.add(
            "readout.w2",
            Tensor::zeros(rh, basis.n_coeffs()),
        )?;
        store.add("readout.b2", Tensor::zeros(1, basis.n_coeffs()))?;

        let eh = config.e0_hidden;
        store.add("e0.w1", uniform(&mut rng, zdim, eh, s1))?;
        store.add("e0.b1", Tensor::zeros(1, eh))?;
        let s2 = 1.0 / (eh as f64).sqrt();
        store.add("e0.w2", uniform(&mut rng, eh, 1, s2))?;
        store.add("e0.b2", Tensor::zeros(1, 1))?;

        basis.add_params(&mut store)?;

        Ok(Model {
            config,
            basis,
            store,
            layer_paths,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    fn var(&self, vars: &[Var], name: &str) -> Result<Var> {
        self.store
            .id(name)
            .map(|i| vars[i])
            .ok_or_else(|| XaneError::Other(format!("missing parameter {}", name)))
    }

    /// Full forward pass over a batch. `rng` is consumed only in train mode
    /// (readout dropout).
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        grid: &SpectrumGrid,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOut> {
        let cfg = &self.config;
        let (m0, m1, m2) = cfg.mults();
        let n_atoms = batch.n_atoms();
        let n_edges = batch.n_edges();
        let hidden = cfg.hidden_layout();
        let tp_out = cfg.tp_layout();

        for &z in &batch.numbers {
            if z as usize >= EMBED_TABLE_SIZE {
                return Err(XaneError::InvalidArgument(format!(
                    "atomic number {} outside embedding table",
                    z
                )));
            }
        }

        // edge constants
        let edge_dst = Arc::new(batch.edge_dst.clone());
        let edge_src = Arc::new(batch.edge_src.clone());
        let mut y_consts: Vec<Var> = Vec::with_capacity(L_MAX + 1);
        for l in 0..=L_MAX {
            let k = 2 * l + 1;
            let mut data = Vec::with_capacity(n_edges * k);
            for e in 0..n_edges {
                let v = batch.edge_vec[e];
                let d = batch.edge_len[e];
                let u = [v[0] / d, v[1] / d, v[2] / d];
                data.extend(real_sph_harm(l, u)?);
            }
            y_consts.push(tape.constant(Tensor::from_vec(n_edges, k, data)?)?);
        }
        let mut rad_data = Vec::with_capacity(n_edges * cfg.n_radial);
        for e in 0..n_edges {
            rad_data.extend(radial_basis(
                batch.edge_len[e],
                cfg.n_radial,
                cfg.r_max,
                cfg.radial,
            )?);
        }
        let radial = tape.constant(Tensor::from_vec(n_edges, cfg.n_radial, rad_data)?)?;
        // in-degree per node, clamped to 1 so isolated nodes get zeros
        let mut deg = vec![0.0f64; n_atoms];
        for &d in batch.edge_dst.iter() {
            deg[d] += 1.0;
        }
        for d in &mut deg {
            if *d == 0.0 {
                *d = 1.0;
            }
        }
        let inv_deg = tape.constant(Tensor::col(deg))?;

        // initial embedding: scalars only
        let table = self.var(vars, "embed.table")?;
        let z_idx = Arc::new(
            batch
                .numbers
                .iter()
                .map(|&z| z as usize)
                .collect::<Vec<_>>(),
        );
        let mut h = tape.gather_rows(table, z_idx)?;
        let mut h_layout = IrrepsLayout::scalars(m0);

        let mut block_features = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let paths = &self.layer_paths[l];
            let h_src = tape.gather_rows(h, edge_src.clone())?;

            // per-output-irrep accumulation of path contributions
            let mut out_blocks: Vec<Option<Var>> = vec![None; tp_out.entries.len()];
            let mut n_paths_out = vec![0usize; tp_out.entries.len()];
            for path in paths {
                n_paths_out[path.out_entry] += 1;
            }
            for path in paths {
                let in_e = &h_layout.entries[path.in_entry];
                let out_e = &tp_out.entries[path.out_entry];
                let w_p = self.var(vars, &path.param)?;
                let w_e = tape.matmul(radial, w_p)?;
                let x_blk = tape.slice_cols(
                    h_src,
                    h_layout.offsets[path.in_entry],
                    in_e.width(),
                )?;
                let cg = cg_real(in_e.l, path.l_f, out_e.l)?;
                let norm = 1.0
                    / ((in_e.mult as f64) * (n_paths_out[path.out_entry] as f64)).sqrt();
                let contrib = tape.tensor_contract(
                    x_blk,
                    y_consts[path.l_f],
                    w_e,
                    cg,
                    in_e.mult,
                    out_e.mult,
                    norm,
                )?;
                out_blocks[path.out_entry] = Some(match out_blocks[path.out_entry] {
                    Some(acc) => tape.add(acc, contrib)?,
                    None => contrib,
                });
            }
            let blocks: Vec<Var> = out_blocks
                .into_iter()
                .map(|b| b.ok_or_else(|| XaneError::Other("irrep with no paths".into())))
                .collect::<Result<_>>()?;
            let msg_edges = if blocks.len() == 1 {
                blocks[0]
            } else {
                tape.concat_cols(&blocks)?
            };
            let summed = tape.scatter_add_rows(msg_edges, edge_dst.clone(), n_atoms)?;
            let mut msg = tape.div(summed, inv_deg)?;

            if cfg.use_layernorm {
                msg = self.layer_norm(tape, vars, msg, &tp_out, l)?;
            }
            let gated = self.gate(tape, msg, &tp_out, m0, m1, m2)?;

            h = if l == 0 {
                gated
            } else {
                self.residual(tape, vars, h, gated, &hidden, l)?
            };
            h_layout = hidden.clone();
            block_features.push(h);
        }

        // pooling
        let scalars = tape.slice_cols(h, 0, m0)?;
        let segments = Arc::new(batch.segments.clone());
        let abs_mask = Arc::new(batch.absorber_mask.clone());
        let non_abs_mask = Arc::new(
            batch
                .absorber_mask
                .iter()
                .map(|&b| !b)
                .collect::<Vec<bool>>(),
        );
        let q = tape.segment_mean_masked(
            scalars,
            segments.clone(),
            abs_mask.clone(),
            batch.n_graphs,
        )?;

        let context = if cfg.use_attention_pool {
            let q_atoms = tape.gather_rows(q, segments.clone())?;
            let cat = tape.concat_cols(&[q_atoms, scalars])?;
            let scores = self.mlp2(tape, vars, cat, "attn")?;
            let alpha = tape.segment_softmax(
                scores,
                segments.clone(),
                non_abs_mask.clone(),
                batch.n_graphs,
            )?;
            let weighted = tape.mul(scalars, alpha)?;
            tape.segment_sum(weighted, segments.clone(), batch.n_graphs)?
        } else {
            tape.segment_mean_masked(
                scalars,
                segments.clone(),
                non_abs_mask.clone(),
                batch.n_graphs,
            )?
        };

        let mut z_parts = vec![q, context];
        for (ei, entry) in hidden.entries.iter().enumerate() {
            if entry.l == 0 {
                continue;
            }
            let blk = tape.slice_cols(h, hidden.offsets[ei], entry.width())?;
            let sq = tape.mul(blk, blk)?;
            let per_ch = tape.sum_cols_grouped(sq, entry.comps())?;
            let guarded = tape.add_scalar(per_ch, NORM_GUARD)?;
            let norms = tape.sqrt(guarded)?;
            let pooled = tape.segment_mean_masked(
                norms,
                segments.clone(),
                abs_mask.clone(),
                batch.n_graphs,
            )?;
            z_parts.push(pooled);
        }
        let z = tape.concat_cols(&z_parts)?;

        // readout with optional dropout on the hidden activation
        let w1 = self.var(vars, "readout.w1")?;
        let b1 = self.var(vars, "readout.b1")?;
        let pre = tape.matmul(z, w1)?;
        let pre = tape.add(pre, b1)?;
        let mut act = tape.silu(pre)?;
        if mode == Mode::Train && cfg.dropout > 0.0 {
            let rng = rng.ok_or_else(|| {
                XaneError::InvalidArgument("train mode requires an rng for dropout".into())
            })?;
            let (r, c) = tape.value(act).shape();
            let keep = 1.0 - cfg.dropout;
            let mask = Tensor::from_vec(
                r,
                c,
                (0..r * c)
                    .map(|_| {
                        if rng.gen_range(0.0..1.0) < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )?;
            let mask = tape.constant(mask)?;
            act = tape.mul(act, mask)?;
        }
        let w2 = self.var(vars, "readout.w2")?;
        let b2 = self.var(vars, "readout.b2")?;
        let coeffs = tape.matmul(act, w2)?;
        let coeffs = tape.add(coeffs, b2)?;

        let design = self.basis.eval_basis(tape, &self.store, vars, grid)?;
        let spectra = tape.matmul(coeffs, design)?;

        // E0 head on detached readout features
        let zd = if mode == Mode::Gradcheck {
            z
        } else {
            tape.detach(z)?
        };
        let e0 = self.mlp2(tape, vars, zd, "e0")?;

        Ok(ForwardOut {
            spectra,
            e0,
            coeffs,
            block_features,
        })
    }

    /// Scalar block: standard layer norm with scale and bias. l > 0 blocks:
    /// RMS over channel and tensor components jointly, scale only.
    fn layer_norm(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        layout: &IrrepsLayout,
        layer: usize,
    ) -> Result<Var> {
        let mut out_blocks = Vec::with_capacity(layout.entries.len());
        for (ei, entry) in layout.entries.iter().enumerate() {
            let blk = tape.slice_cols(x, layout.offsets[ei], entry.width())?;
            if entry.l == 0 {
                let mu = tape.mean_axis(blk, 1)?;
                let xc = tape.sub(blk, mu)?;
                let sq = tape.mul(xc, xc)?;
                let var = tape.mean_axis(sq, 1)?;
                let var_eps = tape.add_scalar(var, LN_EPS)?;
                let std = tape.sqrt(var_eps)?;
                let xn = tape.div(xc, std)?;
                let gamma = self.var(vars, &format!("layer{}.ln.gamma0", layer))?;
                let beta = self.var(vars, &format!("layer{}.ln.beta0", layer))?;
                let scaled = tape.mul(xn, gamma)?;
                out_blocks.push(tape.add(scaled, beta)?);
            } else {
                let sq = tape.mul(blk, blk)?;
                let ms = tape.mean_axis(sq, 1)?;
                let ms_eps = tape.add_scalar(ms, LN_EPS)?;
                let rms = tape.sqrt(ms_eps)?;
                let xn = tape.div(blk, rms)?;
                let gamma =
                    self.var(vars, &format!("layer{}.ln.gamma{}", layer, entry.l))?;
                let gamma_b = tape.repeat_interleave_cols(gamma, entry.comps())?;
                out_blocks.push(tape.mul(xn, gamma_b)?);
            }
        }
        if out_blocks.len() == 1 {
            Ok(out_blocks[0])
        } else {
            tape.concat_cols(&out_blocks)
        }
    }

    /// SiLU on the first m0 scalars; the trailing m1 + m2 scalars gate the
    /// l > 0 blocks through sigmoids broadcast over components.
    fn gate(
        &self,
        tape: &mut Tape,
        x: Var,
        tp_layout: &IrrepsLayout,
        m0: usize,
        m1: usize,
        m2: usize,
    ) -> Result<Var> {
        let s_all = tape.slice_cols(x, 0, m0 + m1 + m2)?;
        let feats = tape.slice_cols(s_all, 0, m0)?;
        let feats = tape.silu(feats)?;
        let mut parts = vec![feats];
        let mut gate_off = m0;
        for (ei, entry) in tp_layout.entries.iter().enumerate() {
            if entry.l == 0 {
                continue;
            }
            let logits = tape.slice_cols(s_all, gate_off, entry.mult)?;
            gate_off += entry.mult;
            let gates = tape.sigmoid(logits)?;
            let gates_b = tape.repeat_interleave_cols(gates, entry.comps())?;
            let blk = tape.slice_cols(x, tp_layout.offsets[ei], entry.width())?;
            parts.push(tape.mul(blk, gates_b)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_cols(&parts)
        }
    }

    /// h_new = g (.) W_sc h_prev + (1 - g) (.) m, with g predicted from the
    /// scalar features of both branches; plain residual when the adaptive
    /// gate is ablated.
    fn residual(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        h_prev: Var,
        m: Var,
        hidden: &IrrepsLayout,
        layer: usize,
    ) -> Result<Var> {
        let (m0, _, _) = self.config.mults();
        // W_sc: channel mixing within each l, bias on scalars only
        let mut sc_blocks = Vec::with_capacity(hidden.entries.len());
        for (ei, entry) in hidden.entries.iter().enumerate() {
            let blk = tape.slice_cols(h_prev, hidden.offsets[ei], entry.width())?;
            let w = self.var(vars, &format!("layer{}.sc.w{}", layer, entry.l))?;
            let mixed = if entry.l == 0 {
                let mm = tape.matmul(blk, w)?;
                let b = self.var(vars, &format!("layer{}.sc.b0", layer))?;
                tape.add(mm, b)?
            } else {
                tape.channel_matmul(blk, w, entry.comps())?
            };
            sc_blocks.push(mixed);
        }
        let sc = if sc_blocks.len() == 1 {
            sc_blocks[0]
        } else {
            tape.concat_cols(&sc_blocks)?
        };

        if !self.config.use_gated_residual {
            return tape.add(sc, m);
        }

        let s_prev = tape.slice_cols(h_prev, 0, m0)?;
        let s_msg = tape.slice_cols(m, 0, m0)?;
        let cat = tape.concat_cols(&[s_prev, s_msg])?;
        let logits = self.mlp2(tape, vars, cat, &format!("layer{}.res", layer))?;
        let g = tape.sigmoid(logits)?; // [N, m0+m1+m2]
        let one_minus_g = {
            let neg = tape.neg(g)?;
            tape.add_scalar(neg, 1.0)?
        };

        // broadcast per-channel gates over components, blockwise
        let mut out = Vec::with_capacity(hidden.entries.len());
        let mut ch_off = 0usize;
        for (ei, entry) in hidden.entries.iter().enumerate() {
            let g_blk = tape.slice_cols(g, ch_off, entry.mult)?;
            let og_blk = tape.slice_cols(one_minus_g, ch_off, entry.mult)?;
            ch_off += entry.mult;
            let (g_b, og_b) = if entry.l == 0 {
                (g_blk, og_blk)
            } else {
                (
                    tape.repeat_interleave_cols(g_blk, entry.comps())?,
                    tape.repeat_interleave_cols(og_blk, entry.comps())?,
                )
            };
            let sc_blk = tape.slice_cols(sc, hidden.offsets[ei], entry.width())?;
            let m_blk = tape.slice_cols(m, hidden.offsets[ei], entry.width())?;
            let a = tape.mul(g_b, sc_blk)?;
            let b = tape.mul(og_b, m_blk)?;
            out.push(tape.add(a, b)?);
        }
        if out.len() == 1 {
            Ok(out[0])
        } else {
            tape.concat_cols(&out)
        }
    }

    /// Two-layer SiLU MLP using params `<prefix>.w1/b1/w2/b2`.
    fn mlp2(&self, tape: &mut Tape, vars: &[Var], x: Var, prefix: &str) -> Result<Var> {
        let w1 = self.var(vars, &format!("{}.w1", prefix))?;
        let b1 = self.var(vars, &format!("{}.b1", prefix))?;
        let w2 = self.var(vars, &format!("{}.w2", prefix))?;
        let b2 = self.var(vars, &format!("{}.b2", prefix))?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.silu(h)?;
        let o = tape.matmul(h, w2)?;
        tape.add(o, b2)
    }
}

#[cfg(test)]
mod tests;
