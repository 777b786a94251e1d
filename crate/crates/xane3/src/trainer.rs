//! AdamW optimization, plateau scheduling, grouped dataset splitting, the
//! training loop with derivative-weight annealing, and checkpoint I/O.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::dataset::DatasetRecord;
use crate::error::{Result, XaneError};
use crate::graph::{batch, build_graph, AtomicGraph};
use crate::model::{Mode, Model, ModelConfig};
use crate::objective::{anneal_weight, composite_loss, LossReport, LossWeights};
use crate::spectra::SpectrumGrid;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Stop once the validation spectrum MSE drops to this value.
    pub early_stop_spec: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            plateau_factor: 0.5,
            plateau_patience: 10,
            min_lr: 1e-5,
            max_epochs: 300,
            seed: 0,
            early_stop_spec: None,
        }
    }
}

/// Readout basis dimensions; the concrete widths/centers follow from them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasisConfig {
    pub k: usize,
    pub per_scale: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            k: crate::spectra::BASIS_K,
            per_scale: crate::spectra::BASIS_PER_SCALE,
        }
    }
}

/// The single JSON run configuration consumed by the CLI.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    #[serde(default)]
    pub basis: BasisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            basis: BasisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn build_model(&self) -> Result<Model> {
        if self.basis.k != crate::spectra::BASIS_SCALES.len() * self.basis.per_scale {
            return Err(XaneError::InvalidArgument(format!(
                "basis.k {} must be {} * basis.per_scale",
                self.basis.k,
                crate::spectra::BASIS_SCALES.len()
            )));
        }
        let basis = crate::spectra::BasisSpec::new(
            self.basis.k,
            self.basis.per_scale,
            self.model.use_background,
        );
        Model::with_basis(self.model.clone(), basis, self.train.seed)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// Apply a `--set section.key=value` override by dotted key.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec.split_once('=').ok_or_else(|| {
            XaneError::InvalidArgument(format!("override '{}' is not key=value", spec))
        })?;
        let mut root = serde_json::to_value(&*self)?;
        let pointer = format!("/{}", key.replace('.', "/"));
        let slot = root.pointer_mut(&pointer).ok_or_else(|| {
            XaneError::InvalidArgument(format!("unknown config key '{}'", key))
        })?;
        *slot = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        *self = serde_json::from_value(root)?;
        Ok(())
    }
}

/// AdamW with decoupled weight decay applied before the moment update.
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl AdamW {
    pub fn new(store: &crate::autodiff::ParamStore) -> Self {
        let shapes: Vec<(usize, usize)> = (0..store.len())
            .map(|i| store.value(i).shape())
            .collect();
        AdamW {
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        store: &mut crate::autodiff::ParamStore,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for id in 0..store.len() {
            let grad = store.grad(id).clone();
            for &g in grad.data() {
                if !g.is_finite() {
                    return Err(XaneError::NonFinite {
                        op: "adamw_step (gradient)",
                    });
                }
            }
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                p[i] *= 1.0 - lr * cfg.weight_decay;
                let g = grad.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau: halve after `patience` epochs without improvement,
/// never increase, never drop below min_lr.
pub struct Plateau {
    pub lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr0: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Plateau {
            lr: lr0,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Deterministic 80/10/10 split by record count, keeping every record that
/// shares a parent structure (same atomic content) in one split.
pub fn split_dataset(
    records: &[DatasetRecord],
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if records.len() < 10 {
        return Err(XaneError::InvalidArgument(format!(
            "need >= 10 records to split, got {}",
            records.len()
        )));
    }
    let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
    let mut index: std::collections::HashMap<u64, usize> = std::collections::HashMap::new();
    for (i, r) in records.iter().enumerate() {
        let key = r.structure_hash();
        match index.get(&key) {
            Some(&g) => groups[g].1.push(i),
            None => {
                index.insert(key, groups.len());
                groups.push((key, vec![i]));
            }
        }
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = records.len();
    let (n_val, n_test) = (n / 10, n / 10);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for g in order {
        let members = &groups[g].1;
        if test.len() < n_test {
            test.extend_from_slice(members);
        } else if val.len() < n_val {
            val.extend_from_slice(members);
        } else {
            train.extend_from_slice(members);
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((train, val, test))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct E0Stats {
    pub mean: f64,
    pub std: f64,
}

impl E0Stats {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        E0Stats {
            mean,
            std: var.sqrt().max(1e-8),
        }
    }

    pub fn z(&self, e0: f64) -> f64 {
        (e0 - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss_total: f64,
    pub loss_spec: f64,
    pub loss_grad: f64,
    pub loss_curv: f64,
    pub loss_e0: f64,
    pub lr: f64,
}

pub struct Prepared {
    pub graphs: Vec<AtomicGraph>,
    pub spectra: Vec<Vec<f64>>,
    pub e0z: Vec<f64>,
}

pub fn prepare(records: &[DatasetRecord], r_max: f64, stats: &E0Stats) -> Result<Prepared> {
    let mut graphs = Vec::with_capacity(records.len());
    let mut spectra = Vec::with_capacity(records.len());
    let mut e0z = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        let s = r.structure();
        graphs.push(build_graph(&s, r_max, r.absorber)?);
        spectra.push(r.spectrum.clone());
        e0z.push(stats.z(r.e0));
    }
    Ok(Prepared {
        graphs,
        spectra,
        e0z,
    })
}

fn batch_forward(
    model: &Model,
    data: &Prepared,
    idx: &[usize],
    grid: &SpectrumGrid,
    weights: (f64, f64, f64),
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tape, Vec<crate::autodiff::Var>, crate::autodiff::Var, LossReport)> {
    let graphs: Vec<AtomicGraph> = idx.iter().map(|&i| data.graphs[i].clone()).collect();
    let b = batch(&graphs)?;
    let g = idx.len();
    let mut target = Vec::with_capacity(g * grid.n());
    for &i in idx {
        target.extend_from_slice(&data.spectra[i]);
    }
    let e0t: Vec<f64> = idx.iter().map(|&i| data.e0z[i]).collect();

    let mut tape = Tape::new();
    let vars = model.store.inject(&mut tape)?;
    let out = model.forward(&mut tape, &vars, &b, grid, mode, rng)?;
    let t = tape.constant(Tensor::from_vec(g, grid.n(), target)?)?;
    let e = tape.constant(Tensor::col(e0t))?;
    let (total, report) = composite_loss(
        &mut tape, out.spectra, t, out.e0, e, grid, weights.0, weights.1, weights.2,
    )?;
    Ok((tape, vars, total, report))
}

fn split_report(
    model: &Model,
    data: &Prepared,
    idx: &[usize],
    grid: &SpectrumGrid,
    weights: (f64, f64, f64),
    batch_size: usize,
) -> Result<LossReport> {
    let mut acc = LossReport {
        total: 0.0,
        spec: 0.0,
        grad: 0.0,
        curv: 0.0,
        e0: 0.0,
    };
    let mut count = 0usize;
    for chunk in idx.chunks(batch_size) {
        let (_, _, _, r) = batch_forward(model, data, chunk, grid, weights, Mode::Eval, None)?;
        let w = chunk.len() as f64;
        acc.total += r.total * w;
        acc.spec += r.spec * w;
        acc.grad += r.grad * w;
        acc.curv += r.curv * w;
        acc.e0 += r.e0 * w;
        count += chunk.len();
    }
    let n = count.max(1) as f64;
    acc.total /= n;
    acc.spec /= n;
    acc.grad /= n;
    acc.curv /= n;
    acc.e0 /= n;
    Ok(acc)
}

pub struct TrainOutcome {
    pub model: Model,
    pub e0_stats: E0Stats,
    pub metrics: Vec<MetricsRow>,
    pub best_val_total: f64,
    pub test_report: LossReport,
    pub epochs_run: usize,
}

/// Full training run. If `out_dir` is given, writes metrics.jsonl and the
/// best-validation checkpoint there.
pub fn train_loop(
    records: &[DatasetRecord],
    run: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let grid = SpectrumGrid::canonical();
    let cfg = &run.train;
    let (train_idx, val_idx, test_idx) = split_dataset(records, cfg.seed)?;
    let stats = E0Stats::fit(
        &train_idx
            .iter()
            .map(|&i| records[i].e0)
            .collect::<Vec<_>>(),
    );
    let data = prepare(records, run.model.r_max, &stats)?;

    let mut model = run.build_model()?;
    let mut opt = AdamW::new(&model.store);
    let mut plateau = Plateau::new(
        cfg.lr0,
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.min_lr,
    );
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut initial_val: Option<f64> = None;
    let mut diverged_epochs = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let (lg, lc) = anneal_weight(epoch, &run.loss);
        let weights = (lg, lc, run.loss.lambda_e0);
        let lr = plateau.lr;

        let mut order = train_idx.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1).wrapping_add(epoch as u64));

        let mut train_acc = LossReport {
            total: 0.0,
            spec: 0.0,
            grad: 0.0,
            curv: 0.0,
            e0: 0.0,
        };
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (tape, vars, total, report) = batch_forward(
                &model,
                &data,
                chunk,
                &grid,
                weights,
                Mode::Train,
                Some(&mut dropout_rng),
            )?;
            model.store.zero_grad();
            model.store.accumulate(&tape, &vars, total)?;
            drop(tape);
            opt.step(&mut model.store, lr, cfg)?;
            let w = chunk.len() as f64;
            train_acc.total += report.total * w;
            train_acc.spec += report.spec * w;
            train_acc.grad += report.grad * w;
            train_acc.curv += report.curv * w;
            train_acc.e0 += report.e0 * w;
            seen += chunk.len();
        }
        let n = seen.max(1) as f64;
        train_acc.total /= n;
        train_acc.spec /= n;
        train_acc.grad /= n;
        train_acc.curv /= n;
        train_acc.e0 /= n;

        let val = split_report(&model, &data, &val_idx, &grid, weights, cfg.batch_size)?;
        metrics.push(MetricsRow {
            epoch,
            split: "train".into(),
            loss_total: train_acc.total,
            loss_spec: train_acc.spec,
            loss_grad: train_acc.grad,
            loss_curv: train_acc.curv,
            loss_e0: train_acc.e0,
            lr,
        });
        metrics.push(MetricsRow {
            epoch,
            split: "val".into(),
            loss_total: val.total,
            loss_spec: val.spec,
            loss_grad: val.grad,
            loss_curv: val.curv,
            loss_e0: val.e0,
            lr,
        });

        if val.total < best_val {
            best_val = val.total;
            best_params = Some(
                (0..model.store.len())
                    .map(|i| model.store.value(i).clone())
                    .collect(),
            );
        }
        let init = *initial_val.get_or_insert(val.total);
        if val.total > 10.0 * init {
            diverged_epochs += 1;
            if diverged_epochs >= 5 {
                return Err(XaneError::Other(format!(
                    "training diverged: val loss {:.6} > 10x initial {:.6} for 5 epochs",
                    val.total, init
                )));
            }
        } else {
            diverged_epochs = 0;
        }
        plateau.step(val.total);

        if let Some(target) = cfg.early_stop_spec {
            if val.spec <= target && epoch >= run.loss.anneal_start + run.loss.anneal_len {
                break;
            }
        }
    }

    if let Some(params) = best_params {
        for (i, p) in params.into_iter().enumerate() {
            *model.store.value_mut(i) = p;
        }
    }
    let unit = (1.0, 1.0, run.loss.lambda_e0);
    let test_report = split_report(&model, &data, &test_idx, &grid, unit, cfg.batch_size)?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
        for row in &metrics {
            serde_json::to_writer(&mut f, row)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        save_checkpoint(dir, &model, &stats, run)?;
    }

    Ok(TrainOutcome {
        model,
        e0_stats: stats,
        metrics,
        best_val_total: best_val,
        test_report,
        epochs_run,
    })
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: RunConfig,
    e0_mean: f64,
    e0_std: f64,
    params: Vec<ParamEntry>,
}

/// manifest.json + raw little-endian f64 blob; round trip is bit-exact.
pub fn save_checkpoint(dir: &Path, model: &Model, stats: &E0Stats, run: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for id in 0..model.store.len() {
        let t = model.store.value(id);
        let (rows, cols) = t.shape();
        entries.push(ParamEntry {
            name: model.store.name(id).to_string(),
            rows,
            cols,
            offset,
            len: t.len(),
        });
        for &v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    let manifest = Manifest {
        config: run.clone(),
        e0_mean: stats.mean,
        e0_std: stats.std,
        params: entries,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    std::fs::write(dir.join("params.bin"), blob)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, E0Stats, RunConfig)> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let blob = std::fs::read(dir.join("params.bin"))?;
    let mut model = manifest.config.build_model()?;
    if model.store.len() != manifest.params.len() {
        return Err(XaneError::InvalidArgument(format!(
            "checkpoint has {} parameters, model expects {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.params {
        let id = model.store.id(&entry.name).ok_or_else(|| {
            XaneError::InvalidArgument(format!("unknown parameter '{}'", entry.name))
        })?;
        let t = model.store.value_mut(id);
        if t.shape() != (entry.rows, entry.cols) || t.len() != entry.len {
            return Err(XaneError::InvalidArgument(format!(
                "parameter '{}' shape mismatch",
                entry.name
            )));
        }
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let at = (entry.offset + i) * 8;
            let bytes: [u8; 8] = blob
                .get(at..at + 8)
                .ok_or_else(|| XaneError::InvalidArgument("params.bin truncated".into()))?
                .try_into()
                .unwrap();
            *v = f64::from_le_bytes(bytes);
        }
    }
    let stats = E0Stats {
        mean: manifest.e0_mean,
        std: manifest.e0_std,
    };
    Ok((model, stats, manifest.config))
}

/// Per-record prediction with a trained model: spectrum rows on the grid and
/// de-normalized E0 values.
pub fn predict(
    model: &Model,
    stats: &E0Stats,
    records: &[DatasetRecord],
    batch_size: usize,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let grid = SpectrumGrid::canonical();
    let data = prepare(records, model.config.r_max, stats)?;
    let mut out = Vec::with_capacity(records.len());
    let idx: Vec<usize> = (0..records.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let graphs: Vec<AtomicGraph> = chunk.iter().map(|&i| data.graphs[i].clone()).collect();
        let b = batch(&graphs)?;
        let mut tape = Tape::new();
        let vars = model.store.inject(&mut tape)?;
        let fwd = model.forward(&mut tape, &vars, &b, &grid, Mode::Eval, None)?;
        let spec = tape.value(fwd.spectra).clone();
        let e0 = tape.value(fwd.e0).clone();
        for (row, _) in chunk.iter().enumerate() {
            out.push((
                spec.row_slice(row).to_vec(),
                stats.inverse(e0.at(row, 0)),
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
