//! Training loops and evaluation: posterior regression, end-to-end
//! reconstruction, the adversarial sampler, and latent-space refinement.
//!
//! Every loop draws its data deterministically from (seed, index): phantoms
//! come from a counter-indexed corpus and sensor readings are re-simulated
//! fresh each iteration under per-index seeds. A run is therefore exactly
//! reproducible, and resuming from a checkpoint continues the same data
//! stream without any stored dataset.

use crate::ckpt::{Checkpoint, CkptError, ModelArch};
use crate::graph::Graph;
use crate::objectives::{
    critic_loss_node, generator_loss_node, kl_diversity_node, posterior_nll_node,
    project_to_sphere, sample_latent_sphere, weighted_norm_node,
};
use crate::opt::{lr_at, AdamState};
use crate::store::{Bindings, ParamStore};
use crate::zoo::{Critic, End2End, PosteriorNet, ZooError};
use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};
use rand::Rng;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;
use tomoforge_core::config::{ConfigError, PosteriorSource, Profile, RunConfig};
use tomoforge_core::data::{DataError, PhantomKind, PhantomSpec};
use tomoforge_core::filter::{fbp_with_projector, FilterWindow};
use tomoforge_core::geom::{GeometryError, ImageGrid, ScanGeometry, Sinogram};
use tomoforge_core::metrics::ssim;
use tomoforge_core::posterior::{PosteriorError, PosteriorGrid, PosteriorTable, SIGMA_FLOOR};
use tomoforge_core::radon::Projector;
use tomoforge_core::rng::{phase_seed, root};
use tomoforge_core::sensor::{simulate_readings, NoiseParams, SensorError, SensorReadings};
use tomoforge_core::Real;

/// Phantom indices at and above this base are reserved for held-out
/// evaluation; no training stage ever touches them.
pub const EVAL_INDEX_BASE: u64 = 1 << 32;

/// Base index of the adversarial stage's data stream, keeping it disjoint
/// from both the reconstruction stream (which starts at 0) and the held-out
/// range.
const GAN_INDEX_BASE: u64 = 1 << 33;

/// Default learning rate for the posterior regressors (a configured
/// `train.lr` overrides it). They are pointwise MLPs a few thousand
/// parameters wide; the main schedule's long warmup serves no purpose at
/// that size.
const POSTERIOR_LR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Posterior(#[from] PosteriorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{what} became non-finite at step {step}")]
    Diverged { step: u64, what: &'static str },
    #[error("{0}")]
    Invalid(String),
}

/// Scalars from one optimizer step, handed to progress callbacks. The loss
/// CSV files the loops write are the durable record; this is for display.
#[derive(Clone, Copy, Debug)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    /// Critic loss during adversarial training; zero elsewhere.
    pub critic_loss: f64,
    pub lr: f64,
}

pub type Progress<'a> = &'a mut dyn FnMut(StepLog);

/// The configured flat rate, or the built-in warmup/decay schedule when the
/// config says `lr = 0`.
pub fn effective_lr(cfg: &RunConfig, step: u64) -> f64 {
    if cfg.lr > 0.0 {
        cfg.lr
    } else {
        lr_at(step)
    }
}

/// One data item: a phantom, its clean sinogram, and sensor readings
/// simulated at one ladder level.
pub struct TrainItem {
    pub image: ImageGrid<f64>,
    pub sinogram: Sinogram<f64>,
    pub readings: SensorReadings,
    pub level: usize,
}

/// Run state shared by all the loops: resolved geometry, the projector,
/// the noise ladder, and the phantom corpus.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub geom: ScanGeometry,
    pub projector: Arc<Projector>,
    pub noise: Vec<NoiseParams>,
    pub spec: PhantomSpec,
}

impl Pipeline {
    pub fn new(cfg: &RunConfig) -> Result<Self, TrainError> {
        if cfg.profile == Profile::Paper && cfg.image_size != 256 {
            return Err(TrainError::Invalid(format!(
                "the paper profile is defined at 256x256, got image_size {}",
                cfg.image_size
            )));
        }
        let geom = cfg.geometry()?;
        let mut noise = Vec::new();
        for &s in &cfg.s_ladder {
            noise.push(NoiseParams::new(s, cfg.epsilon, cfg.k, cfg.bit_depth)?);
        }
        let kind = match cfg.phantom.as_str() {
            "shepp_logan" => PhantomKind::SheppLogan,
            _ => PhantomKind::RandomEllipses,
        };
        let spec = PhantomSpec {
            kind,
            image_size: cfg.image_size,
            n_ellipses: (cfg.n_ellipses_min, cfg.n_ellipses_max),
            intensity: (cfg.intensity_min, cfg.intensity_max),
            seed: phase_seed(cfg.seed, "phantoms"),
        };
        spec.validate()?;
        Ok(Pipeline {
            cfg: cfg.clone(),
            geom,
            projector: Arc::new(Projector::new(geom)),
            noise,
            spec,
        })
    }

    /// Exact Bayes tables for every ladder level.
    pub fn oracle_tables(&self) -> Result<Vec<PosteriorTable>, TrainError> {
        self.noise.iter().map(|p| Ok(PosteriorTable::with_default_grid(*p)?)).collect()
    }

    /// Ladder level assigned to data item `idx`.
    pub fn level_of(&self, idx: u64) -> usize {
        (idx % self.noise.len() as u64) as usize
    }

    /// Phantom number `idx` and its clean sinogram.
    pub fn phantom(&self, idx: u64) -> (ImageGrid<f64>, Sinogram<f64>) {
        let image = self.spec.sample(idx);
        let sinogram = self.projector.forward(&image);
        (image, sinogram)
    }

    /// Data item `idx` with readings simulated under a seed that is a pure
    /// function of (run seed, idx) — fresh noise every step, yet fully
    /// reproducible across resumes.
    pub fn item(&self, idx: u64) -> Result<TrainItem, TrainError> {
        let (image, sinogram) = self.phantom(idx);
        let level = self.level_of(idx);
        let readings = simulate_readings(
            &sinogram,
            &self.noise[level],
            phase_seed(self.cfg.seed, &format!("readings/{idx}")),
        )?;
        Ok(TrainItem { image, sinogram, readings, level })
    }
}

/// Source of (mu, sigma) sinogram estimates: the exact Bayes table or the
/// distilled network, per `posterior_source` in the config.
pub enum PosteriorProvider {
    Oracle(Vec<PosteriorTable>),
    Net(Vec<(PosteriorNet, ParamStore<f64>)>),
}

impl PosteriorProvider {
    /// Builds the configured provider; the net variant loads one checkpoint
    /// per ladder level from `<run_dir>/posterior/level-<i>.tnsr`.
    pub fn from_cfg(pipe: &Pipeline) -> Result<Self, TrainError> {
        match pipe.cfg.posterior_source {
            PosteriorSource::Oracle => Ok(PosteriorProvider::Oracle(pipe.oracle_tables()?)),
            PosteriorSource::Net => {
                let dir = Path::new(&pipe.cfg.run_dir).join("posterior");
                let mut nets = Vec::new();
                for level in 0..pipe.noise.len() {
                    let path = dir.join(format!("level-{level}.tnsr"));
                    let ck = Checkpoint::<f64>::load(&path)?;
                    let ModelArch::Posterior { hidden, depth, kernel } = ck.arch else {
                        return Err(TrainError::Invalid(format!(
                            "{} does not hold a posterior net",
                            path.display()
                        )));
                    };
                    let (store, _) = ck.restore(pipe.cfg.seed);
                    nets.push((PosteriorNet::new(hidden, depth, kernel), store));
                }
                Ok(PosteriorProvider::Net(nets))
            }
        }
    }

    /// Posterior (mu, sigma) for one readings matrix.
    pub fn grid(
        &mut self,
        level: usize,
        readings: &SensorReadings,
    ) -> Result<PosteriorGrid, TrainError> {
        match self {
            PosteriorProvider::Oracle(tables) => Ok(tables[level].apply(readings)?),
            PosteriorProvider::Net(nets) => {
                let (net, store) = &mut nets[level];
                let geom = *readings.geometry();
                let mut g = Graph::new();
                let mut bind = Bindings::frozen();
                let x = g.input(stack_planes::<f64>(&[readings.normalized()]));
                let (mu, sigma) = net.forward_joint(&mut g, store, &mut bind, x);
                let mu = plane_to_f64(g.value(mu));
                let sigma = plane_to_f64(g.value(sigma));
                Ok(PosteriorGrid::new(Sinogram::new(geom, mu)?, Sinogram::new(geom, sigma)?)?)
            }
        }
    }
}

/// Stacks 2-D planes into a (B, 1, H, W) network input.
fn stack_planes<T: Real>(planes: &[Array2<f64>]) -> ArrayD<T> {
    let (h, w) = planes[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[planes.len(), 1, h, w]));
    for (i, p) in planes.iter().enumerate() {
        for ((r, c), &v) in p.indexed_iter() {
            out[[i, 0, r, c]] = T::from_f64(v);
        }
    }
    out
}

/// Batch item `i`'s (H, W) plane of a (B, 1, H, W) value.
fn batch_plane<T: Real>(v: &ArrayD<T>, i: usize) -> Array2<T> {
    v.index_axis(Axis(0), i)
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality::<Ix2>()
        .expect("value is (B, 1, H, W)")
}

/// First plane of a (1, 1, H, W) value, widened to f64.
fn plane_to_f64<T: Real>(v: &ArrayD<T>) -> Array2<f64> {
    batch_plane(v, 0).mapv(|x| x.to_f64_())
}

fn l2_norm<T: Real>(a: &ArrayD<T>) -> f64 {
    a.iter().map(|v| v.to_f64_() * v.to_f64_()).sum::<f64>().sqrt()
}

/// Per-entry weights that turn `dot(squared_error, w)` into the MSE over
/// the inscribed circle, averaged over circle pixels and batch items.
fn mse_weights<T: Real>(geom: &ScanGeometry, batch: usize) -> ArrayD<T> {
    let mask = geom.circle_mask::<f64>();
    let total = mask.sum() * batch as f64;
    let n = geom.image_size();
    let mut out = ArrayD::zeros(IxDyn(&[batch, 1, n, n]));
    for b in 0..batch {
        for ((i, j), &m) in mask.indexed_iter() {
            out[[b, 0, i, j]] = T::from_f64(m / total);
        }
    }
    out
}

/// Line-buffered CSV sink. Creates parent directories; writes the header
/// unless appending to an existing file.
struct CsvLog {
    out: BufWriter<File>,
}

impl CsvLog {
    fn open(path: &Path, header: &str, append: bool) -> Result<CsvLog, TrainError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let out = if append && path.exists() {
            BufWriter::new(OpenOptions::new().append(true).open(path)?)
        } else {
            let mut w = BufWriter::new(File::create(path)?);
            writeln!(w, "{header}")?;
            w
        };
        Ok(CsvLog { out })
    }

    fn row(&mut self, line: &str) -> Result<(), TrainError> {
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Highest-numbered `step-<n>.tnsr` in a run directory, if any. Critic
/// sidecars (`step-<n>.critic.tnsr`) are not counted.
pub fn latest_checkpoint(dir: &Path) -> Option<(u64, PathBuf)> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).ok()?.flatten() {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let Some(stem) = name.strip_prefix("step-").and_then(|s| s.strip_suffix(".tnsr")) else {
            continue;
        };
        let Ok(step) = stem.parse::<u64>() else { continue };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    best
}

/// Rebuilds the reconstruction network or generator a checkpoint describes
/// over the given geometry.
pub fn end2end_from_arch(arch: &ModelArch, geom: ScanGeometry) -> Result<End2End, TrainError> {
    match arch {
        ModelArch::End2End { g1, g2, bridge } => Ok(End2End::new(g1, g2, *bridge, geom)?),
        ModelArch::Generator { g1, g2, bridge, z_channels } => {
            Ok(End2End::with_latent(g1, g2, *bridge, *z_channels, geom)?)
        }
        other => Err(TrainError::Invalid(format!(
            "checkpoint holds a {other:?}, not a reconstruction model"
        ))),
    }
}

/// Rebuilds a critic from its checkpoint descriptor.
pub fn critic_from_arch(arch: &ModelArch, image_size: usize) -> Result<Critic, TrainError> {
    match arch {
        ModelArch::Critic { stages, base } => Ok(Critic::new(*stages, *base, image_size)?),
        other => Err(TrainError::Invalid(format!("checkpoint holds a {other:?}, not a critic"))),
    }
}

/// Trains the end-to-end reconstruction model and returns the final
/// checkpoint path. Resumes from the newest checkpoint in
/// `<run_dir>/recon` when one exists.
pub fn train_recon(cfg: &RunConfig, progress: Progress) -> Result<PathBuf, TrainError> {
    if cfg.steps == 0 {
        return Err(TrainError::Invalid("train.steps must be positive".into()));
    }
    let pipe = Pipeline::new(cfg)?;
    let dir = Path::new(&cfg.run_dir).join("recon");
    fs::create_dir_all(&dir)?;
    let model = End2End::new(&cfg.preset_g1, &cfg.preset_g2, cfg.bridge_channels, pipe.geom)?;
    let arch = ModelArch::End2End {
        g1: model.g1.name.into(),
        g2: model.g2.name.into(),
        bridge: cfg.bridge_channels,
    };
    let (mut store, mut adam, start) = match latest_checkpoint(&dir) {
        Some((step, path)) => {
            let ck = Checkpoint::<f32>::load(&path)?;
            if ck.arch != arch {
                return Err(TrainError::Invalid(format!(
                    "{} was trained with a different architecture",
                    path.display()
                )));
            }
            let (s, a) = ck.restore(cfg.seed);
            (s, a, step)
        }
        None => (ParamStore::new(cfg.seed), AdamState::new(), 0),
    };
    let total = cfg.steps as u64;
    if start >= total {
        return Ok(dir.join(format!("step-{start}.tnsr")));
    }
    let mut csv = CsvLog::open(&dir.join("loss.csv"), "step,loss,lr", start > 0)?;
    let weights = mse_weights::<f32>(&pipe.geom, cfg.batch_size);
    let mut last = None;
    for step in start..total {
        let mut readings_planes = Vec::with_capacity(cfg.batch_size);
        let mut truth_planes = Vec::with_capacity(cfg.batch_size);
        for i in 0..cfg.batch_size {
            let item = pipe.item(step * cfg.batch_size as u64 + i as u64)?;
            readings_planes.push(item.readings.normalized());
            truth_planes.push(item.image.into_data());
        }
        let mut g = Graph::new();
        let mut bind = Bindings::new();
        let r_in = g.input(stack_planes::<f32>(&readings_planes));
        let out = model.forward(&mut g, &mut store, &mut bind, r_in, None);
        let truth = g.input(stack_planes::<f32>(&truth_planes));
        let diff = g.sub(out, truth);
        let sq = g.mul(diff, diff);
        let loss = g.dot_const(sq, weights.clone());
        let loss_val = g.scalar(loss).to_f64_();
        if !loss_val.is_finite() {
            return Err(TrainError::Diverged { step, what: "reconstruction loss" });
        }
        g.backward(loss);
        let grads = bind.grads(&g);
        let lr = effective_lr(cfg, step);
        adam.step(&mut store.values, &grads, lr);
        csv.row(&format!("{step},{loss_val},{lr}"))?;
        progress(StepLog { step, loss: loss_val, critic_loss: 0.0, lr });
        let done = step + 1;
        if done % cfg.checkpoint_every.max(1) as u64 == 0 || done == total {
            let path = dir.join(format!("step-{done}.tnsr"));
            Checkpoint::capture(arch.clone(), done, &store, &adam).save(&path)?;
            last = Some(path);
        }
    }
    Ok(last.expect("the final step always writes a checkpoint"))
}

/// Uniform i.i.d. signals over the Bayes grid range plus one fresh readings
/// matrix; a pure function of (run seed, level, phase, t).
fn posterior_batch(
    pipe: &Pipeline,
    table: &PosteriorTable,
    geom: ScanGeometry,
    level: usize,
    phase: usize,
    t: u64,
) -> Result<(Array2<f64>, SensorReadings), TrainError> {
    let grid = table.grid();
    let (lo, hi) = (grid.point(0), grid.point(grid.len() - 1));
    let mut rng = root(phase_seed(pipe.cfg.seed, &format!("posterior/{level}/{phase}/{t}/y")));
    let y = Array2::from_shape_fn(geom.sino_shape(), |_| rng.random_range(lo..hi));
    let sino = Sinogram::new(geom, y.clone())?;
    let readings = simulate_readings(
        &sino,
        table.params(),
        phase_seed(pipe.cfg.seed, &format!("posterior/{level}/{phase}/{t}/r")),
    )?;
    Ok((y, readings))
}

/// Trains the posterior regressors for every ladder level in sequence —
/// the mean by MSE against true signals, the spread by likelihood around
/// the frozen mean, then both distilled into one two-headed net — and
/// writes `<run_dir>/posterior/level-<i>.tnsr` per level.
pub fn train_posterior(cfg: &RunConfig, progress: Progress) -> Result<Vec<PathBuf>, TrainError> {
    let pipe = Pipeline::new(cfg)?;
    let tables = pipe.oracle_tables()?;
    let dir = Path::new(&cfg.run_dir).join("posterior");
    fs::create_dir_all(&dir)?;
    let mut csv = CsvLog::open(&dir.join("loss.csv"), "step,level,phase,loss,lr", false)?;
    let net = PosteriorNet::new(64, 3, 1);
    let arch = ModelArch::Posterior { hidden: 64, depth: 3, kernel: 1 };
    let lr = if cfg.lr > 0.0 { cfg.lr } else { POSTERIOR_LR };
    // The likelihood phase takes a smaller step: its quotient term is far
    // stiffer than the squared-error phases and blows up under a rate the
    // other two phases handle comfortably.
    let phase_lr = [lr, lr / 3.0, lr];
    // Pixels are i.i.d. under the sensor model, so the regressors train on a
    // fixed wide sampling plane regardless of the configured scan shape.
    // That matters for the rare bright readings: they appear once in several
    // thousand pixels yet need the mean pinned to within a fraction of their
    // tiny posterior spread, which only generous batches can average out.
    let sample_geom = ScanGeometry::with_detectors(2, 64, 64)?;
    let mut paths = Vec::new();
    let mut global = 0u64;
    for (level, table) in tables.iter().enumerate() {
        let mut store = ParamStore::<f64>::new(cfg.seed);
        let mut adam = AdamState::new();
        // The regressors are pointwise, so the distillation phase can cover
        // the entire (discrete) input domain in one full batch per step.
        let r_count = 1usize << table.params().b;
        let denom = (r_count - 1) as f64;
        let all_readings =
            Array2::from_shape_fn((1, r_count), |(_, r)| r as f64 / denom);
        for phase in 0..3 {
            for t in 0..cfg.posterior_steps as u64 {
                let mut g = Graph::new();
                let (loss, bind) = match phase {
                    0 => {
                        let (y, readings) =
                            posterior_batch(&pipe, table, sample_geom, level, phase, t)?;
                        let x = g.input(stack_planes::<f64>(&[readings.normalized()]));
                        let mut bind = Bindings::new();
                        let mu = net.forward_mu(&mut g, &mut store, &mut bind, x);
                        let target = g.input(stack_planes::<f64>(&[y]));
                        let d = g.sub(mu, target);
                        let sq = g.mul(d, d);
                        (g.mean(sq), bind)
                    }
                    1 => {
                        let (y, readings) =
                            posterior_batch(&pipe, table, sample_geom, level, phase, t)?;
                        let x = g.input(stack_planes::<f64>(&[readings.normalized()]));
                        let mut frozen = Bindings::frozen();
                        let mu = net.forward_mu(&mut g, &mut store, &mut frozen, x);
                        let mut bind = Bindings::new();
                        let sigma = net.forward_sigma(&mut g, &mut store, &mut bind, x);
                        let yv = g.input(stack_planes::<f64>(&[y]));
                        (posterior_nll_node(&mut g, yv, mu, sigma), bind)
                    }
                    _ => {
                        let x = g.input(stack_planes::<f64>(&[all_readings.clone()]));
                        let mut frozen = Bindings::frozen();
                        let mu_t = net.forward_mu(&mut g, &mut store, &mut frozen, x);
                        let pre_t = net.forward_sigma_pre(&mut g, &mut store, &mut frozen, x);
                        let mut bind = Bindings::new();
                        let (mu_s, pre_s) =
                            net.forward_joint_pre(&mut g, &mut store, &mut bind, x);
                        let dm = g.sub(mu_s, mu_t);
                        let dm2 = g.mul(dm, dm);
                        let mu_mse = g.mean(dm2);
                        let ds = g.sub(pre_s, pre_t);
                        let ds2 = g.mul(ds, ds);
                        let sig_mse = g.mean(ds2);
                        (g.add(mu_mse, sig_mse), bind)
                    }
                };
                let loss_val = g.scalar(loss).to_f64_();
                if !loss_val.is_finite() {
                    return Err(TrainError::Diverged { step: global, what: "posterior loss" });
                }
                g.backward(loss);
                let grads = bind.grads(&g);
                // Cosine decay to a hundredth of the phase rate: the per-bin
                // targets sit well below the optimizer's stationary noise at
                // the opening rate, so each phase has to anneal to land.
                let frac = t as f64 / cfg.posterior_steps.max(1) as f64;
                let lr_p = phase_lr[phase]
                    * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
                adam.step(&mut store.values, &grads, lr_p);
                csv.row(&format!("{global},{level},{phase},{loss_val},{lr_p}"))?;
                progress(StepLog { step: global, loss: loss_val, critic_loss: 0.0, lr: lr_p });
                global += 1;
            }
        }
        let path = dir.join(format!("level-{level}.tnsr"));
        Checkpoint::capture(arch.clone(), 3 * cfg.posterior_steps as u64, &store, &adam)
            .save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Adversarial training of the latent-conditioned sampler against the
/// spectrally normalized critic. Checkpoints come in pairs —
/// `step-<n>.tnsr` (generator) and `step-<n>.critic.tnsr` — and the final
/// pair of paths is returned.
pub fn train_wgan(cfg: &RunConfig, progress: Progress) -> Result<(PathBuf, PathBuf), TrainError> {
    if cfg.gan_steps == 0 {
        return Err(TrainError::Invalid("gan.steps must be positive".into()));
    }
    if cfg.batch_size < 2 {
        return Err(TrainError::Invalid("adversarial training needs batch_size >= 2".into()));
    }
    let pipe = Pipeline::new(cfg)?;
    let mut provider = PosteriorProvider::from_cfg(&pipe)?;
    let dir = Path::new(&cfg.run_dir).join("gan");
    fs::create_dir_all(&dir)?;
    let model = End2End::with_latent(
        &cfg.gan_preset_g1,
        &cfg.gan_preset_g2,
        cfg.bridge_channels,
        cfg.z_channels,
        pipe.geom,
    )?;
    let z_shape = model.latent_shape();
    let critic = Critic::new(cfg.critic_stages, cfg.critic_base, cfg.image_size)?;
    let g_arch = ModelArch::Generator {
        g1: model.g1.name.into(),
        g2: model.g2.name.into(),
        bridge: cfg.bridge_channels,
        z_channels: cfg.z_channels,
    };
    let c_arch = ModelArch::Critic { stages: cfg.critic_stages, base: cfg.critic_base };
    let (mut gstore, mut gadam, mut cstore, mut cadam, start) = match latest_checkpoint(&dir) {
        Some((step, path)) => {
            let gck = Checkpoint::<f32>::load(&path)?;
            let cpath = dir.join(format!("step-{step}.critic.tnsr"));
            let cck = Checkpoint::<f32>::load(&cpath)?;
            if gck.arch != g_arch || cck.arch != c_arch {
                return Err(TrainError::Invalid(format!(
                    "{} was trained with a different architecture",
                    path.display()
                )));
            }
            let (gs, ga) = gck.restore(cfg.seed);
            let (cs, ca) = cck.restore(cfg.seed);
            (gs, ga, cs, ca, step)
        }
        None => (
            ParamStore::new(cfg.seed),
            AdamState::new(),
            ParamStore::new(cfg.seed),
            AdamState::new(),
            0,
        ),
    };
    let total = cfg.gan_steps as u64;
    if start >= total {
        return Ok((
            dir.join(format!("step-{start}.tnsr")),
            dir.join(format!("step-{start}.critic.tnsr")),
        ));
    }
    let mut csv = CsvLog::open(&dir.join("loss.csv"), "step,critic_loss,generator_loss,lr", start > 0)?;
    let b = cfg.batch_size;
    // Per outer step the data stream advances by n_critic real batches,
    // one fake-readings batch, and one generator-readings batch.
    let stride = (cfg.n_critic + 2) as u64 * b as u64;
    let mut last = None;
    for step in start..total {
        let base = GAN_INDEX_BASE + step * stride;
        let lr = effective_lr(cfg, step);
        let mut zrng = root(phase_seed(cfg.seed, &format!("gan/z/{step}")));

        // One generated batch per outer step, reused across the critic
        // updates; the generator pass is the expensive part.
        let mut fake_planes = Vec::with_capacity(b);
        {
            let mut planes = Vec::with_capacity(b);
            for i in 0..b {
                let item = pipe.item(base + (cfg.n_critic * b + i) as u64)?;
                planes.push(item.readings.normalized());
            }
            let z = sample_latent_sphere::<f32>(&mut zrng, b, z_shape);
            let mut g = Graph::new();
            let mut frozen = Bindings::frozen();
            let r_in = g.input(stack_planes::<f32>(&planes));
            let zv = g.input(z);
            let out = model.forward(&mut g, &mut gstore, &mut frozen, r_in, Some(zv));
            for i in 0..b {
                fake_planes.push(batch_plane(g.value(out), i).mapv(|v| v.to_f64_()));
            }
        }

        let mut critic_loss = 0.0;
        for k in 0..cfg.n_critic {
            let mut planes = Vec::with_capacity(2 * b);
            for i in 0..b {
                let (image, _) = pipe.phantom(base + (k * b + i) as u64);
                planes.push(image.into_data());
            }
            planes.extend(fake_planes.iter().cloned());
            let mut g = Graph::new();
            let mut bind = Bindings::new();
            let x = g.input(stack_planes::<f32>(&planes));
            let (scores, _) = critic.forward(&mut g, &mut cstore, &mut bind, x);
            let (d_real, d_fake) = g.split2(scores, 0, b);
            let loss = critic_loss_node(&mut g, d_real, d_fake);
            critic_loss = g.scalar(loss).to_f64_();
            if !critic_loss.is_finite() {
                return Err(TrainError::Diverged { step, what: "critic loss" });
            }
            g.backward(loss);
            let grads = bind.grads(&g);
            cadam.step(&mut cstore.values, &grads, lr);
        }

        // Generator update: two latent draws per reading, stacked along the
        // batch axis so one forward pass serves both samples.
        let gen_loss;
        {
            let mut planes = Vec::with_capacity(b);
            let mut mu_planes = Vec::with_capacity(b);
            let mut sig_planes = Vec::with_capacity(b);
            for i in 0..b {
                let item = pipe.item(base + ((cfg.n_critic + 1) * b + i) as u64)?;
                let grid = provider.grid(item.level, &item.readings)?;
                planes.push(item.readings.normalized());
                mu_planes.push(grid.mu().data().clone());
                sig_planes.push(grid.sigma().data().clone());
            }
            let doubled: Vec<Array2<f64>> = planes.iter().chain(planes.iter()).cloned().collect();
            let z = sample_latent_sphere::<f32>(&mut zrng, 2 * b, z_shape);
            let mut g = Graph::new();
            let mut bind = Bindings::new();
            let r_in = g.input(stack_planes::<f32>(&doubled));
            let zv = g.input(z);
            let out = model.forward(&mut g, &mut gstore, &mut bind, r_in, Some(zv));
            let sino = g.radon_forward(out, pipe.projector.clone());
            let (y1, y2) = g.split2(sino, 0, b);
            let mu = g.input(stack_planes::<f32>(&mu_planes));
            let sig = g.input(stack_planes::<f32>(&sig_planes));
            let kl = kl_diversity_node(&mut g, y1, y2, mu, sig, SIGMA_FLOOR);
            let mut cfrozen = Bindings::frozen();
            let (scores, _) = critic.forward(&mut g, &mut cstore, &mut cfrozen, out);
            let (d1, d2) = g.split2(scores, 0, b);
            let loss = generator_loss_node(&mut g, kl, d1, d2, cfg.lambda);
            gen_loss = g.scalar(loss).to_f64_();
            if !gen_loss.is_finite() {
                return Err(TrainError::Diverged { step, what: "generator loss" });
            }
            g.backward(loss);
            let grads = bind.grads(&g);
            gadam.step(&mut gstore.values, &grads, lr);
        }

        csv.row(&format!("{step},{critic_loss},{gen_loss},{lr}"))?;
        progress(StepLog { step, loss: gen_loss, critic_loss, lr });
        let done = step + 1;
        if done % cfg.checkpoint_every.max(1) as u64 == 0 || done == total {
            let gpath = dir.join(format!("step-{done}.tnsr"));
            let cpath = dir.join(format!("step-{done}.critic.tnsr"));
            Checkpoint::capture(g_arch.clone(), done, &gstore, &gadam).save(&gpath)?;
            Checkpoint::capture(c_arch.clone(), done, &cstore, &cadam).save(&cpath)?;
            last = Some((gpath, cpath));
        }
    }
    Ok(last.expect("the final step always writes a checkpoint pair"))
}

/// Projected-gradient refinement over the latent: descend
/// `||A G(r,z) - mu||^2_sigma + lambda D(G(r,z))` in z, renormalizing onto
/// the unit sphere after every step. `z0` must already be unit-norm.
/// Returns the final latent and the objective trace (length `iters + 1`,
/// entry 0 evaluated at `z0`); the callback sees every iterate's objective,
/// latent norm, and reconstruction.
#[allow(clippy::too_many_arguments)]
pub fn refine_reconstruction(
    model: &End2End,
    gen_store: &mut ParamStore<f32>,
    critic: &Critic,
    critic_store: &mut ParamStore<f32>,
    readings: &SensorReadings,
    post: &PosteriorGrid,
    z0: ArrayD<f32>,
    lr: f64,
    iters: usize,
    lambda: f64,
    on_iter: &mut dyn FnMut(usize, f64, f64, &Array2<f32>),
) -> Result<(ArrayD<f32>, Vec<f64>), TrainError> {
    let mut z = z0;
    let mut trace = Vec::with_capacity(iters + 1);
    let r_plane = readings.normalized();
    let mu = stack_planes::<f32>(&[post.mu().data().clone()]);
    let sig = stack_planes::<f32>(&[post.sigma().data().clone()]);
    for iter in 0..=iters {
        let mut g = Graph::new();
        let zv = g.param(z.clone());
        let mut gfrozen = Bindings::frozen();
        let r_in = g.input(stack_planes::<f32>(&[r_plane.clone()]));
        let out = model.forward(&mut g, gen_store, &mut gfrozen, r_in, Some(zv));
        let sino = g.radon_forward(out, model.projector().clone());
        let muv = g.input(mu.clone());
        let sigv = g.input(sig.clone());
        let diff = g.sub(sino, muv);
        let wn = weighted_norm_node(&mut g, diff, sigv);
        let mut cfrozen = Bindings::frozen();
        let (scores, _) = critic.forward(&mut g, critic_store, &mut cfrozen, out);
        let d = g.mean(scores);
        let dl = g.mul_scalar(d, lambda as f32);
        let obj = g.add(wn, dl);
        let obj_val = g.scalar(obj).to_f64_();
        trace.push(obj_val);
        on_iter(iter, obj_val, l2_norm(&z), &batch_plane(g.value(out), 0));
        if !obj_val.is_finite() {
            return Err(TrainError::Diverged { step: iter as u64, what: "refinement objective" });
        }
        if iter == iters {
            break;
        }
        g.backward(obj);
        let gz = g.grad(zv).expect("latent carries a gradient");
        ndarray::Zip::from(&mut z).and(gz).for_each(|z, &d| *z -= lr as f32 * d);
        project_to_sphere(&mut z);
    }
    Ok((z, trace))
}

/// `n` generator samples for one readings matrix, each under an independent
/// unit-sphere latent, computed in a single batched forward pass.
pub fn sample_posterior_images(
    model: &End2End,
    store: &mut ParamStore<f32>,
    readings: &SensorReadings,
    n: usize,
    seed: u64,
) -> Vec<Array2<f32>> {
    let mut rng = root(phase_seed(seed, "sample/z"));
    let z = sample_latent_sphere::<f32>(&mut rng, n, model.latent_shape());
    let plane = readings.normalized();
    let planes: Vec<Array2<f64>> = (0..n).map(|_| plane.clone()).collect();
    let mut g = Graph::new();
    let mut frozen = Bindings::frozen();
    let r_in = g.input(stack_planes::<f32>(&planes));
    let zv = g.input(z);
    let out = model.forward(&mut g, store, &mut frozen, r_in, Some(zv));
    (0..n).map(|i| batch_plane(g.value(out), i)).collect()
}

/// Deterministic single-image reconstruction with the latent-free model.
pub fn reconstruct_one(
    model: &End2End,
    store: &mut ParamStore<f32>,
    readings: &SensorReadings,
) -> Array2<f32> {
    let mut g = Graph::new();
    let mut frozen = Bindings::frozen();
    let r_in = g.input(stack_planes::<f32>(&[readings.normalized()]));
    let out = model.forward(&mut g, store, &mut frozen, r_in, None);
    batch_plane(g.value(out), 0)
}

/// One line of an evaluation report.
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub sample_id: u64,
    pub signal_s: f64,
    pub method: &'static str,
    pub ssim: f64,
}

/// Held-out comparison per ladder level: classical reconstruction on the
/// posterior mean, and (when a checkpoint is given) the trained model,
/// both scored by SSIM against the ground-truth phantom.
pub fn evaluate(
    cfg: &RunConfig,
    ckpt: Option<&Checkpoint<f32>>,
    n_per_level: usize,
) -> Result<Vec<EvalRow>, TrainError> {
    let pipe = Pipeline::new(cfg)?;
    let mut provider = PosteriorProvider::from_cfg(&pipe)?;
    let mut net = match ckpt {
        Some(ck) => {
            let model = end2end_from_arch(&ck.arch, pipe.geom)?;
            if model.z_channels > 0 {
                return Err(TrainError::Invalid(
                    "evaluation expects the deterministic reconstruction model".into(),
                ));
            }
            let (store, _) = ck.restore(cfg.seed);
            Some((model, store))
        }
        None => None,
    };
    let mut rows = Vec::new();
    for level in 0..pipe.noise.len() {
        for j in 0..n_per_level as u64 {
            let (image, sinogram) = pipe.phantom(EVAL_INDEX_BASE + j);
            let image = ImageGrid::new(pipe.geom, image.into_data())?;
            let readings = simulate_readings(
                &sinogram,
                &pipe.noise[level],
                phase_seed(cfg.seed, &format!("eval/{level}/{j}")),
            )?;
            let grid = provider.grid(level, &readings)?;
            let fbp = fbp_with_projector(&pipe.projector, grid.mu(), FilterWindow::RamLak);
            rows.push(EvalRow {
                sample_id: j,
                signal_s: cfg.s_ladder[level],
                method: "fbp",
                ssim: ssim(&image, &fbp),
            });
            if let Some((model, store)) = net.as_mut() {
                let recon = reconstruct_one(model, store, &readings).mapv(|v| v as f64);
                let recon = ImageGrid::new(pipe.geom, recon)?;
                rows.push(EvalRow {
                    sample_id: j,
                    signal_s: cfg.s_ladder[level],
                    method: "net",
                    ssim: ssim(&image, &recon),
                });
            }
        }
    }
    Ok(rows)
}
