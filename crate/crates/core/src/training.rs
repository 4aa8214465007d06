//! Alternating discriminator/generator optimization with checkpoints.
//!
//! Every random choice of iteration `i` comes from an RNG seeded by
//! `(seed, i)`, so a run resumed from a checkpoint continues exactly as the
//! uninterrupted run would have.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use impute_tensor::{Adam, AdamConfig, Checkpoint, Element, Graph, Tensor, TensorError, Var};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::DomainLabel;
use crate::error::{io_err, Error, Result};
use crate::image::ModalityImage;
use crate::losses::{self, AdvLoss, LossBreakdown, LossWeights, LOG_HEADER};
use crate::networks::{ArchConfig, Content, Model, GENERATOR_PREFIXES};
use crate::phantom::{splitmix64, PhantomSample};

pub const LOG_FILE: &str = "loss_log.csv";
const G_GROUP: &str = "G";
const DSC_GROUP: &str = "Dsc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_main: f64,
    /// Learning rate of the mapping network.
    pub lr_mapping: f64,
    pub lambda_cyc: f64,
    pub lambda_adv: f64,
    pub lambda_ds: f64,
    /// Iterations over which the diversification weight decays linearly to 0.
    pub sdl_decay_iters: u64,
    /// Probability of taking the target style from a reference image rather
    /// than from the mapping network.
    pub style_source_mix: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub adv_loss: AdvLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200_000,
            batch_size: 2,
            lr_main: 1e-4,
            lr_mapping: 1e-6,
            lambda_cyc: 10.0,
            lambda_adv: 1.0,
            lambda_ds: 1.0,
            sdl_decay_iters: 100_000,
            style_source_mix: 0.5,
            seed: 0,
            checkpoint_every: 10_000,
            adv_loss: AdvLoss::Linear,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.iterations > 0, "iterations must be positive"),
            (self.batch_size > 0, "batch_size must be positive"),
            (self.lr_main > 0.0, "lr_main must be positive"),
            (self.lr_mapping > 0.0, "lr_mapping must be positive"),
            (self.lambda_cyc >= 0.0, "lambda_cyc must be non-negative"),
            (self.lambda_adv >= 0.0, "lambda_adv must be non-negative"),
            (self.lambda_ds >= 0.0, "lambda_ds must be non-negative"),
            (self.sdl_decay_iters > 0, "sdl_decay_iters must be positive"),
            ((0.0..=1.0).contains(&self.style_source_mix), "style_source_mix must be in [0, 1]"),
            (self.checkpoint_every > 0, "checkpoint_every must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(msg.to_string())),
            None => Ok(()),
        }
    }

    /// Diversification weight in effect at 1-based iteration `iter`.
    pub fn lambda_ds_at(&self, iter: u64) -> f64 {
        let done = (iter.saturating_sub(1)) as f64 / self.sdl_decay_iters as f64;
        self.lambda_ds * (1.0 - done).max(0.0)
    }

    pub fn weights_at(&self, iter: u64) -> LossWeights {
        LossWeights {
            cyc: self.lambda_cyc,
            adv: self.lambda_adv,
            ds: self.lambda_ds_at(iter),
        }
    }
}

/// Where the target style of a training task comes from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum TaskStyle {
    /// Style of the target image itself; the diversification partner is the
    /// target-domain image of sample `second`.
    Reference { second: usize },
    /// Mapping-network styles from two noise draws.
    Latent { z1: Vec<f32>, z2: Vec<f32> },
}

/// One generator task: impute `target` of sample `sample`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Task {
    pub sample: usize,
    pub target: DomainLabel,
    pub style: TaskStyle,
}

/// Uniform target domain; the inputs are the other three in ascending order.
pub fn sample_task<'a, R: Rng + ?Sized>(
    sample: &'a PhantomSample,
    rng: &mut R,
) -> (DomainLabel, [&'a ModalityImage; 3], &'a ModalityImage) {
    let t = random_domain(rng);
    let inputs = DomainLabel::inputs_for(t).map(|d| sample.image(d));
    (t, inputs, sample.image(t))
}

fn random_domain<R: Rng + ?Sized>(rng: &mut R) -> DomainLabel {
    DomainLabel::ALL[rng.random_range(0..DomainLabel::COUNT)]
}

fn noise<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f32> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect()
}

/// Draws the tasks of one iteration.
pub fn plan_iteration(cfg: &TrainConfig, arch: &ArchConfig, data_len: usize, iter: u64) -> Vec<Task> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ splitmix64(iter)));
    (0..cfg.batch_size)
        .map(|_| {
            let sample = rng.random_range(0..data_len);
            let target = random_domain(&mut rng);
            let style = if rng.random::<f64>() < cfg.style_source_mix {
                TaskStyle::Reference {
                    second: rng.random_range(0..data_len),
                }
            } else {
                TaskStyle::Latent {
                    z1: noise(arch.noise_dim, &mut rng),
                    z2: noise(arch.noise_dim, &mut rng),
                }
            };
            Task { sample, target, style }
        })
        .collect()
}

/// Values on the graph produced by the forward translation of one task.
pub struct Translation {
    pub inputs: [Var; 3],
    pub target: Var,
    pub combined: Content,
    pub style: Var,
    pub x_hat: Var,
}

fn style_var<T: Element>(
    model: &Model<T>,
    g: &mut Graph<T>,
    data: &[PhantomSample],
    task: &Task,
    target: Var,
    second: bool,
) -> Result<Var> {
    let t = task.target;
    match &task.style {
        TaskStyle::Reference { second: idx } => {
            let x = if second {
                g.constant(data[*idx].image(t).to_tensor())?
            } else {
                target
            };
            model.style_encode(g, x, t)
        }
        TaskStyle::Latent { z1, z2 } => {
            let z = if second { z2 } else { z1 };
            let z = g.constant(Tensor::new(&[1, z.len()], z.iter().map(|&v| T::of(v as f64)).collect())?)?;
            model.map_noise(g, z, t)
        }
    }
}

/// Encodes the three inputs, combines them and decodes the target.
pub fn translate<T: Element>(model: &Model<T>, g: &mut Graph<T>, data: &[PhantomSample], task: &Task) -> Result<Translation> {
    let sample = &data[task.sample];
    let t = task.target;
    let mut inputs = Vec::with_capacity(3);
    for d in DomainLabel::inputs_for(t) {
        inputs.push(g.constant(sample.image(d).to_tensor())?);
    }
    let inputs: [Var; 3] = inputs.try_into().expect("three inputs");
    let target = g.constant(sample.image(t).to_tensor())?;
    let contents = inputs
        .iter()
        .map(|&x| model.content_encode(g, x))
        .collect::<Result<Vec<_>>>()?;
    let combined = model.combine(g, [&contents[0], &contents[1], &contents[2]])?;
    let style = style_var(model, g, data, task, target, false)?;
    let x_hat = model.decode(g, &combined, style)?;
    Ok(Translation {
        inputs,
        target,
        combined,
        style,
        x_hat,
    })
}

/// Loss nodes of the generator objective for one task.
pub struct GeneratorPass {
    pub translation: Translation,
    pub csl: Var,
    pub ccl: Var,
    pub g_adv: Var,
    pub sdl: Option<Var>,
    pub total: Var,
}

/// Full generator forward pass: translation, cyclic reconstruction,
/// adversarial term and (when `w.ds > 0`) diversification.
pub fn generator_pass<T: Element>(
    model: &Model<T>,
    g: &mut Graph<T>,
    data: &[PhantomSample],
    task: &Task,
    adv: AdvLoss,
    w: LossWeights,
) -> Result<GeneratorPass> {
    let tr = translate(model, g, data, task)?;
    let t = task.target;
    let s_fake = model.style_encode(g, tr.x_hat, t)?;
    let csl = losses::csl(g, tr.style, s_fake)?;

    let re_encoded = model.content_encode(g, tr.x_hat)?;
    let mut recon = Vec::with_capacity(3);
    for (d, &x_d) in DomainLabel::inputs_for(t).iter().zip(&tr.inputs) {
        let c_d = model.separate(g, &re_encoded, *d)?;
        let s_d = model.style_encode(g, x_d, *d)?;
        recon.push(model.decode(g, &c_d, s_d)?);
    }
    let ccl = losses::ccl(g, [recon[0], recon[1], recon[2]], tr.inputs)?;

    let p_fake = model.discriminate(g, tr.x_hat, t)?;
    let g_adv = losses::g_adv(g, p_fake, adv)?;

    let sdl = if w.ds > 0.0 {
        let s2 = style_var(model, g, data, task, tr.target, true)?;
        let x2 = model.decode(g, &tr.combined, s2)?;
        Some(losses::sdl(g, tr.x_hat, x2)?)
    } else {
        None
    };
    let cl = g.add(csl, ccl)?;
    let total = losses::generator_loss(g, cl, g_adv, sdl, w)?;
    Ok(GeneratorPass {
        translation: tr,
        csl,
        ccl,
        g_adv,
        sdl,
        total,
    })
}

/// Model plus optimizer state and iteration counter.
pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    g_opt: Adam<f32>,
    d_opt: Adam<f32>,
    iteration: u64,
}

#[derive(Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub iteration: u64,
}

impl Trainer {
    pub fn new(arch: ArchConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(arch, cfg.seed)?;
        Ok(Self::with_model(model, cfg))
    }

    fn with_model(model: Model<f32>, cfg: TrainConfig) -> Self {
        let g_group: Vec<_> = model
            .param_ids(&GENERATOR_PREFIXES)
            .into_iter()
            .map(|id| {
                let lr = if model.store.get(id).name.starts_with("M.") {
                    cfg.lr_mapping
                } else {
                    cfg.lr_main
                };
                (id, lr)
            })
            .collect();
        let d_group: Vec<_> = model.param_ids(&["Dsc."]).into_iter().map(|id| (id, cfg.lr_main)).collect();
        let g_opt = Adam::new(&model.store, &g_group, AdamConfig::default());
        let d_opt = Adam::new(&model.store, &d_group, AdamConfig::default());
        Self {
            model,
            cfg,
            g_opt,
            d_opt,
            iteration: 0,
        }
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    fn non_finite(&self, iter: u64, phase: &str, tasks: &[Task], err: Error) -> Error {
        match err {
            Error::Tensor(TensorError::NonFinite { op }) => {
                let dump = serde_json::json!({
                    "iteration": iter,
                    "phase": phase,
                    "op": op,
                    "tasks": tasks,
                });
                Error::NonFinite {
                    iteration: iter,
                    detail: dump.to_string(),
                }
            }
            other => other,
        }
    }

    /// Runs one discriminator step followed by one generator step.
    pub fn step(&mut self, data: &[PhantomSample]) -> Result<LossBreakdown> {
        if data.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        let iter = self.iteration + 1;
        let tasks = plan_iteration(&self.cfg, self.model.arch(), data.len(), iter);
        let dsc_adv = self
            .discriminator_step(data, &tasks)
            .map_err(|e| self.non_finite(iter, "discriminator", &tasks, e))?;
        let mut b = self
            .generator_step(data, &tasks, iter)
            .map_err(|e| self.non_finite(iter, "generator", &tasks, e))?;
        b.dsc_adv = dsc_adv;
        let values = [b.csl, b.ccl, b.cl, b.g_adv, b.sdl, b.g_total, b.dsc_adv];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration: iter,
                detail: serde_json::json!({ "iteration": iter, "losses": b, "tasks": tasks }).to_string(),
            });
        }
        self.iteration = iter;
        Ok(b)
    }

    /// Updates the discriminator on `tasks`; generator weights are untouched.
    pub fn discriminator_step(&mut self, data: &[PhantomSample], tasks: &[Task]) -> Result<f64> {
        let inv_b = 1.0 / tasks.len() as f64;
        let model = &mut self.model;
        model.store.zero_grad();
        let mut total = 0.0;
        for task in tasks {
            let fake = {
                let mut ng = Graph::no_grad();
                let tr = translate(model, &mut ng, data, task)?;
                ng.value(tr.x_hat).clone()
            };
            let mut g = Graph::new();
            let real = g.constant(data[task.sample].image(task.target).to_tensor())?;
            let fake = g.constant(fake)?;
            let p_real = model.discriminate(&mut g, real, task.target)?;
            let p_fake = model.discriminate(&mut g, fake, task.target)?;
            let loss = losses::dsc_adv(&mut g, p_real, p_fake, self.cfg.adv_loss)?;
            total += g.item(loss) as f64;
            let scaled = g.scale(loss, inv_b)?;
            g.backward(scaled, &mut model.store)?;
        }
        self.d_opt.step(&mut model.store)?;
        Ok(total * inv_b)
    }

    /// Updates the generator modules on `tasks` at 1-based iteration `iter`;
    /// discriminator weights are untouched. `dsc_adv` is left at 0.
    pub fn generator_step(&mut self, data: &[PhantomSample], tasks: &[Task], iter: u64) -> Result<LossBreakdown> {
        let w = self.cfg.weights_at(iter);
        let inv_b = 1.0 / tasks.len() as f64;
        let model = &mut self.model;
        model.store.zero_grad();
        let (mut csl, mut ccl, mut g_adv, mut sdl) = (0.0, 0.0, 0.0, 0.0);
        for task in tasks {
            let mut g = Graph::new();
            g.freeze_prefix("Dsc.");
            let pass = generator_pass(model, &mut g, data, task, self.cfg.adv_loss, w)?;
            csl += g.item(pass.csl) as f64;
            ccl += g.item(pass.ccl) as f64;
            g_adv += g.item(pass.g_adv) as f64;
            sdl += pass.sdl.map_or(0.0, |v| g.item(v) as f64);
            let scaled = g.scale(pass.total, inv_b)?;
            g.backward(scaled, &mut model.store)?;
        }
        self.g_opt.step(&mut model.store)?;
        Ok(LossBreakdown::assemble(
            csl * inv_b,
            ccl * inv_b,
            g_adv * inv_b,
            sdl * inv_b,
            0.0,
            w,
        ))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let header = CheckpointHeader {
            arch: self.model.arch().clone(),
            train: self.cfg.clone(),
            iteration: self.iteration,
        };
        let mut entries = self.model.param_entries();
        entries.extend(self.g_opt.state_entries(&self.model.store, G_GROUP));
        entries.extend(self.d_opt.state_entries(&self.model.store, DSC_GROUP));
        Ok(Checkpoint {
            header: serde_json::to_string(&header)?,
            entries,
        })
    }

    /// Restores model, optimizer state and iteration from a checkpoint.
    /// `cfg` replaces the stored training configuration.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let header: CheckpointHeader = serde_json::from_str(&ck.header)?;
        let mut model = Model::new(header.arch, cfg.seed)?;
        let lookup = |name: &str| ck.get(name).cloned();
        model.load_params(lookup)?;
        let mut trainer = Self::with_model(model, cfg);
        trainer.g_opt.load_state(&trainer.model.store, G_GROUP, lookup)?;
        trainer.d_opt.load_state(&trainer.model.store, DSC_GROUP, lookup)?;
        trainer.iteration = header.iteration;
        Ok(trainer)
    }
}

/// Model and header stored in a checkpoint file.
pub fn load_model(path: &Path) -> Result<(Model<f32>, CheckpointHeader)> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        TensorError::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let header: CheckpointHeader = serde_json::from_str(&ck.header).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: format!("bad checkpoint header: {e}"),
    })?;
    let mut model = Model::new(header.arch.clone(), header.train.seed)?;
    model.load_params(|name| ck.get(name).cloned())?;
    Ok((model, header))
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt-{iteration:07}.mist")
}

/// Latest `ckpt-*.mist` in `dir` by iteration number.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let iter = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("ckpt-")?.strip_suffix(".mist")?.parse::<u64>().ok());
        if let Some(i) = iter {
            if best.as_ref().is_none_or(|(b, _)| i > *b) {
                best = Some((i, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Keeps the header and the rows up to `iteration`, then reopens for append.
fn open_log(path: &Path, keep_through: Option<u64>) -> Result<BufWriter<File>> {
    let mut kept = vec![LOG_HEADER.to_string()];
    if let Some(limit) = keep_through {
        if path.is_file() {
            let f = File::open(path).map_err(io_err(path))?;
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(io_err(path))?;
                match LossBreakdown::parse_csv_row(&line) {
                    Some((i, _)) if i <= limit => kept.push(line),
                    _ => {}
                }
            }
        }
    }
    fs::write(path, kept.join("\n") + "\n").map_err(io_err(path))?;
    let f = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
    Ok(BufWriter::new(f))
}

/// Trains on `data` until `cfg.iterations`, writing checkpoints and the loss
/// log into `out`. With `resume`, continues from the latest checkpoint in
/// `out` (the stored architecture wins over `arch`).
pub fn train(
    data: &[PhantomSample],
    arch: ArchConfig,
    cfg: TrainConfig,
    out: &Path,
    resume: bool,
    mut on_iteration: impl FnMut(u64, &LossBreakdown),
) -> Result<Trainer> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if let Some(s) = data.iter().map(|s| s.size()).find(|&s| s != arch.size) {
        return Err(Error::Config(format!("image size {s} does not match arch.size {}", arch.size)));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let latest = if resume { latest_checkpoint(out)? } else { None };
    let mut trainer = match &latest {
        Some(path) => {
            info!("resuming from {}", path.display());
            let ck = Checkpoint::load(path).map_err(|e| Error::Format {
                path: path.clone(),
                message: e.to_string(),
            })?;
            Trainer::from_checkpoint(&ck, cfg.clone())?
        }
        None => {
            if resume {
                warn!("no checkpoint in {}; starting from scratch", out.display());
            }
            Trainer::new(arch, cfg.clone())?
        }
    };
    let log_path = out.join(LOG_FILE);
    let mut log = open_log(&log_path, latest.as_ref().map(|_| trainer.iteration()))?;
    while trainer.iteration() < cfg.iterations {
        let b = trainer.step(data)?;
        let iter = trainer.iteration();
        writeln!(log, "{}", b.csv_row(iter)).map_err(io_err(&log_path))?;
        on_iteration(iter, &b);
        if iter % cfg.checkpoint_every == 0 || iter == cfg.iterations {
            log.flush().map_err(io_err(&log_path))?;
            let path = out.join(checkpoint_name(iter));
            trainer.checkpoint()?.save(&path).map_err(|e| Error::Format {
                path: path.clone(),
                message: e.to_string(),
            })?;
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    Ok(trainer)
}

/// Reads a loss log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<(u64, LossBreakdown)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .skip(1)
        .map(|l| {
            LossBreakdown::parse_csv_row(l).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                message: format!("bad log row {l:?}"),
            })
        })
        .collect()
}
