use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::{Precision, TrainConfig};
use super::metrics::{evaluate, MetricsReport, Scaling};
use crate::autodiff::{Graph, Var};
use crate::dlnet::{disparity_to_depth_value, Checkpoint, DepthNet, NetworkConfig, PoseNet};
use crate::error::{Error, Result};
use crate::losses::{final_loss, LossConfig, LossInputs, LossReport};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::synthdata::{flip_sequence, jitter_image, read_dataset, write_dataset, ColorJitter, JitterConfig, Sequence};
use crate::tensor::Tensor;

/// Depth and pose networks sharing one parameter store.
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub depth: DepthNet,
    pub pose: PoseNet,
}

impl<T: Scalar> Model<T> {
    /// Linear weights from `N(0, 0.02^2)`, zero biases, unit normalization
    /// gains; reproducible from `seed`.
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let depth = DepthNet::new(&mut store, cfg, &mut rng)?;
        let pose = PoseNet::new(&mut store, cfg, &mut rng)?;
        Ok(Self { store, depth, pose })
    }

    /// Full-resolution depth of one RGB image.
    pub fn predict_depth(&self, image: &Tensor<f32>, loss: &LossConfig) -> Result<Tensor<f64>> {
        let mut g = Graph::<T>::new();
        let p = self.store.bind_frozen(&mut g);
        let x = g.constant(image.cast());
        let disps = self.depth.forward(&mut g, &p, x)?;
        let (_, finest) = disps
            .iter()
            .min_by_key(|d| d.0)
            .ok_or_else(|| Error::Config("depth network has no outputs".into()))?;
        let s = g.shape(*finest).to_vec();
        let (h, w) = (image.shape()[0], image.shape()[1]);
        if s != [h, w] {
            return Err(Error::Config(format!(
                "finest output {s:?} is not full resolution {h}x{w}; include scale 0"
            )));
        }
        let depth = g
            .value(*finest)
            .to_f64_vec()
            .into_iter()
            .map(|d| disparity_to_depth_value(d, loss.min_depth, loss.max_depth))
            .collect::<Result<Vec<_>>>()?;
        Tensor::new([h, w], depth)
    }

    pub fn checkpoint(&self, meta: &CheckpointMeta, adam: Option<&Adam<T>>) -> Result<Checkpoint<T>> {
        let mut ck = Checkpoint::new(serde_json::to_string(meta)?);
        ck.push_store("", &self.store);
        if let Some(a) = adam {
            for (i, (name, _)) in self.store.iter().enumerate() {
                ck.push(format!("adam.m.{name}"), a.m[i].clone());
                ck.push(format!("adam.v.{name}"), a.v[i].clone());
            }
        }
        Ok(ck)
    }

    /// Rebuilds the networks described by a checkpoint and loads its weights.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<(Self, CheckpointMeta)> {
        let meta: CheckpointMeta =
            serde_json::from_str(&ck.meta).map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
        let cfg = TrainConfig::from_text(&meta.config)?;
        let mut model = Self::new(&cfg.network, cfg.seed)?;
        ck.load_store("", &mut model.store)?;
        Ok((model, meta))
    }
}

/// Metadata stored with every training checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Resolved configuration in `key = value` form.
    pub config: String,
    /// Optimizer steps taken.
    pub step: usize,
    pub adam_step: u64,
}

fn load_adam<T: Scalar>(ck: &Checkpoint<T>, store: &ParamStore<T>, step: u64) -> Result<Adam<T>> {
    let mut a = Adam::new(store);
    a.step = step;
    for (i, (name, t)) in store.iter().enumerate() {
        for (slot, kind) in [(&mut a.m[i], "m"), (&mut a.v[i], "v")] {
            let key = format!("adam.{kind}.{name}");
            let v = ck.get(&key).ok_or_else(|| Error::Data(format!("checkpoint lacks `{key}`")))?;
            if v.shape() != t.shape() {
                return Err(Error::Data(format!("checkpoint `{key}` has shape {:?}", v.shape())));
            }
            *slot = v.clone();
        }
    }
    Ok(a)
}

/// Loss and gradient of one sequence. `inputs` are the (possibly jittered)
/// frames shown to the networks; the loss compares the frames of `seq`.
pub fn sequence_loss<T: Scalar>(
    model: &Model<T>,
    seq: &Sequence,
    inputs: &[Tensor<f32>; 3],
    loss: &LossConfig,
) -> Result<(LossReport, Vec<Tensor<T>>)> {
    let mut g = Graph::<T>::new();
    let p = model.store.bind(&mut g);
    let views: Vec<Var> = inputs.iter().map(|f| g.constant(f.cast())).collect();
    let disps = model.depth.forward(&mut g, &p, views[1])?;
    let stack = g.concat(&views, 2)?;
    let poses = model.pose.forward(&mut g, &p, stack)?;
    let mut pose_vars = Vec::with_capacity(2);
    for r in 0..2 {
        let row = g.narrow(poses, 0, r, 1)?;
        pose_vars.push(g.reshape(row, [6])?);
    }
    let disparities = loss
        .scales
        .iter()
        .map(|s| {
            disps
                .iter()
                .find(|d| d.0 == *s)
                .map(|d| d.1)
                .ok_or_else(|| Error::Config(format!("depth network has no head at scale {s}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let target: Tensor<T> = seq.target().image.cast();
    let refs: Vec<Tensor<T>> = seq.references().iter().map(|f| f.image.cast()).collect();
    let inp = LossInputs {
        target: &target,
        refs: &refs,
        disparities: &disparities,
        poses: &pose_vars,
        k: &seq.k,
    };
    let (total, report) = final_loss(&mut g, &inp, loss)?;
    if !report.total.is_finite() {
        return Ok((report, Vec::new()));
    }
    let mut grads = g.backward(total)?;
    Ok((report, p.take_grads(&mut grads, &model.store)))
}

/// What one augmented sample looks like.
struct Sample {
    seq: Sequence,
    inputs: [Tensor<f32>; 3],
}

fn augment<R: Rng + ?Sized>(seq: &Sequence, on: bool, cfg: &JitterConfig, rng: &mut R) -> Sample {
    // draws happen even when augmentation is off so both settings consume
    // the stream identically
    let flip = rng.random_bool(cfg.flip_probability);
    let jitter = ColorJitter::sample(cfg, rng);
    let seq = if on && flip { flip_sequence(seq) } else { seq.clone() };
    let inputs = std::array::from_fn(|i| match (on, jitter) {
        (true, Some(j)) => jitter_image(&seq.frames[i].image, &j),
        _ => seq.frames[i].image.clone(),
    });
    Sample { seq, inputs }
}

/// Summary returned by [`train`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: usize,
    pub steps_per_epoch: usize,
    /// Mean total loss over the first 50 steps (or all, if fewer).
    pub first_steps_loss: f64,
    /// Mean total loss over the steps of the last epoch.
    pub final_epoch_loss: f64,
    pub initial: Option<MetricsReport>,
    pub metrics: MetricsReport,
    pub eval_set: String,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MetricsFile {
    scales: Vec<usize>,
    eval_set: String,
    steps: usize,
    initial: Option<MetricsReport>,
    #[serde(rename = "final")]
    last: MetricsReport,
    first_steps_loss: f64,
    final_epoch_loss: f64,
}

/// Closed-form and counted model size plus measured forward time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Complexity {
    pub params: usize,
    pub depth_params: usize,
    pub pose_params: usize,
    pub closed_form_params: usize,
    pub depth_macs: usize,
    pub pose_macs: usize,
    /// Mean wall time of one depth-network forward pass.
    pub forward_seconds: f64,
}

pub fn complexity<T: Scalar>(model: &Model<T>, cfg: &NetworkConfig, forward_seconds: f64) -> Result<Complexity> {
    let depth_params = model
        .store
        .iter()
        .filter(|(n, _)| n.starts_with("depth."))
        .map(|(_, t)| t.numel())
        .sum();
    let pose_params = model
        .store
        .iter()
        .filter(|(n, _)| n.starts_with("pose."))
        .map(|(_, t)| t.numel())
        .sum();
    Ok(Complexity {
        params: model.store.numel(),
        depth_params,
        pose_params,
        closed_form_params: cfg.depth_params()? + cfg.pose_params()?,
        depth_macs: cfg.depth_macs()?,
        pose_macs: cfg.pose_macs()?,
        forward_seconds,
    })
}

/// Depth predictions and ground truth for `seqs`, plus mean forward time.
pub fn predict_all<T: Scalar>(
    model: &Model<T>,
    seqs: &[Sequence],
    loss: &LossConfig,
) -> Result<(Vec<Tensor<f64>>, Vec<Tensor<f64>>, f64)> {
    let start = Instant::now();
    let pred = seqs
        .iter()
        .map(|s| model.predict_depth(&s.target().image, loss))
        .collect::<Result<Vec<_>>>()?;
    let secs = start.elapsed().as_secs_f64() / seqs.len().max(1) as f64;
    let gt = seqs.iter().map(|s| s.target().depth.cast()).collect();
    Ok((pred, gt, secs))
}

pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    seqs: &[Sequence],
    loss: &LossConfig,
    scaling: Scaling,
) -> Result<(MetricsReport, f64)> {
    let (pred, gt, secs) = predict_all(model, seqs, loss)?;
    Ok((evaluate(&pred, &gt, scaling)?, secs))
}

fn load_sequences(path: &Path, net: &NetworkConfig) -> Result<Vec<Sequence>> {
    let seqs = read_dataset(path)?;
    if let Some(s) = seqs.iter().find(|s| s.height() != net.height || s.width() != net.width) {
        return Err(Error::Data(format!(
            "{} holds {}x{} frames; the network expects {}x{}",
            path.display(),
            s.width(),
            s.height(),
            net.width,
            net.height
        )));
    }
    Ok(seqs)
}

const LOSS_HEADER_FIXED: &str = "step,recon";

fn csv_header(scales: &[usize]) -> String {
    let mut h = LOSS_HEADER_FIXED.to_string();
    for s in scales {
        h.push_str(&format!(",smooth_s{s}"));
    }
    h.push_str(",total");
    h
}

/// Rows of an existing log for steps below `keep`.
fn kept_rows(path: &Path, keep: usize) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for line in BufReader::new(File::open(path)?).lines().skip(1) {
        let line = line?;
        let step: usize = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("malformed loss log row `{line}`")))?;
        if step < keep {
            rows.push(line);
        }
    }
    Ok(rows)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const ORDER_STREAM: u64 = 1 << 40;
const AUGMENT_STREAM: u64 = 2 << 40;

/// Sequence indices of each step of `epoch`.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, ORDER_STREAM + epoch as u64));
    idx
}

/// Trains both networks jointly and writes `losses.csv`, `metrics.json`,
/// `complexity.json`, `config.txt` and a checkpoint per epoch into `cfg.out`.
pub fn train<T: Scalar>(cfg: &TrainConfig) -> Result<TrainOutcome> {
    crate::tune_allocator();
    cfg.validate()?;
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no training data given (`data`)".into()))?;
    let seqs = load_sequences(data, &cfg.network)?;
    let held_out = match &cfg.eval_data {
        Some(p) => Some(load_sequences(p, &cfg.network)?),
        None => None,
    };
    let spe = seqs.len() / cfg.batch_size;
    if spe == 0 {
        return Err(Error::Data(format!(
            "{} sequences cannot fill one batch of {}",
            seqs.len(),
            cfg.batch_size
        )));
    }
    let mut total_steps = cfg.epochs * spe;
    if cfg.max_steps > 0 {
        total_steps = total_steps.min(cfg.max_steps);
    }
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_text())?;

    let mut model = Model::<T>::new(&cfg.network, cfg.seed)?;
    let mut adam = Adam::new(&model.store);
    let mut start = 0usize;
    let ck_path = cfg.checkpoint_path();
    if cfg.resume && ck_path.exists() {
        let ck = Checkpoint::<T>::load(&ck_path)?;
        let (m, meta) = Model::from_checkpoint(&ck)?;
        let saved = TrainConfig::from_text(&meta.config)?;
        if saved.network != cfg.network {
            return Err(Error::Config("checkpoint network differs from the configuration".into()));
        }
        adam = load_adam(&ck, &m.store, meta.adam_step)?;
        model = m;
        start = meta.step;
    }
    let eval_seqs = held_out.as_deref().unwrap_or(&seqs);
    let eval_set = if held_out.is_some() { "held_out" } else { "train" }.to_string();
    let metrics_path = cfg.out.join("metrics.json");
    let initial = if start == 0 {
        Some(evaluate_model(&model, eval_seqs, &cfg.loss, cfg.eval_scaling)?.0)
    } else {
        std::fs::read_to_string(&metrics_path)
            .ok()
            .and_then(|s| serde_json::from_str::<MetricsFile>(&s).ok())
            .and_then(|m| m.initial)
    };

    let log_path = cfg.out.join("losses.csv");
    let rows = kept_rows(&log_path, start)?;
    let mut log = std::io::BufWriter::new(File::create(&log_path)?);
    writeln!(log, "{}", csv_header(&cfg.loss.scales))?;
    let mut totals: Vec<f64> = Vec::with_capacity(total_steps);
    for r in &rows {
        writeln!(log, "{r}")?;
        totals.push(r.rsplit(',').next().and_then(|v| v.parse().ok()).unwrap_or(f64::NAN));
    }
    log.flush()?;

    let jitter = JitterConfig::default();
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    for step in start..total_steps {
        let epoch = step / spe;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, epoch, seqs.len());
            order_epoch = epoch;
        }
        let lr = cfg.lr_at(epoch);
        let mut rng = stream_rng(cfg.seed, AUGMENT_STREAM + step as u64);
        let pos = (step % spe) * cfg.batch_size;
        let batch = &order[pos..pos + cfg.batch_size];
        let mut reports = Vec::with_capacity(batch.len());
        let mut grad_sum: Option<Vec<Tensor<T>>> = None;
        for &i in batch {
            let sample = augment(&seqs[i], cfg.augment, &jitter, &mut rng);
            let (report, grads) = sequence_loss(&model, &sample.seq, &sample.inputs, &cfg.loss)?;
            if !report.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(dump_nonfinite(cfg, step, batch, &seqs, &report));
            }
            reports.push(report);
            grad_sum = Some(match grad_sum {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                    acc
                }
            });
        }
        let scale = T::one() / T::from_f64_lossy(batch.len() as f64);
        let grads: Vec<Tensor<T>> = grad_sum
            .unwrap_or_default()
            .into_iter()
            .map(|g| g.map(|v| v * scale))
            .collect();
        adam.update(&mut model.store, &grads, lr)?;
        let rep = LossReport::average(&reports);
        let recon: f64 = rep.reconstruction.iter().map(|r| r.1).sum();
        let mut row = format!("{step},{recon:e}");
        for (_, s) in &rep.smoothness {
            row.push_str(&format!(",{s:e}"));
        }
        row.push_str(&format!(",{:e}", rep.total));
        writeln!(log, "{row}")?;
        log.flush()?;
        totals.push(rep.total);
        let done = step + 1;
        if done % spe == 0 || done == total_steps {
            let meta = CheckpointMeta {
                config: cfg.to_text(),
                step: done,
                adam_step: adam.step,
            };
            model.checkpoint(&meta, Some(&adam))?.save(&ck_path)?;
        }
    }
    drop(log);

    let (metrics, secs) = evaluate_model(&model, eval_seqs, &cfg.loss, cfg.eval_scaling)?;
    let first = &totals[..totals.len().min(50)];
    let last_epoch_start = ((total_steps.max(1) - 1) / spe) * spe;
    let last = &totals[last_epoch_start.min(totals.len())..];
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let outcome = TrainOutcome {
        steps: total_steps,
        steps_per_epoch: spe,
        first_steps_loss: mean(first),
        final_epoch_loss: mean(last),
        initial,
        metrics,
        eval_set,
        out: cfg.out.clone(),
    };
    let file = MetricsFile {
        scales: cfg.loss.scales.clone(),
        eval_set: outcome.eval_set.clone(),
        steps: outcome.steps,
        initial: outcome.initial.clone(),
        last: outcome.metrics.clone(),
        first_steps_loss: outcome.first_steps_loss,
        final_epoch_loss: outcome.final_epoch_loss,
    };
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&file)?)?;
    let cx = complexity(&model, &cfg.network, secs)?;
    std::fs::write(cfg.out.join("complexity.json"), serde_json::to_string_pretty(&cx)?)?;
    Ok(outcome)
}

/// Writes the offending batch next to the run and returns the error to raise.
fn dump_nonfinite(cfg: &TrainConfig, step: usize, batch: &[usize], seqs: &[Sequence], report: &LossReport) -> Error {
    let dump: Vec<Sequence> = batch.iter().map(|&i| seqs[i].clone()).collect();
    let path = cfg.out.join(format!("nonfinite_step{step}.dlgs"));
    let info = serde_json::json!({ "step": step, "indices": batch, "report": report });
    let saved = write_dataset(&dump, &path)
        .and_then(|_| Ok(std::fs::write(path.with_extension("json"), info.to_string())?))
        .map(|_| path.display().to_string())
        .unwrap_or_else(|e| format!("(dump failed: {e})"));
    Error::Numeric(format!(
        "non-finite loss or gradient at step {step}, batch {batch:?}; batch written to {saved}"
    ))
}

/// Runs [`train`] in the configured precision.
pub fn run(cfg: &TrainConfig) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::F32 => train::<f32>(cfg),
        Precision::F64 => train::<f64>(cfg),
    }
}

/// Evaluates a saved checkpoint on a dataset.
pub fn evaluate_checkpoint(checkpoint: &Path, data: &Path, scaling: Scaling) -> Result<MetricsReport> {
    let ck = Checkpoint::<f64>::load(checkpoint)?;
    let (model, meta) = Model::<f64>::from_checkpoint(&ck)?;
    let cfg = TrainConfig::from_text(&meta.config)?;
    let seqs = load_sequences(data, &cfg.network)?;
    Ok(evaluate_model(&model, &seqs, &cfg.loss, scaling)?.0)
}
