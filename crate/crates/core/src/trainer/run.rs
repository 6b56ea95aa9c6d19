//! The training loop.
//!
//! Randomness is split across named streams of the run seed: backbone
//! init, data order, flips, head init, pretext pairs and held-out pairs.
//! The pretext task only ever touches the head-init, pretext and held-out
//! streams, so switching it off or weighting it by zero leaves every draw
//! of the backbone path unchanged.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, clip_global_norm, lr_at, AdamState, OptimSpec};
use crate::data::{Dataset, LabeledImages};
use crate::drloc::{pretext_l1_sum, total_loss, LossVariantSpec, PairBatch, PretextTask};
use crate::error::{Error, Result};
use crate::grid::{BlockGridSet, TokenGrid};
use crate::numcore::{accumulate, checkpoint, ParamSet, Tape, Tensor};
use crate::rng::{SeededRng, Stream};
use crate::vit::{classification_loss, VitConfig, VitModel};

/// Global gradient-norm clip.
pub const GRAD_CLIP_NORM: f64 = 5.0;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "run_config.json";
pub const GRAD_NORMS_FILE: &str = "grad_norms.jsonl";

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub model: VitConfig,
    pub loss: LossVariantSpec,
    pub optim: OptimSpec,
    pub dataset: String,
    pub seed: u64,
    /// Evaluate every N epochs (and always after the last).
    pub eval_interval: usize,
    /// Keep a numbered checkpoint every N epochs; 0 keeps none.
    pub checkpoint_every: usize,
    /// Each batch is split into this many contiguous chunks whose gradients
    /// are summed in chunk order, independent of the worker count.
    pub grad_chunks: usize,
    /// Worker threads for chunk evaluation.
    pub jobs: usize,
    /// Wall-clock timing makes metric files differ between executions;
    /// with this off `sec_per_batch` is written as null.
    pub record_timing: bool,
    /// Whether localization-head weights are decayed. Always true; recorded
    /// so run snapshots state the choice.
    pub head_weight_decay: bool,
    /// Also write per-epoch backbone gradient norms of each loss term. Costs
    /// two extra forward/backward passes per batch.
    pub record_grad_norms: bool,
}

impl RunSpec {
    pub fn new(model: VitConfig, loss: LossVariantSpec, optim: OptimSpec, dataset: String, seed: u64) -> Self {
        RunSpec {
            model,
            loss,
            optim,
            dataset,
            seed,
            eval_interval: 1,
            checkpoint_every: 0,
            grad_chunks: 1,
            jobs: 1,
            record_timing: true,
            head_weight_decay: true,
            record_grad_norms: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if self.grad_chunks == 0 || self.jobs == 0 {
            return Err(Error::Config("grad_chunks and jobs must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_aux: Option<f64>,
    pub loss_total: f64,
    pub test_acc: Option<f64>,
    pub pretext_l1: Option<f64>,
    pub sec_per_batch: Option<f64>,
}

/// One line of the gradient-norm file: batch means of the backbone gradient
/// L2 norm from `L_ce` alone and from the weighted auxiliary term
/// `lambda * L_aux`, both before clipping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormRecord {
    pub epoch: usize,
    pub ce_backbone: f64,
    pub aux_backbone: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub test_acc: f64,
    pub pretext_l1: Option<f64>,
}

/// A finished (or partially finished) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub spec: RunSpec,
    /// Evaluation before the first update.
    pub initial: Evaluation,
    pub records: Vec<EpochRecord>,
    pub best_test_acc: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainRun {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Trained state next to its record.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run: TrainRun,
    pub model: VitModel,
    pub task: Option<PretextTask>,
}

struct ChunkResult {
    ce: f64,
    aux: Option<f64>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Model, auxiliary task and optimizer state of one run.
pub struct Trainer {
    pub spec: RunSpec,
    pub model: VitModel,
    pub task: Option<PretextTask>,
    backbone_state: AdamState,
    head_state: Option<AdamState>,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(spec: RunSpec) -> Result<Self> {
        spec.validate()?;
        let model = VitModel::new(spec.model.clone(), &mut SeededRng::stream(spec.seed, Stream::Init))?;
        let task = if spec.loss.enabled {
            Some(PretextTask::new(
                spec.loss.clone(),
                spec.model.embed_dim,
                spec.model.pretext_side(),
                spec.model.blocks,
                &mut SeededRng::stream(spec.seed, Stream::HeadInit),
            )?)
        } else {
            None
        };
        let backbone_state = AdamState::new(&model.params);
        let head_state = task.as_ref().map(|t| AdamState::new(&t.heads.params));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Trainer {
            spec,
            model,
            task,
            backbone_state,
            head_state,
            pool,
        })
    }

    fn pretext_sides(&self, task: &PretextTask) -> Vec<usize> {
        task.task_sides(&vec![self.spec.model.pretext_side(); self.spec.model.blocks])
    }

    /// Loss and gradients of one chunk, scaled by `weight` (its share of the
    /// batch). Gradients come back backbone first, then heads.
    fn chunk(
        &self,
        images: &Tensor,
        labels: &[usize],
        pairs: Option<&[PairBatch]>,
        weight: f64,
    ) -> Result<ChunkResult> {
        let lambda = self.spec.loss.lambda;
        let mut tape = Tape::new();
        let bb = self.model.params.bind(&mut tape);
        let out = self.model.forward(&mut tape, &bb, images)?;
        let ce = classification_loss(&mut tape, out.logits, labels)?;
        let mut aux = None;
        let mut head_bound = None;
        let root = match (&self.task, pairs) {
            (Some(task), Some(pairs)) if lambda != 0.0 => {
                let hb = task.heads.params.bind(&mut tape);
                let a = task.loss(&mut tape, &hb, &out.grids, pairs)?.loss;
                aux = Some(a);
                head_bound = Some(hb);
                let total = total_loss(&mut tape, ce, a, lambda)?;
                tape.scale(total, weight)
            }
            (Some(task), Some(pairs)) => {
                // evaluated for logging only: no path from the root reaches
                // the backbone or the head through this term
                let hb = task.heads.params.bind_frozen(&mut tape);
                let detached: Vec<TokenGrid> = out
                    .grids
                    .iter()
                    .map(|g| TokenGrid {
                        values: tape.detach(g.values),
                        ..*g
                    })
                    .collect();
                aux = Some(task.loss(&mut tape, &hb, &BlockGridSet(detached), pairs)?.loss);
                tape.scale(ce, weight)
            }
            _ => tape.scale(ce, weight),
        };
        let ce_value = tape.item(ce);
        let aux_value = aux.map(|a| tape.item(a));
        if !ce_value.is_finite() || aux_value.is_some_and(|a| !a.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite loss: ce {ce_value}, aux {aux_value:?}"
            )));
        }
        tape.backward(root)?;
        let mut grads = self.model.params.collect_grads(&tape, &bb);
        if let Some(task) = &self.task {
            match &head_bound {
                Some(hb) => grads.extend(task.heads.params.collect_grads(&tape, hb)),
                None => grads.extend(std::iter::repeat_n(None, task.heads.params.len())),
            }
        }
        Ok(ChunkResult {
            ce: ce_value,
            aux: aux_value,
            grads,
        })
    }

    /// One optimizer step on a batch. Returns `(L_ce, L_aux)` batch means.
    pub fn step(
        &mut self,
        images: &Tensor,
        labels: &[usize],
        pairs: Option<&[PairBatch]>,
        lr: f64,
    ) -> Result<(f64, Option<f64>)> {
        let n = labels.len();
        let chunks = self.spec.grad_chunks.min(n);
        let bounds: Vec<(usize, usize)> = (0..chunks).map(|c| (c * n / chunks, (c + 1) * n / chunks)).collect();
        let per = images.len() / n;
        let work = |&(lo, hi): &(usize, usize)| -> Result<ChunkResult> {
            if chunks == 1 {
                return self.chunk(images, labels, pairs, 1.0);
            }
            let mut shape = images.shape().to_vec();
            shape[0] = hi - lo;
            let imgs = Tensor::new(shape, images.data()[lo * per..hi * per].to_vec())?;
            let sliced: Option<Vec<PairBatch>> = pairs
                .map(|ps| ps.iter().map(|p| p.slice_images(lo, hi - lo)).collect::<Result<_>>())
                .transpose()?;
            self.chunk(&imgs, &labels[lo..hi], sliced.as_deref(), (hi - lo) as f64 / n as f64)
        };
        let results: Vec<Result<ChunkResult>> = if chunks == 1 {
            vec![work(&bounds[0])]
        } else {
            self.pool.install(|| bounds.par_iter().map(work).collect())
        };

        let mut ce = 0.0;
        let mut aux: Option<f64> = None;
        let mut grads: Option<Vec<Option<Vec<f64>>>> = None;
        for (r, &(lo, hi)) in results.into_iter().zip(&bounds) {
            let r = r?;
            let w = (hi - lo) as f64 / n as f64;
            ce += w * r.ce;
            if let Some(a) = r.aux {
                aux = Some(aux.unwrap_or(0.0) + w * a);
            }
            match &mut grads {
                None => grads = Some(r.grads),
                Some(acc) => {
                    for (dst, src) in acc.iter_mut().zip(r.grads) {
                        match (dst.as_mut(), src) {
                            (Some(d), Some(s)) => accumulate(d, &s),
                            (None, Some(s)) => *dst = Some(s),
                            _ => {}
                        }
                    }
                }
            }
        }
        let mut grads = grads.expect("at least one chunk");
        clip_global_norm(&mut grads, GRAD_CLIP_NORM);
        let head_grads = grads.split_off(self.model.params.len());
        adamw_step(
            &mut self.model.params,
            &grads,
            &mut self.backbone_state,
            lr,
            &self.spec.optim,
        )?;
        if let (Some(task), Some(state)) = (&mut self.task, &mut self.head_state) {
            adamw_step(&mut task.heads.params, &head_grads, state, lr, &self.spec.optim)?;
        }
        Ok((ce, aux))
    }

    /// Backbone gradient norms of `L_ce` and of `lambda * L_aux` on one
    /// batch at the current weights. The auxiliary part is the difference of
    /// the total and the classification-only gradients.
    pub fn loss_grad_norms(&self, images: &Tensor, labels: &[usize], pairs: &[PairBatch]) -> Result<(f64, f64)> {
        let nb = self.model.params.len();
        let total = self.chunk(images, labels, Some(pairs), 1.0)?.grads;
        let ce = self.chunk(images, labels, None, 1.0)?.grads;
        let (mut ce_sq, mut aux_sq) = (0.0, 0.0);
        for (t, c) in total[..nb].iter().zip(&ce[..nb]) {
            if let (Some(t), Some(c)) = (t, c) {
                for (&ti, &ci) in t.iter().zip(c) {
                    ce_sq += ci * ci;
                    aux_sq += (ti - ci) * (ti - ci);
                }
            }
        }
        Ok((ce_sq.sqrt(), aux_sq.sqrt()))
    }

    /// Test accuracy, and the mean L1 localization error on pairs drawn from
    /// the held-out stream (the same pairs at every evaluation).
    pub fn evaluate(&self, test: &LabeledImages) -> Result<Evaluation> {
        let bs = self.spec.optim.batch_size;
        let mut correct = 0usize;
        let mut l1 = 0.0;
        let mut l1_count = 0usize;
        let mut pair_rng = SeededRng::stream(self.spec.seed, Stream::EvalPairs);
        let all: Vec<usize> = (0..test.len()).collect();
        for idx in all.chunks(bs) {
            let (images, labels) = test.batch(idx, None)?;
            let mut tape = Tape::new();
            let bb = self.model.params.bind_frozen(&mut tape);
            let out = self.model.forward(&mut tape, &bb, &images)?;
            let classes = self.spec.model.classes;
            for (row, &label) in tape.data(out.logits).chunks(classes).zip(&labels) {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                correct += usize::from(best == label);
            }
            if let Some(task) = &self.task {
                let hb = task.heads.params.bind_frozen(&mut tape);
                let pairs = task.sample(&self.pretext_sides(task), idx.len(), &mut pair_rng)?;
                let aux = task.loss(&mut tape, &hb, &out.grids, &pairs)?;
                let (s, c) = pretext_l1_sum(
                    &tape,
                    aux.final_prediction,
                    pairs.last().expect("pairs"),
                    task.spec.variant,
                );
                l1 += s;
                l1_count += c;
            }
        }
        Ok(Evaluation {
            test_acc: correct as f64 / test.len() as f64,
            pretext_l1: self.task.as_ref().map(|_| l1 / l1_count as f64),
        })
    }

    /// Every parameter, backbone then heads, for checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut t = self.model.params.named_tensors();
        if let Some(task) = &self.task {
            t.extend(task.heads.params.named_tensors());
        }
        t
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Outputs {
    dir: PathBuf,
    metrics: File,
    grad_norms: Option<File>,
}

fn create_truncated(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

fn append_line(file: &mut File, path: &Path, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::Data(e.to_string()))?;
    writeln!(file, "{line}")
        .and_then(|_| file.flush())
        .map_err(|e| Error::io(path, e))
}

impl Outputs {
    fn create(dir: &Path, spec: &RunSpec) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(CONFIG_FILE), spec)?;
        let metrics = create_truncated(&dir.join(METRICS_FILE))?;
        let grad_norms = spec
            .record_grad_norms
            .then(|| create_truncated(&dir.join(GRAD_NORMS_FILE)))
            .transpose()?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            metrics,
            grad_norms,
        })
    }

    fn append(&mut self, record: &EpochRecord) -> Result<()> {
        append_line(&mut self.metrics, &self.dir.join(METRICS_FILE), record)
    }

    fn append_grad_norms(&mut self, record: &GradNormRecord) -> Result<()> {
        match &mut self.grad_norms {
            Some(f) => append_line(f, &self.dir.join(GRAD_NORMS_FILE), record),
            None => Ok(()),
        }
    }
}

fn mean(total: f64, count: usize) -> f64 {
    total / count as f64
}

/// Trains `spec` on `data`, writing metrics and checkpoints under `out`
/// when given.
pub fn run_experiment(spec: &RunSpec, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    if data.train.side() != spec.model.image_side {
        return Err(Error::Config(format!(
            "dataset images are {}x{}, model expects {}",
            data.train.side(),
            data.train.side(),
            spec.model.image_side
        )));
    }
    let mut trainer = Trainer::new(spec.clone())?;
    let mut outputs = out.map(|dir| Outputs::create(dir, spec)).transpose()?;

    let initial = trainer.evaluate(&data.test)?;
    let mut run = TrainRun {
        spec: spec.clone(),
        initial,
        records: Vec::new(),
        best_test_acc: None,
        best_epoch: None,
    };

    let mut order_rng = SeededRng::stream(spec.seed, Stream::DataOrder);
    let mut flip_rng = SeededRng::stream(spec.seed, Stream::Augment);
    let mut pair_rng = SeededRng::stream(spec.seed, Stream::Pretext);
    let n = data.train.len();
    let bs = spec.optim.batch_size;
    let steps = n.div_ceil(bs);
    let epochs = spec.optim.total_epochs;

    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order_rng.shuffle(&mut order);
        let (mut ce_sum, mut aux_sum, mut seen) = (0.0, 0.0, 0usize);
        let mut elapsed = 0.0;
        let mut lr = 0.0;
        let (mut ce_norm_sum, mut aux_norm_sum) = (0.0, 0.0);
        for (s, idx) in order.chunks(bs).enumerate() {
            let start = Instant::now();
            let flips: Vec<bool> = idx.iter().map(|_| flip_rng.bernoulli_half()).collect();
            let (images, labels) = data.train.batch(idx, Some(&flips))?;
            let pairs = match &trainer.task {
                Some(task) => Some(task.sample(&trainer.pretext_sides(task), idx.len(), &mut pair_rng)?),
                None => None,
            };
            if let (true, Some(p)) = (spec.record_grad_norms, &pairs) {
                let (c, a) = trainer.loss_grad_norms(&images, &labels, p)?;
                ce_norm_sum += c;
                aux_norm_sum += a;
            }
            lr = lr_at((epoch - 1) as f64 + s as f64 / steps as f64, &spec.optim);
            let (ce, aux) = trainer
                .step(&images, &labels, pairs.as_deref(), lr)
                .map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch}, step {s}: {msg}")),
                    other => other,
                })?;
            elapsed += start.elapsed().as_secs_f64();
            ce_sum += ce * idx.len() as f64;
            aux_sum += aux.unwrap_or(0.0) * idx.len() as f64;
            seen += idx.len();
        }

        let loss_ce = mean(ce_sum, seen);
        let loss_aux = trainer.task.as_ref().map(|_| mean(aux_sum, seen));
        let evaluate = epoch % spec.eval_interval == 0 || epoch == epochs;
        let eval = if evaluate {
            Some(trainer.evaluate(&data.test)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr,
            loss_ce,
            loss_aux,
            loss_total: loss_ce + spec.loss.lambda * loss_aux.unwrap_or(0.0),
            test_acc: eval.map(|e| e.test_acc),
            pretext_l1: eval.and_then(|e| e.pretext_l1),
            sec_per_batch: spec.record_timing.then(|| elapsed / steps as f64),
        };

        let improved = match (record.test_acc, run.best_test_acc) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            run.best_test_acc = record.test_acc;
            run.best_epoch = Some(epoch);
        }
        if let Some(o) = &mut outputs {
            o.append(&record)?;
            if trainer.task.is_some() {
                o.append_grad_norms(&GradNormRecord {
                    epoch,
                    ce_backbone: ce_norm_sum / steps as f64,
                    aux_backbone: aux_norm_sum / steps as f64,
                })?;
            }
            let tensors = trainer.named_tensors();
            checkpoint::save(&o.dir.join("last.drl"), &tensors)?;
            if improved {
                checkpoint::save(&o.dir.join("best.drl"), &tensors)?;
            }
            if spec.checkpoint_every > 0 && epoch % spec.checkpoint_every == 0 {
                checkpoint::save(&o.dir.join(format!("epoch_{epoch:03}.drl")), &tensors)?;
            }
        }
        run.records.push(record);
    }

    if let Some(o) = &outputs {
        write_json(&o.dir.join(SUMMARY_FILE), &run)?;
    }
    Ok(TrainOutcome {
        run,
        model: trainer.model,
        task: trainer.task,
    })
}

/// Reads a metrics file back.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Parameters of two sets compared bit for bit, by name and value.
pub fn params_bit_identical(a: &ParamSet, b: &ParamSet) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|(p, q)| {
            p.name == q.name
                && p.value.shape() == q.value.shape()
                && p.value
                    .data()
                    .iter()
                    .zip(q.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
}
