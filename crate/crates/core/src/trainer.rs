//! Joint source/target training loop.
//!
//! Each iteration draws a labeled source batch and an unlabeled target
//! batch. Source items go through the identity classifier; each target item
//! is replaced by a uniformly chosen member of {itself, its camera
//! transfers} (when the mode uses camera invariance) and scored against the
//! exemplar memory. After the SGD step the memory slot of every target item
//! is refreshed with the feature that was forwarded, in batch order.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::{read_json, write_json_pretty, DatasetBundle, Sample};
use crate::error::{Error, Result};
use crate::evalkit::evaluate;
use crate::invariance::{batch_loss, LossReport, SourceTerm, TargetTerm};
use crate::memory::ExemplarMemory;
use crate::model::{EmbeddingNet, ForwardTrace, Params, SgdState};
use crate::numerics::{norm, DenseMat, Prng};

/// Which loss terms are active. Names follow the usual ablation labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "source_only")]
    SourceOnly,
    #[serde(rename = "E")]
    Exemplar,
    #[serde(rename = "E+C")]
    ExemplarCamera,
    #[serde(rename = "E+N")]
    ExemplarNeighborhood,
    #[serde(rename = "E+C+N")]
    Full,
}

impl Mode {
    /// Ablation table order.
    pub const ALL: [Mode; 5] = [
        Mode::SourceOnly,
        Mode::Exemplar,
        Mode::ExemplarCamera,
        Mode::ExemplarNeighborhood,
        Mode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SourceOnly => "source_only",
            Mode::Exemplar => "E",
            Mode::ExemplarCamera => "E+C",
            Mode::ExemplarNeighborhood => "E+N",
            Mode::Full => "E+C+N",
        }
    }

    pub fn uses_target(self) -> bool {
        self != Mode::SourceOnly
    }

    pub fn uses_camera(self) -> bool {
        matches!(self, Mode::ExemplarCamera | Mode::Full)
    }

    pub fn uses_neighborhood(self) -> bool {
        matches!(self, Mode::ExemplarNeighborhood | Mode::Full)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::config(
                    "mode",
                    format!("unknown mode `{s}` (expected source_only, E, E+C, E+N or E+C+N)"),
                )
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    pub lr: f64,
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub beta: f64,
    pub k: usize,
    pub lambda: f64,
    pub alpha_per_epoch: f64,
    pub dropout: f64,
    pub augment_noise: bool,
    pub mode: Mode,
    pub seed: u64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Refresh memory slots with the real image's feature even when a camera
    /// transfer was forwarded.
    pub update_with_real: bool,
    /// Evaluate on the query/gallery split every this many epochs (0: never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            warmup_epochs: 5,
            batch_source: 64,
            batch_target: 64,
            lr: 0.03,
            lr_decay_epoch: 40,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            beta: 0.05,
            k: 6,
            lambda: 0.3,
            alpha_per_epoch: 0.01,
            dropout: 0.0,
            augment_noise: true,
            mode: Mode::Full,
            seed: 0,
            hidden_dim: 64,
            embed_dim: 32,
            update_with_real: false,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(Error::config("warmup_epochs", "must not exceed epochs"));
        }
        for (field, v) in [
            ("batch_source", self.batch_source),
            ("batch_target", self.batch_target),
            ("k", self.k),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", "must lie in [0, 1]"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config("beta", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        for (field, v) in [
            ("lr", self.lr),
            ("lr_decay_factor", self.lr_decay_factor),
            ("momentum", self.momentum),
            ("alpha_per_epoch", self.alpha_per_epoch),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Copy with mode-implied settings applied (`source_only` forces λ = 0).
    pub fn resolved(&self) -> TrainConfig {
        let mut cfg = self.clone();
        if cfg.mode == Mode::SourceOnly {
            cfg.lambda = 0.0;
        }
        cfg
    }

    /// Memory updating rate for a 1-based epoch: `min(α_step · epoch, 1)`.
    pub fn alpha_schedule(&self, epoch: usize) -> f64 {
        (self.alpha_per_epoch * epoch as f64).min(1.0)
    }

    /// Step schedule: `lr` through `lr_decay_epoch`, then `lr · decay`.
    pub fn lr_schedule(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_decay_epoch {
            self.lr
        } else {
            self.lr * self.lr_decay_factor
        }
    }

    /// Neighborhood size in use: 1 during warm-up and in modes without the
    /// neighborhood term, `k` otherwise.
    pub fn effective_k(&self, epoch: usize) -> usize {
        if self.mode.uses_neighborhood() && epoch > self.warmup_epochs {
            self.k
        } else {
            1
        }
    }

    pub fn iterations_per_epoch(&self, n_source: usize, n_target: usize) -> usize {
        n_source
            .div_ceil(self.batch_source)
            .max(n_target.div_ceil(self.batch_target))
    }
}

/// Pick the sample forwarded for a target image: the real image, or with
/// camera invariance a uniform draw from the real image and its transfers.
pub fn sample_xstar<'a>(
    real: &'a Sample,
    variants: &[&'a Sample],
    mode: Mode,
    rng: &mut Prng,
) -> &'a Sample {
    if !mode.uses_camera() || variants.is_empty() {
        return real;
    }
    match rng.below(variants.len() + 1) {
        0 => real,
        i => variants[i - 1],
    }
}

/// Training inputs. Target ground truth is deliberately not part of it.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub source: &'a [Sample],
    pub target: &'a [Sample],
    pub camstyle: &'a [Sample],
    /// Observation noise of the generator; batch-time noise uses half.
    pub noise_sigma: f64,
}

impl<'a> TrainData<'a> {
    pub fn from_bundle(bundle: &'a DatasetBundle) -> Self {
        TrainData {
            source: &bundle.source_train,
            target: &bundle.target_train,
            camstyle: &bundle.target_camstyle,
            noise_sigma: bundle.config.noise_sigma,
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.source
            .first()
            .or(self.target.first())
            .map(|s| s.vec.len())
    }
}

/// Query/gallery split used for evaluation during training.
#[derive(Clone, Copy, Debug)]
pub struct EvalSplit<'a> {
    pub query: &'a [Sample],
    pub gallery: &'a [Sample],
}

impl<'a> EvalSplit<'a> {
    pub fn from_bundle(bundle: &'a DatasetBundle) -> Self {
        EvalSplit {
            query: &bundle.target_query,
            gallery: &bundle.target_gallery,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub alpha: f64,
    pub lr: f64,
    pub k: usize,
    pub loss_total: f64,
    pub loss_src: f64,
    pub loss_tgt: f64,
    pub loss_exemplar_camera: f64,
    pub loss_neighborhood: f64,
    pub map: Option<f64>,
    pub cmc1: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub net: EmbeddingNet,
    pub memory: ExemplarMemory,
    pub logs: Vec<EpochLog>,
    /// Source person id of each classifier output.
    pub source_classes: Vec<u32>,
}

/// Output of one forward/backward pass over a batch.
#[derive(Clone, Debug)]
pub struct BatchStep {
    pub report: LossReport,
    pub grads: Params,
    /// Normalized embedding of each target item, in batch order.
    pub target_features: Vec<Vec<f64>>,
}

/// Dropout streams for the two branches; `None` runs in evaluation mode.
pub struct DropoutRngs<'a> {
    pub source: &'a mut Prng,
    pub target: &'a mut Prng,
}

/// Forward, losses and parameter gradients for one batch.
///
/// `sources` pairs inputs with class indices, `targets` pairs inputs with
/// memory slots. Nothing is mutated; the caller applies the step and the
/// memory updates.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    net: &EmbeddingNet,
    memory: &ExemplarMemory,
    sources: &[(&[f64], usize)],
    targets: &[(&[f64], usize)],
    k: usize,
    beta: f64,
    lambda: f64,
    dropout: Option<DropoutRngs<'_>>,
) -> Result<BatchStep> {
    let mut idle = Prng::new(0);
    let mut idle2 = Prng::new(0);
    let (train, src_rng, tgt_rng) = match dropout {
        Some(d) => (true, d.source, d.target),
        None => (false, &mut idle, &mut idle2),
    };
    let src_traces: Vec<ForwardTrace> = sources
        .iter()
        .map(|(x, _)| net.forward(x, train, src_rng))
        .collect::<Result<_>>()?;
    let tgt_traces: Vec<ForwardTrace> = targets
        .iter()
        .map(|(x, _)| net.forward(x, train, tgt_rng))
        .collect::<Result<_>>()?;

    let src_terms: Vec<SourceTerm<'_>> = src_traces
        .iter()
        .zip(sources)
        .map(|(t, (_, label))| SourceTerm {
            logits: &t.logits,
            label: *label,
        })
        .collect();
    let tgt_terms: Vec<TargetTerm<'_>> = tgt_traces
        .iter()
        .zip(targets)
        .map(|(t, (_, slot))| TargetTerm {
            feature: &t.feature,
            slot: *slot,
        })
        .collect();
    let report = batch_loss(memory, &src_terms, &tgt_terms, k, beta, lambda)?;

    let mut grads = net.params.zeros_like();
    for (trace, g) in src_traces.iter().zip(&report.grad_logits) {
        net.backward_into(trace, None, Some(g), &mut grads)?;
    }
    for (trace, g) in tgt_traces.iter().zip(&report.grad_embeddings) {
        net.backward_into(trace, Some(g), None, &mut grads)?;
    }
    Ok(BatchStep {
        report,
        grads,
        target_features: tgt_traces.into_iter().map(|t| t.feature).collect(),
    })
}

/// Endless stream of indices over `0..n`, reshuffled on every pass.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: Prng,
}

impl Cycler {
    fn new(n: usize, rng: Prng) -> Self {
        Cycler {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn restart(&mut self) {
        self.pos = self.order.len();
    }

    fn take(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < count {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn jitter(x: &[f64], sigma: f64, rng: &mut Prng) -> Vec<f64> {
    if sigma > 0.0 {
        x.iter().map(|v| v + sigma * rng.normal()).collect()
    } else {
        x.to_vec()
    }
}

// Independent streams so that disabling one branch leaves the other's
// random draws untouched.
const STREAM_INIT: u64 = 1;
const STREAM_SOURCE_ORDER: u64 = 2;
const STREAM_TARGET_ORDER: u64 = 3;
const STREAM_SOURCE_NOISE: u64 = 4;
const STREAM_TARGET_NOISE: u64 = 5;
const STREAM_XSTAR: u64 = 6;
const STREAM_SOURCE_DROPOUT: u64 = 7;
const STREAM_TARGET_DROPOUT: u64 = 8;

pub fn train(
    cfg: &TrainConfig,
    data: TrainData<'_>,
    eval: Option<EvalSplit<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let input_dim = data
        .input_dim()
        .ok_or_else(|| Error::InvalidArgument("training data is empty".into()))?;
    if data.source.is_empty() {
        return Err(Error::InvalidArgument("no source training samples".into()));
    }
    if data.target.is_empty() && cfg.mode.uses_target() {
        return Err(Error::InvalidArgument("no target training samples".into()));
    }

    let mut source_classes: Vec<u32> = data
        .source
        .iter()
        .map(|s| {
            s.person_id.ok_or_else(|| {
                Error::InvalidArgument(format!("source sample {} has no person id", s.index))
            })
        })
        .collect::<Result<_>>()?;
    source_classes.sort_unstable();
    source_classes.dedup();
    let labels: Vec<usize> = data
        .source
        .iter()
        .map(|s| source_classes.binary_search(&s.person_id.unwrap()).unwrap())
        .collect();

    let mut variants: Vec<Vec<&Sample>> = vec![Vec::new(); data.target.len()];
    for v in data.camstyle {
        let slot = variants
            .get_mut(v.origin_index)
            .ok_or(Error::IndexOutOfRange {
                what: "camstyle origin",
                index: v.origin_index,
                len: data.target.len(),
            })?;
        slot.push(v);
    }

    let root = Prng::new(cfg.seed);
    let mut net = EmbeddingNet::init(
        input_dim,
        cfg.hidden_dim,
        cfg.embed_dim,
        source_classes.len(),
        root.fork(STREAM_INIT).next_u64(),
    )?
    .with_dropout(cfg.dropout)?;
    let mut memory = ExemplarMemory::new(data.target.len().max(1), cfg.embed_dim)?;
    let mut opt = SgdState::new(&net, cfg.lr, cfg.momentum);

    let mut src_order = Cycler::new(data.source.len(), root.fork(STREAM_SOURCE_ORDER));
    let mut tgt_order = Cycler::new(data.target.len(), root.fork(STREAM_TARGET_ORDER));
    let mut src_noise = root.fork(STREAM_SOURCE_NOISE);
    let mut tgt_noise = root.fork(STREAM_TARGET_NOISE);
    let mut xstar_rng = root.fork(STREAM_XSTAR);
    let mut src_drop = root.fork(STREAM_SOURCE_DROPOUT);
    let mut tgt_drop = root.fork(STREAM_TARGET_DROPOUT);

    let sigma = if cfg.augment_noise {
        data.noise_sigma / 2.0
    } else {
        0.0
    };
    let iterations = cfg.iterations_per_epoch(data.source.len(), data.target.len());
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let alpha = cfg.alpha_schedule(epoch);
        memory.set_alpha(alpha)?;
        opt.lr = cfg.lr_schedule(epoch);
        let k = cfg.effective_k(epoch).min(memory.n_slots());
        src_order.restart();
        tgt_order.restart();

        let mut sums = [0.0f64; 5];
        for iteration in 1..=iterations {
            let src_idx = src_order.take(cfg.batch_source);
            let src_inputs: Vec<Vec<f64>> = src_idx
                .iter()
                .map(|&i| jitter(&data.source[i].vec, sigma, &mut src_noise))
                .collect();
            let sources: Vec<(&[f64], usize)> = src_inputs
                .iter()
                .zip(&src_idx)
                .map(|(x, &i)| (x.as_slice(), labels[i]))
                .collect();

            let mut tgt_idx = Vec::new();
            let mut tgt_inputs = Vec::new();
            let mut transferred = Vec::new();
            if cfg.mode.uses_target() {
                tgt_idx = tgt_order.take(cfg.batch_target);
                for &i in &tgt_idx {
                    let chosen =
                        sample_xstar(&data.target[i], &variants[i], cfg.mode, &mut xstar_rng);
                    tgt_inputs.push(jitter(&chosen.vec, sigma, &mut tgt_noise));
                    transferred.push(chosen.transferred_to_camera.is_some());
                }
            }
            let targets: Vec<(&[f64], usize)> = tgt_inputs
                .iter()
                .zip(&tgt_idx)
                .map(|(x, &i)| (x.as_slice(), i))
                .collect();

            let step = batch_gradients(
                &net,
                &memory,
                &sources,
                &targets,
                k,
                cfg.beta,
                cfg.lambda,
                Some(DropoutRngs {
                    source: &mut src_drop,
                    target: &mut tgt_drop,
                }),
            )?;
            let r = &step.report;
            if !r.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, iteration {iteration}: total {} src {} tgt {}",
                    r.total, r.src, r.tgt
                )));
            }
            sums[0] += r.total;
            sums[1] += r.src;
            sums[2] += r.tgt;
            sums[3] += r.tgt_split.exemplar_or_camera;
            sums[4] += r.tgt_split.neighborhood;

            // Features of the real images, taken before the step, when the
            // memory must not see transfers.
            let real_features: Vec<Option<Vec<f64>>> = tgt_idx
                .iter()
                .zip(&transferred)
                .map(|(&i, &moved)| {
                    if cfg.update_with_real && moved {
                        net.embed(&data.target[i].vec).map(Some)
                    } else {
                        Ok(None)
                    }
                })
                .collect::<Result<_>>()?;

            opt.step(&mut net, &step.grads)?;
            if !net.params.is_finite() {
                return Err(Error::NonFinite(format!(
                    "parameters after epoch {epoch}, iteration {iteration}"
                )));
            }

            for (t, &slot) in tgt_idx.iter().enumerate() {
                let f = real_features[t]
                    .as_deref()
                    .unwrap_or(&step.target_features[t]);
                // A zero embedding has no direction to store.
                if norm(f) > 0.0 {
                    memory.update_current(slot, f)?;
                }
            }
        }

        let n = iterations as f64;
        let (map, cmc1) = match eval {
            Some(split)
                if cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) =>
            {
                let r = evaluate(&net, split.query, split.gallery)?;
                (Some(r.map), Some(r.cmc_at(1)))
            }
            _ => (None, None),
        };
        logs.push(EpochLog {
            epoch,
            alpha,
            lr: opt.lr,
            k,
            loss_total: sums[0] / n,
            loss_src: sums[1] / n,
            loss_tgt: sums[2] / n,
            loss_exemplar_camera: sums[3] / n,
            loss_neighborhood: sums[4] / n,
            map,
            cmc1,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutcome {
        config: cfg,
        net,
        memory,
        logs,
        source_classes,
    })
}

pub const METRICS_HEADER: &str =
    "epoch,alpha,lr,k,loss_total,loss_src,loss_tgt,loss_exemplar_camera,loss_neighborhood,map,cmc1";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `metrics.csv`: one row per epoch. Wall-clock time is left out so the
/// file is reproducible; it goes to `timing.csv` instead.
pub fn write_metrics(logs: &[EpochLog], dir: &Path) -> Result<()> {
    let mut csv = format!("{METRICS_HEADER}\n");
    let mut timing = String::from("epoch,seconds\n");
    for l in logs {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            l.epoch,
            l.alpha,
            l.lr,
            l.k,
            l.loss_total,
            l.loss_src,
            l.loss_tgt,
            l.loss_exemplar_camera,
            l.loss_neighborhood,
            opt_cell(l.map),
            opt_cell(l.cmc1),
        ));
        timing.push_str(&format!("{},{}\n", l.epoch, l.seconds));
    }
    let path = dir.join("metrics.csv");
    fs::write(&path, csv).map_err(|e| Error::io(path, e))?;
    let path = dir.join("timing.csv");
    fs::write(&path, timing).map_err(|e| Error::io(path, e))
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub epoch: usize,
    pub config: TrainConfig,
    pub source_classes: Vec<u32>,
    pub net: EmbeddingNet,
    pub memory_keys: DenseMat,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            epoch: outcome.logs.last().map_or(0, |l| l.epoch),
            config: outcome.config.clone(),
            source_classes: outcome.source_classes.clone(),
            net: outcome.net.clone(),
            memory_keys: outcome.memory.keys().clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_pretty(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = read_json(path)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::config(
                "format_version",
                format!("unsupported checkpoint version {}", ck.format_version),
            ));
        }
        let p = &ck.net.params;
        let consistent = p.b1.len() == p.w1.rows()
            && p.w2.cols() == p.w1.rows()
            && p.b2.len() == p.w2.rows()
            && p.wc.cols() == p.w2.rows()
            && p.bc.len() == p.wc.rows()
            && ck.memory_keys.cols() == p.w2.rows()
            && ck.source_classes.len() == p.wc.rows();
        if !consistent {
            return Err(Error::config(
                "net",
                "inconsistent parameter shapes in checkpoint",
            ));
        }
        ExemplarMemory::from_keys(ck.memory_keys.clone())?;
        Ok(ck)
    }

    pub fn memory(&self) -> Result<ExemplarMemory> {
        ExemplarMemory::from_keys(self.memory_keys.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig};

    fn bundle() -> DatasetBundle {
        generate(&GenConfig {
            n_source_ids: 4,
            n_target_ids: 5,
            cameras_source: 2,
            cameras_target: 3,
            images_per_id_per_camera: 2,
            latent_dim: 4,
            obs_dim: 8,
            ..GenConfig::default()
        })
        .unwrap()
    }

    fn quick(mode: Mode) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            batch_source: 8,
            batch_target: 8,
            hidden_dim: 12,
            embed_dim: 6,
            k: 3,
            mode,
            seed: 4,
            eval_every: 0,
            ..TrainConfig::default()
        }
    }

    fn run(cfg: &TrainConfig, b: &DatasetBundle) -> TrainOutcome {
        train(cfg, TrainData::from_bundle(b), None).unwrap()
    }

    fn without_time(logs: &[EpochLog]) -> Vec<EpochLog> {
        logs.iter()
            .map(|l| EpochLog {
                seconds: 0.0,
                ..l.clone()
            })
            .collect()
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert!((cfg.alpha_schedule(3) - 0.03).abs() < 1e-15);
        assert!((cfg.alpha_schedule(60) - 0.6).abs() < 1e-15);
        assert_eq!(cfg.alpha_schedule(200), 1.0);
        assert_eq!(cfg.lr_schedule(40), cfg.lr);
        assert!((cfg.lr_schedule(41) - cfg.lr * 0.1).abs() < 1e-15);
        assert_eq!(cfg.effective_k(5), 1);
        assert_eq!(cfg.effective_k(6), 6);
        let e_c = TrainConfig {
            mode: Mode::ExemplarCamera,
            ..cfg
        };
        assert_eq!(e_c.effective_k(30), 1);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert_eq!("e+c+n".parse::<Mode>().unwrap(), Mode::Full);
        assert!("ECN".parse::<Mode>().is_err());
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let bad = [
            TrainConfig {
                lambda: 1.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                beta: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                k: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                dropout: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr: f64::NAN,
                ..TrainConfig::default()
            },
        ];
        for cfg in bad {
            assert!(
                matches!(cfg.validate(), Err(Error::Config { .. })),
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn xstar_is_uniform_over_real_and_transfers() {
        let b = bundle();
        let real = &b.target_train[0];
        let variants: Vec<&Sample> = b
            .target_camstyle
            .iter()
            .filter(|s| s.origin_index == 0)
            .collect();
        assert_eq!(variants.len(), 2);
        let mut rng = Prng::new(99);
        let draws = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            let s = sample_xstar(real, &variants, Mode::Full, &mut rng);
            let slot = match s.transferred_to_camera {
                None => 0,
                Some(_) => 1 + variants.iter().position(|v| std::ptr::eq(*v, s)).unwrap(),
            };
            counts[slot] += 1;
        }
        let expected = draws as f64 / 3.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9th percentile of chi-square with 2 degrees of freedom.
        assert!(chi2 < 13.82, "chi2 {chi2}, counts {counts:?}");

        for _ in 0..100 {
            let s = sample_xstar(real, &variants, Mode::ExemplarNeighborhood, &mut rng);
            assert!(std::ptr::eq(s, real));
        }
    }

    #[test]
    fn zero_epochs_leaves_memory_empty() {
        let b = bundle();
        let out = run(
            &TrainConfig {
                epochs: 0,
                warmup_epochs: 0,
                ..quick(Mode::Full)
            },
            &b,
        );
        assert!(out.logs.is_empty());
        assert!(out.memory.keys().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_slot_filled_after_one_epoch() {
        let b = bundle();
        let out = run(
            &TrainConfig {
                epochs: 1,
                ..quick(Mode::Full)
            },
            &b,
        );
        assert_eq!(out.memory.n_slots(), b.target_train.len());
        for i in 0..out.memory.n_slots() {
            assert!((norm(out.memory.key(i)) - 1.0).abs() < 1e-9, "slot {i}");
        }
    }

    #[test]
    fn logs_follow_schedules() {
        let b = bundle();
        let cfg = quick(Mode::Full);
        let out = run(&cfg, &b);
        let ks: Vec<usize> = out.logs.iter().map(|l| l.k).collect();
        assert_eq!(ks, vec![1, 3, 3]);
        assert_eq!(out.logs[2].alpha, cfg.alpha_schedule(3));
        assert_eq!(out.logs[0].loss_neighborhood, 0.0);
        assert!(out.logs.iter().all(|l| l.loss_total.is_finite()));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let b = bundle();
        let cfg = TrainConfig {
            dropout: 0.2,
            ..quick(Mode::Full)
        };
        let a = run(&cfg, &b);
        let c = run(&cfg, &b);
        assert_eq!(a.net, c.net);
        assert_eq!(a.memory.keys(), c.memory.keys());
        assert_eq!(without_time(&a.logs), without_time(&c.logs));
        let other = run(&TrainConfig { seed: 5, ..cfg }, &b);
        assert_ne!(a.net, other.net);
    }

    #[test]
    fn zero_lambda_matches_source_only() {
        let b = bundle();
        let e = run(
            &TrainConfig {
                lambda: 0.0,
                ..quick(Mode::Exemplar)
            },
            &b,
        );
        let s = run(&quick(Mode::SourceOnly), &b);
        assert_eq!(e.net, s.net);
        assert_eq!(s.config.lambda, 0.0);
    }

    #[test]
    fn k_one_reduces_full_to_exemplar_camera() {
        let b = bundle();
        let full = run(
            &TrainConfig {
                k: 1,
                ..quick(Mode::Full)
            },
            &b,
        );
        let ec = run(
            &TrainConfig {
                k: 1,
                ..quick(Mode::ExemplarCamera)
            },
            &b,
        );
        assert_eq!(full.net, ec.net);
        assert_eq!(without_time(&full.logs), without_time(&ec.logs));
    }

    #[test]
    fn eval_is_logged_when_split_given() {
        let b = bundle();
        let cfg = TrainConfig {
            eval_every: 2,
            ..quick(Mode::Full)
        };
        let out = train(
            &cfg,
            TrainData::from_bundle(&b),
            Some(EvalSplit::from_bundle(&b)),
        )
        .unwrap();
        let logged: Vec<bool> = out.logs.iter().map(|l| l.map.is_some()).collect();
        assert_eq!(logged, vec![false, true, true]);
    }

    #[test]
    fn metrics_and_checkpoint_round_trip() {
        let b = bundle();
        let out = run(&quick(Mode::Full), &b);
        let dir = tempfile::tempdir().unwrap();
        write_metrics(&out.logs, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(!csv.contains('\r'));

        let path = dir.path().join("checkpoint.json");
        let ck = Checkpoint::from_outcome(&out);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.memory().unwrap().keys(), out.memory.keys());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let b = bundle();
        let out = run(
            &TrainConfig {
                epochs: 1,
                ..quick(Mode::Full)
            },
            &b,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut ck = Checkpoint::from_outcome(&out);
        ck.source_classes.pop();
        ck.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
        let mut ck = Checkpoint::from_outcome(&out);
        ck.format_version = 99;
        ck.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
