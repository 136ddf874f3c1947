//! Mini-batch training of the encoder and proxies against a chosen loss
//! variant, micro precision/recall/F1 evaluation, and the prior-multiplier
//! sweep.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::datagen::{stream_rng, PuDataset};
use crate::encoder::{init_params, predict, sample_mask, ModelParams, NetGraph};
use crate::error::{Error, Result};
use crate::losses::{p3m_total, sample_mu, sample_ori_anchors, Batch, LossBreakdown};
use crate::priors::{build_prior_config, PriorConfig, PriorGlobals, Variant};

/// Seeds used for multi-seed reporting.
pub const SEEDS: [u64; 5] = [62, 63, 64, 65, 66];

/// RNG stream indices hung off the training seed, so each consumer draws
/// from an independent deterministic sequence.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_MU: u64 = 3;
const STREAM_ANCHORS: u64 = 4;

/// Everything one training run needs besides the dataset. The variant set
/// here wins over the one recorded in `priors`.
#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of total steps spent ramping the rate up linearly; the
    /// remainder decays linearly to zero.
    pub warmup_frac: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub hidden_dims: Vec<usize>,
    pub d_emb: usize,
    pub priors: PriorConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be >= 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup fraction must lie in [0,1), got {}",
                self.warmup_frac
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::Config(format!(
                "adam epsilon must be > 0, got {}",
                self.adam_eps
            )));
        }
        if self.d_emb == 0 || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        Ok(())
    }

    fn dims(&self, d_in: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(d_in);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.d_emb);
        dims
    }
}

/// Per-class pooled decision counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub class: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
}

/// One optimization step as logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub mu: f64,
    pub breakdown: LossBreakdown,
}

/// Micro-averaged metrics plus the per-class counts behind them and, after
/// training, the per-step loss log. Metrics are zero when the evaluated
/// dataset carries no truth columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassCounts>,
    pub step_log: Vec<StepRecord>,
}

fn micro_metrics(per_class: Vec<ClassCounts>) -> MetricsReport {
    let tp: usize = per_class.iter().map(|c| c.tp).sum();
    let fp: usize = per_class.iter().map(|c| c.fp).sum();
    let fn_count: usize = per_class.iter().map(|c| c.fn_count).sum();
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_count > 0 {
        tp as f64 / (tp + fn_count) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    MetricsReport {
        precision,
        recall,
        f1,
        per_class,
        step_log: Vec::new(),
    }
}

/// Applies the inference rule per sample and pools TP/FP/FN over every
/// (sample, class) decision. Precision and recall fall back to 0 when their
/// denominators are empty.
pub fn evaluate(params: &ModelParams, dataset: &PuDataset) -> Result<MetricsReport> {
    if dataset.truth.is_none() {
        return Err(Error::Usage("evaluation needs a dataset with truth columns".into()));
    }
    if dataset.d_in() != params.layout.d_in() {
        return Err(Error::Usage(format!(
            "dataset d_in {} does not match model d_in {}",
            dataset.d_in(),
            params.layout.d_in()
        )));
    }
    if dataset.k() != params.layout.num_classes {
        return Err(Error::Usage(format!(
            "dataset has {} classes, model has {}",
            dataset.k(),
            params.layout.num_classes
        )));
    }
    let k = dataset.k();
    let mut counts: Vec<ClassCounts> = (1..=k)
        .map(|class| ClassCounts { class, tp: 0, fp: 0, fn_count: 0 })
        .collect();
    let mut predicted = vec![false; k];
    for j in 0..dataset.n() {
        predicted.iter_mut().for_each(|p| *p = false);
        for i in predict(dataset.features_row(j), params)? {
            predicted[i - 1] = true;
        }
        let truth = dataset.truth_row(j).expect("checked above");
        for i in 0..k {
            match (predicted[i], truth[i] == 1) {
                (true, true) => counts[i].tp += 1,
                (true, false) => counts[i].fp += 1,
                (false, true) => counts[i].fn_count += 1,
                (false, false) => {}
            }
        }
    }
    Ok(micro_metrics(counts))
}

/// Runs mini-batch Adam with linear warmup then linear decay to zero.
/// Deterministic given the seed: shuffling, dropout masks, mixup draws, and
/// anchor sampling each consume an independent stream hung off it. Trailing
/// samples that do not fill a batch are dropped. Returns the final
/// parameters and a report whose step log covers every update; when the
/// dataset carries truth the report also holds training-set metrics.
pub fn train(config: &TrainConfig, dataset: &PuDataset) -> Result<(ModelParams, MetricsReport)> {
    config.validate()?;
    if config.priors.num_classes() != dataset.k() {
        return Err(Error::Usage(format!(
            "prior table has {} classes, dataset has {}",
            config.priors.num_classes(),
            dataset.k()
        )));
    }
    let mut priors = config.priors.clone();
    priors.variant = config.variant;
    let rate = priors.dropout_rate;
    let k = dataset.k();
    let n = dataset.n();

    let mut params = init_params(config.seed, &config.dims(dataset.d_in()), k)?;
    let steps_per_epoch = n / config.batch_size;
    let total_steps = config.epochs * steps_per_epoch;
    let mut step_log = Vec::with_capacity(total_steps);
    if total_steps == 0 {
        let report = finish_report(&params, dataset, step_log)?;
        return Ok((params, report));
    }
    let warmup_steps =
        ((config.warmup_frac * total_steps as f64).round() as usize).min(total_steps - 1);

    let mut shuffle_rng = stream_rng(config.seed, STREAM_SHUFFLE);
    let mut dropout_rng = stream_rng(config.seed, STREAM_DROPOUT);
    let mut mu_rng = stream_rng(config.seed, STREAM_MU);
    let mut anchor_rng = stream_rng(config.seed, STREAM_ANCHORS);

    let needs_aug: Vec<bool> = (0..n)
        .map(|j| {
            if priors.variant.augments_all() {
                true
            } else if priors.variant.augments_positives() {
                dataset.observed_row(j).iter().any(|&s| s == 1)
            } else {
                false
            }
        })
        .collect();

    let mut m = vec![0.0; params.values.len()];
    let mut v = vec![0.0; params.values.len()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_finite: Option<(usize, f64)> = None;
    let diverged = |step: usize, last: Option<(usize, f64)>| {
        let (last_step, last_loss) = last.unwrap_or((0, f64::NAN));
        Error::Diverged { step, last_step, last_loss }
    };

    let mut step = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks_exact(config.batch_size) {
            let mut tape = Tape::new(params.values.len());
            let graph = NetGraph::bind(&mut tape, &params);
            let proxies = (0..=k).map(|i| graph.proxy(i)).collect();
            let emb: Vec<_> = chunk
                .iter()
                .map(|&j| {
                    let mask = if rate == 0.0 {
                        None
                    } else {
                        Some(sample_mask(&mut dropout_rng, rate, &config.hidden_dims)?)
                    };
                    Ok(graph.encode(&mut tape, dataset.features_row(j), mask.as_ref()))
                })
                .collect::<Result<_>>()?;
            let emb_aug: Vec<_> = chunk
                .iter()
                .enumerate()
                .map(|(b, &j)| {
                    if !needs_aug[j] {
                        return Ok(None);
                    }
                    if rate == 0.0 {
                        return Ok(Some(emb[b]));
                    }
                    let mask = sample_mask(&mut dropout_rng, rate, &config.hidden_dims)?;
                    Ok(Some(graph.encode(&mut tape, dataset.features_row(j), Some(&mask))))
                })
                .collect::<Result<_>>()?;
            if tape.poisoned().is_some() {
                return Err(diverged(step, last_finite));
            }

            let mut pos: Vec<Vec<usize>> = vec![Vec::new(); k];
            let mut unl: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (b, &j) in chunk.iter().enumerate() {
                let s = dataset.observed_row(j);
                for i in 0..k {
                    if s[i] == 1 {
                        pos[i].push(b);
                    } else {
                        unl[i].push(b);
                    }
                }
            }
            let (truth_pos, truth_neg) = if priors.variant == Variant::NaivePn {
                (Some(pos.clone()), Some(unl.clone()))
            } else {
                (None, None)
            };
            let mu = sample_mu(&mut mu_rng, priors.alpha)?;
            let ori_anchors = if priors.variant == Variant::P3mOri && priors.nu > 0.0 {
                Some(sample_ori_anchors(&mut anchor_rng, &pos, &unl))
            } else {
                None
            };
            let batch = Batch {
                emb,
                emb_aug,
                proxies,
                pos,
                unl,
                truth_pos,
                truth_neg,
                ori_anchors,
            };
            let (root, breakdown) = p3m_total(&mut tape, &batch, &priors, mu)?;
            if !breakdown.l_total.is_finite() {
                return Err(diverged(step, last_finite));
            }
            let grad = tape.backward(root).map_err(|e| match e {
                Error::Numeric { .. } => diverged(step, last_finite),
                other => other,
            })?;

            let lr = if step < warmup_steps {
                config.learning_rate * (step + 1) as f64 / warmup_steps as f64
            } else {
                config.learning_rate * (total_steps - step) as f64
                    / (total_steps - warmup_steps) as f64
            };
            let t = (step + 1) as i32;
            let bc1 = 1.0 - config.beta1.powi(t);
            let bc2 = 1.0 - config.beta2.powi(t);
            for (idx, g) in grad.values().iter().enumerate() {
                m[idx] = config.beta1 * m[idx] + (1.0 - config.beta1) * g;
                v[idx] = config.beta2 * v[idx] + (1.0 - config.beta2) * g * g;
                let update = (m[idx] / bc1) / ((v[idx] / bc2).sqrt() + config.adam_eps);
                params.values[idx] -= lr * update;
            }

            last_finite = Some((step, breakdown.l_total));
            step_log.push(StepRecord { step, lr, mu, breakdown });
            step += 1;
        }
    }
    let report = finish_report(&params, dataset, step_log)?;
    Ok((params, report))
}

fn finish_report(
    params: &ModelParams,
    dataset: &PuDataset,
    step_log: Vec<StepRecord>,
) -> Result<MetricsReport> {
    let mut report = if dataset.truth.is_some() {
        evaluate(params, dataset)?
    } else {
        micro_metrics(
            (1..=dataset.k())
                .map(|class| ClassCounts { class, tp: 0, fp: 0, fn_count: 0 })
                .collect(),
        )
    };
    report.step_log = step_log;
    Ok(report)
}

/// One (multiplier, seed) result of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub multiplier: f64,
    pub seed: u64,
    /// The exact prior table the cell trained with.
    pub priors: PriorConfig,
    /// Held-out metrics; the step log is dropped to keep sweeps small.
    pub report: MetricsReport,
}

/// Mean metrics over seeds for one multiplier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub multiplier: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    pub summary: Vec<SweepSummary>,
}

/// Trains one model per (multiplier, seed), evaluates each on `eval_data`,
/// and reports per-cell metrics plus per-multiplier means. Cells run in
/// parallel when `threads` allows; the output is identical either way.
pub fn sweep_prior_multiplier(
    base: &TrainConfig,
    multipliers: &[f64],
    seeds: &[u64],
    train_data: &PuDataset,
    eval_data: &PuDataset,
    threads: Option<usize>,
) -> Result<SweepTable> {
    if multipliers.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("sweep needs at least one multiplier and one seed".into()));
    }
    base.validate()?;
    let globals = PriorGlobals {
        lambda: base.priors.lambda,
        alpha: base.priors.alpha,
        nu: base.priors.nu,
        dropout_rate: base.priors.dropout_rate,
        variant: base.variant,
    };
    let mut jobs = Vec::with_capacity(multipliers.len() * seeds.len());
    for &multiplier in multipliers {
        let priors = build_prior_config(train_data, multiplier, &globals)?;
        for &seed in seeds {
            jobs.push((multiplier, seed, priors.clone()));
        }
    }
    let run_cell = |(multiplier, seed, priors): &(f64, u64, PriorConfig)| -> Result<SweepCell> {
        let config = TrainConfig {
            seed: *seed,
            priors: priors.clone(),
            ..base.clone()
        };
        let (params, _) = train(&config, train_data)?;
        let report = evaluate(&params, eval_data)?;
        Ok(SweepCell {
            multiplier: *multiplier,
            seed: *seed,
            priors: priors.clone(),
            report,
        })
    };
    let cells: Vec<SweepCell> = match threads {
        Some(t) if t >= 1 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| jobs.par_iter().map(run_cell).collect::<Result<_>>())?
        }
        _ => jobs.par_iter().map(run_cell).collect::<Result<_>>()?,
    };
    let summary = multipliers
        .iter()
        .map(|&multiplier| {
            let group: Vec<&SweepCell> = cells
                .iter()
                .filter(|c| c.multiplier == multiplier)
                .collect();
            let mean = |f: &dyn Fn(&SweepCell) -> f64| {
                group.iter().map(|c| f(c)).sum::<f64>() / group.len() as f64
            };
            SweepSummary {
                multiplier,
                precision: mean(&|c| c.report.precision),
                recall: mean(&|c| c.report.recall),
                f1: mean(&|c| c.report.f1),
            }
        })
        .collect();
    Ok(SweepTable { cells, summary })
}
