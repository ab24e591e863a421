//! Progressive transfer curriculum: target pairs are scored by how
//! consistently the source model retrieves their counterparts, converted to
//! admission probabilities that loosen over iterations, and the admitted
//! subset joins the joint training objective.

use std::fmt::Write as _;

use rand::Rng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::CrossMediaDataset;
use crate::error::{Error, Result};
use crate::model::{epoch_batches, joint_step, DcktModel, DomainNetwork, Media};
use crate::nn::SgdConfig;
use crate::retrieval::direction_map;

/// How the curriculum admits target pairs each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionStrategy {
    /// Admission probability from retrieval-consistency scores.
    Consistency,
    /// Every target pair trains every iteration.
    AllData,
    /// Every pair admitted with the same probability `alpha`.
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumConfig {
    /// Upper bound on admission probability, in (0, 1].
    pub alpha: f64,
    /// Number of curriculum iterations.
    pub iterations: usize,
    /// Source-epoch count per iteration.
    pub source_epochs: usize,
    /// Seed for admission draws and batch shuffles.
    pub seed: u64,
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.iterations == 0 || self.source_epochs == 0 {
            return Err(Error::InvalidArgument(
                "iterations and source_epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-pair retrieval consistency of the source model on target data.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyScores {
    /// AP of each image querying all texts.
    pub ap_img: Vec<f64>,
    /// AP of each text querying all images.
    pub ap_txt: Vec<f64>,
    /// Per-pair sum `ap_img + ap_txt`, the curriculum score.
    pub ap_sum: Vec<f64>,
}

/// Scores every target pair with the given (source) network: both media are
/// embedded into the common space and each item's cross-media AP against
/// shared labels is computed; the pair score is the two APs summed.
pub fn score_consistency(
    net: &DomainNetwork,
    data: &CrossMediaDataset,
) -> Result<ConsistencyScores> {
    if data.is_empty() {
        return Err(Error::Empty("consistency-scoring dataset".into()));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let batch = data.batch(&indices);
    let img = net.embed_batch(Media::Image, &batch.img)?;
    let txt = net.embed_batch(Media::Text, &batch.txt)?;
    let ap_img = direction_map(&img, &batch.labels, &txt, &batch.labels)?;
    let ap_txt = direction_map(&txt, &batch.labels, &img, &batch.labels)?;
    let ap_sum = ap_img
        .iter()
        .zip(&ap_txt)
        .map(|(a, b)| a + b)
        .collect();
    Ok(ConsistencyScores {
        ap_img,
        ap_txt,
        ap_sum,
    })
}

/// Admission probability of one pair at curriculum iteration `iter` (1-based):
/// `alpha * (1 - log2((max_ap - ap) / (max_ap * iter) + 1))`.
/// Pairs at the maximum score get exactly `alpha`; the floor rises with
/// `iter`. When every score is zero the probability falls back to `alpha`.
pub fn selection_prob(ap_sum: f64, max_ap: f64, iter: usize, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("bad alpha {alpha}")));
    }
    if iter == 0 {
        return Err(Error::InvalidArgument("iter must be >= 1".into()));
    }
    if !(0.0..=max_ap + 1e-12).contains(&ap_sum) || max_ap < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "ap_sum {ap_sum} outside [0, {max_ap}]"
        )));
    }
    if max_ap == 0.0 {
        return Ok(alpha);
    }
    let gap = ((max_ap - ap_sum).max(0.0)) / (max_ap * iter as f64);
    let p = alpha * (1.0 - (gap + 1.0).log2());
    Ok(p.clamp(0.0, 1.0))
}

/// The admission decision for one curriculum iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRecord {
    pub iteration: usize,
    pub probs: Vec<f64>,
    pub selected: Vec<usize>,
    /// True when no pair survived its draw and the best-scoring pair was
    /// admitted by force so the iteration trains on something.
    pub forced: bool,
}

/// Draws the admitted subset for one iteration from consistency scores.
pub fn select_samples(
    scores: &ConsistencyScores,
    iter: usize,
    alpha: f64,
    strategy: SelectionStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<SelectionRecord> {
    let n = scores.ap_sum.len();
    if n == 0 {
        return Err(Error::Empty("selection scores".into()));
    }
    let max_ap = scores.ap_sum.iter().cloned().fold(0.0f64, f64::max);
    let probs: Vec<f64> = match strategy {
        SelectionStrategy::AllData => vec![1.0; n],
        SelectionStrategy::UniformRandom => vec![alpha; n],
        SelectionStrategy::Consistency => scores
            .ap_sum
            .iter()
            .map(|&ap| selection_prob(ap, max_ap, iter, alpha))
            .collect::<Result<_>>()?,
    };
    let mut selected: Vec<usize> = probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| rng.gen_bool(p.clamp(0.0, 1.0)))
        .map(|(i, _)| i)
        .collect();
    let mut forced = false;
    if selected.is_empty() {
        // Admit the single best-scoring pair (lowest index on ties).
        let best = scores
            .ap_sum
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| {
                if v > acc.1 {
                    (i, v)
                } else {
                    acc
                }
            })
            .0;
        selected.push(best);
        forced = true;
    }
    Ok(SelectionRecord {
        iteration: iter,
        probs,
        selected,
        forced,
    })
}

/// Endless reshuffling cycle over the admitted target indices, consumed in
/// batch-sized chunks so every joint step sees a full target batch.
struct TargetCycle {
    pool: Vec<usize>,
    queue: Vec<usize>,
}

impl TargetCycle {
    fn new(pool: Vec<usize>) -> Self {
        TargetCycle {
            pool,
            queue: Vec::new(),
        }
    }

    fn take(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.queue.is_empty() {
                let mut next = self.pool.clone();
                next.shuffle(rng);
                self.queue = next;
            }
            out.push(self.queue.remove(0));
        }
        out
    }
}

/// One row of the training log; iteration 0 records pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub mmd_image: f64,
    pub mmd_text: f64,
    pub mmd_corr: f64,
    pub pair_src: f64,
    pub pair_tgt: f64,
    pub sem_src: f64,
    pub sem_tgt: f64,
    pub total: f64,
    pub selected: usize,
    pub ap_min: f64,
    pub ap_median: f64,
    pub ap_max: f64,
}

pub const LOG_COLUMNS: [&str; 13] = [
    "iteration",
    "mmd_image",
    "mmd_text",
    "mmd_corr",
    "pair_src",
    "pair_tgt",
    "sem_src",
    "sem_tgt",
    "total",
    "selected",
    "ap_min",
    "ap_median",
    "ap_max",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_tsv(&self) -> String {
        let mut out = LOG_COLUMNS.join("\t");
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.iteration,
                r.mmd_image,
                r.mmd_text,
                r.mmd_corr,
                r.pair_src,
                r.pair_tgt,
                r.sem_src,
                r.sem_tgt,
                r.total,
                r.selected,
                r.ap_min,
                r.ap_median,
                r.ap_max
            )
            .unwrap();
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty training log".into(),
        })?;
        if header != LOG_COLUMNS.join("\t") {
            return Err(Error::Parse {
                line: 1,
                msg: "unexpected training-log header".into(),
            });
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != LOG_COLUMNS.len() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {} columns, got {}", LOG_COLUMNS.len(), f.len()),
                });
            }
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad number `{s}`"),
                })
            };
            let int = |s: &str| -> Result<usize> {
                s.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("bad count `{s}`"),
                })
            };
            rows.push(LogRow {
                iteration: int(f[0])?,
                mmd_image: num(f[1])?,
                mmd_text: num(f[2])?,
                mmd_corr: num(f[3])?,
                pair_src: num(f[4])?,
                pair_tgt: num(f[5])?,
                sem_src: num(f[6])?,
                sem_tgt: num(f[7])?,
                total: num(f[8])?,
                selected: int(f[9])?,
                ap_min: num(f[10])?,
                ap_median: num(f[11])?,
                ap_max: num(f[12])?,
            });
        }
        Ok(TrainingLog { rows })
    }
}

fn median(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let mut v = vals.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean-loss accumulator for one curriculum iteration's log row.
#[derive(Default)]
struct RowAcc {
    sums: [f64; 8],
    steps: usize,
}

impl RowAcc {
    fn add(&mut self, b: &crate::losses::LossBreakdown) {
        let vals = [
            b.mmd_image, b.mmd_text, b.mmd_corr, b.pair_src, b.pair_tgt, b.sem_src, b.sem_tgt,
            b.total,
        ];
        for (s, v) in self.sums.iter_mut().zip(vals) {
            *s += v;
        }
        self.steps += 1;
    }

    fn row(&self, iteration: usize, selected: usize, ap: &[f64]) -> LogRow {
        let n = self.steps.max(1) as f64;
        let m = |i: usize| self.sums[i] / n;
        LogRow {
            iteration,
            mmd_image: m(0),
            mmd_text: m(1),
            mmd_corr: m(2),
            pair_src: m(3),
            pair_tgt: m(4),
            sem_src: m(5),
            sem_tgt: m(6),
            total: m(7),
            selected,
            ap_min: ap.iter().cloned().fold(f64::INFINITY, f64::min).min(f64::INFINITY),
            ap_median: median(ap),
            ap_max: ap.iter().cloned().fold(0.0, f64::max),
        }
    }
}

/// Runs the progressive curriculum: each iteration scores every target pair
/// with the current source network, draws the admitted subset, and trains
/// both networks jointly for `source_epochs` passes over the source data
/// with target batches cycled from the admitted pool. Appends one log row
/// per iteration and returns the per-iteration selection records.
pub fn progressive_transfer(
    model: &mut DcktModel,
    src_train: &CrossMediaDataset,
    tgt_train: &CrossMediaDataset,
    cfg: &CurriculumConfig,
    strategy: SelectionStrategy,
    sgd: &SgdConfig,
    batch_size: usize,
    log: &mut TrainingLog,
) -> Result<Vec<SelectionRecord>> {
    cfg.validate()?;
    if src_train.is_empty() || tgt_train.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.iterations);
    for iter in 1..=cfg.iterations {
        let scores = score_consistency(&model.source, tgt_train)?;
        let record = select_samples(&scores, iter, cfg.alpha, strategy, &mut rng)?;
        let mut cycle = TargetCycle::new(record.selected.clone());
        let mut acc = RowAcc::default();
        for _ in 0..cfg.source_epochs {
            for src_idx in epoch_batches(src_train.len(), batch_size, &mut rng) {
                let tgt_idx = cycle.take(src_idx.len(), &mut rng);
                let src_batch = src_train.batch(&src_idx);
                let tgt_batch = tgt_train.batch(&tgt_idx);
                acc.add(&joint_step(model, &src_batch, &tgt_batch, sgd)?);
            }
        }
        log.rows
            .push(acc.row(iter, record.selected.len(), &scores.ap_sum));
        records.push(record);
    }
    Ok(records)
}
