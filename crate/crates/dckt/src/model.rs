//! Two-domain network assembly: per-media pathways feeding shared layers,
//! joint forward/backward over source and target batches with all coupling
//! losses attached at their prescribed layers, and checkpoint round-trips.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{CrossMediaDataset, DatasetStats, NormStats, PairedBatch};
use crate::error::{Error, Result};
use crate::losses::{
    combine, mmd_corr_loss, mmd_media_loss, pairwise_loss, LossBreakdown, LossTerms, LossWeights,
    MmdConfig,
};
use crate::matrix::Matrix;
use crate::nn::{
    softmax, softmax_cross_entropy, Activation, DenseLayer, ForwardTrace, LayerGrads, SgdConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Media {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// Class-probability vector used as the common representation.
#[derive(Debug, Clone, PartialEq)]
pub struct CommonRepresentation(Vec<f64>);

impl CommonRepresentation {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "not a probability vector (sum {sum})"
            )));
        }
        Ok(CommonRepresentation(probs))
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }
}

/// One domain's parameters: media pathways, shared layers, classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainNetwork {
    pub img_fc6: DenseLayer,
    pub img_fc7: DenseLayer,
    pub txt_fc6: DenseLayer,
    pub txt_fc7: DenseLayer,
    pub shared_fc8: DenseLayer,
    pub shared_fc9: DenseLayer,
    pub classifier_fc10: DenseLayer,
    pub num_classes: usize,
}

pub const LAYER_NAMES: [&str; 7] = [
    "img_fc6",
    "img_fc7",
    "txt_fc6",
    "txt_fc7",
    "shared_fc8",
    "shared_fc9",
    "classifier_fc10",
];

impl DomainNetwork {
    pub fn new<R: Rng>(
        d_img: usize,
        d_txt: usize,
        hidden: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be >= 1".into()));
        }
        Ok(DomainNetwork {
            img_fc6: DenseLayer::init(d_img, hidden, Activation::Relu, rng)?,
            img_fc7: DenseLayer::init(hidden, hidden, Activation::Relu, rng)?,
            txt_fc6: DenseLayer::init(d_txt, hidden, Activation::Relu, rng)?,
            txt_fc7: DenseLayer::init(hidden, hidden, Activation::Relu, rng)?,
            shared_fc8: DenseLayer::init(hidden, hidden, Activation::Relu, rng)?,
            shared_fc9: DenseLayer::init(hidden, hidden, Activation::Relu, rng)?,
            classifier_fc10: DenseLayer::init(hidden, num_classes, Activation::Identity, rng)?,
            num_classes,
        })
    }

    pub fn hidden(&self) -> usize {
        self.shared_fc8.in_dim()
    }

    pub fn layers(&self) -> [&DenseLayer; 7] {
        [
            &self.img_fc6,
            &self.img_fc7,
            &self.txt_fc6,
            &self.txt_fc7,
            &self.shared_fc8,
            &self.shared_fc9,
            &self.classifier_fc10,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut DenseLayer; 7] {
        [
            &mut self.img_fc6,
            &mut self.img_fc7,
            &mut self.txt_fc6,
            &mut self.txt_fc7,
            &mut self.shared_fc8,
            &mut self.shared_fc9,
            &mut self.classifier_fc10,
        ]
    }

    fn pathway(&self, media: Media) -> (&DenseLayer, &DenseLayer) {
        match media {
            Media::Image => (&self.img_fc6, &self.img_fc7),
            Media::Text => (&self.txt_fc6, &self.txt_fc7),
        }
    }

    /// Runs a batch through one media pathway and the shared stack.
    /// The trace holds fc6..fc10 post-activations plus softmax probabilities.
    pub fn forward_batch(&self, media: Media, input: &Matrix) -> Result<ForwardTrace> {
        let (fc6, fc7) = self.pathway(media);
        let (a6, c6) = fc6.forward(input)?;
        let (a7, c7) = fc7.forward(&a6)?;
        let (a8, c8) = self.shared_fc8.forward(&a7)?;
        let (a9, c9) = self.shared_fc9.forward(&a8)?;
        let (logits, c10) = self.classifier_fc10.forward(&a9)?;
        let probs = softmax(&logits);
        let mut trace = ForwardTrace::new(input.rows());
        trace.push("fc6", a6, Some(c6));
        trace.push("fc7", a7, Some(c7));
        trace.push("fc8", a8, Some(c8));
        trace.push("fc9", a9, Some(c9));
        trace.push("fc10", logits, Some(c10));
        trace.push("prob", probs, None);
        Ok(trace)
    }

    pub fn forward_item(&self, media: Media, feature: &[f64]) -> Result<ForwardTrace> {
        let input = Matrix::from_vec(1, feature.len(), feature.to_vec())?;
        self.forward_batch(media, &input)
    }

    /// Common representation of one item: the softmax slice of the trace.
    pub fn embed(&self, media: Media, feature: &[f64]) -> Result<CommonRepresentation> {
        let trace = self.forward_item(media, feature)?;
        CommonRepresentation::new(trace.activation("prob")?.row(0).to_vec())
    }

    /// Probability vectors for every row of a batch.
    pub fn embed_batch(&self, media: Media, input: &Matrix) -> Result<Vec<Vec<f64>>> {
        let trace = self.forward_batch(media, input)?;
        let probs = trace.activation("prob")?;
        Ok((0..probs.rows()).map(|r| probs.row(r).to_vec()).collect())
    }
}

/// Parameter gradients for one domain, layer order as `LAYER_NAMES`.
#[derive(Debug, Clone)]
pub struct DomainGrads {
    pub layers: Vec<LayerGrads>,
}

impl DomainGrads {
    fn zeros_like(net: &DomainNetwork) -> Self {
        DomainGrads {
            layers: net.layers().iter().map(|l| LayerGrads::zeros_like(l)).collect(),
        }
    }

    fn add_assign(&mut self, other: &DomainGrads) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            a.add_assign(b);
        }
    }
}

/// Gradients on the post-activations of one media pass.
struct ActGrads {
    g6: Matrix,
    g7: Matrix,
    g8: Matrix,
    g9: Matrix,
    g10: Matrix,
}

impl ActGrads {
    fn zeros(net: &DomainNetwork, media: Media, batch: usize) -> Self {
        let (fc6, fc7) = net.pathway(media);
        ActGrads {
            g6: Matrix::zeros(batch, fc6.out_dim()),
            g7: Matrix::zeros(batch, fc7.out_dim()),
            g8: Matrix::zeros(batch, net.shared_fc8.out_dim()),
            g9: Matrix::zeros(batch, net.shared_fc9.out_dim()),
            g10: Matrix::zeros(batch, net.num_classes),
        }
    }
}

/// Backpropagates accumulated activation gradients through one media pass.
fn backward_media(
    net: &DomainNetwork,
    media: Media,
    trace: &ForwardTrace,
    mut acc: ActGrads,
) -> Result<DomainGrads> {
    let (fc6, fc7) = net.pathway(media);
    let (g_in10, gw10) = net.classifier_fc10.backward(&acc.g10, trace.cache("fc10")?)?;
    acc.g9.add_scaled(&g_in10, 1.0);
    let (g_in9, gw9) = net.shared_fc9.backward(&acc.g9, trace.cache("fc9")?)?;
    acc.g8.add_scaled(&g_in9, 1.0);
    let (g_in8, gw8) = net.shared_fc8.backward(&acc.g8, trace.cache("fc8")?)?;
    acc.g7.add_scaled(&g_in8, 1.0);
    let (g_in7, gw7) = fc7.backward(&acc.g7, trace.cache("fc7")?)?;
    acc.g6.add_scaled(&g_in7, 1.0);
    let (_, gw6) = fc6.backward(&acc.g6, trace.cache("fc6")?)?;

    let mut grads = DomainGrads::zeros_like(net);
    let (i6, i7) = match media {
        Media::Image => (0, 1),
        Media::Text => (2, 3),
    };
    grads.layers[i6] = gw6;
    grads.layers[i7] = gw7;
    grads.layers[4] = gw8;
    grads.layers[5] = gw9;
    grads.layers[6] = gw10;
    Ok(grads)
}

/// Semantic + pairwise terms for one domain's paired batch, with activation
/// gradients scaled by the given weights. Terms with zero weight are
/// skipped entirely and reported as 0.
fn semantic_and_pair(
    labels: &[usize],
    img_trace: &ForwardTrace,
    txt_trace: &ForwardTrace,
    w_sem: f64,
    w_pair: f64,
    img_acc: &mut ActGrads,
    txt_acc: &mut ActGrads,
) -> Result<(f64, f64)> {
    let mut sem = 0.0;
    if w_sem > 0.0 {
        let (l_img, g_img) = softmax_cross_entropy(img_trace.activation("fc10")?, labels)?;
        let (l_txt, g_txt) = softmax_cross_entropy(txt_trace.activation("fc10")?, labels)?;
        sem = l_img + l_txt;
        img_acc.g10.add_scaled(&g_img, w_sem);
        txt_acc.g10.add_scaled(&g_txt, w_sem);
    }
    let mut pair = 0.0;
    if w_pair > 0.0 {
        let (v, grads) = pairwise_loss(&[
            (img_trace.activation("fc6")?, txt_trace.activation("fc6")?),
            (img_trace.activation("fc7")?, txt_trace.activation("fc7")?),
        ])?;
        pair = v;
        img_acc.g6.add_scaled(&grads[0].0, w_pair);
        txt_acc.g6.add_scaled(&grads[0].1, w_pair);
        img_acc.g7.add_scaled(&grads[1].0, w_pair);
        txt_acc.g7.add_scaled(&grads[1].1, w_pair);
    }
    Ok((sem, pair))
}

/// The full DCKT model: source and target networks with identical layer
/// shapes except class count, plus the loss configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DcktModel {
    pub source: DomainNetwork,
    pub target: DomainNetwork,
    pub weights: LossWeights,
    pub mmd_cfg: MmdConfig,
}

#[derive(Debug, Clone)]
pub struct JointGrads {
    pub source: DomainGrads,
    pub target: DomainGrads,
}

const MEDIA_LAYERS: [&str; 2] = ["fc6", "fc7"];
const SHARED_LAYERS: [&str; 2] = ["fc8", "fc9"];

/// Computes the full objective and its parameter gradients without mutating
/// the model. Loss terms whose weight is zero are skipped and reported as 0.
pub fn joint_losses(
    model: &DcktModel,
    batch_src: &PairedBatch,
    batch_tgt: &PairedBatch,
) -> Result<(LossBreakdown, JointGrads)> {
    let w = &model.weights;
    w.validate()?;
    let src_img = model.source.forward_batch(Media::Image, &batch_src.img)?;
    let src_txt = model.source.forward_batch(Media::Text, &batch_src.txt)?;
    let tgt_img = model.target.forward_batch(Media::Image, &batch_tgt.img)?;
    let tgt_txt = model.target.forward_batch(Media::Text, &batch_tgt.txt)?;

    let ns = batch_src.img.rows();
    let nt = batch_tgt.img.rows();
    let mut acc_si = ActGrads::zeros(&model.source, Media::Image, ns);
    let mut acc_st = ActGrads::zeros(&model.source, Media::Text, ns);
    let mut acc_ti = ActGrads::zeros(&model.target, Media::Image, nt);
    let mut acc_tt = ActGrads::zeros(&model.target, Media::Text, nt);

    let mut terms = LossTerms::default();
    let (sem_s, pair_s) = semantic_and_pair(
        &batch_src.labels,
        &src_img,
        &src_txt,
        w.w_sem_src,
        w.w_pair_src,
        &mut acc_si,
        &mut acc_st,
    )?;
    terms.sem_src = sem_s;
    terms.pair_src = pair_s;
    let (sem_t, pair_t) = semantic_and_pair(
        &batch_tgt.labels,
        &tgt_img,
        &tgt_txt,
        w.w_sem_tgt,
        w.w_pair_tgt,
        &mut acc_ti,
        &mut acc_tt,
    )?;
    terms.sem_tgt = sem_t;
    terms.pair_tgt = pair_t;

    if w.w_mmd_image > 0.0 {
        let (v, grads) = mmd_media_loss(&src_img, &tgt_img, &MEDIA_LAYERS, &model.mmd_cfg)?;
        terms.mmd_image = v;
        for g in &grads {
            let (src_acc, tgt_acc) = match g.layer.as_str() {
                "fc6" => (&mut acc_si.g6, &mut acc_ti.g6),
                _ => (&mut acc_si.g7, &mut acc_ti.g7),
            };
            src_acc.add_scaled(&g.grad_a, w.w_mmd_image);
            tgt_acc.add_scaled(&g.grad_b, w.w_mmd_image);
        }
    }
    if w.w_mmd_text > 0.0 {
        let (v, grads) = mmd_media_loss(&src_txt, &tgt_txt, &MEDIA_LAYERS, &model.mmd_cfg)?;
        terms.mmd_text = v;
        for g in &grads {
            let (src_acc, tgt_acc) = match g.layer.as_str() {
                "fc6" => (&mut acc_st.g6, &mut acc_tt.g6),
                _ => (&mut acc_st.g7, &mut acc_tt.g7),
            };
            src_acc.add_scaled(&g.grad_a, w.w_mmd_text);
            tgt_acc.add_scaled(&g.grad_b, w.w_mmd_text);
        }
    }
    if w.w_mmd_corr > 0.0 {
        let (v, grads) = mmd_corr_loss(
            &src_img,
            &src_txt,
            &tgt_img,
            &tgt_txt,
            &SHARED_LAYERS,
            &model.mmd_cfg,
        )?;
        terms.mmd_corr = v;
        for g in &grads {
            let wc = w.w_mmd_corr;
            if g.layer == "fc8" {
                acc_si.g8.add_scaled(&g.src_img, wc);
                acc_st.g8.add_scaled(&g.src_txt, wc);
                acc_ti.g8.add_scaled(&g.tgt_img, wc);
                acc_tt.g8.add_scaled(&g.tgt_txt, wc);
            } else {
                acc_si.g9.add_scaled(&g.src_img, wc);
                acc_st.g9.add_scaled(&g.src_txt, wc);
                acc_ti.g9.add_scaled(&g.tgt_img, wc);
                acc_tt.g9.add_scaled(&g.tgt_txt, wc);
            }
        }
    }

    let breakdown = combine(&terms, w)?;

    let mut src_grads = backward_media(&model.source, Media::Image, &src_img, acc_si)?;
    src_grads.add_assign(&backward_media(&model.source, Media::Text, &src_txt, acc_st)?);
    let mut tgt_grads = backward_media(&model.target, Media::Image, &tgt_img, acc_ti)?;
    tgt_grads.add_assign(&backward_media(&model.target, Media::Text, &tgt_txt, acc_tt)?);

    Ok((
        breakdown,
        JointGrads {
            source: src_grads,
            target: tgt_grads,
        },
    ))
}

fn apply_domain_grads(net: &mut DomainNetwork, grads: &DomainGrads, sgd: &SgdConfig) -> Result<()> {
    let mut layers = net.layers_mut();
    crate::nn::sgd_step(&mut layers, &grads.layers, sgd)
}

/// One joint training step: all seven losses at their prescribed layers,
/// one SGD update to both domain networks. Returns the pre-update losses.
/// Any error leaves both networks untouched.
pub fn joint_step(
    model: &mut DcktModel,
    batch_src: &PairedBatch,
    batch_tgt: &PairedBatch,
    sgd: &SgdConfig,
) -> Result<LossBreakdown> {
    let (breakdown, grads) = joint_losses(model, batch_src, batch_tgt)?;
    apply_domain_grads(&mut model.source, &grads.source, sgd)?;
    apply_domain_grads(&mut model.target, &grads.target, sgd)?;
    Ok(breakdown)
}

/// One single-domain step with semantic + pairwise losses only (the
/// pretraining objective). Returns `(sem, pair)` raw term values.
pub fn domain_step(
    net: &mut DomainNetwork,
    batch: &PairedBatch,
    w_sem: f64,
    w_pair: f64,
    sgd: &SgdConfig,
) -> Result<(f64, f64)> {
    let img_trace = net.forward_batch(Media::Image, &batch.img)?;
    let txt_trace = net.forward_batch(Media::Text, &batch.txt)?;
    let n = batch.img.rows();
    let mut img_acc = ActGrads::zeros(net, Media::Image, n);
    let mut txt_acc = ActGrads::zeros(net, Media::Text, n);
    let (sem, pair) = semantic_and_pair(
        &batch.labels,
        &img_trace,
        &txt_trace,
        w_sem,
        w_pair,
        &mut img_acc,
        &mut txt_acc,
    )?;
    let mut grads = backward_media(net, Media::Image, &img_trace, img_acc)?;
    grads.add_assign(&backward_media(net, Media::Text, &txt_trace, txt_acc)?);
    apply_domain_grads(net, &grads, sgd)?;
    Ok((sem, pair))
}

/// Shuffles indices and yields batches of at least two rows.
pub(crate) fn epoch_batches(
    len: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// Pre-trains one domain with semantic and pairwise losses only; MMD weight
/// fields of `weights` are ignored. Deterministic given `sgd.seed`.
/// Returns per-step `(sem, pair)` values.
pub fn pretrain_domain(
    net: &mut DomainNetwork,
    data: &CrossMediaDataset,
    epochs: usize,
    weights: &LossWeights,
    domain: Domain,
    sgd: &SgdConfig,
    batch_size: usize,
) -> Result<Vec<(f64, f64)>> {
    if epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Empty("pretraining dataset".into()));
    }
    let (w_sem, w_pair) = match domain {
        Domain::Source => (weights.w_sem_src, weights.w_pair_src),
        Domain::Target => (weights.w_sem_tgt, weights.w_pair_tgt),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sgd.seed);
    let mut log = Vec::new();
    for _ in 0..epochs {
        for batch_idx in epoch_batches(data.len(), batch_size, &mut rng) {
            let batch = data.batch(&batch_idx);
            log.push(domain_step(net, &batch, w_sem, w_pair, sgd)?);
        }
    }
    Ok(log)
}

/// Full training state written to disk: model parameters, loss
/// configuration, the experiment seed, and the normalization statistics
/// needed to reproduce evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DcktModel,
    pub seed: u64,
    pub src_stats: DatasetStats,
    pub tgt_stats: DatasetStats,
}

fn write_floats(out: &mut String, vals: &[f64]) {
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v}").unwrap();
    }
    out.push('\n');
}

fn write_stats(out: &mut String, name: &str, s: &NormStats) {
    writeln!(out, "norm {name} {}", s.mean.len()).unwrap();
    write_floats(out, &s.mean);
    write_floats(out, &s.std);
}

fn write_network(out: &mut String, name: &str, net: &DomainNetwork) {
    writeln!(out, "domain {name} {}", net.num_classes).unwrap();
    for (layer_name, layer) in LAYER_NAMES.iter().zip(net.layers()) {
        writeln!(
            out,
            "layer {layer_name} {} {} {}",
            layer.out_dim(),
            layer.in_dim(),
            layer.activation().name()
        )
        .unwrap();
        write_floats(out, layer.bias());
        for r in 0..layer.out_dim() {
            write_floats(out, layer.weights().row(r));
        }
    }
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("dckt-checkpoint-v1\n");
        writeln!(out, "seed {}", self.seed).unwrap();
        let w = self.model.weights;
        write!(out, "loss_weights").unwrap();
        for (_, v) in w.named() {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
        let m = &self.model.mmd_cfg;
        match m.bandwidth_base {
            crate::losses::BandwidthBase::MedianHeuristic => {
                writeln!(out, "mmd {} {} median", m.num_kernels, m.bandwidth_step).unwrap()
            }
            crate::losses::BandwidthBase::Fixed(v) => {
                writeln!(out, "mmd {} {} fixed {v}", m.num_kernels, m.bandwidth_step).unwrap()
            }
        }
        write_stats(&mut out, "src_img", &self.src_stats.img);
        write_stats(&mut out, "src_txt", &self.src_stats.txt);
        write_stats(&mut out, "tgt_img", &self.tgt_stats.img);
        write_stats(&mut out, "tgt_txt", &self.tgt_stats.txt);
        write_network(&mut out, "source", &self.model.source);
        write_network(&mut out, "target", &self.model.target);
        out.push_str("end\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::atomic_write(path, self.to_text().as_bytes())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines
                .next()
                .map(|(i, l)| (i + 1, l))
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    msg: format!("unexpected end of checkpoint, wanted {what}"),
                })
        };
        let (line, header) = next("header")?;
        if header != "dckt-checkpoint-v1" {
            return Err(Error::Parse {
                line,
                msg: "not a dckt checkpoint".into(),
            });
        }
        fn floats(line: usize, s: &str, expected: usize) -> Result<Vec<f64>> {
            let vals: Vec<f64> = s
                .split(' ')
                .map(|t| {
                    t.parse::<f64>().map_err(|_| Error::Parse {
                        line,
                        msg: format!("bad float `{t}`"),
                    })
                })
                .collect::<Result<_>>()?;
            if vals.len() != expected {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {expected} floats, got {}", vals.len()),
                });
            }
            Ok(vals)
        }
        let parse_err = |line: usize, msg: String| Error::Parse { line, msg };

        let (line, seed_line) = next("seed")?;
        let seed: u64 = seed_line
            .strip_prefix("seed ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(line, "bad seed line".into()))?;

        let (line, w_line) = next("loss_weights")?;
        let w_body = w_line
            .strip_prefix("loss_weights ")
            .ok_or_else(|| parse_err(line, "bad loss_weights line".into()))?;
        let wv = floats(line, w_body, 7)?;
        let weights = LossWeights {
            w_mmd_image: wv[0],
            w_mmd_text: wv[1],
            w_mmd_corr: wv[2],
            w_pair_src: wv[3],
            w_pair_tgt: wv[4],
            w_sem_src: wv[5],
            w_sem_tgt: wv[6],
        };

        let (line, m_line) = next("mmd")?;
        let toks: Vec<&str> = m_line.split(' ').collect();
        if toks.len() < 4 || toks[0] != "mmd" {
            return Err(parse_err(line, "bad mmd line".into()));
        }
        let base = match toks[3] {
            "median" => crate::losses::BandwidthBase::MedianHeuristic,
            "fixed" if toks.len() == 5 => crate::losses::BandwidthBase::Fixed(
                toks[4]
                    .parse()
                    .map_err(|_| parse_err(line, "bad fixed bandwidth".into()))?,
            ),
            _ => return Err(parse_err(line, "bad mmd bandwidth base".into())),
        };
        let mmd_cfg = MmdConfig {
            num_kernels: toks[1]
                .parse()
                .map_err(|_| parse_err(line, "bad num_kernels".into()))?,
            bandwidth_step: toks[2]
                .parse()
                .map_err(|_| parse_err(line, "bad bandwidth_step".into()))?,
            bandwidth_base: base,
            estimator: crate::losses::MmdEstimator::BiasedQuadratic,
        };

        let mut read_stats = |expect: &str| -> Result<NormStats> {
            let (line, head) = next("norm block")?;
            let toks: Vec<&str> = head.split(' ').collect();
            if toks.len() != 3 || toks[0] != "norm" || toks[1] != expect {
                return Err(parse_err(line, format!("expected `norm {expect} <dim>`")));
            }
            let dim: usize = toks[2]
                .parse()
                .map_err(|_| parse_err(line, "bad norm dim".into()))?;
            let (l1, mean_line) = next("norm mean")?;
            let (l2, std_line) = next("norm std")?;
            Ok(NormStats {
                mean: floats(l1, mean_line, dim)?,
                std: floats(l2, std_line, dim)?,
            })
        };
        let src_stats = DatasetStats {
            img: read_stats("src_img")?,
            txt: read_stats("src_txt")?,
        };
        let tgt_stats = DatasetStats {
            img: read_stats("tgt_img")?,
            txt: read_stats("tgt_txt")?,
        };

        let mut read_network = |expect: &str| -> Result<DomainNetwork> {
            let (line, head) = next("domain block")?;
            let toks: Vec<&str> = head.split(' ').collect();
            if toks.len() != 3 || toks[0] != "domain" || toks[1] != expect {
                return Err(parse_err(line, format!("expected `domain {expect}`")));
            }
            let num_classes: usize = toks[2]
                .parse()
                .map_err(|_| parse_err(line, "bad class count".into()))?;
            let mut layers = Vec::with_capacity(7);
            for name in LAYER_NAMES {
                let (line, head) = next("layer block")?;
                let toks: Vec<&str> = head.split(' ').collect();
                if toks.len() != 5 || toks[0] != "layer" || toks[1] != name {
                    return Err(parse_err(line, format!("expected `layer {name}`")));
                }
                let out_dim: usize = toks[2]
                    .parse()
                    .map_err(|_| parse_err(line, "bad out_dim".into()))?;
                let in_dim: usize = toks[3]
                    .parse()
                    .map_err(|_| parse_err(line, "bad in_dim".into()))?;
                let activation = Activation::parse(toks[4])?;
                let (bl, bias_line) = next("bias")?;
                let bias = floats(bl, bias_line, out_dim)?;
                let mut wdata = Vec::with_capacity(out_dim * in_dim);
                for _ in 0..out_dim {
                    let (wl, w_line) = next("weight row")?;
                    wdata.extend(floats(wl, w_line, in_dim)?);
                }
                layers.push(DenseLayer::from_parts(
                    Matrix::from_vec(out_dim, in_dim, wdata)?,
                    bias,
                    activation,
                )?);
            }
            let mut it = layers.into_iter();
            Ok(DomainNetwork {
                img_fc6: it.next().unwrap(),
                img_fc7: it.next().unwrap(),
                txt_fc6: it.next().unwrap(),
                txt_fc7: it.next().unwrap(),
                shared_fc8: it.next().unwrap(),
                shared_fc9: it.next().unwrap(),
                classifier_fc10: it.next().unwrap(),
                num_classes,
            })
        };
        let source = read_network("source")?;
        let target = read_network("target")?;
        let (line, tail) = next("end")?;
        if tail != "end" {
            return Err(parse_err(line, "missing `end` marker".into()));
        }
        Ok(Checkpoint {
            model: DcktModel {
                source,
                target,
                weights,
                mmd_cfg,
            },
            seed,
            src_stats,
            tgt_stats,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::BandwidthBase;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn zero_network(d_img: usize, d_txt: usize, hidden: usize, classes: usize) -> DomainNetwork {
        let mut net = DomainNetwork::new(d_img, d_txt, hidden, classes, &mut rng(0)).unwrap();
        for layer in net.layers_mut() {
            for v in layer.weights_mut().data_mut() {
                *v = 0.0;
            }
        }
        net
    }

    fn small_model(seed: u64, weights: LossWeights) -> DcktModel {
        let mut r = rng(seed);
        DcktModel {
            source: DomainNetwork::new(4, 3, 8, 5, &mut r).unwrap(),
            target: DomainNetwork::new(4, 3, 8, 3, &mut r).unwrap(),
            weights,
            mmd_cfg: MmdConfig {
                bandwidth_base: BandwidthBase::Fixed(1.0),
                ..Default::default()
            },
        }
    }

    fn random_batch(r: &mut ChaCha8Rng, n: usize, d_img: usize, d_txt: usize, classes: usize) -> PairedBatch {
        let img = Matrix::from_vec(n, d_img, (0..n * d_img).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let txt = Matrix::from_vec(n, d_txt, (0..n * d_txt).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let labels = (0..n).map(|_| r.gen_range(0..classes)).collect();
        PairedBatch { img, txt, labels }
    }

    #[test]
    fn zero_network_embeds_uniformly() {
        let net = zero_network(3, 2, 4, 4);
        let rep = net.embed(Media::Image, &[0.5, -0.5, 1.0]).unwrap();
        for &p in rep.probabilities() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_item_is_deterministic() {
        let net = DomainNetwork::new(3, 2, 4, 4, &mut rng(1)).unwrap();
        let a = net.forward_item(Media::Text, &[0.2, -0.7]).unwrap();
        let b = net.forward_item(Media::Text, &[0.2, -0.7]).unwrap();
        assert_eq!(
            a.activation("prob").unwrap(),
            b.activation("prob").unwrap()
        );
    }

    #[test]
    fn probabilities_sum_to_one() {
        let net = DomainNetwork::new(5, 3, 6, 7, &mut rng(2)).unwrap();
        let rep = net.embed(Media::Image, &[1.0, 2.0, -3.0, 0.1, 0.0]).unwrap();
        let sum: f64 = rep.probabilities().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn embed_is_softmax_slice_of_trace() {
        let net = DomainNetwork::new(3, 2, 4, 4, &mut rng(3)).unwrap();
        let feature = [0.4, -0.2, 0.9];
        let trace = net.forward_item(Media::Image, &feature).unwrap();
        let rep = net.embed(Media::Image, &feature).unwrap();
        assert_eq!(trace.activation("prob").unwrap().row(0), rep.probabilities());
    }

    #[test]
    fn perturbing_unused_pathway_leaves_other_media_unchanged() {
        let mut net = DomainNetwork::new(3, 2, 4, 4, &mut rng(4)).unwrap();
        let before = net.embed(Media::Text, &[0.3, 0.3]).unwrap();
        net.img_fc6.weights_mut().data_mut()[0] += 10.0;
        let after = net.embed(Media::Text, &[0.3, 0.3]).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn joint_step_with_zero_weights_is_identity() {
        let zero = LossWeights {
            w_mmd_image: 0.0,
            w_mmd_text: 0.0,
            w_mmd_corr: 0.0,
            w_pair_src: 0.0,
            w_pair_tgt: 0.0,
            w_sem_src: 0.0,
            w_sem_tgt: 0.0,
        };
        let mut model = small_model(5, zero);
        let before = model.clone();
        let mut r = rng(6);
        let bs = random_batch(&mut r, 3, 4, 3, 5);
        let bt = random_batch(&mut r, 3, 4, 3, 3);
        let sgd = SgdConfig::new(0.1, 0.0, 0).unwrap();
        let breakdown = joint_step(&mut model, &bs, &bt, &sgd).unwrap();
        assert_eq!(breakdown.total, 0.0);
        assert_eq!(model, before);
    }

    #[test]
    fn zero_mmd_weights_decouple_source_from_target_batch() {
        let weights = LossWeights {
            w_mmd_image: 0.0,
            w_mmd_text: 0.0,
            w_mmd_corr: 0.0,
            ..Default::default()
        };
        let mut r = rng(7);
        let bs = random_batch(&mut r, 3, 4, 3, 5);
        let bt1 = random_batch(&mut r, 3, 4, 3, 3);
        let bt2 = random_batch(&mut r, 3, 4, 3, 3);
        let sgd = SgdConfig::new(0.05, 0.0, 0).unwrap();
        let mut m1 = small_model(8, weights);
        let mut m2 = small_model(8, weights);
        joint_step(&mut m1, &bs, &bt1, &sgd).unwrap();
        joint_step(&mut m2, &bs, &bt2, &sgd).unwrap();
        assert_eq!(m1.source, m2.source);
    }

    #[test]
    fn joint_step_matches_domain_step_without_coupling() {
        let weights = LossWeights {
            w_mmd_image: 0.0,
            w_mmd_text: 0.0,
            w_mmd_corr: 0.0,
            w_pair_src: 0.0,
            w_pair_tgt: 0.0,
            w_sem_src: 1.0,
            w_sem_tgt: 1.0,
        };
        let mut joint = small_model(9, weights);
        let mut solo = joint.source.clone();
        let mut r = rng(10);
        let bs = random_batch(&mut r, 4, 4, 3, 5);
        let bt = random_batch(&mut r, 4, 4, 3, 3);
        let sgd = SgdConfig::new(0.01, 0.0005, 0).unwrap();
        joint_step(&mut joint, &bs, &bt, &sgd).unwrap();
        domain_step(&mut solo, &bs, 1.0, 0.0, &sgd).unwrap();
        assert_eq!(joint.source, solo);
    }

    #[test]
    fn source_and_target_storage_is_independent() {
        let mut model = small_model(11, LossWeights::default());
        let target_before = model.target.clone();
        for layer in model.source.layers_mut() {
            for v in layer.weights_mut().data_mut() {
                *v += 1.0;
            }
        }
        assert_eq!(model.target, target_before);
    }

    #[test]
    fn joint_step_loss_decreases_on_fixed_batch() {
        let mut model = small_model(12, LossWeights::default());
        let mut r = rng(13);
        let bs = random_batch(&mut r, 8, 4, 3, 5);
        let bt = random_batch(&mut r, 8, 4, 3, 3);
        let sgd = SgdConfig::new(0.01, 0.0, 0).unwrap();
        let mut prev = f64::INFINITY;
        let mut decreasing = 0;
        let steps = 200;
        for _ in 0..steps {
            let b = joint_step(&mut model, &bs, &bt, &sgd).unwrap();
            if b.total <= prev {
                decreasing += 1;
            }
            prev = b.total;
        }
        assert!(
            decreasing as f64 >= 0.95 * steps as f64,
            "only {decreasing}/{steps} non-increasing steps"
        );
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        // End-to-end check through the full objective, hidden width 8,
        // batch 2, fixed MMD bandwidth.
        let mut failures = Vec::new();
        for seed in 0..20u64 {
            let model = small_model(seed, LossWeights::default());
            let mut r = rng(seed.wrapping_add(1000));
            let bs = random_batch(&mut r, 2, 4, 3, 5);
            let bt = random_batch(&mut r, 2, 4, 3, 3);
            let (_, grads) = joint_losses(&model, &bs, &bt).unwrap();
            let h = 1e-5;
            let total_at = |m: &DcktModel| joint_losses(m, &bs, &bt).unwrap().0.total;
            for (di, domain_grads) in [&grads.source, &grads.target].iter().enumerate() {
                for li in 0..7 {
                    let flat = domain_grads.layers[li].weights.data().len();
                    for idx in (0..flat).step_by(7) {
                        let mut mp = model.clone();
                        let mut mm = model.clone();
                        {
                            let net = if di == 0 { &mut mp.source } else { &mut mp.target };
                            net.layers_mut()[li].weights_mut().data_mut()[idx] += h;
                        }
                        {
                            let net = if di == 0 { &mut mm.source } else { &mut mm.target };
                            net.layers_mut()[li].weights_mut().data_mut()[idx] -= h;
                        }
                        let fd = (total_at(&mp) - total_at(&mm)) / (2.0 * h);
                        let a = domain_grads.layers[li].weights.data()[idx];
                        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                        if rel >= 1e-3 {
                            failures.push((seed, di, li, idx, rel));
                        }
                    }
                }
            }
        }
        assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
    }

    #[test]
    fn pretrain_rejects_zero_epochs() {
        let mut net = DomainNetwork::new(2, 2, 4, 2, &mut rng(14)).unwrap();
        let ds = crate::data::CrossMediaDataset::new(
            vec![
                crate::data::CrossMediaPair {
                    id: "a".into(),
                    img: vec![0.0, 1.0],
                    txt: vec![1.0, 0.0],
                    label: 0,
                },
                crate::data::CrossMediaPair {
                    id: "b".into(),
                    img: vec![1.0, 0.0],
                    txt: vec![0.0, 1.0],
                    label: 1,
                },
            ],
            2,
            2,
            2,
        )
        .unwrap();
        let sgd = SgdConfig::new(0.01, 0.0, 0).unwrap();
        assert!(pretrain_domain(
            &mut net,
            &ds,
            0,
            &LossWeights::default(),
            Domain::Target,
            &sgd,
            8
        )
        .is_err());
    }

    #[test]
    fn pretrain_ignores_mmd_weight_fields() {
        let mk = |w_mmd: f64| {
            let mut net = DomainNetwork::new(2, 2, 4, 2, &mut rng(15)).unwrap();
            let ds = crate::data::CrossMediaDataset::new(
                vec![
                    crate::data::CrossMediaPair {
                        id: "a".into(),
                        img: vec![0.0, 1.0],
                        txt: vec![1.0, 0.0],
                        label: 0,
                    },
                    crate::data::CrossMediaPair {
                        id: "b".into(),
                        img: vec![1.0, 0.0],
                        txt: vec![0.0, 1.0],
                        label: 1,
                    },
                ],
                2,
                2,
                2,
            )
            .unwrap();
            let weights = LossWeights {
                w_mmd_image: w_mmd,
                w_mmd_text: w_mmd,
                w_mmd_corr: w_mmd,
                ..Default::default()
            };
            let sgd = SgdConfig::new(0.01, 0.0, 77).unwrap();
            pretrain_domain(&mut net, &ds, 3, &weights, Domain::Target, &sgd, 8).unwrap();
            net
        };
        assert_eq!(mk(0.0), mk(5.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = small_model(16, LossWeights::default());
        let stats = |d: usize| NormStats {
            mean: (0..d).map(|i| i as f64 * 0.1 - 0.3).collect(),
            std: (0..d).map(|i| 1.0 + i as f64 * 0.01).collect(),
        };
        let cp = Checkpoint {
            model,
            seed: 42,
            src_stats: DatasetStats {
                img: stats(4),
                txt: stats(3),
            },
            tgt_stats: DatasetStats {
                img: stats(4),
                txt: stats(3),
            },
        };
        let text = cp.to_text();
        let back = Checkpoint::from_text(&text).unwrap();
        assert_eq!(cp, back);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let model = small_model(17, LossWeights::default());
        let stats = DatasetStats {
            img: NormStats {
                mean: vec![0.0; 4],
                std: vec![1.0; 4],
            },
            txt: NormStats {
                mean: vec![0.0; 3],
                std: vec![1.0; 3],
            },
        };
        let cp = Checkpoint {
            model,
            seed: 1,
            src_stats: stats.clone(),
            tgt_stats: stats,
        };
        let mut text = cp.to_text();
        text.truncate(text.len() / 2);
        assert!(Checkpoint::from_text(&text).is_err());
    }
}
