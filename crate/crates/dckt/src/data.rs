//! Dataset schema, TSV ingestion, deterministic stratified splits,
//! z-score normalization, and a synthetic cross-media generator with
//! controllable domain consistency and label-space overlap.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One co-occurring (image-feature, text-feature, label) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossMediaPair {
    pub id: String,
    pub img: Vec<f64>,
    pub txt: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossMediaDataset {
    pub pairs: Vec<CrossMediaPair>,
    pub num_classes: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub class_names: Vec<String>,
}

/// Batch of aligned rows ready for the network.
#[derive(Debug, Clone)]
pub struct PairedBatch {
    pub img: Matrix,
    pub txt: Matrix,
    pub labels: Vec<usize>,
}

impl CrossMediaDataset {
    pub fn new(
        pairs: Vec<CrossMediaPair>,
        num_classes: usize,
        d_img: usize,
        d_txt: usize,
    ) -> Result<Self> {
        let class_names = (0..num_classes).map(|c| format!("c{c}")).collect();
        let ds = CrossMediaDataset {
            pairs,
            num_classes,
            d_img,
            d_txt,
            class_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Empty("dataset".into()));
        }
        let mut ids = HashSet::new();
        for p in &self.pairs {
            if p.img.len() != self.d_img || p.txt.len() != self.d_txt {
                return Err(Error::DimensionMismatch(format!(
                    "pair {} has dims ({}, {}), dataset declares ({}, {})",
                    p.id,
                    p.img.len(),
                    p.txt.len(),
                    self.d_img,
                    self.d_txt
                )));
            }
            if p.label >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: p.label,
                    num_classes: self.num_classes,
                });
            }
            if !ids.insert(p.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate id {}", p.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Builds an aligned batch from pair indices.
    pub fn batch(&self, indices: &[usize]) -> PairedBatch {
        let mut img = Matrix::zeros(indices.len(), self.d_img);
        let mut txt = Matrix::zeros(indices.len(), self.d_txt);
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            img.row_mut(r).copy_from_slice(&self.pairs[i].img);
            txt.row_mut(r).copy_from_slice(&self.pairs[i].txt);
            labels.push(self.pairs[i].label);
        }
        PairedBatch { img, txt, labels }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let pairs = indices.iter().map(|&i| self.pairs[i].clone()).collect();
        CrossMediaDataset::new(pairs, self.num_classes, self.d_img, self.d_txt)
    }

    /// Drops the given classes and remaps the remaining labels to a
    /// contiguous range. Used by the no-overlap baseline.
    pub fn without_classes(&self, drop: &HashSet<usize>) -> Result<Self> {
        let kept: Vec<usize> = (0..self.num_classes).filter(|c| !drop.contains(c)).collect();
        let remap: Vec<Option<usize>> = (0..self.num_classes)
            .map(|c| kept.iter().position(|&k| k == c))
            .collect();
        let pairs: Vec<CrossMediaPair> = self
            .pairs
            .iter()
            .filter_map(|p| {
                remap[p.label].map(|new_label| CrossMediaPair {
                    label: new_label,
                    ..p.clone()
                })
            })
            .collect();
        CrossMediaDataset::new(pairs, kept.len(), self.d_img, self.d_txt)
    }
}

fn fmt_floats(out: &mut String, vals: &[f64]) {
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        // Display for f64 is shortest-round-trip; parse recovers the bits.
        write!(out, "{v}").unwrap();
    }
}

/// Serializes a dataset in the TSV schema:
/// header `#dims<TAB>d_i<TAB>d_t<TAB>num_classes`, then one
/// `id<TAB>label<TAB>img-csv<TAB>txt-csv` line per pair.
pub fn dataset_to_tsv(ds: &CrossMediaDataset) -> String {
    let mut out = String::new();
    writeln!(out, "#dims\t{}\t{}\t{}", ds.d_img, ds.d_txt, ds.num_classes).unwrap();
    for p in &ds.pairs {
        write!(out, "{}\t{}\t", p.id, p.label).unwrap();
        fmt_floats(&mut out, &p.img);
        out.push('\t');
        fmt_floats(&mut out, &p.txt);
        out.push('\n');
    }
    out
}

pub fn save_dataset(ds: &CrossMediaDataset, path: &Path) -> Result<()> {
    crate::atomic_write(path, dataset_to_tsv(ds).as_bytes())
}

fn parse_floats(field: &str, line: usize, expected: usize, what: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = field
        .split(',')
        .map(|s| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("non-numeric {what} value `{s}`"),
            })
        })
        .collect::<Result<_>>()?;
    if vals.len() != expected {
        return Err(Error::Parse {
            line,
            msg: format!("{what} field has {} values, expected {expected}", vals.len()),
        });
    }
    Ok(vals)
}

pub fn dataset_from_tsv(text: &str) -> Result<CrossMediaDataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let parts: Vec<&str> = header.split('\t').collect();
    if parts.len() != 4 || parts[0] != "#dims" {
        return Err(Error::Parse {
            line: 1,
            msg: "header must be `#dims<TAB>d_i<TAB>d_t<TAB>num_classes`".into(),
        });
    }
    let parse_dim = |s: &str, what: &str| {
        s.parse::<usize>().map_err(|_| Error::Parse {
            line: 1,
            msg: format!("bad {what} `{s}`"),
        })
    };
    let d_img = parse_dim(parts[1], "d_i")?;
    let d_txt = parse_dim(parts[2], "d_t")?;
    let num_classes = parse_dim(parts[3], "num_classes")?;
    let mut pairs = Vec::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let label: usize = fields[1].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad label `{}`", fields[1]),
        })?;
        if label >= num_classes {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("label {label} out of range for {num_classes} classes"),
            });
        }
        pairs.push(CrossMediaPair {
            id: fields[0].to_string(),
            label,
            img: parse_floats(fields[2], lineno, d_img, "image")?,
            txt: parse_floats(fields[3], lineno, d_txt, "text")?,
        });
    }
    CrossMediaDataset::new(pairs, num_classes, d_img, d_txt)
}

pub fn load_dataset(path: &Path) -> Result<CrossMediaDataset> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    dataset_from_tsv(&text)
}

/// Stratified, disjoint, exhaustive three-way split, deterministic per seed.
pub fn split(
    ds: &CrossMediaDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Option<CrossMediaDataset>, Option<CrossMediaDataset>, Option<CrossMediaDataset>)> {
    let (ft, fe, fv) = fractions;
    if !(ft >= 0.0 && fe >= 0.0 && fv >= 0.0) || (ft + fe + fv - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be non-negative and sum to 1, got ({ft}, {fe}, {fv})"
        )));
    }
    let fracs = [ft, fe, fv];
    let active = fracs.iter().filter(|&&f| f > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class in 0..ds.num_classes {
        let mut members: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.pairs[i].label == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < active {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} members but the split has {active} parts",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n = members.len();
        // largest-remainder allocation, then force every active part >= 1
        let mut counts = [0usize; 3];
        let mut rema: Vec<(usize, f64)> = Vec::new();
        let mut assigned = 0;
        for (k, &f) in fracs.iter().enumerate() {
            let exact = f * n as f64;
            counts[k] = exact.floor() as usize;
            assigned += counts[k];
            rema.push((k, exact - exact.floor()));
        }
        rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (k, _) in rema.iter().cycle().take(n - assigned) {
            counts[*k] += 1;
        }
        for k in 0..3 {
            if fracs[k] > 0.0 && counts[k] == 0 {
                let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
                counts[donor] -= 1;
                counts[k] += 1;
            }
        }
        let mut offset = 0;
        for k in 0..3 {
            parts[k].extend_from_slice(&members[offset..offset + counts[k]]);
            offset += counts[k];
        }
    }
    let build = |idx: &Vec<usize>, frac: f64| -> Result<Option<CrossMediaDataset>> {
        if frac == 0.0 {
            Ok(None)
        } else {
            Ok(Some(ds.subset(idx)?))
        }
    };
    Ok((build(&parts[0], ft)?, build(&parts[1], fe)?, build(&parts[2], fv)?))
}

/// Per-dimension mean and standard deviation for one feature block.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub img: NormStats,
    pub txt: NormStats,
}

fn compute_stats(rows: impl Iterator<Item = Vec<f64>> + Clone, dim: usize, n: usize) -> NormStats {
    let mut mean = vec![0.0; dim];
    for row in rows.clone() {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; dim];
    for row in rows {
        for ((s, v), m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .iter()
        .map(|&s| {
            let sd = (s / n as f64).sqrt();
            // zero-variance dimensions are clamped, not divided by
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    NormStats { mean, std }
}

/// Z-scores every feature dimension. With `stats` omitted they are computed
/// from the input (training split computes, other splits consume).
pub fn normalize(
    ds: &CrossMediaDataset,
    stats: Option<&DatasetStats>,
) -> Result<(CrossMediaDataset, DatasetStats)> {
    let stats = match stats {
        Some(s) => {
            if s.img.mean.len() != ds.d_img || s.txt.mean.len() != ds.d_txt {
                return Err(Error::DimensionMismatch(format!(
                    "stats dims ({}, {}) vs dataset ({}, {})",
                    s.img.mean.len(),
                    s.txt.mean.len(),
                    ds.d_img,
                    ds.d_txt
                )));
            }
            s.clone()
        }
        None => DatasetStats {
            img: compute_stats(ds.pairs.iter().map(|p| p.img.clone()), ds.d_img, ds.len()),
            txt: compute_stats(ds.pairs.iter().map(|p| p.txt.clone()), ds.d_txt, ds.len()),
        },
    };
    let apply = |vals: &[f64], s: &NormStats| -> Vec<f64> {
        vals.iter()
            .zip(s.mean.iter().zip(s.std.iter()))
            .map(|(v, (m, sd))| (v - m) / sd)
            .collect()
    };
    let pairs = ds
        .pairs
        .iter()
        .map(|p| CrossMediaPair {
            id: p.id.clone(),
            label: p.label,
            img: apply(&p.img, &stats.img),
            txt: apply(&p.txt, &stats.txt),
        })
        .collect();
    let out = CrossMediaDataset::new(pairs, ds.num_classes, ds.d_img, ds.d_txt)?;
    Ok((out, stats))
}

/// Knobs of the synthetic cross-media generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_src_classes: usize,
    pub num_tgt_classes: usize,
    /// Target classes that reuse source prototypes (shifted by domain_shift).
    pub overlap_classes: usize,
    pub pairs_per_class: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub cluster_separation: f64,
    pub domain_shift: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_src_classes: 10,
            num_tgt_classes: 4,
            overlap_classes: 2,
            pairs_per_class: 50,
            d_img: 64,
            d_txt: 32,
            cluster_separation: 4.0,
            domain_shift: 1.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.overlap_classes > self.num_src_classes.min(self.num_tgt_classes) {
            return Err(Error::InvalidArgument(format!(
                "overlap_classes {} exceeds min({}, {})",
                self.overlap_classes, self.num_src_classes, self.num_tgt_classes
            )));
        }
        if self.num_src_classes == 0
            || self.num_tgt_classes == 0
            || self.pairs_per_class == 0
            || self.d_img == 0
            || self.d_txt == 0
        {
            return Err(Error::InvalidArgument(
                "class counts, pairs_per_class, and dims must be >= 1".into(),
            ));
        }
        if !(self.cluster_separation > 0.0) || !(self.noise_sigma > 0.0) || !(self.domain_shift >= 0.0)
        {
            return Err(Error::InvalidArgument(
                "cluster_separation and noise_sigma must be > 0, domain_shift >= 0".into(),
            ));
        }
        Ok(())
    }
}

const LATENT_DIM: usize = 16;

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one value per call keeps the draw order easy to reason about.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * standard_normal(rng)).collect()
}

/// Latent-prototype generator. Each class has a latent prototype; paired
/// image/text features are fixed random linear maps of the shared prototype
/// plus Gaussian noise. Overlap classes reuse source prototypes in the
/// target domain, shifted by `domain_shift` along a fixed offset direction.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(CrossMediaDataset, CrossMediaDataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let map_scale = 1.0 / (LATENT_DIM as f64).sqrt();
    let map_img: Vec<Vec<f64>> = (0..spec.d_img)
        .map(|_| normal_vec(&mut rng, LATENT_DIM, map_scale))
        .collect();
    let map_txt: Vec<Vec<f64>> = (0..spec.d_txt)
        .map(|_| normal_vec(&mut rng, LATENT_DIM, map_scale))
        .collect();
    let offset_img = normal_vec(&mut rng, spec.d_img, 1.0);

    let src_protos: Vec<Vec<f64>> = (0..spec.num_src_classes)
        .map(|_| normal_vec(&mut rng, LATENT_DIM, spec.cluster_separation))
        .collect();
    let tgt_protos: Vec<Vec<f64>> = (0..spec.num_tgt_classes)
        .map(|c| {
            if c < spec.overlap_classes {
                src_protos[c].clone()
            } else {
                normal_vec(&mut rng, LATENT_DIM, spec.cluster_separation)
            }
        })
        .collect();

    let project = |map: &[Vec<f64>], proto: &[f64]| -> Vec<f64> {
        map.iter()
            .map(|row| row.iter().zip(proto).map(|(a, b)| a * b).sum())
            .collect()
    };

    let gen_domain = |tag: &str,
                          protos: &[Vec<f64>],
                          shifted: bool,
                          rng: &mut ChaCha8Rng|
     -> Result<CrossMediaDataset> {
        let mut pairs = Vec::with_capacity(protos.len() * spec.pairs_per_class);
        for (class, proto) in protos.iter().enumerate() {
            let img_base = project(&map_img, proto);
            let txt_base = project(&map_txt, proto);
            for k in 0..spec.pairs_per_class {
                let mut img: Vec<f64> = img_base
                    .iter()
                    .map(|v| v + spec.noise_sigma * standard_normal(rng))
                    .collect();
                if shifted {
                    for (v, o) in img.iter_mut().zip(offset_img.iter()) {
                        *v += spec.domain_shift * o;
                    }
                }
                let txt: Vec<f64> = txt_base
                    .iter()
                    .map(|v| v + spec.noise_sigma * standard_normal(rng))
                    .collect();
                pairs.push(CrossMediaPair {
                    id: format!("{tag}-c{class}-{k}"),
                    img,
                    txt,
                    label: class,
                });
            }
        }
        CrossMediaDataset::new(pairs, protos.len(), spec.d_img, spec.d_txt)
    };

    let src = gen_domain("src", &src_protos, false, &mut rng)?;
    let tgt = gen_domain("tgt", &tgt_protos, true, &mut rng)?;
    Ok((src, tgt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> CrossMediaDataset {
        CrossMediaDataset::new(
            vec![
                CrossMediaPair {
                    id: "a".into(),
                    img: vec![1.0, 2.0],
                    txt: vec![0.5],
                    label: 0,
                },
                CrossMediaPair {
                    id: "b".into(),
                    img: vec![-1.0, 0.25],
                    txt: vec![1.5],
                    label: 1,
                },
            ],
            2,
            2,
            1,
        )
        .unwrap()
    }

    #[test]
    fn tsv_round_trip_is_exact() {
        let ds = tiny_dataset();
        let text = dataset_to_tsv(&ds);
        let back = dataset_from_tsv(&text).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn two_row_file_parses() {
        let text = "#dims\t2\t1\t2\na\t0\t1,2\t0.5\nb\t1\t3,4\t1.5\n";
        let ds = dataset_from_tsv(text).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.pairs[1].img, vec![3.0, 4.0]);
    }

    #[test]
    fn short_image_field_reports_line() {
        let text = "#dims\t2\t1\t2\na\t0\t1\t0.5\n";
        let err = dataset_from_tsv(text).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn out_of_range_label_reports_line() {
        let text = "#dims\t1\t1\t2\na\t5\t1\t0.5\n";
        let err = dataset_from_tsv(text).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    fn class_dataset(num_classes: usize, per_class: usize) -> CrossMediaDataset {
        let pairs = (0..num_classes)
            .flat_map(|c| {
                (0..per_class).map(move |k| CrossMediaPair {
                    id: format!("p{c}-{k}"),
                    img: vec![c as f64],
                    txt: vec![k as f64],
                    label: c,
                })
            })
            .collect();
        CrossMediaDataset::new(pairs, num_classes, 1, 1).unwrap()
    }

    #[test]
    fn split_is_stratified_and_exhaustive() {
        let ds = class_dataset(10, 10);
        let (tr, te, va) = split(&ds, (0.8, 0.1, 0.1), 7).unwrap();
        let (tr, te, va) = (tr.unwrap(), te.unwrap(), va.unwrap());
        assert_eq!(tr.len(), 80);
        assert_eq!(te.len(), 10);
        assert_eq!(va.len(), 10);
        for c in 0..10 {
            assert_eq!(tr.pairs.iter().filter(|p| p.label == c).count(), 8);
            assert_eq!(te.pairs.iter().filter(|p| p.label == c).count(), 1);
        }
        let mut ids: Vec<&str> = tr
            .pairs
            .iter()
            .chain(te.pairs.iter())
            .chain(va.pairs.iter())
            .map(|p| p.id.as_str())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn split_all_train_allows_empty_rest() {
        let ds = class_dataset(2, 3);
        let (tr, te, va) = split(&ds, (1.0, 0.0, 0.0), 1).unwrap();
        assert_eq!(tr.unwrap().len(), 6);
        assert!(te.is_none());
        assert!(va.is_none());
    }

    #[test]
    fn split_is_deterministic() {
        let ds = class_dataset(4, 8);
        let a = split(&ds, (0.5, 0.25, 0.25), 9).unwrap();
        let b = split(&ds, (0.5, 0.25, 0.25), 9).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn split_rejects_too_small_class() {
        let ds = class_dataset(2, 2);
        assert!(split(&ds, (0.4, 0.3, 0.3), 1).is_err());
    }

    #[test]
    fn normalize_is_idempotent_on_standardized_data() {
        let ds = class_dataset(2, 10);
        let (once, _) = normalize(&ds, None).unwrap();
        let (twice, _) = normalize(&once, None).unwrap();
        for (a, b) in once.pairs.iter().zip(twice.pairs.iter()) {
            for (x, y) in a.img.iter().zip(b.img.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_dimension_maps_to_zero() {
        let ds = CrossMediaDataset::new(
            vec![
                CrossMediaPair {
                    id: "a".into(),
                    img: vec![3.0],
                    txt: vec![1.0],
                    label: 0,
                },
                CrossMediaPair {
                    id: "b".into(),
                    img: vec![3.0],
                    txt: vec![2.0],
                    label: 0,
                },
            ],
            1,
            1,
            1,
        )
        .unwrap();
        let (out, _) = normalize(&ds, None).unwrap();
        assert_eq!(out.pairs[0].img[0], 0.0);
        assert_eq!(out.pairs[1].img[0], 0.0);
    }

    #[test]
    fn external_stats_are_used_verbatim() {
        let ds = tiny_dataset();
        let stats = DatasetStats {
            img: NormStats {
                mean: vec![1.0, 0.0],
                std: vec![2.0, 1.0],
            },
            txt: NormStats {
                mean: vec![0.0],
                std: vec![1.0],
            },
        };
        let (out, returned) = normalize(&ds, Some(&stats)).unwrap();
        assert_eq!(returned, stats);
        assert_eq!(out.pairs[0].img[0], 0.0); // (1 - 1) / 2
        assert_eq!(out.pairs[1].img[0], -1.0); // (-1 - 1) / 2
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = SyntheticSpec {
            pairs_per_class: 5,
            ..Default::default()
        };
        let (s1, t1) = generate_synthetic(&spec).unwrap();
        let (s2, t2) = generate_synthetic(&spec).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn synthetic_rejects_excess_overlap() {
        let spec = SyntheticSpec {
            overlap_classes: 5,
            num_tgt_classes: 4,
            ..Default::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn tiny_noise_collapses_classes_to_points() {
        let spec = SyntheticSpec {
            pairs_per_class: 4,
            noise_sigma: 1e-9,
            num_src_classes: 3,
            num_tgt_classes: 2,
            overlap_classes: 1,
            ..Default::default()
        };
        let (src, _) = generate_synthetic(&spec).unwrap();
        for c in 0..3 {
            let members: Vec<&CrossMediaPair> =
                src.pairs.iter().filter(|p| p.label == c).collect();
            for m in &members[1..] {
                for (a, b) in m.img.iter().zip(members[0].img.iter()) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    /// Nearest-centroid probe: the default spec must be linearly separable
    /// per domain on image features.
    #[test]
    fn default_spec_image_features_are_separable() {
        let spec = SyntheticSpec::default();
        let (src, _) = generate_synthetic(&spec).unwrap();
        let (train, test, _) = split(&src, (0.8, 0.2, 0.0), 3).unwrap();
        let (train, test) = (train.unwrap(), test.unwrap());
        let mut centroids = vec![vec![0.0; src.d_img]; src.num_classes];
        let mut counts = vec![0usize; src.num_classes];
        for p in &train.pairs {
            counts[p.label] += 1;
            for (c, v) in centroids[p.label].iter_mut().zip(p.img.iter()) {
                *c += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts.iter()) {
            for v in c.iter_mut() {
                *v /= *n as f64;
            }
        }
        let mut correct = 0;
        for p in &test.pairs {
            let best = (0..src.num_classes)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a]
                        .iter()
                        .zip(&p.img)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    let db: f64 = centroids[b]
                        .iter()
                        .zip(&p.img)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == p.label {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.9, "probe accuracy {acc}");
    }

    #[test]
    fn without_classes_remaps_labels() {
        let ds = class_dataset(4, 2);
        let drop: HashSet<usize> = [0, 2].into_iter().collect();
        let out = ds.without_classes(&drop).unwrap();
        assert_eq!(out.num_classes, 2);
        assert_eq!(out.len(), 4);
        assert!(out.pairs.iter().all(|p| p.label < 2));
    }
}
