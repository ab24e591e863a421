//! Cross-media retrieval evaluation: cosine-distance ranking over the
//! common representation, average precision per query, and bidirectional
//! mean average precision.

use std::fmt::Write as _;

use crate::data::CrossMediaDataset;
use crate::error::{Error, Result};
use crate::model::{Domain, DcktModel, Media};

/// Cosine distance `1 - cos(a, b)`. Errors on zero-norm inputs.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine_distance: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument(
            "cosine_distance: zero-norm vector".into(),
        ));
    }
    Ok(1.0 - dot / (na.sqrt() * nb.sqrt()))
}

/// Ranks all gallery items by ascending cosine distance to the query.
/// Ties break by ascending gallery index, so the order is deterministic.
pub fn rank_gallery(query: &[f64], gallery: &[Vec<f64>]) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::Empty("gallery".into()));
    }
    let mut scored: Vec<(usize, f64)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| cosine_distance(query, g).map(|d| (i, d)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// Average precision of a ranked relevance list:
/// `(1/R) * sum_k (R_k / k) * rel_k` where `R_k` counts relevant items in
/// the top `k`. A query with no relevant items scores 0.
pub fn average_precision(relevant: &[bool], total_relevant: usize) -> Result<f64> {
    let actual = relevant.iter().filter(|&&r| r).count();
    if actual != total_relevant {
        return Err(Error::InvalidArgument(format!(
            "average_precision: list holds {actual} relevant items, caller said {total_relevant}"
        )));
    }
    if total_relevant == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / total_relevant as f64)
}

/// MAP in both retrieval directions plus their mean, with per-query APs.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub map_img_to_txt: f64,
    pub map_txt_to_img: f64,
    pub map_average: f64,
    pub ap_img_to_txt: Vec<f64>,
    pub ap_txt_to_img: Vec<f64>,
}

impl RetrievalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "map_img_to_txt = {}", self.map_img_to_txt).unwrap();
        writeln!(out, "map_txt_to_img = {}", self.map_txt_to_img).unwrap();
        writeln!(out, "map_average = {}", self.map_average).unwrap();
        writeln!(out, "num_queries = {}", self.ap_img_to_txt.len()).unwrap();
        out
    }
}

/// MAP of one retrieval direction given query/gallery embeddings and labels.
/// Every gallery item sharing the query's label is relevant.
pub fn direction_map(
    queries: &[Vec<f64>],
    query_labels: &[usize],
    gallery: &[Vec<f64>],
    gallery_labels: &[usize],
) -> Result<Vec<f64>> {
    if queries.len() != query_labels.len() || gallery.len() != gallery_labels.len() {
        return Err(Error::DimensionMismatch(
            "direction_map: labels do not match embeddings".into(),
        ));
    }
    let mut aps = Vec::with_capacity(queries.len());
    for (q, &label) in queries.iter().zip(query_labels) {
        let order = rank_gallery(q, gallery)?;
        let relevant: Vec<bool> = order.iter().map(|&i| gallery_labels[i] == label).collect();
        let total = relevant.iter().filter(|&&r| r).count();
        aps.push(average_precision(&relevant, total)?);
    }
    Ok(aps)
}

fn mean(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Evaluates one domain network on a paired test set: every image queries
/// all texts and vice versa, matched by shared label.
pub fn evaluate(model: &DcktModel, test: &CrossMediaDataset, domain: Domain) -> Result<RetrievalReport> {
    if test.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    let net = match domain {
        Domain::Source => &model.source,
        Domain::Target => &model.target,
    };
    let indices: Vec<usize> = (0..test.len()).collect();
    let batch = test.batch(&indices);
    let img = net.embed_batch(Media::Image, &batch.img)?;
    let txt = net.embed_batch(Media::Text, &batch.txt)?;
    let ap_img_to_txt = direction_map(&img, &batch.labels, &txt, &batch.labels)?;
    let ap_txt_to_img = direction_map(&txt, &batch.labels, &img, &batch.labels)?;
    let map_img_to_txt = mean(&ap_img_to_txt);
    let map_txt_to_img = mean(&ap_txt_to_img);
    Ok(RetrievalReport {
        map_img_to_txt,
        map_txt_to_img,
        map_average: 0.5 * (map_img_to_txt + map_txt_to_img),
        ap_img_to_txt,
        ap_txt_to_img,
    })
}

/// Embeddings for both media of a dataset under one domain network;
/// useful when callers need raw APs without the report wrapper.
pub fn embed_dataset(
    model: &DcktModel,
    data: &CrossMediaDataset,
    domain: Domain,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>)> {
    let net = match domain {
        Domain::Source => &model.source,
        Domain::Target => &model.target,
    };
    let indices: Vec<usize> = (0..data.len()).collect();
    let batch = data.batch(&indices);
    let img = net.embed_batch(Media::Image, &batch.img)?;
    let txt = net.embed_batch(Media::Text, &batch.txt)?;
    Ok((img, txt, batch.labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_distance_landmarks() {
        assert!(cosine_distance(&[1.0, 0.0], &[2.0, 0.0]).unwrap().abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_distance_rejects_zero_vectors() {
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_distance(&[1.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn cosine_distance_is_scale_invariant() {
        let a = [0.3, -0.7, 1.1];
        let b = [2.0, 0.4, -0.5];
        let scaled: Vec<f64> = b.iter().map(|v| v * 37.5).collect();
        let d1 = cosine_distance(&a, &b).unwrap();
        let d2 = cosine_distance(&a, &scaled).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn rank_gallery_breaks_ties_by_index() {
        let q = vec![1.0, 0.0];
        let gallery = vec![
            vec![0.0, 1.0],
            vec![2.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 5.0],
        ];
        let order = rank_gallery(&q, &gallery).unwrap();
        assert_eq!(order, vec![1, 2, 0, 3]);
    }

    #[test]
    fn average_precision_worked_example() {
        // [T, F, T, F] with R = 2: (1/1 + 2/3) / 2 = 5/6.
        let ap = average_precision(&[true, false, true, false], 2).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn average_precision_edge_cases() {
        assert_eq!(average_precision(&[false, false], 0).unwrap(), 0.0);
        assert_eq!(average_precision(&[true, true], 2).unwrap(), 1.0);
        assert!(average_precision(&[true, false], 2).is_err());
    }

    /// Brute-force AP oracle: precision-at-k summed over relevant ranks.
    fn ap_oracle(relevant: &[bool]) -> f64 {
        let total = relevant.iter().filter(|&&r| r).count();
        if total == 0 {
            return 0.0;
        }
        let mut sum = 0.0;
        for k in 1..=relevant.len() {
            if relevant[k - 1] {
                let topk = relevant[..k].iter().filter(|&&r| r).count();
                sum += topk as f64 / k as f64;
            }
        }
        sum / total as f64
    }

    #[test]
    fn average_precision_matches_oracle_on_random_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let relevant: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let total = relevant.iter().filter(|&&r| r).count();
            let got = average_precision(&relevant, total).unwrap();
            let want = ap_oracle(&relevant);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn direction_map_perfect_separation_scores_one() {
        // Orthogonal one-hot embeddings: same-class items rank first.
        let queries = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let gallery = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
        let aps = direction_map(&queries, &[0, 1], &gallery, &[0, 1]).unwrap();
        assert_eq!(aps, vec![1.0, 1.0]);
    }
}
