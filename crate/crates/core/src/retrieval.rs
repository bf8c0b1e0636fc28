//! Cross-modal retrieval by cosine similarity and mean average precision.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{format_real, gemm, DenseMatrix};
use crate::net::{embed, ModelParams};
use crate::synth::Dataset;

fn unit_rows(m: &DenseMatrix, what: &str) -> DenseMatrix {
    let mut out = m.clone();
    let mut zero_rows = 0;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else {
            zero_rows += 1;
        }
    }
    if zero_rows > 0 {
        log::warn!("{zero_rows} zero-norm {what} rows; their similarity is 0 to everything");
    }
    out
}

/// Ranks the gallery for every query by descending cosine similarity, ties
/// going to the lower gallery index.
pub fn cosine_rank(queries: &DenseMatrix, gallery: &DenseMatrix) -> Result<Vec<Vec<usize>>> {
    if queries.cols() != gallery.cols() {
        return Err(Error::Dimension(format!(
            "query width {} differs from gallery width {}",
            queries.cols(),
            gallery.cols()
        )));
    }
    let q = unit_rows(queries, "query");
    let g = unit_rows(gallery, "gallery");
    let mut sim = DenseMatrix::zeros(q.rows(), g.rows());
    gemm(1.0, &q, false, &g, true, 0.0, &mut sim);
    Ok((0..q.rows())
        .map(|r| {
            let s = sim.row(r);
            let mut idx: Vec<usize> = (0..g.rows()).collect();
            idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            idx
        })
        .collect())
}

/// Full-gallery AP of one ranking, or `None` when nothing is relevant.
pub fn average_precision(ranking: &[usize], query_label: usize, gallery_labels: &[usize]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &g) in ranking.iter().enumerate() {
        if gallery_labels[g] == query_label {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

fn per_query_ap(rankings: &[Vec<usize>], query_labels: &[usize], gallery_labels: &[usize]) -> Vec<Option<f64>> {
    rankings
        .iter()
        .zip(query_labels)
        .map(|(r, &l)| average_precision(r, l, gallery_labels))
        .collect()
}

fn mean_defined(aps: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    let skipped = aps.len() - defined.len();
    if skipped > 0 {
        log::warn!("{skipped} queries have no relevant gallery item and are excluded from MAP");
    }
    if defined.is_empty() {
        return 0.0;
    }
    defined.iter().sum::<f64>() / defined.len() as f64
}

/// Mean of per-query AP over queries that have at least one relevant item.
pub fn mean_average_precision(rankings: &[Vec<usize>], query_labels: &[usize], gallery_labels: &[usize]) -> Result<f64> {
    if rankings.len() != query_labels.len() {
        return Err(Error::Dimension(format!(
            "{} rankings for {} query labels",
            rankings.len(),
            query_labels.len()
        )));
    }
    if rankings.iter().any(|r| r.iter().any(|&g| g >= gallery_labels.len())) {
        return Err(Error::Argument("ranking refers to a missing gallery item".into()));
    }
    Ok(mean_defined(&per_query_ap(rankings, query_labels, gallery_labels)))
}

/// One retrieval direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionResult {
    pub rankings: Vec<Vec<usize>>,
    pub average_precision: Vec<Option<f64>>,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub audio_to_visual: DirectionResult,
    pub visual_to_audio: DirectionResult,
    pub map_a2v: f64,
    pub map_v2a: f64,
    pub map_avg: f64,
}

fn direction(queries: &DenseMatrix, gallery: &DenseMatrix, labels: &[usize]) -> Result<DirectionResult> {
    let rankings = cosine_rank(queries, gallery)?;
    let average_precision = per_query_ap(&rankings, labels, labels);
    let map = mean_defined(&average_precision);
    Ok(DirectionResult {
        rankings,
        average_precision,
        map,
    })
}

/// Retrieval between two embedding sets whose rows describe the same clips.
pub fn evaluate_embeddings(audio: &DenseMatrix, visual: &DenseMatrix, labels: &[usize]) -> Result<RetrievalResult> {
    if audio.rows() != labels.len() || visual.rows() != labels.len() {
        return Err(Error::Dimension("embedding rows and labels differ in count".into()));
    }
    let a2v = direction(audio, visual, labels)?;
    let v2a = direction(visual, audio, labels)?;
    let (map_a2v, map_v2a) = (a2v.map, v2a.map);
    Ok(RetrievalResult {
        audio_to_visual: a2v,
        visual_to_audio: v2a,
        map_a2v,
        map_v2a,
        map_avg: (map_a2v + map_v2a) / 2.0,
    })
}

/// Embeds every clip in inference mode and scores both directions.
pub fn evaluate(params: &ModelParams, data: &Dataset) -> Result<RetrievalResult> {
    if data.is_empty() {
        return Err(Error::InsufficientData("evaluation set is empty".into()));
    }
    let (za, zv) = embed(params, &data.audio_matrix(), &data.visual_matrix())?;
    evaluate_embeddings(&za, &zv, &data.labels())
}

impl RetrievalResult {
    /// `A->V  V->A  Avg` table with four decimals.
    pub fn summary_line(&self) -> String {
        format!(
            "A->V  V->A  Avg\n{:.4}  {:.4}  {:.4}",
            self.map_a2v, self.map_v2a, self.map_avg
        )
    }

    fn directions(&self) -> [(&'static str, &DirectionResult); 2] {
        [("A->V", &self.audio_to_visual), ("V->A", &self.visual_to_audio)]
    }

    /// `direction,query_id,ap`; undefined AP is left empty, and a closing
    /// `Avg,MAP,<value>` row carries the average.
    pub fn to_csv_string(&self, query_ids: &[String]) -> String {
        let mut s = String::from("direction,query_id,ap\n");
        for (name, d) in self.directions() {
            for (id, ap) in query_ids.iter().zip(&d.average_precision) {
                let ap = ap.map(format_real).unwrap_or_default();
                let _ = writeln!(s, "{name},{id},{ap}");
            }
        }
        let _ = writeln!(s, "A->V,MAP,{}", format_real(self.map_a2v));
        let _ = writeln!(s, "V->A,MAP,{}", format_real(self.map_v2a));
        let _ = writeln!(s, "Avg,MAP,{}", format_real(self.map_avg));
        s
    }

    /// Top-k retrieved gallery clips per query:
    /// `direction,query_id,rank,gallery_id,label,correct`.
    pub fn top_k_csv(&self, ids: &[String], labels: &[usize], k: usize) -> String {
        let mut s = String::from("direction,query_id,rank,gallery_id,label,correct\n");
        for (name, d) in self.directions() {
            for (q, ranking) in d.rankings.iter().enumerate() {
                for (rank, &g) in ranking.iter().take(k).enumerate() {
                    let _ = writeln!(
                        s,
                        "{name},{},{},{},{},{}",
                        ids[q],
                        rank + 1,
                        ids[g],
                        labels[g],
                        labels[g] == labels[q]
                    );
                }
            }
        }
        s
    }

    pub fn save_csv(&self, path: &Path, query_ids: &[String]) -> Result<()> {
        std::fs::write(path, self.to_csv_string(query_ids)).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn query_itself_ranks_first() {
        let g = m(&[&[1.0, 0.0, 2.0], &[0.3, -1.0, 0.5], &[-2.0, 1.0, 0.0]]);
        let q = m(&[&[0.3, -1.0, 0.5]]);
        assert_eq!(cosine_rank(&q, &g).unwrap()[0][0], 1);
    }

    #[test]
    fn orthogonal_query_keeps_index_order() {
        let g = m(&[&[0.0, 1.0], &[0.0, -3.0], &[0.0, 2.0]]);
        let q = m(&[&[5.0, 0.0]]);
        assert_eq!(cosine_rank(&q, &g).unwrap()[0], vec![0, 1, 2]);
        let zero = m(&[&[0.0, 0.0]]);
        assert_eq!(cosine_rank(&zero, &g).unwrap()[0], vec![0, 1, 2]);
    }

    #[test]
    fn relevant_first_gives_one() {
        let r = vec![vec![2, 0, 1, 3]];
        assert_eq!(mean_average_precision(&r, &[1], &[0, 0, 1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn single_relevant_at_rank_four() {
        let r = vec![vec![0, 1, 2, 3, 4]];
        assert_eq!(mean_average_precision(&r, &[7], &[0, 0, 0, 7, 0]).unwrap(), 0.25);
    }

    #[test]
    fn queries_without_relevant_items_are_skipped() {
        let r = vec![vec![0, 1], vec![1, 0]];
        assert_eq!(mean_average_precision(&r, &[0, 9], &[0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn clustered_identical_embeddings_are_perfect() {
        let labels = [0, 1, 2, 0, 1, 2];
        let z = DenseMatrix::from_fn(6, 3, |r, c| if labels[r] == c { 1.0 + r as f64 * 0.01 } else { 0.0 });
        let res = evaluate_embeddings(&z, &z, &labels).unwrap();
        assert_eq!((res.map_a2v, res.map_v2a, res.map_avg), (1.0, 1.0, 1.0));
    }

    #[test]
    fn csv_has_summary() {
        let labels = [0, 1];
        let z = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let res = evaluate_embeddings(&z, &z, &labels).unwrap();
        let ids = vec!["a".to_string(), "b".to_string()];
        let csv = res.to_csv_string(&ids);
        assert!(csv.starts_with("direction,query_id,ap\nA->V,a,1\n"));
        assert!(csv.ends_with("Avg,MAP,1\n"));
        let top = res.top_k_csv(&ids, &labels, 1);
        assert_eq!(top.lines().count(), 5);
        assert!(top.contains("A->V,b,1,b,1,true"));
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| DenseMatrix::new(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn direction_swap_swaps_maps(a in matrix(8, 3), v in matrix(8, 3), labels in proptest::collection::vec(0usize..3, 8)) {
            let x = evaluate_embeddings(&a, &v, &labels).unwrap();
            let y = evaluate_embeddings(&v, &a, &labels).unwrap();
            prop_assert_eq!(x.map_a2v, y.map_v2a);
            prop_assert_eq!(x.map_v2a, y.map_a2v);
            prop_assert!((x.map_avg - (x.map_a2v + x.map_v2a) / 2.0).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&x.map_avg));
        }

        #[test]
        fn power_of_two_rescaling_keeps_ranking(q in matrix(3, 4), g in matrix(10, 4), e in proptest::collection::vec(-4i32..4, 13)) {
            let base = cosine_rank(&q, &g).unwrap();
            let q2 = DenseMatrix::from_fn(3, 4, |r, c| q.get(r, c) * 2f64.powi(e[r]));
            let g2 = DenseMatrix::from_fn(10, 4, |r, c| g.get(r, c) * 2f64.powi(e[3 + r]));
            prop_assert_eq!(base, cosine_rank(&q2, &g2).unwrap());
        }
    }
}
