//! Retrieval metrics over Hamming rankings.
//!
//! Relevance is class equality between the query and a gallery item. AP is
//! normalized by the number of relevant items in the whole gallery.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::PackedCodeIndex;

/// Relevance flags of one ranked list plus the gallery-wide relevant count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceJudgment {
    pub relevant: Vec<bool>,
    pub total_relevant: usize,
}

impl RelevanceJudgment {
    pub fn new(relevant: Vec<bool>, total_relevant: usize) -> Self {
        Self {
            relevant,
            total_relevant,
        }
    }

    /// Judges a ranking of gallery positions against `gallery_labels`.
    pub fn from_ranking(
        query_label: usize,
        ranked_positions: &[usize],
        gallery_labels: &[usize],
    ) -> Self {
        let relevant = ranked_positions
            .iter()
            .map(|&p| gallery_labels[p] == query_label)
            .collect();
        let total_relevant = gallery_labels.iter().filter(|&&l| l == query_label).count();
        Self {
            relevant,
            total_relevant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragePrecision {
    pub value: f64,
    /// Set when the gallery holds no relevant item; `value` is then 0.
    pub no_relevant: bool,
}

/// `(1 / R) * Σ_{relevant ranks i} precision@i` over the full ranking.
pub fn average_precision(j: &RelevanceJudgment) -> AveragePrecision {
    average_precision_at(j, None)
}

/// AP over the first `cutoff` ranks, normalized by `min(R, cutoff)`.
pub fn average_precision_at(j: &RelevanceJudgment, cutoff: Option<usize>) -> AveragePrecision {
    if j.total_relevant == 0 {
        return AveragePrecision {
            value: 0.0,
            no_relevant: true,
        };
    }
    let len = cutoff.map_or(j.relevant.len(), |c| c.min(j.relevant.len()));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, _) in j.relevant[..len].iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (i + 1) as f64;
    }
    let norm = cutoff.map_or(j.total_relevant, |c| j.total_relevant.min(c));
    AveragePrecision {
        value: sum / norm as f64,
        no_relevant: false,
    }
}

/// Arithmetic mean; 0 for an empty slice.
pub fn mean_average_precision(aps: &[f64]) -> f64 {
    if aps.is_empty() {
        return 0.0;
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

/// Fraction of relevant items among the first `min(k, len)` ranks.
pub fn precision_at_k(j: &RelevanceJudgment, k: usize) -> f64 {
    let len = k.min(j.relevant.len());
    if len == 0 {
        return 0.0;
    }
    j.relevant[..len].iter().filter(|&&r| r).count() as f64 / len as f64
}

/// One `(recall, precision)` point per rank position.
pub fn pr_curve(j: &RelevanceJudgment) -> Vec<(f64, f64)> {
    let total = j.total_relevant.max(1) as f64;
    let mut hits = 0usize;
    j.relevant
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            hits += r as usize;
            (hits as f64 / total, hits as f64 / (i + 1) as f64)
        })
        .collect()
}

/// Trapezoidal area under a PR curve, starting at recall 0 with the first precision.
pub fn pr_area(points: &[(f64, f64)]) -> f64 {
    let Some(&(_, p0)) = points.first() else {
        return 0.0;
    };
    let mut prev = (0.0, p0);
    let mut area = 0.0;
    for &(r, p) in points {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    area
}

/// Highest precision at any recall `>= level`, for each level.
pub fn interpolated_precision(points: &[(f64, f64)], levels: &[f64]) -> Vec<f64> {
    levels
        .iter()
        .map(|&level| {
            points
                .iter()
                .filter(|(r, _)| *r >= level - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .collect()
}

fn check_labels_aligned(what: &str, codes: usize, labels: usize) -> Result<()> {
    if codes != labels {
        return Err(Error::invalid(format!(
            "{what}: {codes} codes but {labels} labels"
        )));
    }
    Ok(())
}

/// Mean over queries of the precision inside the Hamming ball of `radius`.
/// Queries whose ball is empty contribute 0.
pub fn hd_precision(
    index: &PackedCodeIndex,
    queries: &PackedCodeIndex,
    query_labels: &[usize],
    gallery_labels: &[usize],
    radius: u32,
    threads: usize,
) -> Result<f64> {
    check_labels_aligned("gallery", index.len(), gallery_labels.len())?;
    check_labels_aligned("queries", queries.len(), query_labels.len())?;
    let balls = index.search_radius_batch(queries, radius, threads)?;
    let per_query: Vec<f64> = balls
        .iter()
        .zip(query_labels)
        .map(|(ball, &ql)| {
            if ball.is_empty() {
                0.0
            } else {
                ball.iter()
                    .filter(|h| gallery_labels[h.position] == ql)
                    .count() as f64
                    / ball.len() as f64
            }
        })
        .collect();
    Ok(mean_average_precision(&per_query))
}

/// HD2 precision.
pub fn hd2_precision(
    index: &PackedCodeIndex,
    queries: &PackedCodeIndex,
    query_labels: &[usize],
    gallery_labels: &[usize],
    threads: usize,
) -> Result<f64> {
    hd_precision(index, queries, query_labels, gallery_labels, 2, threads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkStats {
    pub queries: usize,
    pub repetitions: usize,
    pub k: usize,
    pub median_seconds: f64,
    pub p25_seconds: f64,
    pub p75_seconds: f64,
    pub iqr_seconds: f64,
    pub code_payload_bytes: usize,
    pub resident_bytes: usize,
}

/// Times every query's top-`k` scan `repetitions` times.
pub fn benchmark(
    index: &PackedCodeIndex,
    queries: &PackedCodeIndex,
    k: usize,
    repetitions: usize,
) -> Result<BenchmarkStats> {
    if repetitions < 3 {
        return Err(Error::invalid(format!(
            "benchmark needs >= 3 repetitions, got {repetitions}"
        )));
    }
    index.check_compatible(queries)?;
    if queries.is_empty() || index.is_empty() {
        return Err(Error::invalid(
            "benchmark needs a non-empty gallery and query set",
        ));
    }
    let mut samples = Vec::with_capacity(queries.len() * repetitions);
    for _ in 0..repetitions {
        for q in 0..queries.len() {
            let start = Instant::now();
            let hits = index.search_topk(queries.code_words(q), k)?;
            std::hint::black_box(&hits);
            samples.push(start.elapsed().as_secs_f64());
        }
    }
    samples.sort_by(f64::total_cmp);
    let pct = |p: f64| samples[((samples.len() - 1) as f64 * p).round() as usize];
    let (p25, p50, p75) = (pct(0.25), pct(0.5), pct(0.75));
    Ok(BenchmarkStats {
        queries: queries.len(),
        repetitions,
        k,
        median_seconds: p50,
        p25_seconds: p25,
        p75_seconds: p75,
        iqr_seconds: p75 - p25,
        code_payload_bytes: index.code_payload_bytes(),
        resident_bytes: index.resident_bytes(),
    })
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub radius: u32,
    /// Truncate AP at this rank; `None` ranks the whole gallery.
    pub map_cutoff: Option<usize>,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![200],
            radius: 2,
            map_cutoff: None,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query: usize,
    pub label: usize,
    pub average_precision: f64,
    pub precision_at_k: Vec<f64>,
    pub search_seconds: f64,
}

/// Aggregate retrieval report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bits: usize,
    pub gallery_size: usize,
    pub num_queries: usize,
    pub map: f64,
    pub map_cutoff: Option<usize>,
    /// `(k, mean precision@k)`
    pub precision_at_k: Vec<(usize, f64)>,
    /// Mean interpolated `(recall, precision)` at 21 evenly spaced recall levels.
    pub pr_curve: Vec<(f64, f64)>,
    pub hd_radius: u32,
    pub hd_precision: f64,
    pub queries_without_relevant: usize,
    pub median_query_seconds: f64,
    pub code_payload_bytes: usize,
    pub index_memory_bytes: usize,
    pub per_query: Vec<QueryMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per query: `query,label,ap,p@k...,search_seconds`.
    pub fn per_query_csv(&self) -> String {
        let mut s = String::from("query,label,ap");
        for (k, _) in &self.precision_at_k {
            let _ = write!(s, ",p@{k}");
        }
        s.push_str(",search_seconds\n");
        for q in &self.per_query {
            let _ = write!(s, "{},{},{}", q.query, q.label, q.average_precision);
            for p in &q.precision_at_k {
                let _ = write!(s, ",{p}");
            }
            let _ = writeln!(s, ",{}", q.search_seconds);
        }
        s
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("recall,precision\n");
        for (r, p) in &self.pr_curve {
            let _ = writeln!(s, "{r},{p}");
        }
        s
    }
}

/// Ranks the full gallery for every query and computes all metrics.
pub fn evaluate(
    gallery: &PackedCodeIndex,
    gallery_labels: &[usize],
    queries: &PackedCodeIndex,
    query_labels: &[usize],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    gallery.check_compatible(queries)?;
    check_labels_aligned("gallery", gallery.len(), gallery_labels.len())?;
    check_labels_aligned("queries", queries.len(), query_labels.len())?;
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::invalid(
            "evaluation needs at least one query and one gallery item",
        ));
    }
    if opts.ks.contains(&0) {
        return Err(Error::invalid("precision cutoffs must be >= 1"));
    }

    let levels: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let n = gallery.len();
    let rows: Vec<(QueryMetrics, bool, Vec<f64>)> =
        crate::index::run_sharded(queries.len(), opts.threads, |q| {
            let start = Instant::now();
            let hits = gallery.search_topk(queries.code_words(q), n)?;
            let elapsed = start.elapsed().as_secs_f64();
            let positions: Vec<usize> = hits.iter().map(|h| h.position).collect();
            let j = RelevanceJudgment::from_ranking(query_labels[q], &positions, gallery_labels);
            let ap = average_precision_at(&j, opts.map_cutoff);
            let interp = interpolated_precision(&pr_curve(&j), &levels);
            Ok((
                QueryMetrics {
                    query: q,
                    label: query_labels[q],
                    average_precision: ap.value,
                    precision_at_k: opts.ks.iter().map(|&k| precision_at_k(&j, k)).collect(),
                    search_seconds: elapsed,
                },
                ap.no_relevant,
                interp,
            ))
        })?;

    let nq = rows.len() as f64;
    let aps: Vec<f64> = rows.iter().map(|r| r.0.average_precision).collect();
    let precision_at_k = opts
        .ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            (
                k,
                rows.iter().map(|r| r.0.precision_at_k[i]).sum::<f64>() / nq,
            )
        })
        .collect();
    let pr = levels
        .iter()
        .enumerate()
        .map(|(i, &r)| (r, rows.iter().map(|row| row.2[i]).sum::<f64>() / nq))
        .collect();
    let mut times: Vec<f64> = rows.iter().map(|r| r.0.search_seconds).collect();
    times.sort_by(f64::total_cmp);

    Ok(MetricsReport {
        bits: gallery.bits(),
        gallery_size: n,
        num_queries: rows.len(),
        map: mean_average_precision(&aps),
        map_cutoff: opts.map_cutoff,
        precision_at_k,
        pr_curve: pr,
        hd_radius: opts.radius,
        hd_precision: hd_precision(
            gallery,
            queries,
            query_labels,
            gallery_labels,
            opts.radius,
            opts.threads,
        )?,
        queries_without_relevant: rows.iter().filter(|r| r.1).count(),
        median_query_seconds: times[times.len() / 2],
        code_payload_bytes: gallery.code_payload_bytes(),
        index_memory_bytes: gallery.resident_bytes(),
        per_query: rows.into_iter().map(|r| r.0).collect(),
    })
}
