//! Slow, obviously-correct reimplementations used as test oracles.

use s5cl::evaluator::{EmbeddingSet, ViewTag};

/// Direct transcription of the supervised contrastive loss, one anchor at a
/// time, with no shared code path.
pub fn supcon_reference(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let unit: Vec<Vec<f64>> = z
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..z.len() {
        let pos: Vec<usize> = (0..z.len())
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let denom: f64 = (0..z.len())
            .filter(|&a| a != i)
            .map(|a| (dot(&unit[i], &unit[a]) / tau).exp())
            .sum();
        let mean_log: f64 = pos
            .iter()
            .map(|&p| ((dot(&unit[i], &unit[p]) / tau).exp() / denom).ln())
            .sum::<f64>()
            / pos.len() as f64;
        total -= mean_log;
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

/// MAP@R by explicit rank counting: the rank of candidate `j` for query
/// `q` is the number of candidates strictly ahead of it.
pub fn map_at_r_reference(set: &EmbeddingSet) -> f64 {
    let n = set.len();
    let sim = |a: usize, b: usize| {
        let mut s = 0.0;
        for k in 0..set.embeddings[a].len() {
            s += set.embeddings[a][k] * set.embeddings[b][k];
        }
        s
    };
    let mut total = 0.0;
    let mut queries = 0;
    for q in (0..n).filter(|&q| set.view_tags[q] == ViewTag::Original) {
        let r = (0..n)
            .filter(|&j| j != q && set.labels[j] == set.labels[q])
            .count();
        if r == 0 {
            continue;
        }
        let rank = |j: usize| {
            (0..n)
                .filter(|&l| l != q && l != j)
                .filter(|&l| sim(q, l) > sim(q, j) || (sim(q, l) == sim(q, j) && l < j))
                .count()
        };
        // relevant candidates inside the top r, by rank
        let mut ranks: Vec<usize> = (0..n)
            .filter(|&j| j != q && set.labels[j] == set.labels[q])
            .map(rank)
            .filter(|&k| k < r)
            .collect();
        ranks.sort_unstable();
        let mut score = 0.0;
        for (hits, k) in ranks.iter().enumerate() {
            score += (hits + 1) as f64 / (k + 1) as f64;
        }
        total += score / r as f64;
        queries += 1;
    }
    if queries == 0 {
        0.0
    } else {
        total / queries as f64
    }
}
