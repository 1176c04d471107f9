//! Independent reference implementations used by integration and acceptance tests.
//! Nothing here calls the library's math; only its public data types.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use refine_core::{HeadKind, TrainableHead};

/// Forward pass written out longhand: head, fusion, cosine, softmax loss.
pub fn loss(head: &TrainableHead, feats: &[Vec<f64>], lambda: f64, tau: f64) -> f64 {
    let d = head.dimension;
    let embed = |f: &Vec<f64>| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for i in 0..d {
            let mut z = head.bias[i];
            for j in 0..d {
                z += head.weight[i * d + j] * f[j];
            }
            let h = match head.kind {
                HeadKind::Linear => z,
                HeadKind::ResidualTanh => f[i] + (z - f[i]).tanh(),
            };
            out[i] = lambda * h + (1.0 - lambda) * f[i];
        }
        out
    };
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let q = embed(&feats[0]);
    let logits: Vec<f64> = feats[1..]
        .iter()
        .map(|f| cos(&q, &embed(f)) / tau)
        .collect();
    let denom: f64 = logits.iter().map(|l| (l - logits[0]).exp()).sum();
    denom.ln()
}

/// Central differences over every weight and bias entry.
pub fn numeric_gradient(
    head: &TrainableHead,
    feats: &[Vec<f64>],
    lambda: f64,
    tau: f64,
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut probe = head.clone();
    let mut gw = vec![0.0; head.weight.len()];
    for (i, g) in gw.iter_mut().enumerate() {
        let orig = probe.weight[i];
        probe.weight[i] = orig + h;
        let up = loss(&probe, feats, lambda, tau);
        probe.weight[i] = orig - h;
        let down = loss(&probe, feats, lambda, tau);
        probe.weight[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    let mut gb = vec![0.0; head.bias.len()];
    for (i, g) in gb.iter_mut().enumerate() {
        let orig = probe.bias[i];
        probe.bias[i] = orig + h;
        let up = loss(&probe, feats, lambda, tau);
        probe.bias[i] = orig - h;
        let down = loss(&probe, feats, lambda, tau);
        probe.bias[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    (gw, gb)
}

/// Largest violation of `|a - n| <= rtol * max(|a|, |n|) + atol`, as a ratio (<= 1 passes).
pub fn worst_violation(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (rtol * a.abs().max(n.abs()) + atol))
        .fold(0.0, f64::max)
}

pub fn perturbed_head(
    dim: usize,
    kind: HeadKind,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> TrainableHead {
    let mut head = TrainableHead::identity_of_kind(dim, kind);
    for w in head.weight.iter_mut().chain(head.bias.iter_mut()) {
        *w += rng.random_range(-scale..scale);
    }
    head
}

const WORDS: &[&str] = &[
    "river", "stone", "maple", "copper", "lantern", "harbor", "violet", "engine", "meadow",
    "signal", "orbit", "cedar", "ferry", "glacier", "pepper", "quartz", "saddle", "timber",
    "walnut", "zephyr",
];

pub fn random_text(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Full sort of all cosine scores, descending, ties by ascending id.
pub fn full_sort(entries: &[(String, Vec<f64>)], query: &[f64]) -> Vec<(String, f64)> {
    let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(String, f64)> = entries
        .iter()
        .map(|(id, v)| {
            let dot: f64 = v.iter().zip(query).map(|(a, b)| a * b).sum();
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (id.clone(), dot / (vn * qn))
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored
}

/// Vectors on a coarse integer grid so exact ties and duplicates occur often.
pub fn grid_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-2..=2) as f64).collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

pub struct BruteMetrics {
    pub map: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub recall: f64,
}

/// Metrics from explicit gain vectors rather than running counters.
pub fn brute_metrics(ranked: &[String], relevant: &HashSet<String>, k: usize) -> BruteMetrics {
    let top: Vec<&String> = ranked.iter().take(k).collect();
    let gains: Vec<f64> = top
        .iter()
        .map(|id| if relevant.contains(*id) { 1.0 } else { 0.0 })
        .collect();

    let mut ap = 0.0;
    for (i, g) in gains.iter().enumerate() {
        if *g == 1.0 {
            let precision = gains[..=i].iter().sum::<f64>() / (i + 1) as f64;
            ap += precision;
        }
    }
    let map = ap / relevant.len() as f64;

    let dcg: f64 = gains
        .iter()
        .enumerate()
        .map(|(i, g)| g / (2.0 + i as f64).log2())
        .sum();
    let mut ideal = vec![0.0; k];
    for slot in ideal.iter_mut().take(relevant.len()) {
        *slot = 1.0;
    }
    let idcg: f64 = ideal
        .iter()
        .enumerate()
        .map(|(i, g)| g / (2.0 + i as f64).log2())
        .sum();

    let mut mrr = 0.0;
    for (i, g) in gains.iter().enumerate() {
        if *g == 1.0 {
            mrr = 1.0 / (i + 1) as f64;
            break;
        }
    }
    let found: HashSet<&String> = top
        .iter()
        .copied()
        .filter(|id| relevant.contains(*id))
        .collect();
    BruteMetrics {
        map,
        ndcg: dcg / idcg,
        mrr,
        recall: found.len() as f64 / relevant.len() as f64,
    }
}

/// Random ranking over `n` ids with a random non-empty relevant subset.
pub fn random_ranking(
    rng: &mut ChaCha8Rng,
    max_docs: usize,
    single_gold: bool,
) -> (Vec<String>, HashSet<String>) {
    use rand::seq::SliceRandom;
    let n = rng.random_range(1..=max_docs);
    let mut ids: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
    ids.shuffle(rng);
    let count = if single_gold {
        1
    } else {
        rng.random_range(1..=n)
    };
    // Gold may include ids that were never retrieved.
    let mut relevant: HashSet<String> = ids.iter().take(count).cloned().collect();
    if !single_gold && rng.random_bool(0.3) {
        relevant.insert("missing".into());
    }
    ids.shuffle(rng);
    (ids, relevant)
}

/// Random store entries with nonnegative coordinates so cosines spread over [0, 1].
pub fn random_entries(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<(String, Vec<f64>)> {
    (0..n)
        .map(|i| {
            let v = loop {
                let v: Vec<f64> = (0..dim)
                    .map(|_| rng.random_range(0.0..1.0f64).powi(2))
                    .collect();
                if v.iter().any(|x| *x > 0.0) {
                    break v;
                }
            };
            (format!("n{i:04}"), v)
        })
        .collect()
}

/// Checks mined negatives against the full-sort oracle. Returns a description of
/// the first violated rule.
pub fn mining_violation(
    entries: &[(String, Vec<f64>)],
    query: &[f64],
    positive: &str,
    negatives: &[String],
    depth: usize,
    exclude_top: usize,
    band: (f64, f64),
) -> Option<String> {
    let ranked = full_sort(entries, query);
    let top: HashSet<&str> = ranked
        .iter()
        .take(exclude_top)
        .map(|(id, _)| id.as_str())
        .collect();
    let band_non_empty = ranked
        .iter()
        .take(depth)
        .skip(exclude_top)
        .any(|(id, s)| id != positive && *s >= band.0 && *s <= band.1);
    for n in negatives {
        if n == positive {
            return Some(format!("negative {n} is the positive"));
        }
        if top.contains(n.as_str()) {
            return Some(format!("negative {n} is in the top {exclude_top}"));
        }
        if band_non_empty {
            let s = ranked
                .iter()
                .find(|(id, _)| id == n)
                .map(|(_, s)| *s)
                .unwrap();
            if s < band.0 || s > band.1 {
                return Some(format!("negative {n} scored {s} outside the band"));
            }
        }
    }
    None
}
