//! Slow, obviously-correct reference implementations used as test oracles.
#![allow(dead_code)]

/// All contiguous n-grams, in order.
pub fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if n == 0 || tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

/// Clipped overlap by greedy one-to-one matching: each candidate n-gram
/// consumes at most one equal, still unused reference n-gram.
pub fn matched(candidate: &[String], reference: &[String], n: usize) -> usize {
    let refs = ngrams(reference, n);
    let mut used = vec![false; refs.len()];
    let mut hits = 0;
    for gram in ngrams(candidate, n) {
        for (j, r) in refs.iter().enumerate() {
            if !used[j] && *r == gram {
                used[j] = true;
                hits += 1;
                break;
            }
        }
    }
    hits
}

pub fn precision(candidate: &[String], reference: &[String], n: usize) -> f64 {
    let total = ngrams(candidate, n).len();
    if total == 0 {
        0.0
    } else {
        matched(candidate, reference, n) as f64 / total as f64
    }
}

pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> Option<f64> {
    let total = ngrams(reference, n).len();
    (total > 0).then(|| matched(candidate, reference, n) as f64 / total as f64)
}

pub fn unigram_f1(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let hits = matched(candidate, reference, 1) as f64;
    let p = hits / candidate.len() as f64;
    let r = hits / reference.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Standard-BP BLEU with uniform weights over orders `1..=max_n`.
pub fn bleu(candidate: &[String], reference: &[String], max_n: usize) -> f64 {
    let ps: Vec<f64> = (1..=max_n).map(|n| precision(candidate, reference, n)).collect();
    if ps.contains(&0.0) {
        return 0.0;
    }
    let (lc, lr) = (candidate.len() as f64, reference.len() as f64);
    let bp = if lc > lr { 1.0 } else { (1.0 - lr / lc).exp() };
    bp * (ps.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
}

fn is_subsequence<T: PartialEq>(needle: &[&T], haystack: &[T]) -> bool {
    let mut it = haystack.iter();
    needle.iter().all(|x| it.any(|y| y == *x))
}

/// Longest common subsequence by trying every subsequence of `a`.
pub fn lcs_exhaustive<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    assert!(a.len() <= 16, "exhaustive oracle is exponential");
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let pick: Vec<&T> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if is_subsequence(&pick, b) {
            best = len;
        }
    }
    best
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
