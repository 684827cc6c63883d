//! The synthetic corpus must be learnable by a linear bag-of-words model
//! without being trivially separable.

use std::collections::HashMap;

use ulma_core::pipeline::{evaluate, generate_synthetic_corpus, stratified_kfold, ClassSizes};
use ulma_core::preprocess::clean;
use ulma_core::Label;

/// Multinomial logistic regression on word counts, full-batch gradient descent.
fn bag_of_words_macro_f1(train: &[(Vec<String>, Label)], test: &[(Vec<String>, Label)]) -> f64 {
    let mut index = HashMap::new();
    for (words, _) in train {
        for w in words {
            let next = index.len();
            index.entry(w.clone()).or_insert(next);
        }
    }
    let features = |words: &[String]| -> Vec<usize> { words.iter().filter_map(|w| index.get(w).copied()).collect() };
    let dim = index.len();
    let mut weights = vec![[0.0f64; 3]; dim];
    let mut bias = [0.0f64; 3];
    let train_x: Vec<Vec<usize>> = train.iter().map(|(w, _)| features(w)).collect();
    let scores = |x: &[usize], weights: &[[f64; 3]], bias: &[f64; 3]| -> [f64; 3] {
        let mut z = *bias;
        for &f in x {
            for k in 0..3 {
                z[k] += weights[f][k];
            }
        }
        z
    };
    // inverse-frequency class weights so the minority classes are not ignored
    let mut counts = [0.0f64; 3];
    for (_, l) in train {
        counts[l.index()] += 1.0;
    }
    let class_weight: Vec<f64> = counts.iter().map(|c| train.len() as f64 / (3.0 * c)).collect();
    for _ in 0..300 {
        let mut gw = vec![[0.0f64; 3]; dim];
        let mut gb = [0.0f64; 3];
        for (x, (_, label)) in train_x.iter().zip(train) {
            let z = scores(x, &weights, &bias);
            let max = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = e.iter().sum();
            let cw = class_weight[label.index()];
            for k in 0..3 {
                let d = cw * (e[k] / sum - if k == label.index() { 1.0 } else { 0.0 });
                gb[k] += d;
                for &f in x {
                    gw[f][k] += d;
                }
            }
        }
        let n = train.len() as f64;
        for k in 0..3 {
            bias[k] -= 5.0 * gb[k] / n;
        }
        for (w, g) in weights.iter_mut().zip(&gw) {
            for k in 0..3 {
                w[k] -= 5.0 * g[k] / n + 5.0 * 1e-4 * w[k];
            }
        }
    }
    let predicted: Vec<Label> = test
        .iter()
        .map(|(w, _)| {
            let z = scores(&features(w), &weights, &bias);
            let k = (0..3).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
            Label::from_index(k).unwrap()
        })
        .collect();
    let truth: Vec<Label> = test.iter().map(|(_, l)| *l).collect();
    evaluate(&predicted, &truth).unwrap().macro_f1
}

#[test]
fn learnable_by_bag_of_words() {
    let docs = generate_synthetic_corpus(17, ClassSizes::default()).unwrap();
    let cleaned: Vec<(Vec<String>, Label)> = docs.iter().map(|d| (clean(d).tokens, d.label.unwrap())).collect();
    let labels: Vec<Label> = cleaned.iter().map(|(_, l)| *l).collect();
    let split = stratified_kfold(&labels, 5, 3).unwrap();
    let train: Vec<_> = split.training(0).into_iter().map(|i| cleaned[i].clone()).collect();
    let test: Vec<_> = split.validation(0).iter().map(|&i| cleaned[i].clone()).collect();
    let f1 = bag_of_words_macro_f1(&train, &test);
    eprintln!("bag-of-words holdout macro-F1: {f1:.4}");
    assert!(f1 > 0.6, "macro-F1 {f1}");
    assert!(f1 < 0.99, "corpus is trivially separable: {f1}");
}

#[test]
fn preprocessing_sees_emoji_and_pii() {
    let docs = generate_synthetic_corpus(2, ClassSizes::default()).unwrap();
    let tokens: Vec<String> = docs.iter().flat_map(|d| clean(d).tokens).collect();
    for placeholder in ["EMOJI", "PHONE", "EMAIL"] {
        assert!(tokens.iter().any(|t| t == placeholder), "{placeholder}");
    }
    assert!(tokens.iter().all(|t| t.chars().all(|c| !c.is_uppercase()) || ["EMOJI", "PHONE", "EMAIL"].contains(&t.as_str())));
}
