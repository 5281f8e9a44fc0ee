use mmgru_core::metrics::{bleu, cider, corpus_meteor, evaluate, meteor};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

/// Dense TF-IDF oracle: every n-gram of the corpus gets a fixed coordinate,
/// vectors are plain arrays and the cosine is computed from scratch.
fn cider_oracle(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Vec<f64> {
    let grams = |s: &[String], n: usize| -> Vec<String> {
        if s.len() < n {
            return vec![];
        }
        (0..=s.len() - n).map(|i| s[i..i + n].join("\u{1}")).collect()
    };
    let images = hyps.len() as f64;
    let mut out = vec![0.0; hyps.len()];
    for n in 1..=4 {
        let mut axis: Vec<String> = hyps
            .iter()
            .chain(refs.iter().flatten())
            .flat_map(|s| grams(s, n))
            .collect();
        axis.sort();
        axis.dedup();
        let df: Vec<f64> = axis
            .iter()
            .map(|g| refs.iter().filter(|rs| rs.iter().any(|r| grams(r, n).contains(g))).count() as f64)
            .collect();
        let vector = |s: &[String]| -> Vec<f64> {
            let gs = grams(s, n);
            axis.iter()
                .zip(&df)
                .map(|(g, &d)| gs.iter().filter(|x| *x == g).count() as f64 * (images / d.max(1.0)).ln())
                .collect()
        };
        for (i, (h, rs)) in hyps.iter().zip(refs).enumerate() {
            let hv = vector(h);
            for r in rs {
                let rv = vector(r);
                let dot: f64 = hv.iter().zip(&rv).map(|(a, b)| a * b).sum();
                let nh = hv.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nr = rv.iter().map(|a| a * a).sum::<f64>().sqrt();
                if nh > 0.0 && nr > 0.0 {
                    out[i] += dot / (nh * nr) / 4.0 / rs.len() as f64 * 10.0;
                }
            }
        }
    }
    out
}

#[test]
fn cider_agrees_with_dense_oracle() {
    let hyps = vec![toks("a man riding a horse on the beach"), toks("a dog on the grass")];
    let refs = vec![
        vec![toks("a man rides a horse on a beach"), toks("man on a horse near the sea")],
        vec![toks("a brown dog runs on the grass"), toks("dog playing in grass"), toks("a dog on a lawn")],
    ];
    let got = cider(&hyps, &refs).unwrap();
    let want = cider_oracle(&hyps, &refs);
    for (g, w) in got.per_image.iter().zip(&want) {
        assert!((g - w).abs() < 1e-9, "{g} vs {w}");
    }
    let mean = want.iter().sum::<f64>() / 2.0;
    assert!((got.score - mean).abs() < 1e-9);
}

#[test]
fn cider_self_match_dominates() {
    let refs = vec![vec![toks("red kite over hills")], vec![toks("blue boat on lake")], vec![toks("a cat")]];
    let perfect = cider(&[toks("red kite over hills"), toks("blue boat on lake"), toks("a cat")], &refs).unwrap();
    let partial = cider(&[toks("red kite"), toks("boat on a lake"), toks("cat")], &refs).unwrap();
    for (p, q) in perfect.per_image.iter().zip(&partial.per_image) {
        assert!(p > q);
    }
}

#[test]
fn perfect_match_corpus() {
    let sents = vec![toks("a man rides a horse"), toks("two dogs play in the snow"), toks("kids at a park")];
    let refs: Vec<_> = sents.iter().map(|s| vec![s.clone()]).collect();
    for n in 1..=4 {
        assert_eq!(bleu(&sents, &refs, n).unwrap().score, 1.0);
    }
    let (m, per) = corpus_meteor(&sents, &refs).unwrap();
    for (s, sc) in sents.iter().zip(&per) {
        let len = s.len() as f64;
        assert!((sc.score - (1.0 - 0.5 / len.powi(3))).abs() < 1e-12);
    }
    assert!(m < 1.0 && m > 0.99);
    let rep = evaluate(&sents, &refs).unwrap();
    assert_eq!(rep.bleu, [1.0; 4]);
}

#[test]
fn meteor_hand_cases() {
    assert!((meteor(&toks("a b c d e"), &[toks("a b c d e")]).unwrap().score - 0.996).abs() < 1e-12);
    assert!((meteor(&toks("the cat sat"), &[toks("the cat")]).unwrap().score - 0.8929).abs() < 1e-4);
}
