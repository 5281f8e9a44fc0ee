//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test -p mmgru-cli --test acceptance`.

mod common;

use std::fs;
use std::panic;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{fixture, json, mmgru, train as cli_train};
use mmgru_core::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint};
use mmgru_core::data::{CaptionDataset, CaptionRecord};
use mmgru_core::decoder::{generate_ids, DecodeConfig};
use mmgru_core::gradcheck::{check_model_gradients, DEFAULT_EPSILON};
use mmgru_core::gru::{gru_forward, param_count, GruParams, StackKind, Unit};
use mmgru_core::linalg::{Matrix, Rng, Vector};
use mmgru_core::metrics::{bleu, brevity_penalty, cider, meteor, modified_precision};
use mmgru_core::model::{forward, train, ModelDims, ModelParams, TrainConfig};
use mmgru_core::retrieval::{median_rank, rank_bidirectional, recall_at_k, Direction, MedianMode, ScoreMode};
use mmgru_core::vocab::Vocabulary;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let t = started.elapsed();
    ensure(t < limit, || format!("took {t:.2?}, limit {limit:?}"))
}

fn parameter_counts() -> Outcome {
    let started = Instant::now();
    let o = mmgru(&["params", "--hidden", "256,512,1024"]);
    let elapsed = started.elapsed();
    ensure(o.status.success(), || "params command failed".into())?;
    let rows = json(&o)["rows"].as_array().cloned().unwrap_or_default();
    let got = |i: usize, k: &str| rows.get(i).and_then(|r| r[k].as_u64()).unwrap_or(0);
    let expected = [(256, 393_984, 525_312), (512, 1_574_400, 2_099_200)];
    for (i, (h, g, l)) in expected.iter().enumerate() {
        ensure(got(i, "gru") == *g && got(i, "lstm") == *l, || {
            format!("h={h}: got GRU {} / LSTM {}, want {g} / {l}", got(i, "gru"), got(i, "lstm"))
        })?;
    }
    ensure(got(2, "gru") == 6_294_528, || format!("h=1024: GRU {}", got(2, "gru")))?;
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:.2?}"))?;
    Ok(format!(
        "GRU/LSTM 393,984/525,312 (h=256), 1,574,400/2,099,200 (h=512); 6,294,528 at h=1024 (nominal size \"1000\"; h=1000 itself gives {}); {elapsed:.0?}",
        param_count(Unit::Gru, 1000, 1000, StackKind::Single)
    ))
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let instances = 24;
    for seed in 0..instances {
        let mut rng = Rng::new(0xACCE_0000 + seed);
        let stack = [StackKind::Single, StackKind::Conventional, StackKind::Feedback][seed as usize % 3];
        let dims = ModelDims {
            feature_dim: 1 + rng.below(6),
            hidden: 1 + rng.below(8),
            vocab_size: 4 + rng.below(7),
            stack,
        };
        let mut p = ModelParams::init(dims, 0.6, &mut rng).map_err(|e| e.to_string())?;
        for t in p.tensor_data_mut() {
            // Biases start at zero; randomize them as well.
            t.iter_mut().filter(|v| **v == 0.0).for_each(|v| *v = rng.uniform(-0.1, 0.1));
        }
        // Feedback layer 2 carries no recurrent weights.
        if stack == StackKind::Feedback {
            let l = &mut p.layers[1];
            for u in [&mut l.u_r, &mut l.u_z, &mut l.u_h] {
                *u = Matrix::zeros(dims.hidden, dims.hidden);
            }
        }
        let feature: Vector = (0..dims.feature_dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut caption = vec![0];
        caption.extend((0..rng.below(5)).map(|_| 2 + rng.below(dims.vocab_size - 2)));
        caption.push(1);
        let lambda = rng.uniform(0.0, 1e-2);
        let r = check_model_gradients(&p, &feature, &caption, lambda, DEFAULT_EPSILON).map_err(|e| e.to_string())?;
        ensure(r.max_relative_error < 1e-4, || format!("seed {seed}: {r:?}"))?;
        worst = worst.max(r.max_relative_error);
    }
    within(Duration::from_secs(60), started)?;
    Ok(format!("{instances} instances, worst relative error {worst:.2e} (< 1e-4), {:.1?}", started.elapsed()))
}

fn synthetic(pairs: usize, seed: u64) -> CaptionDataset {
    let mut tokens: Vec<String> = ["<start>", "<stop>", "<unk>"].iter().map(|s| s.to_string()).collect();
    tokens.extend((0..12).map(|i| format!("w{i}")));
    let vocab = Vocabulary::from_tokens(tokens).unwrap();
    let mut rng = Rng::new(seed);
    let records = (0..pairs)
        .map(|i| {
            let mut caption = vec![Vocabulary::START_ID];
            caption.extend((0..3 + rng.below(3)).map(|_| 3 + rng.below(12)));
            caption.push(Vocabulary::STOP_ID);
            CaptionRecord {
                image_id: format!("img{i:02}"),
                feature: (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                captions: vec![caption],
            }
        })
        .collect();
    CaptionDataset { records, vocab, feature_dim: 8 }
}

fn mean_data_loss(p: &ModelParams, ds: &CaptionDataset) -> f64 {
    let all: Vec<f64> = ds
        .records
        .iter()
        .flat_map(|r| r.captions.iter().map(|c| forward(p, &r.feature, c, 0.0).unwrap().1.data_loss))
        .collect();
    all.iter().sum::<f64>() / all.len() as f64
}

fn overfit() -> Outcome {
    let started = Instant::now();
    let ds = synthetic(10, 11);
    let cfg = TrainConfig {
        learning_rate: 0.1,
        l2_lambda: 1e-5,
        epochs: 500,
        seed: 3,
        max_grad_norm: Some(5.0),
        hidden_size: 16,
        stack: StackKind::Single,
        init_scale: 0.1,
    };
    let (init, _) = train(&ds, &TrainConfig { epochs: 0, ..cfg.clone() }, |_, _| {}).map_err(|e| e.to_string())?;
    let (params, _) = train(&ds, &cfg, |_, _| {}).map_err(|e| e.to_string())?;
    let (before, after) = (mean_data_loss(&init, &ds), mean_data_loss(&params, &ds));
    ensure(after < 0.05 * before, || format!("loss {before:.4} -> {after:.4}"))?;
    let reproduced = ds
        .records
        .iter()
        .filter(|r| {
            let c = &r.captions[0];
            generate_ids(&params, &r.feature, DecodeConfig::default()).unwrap() == c[1..c.len() - 1]
        })
        .count();
    ensure(reproduced >= 9, || format!("{reproduced}/10 captions reproduced"))?;

    let one = synthetic(1, 12);
    let (p1, _) = train(&one, &TrainConfig { epochs: 50, ..cfg }, |_, _| {}).map_err(|e| e.to_string())?;
    for dir in [Direction::ImageToSentence, Direction::SentenceToImage] {
        let res = rank_bidirectional(&p1, &one, dir, ScoreMode::Normalized).map_err(|e| e.to_string())?;
        let r1 = recall_at_k(&res, 1).map_err(|e| e.to_string())?;
        let med = median_rank(&res, MedianMode::MeanOfMedians).map_err(|e| e.to_string())?;
        ensure(r1 == 1.0 && med == 1.0, || format!("{dir:?}: R@1 {r1}, Med-r {med}"))?;
    }
    within(Duration::from_secs(120), started)?;
    Ok(format!(
        "loss {before:.3} -> {after:.5} ({:.2}%), {reproduced}/10 captions exact, single pair R@1 = Med-r = 1 both ways, {:.1?}",
        100.0 * after / before,
        started.elapsed()
    ))
}

fn gru_semantics() -> Outcome {
    let mut rng = Rng::new(0x5EED);
    let cells = 10_000;
    let mut worst_hold: f64 = 0.0;
    for i in 0..cells {
        let (d, h) = (1 + rng.below(8), 1 + rng.below(8));
        let scale = rng.uniform(0.05, 1.0);
        let mut p = GruParams::random(&mut rng, d, h, scale, true).map_err(|e| e.to_string())?;
        for b in [&mut p.b_r, &mut p.b_z, &mut p.b_h] {
            b.iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
        }
        let x: Vector = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let hp: Vector = (0..h).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (out, c) = gru_forward(&p, &x, &hp).map_err(|e| e.to_string())?;
        ensure(c.r.iter().chain(c.z.iter()).all(|&g| g > 0.0 && g < 1.0), || format!("cell {i}: gate outside (0,1)"))?;
        ensure(c.h_tilde.iter().all(|&v| v.abs() < 1.0), || format!("cell {i}: candidate outside (-1,1)"))?;
        for k in 0..h {
            let (lo, hi) = (hp[k].min(c.h_tilde[k]), hp[k].max(c.h_tilde[k]));
            ensure(out[k] >= lo - 1e-15 && out[k] <= hi + 1e-15, || format!("cell {i}: not a convex combination"))?;
        }
        ensure(out.max_abs() <= 1.0, || format!("cell {i}: |h| > 1"))?;

        p.w_z = Matrix::zeros(d, h);
        p.u_z = Matrix::zeros(h, h);
        p.b_z = Vector::filled(h, -50.0);
        let (held, _) = gru_forward(&p, &x, &hp).map_err(|e| e.to_string())?;
        let diff = held.sub(&hp).map_err(|e| e.to_string())?.max_abs();
        ensure(diff <= 1e-15, || format!("cell {i}: closed update gate moved state by {diff:e}"))?;
        worst_hold = worst_hold.max(diff);
    }
    Ok(format!("{cells} cells: gates in (0,1), candidate in (-1,1), convex update, z≈0 drift ≤ {worst_hold:.1e}"))
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

/// Dense TF-IDF/cosine oracle over an explicit n-gram axis.
fn cider_oracle(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let grams = |s: &[String], n: usize| -> Vec<String> {
        if s.len() < n {
            vec![]
        } else {
            (0..=s.len() - n).map(|i| s[i..i + n].join(" ")).collect()
        }
    };
    let images = hyps.len() as f64;
    let mut per = vec![0.0; hyps.len()];
    for n in 1..=4 {
        let mut axis: Vec<String> = hyps.iter().chain(refs.iter().flatten()).flat_map(|s| grams(s, n)).collect();
        axis.sort();
        axis.dedup();
        let idf: Vec<f64> = axis
            .iter()
            .map(|g| {
                let df = refs.iter().filter(|rs| rs.iter().any(|r| grams(r, n).contains(g))).count() as f64;
                (images / df.max(1.0)).ln()
            })
            .collect();
        let vec_of = |s: &[String]| -> Vec<f64> {
            let gs = grams(s, n);
            axis.iter().zip(&idf).map(|(g, w)| gs.iter().filter(|x| *x == g).count() as f64 * w).collect()
        };
        for (i, (h, rs)) in hyps.iter().zip(refs).enumerate() {
            let hv = vec_of(h);
            for r in rs {
                let rv = vec_of(r);
                let dot: f64 = hv.iter().zip(&rv).map(|(a, b)| a * b).sum();
                let (nh, nr) = (hv.iter().map(|a| a * a).sum::<f64>().sqrt(), rv.iter().map(|a| a * a).sum::<f64>().sqrt());
                if nh > 0.0 && nr > 0.0 {
                    per[i] += 10.0 * dot / (nh * nr) / 4.0 / rs.len() as f64;
                }
            }
        }
    }
    per.iter().sum::<f64>() / images
}

fn metric_oracles() -> Outcome {
    let err = |e: mmgru_core::Error| e.to_string();
    let (h, r) = (vec![toks("the cat the cat")], vec![vec![toks("the cat sat")]]);
    let p1 = modified_precision(&h, &r, 1).map_err(err)?.value();
    ensure(p1 == 0.5, || format!("p1 = {p1}"))?;
    let bp = brevity_penalty(10, 5);
    ensure((bp - (-1f64).exp()).abs() < 1e-15, || format!("BP = {bp}"))?;
    let m1 = meteor(&toks("a b c d e"), &[toks("a b c d e")]).map_err(err)?.score;
    let m2 = meteor(&toks("the cat sat"), &[toks("the cat")]).map_err(err)?.score;
    ensure((m1 - 0.996).abs() < 1e-4 && (m2 - 0.8929).abs() < 1e-4, || format!("METEOR {m1}, {m2}"))?;

    let hyps = vec![toks("a man riding a horse on the beach"), toks("a dog on the grass")];
    let refs = vec![
        vec![toks("a man rides a horse on a beach"), toks("man on a horse near the sea")],
        vec![toks("a brown dog runs on the grass"), toks("dog playing in grass")],
    ];
    let c = cider(&hyps, &refs).map_err(err)?.score;
    let oracle = cider_oracle(&hyps, &refs);
    ensure((c - oracle).abs() < 1e-9, || format!("CIDEr {c} vs oracle {oracle}"))?;

    let perfect = vec![toks("two dogs play in the snow"), toks("a man rides a horse")];
    let self_refs: Vec<_> = perfect.iter().map(|s| vec![s.clone()]).collect();
    for n in 1..=4 {
        let b = bleu(&perfect, &self_refs, n).map_err(err)?.score;
        ensure(b == 1.0, || format!("perfect corpus B-{n} = {b}"))?;
    }
    let m = meteor(&perfect[1], &self_refs[1]).map_err(err)?.score;
    ensure((m - (1.0 - 0.5 / 125.0)).abs() < 1e-12, || format!("perfect METEOR {m}"))?;
    Ok(format!("p1 = 0.5, BP = e^-1, METEOR {m1:.4}/{m2:.4}, CIDEr {c:.6} = oracle, perfect B-1..4 = 1, METEOR {m:.3}"))
}

fn stacking_claim() -> Outcome {
    let mut parts = Vec::new();
    for h in [256, 512, 1024] {
        let conv = param_count(Unit::Gru, h, h, StackKind::Conventional);
        let fb = param_count(Unit::Gru, h, h, StackKind::Feedback);
        ensure(fb < conv, || format!("h={h}: feedback {fb} !< conventional {conv}"))?;
        parts.push(format!("h={h}: {fb} vs {conv} ({:.1}% fewer)", 100.0 * (1.0 - fb as f64 / conv as f64)));
    }
    Ok(parts.join("; "))
}

fn determinism() -> Outcome {
    let f = fixture(4, 2, 6, 21);
    let flags = ["--hidden", "8", "--epochs", "3", "--seed", "7", "--layers", "2"];
    let (a, oa) = cli_train(&f, "a.mgru", &flags);
    let (b, ob) = cli_train(&f, "b.mgru", &flags);
    ensure(oa.status.success() && ob.status.success(), || String::from_utf8_lossy(&oa.stderr).into_owned())?;
    let (ba, bb) = (fs::read(&a).map_err(|e| e.to_string())?, fs::read(&b).map_err(|e| e.to_string())?);
    ensure(ba == bb, || "checkpoints differ".into())?;
    let (params, vocab) = load_checkpoint(&a).map_err(|e| e.to_string())?;
    let again = encode_checkpoint(&params, &vocab).map_err(|e| e.to_string())?;
    ensure(again == ba, || "re-encoded checkpoint differs".into())?;
    let (q, _) = decode_checkpoint(&again).map_err(|e| e.to_string())?;
    let bits = |p: &ModelParams| -> Vec<u64> { p.tensor_data().iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect() };
    ensure(bits(&q) == bits(&params), || "round trip not bit-exact".into())?;
    Ok(format!("two `train --seed 7` runs: identical {}-byte checkpoints; save/load bit-exact", ba.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("parameter-count reproduction", parameter_counts),
        ("gradient correctness", gradient_correctness),
        ("overfit reproduction", overfit),
        ("GRU semantics", gru_semantics),
        ("metric oracles", metric_oracles),
        ("stacking claim", stacking_claim),
        ("determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name}: {why}");
            }
        }
    }
    println!("{} of 7 criteria passed", 7 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
