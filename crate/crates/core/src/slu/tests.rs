use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{grad_check, GradCheckOptions};

fn schema() -> IntentSchema {
    IntentSchema::from_grammar(&CommandGrammar::grabo_like()).unwrap()
}

// Independent scan: cross-entropy in probability space, strict improvement only.
fn oracle(probs: &[f64], valid: &[Vec<u8>]) -> usize {
    let mut best = 0;
    let mut best_ce = f64::INFINITY;
    for (i, v) in valid.iter().enumerate() {
        let mut ce = 0.0;
        for (b, &p) in v.iter().zip(probs) {
            let p = p.max(1e-7).min(1.0 - 1e-7);
            ce -= if *b == 1 { p.ln() } else { (1.0 - p).ln() };
        }
        if ce < best_ce {
            best_ce = ce;
            best = i;
        }
    }
    best
}

#[test]
fn schema_layout_and_round_trip() {
    let s = schema();
    assert_eq!(s.num_bits(), 31);
    assert_eq!(s.valid_set().len(), 36);
    for v in s.valid_set() {
        let actions = v
            .iter()
            .zip(s.label_bits())
            .filter(|(&b, l)| b == 1 && l.kind == BitKind::Action)
            .count();
        assert_eq!(actions, 1);
    }
    for intent in s.valid_intents() {
        let v = s.encode(intent).unwrap();
        assert_eq!(&s.decode(&v).unwrap(), intent);
    }
    let mut two = s.valid_set()[0].clone();
    two[1] = 1;
    assert!(s.decode(&two).is_err());
    assert!(s.encode(&Intent::new("fly", &[])).is_err());
    assert!(s.encode(&Intent::new("turn", &[("angle", "up"), ("speed", "fast")])).is_err());
    assert!(s.encode(&Intent::new("grab", &[])).is_err());
    let json = serde_json::to_string(&s).unwrap();
    assert_eq!(serde_json::from_str::<IntentSchema>(&json).unwrap(), s);
}

#[test]
fn bce_cases() {
    let (l, _) = bce_loss(&[0.0f64; 5], &[1, 0, 1, 0, 0]).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-12);
    let (l, _) = bce_loss(&[40.0f64, -40.0], &[1, 0]).unwrap();
    assert!(l < 1e-15);
    let (l, _) = bce_loss(&[2.0f64, -2.0], &[1, 0]).unwrap();
    let softplus = (1.0 + (-2f64).exp()).ln();
    assert!((l - softplus).abs() < 1e-12);
    assert!((l - 0.1269).abs() < 1e-4);
    let (l, _) = bce_loss(&[1000.0f64, -1000.0], &[0, 1]).unwrap();
    assert!((l - 1000.0).abs() < 1e-9);
    assert!(bce_loss(&[0.0f64], &[1, 0]).is_err());
}

#[test]
fn bce_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let id = store.add("z", normal(&mut rng, &[1, 6], 2.0)).unwrap();
    let report = grad_check(
        &store,
        |g| {
            let z = g.param(id);
            g.bce_loss(z, &[1, 0, 0, 1, 1, 0])
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn enforce_structure_matches_scan() {
    let s = schema();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..300 {
        let probs: Vec<f64> = (0..31).map(|_| rng.random::<f64>()).collect();
        let (i, intent) = enforce_structure(&probs, &s).unwrap();
        assert_eq!(i, oracle(&probs, s.valid_set()));
        assert_eq!(intent, s.valid_intents()[i]);
    }
    for (i, v) in s.valid_set().iter().enumerate() {
        let probs: Vec<f64> = v.iter().map(|&b| b as f64).collect();
        assert_eq!(enforce_structure(&probs, &s).unwrap().0, i);
    }
    assert_eq!(enforce_structure(&[0.5; 31], &s).unwrap().0, 0);
    assert!(enforce_structure(&[0.5; 30], &s).is_err());
}

fn small_head(input_dim: usize) -> (ClassAttentionHead, ParamStore<f64>) {
    let cfg = SluConfig {
        input_dim,
        d: 8,
        heads: 2,
        layers: 2,
        ffn: 12,
        classifier_hidden: 10,
    };
    ClassAttentionHead::init(&cfg, 5, 3).unwrap()
}

#[test]
fn default_head_parameter_count() {
    let (_, store) = ClassAttentionHead::init::<f32>(&SluConfig::default(), 31, 0).unwrap();
    let n = store.num_elements();
    assert_eq!(n, 824_351);
    assert!((n as f64 / 890e3 - 1.0).abs() < 0.10);
}

#[test]
fn class_attention_weights() {
    let (head, store) = small_head(6);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let one = normal::<f64, _>(&mut rng, &[1, 6], 1.0);
    let (_, att) = head.predict(&store, &one).unwrap();
    for w in &att {
        assert!(w.data().iter().all(|&v| v == 1.0));
    }
    let row = one.data().to_vec();
    let twice = Tensor::new(&[2, 6], [row.clone(), row].concat()).unwrap();
    let (_, att) = head.predict(&store, &twice).unwrap();
    for w in &att {
        assert!(w.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    let x = normal::<f64, _>(&mut rng, &[4, 6], 1.0);
    let (base, att) = head.predict(&store, &x).unwrap();
    for w in &att {
        for h in 0..2 {
            assert!((w.row(h).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let mut padded = x.data().to_vec();
    padded.extend(normal::<f64, _>(&mut rng, &[1, 6], 5.0).into_data());
    let padded = Tensor::new(&[5, 6], padded).unwrap();
    let mut g = Graph::new(&store);
    let xv = g.input(padded);
    let mask = [false, false, false, false, true];
    let out = head.forward(&mut g, xv, Some(&mask)).unwrap();
    for (a, b) in g.value(out.logits).data().iter().zip(&base) {
        assert!((a - b).abs() <= 1e-6);
    }
    assert!(out.attention.iter().all(|w| w.data()[4] == 0.0));

    let mut g = Graph::new(&store);
    let xv = g.input(Tensor::zeros(&[2, 6]));
    assert!(head.forward(&mut g, xv, Some(&[true, true])).is_err());
    let xv = g.input(Tensor::zeros(&[2, 7]));
    assert!(head.forward(&mut g, xv, None).is_err());
}

#[test]
fn head_gradients() {
    let (head, store) = small_head(6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = normal::<f64, _>(&mut rng, &[3, 6], 1.0);
    let report = grad_check(
        &store,
        |g| {
            let xv = g.input(x.clone());
            let out = head.forward(g, xv, None)?;
            g.bce_loss(out.logits, &[1, 0, 1, 0, 0])
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn attention_report_and_svg() {
    let (head, store) = small_head(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = normal::<f64, _>(&mut rng, &[3, 6], 1.0);
    let (_, att) = head.predict(&store, &x).unwrap();
    let tokens: Vec<String> = ["turn", "left", "<fast>"].iter().map(|s| s.to_string()).collect();
    let r = AttentionReport::new("u1", &tokens, Intent::new("turn", &[]), &att, None).unwrap();
    assert_eq!(r.layers.len(), 2);
    for heads in r.layers.values() {
        for w in heads.values() {
            assert_eq!(w.len(), 3);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let svg = r.to_svg();
    let labels: Vec<&str> = svg
        .lines()
        .filter(|l| l.contains("rotate(-45"))
        .map(|l| l.split('>').nth(1).unwrap().trim_end_matches("</text"))
        .collect();
    assert_eq!(labels, vec!["turn", "left", "&lt;fast&gt;"]);
    assert!(!svg.contains("href"));
    assert!(AttentionReport::new("u1", &tokens[..2], Intent::new("turn", &[]), &att, None).is_err());
    let masked = AttentionReport::new("u1", &tokens[..2], Intent::new("turn", &[]), &att, Some(&[false, true, false])).unwrap();
    assert_eq!(masked.layers["0"]["0"].len(), 2);
}
