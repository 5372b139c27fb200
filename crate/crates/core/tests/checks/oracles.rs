//! Independent reference implementations checked against the library.

use sa3_core::aiam::{
    global_domain_logit, global_domain_loss, local_domain_loss, DomainLabel, GlobalClassifier, ImageLabelVector, Reversal,
};
use sa3_core::cis::{channel_dim, cis_forward, kernel_size, DEFAULT_B, DEFAULT_GAMMA};
use sa3_core::detector::{Bbox, DetectorConfig};
use sa3_core::eval::{evaluate_detections, voc_ap, ClassGroundTruth, ScoredBox};
use sa3_core::i2itm::{aggregate_image_prediction, build_objectness_matrix, i2itm_loss};
use sa3_core::layers::{Conv, Linear};
use sa3_core::model::{AttentionMode, Detection, Model, ModelConfig, Params};
use sa3_core::rng::Lcg;
use sa3_core::synth::{generate_benchmark, BenchmarkConfig};
use sa3_core::{Tape, Tensor, Var};

fn rand_vec(rng: &mut Lcg, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

// ---------------------------------------------------------------- kernel size

fn brute_kernel(c: usize, gamma: f64, b: f64) -> usize {
    let t = ((c as f64).log2() - b).abs() / gamma;
    let mut best = 1usize;
    let mut best_d = f64::INFINITY;
    let mut m = 1usize;
    while (m as f64) <= t + 2.0 {
        let d = (t - m as f64).abs();
        // `<=` lets a later (larger) odd win a tie.
        if d <= best_d {
            best = m;
            best_d = d;
        }
        m += 2;
    }
    let largest_odd = if c % 2 == 1 { c } else { c - 1 };
    best.min(largest_odd)
}

pub fn kernel_size_matches_brute_force() {
    for c in 2..=4096 {
        assert_eq!(kernel_size(c, DEFAULT_GAMMA, DEFAULT_B).unwrap(), brute_kernel(c, 2.0, 1.0), "C = {c}");
    }
    for (gamma, b) in [(1, 0), (3, 2), (1, 5)] {
        for c in 2..=4096 {
            assert_eq!(
                kernel_size(c, gamma, b).unwrap(),
                brute_kernel(c, gamma as f64, b as f64),
                "C = {c}, gamma {gamma}, b {b}"
            );
        }
    }
}

pub fn kernel_size_worked_values_and_round_trip() {
    assert_eq!(kernel_size(2048, 2, 1).unwrap(), 5);
    assert_eq!(kernel_size(256, 2, 1).unwrap(), 3);
    assert_eq!(kernel_size(512, 2, 1).unwrap(), 5);
    assert_eq!(channel_dim(3, 2, 1).unwrap(), 128);
    assert_eq!(channel_dim(1, 2, 1).unwrap(), 8);
    for k in [1, 3, 5, 7] {
        let c = channel_dim(k, 2, 1).unwrap() as usize;
        assert_eq!(kernel_size(c, 2, 1).unwrap(), k);
    }
    assert!(kernel_size(1, 2, 1).is_err());
    assert!(channel_dim(4, 2, 1).is_err());
}

// ------------------------------------------------------------ CIS attention

fn cis_oracle(x: &[f64], h: usize, w: usize, c: usize, kernel: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gap = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..h {
            for j in 0..w {
                s += x[(i * w + j) * c + ch];
            }
        }
        gap[ch] = s / (h * w) as f64;
    }
    let half = kernel.len() / 2;
    let mut padded = vec![0.0; c + 2 * half];
    padded[half..half + c].copy_from_slice(&gap);
    let omega: Vec<f64> = (0..c)
        .map(|ch| {
            let z: f64 = (0..kernel.len()).map(|t| kernel[t] * padded[ch + t]).sum();
            1.0 / (1.0 + (-z).exp())
        })
        .collect();
    let out = (0..h * w * c).map(|i| x[i] * omega[i % c]).collect();
    (out, omega)
}

pub fn cis_forward_matches_straight_line_oracle() {
    let (h, w, c) = (4, 4, 8);
    let mut rng = Lcg::new(7);
    for _ in 0..50 {
        let x = rand_vec(&mut rng, h * w * c, -2.0, 2.0);
        let kernel = rand_vec(&mut rng, 3, -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(&[h, w, c], x.clone()).unwrap());
        let kv = tape.leaf(Tensor::vector(kernel.clone()));
        let (out, omega) = cis_forward(&mut tape, xv, kv, c).unwrap();
        let (want_out, want_omega) = cis_oracle(&x, h, w, c, &kernel);
        for (a, b) in tape.value(out).data().iter().zip(&want_out) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        for (a, b) in tape.value(omega.0).data().iter().zip(&want_omega) {
            assert!((a - b).abs() <= 1e-12);
            assert!(*a > 0.0 && *a < 1.0);
        }
    }
}

pub fn cis_trivial_cases() {
    let mut tape = Tape::new();
    let zeros = tape.leaf(Tensor::zeros(&[2, 2, 4]));
    let k = tape.leaf(Tensor::vector(vec![0.3, -0.2, 0.9]));
    let (out, omega) = cis_forward(&mut tape, zeros, k, 4).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(omega.0).data().iter().all(|&v| v == 0.5));

    let x = Tensor::new(&[1, 2, 4], vec![1.0, -3.0, 0.25, 7.0, 2.0, 0.0, -1.5, 4.0]).unwrap();
    let xv = tape.leaf(x.clone());
    let zk = tape.leaf(Tensor::zeros(&[3]));
    let (out, _) = cis_forward(&mut tape, xv, zk, 4).unwrap();
    let half: Vec<f64> = x.data().iter().map(|v| 0.5 * v).collect();
    assert_eq!(tape.value(out).data(), half.as_slice());
    assert!(cis_forward(&mut tape, xv, zk, 5).is_err());
}

// ----------------------------------------------------- instance-to-image

struct AggregationCase {
    n: usize,
    c: usize,
    o: Vec<f64>,
    x: Vec<f64>,
}

fn aggregation_oracle(inst: &AggregationCase) -> Vec<f64> {
    let (n, c) = (inst.n, inst.c);
    // Class-specific objectness by explicit search.
    let mut obar = vec![0.0; n * c];
    for r in 0..n {
        let row = &inst.x[r * c..(r + 1) * c];
        let mut i = 0;
        for k in 1..c {
            if row[k] > row[i] {
                i = k;
            }
        }
        let mut j = c - 1;
        for k in (0..c).rev() {
            if row[k] < row[j] {
                j = k;
            }
        }
        if i == j {
            j = (0..c).rev().find(|&k| k != i).unwrap();
        }
        obar[r * c + i] = inst.o[r];
        obar[r * c + j] = -inst.o[r];
    }
    let mut p = vec![0.0; c];
    for col in 0..c {
        let cmax = (0..n).map(|r| obar[r * c + col]).fold(f64::NEG_INFINITY, f64::max);
        let cden: f64 = (0..n).map(|r| (obar[r * c + col] - cmax).exp()).sum();
        for r in 0..n {
            let row = &inst.x[r * c..(r + 1) * c];
            let rmax = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let rden: f64 = row.iter().map(|v| (v - rmax).exp()).sum();
            let srow = (row[col] - rmax).exp() / rden;
            let scol = (obar[r * c + col] - cmax).exp() / cden;
            p[col] += srow * scol;
        }
    }
    p
}

fn library_p(o: &[f64], x: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let ov = tape.leaf(Tensor::vector(o.to_vec()));
    let xv = tape.leaf(Tensor::new(&[n, c], x.to_vec()).unwrap());
    let obar = build_objectness_matrix(&mut tape, ov, xv).unwrap();
    let p = aggregate_image_prediction(&mut tape, xv, obar).unwrap();
    tape.value(p.0).data().to_vec()
}

pub fn aggregation_matches_loop_oracle() {
    let mut rng = Lcg::new(2024);
    for trial in 0..1000 {
        let n = rng.range_inclusive(1, 64) as usize;
        let c = rng.range_inclusive(2, 20) as usize;
        let mut x = rand_vec(&mut rng, n * c, -4.0, 4.0);
        // Some rows with ties exercise the tie rules.
        if trial % 7 == 0 {
            for v in &mut x[..c] {
                *v = 1.5;
            }
        }
        let inst = AggregationCase {
            n,
            c,
            o: rand_vec(&mut rng, n, -5.0, 5.0),
            x,
        };
        let got = library_p(&inst.o, &inst.x, n, c);
        let want = aggregation_oracle(&inst);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "trial {trial}: {a} vs {b}");
            assert!(*a > 0.0 && *a < 1.0, "trial {trial}: P = {a}");
        }
    }
}

pub fn aggregation_worked_example() {
    let p = library_p(&[1.0, -0.5], &[2.0, 0.0, 0.0, 1.0], 2, 2);
    assert!((p[0] - 0.6498).abs() < 1e-3, "{p:?}");
    assert!((p[1] - 0.5001).abs() < 1e-3, "{p:?}");

    let mut tape = Tape::new();
    let pv = tape.leaf(Tensor::vector(p.clone()));
    let y = ImageLabelVector(vec![true, false]);
    let l = i2itm_loss(&mut tape, sa3_core::i2itm::ImagePrediction(pv), &y, DomainLabel::Target).unwrap();
    let want = (-(p[0].ln()) - (1.0 - p[1]).ln()) / 2.0;
    assert!((tape.value(l).item() - want).abs() < 1e-12);
    assert!((tape.value(l).item() - 0.5621).abs() < 1e-3);
}

pub fn aggregation_is_exactly_invariant_to_proposal_order() {
    let mut rng = Lcg::new(99);
    for _ in 0..300 {
        let n = rng.range_inclusive(2, 40) as usize;
        let c = rng.range_inclusive(2, 12) as usize;
        let o = rand_vec(&mut rng, n, -3.0, 3.0);
        let x = rand_vec(&mut rng, n * c, -3.0, 3.0);
        let base = library_p(&o, &x, n, c);
        // Fisher-Yates with the crate's generator.
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.below(i as u32 + 1) as usize;
            perm.swap(i, j);
        }
        let po: Vec<f64> = perm.iter().map(|&r| o[r]).collect();
        let px: Vec<f64> = perm.iter().flat_map(|&r| x[r * c..(r + 1) * c].to_vec()).collect();
        assert_eq!(library_p(&po, &px, n, c), base);
    }
}

// --------------------------------------------------------- reversal contract

fn model(attention: AttentionMode) -> Model {
    let detector = DetectorConfig {
        image_size: 32,
        ..DetectorConfig::default()
    };
    Model::new(ModelConfig { detector, attention }, 11).unwrap()
}

type DomainLossFn = fn(&mut Tape, &Params<Var>, &sa3_core::detector::FeaturePair, Var, Reversal) -> Var;

fn local_fn(tape: &mut Tape, v: &Params<Var>, f: &sa3_core::detector::FeaturePair, _att: Var, r: Reversal) -> Var {
    local_domain_loss(tape, &v.local, f.shallow, DomainLabel::Target, r).unwrap()
}

fn global_fn(tape: &mut Tape, v: &Params<Var>, _f: &sa3_core::detector::FeaturePair, att: Var, r: Reversal) -> Var {
    global_domain_loss(tape, &v.global, att, DomainLabel::Source, r).unwrap()
}

/// Loss value and gradient of every parameter, by name.
fn domain_grads(m: &Model, image: &Tensor, f: DomainLossFn, r: Reversal) -> (f64, Vec<(String, Vec<f64>)>) {
    let mut tape = Tape::new();
    let vars = m.params.bind(&mut tape);
    let out = m.forward_image(&mut tape, &vars, image, &[]).unwrap();
    let loss = f(&mut tape, &vars, &out.features, out.attended, r);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss).unwrap();
    let names: Vec<String> = m.params.named().into_iter().map(|(n, _)| n).collect();
    let flat = vars.named().into_iter().map(|(_, v)| grads.get(*v).unwrap().data().to_vec());
    (value, names.into_iter().zip(flat).collect())
}

pub fn reversal_negates_feature_gradients_exactly() {
    let mut rng = Lcg::new(5);
    let image = Tensor::new(&[32, 32, 3], rand_vec(&mut rng, 32 * 32 * 3, 0.0, 1.0)).unwrap();
    for attention in [AttentionMode::Cis, AttentionMode::None] {
        let m = model(attention);
        for f in [local_fn as DomainLossFn, global_fn as DomainLossFn] {
            let (v_rev, g_rev) = domain_grads(&m, &image, f, Reversal::Reversed);
            let (v_id, g_id) = domain_grads(&m, &image, f, Reversal::Identity);
            assert_eq!(v_rev.to_bits(), v_id.to_bits(), "forward must be bit-identical");
            let mut checked_nonzero = false;
            for ((name, a), (_, b)) in g_rev.iter().zip(&g_id) {
                let feature_side = name.starts_with("backbone.") || name.starts_with("attention.");
                for (x, y) in a.iter().zip(b) {
                    if feature_side {
                        assert!(*x == -*y, "{name}: {x} vs {y}");
                        checked_nonzero |= *y != 0.0;
                    } else {
                        assert_eq!(x.to_bits(), y.to_bits(), "{name}");
                    }
                }
            }
            assert!(checked_nonzero);
        }
    }
}

// ------------------------------------------------ global domain classifier

fn small_global(rng: &mut Lcg, c: usize, hidden: usize) -> GlobalClassifier<Tensor> {
    GlobalClassifier {
        conv: Conv::init(1, c, hidden, 0.5, rng),
        fc: Linear::init(hidden, 1, 0.5, rng),
    }
}

fn bind_global(tape: &mut Tape, g: &GlobalClassifier<Tensor>) -> GlobalClassifier<Var> {
    GlobalClassifier {
        conv: g.conv.bind(tape),
        fc: g.fc.bind(tape),
    }
}

pub fn opposite_label_copies_cancel_at_even_odds() {
    let mut rng = Lcg::new(21);
    let (c, hidden) = (8, 6);
    let mut clf = small_global(&mut rng, c, hidden);
    let feat = Tensor::new(&[2, 2, c], rand_vec(&mut rng, 4 * c, -1.0, 1.0)).unwrap();
    // Shift the bias so the shared logit is exactly zero.
    let logit0 = {
        let mut tape = Tape::new();
        let g = bind_global(&mut tape, &clf);
        let x = tape.leaf(feat.clone());
        let l = global_domain_logit(&mut tape, &g, x).unwrap();
        tape.value(l).item()
    };
    clf.fc.bias.data_mut()[0] -= logit0;

    let mut tape = Tape::new();
    let g = bind_global(&mut tape, &clf);
    let x = tape.leaf(feat.clone().with_grad());
    let ls = global_domain_loss(&mut tape, &g, x, DomainLabel::Source, Reversal::Reversed).unwrap();
    let lt = global_domain_loss(&mut tape, &g, x, DomainLabel::Target, Reversal::Reversed).unwrap();
    let total = tape.add(ls, lt).unwrap();
    let grads = tape.backward(total).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));

    // One copy alone: the head's bias gradient is the BCE gradient p - d.
    for (d, want) in [(DomainLabel::Source, 0.5), (DomainLabel::Target, -0.5)] {
        let mut tape = Tape::new();
        let g = bind_global(&mut tape, &clf);
        let xf = tape.leaf(feat.clone());
        let l = global_domain_loss(&mut tape, &g, xf, d, Reversal::Reversed).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!((grads.get(g.fc.bias).unwrap().data()[0] - want).abs() < 1e-15);
    }
}

/// Inputs in each domain are `±1` plus bounded noise per entry, so the two
/// domains never overlap.
const NOISE: f64 = 0.5;

struct ToyOutcome {
    accuracy: f64,
    /// Fraction of the extractor's output aligned with the domain shift.
    separation: (f64, f64),
    norm: (f64, f64),
}

fn alignment(w: &Tensor, c: usize) -> (f64, f64) {
    let d = w.data();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    let along: f64 = (0..c)
        .map(|o| (0..c).map(|i| d[i * c + o]).sum::<f64>().powi(2))
        .sum::<f64>()
        .sqrt();
    (along / norm, norm)
}

/// A 1×1 linear extractor feeding the reversed global classifier, trained
/// by plain SGD. The classifier carries an L2 penalty and learns faster than
/// the extractor, which keeps the min-max game from spiralling outwards.
fn adversarial_toy(seed: u64) -> ToyOutcome {
    let (c, hidden, side) = (4, 8, 2);
    let (lr, extractor_lr, decay) = (0.3, 0.03, 1.0);
    let mut rng = Lcg::new(seed);
    let sample = |rng: &mut Lcg, d: DomainLabel| {
        let shift = if d == DomainLabel::Source { 1.0 } else { -1.0 };
        let data = (0..side * side * c).map(|_| shift + rng.uniform(-NOISE, NOISE)).collect();
        Tensor::new(&[side, side, c], data).unwrap()
    };
    let mut extractor = Conv::init(1, c, c, 0.5, &mut rng);
    let mut clf = small_global(&mut rng, c, hidden);
    let (sep0, norm0) = alignment(&extractor.weight, c);
    for _ in 0..200 {
        let mut tape = Tape::new();
        let e = extractor.bind(&mut tape);
        let g = bind_global(&mut tape, &clf);
        let mut total = tape.constant(Tensor::scalar(0.0));
        for d in [DomainLabel::Source, DomainLabel::Target, DomainLabel::Source, DomainLabel::Target] {
            let x = tape.constant(sample(&mut rng, d));
            let f = e.apply(&mut tape, x, 1, 0).unwrap();
            let l = global_domain_loss(&mut tape, &g, f, d, Reversal::Reversed).unwrap();
            total = tape.add(total, l).unwrap();
        }
        let grads = tape.backward(total).unwrap();
        let step = |t: &mut Tensor, v: Var, rate: f64, decay: f64| {
            let gv = grads.get(v).unwrap().data().to_vec();
            for (w, gw) in t.data_mut().iter_mut().zip(gv) {
                *w -= rate * (gw + decay * *w);
            }
        };
        step(&mut extractor.weight, e.weight, extractor_lr, 0.0);
        step(&mut extractor.bias, e.bias, extractor_lr, 0.0);
        step(&mut clf.conv.weight, g.conv.weight, lr, decay);
        step(&mut clf.conv.bias, g.conv.bias, lr, decay);
        step(&mut clf.fc.weight, g.fc.weight, lr, decay);
        step(&mut clf.fc.bias, g.fc.bias, lr, decay);
    }
    let mut correct = 0;
    let total = 400;
    for i in 0..total {
        let d = if i % 2 == 0 { DomainLabel::Source } else { DomainLabel::Target };
        let mut tape = Tape::new();
        let e = extractor.bind(&mut tape);
        let g = bind_global(&mut tape, &clf);
        let x = tape.constant(sample(&mut rng, d));
        let f = e.apply(&mut tape, x, 1, 0).unwrap();
        let logit = global_domain_logit(&mut tape, &g, f).unwrap();
        if (tape.value(logit).item() > 0.0) == (d == DomainLabel::Target) {
            correct += 1;
        }
    }
    let (sep1, norm1) = alignment(&extractor.weight, c);
    ToyOutcome {
        accuracy: correct as f64 / total as f64,
        separation: (sep0, sep1),
        norm: (norm0, norm1),
    }
}

pub fn adversarial_training_confuses_the_domain_classifier() {
    for seed in 0..6 {
        let out = adversarial_toy(seed);
        assert!(
            (0.35..=0.65).contains(&out.accuracy),
            "seed {seed}: held-out domain accuracy {}",
            out.accuracy
        );
        // The confusion comes from dropping the domain direction, not from
        // shrinking the extractor to nothing.
        assert!(out.separation.1 < 0.25 * out.separation.0, "seed {seed}: {:?}", out.separation);
        assert!(out.norm.1 > 0.5 * out.norm.0, "seed {seed}: {:?}", out.norm);
    }
}

// ------------------------------------------------------------------ AP

fn oracle_iou(a: &Bbox, b: &Bbox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    inter / union
}

/// Precision/recall of the detections scoring at least `tau`, matched from
/// scratch, then the all-point interpolated area.
fn sweep_ap(dets: &[ScoredBox], gt: &ClassGroundTruth, thr: f64) -> f64 {
    let n_gt: usize = gt.boxes.iter().map(|b| b.len()).sum();
    let mut taus: Vec<f64> = dets.iter().map(|d| d.score).collect();
    taus.sort_by(|a, b| b.total_cmp(a));
    taus.dedup();
    let mut points = Vec::new();
    for &tau in &taus {
        let mut kept: Vec<&ScoredBox> = dets.iter().filter(|d| d.score >= tau).collect();
        kept.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image.cmp(&b.image)).then(a.order.cmp(&b.order)));
        let mut used: Vec<Vec<bool>> = gt.boxes.iter().map(|b| vec![false; b.len()]).collect();
        let mut tp = 0;
        for d in &kept {
            let mut best = None;
            let mut best_v = thr;
            for (g, b) in gt.boxes[d.image].iter().enumerate() {
                let v = oracle_iou(&d.bbox, b);
                if !used[d.image][g] && v >= best_v && best.is_none_or(|_| v > best_v) {
                    best = Some(g);
                    best_v = v;
                }
            }
            if let Some(g) = best {
                used[d.image][g] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / kept.len() as f64));
    }
    // Recall moves in steps of 1 / n_gt; each step is worth the best
    // precision reached at or beyond it.
    (1..=n_gt)
        .map(|m| {
            let r = m as f64 / n_gt as f64;
            points
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
                / n_gt as f64
        })
        .sum()
}

fn rand_box(rng: &mut Lcg) -> Bbox {
    let x = rng.uniform(0.0, 40.0);
    let y = rng.uniform(0.0, 40.0);
    Bbox::new(x, y, x + rng.uniform(4.0, 20.0), y + rng.uniform(4.0, 20.0)).unwrap()
}

fn jitter(rng: &mut Lcg, b: &Bbox) -> Bbox {
    let j = |rng: &mut Lcg| rng.uniform(-3.0, 3.0);
    let x1 = b.x1 + j(rng);
    let y1 = b.y1 + j(rng);
    Bbox::new(x1, y1, (b.x2 + j(rng)).max(x1 + 1.0), (b.y2 + j(rng)).max(y1 + 1.0)).unwrap()
}

pub fn voc_ap_matches_threshold_sweep() {
    let mut rng = Lcg::new(314);
    for trial in 0..200 {
        let images = rng.range_inclusive(1, 4) as usize;
        let mut gt = ClassGroundTruth::new(images);
        for boxes in gt.boxes.iter_mut() {
            for _ in 0..rng.range_inclusive(0, 3) {
                boxes.push(rand_box(&mut rng));
            }
        }
        if gt.count() == 0 {
            gt.boxes[0].push(rand_box(&mut rng));
        }
        let mut dets = Vec::new();
        for image in 0..images {
            let n = rng.range_inclusive(0, 6) as usize;
            for order in 0..n {
                let near = &gt.boxes[image];
                let bbox = if !near.is_empty() && rng.next_f64() < 0.7 {
                    let k = rng.below(near.len() as u32) as usize;
                    jitter(&mut rng, &near[k])
                } else {
                    rand_box(&mut rng)
                };
                dets.push(ScoredBox {
                    image,
                    order,
                    score: rng.next_f64(),
                    bbox,
                });
            }
        }
        let got = voc_ap(&dets, &gt, 0.5).unwrap();
        let want = sweep_ap(&dets, &gt, 0.5);
        assert!((got - want).abs() <= 1e-9, "trial {trial}: {got} vs {want}");
    }
}

fn one_image(boxes: Vec<Bbox>) -> ClassGroundTruth {
    ClassGroundTruth { boxes: vec![boxes] }
}

fn det(order: usize, score: f64, b: Bbox) -> ScoredBox {
    ScoredBox {
        image: 0,
        order,
        score,
        bbox: b,
    }
}

pub fn hand_walked_ap_examples() {
    let g = Bbox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let g2 = Bbox::new(20.0, 20.0, 30.0, 30.0).unwrap();
    let near = Bbox::new(0.0, 0.0, 10.0, 8.0).unwrap();
    assert!((oracle_iou(&g, &near) - 0.8).abs() < 1e-12);

    assert_eq!(voc_ap(&[det(0, 0.9, near)], &one_image(vec![g]), 0.5), Some(1.0));
    assert_eq!(
        voc_ap(&[det(0, 0.9, g), det(1, 0.8, near)], &one_image(vec![g]), 0.5),
        Some(1.0)
    );
    assert_eq!(voc_ap(&[det(0, 0.9, g)], &one_image(vec![g, g2]), 0.5), Some(0.5));
    assert_eq!(voc_ap(&[], &one_image(vec![g]), 0.5), Some(0.0));
    assert_eq!(voc_ap(&[det(0, 0.9, g)], &one_image(vec![]), 0.5), None);
}

pub fn oracle_detector_scores_perfect_map() {
    let (_, test) = generate_benchmark(&BenchmarkConfig {
        seed: 4,
        train_per_domain: 1,
        test: 30,
        ..BenchmarkConfig::default()
    })
    .unwrap();
    let oracle: Vec<Vec<Detection>> = test
        .records
        .iter()
        .map(|r| {
            r.instances
                .iter()
                .map(|g| Detection {
                    class_id: g.class_id,
                    score: 1.0,
                    bbox: g.bbox,
                })
                .collect()
        })
        .collect();
    let report = evaluate_detections(&test, &oracle, 0.5);
    assert_eq!(report.map, 1.0);
    assert!(report.per_class_ap.iter().all(|c| c.ap == 1.0 && c.n_gt > 0));

    let empty = vec![Vec::new(); test.records.len()];
    let report = evaluate_detections(&test, &empty, 0.5);
    assert_eq!(report.map, 0.0);
}

pub fn untrained_model_scores_near_zero() {
    let (_, test) = generate_benchmark(&BenchmarkConfig {
        seed: 6,
        train_per_domain: 1,
        test: 50,
        ..BenchmarkConfig::default()
    })
    .unwrap();
    let m = Model::new(
        ModelConfig {
            detector: DetectorConfig::default(),
            attention: AttentionMode::Cis,
        },
        1,
    )
    .unwrap();
    let report = sa3_core::eval::evaluate(&m, &test).unwrap();
    assert!(report.map < 0.2, "mAP {}", report.map);
    assert_eq!(report.per_class_ap.len(), 3);
    assert_eq!(report.n_images, 50);
    assert!(report.per_class_ap.iter().all(|c| (0.0..=1.0).contains(&c.ap)));
}
