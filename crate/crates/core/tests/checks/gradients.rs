//! Central finite differences against tape gradients for every primitive
//! and every training loss.

use sa3_core::aiam::{
    global_domain_loss, image_multilabel_loss, local_domain_loss, DomainLabel, GlobalClassifier, ImageLabelVector,
    LocalClassifier, Reversal,
};
use sa3_core::detector::{det_head, det_loss, rpn_forward, rpn_loss, Bbox, GtInstance, HeadOutput};
use sa3_core::i2itm::{aggregate_image_prediction, build_objectness_matrix, i2itm_loss};
use sa3_core::layers::{Conv, Linear};
use sa3_core::rng::Lcg;
use sa3_core::{Axis, Result, Tape, Tensor, Var};

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;
const TRIALS: u64 = 100;

fn rand_tensor(rng: &mut Lcg, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, with an absolute
/// floor for gradients that vanish.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(a).max(norm(b)).max(1e-6)
}

/// Builds the graph once for tape gradients, then once per perturbation.
/// Non-scalar outputs are contracted with fixed random weights so every
/// output element contributes. `signs[i] = -1` expects the tape gradient
/// of input `i` to be the negated derivative (behind a reversal layer).
fn check_signed<F>(inputs: &[Tensor], signs: &[f64], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let weights = |tape: &mut Tape, out: Var| -> Var {
        let n = tape.value(out).len();
        if n == 1 {
            return out;
        }
        let mut rng = Lcg::new(0xfeed);
        let w = Tensor::new(tape.shape(out), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let w = tape.constant(w);
        let p = tape.mul(out, w).unwrap();
        tape.sum(p)
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        let l = weights(&mut tape, out);
        tape.value(l).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone().with_grad())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = weights(&mut tape, out);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let g = grads.get(vars[i]).expect("gradient for every input");
        let mut fd = vec![0.0; input.len()];
        for (k, slot) in fd.iter_mut().enumerate() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[i].data_mut()[k] += STEP;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[i].data_mut()[k] -= STEP;
            *slot = signs[i] * (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(g.data(), &fd));
    }
    worst
}

fn check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_signed(inputs, &vec![1.0; inputs.len()], f)
}

/// Runs `trials` random instances of one primitive and asserts the worst
/// error.
fn sweep<G, F>(name: &str, trials: u64, mut gen: G, f: F)
where
    G: FnMut(&mut Lcg) -> Vec<Tensor>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let mut rng = Lcg::new(1000 + t);
        let inputs = gen(&mut rng);
        worst = worst.max(check(&inputs, &f));
    }
    assert!(worst <= TOL, "{name}: relative error {worst:e}");
}

/// Uniform in [-2, 2] but at least `gap` away from zero, for kinked ops.
fn away_from_zero(rng: &mut Lcg, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.uniform(-2.0, 2.0);
            if v.abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn elementwise_ops() {
    let two = |rng: &mut Lcg| vec![rand_tensor(rng, &[3, 4], -2.0, 2.0), rand_tensor(rng, &[3, 4], -2.0, 2.0)];
    sweep("add", TRIALS, two, |t, v| t.add(v[0], v[1]));
    sweep("sub", TRIALS, two, |t, v| t.sub(v[0], v[1]));
    sweep("mul", TRIALS, two, |t, v| t.mul(v[0], v[1]));
    let chan = |rng: &mut Lcg| vec![rand_tensor(rng, &[2, 3, 4], -2.0, 2.0), rand_tensor(rng, &[4], -2.0, 2.0)];
    sweep("mul_channel", TRIALS, chan, |t, v| t.mul_channel(v[0], v[1]));
    sweep("add_channel", TRIALS, chan, |t, v| t.add_channel(v[0], v[1]));
    let one = |rng: &mut Lcg| vec![rand_tensor(rng, &[5], -2.0, 2.0)];
    sweep("scale", TRIALS, one, |t, v| Ok(t.scale(v[0], -1.7)));
    sweep("offset", TRIALS, one, |t, v| Ok(t.offset(v[0], 0.3)));
    sweep("sigmoid", TRIALS, one, |t, v| Ok(t.sigmoid(v[0])));
    sweep("relu", TRIALS, |rng| vec![away_from_zero(rng, &[6], 1e-3)], |t, v| Ok(t.relu(v[0])));
    sweep("log", TRIALS, |rng| vec![rand_tensor(rng, &[5], 0.2, 2.0)], |t, v| Ok(t.log(v[0])));
}

pub fn gradient_reversal_negates_exactly() {
    let mut rng = Lcg::new(3);
    for _ in 0..TRIALS {
        let x = rand_tensor(&mut rng, &[4], -2.0, 2.0);
        let err = check_signed(&[x], &[-1.0], |t, v| Ok(t.gradient_reversal(v[0])));
        assert!(err <= TOL);
    }
}

pub fn linear_algebra_ops() {
    sweep(
        "matmul",
        TRIALS,
        |rng| vec![rand_tensor(rng, &[3, 4], -2.0, 2.0), rand_tensor(rng, &[4, 2], -2.0, 2.0)],
        |t, v| t.matmul(v[0], v[1]),
    );
    for (c, k) in [(8, 3), (5, 5), (3, 5), (1, 1)] {
        sweep(
            "conv1d",
            TRIALS / 4,
            |rng| vec![rand_tensor(rng, &[c], -2.0, 2.0), rand_tensor(rng, &[k], -2.0, 2.0)],
            |t, v| t.conv1d(v[0], v[1]),
        );
    }
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
        sweep(
            "conv2d",
            TRIALS / 4,
            |rng| {
                vec![
                    rand_tensor(rng, &[5, 4, 2], -2.0, 2.0),
                    rand_tensor(rng, &[k, k, 2, 3], -2.0, 2.0),
                    rand_tensor(rng, &[3], -2.0, 2.0),
                ]
            },
            |t, v| t.conv2d(v[0], v[1], v[2], stride, pad),
        );
    }
}

pub fn reductions_and_normalisers() {
    let m = |rng: &mut Lcg| vec![rand_tensor(rng, &[3, 4], -2.0, 2.0)];
    sweep("softmax rows", TRIALS, m, |t, v| t.softmax(v[0], Axis::Row));
    sweep("softmax columns", TRIALS, m, |t, v| t.softmax(v[0], Axis::Column));
    sweep("sum", TRIALS, m, |t, v| Ok(t.sum(v[0])));
    sweep("mean", TRIALS, m, |t, v| Ok(t.mean(v[0])));
    sweep("sum_rows", TRIALS, m, |t, v| t.sum_rows(v[0]));
    sweep(
        "global_avg_pool",
        TRIALS,
        |rng| vec![rand_tensor(rng, &[3, 2, 4], -2.0, 2.0)],
        |t, v| t.global_avg_pool(v[0]),
    );
}

pub fn losses_on_primitives() {
    let mut rng = Lcg::new(77);
    let labels: Vec<f64> = (0..6).map(|_| rng.below(2) as f64).collect();
    sweep(
        "bce",
        TRIALS,
        |rng| vec![rand_tensor(rng, &[6], 0.05, 0.95)],
        |t, v| t.bce_loss(v[0], &labels),
    );
    // keep |pred - target| off the quadratic/linear seam at beta
    let target: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.8).collect();
    let beta = 0.25;
    sweep(
        "smooth_l1",
        TRIALS,
        |rng| {
            let data = target
                .iter()
                .map(|&y| loop {
                    let p = rng.uniform(-2.0, 2.0);
                    if ((p - y).abs() - beta).abs() > 1e-3 {
                        break p;
                    }
                })
                .collect();
            vec![Tensor::new(&[6], data).unwrap()]
        },
        |t, v| t.smooth_l1(v[0], &target, beta),
    );
    let classes = [0usize, 2, 1, 2];
    sweep(
        "softmax_cross_entropy",
        TRIALS,
        |rng| vec![rand_tensor(rng, &[4, 3], -2.0, 2.0)],
        |t, v| t.softmax_cross_entropy(v[0], &classes),
    );
}

pub fn indexing_ops() {
    let m = |rng: &mut Lcg| vec![rand_tensor(rng, &[4, 3], -2.0, 2.0)];
    sweep("gather_rows", TRIALS, m, |t, v| t.gather_rows(v[0], &[2, 0, 2]));
    sweep("columns", TRIALS, m, |t, v| t.columns(v[0], 1, 3));
    sweep("reshape", TRIALS, m, |t, v| t.reshape(v[0], &[2, 6]));
    sweep(
        "scatter_pairs",
        TRIALS,
        |rng| vec![rand_tensor(rng, &[3], -2.0, 2.0)],
        |t, v| t.scatter_pairs(v[0], 4, &[(0, 3), (2, 1), (3, 0)]),
    );
    let boxes = [[0.3, 0.2, 2.7, 1.9], [-0.5, 1.0, 1.0, 3.5], [1.25, 1.25, 1.75, 1.75]];
    sweep(
        "bilinear_crop",
        TRIALS,
        |rng| vec![rand_tensor(rng, &[3, 3, 2], -2.0, 2.0)],
        |t, v| t.bilinear_crop(v[0], &boxes, 3),
    );
}

// --- training losses -------------------------------------------------------

const LOSS_INSTANCES: u64 = 24;

fn conv_params(rng: &mut Lcg, k: usize, cin: usize, cout: usize, std: f64) -> [Tensor; 2] {
    [rand_tensor(rng, &[k, k, cin, cout], -std, std), rand_tensor(rng, &[cout], -std, std)]
}

fn linear_params(rng: &mut Lcg, i: usize, o: usize, std: f64) -> [Tensor; 2] {
    [rand_tensor(rng, &[i, o], -std, std), rand_tensor(rng, &[o], -std, std)]
}

fn conv(v: &[Var]) -> Conv<Var> {
    Conv { weight: v[0], bias: v[1] }
}

fn linear(v: &[Var]) -> Linear<Var> {
    Linear { weight: v[0], bias: v[1] }
}

pub fn rpn_loss_gradients() {
    // 2×2 deep map at stride 16 over a 32×32 image; 32 px anchors centred
    // at (8,8) ... (24,24). The GT gives anchor 0 IoU 0.56 (positive),
    // anchors 1 and 2 0.32 (ignored) and anchor 3 0.19 (negative).
    let gts = [GtInstance { bbox: Bbox::new(0.0, 0.0, 24.0, 24.0).unwrap(), class_id: 0 }];
    let mut worst: f64 = 0.0;
    for t in 0..LOSS_INSTANCES {
        let mut rng = Lcg::new(200 + t);
        let deep = rand_tensor(&mut rng, &[2, 2, 3], -2.0, 2.0);
        let [w, b] = conv_params(&mut rng, 1, 3, 5, 0.05);
        let err = check(&[deep, w, b], |tape, v| {
            let head = conv(&v[1..]);
            let out = rpn_forward(tape, &head, v[0], (32, 32), 16, 32.0, 4)?;
            let deltas = tape.value(out.anchor_deltas).data().to_vec();
            let targets = sa3_core::detector::encode(&out.anchors[0], &gts[0].bbox);
            for (d, y) in deltas[..4].iter().zip(targets) {
                assert!(((d - y).abs() - 1.0 / 9.0).abs() > 1e-4, "instance sits on the smooth-L1 seam");
            }
            rpn_loss(tape, &out, &gts, DomainLabel::Source)
        });
        worst = worst.max(err);
    }
    assert!(worst <= TOL, "rpn_loss: {worst:e}");
}

fn head_forward(tape: &mut Tape, v: &[Var], classes: usize) -> Result<HeadOutput> {
    det_head(tape, &linear(&v[1..3]), &linear(&v[3..5]), v[0], classes)
}

pub fn det_loss_gradients() {
    let classes = 2;
    let gts = [
        GtInstance { bbox: Bbox::new(2.0, 2.0, 20.0, 20.0).unwrap(), class_id: 1 },
        GtInstance { bbox: Bbox::new(30.0, 30.0, 60.0, 60.0).unwrap(), class_id: 0 },
    ];
    // IoUs with the nearest GT: 0.89, 0.84 (foreground) and 0 (background)
    let boxes = [
        Bbox::new(2.0, 2.0, 20.0, 18.0).unwrap(),
        Bbox::new(32.0, 30.0, 60.0, 57.0).unwrap(),
        Bbox::new(40.0, 0.0, 60.0, 20.0).unwrap(),
    ];
    let mut worst: f64 = 0.0;
    for t in 0..LOSS_INSTANCES {
        let mut rng = Lcg::new(300 + t);
        let pooled = rand_tensor(&mut rng, &[3, 8], -2.0, 2.0);
        let [w1, b1] = linear_params(&mut rng, 8, 6, 0.5);
        let [w2, b2] = linear_params(&mut rng, 6, classes + 5, 0.5);
        let err = check(&[pooled, w1, b1, w2, b2], |tape, v| {
            let head = head_forward(tape, v, classes)?;
            det_loss(tape, &boxes, &head, &gts, classes, DomainLabel::Source)
        });
        worst = worst.max(err);
    }
    assert!(worst <= TOL, "det_loss: {worst:e}");
}

pub fn domain_loss_gradients() {
    let mut worst: f64 = 0.0;
    for t in 0..LOSS_INSTANCES {
        let mut rng = Lcg::new(400 + t);
        let d = if t % 2 == 0 { DomainLabel::Source } else { DomainLabel::Target };
        let shallow = rand_tensor(&mut rng, &[3, 3, 4], -2.0, 2.0);
        let [hw, hb] = conv_params(&mut rng, 1, 4, 5, 0.8);
        let [ow, ob] = conv_params(&mut rng, 1, 5, 1, 0.8);
        let deep = rand_tensor(&mut rng, &[2, 2, 6], -2.0, 2.0);
        let [gw, gb] = conv_params(&mut rng, 1, 6, 4, 0.8);
        let [fw, fb] = linear_params(&mut rng, 4, 1, 0.8);
        let inputs = [shallow, hw, hb, ow, ob, deep, gw, gb, fw, fb];
        let loss = |reversal: Reversal| {
            move |tape: &mut Tape, v: &[Var]| {
                let local = LocalClassifier { hidden: conv(&v[1..3]), out: conv(&v[3..5]) };
                let global = GlobalClassifier { conv: conv(&v[6..8]), fc: linear(&v[8..10]) };
                let l = local_domain_loss(tape, &local, v[0], d, reversal)?;
                let g = global_domain_loss(tape, &global, v[5], d, reversal)?;
                tape.add(l, g)
            }
        };
        worst = worst.max(check(&inputs, loss(Reversal::Identity)));
        // behind the reversal layer only the feature inputs flip sign
        let mut signs = vec![1.0; inputs.len()];
        signs[0] = -1.0;
        signs[5] = -1.0;
        worst = worst.max(check_signed(&inputs, &signs, loss(Reversal::Reversed)));
    }
    assert!(worst <= TOL, "domain losses: {worst:e}");
}

pub fn image_classifier_gradients() {
    let mut worst: f64 = 0.0;
    for t in 0..LOSS_INSTANCES {
        let mut rng = Lcg::new(500 + t);
        let y = ImageLabelVector((0..3).map(|_| rng.below(2) == 1).collect());
        let deep = rand_tensor(&mut rng, &[2, 2, 5], -2.0, 2.0);
        let [w, b] = linear_params(&mut rng, 5, 3, 1.0);
        worst = worst.max(check(&[deep, w, b], |tape, v| image_multilabel_loss(tape, &linear(&v[1..]), v[0], &y)));
    }
    assert!(worst <= TOL, "image classifier: {worst:e}");
}

/// Rows whose top two and bottom two entries are at least `gap` apart, so
/// the argmax/argmin assignment cannot flip under a perturbation.
fn separated_rows(rng: &mut Lcg, n: usize, c: usize, gap: f64) -> Tensor {
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        loop {
            let row: Vec<f64> = (0..c).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let mut s = row.clone();
            s.sort_by(f64::total_cmp);
            if s[c - 1] - s[c - 2] >= gap && s[1] - s[0] >= gap {
                data.extend(row);
                break;
            }
        }
    }
    Tensor::new(&[n, c], data).unwrap()
}

pub fn i2itm_loss_gradients() {
    let mut worst: f64 = 0.0;
    for t in 0..LOSS_INSTANCES {
        let mut rng = Lcg::new(600 + t);
        let (n, c) = (2 + t as usize % 5, 2 + t as usize % 3);
        let y = ImageLabelVector((0..c).map(|_| rng.below(2) == 1).collect());
        let o = rand_tensor(&mut rng, &[n], -2.0, 2.0);
        let x = separated_rows(&mut rng, n, c, 0.1);
        worst = worst.max(check(&[o, x], |tape, v| {
            let obar = build_objectness_matrix(tape, v[0], v[1])?;
            let p = aggregate_image_prediction(tape, v[1], obar)?;
            i2itm_loss(tape, p, &y, DomainLabel::Target)
        }));
    }
    assert!(worst <= TOL, "i2itm loss: {worst:e}");
}
