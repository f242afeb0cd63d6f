#![allow(dead_code)]

use bcp_core::label::LabelMap;
use bcp_core::loss::{self, LossConfig};
use bcp_core::maskgen::Mask;
use bcp_core::segnet::{self, NetConfig};
use bcp_core::tensor::gradcheck::{gradcheck, GradCheck};
use bcp_core::tensor::ops::BinaryOp;
use bcp_core::{Graph, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;

pub type Program = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub wrt: Vec<usize>,
    pub f: Program,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with `|x| >= 0.05`, clear of the ReLU kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 1e-2 apart, so pooling windows have clear maxima.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), idx.iter().map(|&i| i as f64 * 1e-2 - 0.3).collect()).unwrap()
}

fn labels(rng: &mut ChaCha8Rng, shape: &[usize], k: usize) -> LabelMap {
    let n: usize = shape.iter().product();
    LabelMap::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0..k) as u8).collect(), k).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, shape: &[usize]) -> Mask {
    let n: usize = shape.iter().product();
    Mask::from_bits(shape.to_vec(), (0..n).map(|_| rng.gen_range(0..2u8)).collect()).unwrap()
}

pub fn tiny_net(seed: u64) -> NetConfig {
    NetConfig {
        in_channels: 1,
        num_classes: 3,
        base_width: 2,
        depth: 2,
        seed,
    }
}

/// Every differentiable op plus the loss and network compositions.
pub fn grad_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<Case> = Vec::new();
    let mut push = |name, inputs, wrt, f: Program| cases.push(Case { name, inputs, wrt, f });

    push(
        "conv2d 3x3",
        vec![
            uniform(&mut rng, &[2, 3, 5, 6], -1.0, 1.0),
            uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[4], -1.0, 1.0),
        ],
        vec![],
        Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1, 1)),
    );
    push(
        "conv2d stride 2",
        vec![
            uniform(&mut rng, &[1, 2, 7, 7], -1.0, 1.0),
            uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[3], -1.0, 1.0),
        ],
        vec![],
        Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2, 1)),
    );
    push(
        "conv2d 1x1",
        vec![
            uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0),
            uniform(&mut rng, &[2, 3, 1, 1], -1.0, 1.0),
            uniform(&mut rng, &[2], -1.0, 1.0),
        ],
        vec![],
        Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1, 0)),
    );
    push(
        "relu",
        vec![off_zero(&mut rng, &[2, 3, 4, 4])],
        vec![],
        Box::new(|t, v| Ok(t.relu(v[0]))),
    );
    push(
        "maxpool2",
        vec![distinct(&mut rng, &[2, 2, 4, 6])],
        vec![],
        Box::new(|t, v| t.maxpool2(v[0])),
    );
    push(
        "upsample2x",
        vec![uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0)],
        vec![],
        Box::new(|t, v| t.upsample2x(v[0])),
    );
    push(
        "channel_concat",
        vec![
            uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0),
        ],
        vec![],
        Box::new(|t, v| t.channel_concat(v[0], v[1])),
    );
    push(
        "softmax_channels",
        vec![uniform(&mut rng, &[2, 4, 3, 3], -3.0, 3.0)],
        vec![],
        Box::new(|t, v| t.softmax_channels(v[0])),
    );
    for (name, op) in [
        ("add (broadcast)", BinaryOp::Add),
        ("sub (broadcast)", BinaryOp::Sub),
        ("mul (broadcast)", BinaryOp::Mul),
    ] {
        push(
            name,
            vec![
                uniform(&mut rng, &[2, 3, 4], -1.0, 1.0),
                uniform(&mut rng, &[1, 3, 1], -1.0, 1.0),
            ],
            vec![],
            Box::new(move |t, v| t.binary(op, v[0], v[1])),
        );
    }
    push(
        "div (broadcast)",
        vec![
            uniform(&mut rng, &[2, 3, 4], -1.0, 1.0),
            uniform(&mut rng, &[2, 1, 4], 0.5, 2.0),
        ],
        vec![],
        Box::new(|t, v| t.binary(BinaryOp::Div, v[0], v[1])),
    );
    push(
        "log_clamped",
        vec![uniform(&mut rng, &[2, 3, 4], 0.1, 2.0)],
        vec![],
        Box::new(|t, v| Ok(t.log_clamped(v[0], 1e-12))),
    );
    push(
        "sum_channels",
        vec![uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0)],
        vec![],
        Box::new(|t, v| t.sum_channels(v[0])),
    );
    push(
        "channel_sums",
        vec![uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0)],
        vec![],
        Box::new(|t, v| t.channel_sums(v[0])),
    );
    push(
        "reduce_sum",
        vec![uniform(&mut rng, &[2, 3, 4], -1.0, 1.0)],
        vec![],
        Box::new(|t, v| Ok(t.reduce_sum(v[0]))),
    );
    push(
        "reduce_mean",
        vec![uniform(&mut rng, &[2, 3, 4], -1.0, 1.0)],
        vec![],
        Box::new(|t, v| Ok(t.reduce_mean(v[0]))),
    );
    push(
        "scale",
        vec![uniform(&mut rng, &[2, 3], -1.0, 1.0)],
        vec![],
        Box::new(|t, v| Ok(t.scale(v[0], -1.7))),
    );
    push(
        "add_scalar",
        vec![uniform(&mut rng, &[2, 3], -1.0, 1.0)],
        vec![],
        Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3))),
    );

    // losses, differentiated through softmax w.r.t. logits
    let y = labels(&mut rng, &[4, 4], 3);
    let target = LabelMap::stack_one_hot::<f64>(&[y.clone(), labels(&mut rng, &[4, 4], 3)]).unwrap();
    let tgt = target.clone();
    push(
        "per_voxel_ce",
        vec![uniform(&mut rng, &[2, 3, 4, 4], -2.0, 2.0)],
        vec![],
        Box::new(move |t, v| {
            let q = Graph::softmax_channels(t, &v[0])?;
            let tn = t.leaf(tgt.clone(), false);
            loss::per_voxel_ce(t, &q, &tn)
        }),
    );
    let w = uniform(&mut rng, &[2, 1, 4, 4], 0.0, 1.0);
    let tgt = target.clone();
    push(
        "weighted_dice",
        vec![uniform(&mut rng, &[2, 3, 4, 4], -2.0, 2.0)],
        vec![],
        Box::new(move |t, v| {
            let q = Graph::softmax_channels(t, &v[0])?;
            let tn = t.leaf(tgt.clone(), false);
            let wn = t.leaf(w.clone(), false);
            loss::weighted_dice(t, &q, &tn, Some(&wn), 1e-5)
        }),
    );
    let y_in = vec![labels(&mut rng, &[8, 8], 3), labels(&mut rng, &[8, 8], 3)];
    let y_out = vec![labels(&mut rng, &[8, 8], 3), labels(&mut rng, &[8, 8], 3)];
    let mask = random_mask(&mut rng, &[8, 8]);
    let (yi, yo, m) = (y_in.clone(), y_out.clone(), mask.clone());
    push(
        "bcp_loss",
        vec![
            uniform(&mut rng, &[2, 3, 8, 8], -2.0, 2.0),
            uniform(&mut rng, &[2, 3, 8, 8], -2.0, 2.0),
        ],
        vec![],
        Box::new(move |t, v| {
            let qi = Graph::softmax_channels(t, &v[0])?;
            let qo = Graph::softmax_channels(t, &v[1])?;
            Ok(loss::bcp_loss(t, &qi, &qo, &yi, &yo, &m, &LossConfig::default())?.l_all)
        }),
    );

    // full network + loss w.r.t. every parameter
    let cfg = tiny_net(seed);
    let params = segnet::init_params::<f64>(&cfg).unwrap();
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let mut inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    // non-zero biases so every path carries signal
    for (n, t) in names.iter().zip(inputs.iter_mut()) {
        if n.ends_with(".bias") {
            *t = uniform(&mut rng, t.shape(), 0.05, 0.2);
        }
    }
    let np = inputs.len();
    let x_in = uniform(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
    let x_out = uniform(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
    push(
        "unet + bcp_loss",
        inputs,
        (0..np).collect(),
        Box::new(move |t, v| {
            let nodes = names.iter().cloned().zip(v.iter().copied()).collect();
            let xi = t.leaf(x_in.clone(), false);
            let xo = t.leaf(x_out.clone(), false);
            let li = segnet::forward_on(t, &cfg, &nodes, &xi)?;
            let lo = segnet::forward_on(t, &cfg, &nodes, &xo)?;
            let qi = Graph::softmax_channels(t, &li)?;
            let qo = Graph::softmax_channels(t, &lo)?;
            Ok(loss::bcp_loss(t, &qi, &qo, &y_in, &y_out, &mask, &LossConfig::default())?.l_all)
        }),
    );
    cases
}

pub fn run_case(case: &Case, seed: u64) -> GradCheck {
    gradcheck(&case.inputs, &case.wrt, seed, FD_STEP, 1, &case.f).unwrap_or_else(|e| panic!("{}: {e}", case.name))
}
