// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode gradients against central finite differences, in f64.

mod common;

use common::{check_op, check_params, primitive_cases, tiny_model, tiny_sample};
use sparsepose::kinematics::Skeleton;
use sparsepose::loss::{loss_graph, LossWeights};

const SAMPLES: usize = 24;
const TOL: f64 = 1e-4;

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for (name, inputs, build) in primitive_cases(11) {
        let r = check_op(&inputs, &*build, SAMPLES, 5);
        eprintln!("{name:<24} {} coords, max rel {:.2e}", r.checked, r.max_rel);
        assert!(r.checked >= 20, "{name}: only {} coordinates", r.checked);
        if r.max_rel > TOL {
            failures.push(format!("{name}: {:.3e}", r.max_rel));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn pssb_parameters_and_input() {
    let model = tiny_model(3);
    let sample = tiny_sample(4, 9);
    let loss = |m: &sparsepose::model::PoseModel<f64>, g: &mut sparsepose::graph::Graph<f64>| {
        let x = g.constant(sample.input.clone());
        let v = m.embed(g, x)?;
        let y = m.pssb_forward(g, 0, v)?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    };
    let r = check_params(&model, "blocks.0.pssb", loss, SAMPLES, 1);
    assert!(r.checked >= 20);
    assert!(r.max_rel <= TOL, "pssb parameters: {:.3e}", r.max_rel);

    // Input gradient through the block alone.
    let mut rng = common::rng(4);
    let v = common::uniform(&mut rng, &[4, 8], -1.0, 1.0);
    let r = check_op(&[v], |g, v| model.pssb_forward(g, 0, v[0]), SAMPLES, 2);
    assert!(r.max_rel <= TOL, "pssb input: {:.3e}", r.max_rel);
}

#[test]
fn end_to_end_tiny_model() {
    let model = tiny_model(5);
    let sample = tiny_sample(4, 2);
    let skel = Skeleton::default();
    let loss = |m: &sparsepose::model::PoseModel<f64>, g: &mut sparsepose::graph::Graph<f64>| {
        let x = g.constant(sample.input.clone());
        let pred = m.forward(g, x)?;
        Ok(loss_graph(g, pred, &sample.target, &skel, &LossWeights::default())?.total)
    };
    let r = check_params(&model, "", loss, 40, 3);
    assert!(r.checked >= 20);
    assert!(r.max_rel <= TOL, "end to end: {:.3e}", r.max_rel);
}
