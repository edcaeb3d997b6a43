//! Central-difference verification of every tape primitive
//! (float64, h = 1e-5, tol 1e-4).

use std::collections::BTreeMap;

use avmtl::rng::rng_for;
use avmtl::tensor::gradcheck::{grad_check, ParamMap};
use avmtl::tensor::tape::{Tape, Var};
use avmtl::tensor::Tensor;
use avmtl::Result;

type Binder = BTreeMap<String, Var>;

fn check_primitive(
    label: &str,
    params: &[(&str, Tensor<f64>)],
    build: impl Fn(&mut Tape<f64>, &Binder) -> Result<Var>,
) {
    let pmap: ParamMap = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let f = |p: &ParamMap, need: bool| -> Result<(f64, Option<ParamMap>)> {
        let mut tape = Tape::<f64>::new();
        let mut bound = Binder::new();
        for (name, tensor) in p {
            bound.insert(name.clone(), tape.leaf(tensor.clone(), true));
        }
        let loss = build(&mut tape, &bound)?;
        let value = tape.value(loss).item();
        if !need {
            return Ok((value, None));
        }
        let mut grads = tape.backward(loss)?;
        let out = p
            .keys()
            .map(|n| (n.clone(), grads.take(bound[n]).unwrap()))
            .collect();
        Ok((value, Some(out)))
    };
    let report = grad_check(&f, &pmap, 1e-5, 1e-4, 99).unwrap();
    assert!(
        report.passed(),
        "{label}: worst relative error {:.3e}\n{report}",
        report.worst()
    );
}

/// Project a tensor to a scalar with a fixed random weighting so every
/// output coordinate influences the loss.
fn project(tape: &mut Tape<f64>, x: Var, salt: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut rng = rng_for(salt, &[0xbeef]);
    let r = tape.constant(Tensor::uniform(&shape, 1.0, &mut rng));
    let prod = tape.mul(x, r)?;
    Ok(tape.sum_all(prod))
}

fn t(shape: &[usize], salt: u64) -> Tensor<f64> {
    let mut rng = rng_for(salt, &[7]);
    Tensor::uniform(shape, 1.0, &mut rng)
}

/// Uniform magnitudes in [0.2, 1.2] with random sign: keeps relu/maxpool
/// inputs away from ties and kinks at the finite-difference step.
fn t_offset(shape: &[usize], salt: u64) -> Tensor<f64> {
    let mut rng = rng_for(salt, &[11]);
    let base = Tensor::<f64>::uniform(shape, 1.0, &mut rng);
    let data = base
        .data()
        .iter()
        .map(|&v| v.signum() * (v.abs() + 0.2))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn elementwise_ops() {
    check_primitive("add", &[("a", t(&[2, 3], 1)), ("b", t(&[2, 3], 2))], |tp, b| {
        let y = tp.add(b["a"], b["b"])?;
        project(tp, y, 10)
    });
    check_primitive("sub", &[("a", t(&[2, 3], 3)), ("b", t(&[2, 3], 4))], |tp, b| {
        let y = tp.sub(b["a"], b["b"])?;
        project(tp, y, 11)
    });
    check_primitive("mul", &[("a", t(&[2, 3], 5)), ("b", t(&[2, 3], 6))], |tp, b| {
        let y = tp.mul(b["a"], b["b"])?;
        project(tp, y, 12)
    });
    check_primitive("scale", &[("a", t(&[4], 7))], |tp, b| {
        let y = tp.scale(b["a"], -2.5);
        project(tp, y, 13)
    });
    check_primitive("add_scalar", &[("a", t(&[4], 8))], |tp, b| {
        let y = tp.add_scalar(b["a"], 3.25);
        project(tp, y, 14)
    });
    check_primitive("relu", &[("a", t_offset(&[3, 4], 9))], |tp, b| {
        let y = tp.relu(b["a"]);
        project(tp, y, 15)
    });
    check_primitive("tanh", &[("a", t(&[3, 4], 16))], |tp, b| {
        let y = tp.tanh(b["a"]);
        project(tp, y, 17)
    });
    check_primitive("sigmoid", &[("a", t(&[3, 4], 18))], |tp, b| {
        let y = tp.sigmoid(b["a"]);
        project(tp, y, 19)
    });
    check_primitive("sum_all", &[("a", t(&[5], 20))], |tp, b| Ok(tp.sum_all(b["a"])));
}

#[test]
fn shape_ops() {
    check_primitive("reshape", &[("a", t(&[2, 6], 21))], |tp, b| {
        let y = tp.reshape(b["a"], vec![3, 4])?;
        project(tp, y, 22)
    });
    check_primitive("concat_last", &[("a", t(&[2, 3], 23)), ("b", t(&[2, 2], 24))], |tp, b| {
        let y = tp.concat_last(b["a"], b["b"])?;
        project(tp, y, 25)
    });
    check_primitive("slice_last", &[("a", t(&[2, 6], 26))], |tp, b| {
        let y = tp.slice_last(b["a"], 1, 3)?;
        project(tp, y, 27)
    });
    check_primitive("stack_rows", &[("a", t(&[3, 2], 28)), ("b", t(&[3, 2], 29))], |tp, b| {
        let y = tp.stack_rows(&[b["a"], b["b"]])?;
        project(tp, y, 30)
    });
}

#[test]
fn contract_specs() {
    check_primitive("contract ij,jk->ik", &[("a", t(&[3, 4], 31)), ("b", t(&[4, 2], 32))], |tp, b| {
        let y = tp.contract("ij,jk->ik", b["a"], b["b"])?;
        project(tp, y, 33)
    });
    check_primitive(
        "contract btq,qv->btv",
        &[("a", t(&[2, 3, 4], 34)), ("b", t(&[4, 5], 35))],
        |tp, b| {
            let y = tp.contract("btq,qv->btv", b["a"], b["b"])?;
            project(tp, y, 36)
        },
    );
    check_primitive(
        "contract btv,mtv->btm",
        &[("a", t(&[2, 3, 4], 37)), ("b", t(&[5, 3, 4], 38))],
        |tp, b| {
            let y = tp.contract("btv,mtv->btm", b["a"], b["b"])?;
            project(tp, y, 39)
        },
    );
    check_primitive(
        "contract with summed-out label ij,j->j",
        &[("a", t(&[3, 4], 40)), ("b", t(&[4], 41))],
        |tp, b| {
            let y = tp.contract("ij,j->j", b["a"], b["b"])?;
            project(tp, y, 42)
        },
    );
}

#[test]
fn softmax_family() {
    check_primitive("softmax_lastdim", &[("a", t(&[3, 5], 43))], |tp, b| {
        let y = tp.softmax_lastdim(b["a"])?;
        project(tp, y, 44)
    });
    check_primitive("log_softmax_lastdim", &[("a", t(&[3, 5], 45))], |tp, b| {
        let y = tp.log_softmax_lastdim(b["a"])?;
        project(tp, y, 46)
    });
    check_primitive("logsumexp_lastdim", &[("a", t(&[3, 5], 47))], |tp, b| {
        let y = tp.logsumexp_lastdim(b["a"])?;
        project(tp, y, 48)
    });
}

#[test]
fn projections_and_gathers() {
    check_primitive(
        "linear",
        &[("x", t(&[2, 3, 4], 49)), ("w", t(&[4, 5], 50)), ("b", t(&[5], 51))],
        |tp, b| {
            let y = tp.linear(b["x"], b["w"], Some(b["b"]))?;
            project(tp, y, 52)
        },
    );
    check_primitive(
        "outer_sum",
        &[("a", t(&[2, 3, 4], 53)), ("c", t(&[2, 5, 4], 54))],
        |tp, b| {
            let y = tp.outer_sum(b["a"], b["c"])?;
            project(tp, y, 55)
        },
    );
    check_primitive("embed", &[("table", t(&[6, 3], 56))], |tp, b| {
        let y = tp.embed(b["table"], &[0, 5, 2, 2])?;
        project(tp, y, 57)
    });
}

#[test]
fn conv_and_pool() {
    check_primitive(
        "conv_spatial stride 1",
        &[("x", t(&[1, 2, 5, 5, 2], 58)), ("w", t(&[3, 3, 2, 3], 59)), ("b", t(&[3], 60))],
        |tp, b| {
            let y = tp.conv_spatial(b["x"], b["w"], Some(b["b"]), 1)?;
            project(tp, y, 61)
        },
    );
    check_primitive(
        "conv_spatial stride 2",
        &[("x", t(&[2, 1, 7, 7, 1], 62)), ("w", t(&[3, 3, 1, 2], 63))],
        |tp, b| {
            let y = tp.conv_spatial(b["x"], b["w"], None, 2)?;
            project(tp, y, 64)
        },
    );
    check_primitive(
        "conv_temporal",
        &[("x", t(&[2, 5, 2, 2, 3], 65)), ("w", t(&[3, 3, 4], 66)), ("b", t(&[4], 67))],
        |tp, b| {
            let y = tp.conv_temporal(b["x"], b["w"], Some(b["b"]))?;
            project(tp, y, 68)
        },
    );
    check_primitive("maxpool2_spatial", &[("x", t_offset(&[1, 2, 4, 6, 2], 69))], |tp, b| {
        let y = tp.maxpool2_spatial(b["x"])?;
        project(tp, y, 70)
    });
}

#[test]
fn normalization() {
    check_primitive(
        "group_norm",
        &[("x", t(&[2, 2, 3, 3, 4], 71)), ("g", t(&[4], 72)), ("b", t(&[4], 73))],
        |tp, b| {
            let y = tp.group_norm(b["x"], b["g"], b["b"], 2, 1e-5)?;
            project(tp, y, 74)
        },
    );
    check_primitive(
        "layer_norm",
        &[("x", t(&[3, 4, 6], 75)), ("g", t(&[6], 76)), ("b", t(&[6], 77))],
        |tp, b| {
            let y = tp.layer_norm(b["x"], b["g"], b["b"], 1e-5)?;
            project(tp, y, 78)
        },
    );
}

#[test]
fn losses() {
    // asd_loss over positive alpha values (need not be normalized for the
    // derivative definition to hold).
    let alpha = {
        let base = t(&[3, 4, 3], 79);
        let data = base.data().iter().map(|v| 0.55 + 0.4 * v).collect();
        Tensor::new(vec![3, 4, 3], data).unwrap()
    };
    check_primitive("asd_loss", &[("alpha", alpha)], |tp, b| {
        tp.asd_loss(b["alpha"], &[4, 2, 3])
    });

    // rnnt_loss through a log-softmax so the lattice stays normalized under
    // perturbation.
    check_primitive("rnnt_loss", &[("logits", t(&[2, 4, 3, 4], 80))], |tp, b| {
        let lat = tp.log_softmax_lastdim(b["logits"])?;
        tp.rnnt_loss(lat, &[vec![1, 3], vec![2]], &[4, 3])
    });

    // softmax -> asd_loss composite: the exact path Eq-style training uses.
    check_primitive("softmax+asd composite", &[("scores", t(&[3, 4, 3], 81))], |tp, b| {
        let alpha = tp.softmax_lastdim(b["scores"])?;
        tp.asd_loss(alpha, &[4, 4, 2])
    });
}
