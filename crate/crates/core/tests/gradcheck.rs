//! Finite-difference gradient checks (central differences, h = 1e-5,
//! relative tolerance 1e-4) for individual ops and the composite losses.

mod common;

use awlab_core::law::{total_loss, LawConfig, LawModels, NoiseSchedule};
use awlab_core::nn::Conv2d;
use awlab_core::order::{seg_loss, BiAttnUnit};
use awlab_core::rng::{normal_vec, substream};
use awlab_core::{ParamStore, Tape, Tensor};
use common::finite_diff_check;

fn rand_tensor(label: &str, shape: &[usize]) -> Tensor {
    let mut rng = substream(31, label);
    Tensor::new(shape.to_vec(), normal_vec(&mut rng, shape.iter().product())).unwrap()
}

#[test]
fn conv2d_relu_mean_grads() {
    let mut store = ParamStore::new();
    let mut rng = substream(32, "init");
    let layer = Conv2d::new(&mut store, &mut rng, "c", 2, 3, 3, 1, 1);
    let x = rand_tensor("x", &[1, 2, 5, 5]);
    let loss = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = layer.forward(&mut tape, store, xv).unwrap();
        let y = tape.relu(y).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let l = tape.mean_all(sq).unwrap();
        tape.value(l).item().unwrap()
    };
    let grads = |store: &ParamStore| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = layer.forward(&mut tape, store, xv).unwrap();
        let y = tape.relu(y).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let l = tape.mean_all(sq).unwrap();
        tape.backward(l).unwrap();
        tape.param_grads()
    };
    let ids = store.ids_with_prefix("c.");
    finite_diff_check(&mut store, &ids, loss, grads);
}

#[test]
fn dwconv_sigmoid_grads() {
    let mut store = ParamStore::new();
    let w = store.register("dw.w", rand_tensor("w", &[3, 1, 3, 3]));
    let x = rand_tensor("xd", &[2, 3, 4, 4]);
    let run = |store: &ParamStore, want_grads: bool| -> (f64, Vec<(awlab_core::ParamId, Tensor)>) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let wv = tape.param(store, w).unwrap();
        let y = tape.dwconv2d(xv, wv, 1).unwrap();
        let y = tape.sigmoid(y).unwrap();
        let l = tape.mean_all(y).unwrap();
        let v = tape.value(l).item().unwrap();
        if want_grads {
            tape.backward(l).unwrap();
            (v, tape.param_grads())
        } else {
            (v, Vec::new())
        }
    };
    finite_diff_check(&mut store, &[w], |s| run(s, false).0, |s| run(s, true).1);
}

#[test]
fn matmul_softmax_chain_grads() {
    let mut store = ParamStore::new();
    let a = store.register("m.a", rand_tensor("a", &[2, 3, 4]));
    let b = store.register("m.b", rand_tensor("b", &[2, 3, 4]));
    let run = |store: &ParamStore, want_grads: bool| -> (f64, Vec<(awlab_core::ParamId, Tensor)>) {
        let mut tape = Tape::new();
        let av = tape.param(store, a).unwrap();
        let bv = tape.param(store, b).unwrap();
        let bt = tape.transpose_last2(bv).unwrap();
        let s = tape.matmul(av, bt).unwrap();
        let s = tape.mul_scalar(s, 0.5).unwrap();
        let p = tape.softmax_lastdim(s).unwrap();
        let o = tape.matmul(p, bv).unwrap();
        let sq = tape.mul(o, o).unwrap();
        let l = tape.mean_all(sq).unwrap();
        let v = tape.value(l).item().unwrap();
        if want_grads {
            tape.backward(l).unwrap();
            (v, tape.param_grads())
        } else {
            (v, Vec::new())
        }
    };
    finite_diff_check(&mut store, &[a, b], |s| run(s, false).0, |s| run(s, true).1);
}

fn toy_mask(h: usize, w: usize, lesions: &[usize]) -> Tensor {
    let mut d = vec![0.0; h * w];
    for &i in lesions {
        d[i] = 1.0;
    }
    Tensor::new(vec![1, 1, h, w], d).unwrap()
}

#[test]
fn law_total_loss_grads_student_and_phi() {
    let mut store = ParamStore::new();
    let models = LawModels::new(&mut store, 41, 2, 2);
    let cfg = LawConfig { grad_through_weights: true, ..Default::default() };
    let sched = NoiseSchedule::default_desk();
    let z0 = rand_tensor("z0", &[1, 1, 8, 8]);
    let mask = toy_mask(8, 8, &[9, 10, 17, 18]);
    let eps = rand_tensor("eps", &[1, 1, 8, 8]);
    let run = |store: &ParamStore, want_grads: bool| -> (f64, Vec<(awlab_core::ParamId, Tensor)>) {
        let mut tape = Tape::new();
        let out = total_loss(&mut tape, store, &models, &z0, &mask, 50, &eps, &cfg, &sched).unwrap();
        let v = out.components.total;
        if want_grads {
            tape.backward(out.total).unwrap();
            (v, tape.param_grads())
        } else {
            (v, Vec::new())
        }
    };
    let mut ids = store.ids_with_prefix("student.");
    ids.extend(store.ids_with_prefix("phi."));
    finite_diff_check(&mut store, &ids, |s| run(s, false).0, |s| run(s, true).1);
}

#[test]
fn law_total_loss_grads_teacher() {
    let mut store = ParamStore::new();
    let models = LawModels::new(&mut store, 42, 2, 2);
    // distillation off: its stop-gradient target would otherwise make the
    // analytic teacher gradient deliberately differ from finite differences
    let cfg = LawConfig { beta_d: 0.0, ..Default::default() };
    let sched = NoiseSchedule::default_desk();
    let z0 = rand_tensor("z0t", &[1, 1, 8, 8]);
    let mask = toy_mask(8, 8, &[20, 21, 28]);
    let eps = rand_tensor("epst", &[1, 1, 8, 8]);
    let run = |store: &ParamStore, want_grads: bool| -> (f64, Vec<(awlab_core::ParamId, Tensor)>) {
        let mut tape = Tape::new();
        let out = total_loss(&mut tape, store, &models, &z0, &mask, 30, &eps, &cfg, &sched).unwrap();
        let v = out.components.total;
        if want_grads {
            tape.backward(out.total).unwrap();
            (v, tape.param_grads())
        } else {
            (v, Vec::new())
        }
    };
    let ids = store.ids_with_prefix("teacher.");
    finite_diff_check(&mut store, &ids, |s| run(s, false).0, |s| run(s, true).1);
}

#[test]
fn seg_loss_through_biattn_grads() {
    let mut store = ParamStore::new();
    let mut rng = substream(43, "init");
    let unit = BiAttnUnit::new(&mut store, &mut rng, "u", 2, 3, 2);
    let head = Conv2d::new(&mut store, &mut rng, "h", 2, 1, 1, 1, 0);
    assert!(store.count_scalars("") <= 1000, "instance too large for the fd budget");
    let d_in = rand_tensor("d", &[1, 2, 8, 8]);
    let e_in = rand_tensor("e", &[1, 2, 8, 8]);
    let target = toy_mask(8, 8, &[27, 28, 35, 36]);
    let run = |store: &ParamStore, want_grads: bool| -> (f64, Vec<(awlab_core::ParamId, Tensor)>) {
        let mut tape = Tape::new();
        let dv = tape.constant(d_in.clone()).unwrap();
        let ev = tape.constant(e_in.clone()).unwrap();
        let out = unit.forward(&mut tape, store, dv, ev, None).unwrap();
        let fused = tape.add(out.d_out, out.e_out).unwrap();
        let logits = head.forward(&mut tape, store, fused).unwrap();
        let prob = tape.sigmoid(logits).unwrap();
        let tv = tape.constant(target.clone()).unwrap();
        let loss = seg_loss(&mut tape, prob, tv).unwrap();
        let v = tape.value(loss.total).item().unwrap();
        if want_grads {
            tape.backward(loss.total).unwrap();
            (v, tape.param_grads())
        } else {
            (v, Vec::new())
        }
    };
    let ids = store.ids_with_prefix("");
    finite_diff_check(&mut store, &ids, |s| run(s, false).0, |s| run(s, true).1);
}
