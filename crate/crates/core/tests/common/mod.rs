//! Shared helpers for integration tests: seeded tensors and a central
//! finite-difference gradient check.
#![allow(dead_code)]

use msvsr::autodiff::{Tape, Var};
use ndarray::Array4;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_arr(
    r: &mut ChaCha8Rng,
    shape: (usize, usize, usize, usize),
    lo: f64,
    hi: f64,
) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || r.random_range(lo..hi))
}

pub fn rand_arr32(
    r: &mut ChaCha8Rng,
    shape: (usize, usize, usize, usize),
    lo: f32,
    hi: f32,
) -> Array4<f32> {
    Array4::from_shape_simple_fn(shape, || r.random_range(lo..hi))
}

/// Central finite-difference check of `build` (a pure scalar-valued tape
/// program) against analytic gradients, at `probes` random coordinates of
/// the inputs. `tol` is relative.
pub fn fd_check<F>(name: &str, inputs: &[Array4<f64>], build: &F, probes: usize, tol: f64, seed: u64)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let root = build(&mut tape, &vars);
    assert_eq!(tape.shape(root), (1, 1, 1, 1), "{name}: root must be scalar");
    tape.backward(root);
    let grads: Vec<Array4<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, a)| tape.grad(v).cloned().unwrap_or_else(|| Array4::zeros(a.dim())))
        .collect();

    let eval = |xs: &[Array4<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|a| t.input(a.clone())).collect();
        let r = build(&mut t, &vs);
        t.scalar(r)
    };

    let mut r = rng(seed);
    let h = 1e-5;
    for p in 0..probes {
        let i = r.random_range(0..inputs.len());
        let flat = r.random_range(0..inputs[i].len());
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        plus[i].as_slice_mut().unwrap()[flat] += h;
        minus[i].as_slice_mut().unwrap()[flat] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = grads[i].as_slice().unwrap()[flat];
        let denom = a.abs().max(fd.abs());
        if denom > 1e-7 {
            let rel = (a - fd).abs() / denom;
            assert!(
                rel <= tol,
                "{name}: probe {p} input {i} flat {flat}: analytic {a} vs fd {fd} (rel {rel:.2e})"
            );
        } else {
            assert!(
                (a - fd).abs() < 1e-6,
                "{name}: probe {p} near-zero mismatch: analytic {a} vs fd {fd}"
            );
        }
    }
}

/// End-to-end finite-difference check of the full tiny network in f64: a
/// charbonnier objective over both the main and auxiliary outputs, probed
/// at random parameter coordinates. Zero-initialized heads are nudged off
/// the bilinear-kink set first. Panics on mismatch; returns the number of
/// informative probes.
pub fn e2e_fd_probes(probes: usize, tol: f64) -> usize {
    use msvsr::model::{forward_session, register_model, ModelConfig, ModelIds};
    use msvsr::params::{ParamStore, Session};

    fn objective(
        store: &ParamStore<f64>,
        cfg: &ModelConfig,
        ids: &ModelIds,
        lr: &[Array4<f64>],
        hr: &[Array4<f64>],
        trainable: bool,
    ) -> (f64, Option<Vec<Array4<f64>>>) {
        let mut sess = Session::bind(store, trainable);
        let frames: Vec<_> = lr.iter().map(|a| sess.tape.input(a.clone())).collect();
        let fwd = forward_session(&mut sess, cfg, ids, &frames).unwrap();
        let mut total = None;
        let n = fwd.sr.len();
        for i in 0..n {
            let t = sess.tape.input(hr[i].clone());
            let main = sess.tape.charbonnier(fwd.sr[i], t, 1e-3).unwrap();
            let aux_v = fwd.aux.as_ref().unwrap()[i];
            let aux = sess.tape.charbonnier(aux_v, t, 1e-3).unwrap();
            let s = sess.tape.add(main, aux).unwrap();
            total = Some(match total {
                None => s,
                Some(acc) => sess.tape.add(acc, s).unwrap(),
            });
        }
        let loss = sess.tape.scale(total.unwrap(), 1.0 / n as f64);
        let value = sess.tape.scalar(loss);
        if trainable {
            sess.tape.backward(loss);
            let grads = sess.param_grads();
            (value, Some(grads))
        } else {
            (value, None)
        }
    }

    let cfg = ModelConfig::tiny();
    let (mut store, ids) = register_model::<f64>(&cfg, 33).unwrap();
    let mut r = rng(77);
    let ids_all: Vec<_> = store.ids().collect();
    for &id in &ids_all {
        if store.value(id).iter().all(|&v| v == 0.0) {
            store.value_mut(id).mapv_inplace(|_| r.random_range(-0.08..0.08));
        }
    }

    let mut gen = rng(21);
    let lr: Vec<Array4<f64>> = (0..2)
        .map(|_| rand_arr(&mut gen, (1, 3, 8, 8), 0.05, 0.95))
        .collect();
    let hr: Vec<Array4<f64>> = (0..2)
        .map(|_| rand_arr(&mut gen, (1, 3, 32, 32), 0.05, 0.95))
        .collect();

    let (_, grads) = objective(&store, &cfg, &ids, &lr, &hr, true);
    let grads = grads.unwrap();

    let h = 1e-6;
    let mut checked = 0usize;
    let mut attempts = 0usize;
    while checked < probes && attempts < 20 * probes {
        attempts += 1;
        let p = r.random_range(0..ids_all.len());
        let g = &grads[p];
        let e = r.random_range(0..g.len());
        let analytic = g.as_slice().unwrap()[e];
        if analytic.abs() < 1e-6 {
            continue;
        }
        let id = ids_all[p];
        let orig = store.value(id).as_slice().unwrap()[e];
        store.value_mut(id).as_slice_mut().unwrap()[e] = orig + h;
        let (up, _) = objective(&store, &cfg, &ids, &lr, &hr, false);
        store.value_mut(id).as_slice_mut().unwrap()[e] = orig - h;
        let (down, _) = objective(&store, &cfg, &ids, &lr, &hr, false);
        store.value_mut(id).as_slice_mut().unwrap()[e] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
        assert!(
            rel < tol,
            "param {p} elem {e}: analytic {analytic:.3e} vs fd {fd:.3e} (rel {rel:.3e})"
        );
        checked += 1;
    }
    assert!(checked >= probes, "only {checked} informative probes in {attempts} draws");
    checked
}
