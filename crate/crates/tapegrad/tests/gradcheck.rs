//! Finite-difference checks for every differentiable operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapegrad::{FilterKernel, Graph, Pad, Result, Spatial, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Compares the analytic gradient of `f(inputs)` with central differences on
/// every input element.
fn check<F>(inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        let s = g.sum(out);
        g.scalar(s).unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let s = g.sum(out);
    let grads = g.backward(s).unwrap();
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("input is used");
        for i in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic.data()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-5, "input {k} elem {i}: fd {fd} vs analytic {an}");
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3, 3], &mut rng, 0.2, 1.0);
    let b = random(&[2, 3, 3], &mut rng, 0.2, 1.0);
    check(vec![a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        g.div(m, v[0])
    });
    check(vec![a.clone()], |g, v| {
        let x = g.mul_scalar(v[0], 3.0);
        let x = g.add_scalar(x, -1.5);
        let x = g.sqr(x);
        Ok(g.powf(x, 1.7))
    });
    check(vec![random(&[1, 4, 4], &mut rng, -1.0, 1.0)], |g, v| {
        let r = g.relu(v[0]);
        let a = g.abs(v[0]);
        let c = g.clamp(v[0], -0.5, 0.5);
        let t = g.add(r, a)?;
        g.add(t, c)
    });
    check(vec![b], |g, v| Ok(g.mean(v[0])));
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 5, 6], &mut rng, -1.0, 1.0);
    let w = random(&[4, 3, 3, 3], &mut rng, -0.5, 0.5);
    let b = random(&[4], &mut rng, -0.5, 0.5);
    check(vec![x, w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2])?;
        Ok(g.sqr(y))
    });
}

#[test]
fn conv2d_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (ci, co, h, w) = (2, 3, 4, 5);
    let x = random(&[ci, h, w], &mut rng, -1.0, 1.0);
    let wt = random(&[co, ci, 3, 3], &mut rng, -1.0, 1.0);
    let b = random(&[co], &mut rng, -1.0, 1.0);
    let mut g = Graph::new();
    let (vx, vw, vb) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
    let y = g.conv2d(vx, vw, vb).unwrap();
    let got = g.value(y);
    for o in 0..co {
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = yy as isize + ky as isize - 1;
                            let sx = xx as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += wt.data()[((o * ci + c) * 3 + ky) * 3 + kx]
                                * x.data()[(c * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                let v = got.data()[(o * h + yy) * w + xx];
                assert!((v - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 5, 4], &mut rng, -1.0, 1.0);
    let one = random(&[1, 5, 4], &mut rng, -1.0, 1.0);
    check(vec![x.clone(), one.clone()], |g, v| {
        let b = g.broadcast_channels(v[1], 3)?;
        let cat = g.concat(&[v[0], b])?;
        let n = g.narrow(cat, 2, 3)?;
        let m = g.mean_channels(n)?;
        let p = g.mul(m, v[1])?;
        Ok(g.sqr(p))
    });
    check(vec![x.clone()], |g, v| {
        let p = g.pad_replicate(v[0], Pad { top: 2, bottom: 1, left: 0, right: 3 })?;
        let p = g.pad_reflect(p, Pad { top: 1, bottom: 2, left: 2, right: 1 })?;
        let c = g.crop(p, 1, 2, 4, 3)?;
        let z = g.pad_zero(c, Pad::uniform(1))?;
        Ok(g.sqr(z))
    });
    check(vec![x], |g, v| {
        let mut y = v[0];
        for kind in [Spatial::FlipW, Spatial::Transpose, Spatial::FlipH] {
            y = g.spatial(y, kind)?;
        }
        let w = g.spatial(y, Spatial::Transpose)?;
        let w = g.add(w, v[0])?;
        Ok(g.sqr(w))
    });
}

#[test]
fn filter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 7, 6], &mut rng, -1.0, 1.0);
    let kernel = FilterKernel {
        kh: 3,
        kw: 2,
        stride: 2,
        weights: vec![0.1, -0.4, 0.3, 0.7, -0.2, 0.05],
    };
    check(vec![x], move |g, v| {
        let y = g.filter(v[0], kernel.clone())?;
        Ok(g.sqr(y))
    });
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::zeros(&[1, 2, 2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(&[1, 2, 2], 2.0));
    let p = g.param(Tensor::full(&[1, 2, 2], 3.0));
    let m = g.mul(c, p).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[2.0; 4]);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
    let d = g.detach(x);
    assert_eq!(g.value(d), g.value(x));
    let y = g.mul(x, d).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    // d(x·stop(x))/dx = stop(x)
    assert_eq!(grads.get(x).unwrap().data(), &[1.5, -2.0]);
    assert!(grads.get(d).is_none());
}
