use super::*;
use crate::morphnet::module_grad_check;
use crate::tensor::grad_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Box-shaped binary mask covering rows `lo..hi`.
fn band(shape: [usize; 3], lo: usize, hi: usize) -> Tensor {
    let [h, w, d] = shape;
    let data = (0..h * w * d).map(|i| if (lo..hi).contains(&(i / (w * d))) { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[1, h, w, d], data).unwrap()
}

fn small_config() -> NetConfig {
    NetConfig {
        input_shape: [16, 16, 4],
        feature_channels: 4,
        pathway_hidden: 8,
        ..NetConfig::default()
    }
}

#[test]
fn identical_volumes_zero_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let i = random(&mut rng, &[1, 8, 8, 4], -1.0, 1.0);
    let z3 = Tensor::zeros(&[3, 8, 8, 4]);
    let z1 = Tensor::zeros(&[1, 8, 8, 4]);
    let ones = Tensor::full(&[1, 8, 8, 4], 1.0);
    let l = masked_mse_loss(&i, &i, &z3, &z1, &ones, &ones, &LossWeights::default()).unwrap();
    assert_eq!(l.item(), 0.0);
}

#[test]
fn constant_offset_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = 0.3;
    let i_t = random(&mut rng, &[1, 8, 8, 4], -0.5, 0.5);
    let i_tk = i_t.add_scalar(c);
    let a = Tensor::full(&[1, 8, 8, 4], c);
    let ones = Tensor::full(&[1, 8, 8, 4], 1.0);
    let w = LossWeights::default();
    let t = masked_mse_terms(&i_tk, &i_t, &Tensor::zeros(&[3, 8, 8, 4]), &a, &ones, &ones, &w).unwrap();
    assert!(t.additive.item().abs() < 1e-12);
    assert!((t.deformation.item() - w.lambda1 * c * c).abs() < 1e-9);
}

#[test]
fn detach_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = [1, 8, 8, 4];
    let (i_t, i_tk) = (random(&mut rng, &shape, -1.0, 1.0), random(&mut rng, &shape, -1.0, 1.0));
    let d0 = random(&mut rng, &[3, 8, 8, 4], -0.8, 0.8);
    let a0 = random(&mut rng, &shape, -0.2, 0.2);
    let (r_t, r_tk) = (band([8, 8, 4], 1, 7), band([8, 8, 4], 2, 6));
    let w = LossWeights::default();

    let d = Tensor::leaf(d0.shape(), d0.to_vec()).unwrap();
    let a = Tensor::leaf(a0.shape(), a0.to_vec()).unwrap();
    let t = masked_mse_terms(&i_tk, &i_t, &d, &a, &r_t, &r_tk, &w).unwrap();
    t.deformation.backward().unwrap();
    assert!(a.grad().map_or(true, |g| g.iter().all(|&v| v == 0.0)));
    let d_only_term1 = d.grad().unwrap();

    let d = Tensor::leaf(d0.shape(), d0.to_vec()).unwrap();
    let a = Tensor::leaf(a0.shape(), a0.to_vec()).unwrap();
    masked_mse_loss(&i_tk, &i_t, &d, &a, &r_t, &r_tk, &w).unwrap().backward().unwrap();
    assert_eq!(d.grad().unwrap(), d_only_term1);
    assert!(a.grad().unwrap().iter().any(|&v| v != 0.0));
}

#[test]
fn voxels_outside_both_masks_do_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [1, 8, 8, 4];
    let (i_t, mut i_tk) = (random(&mut rng, &shape, -1.0, 1.0), random(&mut rng, &shape, -1.0, 1.0));
    let z3 = Tensor::zeros(&[3, 8, 8, 4]);
    let a = random(&mut rng, &shape, -0.2, 0.2);
    let r = band([8, 8, 4], 2, 5);
    let w = LossWeights::default();
    let before = masked_mse_loss(&i_tk, &i_t, &z3, &a, &r, &r, &w).unwrap().item();
    let mut v = i_tk.to_vec();
    v[0] = 9.0;
    v[7 * 32] = -9.0;
    i_tk = Tensor::new(&shape, v).unwrap();
    let after = masked_mse_loss(&i_tk, &i_t, &z3, &a, &r, &r, &w).unwrap().item();
    assert_eq!(before, after);
}

#[test]
fn masked_mse_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = [1, 8, 8, 4];
    let w = LossWeights::default();
    for _ in 0..5 {
        let (i_t, i_tk) = (random(&mut rng, &shape, -1.0, 1.0), random(&mut rng, &shape, -1.0, 1.0));
        let d = random(&mut rng, &[3, 8, 8, 4], -0.9, 0.9);
        let a = random(&mut rng, &shape, -0.3, 0.3);
        let (r_t, r_tk) = (band([8, 8, 4], 1, 7), band([8, 8, 4], 2, 8));
        let anchored = |x: &Tensor| masked_mse_terms_anchored(&i_tk, &i_t, x, &a, &r_t, &r_tk, &w, Some(&d))?.total();
        let e = grad_check(anchored, d.data(), d.shape(), 1e-4).unwrap();
        assert!(e < 1e-4, "D {e}");
        let e = grad_check(|x| masked_mse_loss(&i_tk, &i_t, &d, x, &r_t, &r_tk, &w), a.data(), a.shape(), 1e-4).unwrap();
        assert!(e < 1e-4, "A {e}");
    }
}

#[test]
fn smoothness_cases() {
    assert_eq!(smoothness_loss(&Tensor::full(&[3, 4, 4, 2], 0.7)).unwrap().item(), 0.0);
    let (h, w, d) = (6, 5, 3);
    let mut data = vec![0.0; 3 * h * w * d];
    for i in 0..h {
        for p in 0..w * d {
            data[i * w * d + p] = i as f64;
        }
    }
    let ramp = Tensor::new(&[3, h, w, d], data).unwrap();
    let interior = ((h - 1) * w * d) as f64;
    assert!((smoothness_loss(&ramp).unwrap().item() - interior).abs() < 1e-12);
    let shifted = ramp.add_scalar(2.5);
    assert_eq!(smoothness_loss(&shifted).unwrap().item(), interior);
}

#[test]
fn folding_cases() {
    assert_eq!(folding_loss(&Tensor::zeros(&[3, 4, 4, 2])).unwrap().item(), 0.0);
    let (h, w, d) = (6, 4, 2);
    let mut data = vec![0.0; 3 * h * w * d];
    for i in 0..h {
        for p in 0..w * d {
            data[i * w * d + p] = -2.0 * i as f64;
        }
    }
    let ramp = Tensor::new(&[3, h, w, d], data).unwrap();
    let expected = ((h - 1) * w * d) as f64;
    assert!((folding_loss(&ramp).unwrap().item() - expected).abs() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gentle: Vec<f64> = (0..3 * 64).map(|i| 0.3 * (i as f64 * 0.1).sin() + rng.gen_range(-0.1..0.1)).collect();
    assert_eq!(folding_loss(&Tensor::new(&[3, 4, 4, 4], gentle).unwrap()).unwrap().item(), 0.0);
}

#[test]
fn folding_gradient_near_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let d = random(&mut rng, &[3, 5, 5, 4], -1.5, 1.5);
        let e = grad_check(folding_loss, d.data(), d.shape(), 1e-6).unwrap();
        assert!(e < 1e-4, "{e}");
    }
}

#[test]
fn sparsity_cases() {
    assert_eq!(additive_sparsity_loss(&Tensor::zeros(&[1, 2, 2, 2])).unwrap().item(), 0.0);
    let a = Tensor::new(&[1, 2, 2, 2], vec![0.5, -0.5, 0.5, -0.5, 0.5, 0.5, -0.5, -0.5]).unwrap();
    assert_eq!(additive_sparsity_loss(&a).unwrap().item(), 4.0);
    let z = Tensor::leaf(&[1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
    additive_sparsity_loss(&z).unwrap().backward().unwrap();
    assert_eq!(z.grad().unwrap(), vec![0.0, 0.0]);
}

#[test]
fn perceptual_identical_and_frozen() {
    let cfg = small_config();
    let net = MorphNet::new(&cfg, 1).unwrap();
    let comp = Comparator::new(&cfg, &net.encoder, 0.99).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[1, 16, 16, 4], -1.0, 1.0);
    assert_eq!(perceptual_loss(&x, &x, &comp).unwrap().item(), 0.0);
    let y = Tensor::leaf(&[1, 16, 16, 4], random(&mut rng, &[1, 16, 16, 4], -1.0, 1.0).to_vec()).unwrap();
    let l = perceptual_loss(&x, &y, &comp).unwrap();
    let before: Vec<Vec<f64>> = comp.parameters().iter().map(|p| p.data().to_vec()).collect();
    l.backward().unwrap();
    assert!(y.grad().is_some());
    for (p, b) in comp.parameters().iter().zip(before) {
        assert!(p.grad().is_none());
        assert_eq!(p.data(), &b[..]);
    }
    assert_eq!(perceptual_loss(&x, &y, &comp).unwrap().item(), l.item());
}

#[test]
fn perceptual_quadratic_in_small_residual() {
    let cfg = small_config();
    let net = MorphNet::new(&cfg, 2).unwrap();
    let comp = Comparator::new(&cfg, &net.encoder, 0.99).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[1, 16, 16, 4], -1.0, 1.0);
    let r = random(&mut rng, &[1, 16, 16, 4], -1e-4, 1e-4);
    let layer1 = |y: &Tensor| {
        let (a, b) = (comp.taps(&x).unwrap(), comp.taps(y).unwrap());
        a[0].sub(&b[0]).unwrap().square().mean().unwrap().item()
    };
    let one = layer1(&x.add(&r).unwrap());
    let two = layer1(&x.add(&r.scale(2.0)).unwrap());
    assert!((two / one - 4.0).abs() < 0.4, "{}", two / one);
}

#[test]
fn ema_identities() {
    let cfg = small_config();
    let a = MorphNet::new(&cfg, 3).unwrap();
    let b = MorphNet::new(&cfg, 4).unwrap();
    let mut comp = Comparator::new(&cfg, &a.encoder, 0.9).unwrap();
    let enc_prefix = |e: &Encoder| {
        let mut v = Vec::new();
        e.trunk.visit(&mut |p| v.push(p.data().to_vec()));
        v
    };
    let comp_vals = |c: &Comparator| c.parameters().iter().map(|p| p.data().to_vec()).collect::<Vec<_>>();
    let pa = enc_prefix(&a.encoder);
    assert!(comp_vals(&comp).iter().zip(&pa).all(|(c, e)| c == e));

    let target = enc_prefix(&b.encoder);
    let dist = |c: &Comparator| -> f64 {
        comp_vals(c)
            .iter()
            .zip(&target)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)))
            .sum::<f64>()
            .sqrt()
    };
    let m = 0.9;
    let mut prev = dist(&comp);
    for _ in 0..5 {
        comp.ema_update(&b.encoder, m).unwrap();
        let now = dist(&comp);
        assert!((now / prev - m).abs() < 1e-9);
        prev = now;
    }

    let mut twice = Comparator::new(&cfg, &a.encoder, m).unwrap();
    twice.update(&b.encoder).unwrap();
    twice.update(&b.encoder).unwrap();
    let mut once = Comparator::new(&cfg, &a.encoder, m).unwrap();
    once.ema_update(&b.encoder, m * m).unwrap();
    for (x, y) in comp_vals(&twice).iter().zip(comp_vals(&once)) {
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-12);
        }
    }
    assert!(comp.ema_update(&b.encoder, 1.0).is_err());
    let other = NetConfig { stem_channels: 8, ..cfg.clone() };
    let wide = MorphNet::new(&other, 0).unwrap();
    assert!(comp.update(&wide.encoder).is_err());
}

fn pair(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> SslPair {
    let s = [1, shape[0], shape[1], shape[2]];
    SslPair {
        i_t: random(rng, &s, -1.0, 1.0),
        i_tk: random(rng, &s, -1.0, 1.0),
        r_t: band(shape, 2, shape[0] - 2),
        r_tk: band(shape, 3, shape[0] - 1),
    }
}

#[test]
fn total_loss_identities() {
    let cfg = small_config();
    let net = MorphNet::new(&cfg, 5).unwrap();
    let comp = Comparator::new(&cfg, &net.encoder, 0.99).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = pair(&mut rng, [16, 16, 4]);
    let w = LossWeights::default();

    let same = SslPair { i_tk: p.i_t.clone(), r_tk: p.r_t.clone(), ..p.clone() };
    assert_eq!(total_ssl_loss(&same, &net, &comp, &w).unwrap().total.item(), 0.0);

    let l = total_ssl_loss(&p, &net, &comp, &w).unwrap();
    let t = l.terms();
    let resum = (t.mse_deformation + t.mse_additive)
        + w.lambda3 * t.perceptual
        + w.lambda4 * t.smoothness
        + w.lambda5 * t.folding
        + w.lambda6 * t.additive;
    assert_eq!(t.total, resum);
    for v in [t.mse, t.perceptual, t.smoothness, t.folding, t.additive] {
        assert!(v >= 0.0);
    }

    let only = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.1, lambda5: 0.0, lambda6: 0.0 };
    let l = total_ssl_loss(&p, &net, &comp, &only).unwrap();
    assert_eq!(l.total.item(), 0.1 * l.smoothness.item());

    p.r_tk = Tensor::full(&[1, 15, 16, 4], 1.0);
    assert!(total_ssl_loss(&p, &net, &comp, &w).is_err());
}

#[test]
fn total_loss_gradients_through_all_parameters() {
    let cfg = NetConfig { alpha_init: [2.0, 0.5], ..small_config() };
    let mut net = MorphNet::new(&cfg, 6).unwrap();
    let comp = Comparator::new(&cfg, &net.encoder, 0.99).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = pair(&mut rng, [16, 16, 4]);
    let w = LossWeights::default();
    let d0 = net.predict(&p.i_t, &p.i_tk).unwrap().transform.deformation.detach();
    let loss = |n: &MorphNet| Ok(total_ssl_loss_anchored(&p, n, &comp, &w, Some(&d0))?.total);
    let (err, at) = module_grad_check(&mut net, loss, 1e-5, 1).unwrap();
    assert!(err < 1e-3, "{err} at {at}");
}
