use super::*;
use crate::morphnet::module_grad_check;
use crate::tensor::grad_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scales(w_b: f64, w_a: f64) -> ClassifierScales {
    ClassifierScales {
        w_b: Parameter::positive_scalar("w_b", w_b),
        w_a: Parameter::positive_scalar("w_a", w_a),
    }
}

fn bce_oracle(p: f64, y: bool) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn cdf_oracle(a: f64, b: f64, t: f64) -> f64 {
    1.0 / (1.0 + (-(t - b) / (a + 0.05)).exp())
}

fn scalar(v: f64) -> Tensor {
    Tensor::scalar(v)
}

#[test]
fn cdf_examples() {
    let p = CdfParams { a: 0.3, b: 0.6 };
    assert_eq!(p.cdf(0.6), 0.5);
    let steep = CdfParams { a: 0.0, b: 0.2 };
    assert!((steep.cdf(0.7) - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-12);
    let grid: Vec<f64> = (0..100).map(|i| p.cdf(i as f64 / 50.0)).collect();
    assert!(grid.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn cdf_monotone_on_random_params() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let p = CdfParams { a: rng.gen_range(1e-6..1.0), b: rng.gen_range(1e-3..5.0) };
        let (p6, p12, p18) = (p.cdf(6.0 / 18.0), p.cdf(12.0 / 18.0), p.cdf(1.0));
        assert!(p6 <= p12 && p12 <= p18);
    }
}

#[test]
fn risk_examples() {
    assert!((risk_score(CdfParams { a: 0.5, b: 1e-8 }) - 1.0).abs() < 1e-6);
    assert!(risk_score(CdfParams { a: 0.5, b: 1e3 }) < 1e-12);
    let r = risk_score(CdfParams { a: 0.95, b: 1.0 });
    assert!((r - 2.0 / (1.0 + std::f64::consts::E)).abs() < 1e-12);
    assert!((r - 0.5379).abs() < 1e-4);
    assert_eq!(risk_group(0.33), RiskGroup::Low);
    assert_eq!(risk_group(0.330_000_000_1), RiskGroup::Moderate);
    assert_eq!(risk_group(0.5), RiskGroup::Moderate);
    assert_eq!(risk_group(0.67), RiskGroup::Moderate);
    assert_eq!(risk_group(0.670_000_000_1), RiskGroup::High);
    assert_eq!(risk_group(0.8), RiskGroup::High);
    assert_eq!(risk_group(0.0), RiskGroup::Low);
}

#[test]
fn entropy_limits_and_scale_laws() {
    let s = scales(1.3, 0.7);
    let n = 36;
    let flat = saliency_head(Tensor::full(&[1, 3, 3, 4], 0.4), &s).unwrap();
    assert!((flat.entropy.item() - (n as f64).ln()).abs() < 1e-12);
    let mut peaked = vec![1e-12; n];
    peaked[5] = 10.0;
    let p = saliency_head(Tensor::new(&[1, 3, 3, 4], peaked).unwrap(), &s).unwrap();
    assert!(p.entropy.item() < 1e-9);
    assert!((p.a.item() - 0.5).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..2.0)).collect();
    let one = saliency_head(Tensor::new(&[1, 3, 3, 4], m.clone()).unwrap(), &s).unwrap();
    let two = saliency_head(Tensor::new(&[1, 3, 3, 4], m.iter().map(|v| 2.0 * v).collect()).unwrap(), &s).unwrap();
    assert!((one.a.item() - two.a.item()).abs() < 1e-9);
    assert!((two.b.item() - one.b.item() / 2.0).abs() < 1e-12 * one.b.item());
    assert!((one.normalized.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(one.a.item() > 0.0 && one.a.item() < 1.0 && one.b.item() > 0.0);
}

#[test]
fn classification_cases_closed_form() {
    // Case 1: b at the interval midpoint, a -> 0.
    let r = ConversionRecord::new(0.3 * 18.0, 0.7 * 18.0).unwrap();
    let (a, b) = (0.0, 0.5);
    let l = classification_loss(&scalar(a), &scalar(b), &r).unwrap().item();
    let oracle = 0.5 * bce_oracle(cdf_oracle(a, b, 0.7), true) + 0.5 * bce_oracle(cdf_oracle(a, b, 0.3), false);
    assert!((l - oracle).abs() < 1e-9);
    // The 0.05 offset bounds the steepness: both anchors sit at z = ±4.
    assert!((l - (-4.0f64).exp().ln_1p()).abs() < 1e-9);

    // Case 2: far conversion estimate.
    let r = ConversionRecord::new(24.0, f64::INFINITY).unwrap();
    let (a, b) = (0.01, 20.0);
    let l = classification_loss(&scalar(a), &scalar(b), &r).unwrap().item();
    let oracle = 0.5 * bce_oracle(cdf_oracle(a, b, 0.0), false) + 0.5 * bce_oracle(cdf_oracle(a, b, 1.0), false);
    assert!((l - oracle).abs() < 1e-9);
    assert!(l < 1e-6);

    // Case 3 and p = 0.5 at both anchors.
    let r = ConversionRecord::new(f64::NEG_INFINITY, 0.0).unwrap();
    let l = classification_loss(&scalar(1e6), &scalar(0.5), &r).unwrap().item();
    let oracle = 0.5 * bce_oracle(cdf_oracle(1e6, 0.5, 0.0), true) + 0.5 * bce_oracle(cdf_oracle(1e6, 0.5, 1.0), true);
    assert!((l - oracle).abs() < 1e-9);
    assert!((l - std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn straddling_records_rejected() {
    assert!(ConversionRecord::new(12.0, 24.0).unwrap().case().is_err());
    assert!(ConversionRecord::new(10.0, f64::INFINITY).unwrap().case().is_err());
    assert!(ConversionRecord::new(18.0, 19.0).unwrap().case().is_err());
    assert_eq!(ConversionRecord::new(0.0, 18.0).unwrap().case().unwrap(), RecordCase::Within);
    assert_eq!(ConversionRecord::new(-3.0, 0.0).unwrap().case().unwrap(), RecordCase::Converted);
    assert_eq!(ConversionRecord::new(18.5, 30.0).unwrap().case().unwrap(), RecordCase::Beyond);
    assert!(ConversionRecord::new(5.0, 5.0).is_err());
    let l = classification_loss(&scalar(0.5), &scalar(0.5), &ConversionRecord::new(12.0, 24.0).unwrap());
    assert!(matches!(l, Err(MorphError::Data(_))));
}

#[test]
fn record_json_roundtrip_with_infinities() {
    let r = ConversionRecord::new(f64::NEG_INFINITY, f64::INFINITY).unwrap();
    let s = serde_json::to_string(&r).unwrap();
    assert_eq!(s, r#"{"t_minus":"-inf","t_plus":"inf"}"#);
    assert_eq!(serde_json::from_str::<ConversionRecord>(&s).unwrap(), r);
    let r = ConversionRecord::new(1.5, 7.0).unwrap();
    assert_eq!(serde_json::from_str::<ConversionRecord>(&serde_json::to_string(&r).unwrap()).unwrap(), r);
}

#[test]
fn total_loss_bookkeeping() {
    let s = scales(1.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m: Vec<f64> = (0..36).map(|_| rng.gen_range(0.1..1.0)).collect();
    let out = saliency_head(Tensor::new(&[1, 3, 3, 4], m.clone()).unwrap(), &s).unwrap();
    let inside = Tensor::full(&[1, 3, 3, 4], 1.0);
    let rec = ConversionRecord::new(3.0, 9.0).unwrap();
    let l = ttc_total_loss(&out, &rec, &inside).unwrap();
    assert_eq!(l.outside.item(), 0.0);
    assert_eq!(l.total.item(), l.classification.item() + l.slope.item() + l.outside.item());
    assert!(ttc_total_loss(&out, &rec, &Tensor::full(&[1, 3, 3, 2], 1.0)).is_err());
    let half = ClassifierOutput { a: scalar(0.5), ..out };
    assert!((half.a.square().scale(SLOPE_PENALTY).item() - 0.025).abs() < 1e-15);
}

#[test]
fn cdf_and_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let records = [
        ConversionRecord::new(3.0, 9.0).unwrap(),
        ConversionRecord::new(20.0, f64::INFINITY).unwrap(),
        ConversionRecord::new(-4.0, 0.0).unwrap(),
    ];
    for i in 0..6 {
        let ab = [rng.gen_range(0.1..0.9), rng.gen_range(0.2..1.5)];
        let t = rng.gen_range(0.0..1.0);
        let cdf = |x: &Tensor| sigmoidal_cdf_tensor(&x.narrow(0, 1)?, &x.narrow(1, 1)?, t);
        assert!(grad_check(cdf, &ab, &[2], 1e-6).unwrap() < 1e-4);
        let rec = records[i % 3];
        let cls = |x: &Tensor| classification_loss(&x.narrow(0, 1)?, &x.narrow(1, 1)?, &rec);
        let e = grad_check(cls, &ab, &[2], 1e-6).unwrap();
        assert!(e < 1e-4, "{e}");
    }
}

#[test]
fn classifier_gradients() {
    let init = Init::new(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for k in 0..5 {
        let mut head = Classifier::new(&init, &format!("cls{k}"), 8).unwrap();
        let f = Tensor::new(&[16, 3, 3, 4], (0..16 * 36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let roi: Vec<f64> = (0..36).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
        let roi = Tensor::new(&[1, 3, 3, 4], roi).unwrap();
        let rec = ConversionRecord::new(2.0, 8.0).unwrap();
        let loss = |c: &Classifier| Ok(ttc_total_loss(&c.forward(&f)?, &rec, &roi)?.total);
        let (e, at) = module_grad_check(&mut head, loss, 1e-5, 4).unwrap();
        assert!(e < 1e-4, "{e} at {at}");
        // Input gradient of the forward map.
        let fwd = |x: &Tensor| {
            let o = head.forward(x)?;
            Ok(o.a.add(&o.b)?)
        };
        assert!(grad_check(fwd, f.data(), f.shape(), 1e-6).unwrap() < 1e-4);
    }
}

#[test]
fn non_finite_features_rejected() {
    let head = Classifier::new(&Init::new(0), "c", 4).unwrap();
    let mut v = vec![0.0; 8 * 2];
    v[3] = f64::NAN;
    assert!(matches!(head.forward(&Tensor::new(&[8, 2, 1, 1], v).unwrap()), Err(MorphError::NonFinite(_))));
}

proptest::proptest! {
    #[test]
    fn cdf_is_monotone_and_bounded(a in 0.0f64..5.0, b in 1e-6f64..10.0, t0 in -1.0f64..3.0, dt in 0.0f64..3.0) {
        let p = CdfParams { a, b };
        let (lo, hi) = (p.cdf(t0), p.cdf(t0 + dt));
        proptest::prop_assert!(lo <= hi);
        proptest::prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
    }

    #[test]
    fn risk_is_a_probability_decreasing_in_b(a in 0.0f64..5.0, b in 1e-6f64..10.0, db in 0.0f64..10.0) {
        let r = risk_score(CdfParams { a, b });
        proptest::prop_assert!((0.0..=1.0).contains(&r));
        let later = risk_score(CdfParams { a, b: b + db });
        proptest::prop_assert!(later <= r);
    }
}
