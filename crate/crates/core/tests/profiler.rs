use std::collections::BTreeMap;

use proptest::prelude::*;
use spikequant::model::{forward_observed, synth_model, InjectionSpec, ModelConfig, Observer};
use spikequant::plan::{build_targeted_plan, HighPrecision, PrecisionPlan};
use spikequant::profile::{
    collect_stats, detect_sigma, detect_threshold, export_curves, StatAccumulator, SpikeReport,
};
use spikequant::site::{SiteId, SiteKind};
use spikequant::tensor::Tensor;
use spikequant::tokens::seeded_stream;

#[derive(Default)]
struct Dump(BTreeMap<SiteId, Vec<Tensor>>);

impl Observer for Dump {
    fn observe(&mut self, site: SiteId, x: &Tensor) {
        self.0.entry(site).or_default().push(x.clone());
    }
}

fn small() -> ModelConfig {
    ModelConfig { n_layers: 3, d_model: 16, n_heads: 2, d_ff: 24, vocab_size: 64, ..ModelConfig::default() }
}

#[test]
fn statistics_match_activation_dump() {
    let m = synth_model(&small(), &InjectionSpec::single(2, SiteKind::Down, 3, 50.0), 8).unwrap();
    let toks = seeded_stream(2, 40, 64).unwrap();
    let report = collect_stats(&m, &toks).unwrap();
    let mut dump = Dump::default();
    forward_observed(&m, &toks, None, &mut dump).unwrap();
    assert_eq!(report.sites.len(), dump.0.len());
    assert_eq!(report.sites.len(), 3 * 9 * 2);
    for s in &report.sites {
        let t = &dump.0[&s.site][0];
        let vals: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let (pos, max) = t
            .data()
            .iter()
            .enumerate()
            .fold((0, 0.0f32), |(p, m), (i, &v)| if v.abs() > m { (i, v.abs()) } else { (p, m) });
        assert_eq!(s.max_abs, max, "{}", s.site);
        assert_eq!(s.token_argmax, pos / t.last_dim());
        assert_eq!(s.count, vals.len() as u64);
        assert!((s.mean - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
        assert!((s.std - std).abs() <= 1e-9 * (1.0 + std));
        assert_eq!(s.tokens, toks.len());
    }
}

#[test]
fn injected_spike_is_located() {
    let c = small();
    let toks = seeded_stream(3, 32, 64).unwrap();
    let base = synth_model(&c, &InjectionSpec::default(), 5).unwrap();
    let mut dump = Dump::default();
    forward_observed(&base, &toks, None, &mut dump).unwrap();
    let down = &dump.0[&SiteId::output(2, SiteKind::Down)][0];
    let (pos, v) = (0..toks.len())
        .map(|t| (t, down.row(t)[7].abs()))
        .fold((0, 0.0f32), |a, b| if b.1 > a.1 { b } else { a });
    // scale the channel so its peak lands at 2500
    let s = 2500.0 / v;
    let m = synth_model(&c, &InjectionSpec::single(2, SiteKind::Down, 7, s), 5).unwrap();
    let r = collect_stats(&m, &toks).unwrap();
    let site = r.get(SiteId::output(2, SiteKind::Down)).unwrap();
    assert!((site.max_abs - 2500.0).abs() < 0.5, "{}", site.max_abs);
    assert_eq!(site.token_argmax, pos);
    assert!(detect_threshold(&r, 100.0).contains(&SiteId::output(2, SiteKind::Down)));
}

#[test]
fn zero_model_profiles_to_zero() {
    let mut m = synth_model(&small(), &InjectionSpec::default(), 1).unwrap();
    m.embedding = Tensor::zeros(m.embedding.shape().to_vec()).unwrap();
    let r = collect_stats(&m, &[0, 1, 2, 3]).unwrap();
    assert!(r.sites.iter().all(|s| s.max_abs == 0.0));
    let curve = export_curves(&r, SiteKind::Down).unwrap();
    assert_eq!(curve.len(), 3);
    assert!(curve.iter().all(|c| c.input_max_abs == 0.0 && c.output_max_abs == 0.0));
}

#[test]
fn profiling_is_deterministic_and_windowed() {
    let mut c = small();
    let toks = seeded_stream(4, 48, 64).unwrap();
    let m = synth_model(&c, &InjectionSpec::default(), 2).unwrap();
    let a = collect_stats(&m, &toks).unwrap();
    assert_eq!(a, collect_stats(&m, &toks).unwrap());
    assert_eq!(SpikeReport::from_json(&a.to_json().unwrap()).unwrap(), a);
    c.max_context = 16;
    let mut windowed = m.clone();
    windowed.config = c;
    let w = collect_stats(&windowed, &toks).unwrap();
    assert_eq!(w.sites.len(), a.sites.len());
    assert!(w.sites.iter().all(|s| s.count == (toks.len() * s.channel_max_abs.len()) as u64));
}

#[test]
fn standard_normal_has_few_six_sigma_values() {
    use rand::SeedableRng;
    use rand::Rng;
    // Box-Muller from a fixed stream
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let v: Vec<f32> = (0..10_000)
        .map(|_| {
            let (u1, u2): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
            ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
        })
        .collect();
    assert!(detect_sigma(&Tensor::from_vec(v).unwrap(), 6.0).unwrap().len() <= 1);
}

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-50.0f32..50.0, d), n)
}

proptest! {
    #[test]
    fn merge_matches_single_pass(data in rows(12, 4), cut_a in 1usize..11, cut_b in 1usize..11) {
        let (lo, hi) = (cut_a.min(cut_b), cut_a.max(cut_b).max(cut_a.min(cut_b) + 1).min(12));
        let t = |r: &[Vec<f32>]| Tensor::from_rows(r).unwrap();
        let mut whole = StatAccumulator::new(4);
        whole.push(&t(&data), 0);
        let mut a = StatAccumulator::new(4);
        a.push(&t(&data[..lo]), 0);
        let mut b = StatAccumulator::new(4);
        b.push(&t(&data[lo..hi]), lo);
        let mut c = StatAccumulator::new(4);
        if hi < 12 {
            c.push(&t(&data[hi..]), hi);
        }
        // (a + b) + c and a + (b + c)
        let mut left = a.clone();
        left.merge(&b);
        left.merge(&c);
        let mut bc = b.clone();
        bc.merge(&c);
        let mut right = a.clone();
        right.merge(&bc);
        let site = SiteId::input(1, SiteKind::Q);
        let w = whole.finish(site);
        for m in [left.finish(site), right.finish(site)] {
            prop_assert_eq!(m.max_abs, w.max_abs);
            prop_assert_eq!(m.token_argmax, w.token_argmax);
            prop_assert_eq!(m.count, w.count);
            prop_assert!((m.mean - w.mean).abs() <= 1e-6);
            prop_assert!((m.std - w.std).abs() <= 1e-6);
            prop_assert_eq!(&m.channel_max_abs, &w.channel_max_abs);
            prop_assert_eq!(&m.channel_hits, &w.channel_hits);
        }
    }

    #[test]
    fn threshold_and_plan_are_monotone(seed in 0u64..20, t1 in 0.5f32..30.0, t2 in 0.5f32..30.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let m = synth_model(&small(), &InjectionSpec::single(1, SiteKind::Out, 2, 4.0), seed).unwrap();
        let r = collect_stats(&m, &seeded_stream(seed, 12, 64).unwrap()).unwrap();
        let (a, b) = (detect_threshold(&r, lo), detect_threshold(&r, hi));
        prop_assert!(b.iter().all(|s| a.contains(s)));
        let pa = build_targeted_plan(&r, lo, HighPrecision::Fp16, 8).unwrap();
        let pb = build_targeted_plan(&r, hi, HighPrecision::Fp16, 8).unwrap();
        let (ha, hb) = (pa.high_precision_sites(), pb.high_precision_sites());
        prop_assert!(hb.iter().all(|s| ha.contains(s)));
        // every flagged down/out site is high precision
        for s in &a {
            if matches!(s.kind, SiteKind::Down | SiteKind::Out) {
                prop_assert!(ha.contains(&(s.layer, s.kind)));
            }
        }
        prop_assert_eq!(PrecisionPlan::from_json(&pa.to_json().unwrap()).unwrap(), pa);
    }
}
