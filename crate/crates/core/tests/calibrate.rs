use prefixquant::calibrate::{
    block_errors, calibrate_model, clip_grid, grid_search_clipping, grid_search_static, step_candidates, CalibConfig,
    SearchMethod,
};
use prefixquant::corpus::{generate_corpus, windows};
use prefixquant::model::{Linear, ModelConfig, QuantHookSet, SiteId, SiteKind, SiteQuantizer, ToyModel};
use prefixquant::outlier::{analyze, OutlierThresholds};
use prefixquant::planted::{planted_model, PlantedConfig};
use prefixquant::prefix::{build_prefix_cache, select_prefix_from_report, PrefixOrder};
use prefixquant::quant::{fake_quant_scalar, scale_zero, Granularity, Mode, QuantSpec};
use prefixquant::tensor::Rng;
use proptest::prelude::*;

fn spec(bits: u8, g: Granularity, mode: Mode) -> QuantSpec {
    QuantSpec::new(bits, g, mode).unwrap()
}

/// Per-tensor fake-quant MSE of `data` with clipping `(γ, β)`, scalar code only.
fn data_mse(data: &[f32], bits: u8, gamma: f32, beta: f32) -> f64 {
    let s = spec(bits, Granularity::PerTensor, Mode::Dynamic);
    let lo = data.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let (sc, z) = scale_zero(lo, hi, &s, gamma, beta);
    step_mse(data, &s, sc, z)
}

fn step_mse(data: &[f32], s: &QuantSpec, sc: f32, z: f32) -> f64 {
    data.iter()
        .map(|&x| ((fake_quant_scalar(x, sc, z, s.qmax()) - x) as f64).powi(2))
        .sum::<f64>()
        / data.len() as f64
}

fn small_cfg() -> CalibConfig {
    CalibConfig {
        s_points: 8,
        z_candidates: 16,
        ..CalibConfig::with_step(0.05)
    }
}

#[test]
fn uniform_data_keeps_full_range_at_eight_bits() {
    let mut rng = Rng::seed(1);
    let data: Vec<f32> = (0..4096).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let grid = clip_grid(0.5, 0.01);
    let c = grid_search_clipping(&grid, &grid, |g, b| Ok(data_mse(&data, 8, g, b))).unwrap();
    assert_eq!((c.gamma, c.beta), (1.0, 1.0));
    // Analytic check: for U[−1,1] the expected error of range ±c at N bits is
    // c·s²/12 + (1 − c)³/3 with s = 2c/(2^N − 1); c = 1 is the grid optimum.
    let analytic = |c: f64| c * (2.0 * c / 255.0).powi(2) / 12.0 + (1.0 - c).powi(3) / 3.0;
    assert!(grid.iter().all(|&g| analytic(g as f64) >= analytic(1.0)));
}

#[test]
fn spike_is_clipped() {
    // Non-negative bulk, so only γ matters; the spike sits 10× above it.
    let mut data: Vec<f32> = (0..15).map(|i| i as f32 / 14.0).collect();
    data.push(10.0);
    let grid = clip_grid(0.5, 0.01);
    let c = grid_search_clipping(&grid, &grid, |g, b| Ok(data_mse(&data, 4, g, b))).unwrap();
    assert!(c.gamma < 1.0, "{c:?}");
    assert!(c.mse < c.mse_max_min);
}

#[test]
fn single_point_grid_is_max_min() {
    let data = [0.3f32, -0.7, 1.9, 0.0];
    let c = grid_search_clipping(&[1.0], &[1.0], |g, b| Ok(data_mse(&data, 4, g, b))).unwrap();
    assert_eq!((c.gamma, c.beta, c.evaluated), (1.0, 1.0, 1));
    assert_eq!(c.mse, c.mse_max_min);
}

#[test]
fn constant_capture_gives_zero_point_zero() {
    let s = spec(4, Granularity::PerTensor, Mode::Static);
    for c in [0.0f32, 2.5] {
        let data = [c; 8];
        let r = grid_search_static(c, c, &s, &CalibConfig::default(), |sc, z| Ok(step_mse(&data, &s, sc, z))).unwrap();
        assert_eq!(r.zero, 0.0);
        assert_eq!(r.scale, 1e-8);
    }
}

/// Brute-force step grid: every integer zero point whose window meets the
/// data range, plus the max–min one.
fn oracle_candidates(lo: f32, hi: f32, s: &QuantSpec, points: usize, span: f32) -> Vec<(f32, f32)> {
    let (s_mm, _) = scale_zero(lo, hi, s, 1.0, 1.0);
    let qmax = s.qmax() as f64;
    let mut out: Vec<(f32, f32)> = Vec::new();
    for k in 0..points {
        let sc = if k == 0 {
            s_mm
        } else {
            ((s_mm as f64) * (span as f64).powf(-(k as f64) / (points - 1) as f64)).max(1e-8) as f32
        };
        if out.last().is_some_and(|p| p.0 == sc) {
            continue;
        }
        let sd = sc as f64;
        let mm_z = (-(lo as f64 / sd).floor()).clamp(0.0, qmax);
        for z in 0..=(qmax as i64) {
            let z = z as f64;
            let meets = -z * sd <= hi as f64 && (qmax - z) * sd >= lo as f64;
            if meets || z == mm_z {
                out.push((sc, z as f32));
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn clipping_search_matches_rescan(
        table in prop::collection::vec(0u8..6, 36),
        ng in 1usize..6,
        nb in 1usize..6,
    ) {
        let gs: Vec<f32> = (0..ng).map(|i| 1.0 - 0.1 * i as f32).collect();
        let bs: Vec<f32> = (0..nb).map(|i| 1.0 - 0.1 * i as f32).collect();
        let value = |g: f32, b: f32| {
            let gi = gs.iter().position(|&x| x == g).unwrap();
            let bi = bs.iter().position(|&x| x == b).unwrap();
            table[gi * 6 + bi] as f64
        };
        let c = grid_search_clipping(&gs, &bs, |g, b| Ok(value(g, b))).unwrap();
        // Re-scan: minimum value; ties to larger γ, then larger β.
        let mut best = (f64::INFINITY, f32::NEG_INFINITY, f32::NEG_INFINITY);
        for &g in &gs {
            for &b in &bs {
                let v = value(g, b);
                if v < best.0 || (v == best.0 && (g > best.1 || (g == best.1 && b > best.2))) {
                    best = (v, g, b);
                }
            }
        }
        prop_assert_eq!((c.mse, c.gamma, c.beta), best);
        prop_assert_eq!(c.mse_max_min, value(1.0, 1.0));
    }

    #[test]
    fn step_search_matches_rescan(
        lo in -3.0f32..0.5,
        width in 0.01f32..4.0,
        bits in 2u8..5,
        seed in 0u64..1000,
    ) {
        let hi = lo + width;
        let s = spec(bits, Granularity::PerTensor, Mode::Static);
        let cfg = CalibConfig { s_points: 12, z_candidates: 1000, ..CalibConfig::default() };
        let mut rng = Rng::seed(seed);
        let mut data: Vec<f32> = (0..64).map(|_| rng.uniform(lo, hi)).collect();
        data[0] = lo;
        data[1] = hi;
        let mut cands = step_candidates(lo, hi, &s, &cfg).unwrap();
        let mut oracle = oracle_candidates(lo, hi, &s, 12, cfg.s_span);
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        prop_assert_eq!(&cands, &oracle);

        let r = grid_search_static(lo, hi, &s, &cfg, |sc, z| Ok(step_mse(&data, &s, sc, z))).unwrap();
        let mut best = (f64::INFINITY, 0.0f32, 0.0f32);
        for &(sc, z) in &oracle {
            let v = step_mse(&data, &s, sc, z);
            if v < best.0 || (v == best.0 && (sc > best.1 || (sc == best.1 && z < best.2))) {
                best = (v, sc, z);
            }
        }
        prop_assert_eq!((r.mse, r.scale, r.zero), best);
        let (s_mm, z_mm) = scale_zero(lo, hi, &s, 1.0, 1.0);
        prop_assert_eq!(r.mse_max_min, step_mse(&data, &s, s_mm, z_mm));
        prop_assert!(r.mse <= r.mse_max_min);
    }
}

fn tiny_model(seed: u64) -> ToyModel {
    ToyModel::init_random(ModelConfig::tiny(), &mut Rng::seed(seed)).unwrap()
}

fn calib_set(seed: u64, n: usize, len: usize) -> Vec<Vec<u32>> {
    windows(&generate_corpus(n * len + 16, seed), n, len)
}

/// Per-token dynamic activations, per-channel weights, grouped K/V.
fn dynamic_hooks(cfg: &ModelConfig, bits: u8) -> QuantHookSet {
    let mut h = QuantHookSet::new();
    for l in 0..cfg.n_layers {
        for lin in Linear::ALL {
            h.insert(SiteId::new(l, SiteKind::Weight(lin)), SiteQuantizer::new(spec(bits, Granularity::PerChannel, Mode::Static)))
                .unwrap();
            h.insert(SiteId::new(l, SiteKind::Input(lin)), SiteQuantizer::new(spec(bits, Granularity::PerToken, Mode::Dynamic)))
                .unwrap();
        }
        for kind in [SiteKind::K, SiteKind::V] {
            h.insert(SiteId::new(l, kind), SiteQuantizer::new(spec(bits, Granularity::Group(cfg.head_dim.min(128)), Mode::Dynamic)))
                .unwrap();
        }
    }
    h
}

/// Per-tensor static activations and per-head static K/V.
fn static_hooks(bits: u8, layers: &[usize]) -> QuantHookSet {
    let mut h = QuantHookSet::new();
    for &l in layers {
        for lin in Linear::ALL {
            h.insert(SiteId::new(l, SiteKind::Input(lin)), SiteQuantizer::new(spec(bits, Granularity::PerTensor, Mode::Static)))
                .unwrap();
        }
        for kind in [SiteKind::K, SiteKind::V] {
            h.insert(SiteId::new(l, kind), SiteQuantizer::new(spec(bits, Granularity::PerHead, Mode::Static))).unwrap();
        }
    }
    h
}

#[test]
fn no_hooks_no_change() {
    let m = tiny_model(3);
    let (h, r) = calibrate_model(&m, &QuantHookSet::new(), None, &calib_set(1, 2, 16), &small_cfg()).unwrap();
    assert!(h.is_empty() && r.sites.is_empty());
    assert!(calibrate_model(&m, &QuantHookSet::new(), None, &[], &small_cfg()).is_err());
}

#[test]
fn dynamic_scheme_dominates_and_is_deterministic() {
    let m = tiny_model(4);
    let seqs = calib_set(2, 2, 32);
    let hooks = dynamic_hooks(&m.config, 4);
    let (a, ra) = calibrate_model(&m, &hooks, None, &seqs, &small_cfg()).unwrap();
    let (b, rb) = calibrate_model(&m, &hooks, None, &seqs, &small_cfg()).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.sites.len(), hooks.len());
    for s in &ra.sites {
        assert_eq!(s.method, SearchMethod::ClipGrid);
        assert!(s.mse_best <= s.mse_max_min, "{s:?}");
    }
    // Something was actually clipped at 4 bits.
    assert!(ra.sites.iter().any(|s| s.gamma < 1.0 || s.beta < 1.0));

    let (mm, _) = calibrate_model(&m, &hooks, None, &seqs, &CalibConfig::max_min()).unwrap();
    let e_cal = block_errors(&m, &a, None, &seqs).unwrap();
    let e_mm = block_errors(&m, &mm, None, &seqs).unwrap();
    for (c, x) in e_cal.iter().zip(&e_mm) {
        assert!(c <= x, "{e_cal:?} vs {e_mm:?}");
    }
}

#[test]
fn sixteen_bit_static_is_near_lossless() {
    let m = tiny_model(5);
    let seqs = calib_set(3, 2, 24);
    let hooks = static_hooks(16, &[0, 1]);
    let cfg = CalibConfig {
        s_points: 3,
        z_candidates: 8,
        ..CalibConfig::with_step(0.25)
    };
    let (_, r) = calibrate_model(&m, &hooks, None, &seqs, &cfg).unwrap();
    for s in &r.sites {
        assert!(s.mse_best < 1e-6, "{s:?}");
        if s.method == SearchMethod::StepGrid {
            assert!(s.scale.is_some() && s.zero.is_some());
        }
    }
}

#[test]
fn prefix_shrinks_static_error_on_planted_outliers() {
    let cfg = ModelConfig::tiny();
    let m = planted_model(cfg.clone(), PlantedConfig::default(), &mut Rng::seed(6)).unwrap();
    let seqs = calib_set(4, 2, 48);
    let report = analyze(&m, &seqs, &OutlierThresholds::default(), None).unwrap();
    let plan = select_prefix_from_report(&report, PrefixOrder::Listed).unwrap();
    let cache = build_prefix_cache(&m, &plan).unwrap();
    // The planted layer's MLP output is where the massive value is written.
    let site = SiteId::new(1, SiteKind::Input(Linear::DownProj));
    let mut hooks = QuantHookSet::new();
    hooks.insert(site, SiteQuantizer::new(spec(4, Granularity::PerTensor, Mode::Static))).unwrap();
    let c = small_cfg();
    let (_, without) = calibrate_model(&m, &hooks, None, &seqs, &c).unwrap();
    let (_, with) = calibrate_model(&m, &hooks, Some(&cache.kv), &seqs, &c).unwrap();
    let (a, b) = (without.sites[0].mse_best, with.sites[0].mse_best);
    assert!(b * 10.0 <= a, "without {a}, with {b}");
}
