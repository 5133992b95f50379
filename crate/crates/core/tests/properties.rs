//! Property tests over random seeds and layouts.

use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;
use refvfx::assembly::{rope_rotate, Position, RopeConfig, RopeTables, RopeVars, SegmentKind, SegmentLayout};
use refvfx::denoiser::{decomposed_attention, masked_full_attention};
use refvfx::eval::{rates, score, Rationale, VfxConsVerdict};
use refvfx::icmask::{build_mask, FlowTable};
use refvfx::rng;
use refvfx::tensor::{grad_check, Scalar, Tape, Tensor, Var};

const GRAD_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng::rng(seed))
}

/// `mean(y * w)` for a fixed random `w`, so every output element matters.
fn weighted(t: &mut Tape<f64>, y: Var, seed: u64) -> refvfx::Result<Var> {
    let w = t.constant(randn(t.shape(y), seed ^ 0x77));
    let p = t.mul(y, w)?;
    t.mean(p)
}

fn check(f: impl Fn(&mut Tape<f64>, Var) -> refvfx::Result<Var>, x: &Tensor<f64>) -> f64 {
    grad_check(f, x, EPS).unwrap()
}

macro_rules! gc {
    ($x:expr, $f:expr) => {{
        let e = check($f, &$x);
        prop_assert!(e < GRAD_TOL, "relative error {}", e);
    }};
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn grad_matmul(seed in any::<u64>()) {
        let x = randn(&[3, 4], seed);
        let b = randn(&[4, 5], seed.wrapping_add(1));
        let a = randn(&[2, 3], seed.wrapping_add(2));
        gc!(x, |t, v| { let b = t.constant(b.clone()); let y = t.matmul(v, b)?; weighted(t, y, seed) });
        gc!(x, |t, v| { let a = t.constant(a.clone()); let y = t.matmul(a, v)?; weighted(t, y, seed) });
    }

    #[test]
    fn grad_elementwise(seed in any::<u64>()) {
        let x = randn(&[3, 4], seed);
        let o = randn(&[3, 4], seed.wrapping_add(1));
        let r = randn(&[1, 4], seed.wrapping_add(2));
        gc!(x, |t, v| { let o = t.constant(o.clone()); let y = t.add(v, o)?; weighted(t, y, seed) });
        gc!(x, |t, v| { let y = t.mul(v, v)?; weighted(t, y, seed) });
        gc!(x, |t, v| { let r = t.constant(r.clone()); let y = t.add_row(v, r)?; weighted(t, y, seed) });
        gc!(x, |t, v| { let r = t.constant(r.clone()); let y = t.mul_row(v, r)?; weighted(t, y, seed) });
        gc!(r, |t, v| { let o = t.constant(o.clone()); let y = t.mul_row(o, v)?; t.mean(y) });
        gc!(x, |t, v| { let y = t.scale(v, -1.7)?; weighted(t, y, seed) });
    }

    #[test]
    fn grad_structural(seed in any::<u64>()) {
        let x = randn(&[4, 6], seed);
        let o = randn(&[4, 2], seed.wrapping_add(1));
        gc!(x, |t, v| { let o = t.constant(o.clone()); let y = t.concat(&[o, v], 1)?; weighted(t, y, seed) });
        gc!(x, |t, v| { let y = t.concat(&[v, v], 0)?; weighted(t, y, seed) });
        gc!(x, |t, v| { let y = t.slice(v, 1, 2, 3)?; weighted(t, y, seed) });
        gc!(x, |t, v| { let y = t.slice(v, 0, 1, 2)?; weighted(t, y, seed) });
        gc!(x, |t, v| {
            let p = t.split(v, 1, &[1, 2, 3])?;
            let y = t.mul(p[0], p[0])?;
            let a = weighted(t, p[2], seed)?;
            let b = t.mean(y)?;
            t.add(a, b)
        });
        gc!(x, |t, v| { let y = t.reshape(v, &[3, 8])?; weighted(t, y, seed) });
        gc!(x, |t, v| { let y = t.transpose(v)?; weighted(t, y, seed) });
    }

    #[test]
    fn grad_nonlinear(seed in any::<u64>()) {
        let x = randn(&[3, 5], seed);
        gc!(x, |t, v| { let y = t.softmax_masked(v, None)?; weighted(t, y, seed) });
        let mut r = rng::rng(seed);
        let mask: Vec<f64> = (0..15).map(|i| if i % 5 == 0 || r.random_bool(0.6) { 0.0 } else { f64::NEG_INFINITY }).collect();
        let mask = Arc::new(Tensor::new(vec![3, 5], mask).unwrap());
        gc!(x, |t, v| { let y = t.softmax_masked(v, Some(&mask))?; weighted(t, y, seed) });
        gc!(x, |t, v| { let y = t.layernorm(v, 1e-6)?; weighted(t, y, seed) });
        gc!(x, |t, v| { let y = t.gelu(v)?; weighted(t, y, seed) });
        gc!(x, |t, v| { let y = t.silu(v)?; weighted(t, y, seed) });
    }

    #[test]
    fn grad_lookup_and_losses(seed in any::<u64>()) {
        let table = randn(&[6, 4], seed);
        let ids: Vec<usize> = { let mut r = rng::rng(seed); (0..5).map(|_| r.random_range(0..6)).collect() };
        gc!(table, |t, v| { let y = t.embedding(v, &ids)?; weighted(t, y, seed) });
        let target = randn(&[6, 4], seed.wrapping_add(3));
        gc!(table, |t, v| { let c = t.constant(target.clone()); t.mse(v, c) });
        gc!(table, |t, v| { let m = t.mean(v)?; t.mul(m, m) });
    }
}

/// Random layout with optional concept tokens and a random table whose
/// diagonal is always allowed, so every query segment has a key.
fn random_case(seed: u64) -> (SegmentLayout, FlowTable) {
    let mut r = rng::rng(seed);
    let concept = r.random_bool(0.5).then(|| r.random_range(1..=4));
    let layout = SegmentLayout::in_context(
        r.random_range(1..=4),
        r.random_range(1..=4),
        r.random_range(1..=12),
        r.random_range(1..=12),
        concept,
    )
    .unwrap();
    let table = match r.random_range(0..3) {
        0 => FlowTable::canonical(),
        1 => FlowTable::all_true(),
        _ => {
            let mut t = FlowTable::canonical();
            for q in SegmentKind::ALL {
                for k in SegmentKind::ALL {
                    t.set(q, k, q == k || r.random_bool(0.5));
                }
            }
            t
        }
    };
    (layout, table)
}

fn attention_pair<T: Scalar>(seed: u64) -> (f64, f64) {
    let (layout, table) = random_case(seed);
    let n = layout.total_len();
    let d = 8;
    let mut r = rng::rng(seed ^ 1);
    let q = Tensor::<T>::randn(vec![n, d], 1.0, &mut r);
    let k = Tensor::<T>::randn(vec![n, d], 1.0, &mut r);
    let v = Tensor::<T>::randn(vec![n, d], 1.0, &mut r);
    let w = Tensor::<T>::randn(vec![n, d], 1.0, &mut r);
    let mask = build_mask(&layout, &table).unwrap().additive::<T>();
    let run = |full: bool| {
        let mut t = Tape::<T>::new();
        let (qv, kv, vv) = (t.param(q.clone()), t.param(k.clone()), t.param(v.clone()));
        let o = if full {
            masked_full_attention(&mut t, qv, kv, vv, Some(&mask)).unwrap().0
        } else {
            decomposed_attention(&mut t, qv, kv, vv, &layout, &table).unwrap()
        };
        let wv = t.constant(w.clone());
        let p = t.mul(o, wv).unwrap();
        let loss = t.mean(p).unwrap();
        let g = t.backward(loss).unwrap();
        let grads: Vec<Tensor<T>> = [qv, kv, vv].iter().map(|&x| g.get(x).unwrap().clone()).collect();
        (t.value(o).clone(), grads)
    };
    let (of, gf) = run(true);
    let (od, gd) = run(false);
    let grad_gap = gf.iter().zip(&gd).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
    (of.max_abs_diff(&od), grad_gap)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn attention_paths_agree_f64(seed in any::<u64>()) {
        let (fwd, bwd) = attention_pair::<f64>(seed);
        prop_assert!(fwd < 1e-10 && bwd < 1e-10, "fwd {fwd} bwd {bwd}");
    }

    #[test]
    fn attention_paths_agree_f32(seed in any::<u64>()) {
        let (fwd, bwd) = attention_pair::<f32>(seed);
        prop_assert!(fwd < 1e-5 && bwd < 1e-5, "fwd {fwd} bwd {bwd}");
    }

    #[test]
    fn mask_matches_table(seed in any::<u64>()) {
        let (layout, table) = random_case(seed);
        let m = build_mask(&layout, &table).unwrap();
        for i in 0..layout.total_len() {
            for j in 0..layout.total_len() {
                let (q, k) = (layout.kind_at(i).unwrap(), layout.kind_at(j).unwrap());
                prop_assert_eq!(m.get(i, j), table.allows(q, k));
            }
        }
        prop_assert_eq!(m.count_allowed(), table.allowed_entries(&layout));
    }

    #[test]
    fn rope_scores_depend_on_offset_only(
        seed in any::<u64>(),
        p in prop::array::uniform3(0usize..6),
        p2 in prop::array::uniform3(0usize..6),
        d in prop::array::uniform3(0usize..4),
    ) {
        let hd = 16;
        let cfg = RopeConfig::for_head_dim(hd, 100.0).unwrap();
        let add = |a: [usize; 3]| [a[0] + d[0], a[1] + d[1], a[2] + d[2]];
        let positions: Vec<Position> = vec![Some(p), Some(add(p)), Some(p2), Some(add(p2))];
        let tables = RopeTables::<f64>::new(&cfg, &positions);
        let mut r = rng::rng(seed);
        let q: Vec<f64> = (0..hd).map(|_| r.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..hd).map(|_| r.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = [&q, &k, &q, &k].iter().flat_map(|v| v.iter().copied()).collect();
        let mut t = Tape::new();
        let rope = RopeVars::register(&mut t, &tables);
        let xv = t.constant(Tensor::new(vec![4, hd], x).unwrap());
        let y = rope_rotate(&mut t, xv, rope).unwrap();
        let y = t.value(y);
        let dot = |a: usize, b: usize| (0..hd).map(|i| y.row(a)[i] * y.row(b)[i]).sum::<f64>();
        prop_assert!((dot(0, 1) - dot(2, 3)).abs() < 1e-12);
    }

    #[test]
    fn gated_rates_equal_mean_score(bits in prop::collection::vec(0u8..8, 1..40)) {
        let verdicts: Vec<VfxConsVerdict> = bits
            .iter()
            .map(|b| VfxConsVerdict::gated(b & 1 != 0, b & 2 != 0, b & 4 != 0, Rationale::default()))
            .collect();
        for v in &verdicts {
            prop_assert!(score(v.eos, v.efs, v.cls).is_ok());
            prop_assert!(!v.efs || v.eos);
            prop_assert!(!v.cls || v.efs);
        }
        let r = rates(&verdicts);
        let mean = verdicts.iter().map(|v| v.score).sum::<f64>() / verdicts.len() as f64;
        prop_assert!((r.score - mean).abs() < 1e-12);
    }
}
