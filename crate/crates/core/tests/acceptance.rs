//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Built with `harness = false`, so the lines are printed by plain
//! `cargo test` without `--nocapture`. Exits nonzero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};

use common::{check_instance, Instance, Kind, D};
use l4q::inference::{bench, export, flops, write_bench_csv, BenchConfig, Checkpoint, ExecPath, LayerDims};
use l4q::layers::{L4qLayer, Layer, LoraAdapter, LsqLayer, QaLoraLayer, QatLoraLayer};
use l4q::numerics::{randn, Matrix, Rng};
use l4q::probe::{probe_assert_flushed, AllocProbe};
use l4q::qinit::{init_matrix, InitScheme};
use l4q::quantizer::{clip_error, dequantize, pack, unpack, QuantSpec};
use l4q::trainer::{make_task, train, train_model, Method, ScratchPolicy, TaskShape, ToyModel, TrainConfig};
use l4q::L4qError;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let per_kind = 20;
    for kind in Kind::ALL {
        for seed in 0..per_kind {
            let inst = Instance::random(kind, 1000 + seed);
            worst = worst.max(check_instance(&inst).map_err(|e| format!("seed {seed}: {e}"))?);
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!(
        "{} instances x 5 kinds, worst rel err {worst:.2e} < 1e-5, {took:.2?}",
        per_kind
    ))
}

fn backward(layer: &mut dyn Layer<f64>, x: &Matrix<f64>, g: &Matrix<f64>) -> l4q::layers::LayerGrads<f64> {
    layer.forward(x).unwrap();
    layer.backward(g, &AllocProbe::new()).unwrap().grads
}

fn transpose(m: &D) -> D {
    D {
        r: m.c,
        c: m.r,
        v: (0..m.r * m.c).map(|i| m.at(i % m.r, i / m.r)).collect(),
    }
}

fn criterion_2() -> Outcome {
    let trials = 20;
    let mut clipped_total = 0;
    for seed in 0..trials {
        let inst = Instance::random(Kind::L4q, 2000 + seed);
        let mask = inst.surrogate().mask();
        clipped_total += mask.iter().filter(|m| !**m).count();
        let grads = backward(&mut *inst.layer(), &inst.x.m(), &inst.g.m());

        // dA, dB recomputed with clipped entries of G X^T removed
        let mut dw = inst.g.mul(&transpose(&inst.x));
        for (v, keep) in dw.v.iter_mut().zip(&mask) {
            if !keep {
                *v = 0.0;
            }
        }
        let da = transpose(&inst.b).mul(&dw).times(inst.alpha);
        let db = dw.mul(&transpose(&inst.a)).times(inst.alpha);
        let gap = |m: &Matrix<f64>, d: &D| m.as_slice().iter().zip(&d.v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let (ga, gb) = (gap(grads.d_a.as_ref().unwrap(), &da), gap(grads.d_b.as_ref().unwrap(), &db));
        ensure(ga < 1e-10 && gb < 1e-10, || format!("seed {seed}: gated adapter grads off by {ga:e}/{gb:e}"))?;

        // all clipped: adapter gradients exactly zero
        let mut params = inst.params();
        params.scales_mut().iter_mut().for_each(|s| *s = 1e-6);
        params.biases_mut().iter_mut().for_each(|b| *b = 1e3);
        let mut layer = L4qLayer::new(inst.w0.m(), inst.adapter(), params, inst.spec()).unwrap();
        let g = backward(&mut layer, &inst.x.m(), &inst.g.m());
        let zero = |m: Option<Matrix<f64>>| m.unwrap().as_slice().iter().all(|v| *v == 0.0);
        ensure(zero(g.d_a) && zero(g.d_b), || format!("seed {seed}: clipped elements reached A/B"))?;

        // alpha = 0 reproduces LSQ exactly
        let mut adapter = inst.adapter();
        adapter.set_alpha(0.0);
        let mut l4q = L4qLayer::new(inst.w0.m(), adapter, inst.params(), inst.spec()).unwrap();
        let mut lsq = LsqLayer::new(inst.w0.m(), inst.params(), inst.spec()).unwrap();
        let (a, b) = (backward(&mut l4q, &inst.x.m(), &inst.g.m()), backward(&mut lsq, &inst.x.m(), &inst.g.m()));
        ensure(a.d_scale == b.d_scale && a.d_bias == b.d_bias, || format!("seed {seed}: alpha=0 differs from LSQ"))?;

        // QAT-LoRA vs L4Q: equal iff alpha B A = 0
        let x = inst.x.m();
        let zero_b = LoraAdapter::new(inst.a.m(), Matrix::zeros(inst.b.r, inst.b.c), inst.alpha).unwrap();
        let q0 = QatLoraLayer::new(inst.w0.m(), zero_b.clone(), inst.params(), inst.spec()).unwrap();
        let l0 = L4qLayer::new(inst.w0.m(), zero_b, inst.params(), inst.spec()).unwrap();
        ensure(q0.infer(&x).unwrap() == l0.infer(&x).unwrap(), || {
            format!("seed {seed}: QAT-LoRA != L4Q with BA = 0")
        })?;
        let q1 = QatLoraLayer::new(inst.w0.m(), inst.adapter(), inst.params(), inst.spec()).unwrap();
        let l1 = L4qLayer::new(inst.w0.m(), inst.adapter(), inst.params(), inst.spec()).unwrap();
        ensure(q1.infer(&x).unwrap() != l1.infer(&x).unwrap(), || {
            format!("seed {seed}: QAT-LoRA == L4Q with BA != 0")
        })?;
    }
    ensure(clipped_total > 0, || "no clipped elements exercised".into())?;
    Ok(format!(
        "{trials} instances: gating exact ({clipped_total} clipped elements), alpha=0 == LSQ, QAT-LoRA == L4Q iff BA = 0"
    ))
}

fn criterion_3() -> Outcome {
    let seeds = 100u64;
    let base = TrainConfig {
        eval_every: 1000,
        ..Default::default()
    };
    let spec = base.spec().unwrap();
    let (mut vs_asymm, mut vs_lsq) = (0, 0);
    for seed in 0..seeds {
        let task = make_task(base.task, base.shape, seed).unwrap();
        for w in &task.base {
            let clip = |scheme| {
                let p = init_matrix(w, scheme, &spec).unwrap().params;
                clip_error(w, &p, &spec).unwrap()
            };
            ensure(clip(InitScheme::L4q) == 0.0 && clip(InitScheme::Asymm) == 0.0, || {
                format!("seed {seed}: L4Q/Asymm initial clip nonzero")
            })?;
            ensure(clip(InitScheme::LsqPlus) > 0.0 && clip(InitScheme::Symm) > 0.0, || {
                format!("seed {seed}: LSQ+/Symm initial clip zero")
            })?;
        }
        let post = |init| {
            let config = TrainConfig {
                init,
                seed,
                ..base.clone()
            };
            train_model::<f32>(&config, &task).unwrap().1.post_quant.unwrap().clip_error
        };
        let l4q = post(InitScheme::L4q);
        if l4q <= post(InitScheme::Asymm) {
            vs_asymm += 1;
        }
        if l4q <= post(InitScheme::LsqPlus) {
            vs_lsq += 1;
        }
    }
    let need = (seeds * 9).div_ceil(10);
    ensure(vs_asymm >= need && vs_lsq >= need, || {
        format!("post-training L4Q<=Asymm {vs_asymm}/{seeds}, L4Q<=LSQ+ {vs_lsq}/{seeds}")
    })?;
    Ok(format!(
        "{seeds} seeds: init clip L4Q=Asymm=0, LSQ+/Symm>0; post-training L4Q<=Asymm {vs_asymm}/{seeds}, L4Q<=LSQ+ {vs_lsq}/{seeds}"
    ))
}

fn criterion_4() -> Outcome {
    let mut config = TrainConfig::default();
    config.shape.depth = 4;
    let task = make_task(config.task, config.shape, 0).unwrap();
    let mut model = ToyModel::<f32>::build(&config, &task).unwrap();
    let x = task.train.x.select_cols(&(0..config.batch_size).collect::<Vec<_>>()).cast();
    let d_out = Matrix::filled(config.shape.out_dim, config.batch_size, 0.01f32);
    let probe = AllocProbe::new();
    model.forward(&x).unwrap();
    model.backward(&d_out, &probe, ScratchPolicy::Flush).unwrap();
    ensure(probe_assert_flushed(&probe), || format!("peak scratch {}", probe.peak()))?;
    let stats = probe.stats();

    let w = config.shape.width;
    let groups = w * w / config.group_size;
    let expected = config.shape.depth * (config.rank * w + w * config.rank + 2 * groups);
    let counts = model.trainable_counts();
    ensure(counts.hidden == expected, || format!("trainable {} != {expected}", counts.hidden))?;
    Ok(format!(
        "4-layer backward: peak scratch {} ({} allocations), trainable {} == A+B+2*groups, base weights {}",
        stats.peak, stats.allocations, counts.hidden, counts.base_weights
    ))
}

fn criterion_5() -> Outcome {
    let config = TrainConfig {
        steps: 200,
        ..Default::default()
    };
    let task = make_task(config.task, config.shape, 5).unwrap();
    let (model, _) = train_model::<f32>(&config, &task).unwrap();
    let ckpt = export(&model, true).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(55);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x: Matrix<f32> = randn(&mut rng, ckpt.in_dim(), 1, 1.0);
        worst = worst.max(ckpt.forward(&x).unwrap().max_abs_diff(&model.infer(&x).unwrap()).unwrap());
    }
    ensure(worst < 1e-6, || format!("export gap {worst:e}"))?;

    let mut merge_gap = 0.0f64;
    for seed in 0..20 {
        let mut rng = Rng::new(500 + seed);
        let spec = QuantSpec::new(4, 8).unwrap();
        let w0: Matrix<f64> = randn(&mut rng, 16, 32, 0.3);
        let params = init_matrix(&w0, InitScheme::L4q, &spec).unwrap().params;
        let adapter = LoraAdapter::new(randn(&mut rng, 2, 4, 0.3), randn(&mut rng, 16, 2, 0.3), 1.0).unwrap();
        let layer = QaLoraLayer::new(&w0, params, spec, adapter).unwrap();
        let merged = dequantize(layer.codes(), &layer.merged_params().unwrap()).unwrap();
        let x: Matrix<f64> = randn(&mut rng, 32, 4, 1.0);
        merge_gap = merge_gap.max(layer.infer(&x).unwrap().max_abs_diff(&merged.matmul(&x).unwrap()).unwrap());
    }
    ensure(merge_gap < 1e-10, || format!("QA-LoRA merge gap {merge_gap:e}"))?;

    let qat = TrainConfig {
        method: Method::QatLora,
        steps: 0,
        ..config.clone()
    };
    let qat_model = ToyModel::<f32>::build(&qat, &task).unwrap();
    let refused = matches!(export(&qat_model, true), Err(L4qError::MixedPrecisionExport { .. }));
    ensure(refused, || "QAT-LoRA fully-quantized export was not refused".into())?;
    Ok(format!(
        "export gap {worst:.1e} over 100 inputs, QA-LoRA merge gap {merge_gap:.1e}, QAT-LoRA refused"
    ))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    for bits in [4u8, 3] {
        let (mut lower, mut faster) = (0, 0);
        for seed in 0..5 {
            let l4q = train(&TrainConfig {
                n_bits: bits,
                seed,
                ..Default::default()
            })
            .map_err(|e| e.to_string())?;
            let ptq = train(&TrainConfig {
                method: Method::PtqFrozen,
                n_bits: bits,
                seed,
                ..Default::default()
            })
            .map_err(|e| e.to_string())?;
            if l4q.final_eval_loss < ptq.final_eval_loss {
                lower += 1;
            }
            if l4q
                .steps_to_reach(ptq.final_eval_loss)
                .is_some_and(|s| 2 * s <= l4q.config.steps)
            {
                faster += 1;
            }
        }
        ensure(lower >= 4 && faster >= 4, || {
            format!("{bits}-bit: lower loss {lower}/5, within half the steps {faster}/5")
        })?;
        lines.push(format!("{bits}-bit lower {lower}/5 faster {faster}/5"));
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(600), || format!("took {took:?}"))?;
    Ok(format!("{}, {took:.2?}", lines.join(", ")))
}

fn criterion_7() -> Outcome {
    let spec = QuantSpec::new(4, 32).unwrap();
    let mut cases = 0;
    for i in [32usize, 64, 256, 1024] {
        for o in [32usize, 128, 4096] {
            for r in [1usize, 4, 16, 64] {
                for tokens in [1usize, 7, 64] {
                    let dims = LayerDims {
                        in_dim: i,
                        out_dim: o,
                        tokens,
                    };
                    let fq = flops(ExecPath::FullyQuantized, dims, r, &spec);
                    let mixed = flops(ExecPath::Mixed, dims, r, &spec);
                    ensure(fq.macs < mixed.macs, || format!("{i}x{o} r{r} t{tokens}: not cheaper"))?;
                    let gap = (2 * r * (i + o) * tokens) as u64;
                    ensure(mixed.macs - fq.macs == gap, || format!("{i}x{o} r{r} t{tokens}: gap mismatch"))?;
                    cases += 1;
                }
            }
        }
    }
    let config = TrainConfig {
        steps: 0,
        ..Default::default()
    };
    let task = make_task(config.task, config.shape, 0).unwrap();
    let ckpt = export(&ToyModel::<f32>::build(&config, &task).unwrap(), true).unwrap();
    let rows = bench(
        &ckpt,
        &BenchConfig {
            reps: 3,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let mut csv = Vec::new();
    write_bench_csv(&rows, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    ensure(text.starts_with("path,batch,tokens_per_sec,min,median,max"), || "bad bench header".into())?;
    let batches: Vec<usize> = rows.iter().filter(|r| r.path == "mixed").map(|r| r.batch).collect();
    ensure(batches == [1, 2, 4, 8, 16, 32, 64], || format!("mixed batches {batches:?}"))?;
    ensure(rows.iter().all(|r| r.median > 0.0), || "missing wall times".into())?;
    let at = |path: &str, b: usize| rows.iter().find(|r| r.path == path && r.batch == b).unwrap().median;
    Ok(format!(
        "{cases} shapes: gap == 2r(i+o)t; bench rows {} (batch 64 median: fully_quantized {:.2e}s, mixed {:.2e}s)",
        rows.len(),
        at("fully_quantized", 64),
        at("mixed", 64)
    ))
}

fn criterion_8() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (2u8..=8).prop_flat_map(|bits| {
        let lo = -(1i16 << (bits - 1));
        let hi = (1i16 << (bits - 1)) - 1;
        (Just(bits), prop::collection::vec(lo..=hi, 0..300))
    });
    runner
        .run(&strategy, |(bits, codes)| {
            let codes: Vec<i8> = codes.into_iter().map(|c| c as i8).collect();
            let bytes = pack(&codes, bits).unwrap();
            prop_assert_eq!(unpack(&bytes, bits, codes.len()).unwrap(), codes);
            Ok(())
        })
        .map_err(|e| format!("pack/unpack: {e}"))?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checked = 0;
    for (method, fully) in [(Method::L4q, true), (Method::QaLora, true), (Method::QatLora, false)] {
        let config = TrainConfig {
            method,
            steps: 30,
            n_bits: if method == Method::QaLora { 3 } else { 4 },
            ..Default::default()
        };
        let task = make_task(config.task, config.shape, 8).unwrap();
        let (model, _) = train_model::<f32>(&config, &task).unwrap();
        let ckpt = export(&model, fully).unwrap();
        let path = dir.path().join(format!("{method}.l4q"));
        ckpt.save(&path).map_err(|e| e.to_string())?;
        let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        ensure(back == ckpt && back.to_bytes().unwrap() == bytes, || format!("{method}: checkpoint not bit-exact"))?;
        checked += 1;
    }
    Ok(format!(
        "1000 pack/unpack cases over widths 2-8, {checked} checkpoints save/load bit-exact"
    ))
}

fn main() {
    let shape = TaskShape::default();
    println!(
        "acceptance suite (task {}x{} depth {}, defaults from TrainConfig)",
        shape.width, shape.width, shape.depth
    );
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient fidelity", criterion_1),
        ("gating and reduction identities", criterion_2),
        ("initialization properties", criterion_3),
        ("memory contract", criterion_4),
        ("fully-quantized equivalence", criterion_5),
        ("training efficacy ordering", criterion_6),
        ("inference cost gap", criterion_7),
        ("codec exactness", criterion_8),
    ];
    let only: Option<usize> = std::env::var("L4Q_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{took:.1?}] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{took:.1?}] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
