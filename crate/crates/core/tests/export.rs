use l4q::inference::{export, Checkpoint, CheckpointLayer};
use l4q::layers::{Layer, LoraAdapter, QaLoraLayer};
use l4q::numerics::{randn, Matrix, Rng};
use l4q::qinit::{init_matrix, InitScheme};
use l4q::quantizer::{dequantize, QuantSpec};
use l4q::trainer::{make_task, train_model, Method, TaskShape, ToyModel, TrainConfig};
use l4q::L4qError;

fn trained(method: Method) -> (ToyModel<f32>, TrainConfig) {
    let mut c = TrainConfig {
        method,
        steps: 80,
        ..Default::default()
    };
    c.shape = TaskShape {
        depth: 3,
        width: 32,
        n_train: 256,
        n_eval: 64,
        ..Default::default()
    };
    let task = make_task(c.task, c.shape, 4).unwrap();
    (train_model::<f32>(&c, &task).unwrap().0, c)
}

fn max_gap(ckpt: &Checkpoint, model: &ToyModel<f32>, inputs: usize) -> f64 {
    let mut rng = Rng::new(77);
    (0..inputs)
        .map(|_| {
            let tokens = 1 + rng.below(8);
            let x: Matrix<f32> = randn(&mut rng, ckpt.in_dim(), tokens, 1.0);
            ckpt.forward(&x).unwrap().max_abs_diff(&model.infer(&x).unwrap()).unwrap()
        })
        .fold(0.0, f64::max)
}

#[test]
fn exported_forward_matches_training_forward() {
    for method in [Method::L4q, Method::LsqQat, Method::PtqFrozen, Method::QaLora] {
        let (model, _) = trained(method);
        let ckpt = export(&model, true).unwrap();
        assert!(ckpt.is_fully_quantized());
        let gap = max_gap(&ckpt, &model, 100);
        assert!(gap < 1e-6, "{method}: {gap:e}");
    }
}

#[test]
fn l4q_export_is_bit_exact() {
    let (model, _) = trained(Method::L4q);
    assert_eq!(max_gap(&export(&model, true).unwrap(), &model, 20), 0.0);
}

#[test]
fn qat_lora_exports_mixed_only() {
    let (model, _) = trained(Method::QatLora);
    match export(&model, true) {
        Err(e @ L4qError::MixedPrecisionExport { .. }) => assert!(e.to_string().contains("mixed-precision method")),
        other => panic!("expected refusal, got {other:?}"),
    }
    let ckpt = export(&model, false).unwrap();
    assert!(!ckpt.is_fully_quantized());
    assert!(ckpt.layers.iter().all(CheckpointLayer::is_mixed));
    assert!(max_gap(&ckpt, &model, 100) < 1e-6);
}

#[test]
fn lora_is_not_exportable() {
    let (model, _) = trained(Method::Lora);
    assert!(matches!(export(&model, false), Err(L4qError::Unexportable { .. })));
}

#[test]
fn checkpoint_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    for method in [Method::L4q, Method::QatLora] {
        let (model, _) = trained(method);
        let ckpt = export(&model, false).unwrap();
        let path = dir.path().join(format!("{method}.l4q"));
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes().unwrap());
    }
}

#[test]
fn qalora_merge_preserves_forward() {
    let mut rng = Rng::new(12);
    for bits in [3u8, 4] {
        let spec = QuantSpec::new(bits, 8).unwrap();
        let w0: Matrix<f64> = randn(&mut rng, 12, 32, 0.3);
        let params = init_matrix(&w0, InitScheme::Asymm, &spec).unwrap().params;
        let adapter = LoraAdapter::new(randn(&mut rng, 2, 4, 0.3), randn(&mut rng, 12, 2, 0.3), 1.5).unwrap();
        let layer = QaLoraLayer::new(&w0, params, spec, adapter).unwrap();
        let merged = dequantize(layer.codes(), &layer.merged_params().unwrap()).unwrap();
        for _ in 0..10 {
            let x: Matrix<f64> = randn(&mut rng, 32, 5, 1.0);
            let gap = layer.infer(&x).unwrap().max_abs_diff(&merged.matmul(&x).unwrap()).unwrap();
            assert!(gap < 1e-10, "{gap:e}");
        }
    }
}
