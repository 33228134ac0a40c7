use sampo_core::eval::{evaluate, EvalProtocol};
use sampo_core::model::{init_params, load_checkpoint, ArchConfig};
use sampo_core::synthdata::{generate_scenes, read_dataset, write_dataset, DataRatio, SceneSpec};
use sampo_core::training::{train, Dataset, TrainConfig};

fn small_spec() -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 32,
        instances_per_class: (1, 3),
        radius_range: (3, 5),
        ..SceneSpec::default()
    }
}

#[test]
fn stored_dataset_trains_and_checkpoints_reload_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let data_dir = dir.path().join("data");
    let manifest = write_dataset(&generate_scenes(&spec, 21, 12).unwrap(), &spec, &data_dir).unwrap();
    let (read_back, scenes) = read_dataset(&data_dir).unwrap();
    assert_eq!(read_back.checksum, manifest.checksum);
    let data = Dataset::new(scenes, 21).unwrap();

    let arch = ArchConfig {
        height: 32,
        width: 32,
        widths: [4, 8, 16],
        num_masks: 3,
        adapter_rank: None,
    };
    let base = init_params(&arch, 21).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        data_ratio: DataRatio::P100,
        adapter_rank: 8,
        deterministic: true,
        ..TrainConfig::default()
    };
    let run = dir.path().join("run");
    let out = train(&base, &data, &cfg, Some(&run)).unwrap();
    assert_eq!(out.report.steps.len(), 2 * out.report.steps_per_epoch);

    let (last, echo) = load_checkpoint(&run.join("last.ckpt")).unwrap();
    assert_eq!(last.content_hash(), out.last.content_hash());
    assert_eq!(echo["adapter_rank"], 8);
    let (best, _) = load_checkpoint(&run.join("best.ckpt")).unwrap();
    assert_eq!(best.content_hash(), out.best.content_hash());

    let protocol = EvalProtocol::default();
    let val = data.validation_scenes();
    let a = evaluate(&out.last, &val, &protocol).unwrap();
    let b = evaluate(&last, &val, &protocol).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.mean_dice, *out.report.epoch_val_dice.last().unwrap());
}
