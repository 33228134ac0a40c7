use criterion::{criterion_group, criterion_main, Criterion};
use sampo_bench::fixture;
use sampo_core::eval::{evaluate, EvalProtocol};
use sampo_core::losses::LossConfig;
use sampo_core::mining::mine_instance;
use sampo_core::model::{encode, forward, Prepared, TrainMode};
use sampo_core::training::mined_instance_gradient;

fn benches(c: &mut Criterion) {
    let f = fixture(8);
    let scene = &f.scenes[0];
    let prompts = f.mined.sets[0].clone();

    c.bench_function("forward_64x64", |b| {
        b.iter(|| forward(&f.actor, &scene.image, &prompts).unwrap())
    });

    let enc = encode(&f.actor, &scene.image).unwrap();
    let prepared = Prepared::new(&f.actor);
    c.bench_function("decode_cached_encoder", |b| b.iter(|| prepared.decode(&enc, &prompts).unwrap()));

    let inst = scene.instance(prompts.target_instance_id).unwrap();
    c.bench_function("mine_instance_n4_m3", |b| {
        b.iter(|| mine_instance(&prepared, &enc, scene, inst, &f.target, &f.mining, 7).unwrap())
    });

    let loss = LossConfig::default();
    c.bench_function("loss_and_adapter_gradient", |b| {
        b.iter(|| {
            mined_instance_gradient(&f.actor, &f.reference, &scene.image, &f.mined, &f.target, &loss, TrainMode::AdaptersOnly)
                .unwrap()
        })
    });

    let refs: Vec<_> = f.scenes.iter().collect();
    let protocol = EvalProtocol::default();
    c.bench_function("evaluate_8_scenes", |b| b.iter(|| evaluate(&f.actor, &refs, &protocol).unwrap()));
}

criterion_group!(pipeline, benches);
criterion_main!(pipeline);
