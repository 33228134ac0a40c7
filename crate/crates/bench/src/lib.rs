//! Shared fixtures for the criterion benches.

use sampo_core::mining::{mine_instance, MinedInstance, MiningConfig};
use sampo_core::model::{encode, init_params, ArchConfig, ModelParams, Prepared};
use sampo_core::synthdata::{build_task_target, generate_scenes, Scene, SceneSpec, TaskMode};
use sampo_core::BinaryMask;

pub struct Fixture {
    pub scenes: Vec<Scene>,
    /// Default-size model with rank-8 adapters attached.
    pub actor: ModelParams,
    pub reference: ModelParams,
    pub target: BinaryMask,
    pub mined: MinedInstance,
    pub mining: MiningConfig,
}

pub fn fixture(scenes: usize) -> Fixture {
    let scenes = generate_scenes(&SceneSpec::default(), 42, scenes).expect("scenes");
    let base = init_params(&ArchConfig::default(), 1).expect("params");
    let reference = base.with_adapters(Some(8), 2).expect("adapters");
    let actor = reference.clone();
    let scene = &scenes[0];
    let target = build_task_target(scene, TaskMode::T2, Some(scene.prompted_class))
        .expect("target")
        .composite_mask;
    let inst = scene.instances_of_class(scene.prompted_class).next().expect("exemplar");
    let mining = MiningConfig::default();
    let enc = encode(&actor, &scene.image).expect("encode");
    let mined = mine_instance(&Prepared::new(&actor), &enc, scene, inst, &target, &mining, 7).expect("mining");
    Fixture {
        scenes,
        actor,
        reference,
        target,
        mined,
        mining,
    }
}
