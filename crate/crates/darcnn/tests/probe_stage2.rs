// temporary probe: stage-2 lift from the pretrained baseline, no stage 1
use darcnn::cli::reproduce::reproduce_config;
use darcnn::core::types::Split;
use darcnn::core::dataset::read_split;
use darcnn::data::AugmentationParams;
use darcnn::eval::{evaluate_samples, EvalMode};
use darcnn::model::checkpoint::load_checkpoint;
use darcnn::pseudolabel::{build_stage2_dataset, generate_pseudo_labels};
use darcnn::train::{train_stage2, Stage, TrainSchedule};

#[test]
#[ignore]
fn probe_stage2_lift() {
    let base = std::path::Path::new("/tmp/trend3/seed_0");
    let ck = std::fs::read_to_string(base.join("runs/pretrain/chosen_checkpoint.txt")).unwrap();
    let ck = ck.lines().find_map(|l| l.strip_prefix("path\t")).unwrap();
    let cfg = reproduce_config(0);
    let loaded = load_checkpoint::<f32>(std::path::Path::new(ck), None, true).unwrap();
    let mut state = loaded.state;
    state.model.copy_source_branch_to_target();
    state.step = 0;

    let tgt_train = read_split(&base.join("data/target/train"), Split::Train).unwrap();
    let tgt_val = read_split(&base.join("data/target/val"), Split::Val).unwrap();

    let before = evaluate_samples(&state, &tgt_val, &cfg, EvalMode::default()).unwrap();
    println!("baseline: aji {:.4} objf1 {:.4}", before.aji, before.object_f1);

    let labels = generate_pseudo_labels(&state, &tgt_train, &cfg, 0, "probe").unwrap();
    println!("pseudo instances: {} over {} images", labels.total_instances(), tgt_train.len());

    for (lr, epochs) in [(5e-4, 6.0), (1e-3, 6.0)] {
        let mut c2 = cfg.clone();
        c2.pipeline.learning_rate = lr;
        c2.train.max_epochs = epochs;
        let stage2 = build_stage2_dataset(
            &labels,
            &tgt_train,
            &AugmentationParams::from_config(&c2),
            c2.stage2.aug_mode,
            0,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let schedule = TrainSchedule::from_config(&c2, Stage::Stage2);
        let mut s2 = state.clone();
        s2.config_hash = c2.hash();
        let out = train_stage2(s2, &stage2, &schedule, &c2, dir.path(), None).unwrap();
        let after = evaluate_samples(&out.state, &tgt_val, &c2, EvalMode::default()).unwrap();
        println!(
            "stage2 lr {lr} epochs {epochs}: aji {:.4} objf1 {:.4} pixf1 {:.4}",
            after.aji, after.object_f1, after.pixel_f1
        );
    }
}
