// temporary probe: supervised ceiling on the target distribution
use darcnn::cli::reproduce::reproduce_config;
use darcnn::core::guard::AccessContext;
use darcnn::core::types::{Domain, ImageSample, Split};
use darcnn::data::{generate_synthetic, SyntheticDomainSpec};
use darcnn::eval::{evaluate_samples, EvalMode};
use darcnn::model::ModelState;
use darcnn::train::{train_stage1, Stage, TrainSchedule};

fn relabel_as_source(samples: Vec<ImageSample>) -> Vec<ImageSample> {
    samples
        .into_iter()
        .map(|s| {
            let anns = s
                .annotations(AccessContext::Evaluator)
                .unwrap()
                .map(|a| a.to_vec());
            ImageSample::new(s.id.clone(), s.pixels.clone(), Domain::Source, s.split, anns)
                .unwrap()
        })
        .collect()
}

#[test]
#[ignore]
fn probe_supervised_ceiling_on_target() {
    let mut cfg = reproduce_config(0);
    cfg.pipeline.alpha_target = 0.0;
    cfg.pipeline.alpha_init = 0.0;
    cfg.pipeline.beta = 0.0;
    cfg.pipeline.gamma = 0.0;
    cfg.model.normalization = darcnn::core::config::Normalization::None;
    cfg.train.max_epochs = 12.0;
    let spec = SyntheticDomainSpec::target_blobs((64, 64));
    let train = relabel_as_source(generate_synthetic(&spec, 208, 0, Split::Train).unwrap());
    let val = generate_synthetic(&spec, 32, 0, Split::Val).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let schedule = TrainSchedule::from_config(&cfg, Stage::Stage1);
    let out = train_stage1(
        ModelState::<f32>::new(&cfg).unwrap(),
        &train,
        &train,
        &schedule,
        &cfg,
        dir.path(),
        None,
    )
    .unwrap();
    let mode = EvalMode {
        branch: Domain::Source,
        ..EvalMode::default()
    };
    let r = evaluate_samples(&out.state, &val, &cfg, mode).unwrap();
    println!(
        "supervised ceiling on target: aji {:.4} objf1 {:.4} pixf1 {:.4}",
        r.aji, r.object_f1, r.pixel_f1
    );
}
