use std::fs;
use std::path::Path;

use egic::checkpoint::Checkpoint;
use egic::codec::CodecConfig;
use egic::data::{generate_dataset, DatasetSpec, LabeledImage};
use egic::digest;
use egic::discriminator::{OasisConfig, PREP_PREFIX};
use egic::model::{tags, Model};
use egic::realism::OrpConfig;
use egic::training::*;
use egic::Error;
use tempfile::TempDir;

fn codec_cfg() -> CodecConfig {
    CodecConfig {
        latent_channels: 4,
        base_width: 8,
        hyper_width: 8,
        hyper_channels: 2,
        ..CodecConfig::default()
    }
}

fn oasis_cfg() -> OasisConfig {
    OasisConfig {
        image_size: 32,
        num_classes: 4,
        latent_channels: 4,
        down_channels: vec![4, 6],
        up_channels: vec![6, 4],
        prep_width: 4,
    }
}

fn data() -> Vec<LabeledImage> {
    generate_dataset(&DatasetSpec {
        num_samples: 8,
        image_size: 32,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn plan(stage: Stage, steps: u64) -> TrainPlan {
    TrainPlan {
        steps,
        batch_size: 2,
        checkpoint_every: 2,
        ..TrainPlan::desk(stage)
    }
}

fn run(dir: &Path) -> RunDir {
    RunDir::open(dir).unwrap()
}

fn stage1(dir: &Path, steps: u64, d: &[LabeledImage]) -> Checkpoint {
    let r = run(dir);
    run_stage1(&r, &plan(Stage::Stage1, steps), &codec_cfg(), d, &[]).unwrap();
    Checkpoint::load(&r.final_checkpoint()).unwrap()
}

fn pretrain(dir: &Path, steps: u64, d: &[LabeledImage]) -> Checkpoint {
    let r = run(dir);
    run_disc_pretrain(&r, &plan(Stage::DiscPretrain, steps), &oasis_cfg(), &d[..6], &d[6..]).unwrap();
    Checkpoint::load(&r.final_checkpoint()).unwrap()
}

fn same_outputs(a: &RunDir, b: &RunDir) {
    assert_eq!(
        fs::read(a.final_checkpoint()).unwrap(),
        fs::read(b.final_checkpoint()).unwrap()
    );
    assert_eq!(
        fs::read(a.metrics_path()).unwrap(),
        fs::read(b.metrics_path()).unwrap()
    );
}

#[test]
fn zero_rate_stage1_keeps_the_initial_weights() {
    let d = data();
    let tmp = TempDir::new().unwrap();
    let init = Model::from_checkpoint(&stage1(&tmp.path().join("a"), 0, &d)).unwrap();
    let r = run(&tmp.path().join("b"));
    let mut p = plan(Stage::Stage1, 3);
    p.lr = LrSchedule::constant(0.0);
    run_stage1(&r, &p, &codec_cfg(), &d, &[]).unwrap();
    let after = Model::load(&r.final_checkpoint()).unwrap();
    assert_eq!(after.encoder, init.encoder);
    assert_eq!(after.entropy, init.entropy);
    assert_eq!(after.generator, init.generator);
    assert_eq!(r.read_metrics().unwrap().len(), 3);
}

#[test]
fn stage1_resume_matches_an_uninterrupted_run() {
    let d = data();
    let tmp = TempDir::new().unwrap();
    let whole = run(&tmp.path().join("whole"));
    run_stage1(&whole, &plan(Stage::Stage1, 5), &codec_cfg(), &d, &[]).unwrap();
    let parts = run(&tmp.path().join("parts"));
    run_stage1(&parts, &plan(Stage::Stage1, 3), &codec_cfg(), &d, &[]).unwrap();
    run_stage1(&parts, &plan(Stage::Stage1, 5), &codec_cfg(), &d, &[]).unwrap();
    same_outputs(&whole, &parts);
    let steps: Vec<u64> = parts.read_metrics().unwrap().iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 1, 2, 3, 4]);
}

#[test]
fn stage1_reports_real_compression_on_the_eval_set() {
    let d = data();
    let tmp = TempDir::new().unwrap();
    let r = run(tmp.path());
    let report = run_stage1(&r, &plan(Stage::Stage1, 2), &codec_cfg(), &d[..6], &d[6..]).unwrap();
    for key in ["init_bpp", "init_psnr", "bpp", "psnr"] {
        assert!(report.eval[key].is_finite(), "{key}");
    }
    for key in ["loss", "bpp", "mse", "psnr"] {
        assert!(report.final_metrics.contains_key(key), "{key}");
    }
    assert_eq!(r.read_report().unwrap(), report);
}

#[test]
fn a_run_directory_refuses_another_plan() {
    let d = data();
    let tmp = TempDir::new().unwrap();
    let r = run(tmp.path());
    run_stage1(&r, &plan(Stage::Stage1, 4), &codec_cfg(), &d, &[]).unwrap();
    let mut other = plan(Stage::Stage1, 4);
    other.seed = 9;
    assert!(matches!(run_stage1(&r, &other, &codec_cfg(), &d, &[]), Err(Error::Config(_))));
    // Fewer steps than the run already reached.
    assert!(matches!(
        run_stage1(&r, &plan(Stage::Stage1, 2), &codec_cfg(), &d, &[]),
        Err(Error::Config(_))
    ));
}

#[test]
fn stage2_at_zero_steps_starts_from_the_stage1_generator() {
    let d = data();
    let tmp = TempDir::new().unwrap();
    let s1 = stage1(&tmp.path().join("s1"), 2, &d);
    let disc = pretrain(&tmp.path().join("dp"), 1, &d);
    let r = run(&tmp.path().join("s2"));
    run_stage2(&r, &plan(Stage::Stage2, 0), &s1, Some(&disc), &d).unwrap();
    let ck = Checkpoint::load(&r.final_checkpoint()).unwrap();
    let g1 = s1.params(tags::GENERATOR).unwrap();
    assert_eq!(ck.params(tags::GENERATOR).unwrap(), g1);
    assert_eq!(ck.params(tags::GENERATOR_MSE).unwrap(), g1);
}

#[test]
fn stage2_freezes_encoder_and_entropy_and_resumes_exactly() {
    let d = data();
    let tmp = TempDir::new().unwrap();
    let s1 = stage1(&tmp.path().join("s1"), 2, &d);
    let disc = pretrain(&tmp.path().join("dp"), 2, &d);
    let whole = run(&tmp.path().join("whole"));
    let report = run_stage2(&whole, &plan(Stage::Stage2, 4), &s1, Some(&disc), &d).unwrap();
    for (name, (before, after)) in &report.frozen_digests {
        assert_eq!(before, after, "{name} moved");
    }
    assert!(report.frozen_digests.contains_key("encoder"));
    assert!(report.frozen_digests.contains_key("entropy"));
    for key in ["distortion", "adv_g", "loss", "psnr", "d_acc", "labelmix", "loss_d"] {
        assert!(report.final_metrics.contains_key(key), "{key}");
    }
    let ck = Checkpoint::load(&whole.final_checkpoint()).unwrap();
    assert_eq!(ck.params(tags::ENCODER).unwrap(), s1.params(tags::ENCODER).unwrap());
    assert_eq!(ck.params(tags::ENTROPY).unwrap(), s1.params(tags::ENTROPY).unwrap());
    assert_ne!(ck.params(tags::GENERATOR).unwrap(), s1.params(tags::GENERATOR).unwrap());

    let parts = run(&tmp.path().join("parts"));
    run_stage2(&parts, &plan(Stage::Stage2, 2), &s1, Some(&disc), &d).unwrap();
    run_stage2(&parts, &plan(Stage::Stage2, 4), &s1, Some(&disc), &d).unwrap();
    same_outputs(&whole, &parts);
}

#[test]
fn strategy_two_and_patchgan_run() {
    let d = data();
    let tmp = TempDir::new().unwrap();
    let s1 = stage1(&tmp.path().join("s1"), 1, &d);
    let r = run(&tmp.path().join("s2"));
    let mut p = plan(Stage::Stage2, 2);
    p.strategy = Strategy::II;
    p.discriminator = DiscriminatorKind::PatchGan;
    let report = run_stage2(&r, &p, &s1, None, &d).unwrap();
    // No distortion term: the logged distortion does not enter the loss.
    assert!((report.final_metrics["loss"] - report.final_metrics["adv_g"]).abs() < 1e-12);
    let ck = Checkpoint::load(&r.final_checkpoint()).unwrap();
    assert!(matches!(Discriminator::from_checkpoint(&ck).unwrap().0, Discriminator::PatchGan(..)));
}

#[test]
fn stages_check_their_prerequisites() {
    let d = data();
    let tmp = TempDir::new().unwrap();
    let s1 = stage1(&tmp.path().join("s1"), 1, &d);
    let disc = pretrain(&tmp.path().join("dp"), 1, &d);
    let r = run(&tmp.path().join("x"));
    assert!(matches!(
        run_stage2(&r, &plan(Stage::Stage2, 1), &disc, None, &d),
        Err(Error::MissingPrerequisite(_))
    ));
    assert!(matches!(
        run_stage2(&r, &plan(Stage::Stage2, 1), &s1, Some(&s1), &d),
        Err(Error::MissingPrerequisite(_))
    ));
    assert!(matches!(
        run_orp(&r, &plan(Stage::Orp, 1), OrpConfig::default(), &s1, &d, &[]),
        Err(Error::MissingPrerequisite(_))
    ));
    assert!(matches!(
        run_stage1(&r, &plan(Stage::Stage2, 1), &codec_cfg(), &d, &[]),
        Err(Error::Config(_))
    ));
}

#[test]
fn orp_stage_freezes_the_generator_and_reports_both_ends() {
    let d = data();
    let tmp = TempDir::new().unwrap();
    let s1 = stage1(&tmp.path().join("s1"), 1, &d);
    let disc = pretrain(&tmp.path().join("dp"), 1, &d);
    let s2r = run(&tmp.path().join("s2"));
    run_stage2(&s2r, &plan(Stage::Stage2, 1), &s1, Some(&disc), &d).unwrap();
    let s2 = Checkpoint::load(&s2r.final_checkpoint()).unwrap();
    let r = run(&tmp.path().join("orp"));
    let report = run_orp(&r, &plan(Stage::Orp, 3), OrpConfig::default(), &s2, &d[..6], &d[6..]).unwrap();
    let (before, after) = &report.frozen_digests["generator"];
    assert_eq!(before, after);
    assert!(report.eval.contains_key("psnr_alpha0") && report.eval.contains_key("psnr_alpha1"));
    let model = Model::load(&r.final_checkpoint()).unwrap();
    assert!(model.orp.is_some());
    assert_eq!(digest::params(&model.generator), digest::params(s2.params(tags::GENERATOR).unwrap()));
    assert_eq!(checkpoint_stage(&Checkpoint::load(&r.final_checkpoint()).unwrap()).unwrap(), Stage::Orp);
}

#[test]
fn disc_pretrain_reports_miou_and_keeps_the_prep() {
    let d = data();
    let tmp = TempDir::new().unwrap();
    let init = pretrain(&tmp.path().join("a"), 0, &d);
    let r = run(&tmp.path().join("b"));
    let report = run_disc_pretrain(&r, &plan(Stage::DiscPretrain, 3), &oasis_cfg(), &d[..6], &d[6..]).unwrap();
    assert!((0.0..=1.0).contains(&report.eval["miou"]));
    let after = Checkpoint::load(&r.final_checkpoint()).unwrap();
    let (p0, p1) = (init.params(DISC).unwrap(), after.params(DISC).unwrap());
    for (name, v) in p0.iter() {
        if name.starts_with(PREP_PREFIX) {
            assert_eq!(p1.get(name).unwrap(), v);
        }
    }
    assert_ne!(p0, p1);
    let (disc, _) = load_feature_discriminator(&after).unwrap();
    assert_eq!(disc.config(), &oasis_cfg());
}

#[test]
fn plans_round_trip_and_validate() {
    let p = TrainPlan::reference(Stage::Stage1);
    assert_eq!(p.lr.at(0), 1e-4);
    assert_eq!(p.lr.at(p.steps), 1e-5);
    let json = serde_json::to_string(&p).unwrap();
    assert_eq!(serde_json::from_str::<TrainPlan>(&json).unwrap(), p);
    assert!(serde_json::from_str::<TrainPlan>(&json.replace("\"seed\"", "\"sede\"")).is_err());
    let mut bad = p;
    bad.batch_size = 0;
    assert!(bad.validate().is_err());
}

#[test]
fn a_locked_run_directory_is_refused() {
    let d = data();
    let tmp = TempDir::new().unwrap();
    let r = run(tmp.path());
    let held = r.lock().unwrap();
    assert!(matches!(
        run_stage1(&r, &plan(Stage::Stage1, 1), &codec_cfg(), &d, &[]),
        Err(Error::Config(_))
    ));
    drop(held);
    run_stage1(&r, &plan(Stage::Stage1, 1), &codec_cfg(), &d, &[]).unwrap();
}
