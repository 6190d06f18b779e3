use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use otlid::adapt::{hyper_sweep, initial_model, run_adaptation, AdaptConfig};
use otlid::data::{synth_domain_pair, BatchSampler, Dataset, DomainTag, SamplerPolicy, SynthSpec};
use otlid::model::{evaluate_ce, pretrain_source, AdamState, AdamConfig, BackendModel};
use otlid::project::{mean_same_class_centroid_distance, project_datasets};

fn separable_pair() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 200;
    let x = Array2::from_shape_fn((n, 4), |(i, j)| {
        let z: f32 = StandardNormal.sample(&mut rng);
        let center = if j == 0 { if i < n / 2 { -2.0 } else { 2.0 } } else { 0.0 };
        center + 0.3 * z
    });
    let labels = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    Dataset::new(x, Some(labels), DomainTag::Source, 2).unwrap()
}

#[test]
fn separable_two_class_set_is_learned() {
    let data = separable_pair();
    let mut model = BackendModel::new(4, 4, 2, 0).unwrap();
    let mut adam = AdamState::for_model(&model, AdamConfig::default());
    let mut sampler = BatchSampler::new(32, 0, SamplerPolicy::DropLast).unwrap();
    let report = pretrain_source(&mut model, &data, 50, &mut adam, &mut sampler).unwrap();
    let (_, accuracy) = evaluate_ce(&model, &data).unwrap();
    assert!(accuracy >= 0.99, "accuracy {accuracy}");
    assert_eq!(report.final_accuracy, accuracy);
}

#[test]
fn pretraining_loss_does_not_increase_on_default_data() {
    let (source, _) = synth_domain_pair(&SynthSpec::default()).unwrap();
    let cfg = AdaptConfig::default();
    let mut model = initial_model(&source, &cfg).unwrap();
    let mut adam = AdamState::for_model(&model, cfg.adam());
    let mut sampler = BatchSampler::new(cfg.batch_size, cfg.seed, cfg.sampler_policy).unwrap();
    let report = pretrain_source(&mut model, &source, cfg.pretrain_epochs, &mut adam, &mut sampler).unwrap();
    for w in report.epoch_losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-3, "losses {:?}", report.epoch_losses);
    }
}

#[test]
fn transport_loss_falls_and_latents_overlap() {
    let (source, target) = synth_domain_pair(&SynthSpec::default()).unwrap();
    let run = run_adaptation(&source, &target, &AdaptConfig::default()).unwrap();
    let ot = run.log.epoch_mean_ot();
    assert!(ot[ot.len() - 1] < ot[0], "epoch mean OT {ot:?}");

    let before = project_datasets(&[&source, &target], Some(&run.baseline)).unwrap();
    let after = project_datasets(&[&source, &target], Some(&run.model)).unwrap();
    let d_before = mean_same_class_centroid_distance(&before).unwrap();
    let d_after = mean_same_class_centroid_distance(&after).unwrap();
    assert!(d_after < d_before, "centroid distance {d_before} -> {d_after}");
}

#[test]
fn feature_term_is_what_helps() {
    let (source, target) = synth_domain_pair(&SynthSpec::default()).unwrap();
    let rows = hyper_sweep(&source, &target, &[(0.0, 0.0), (0.1, 0.0)], &AdaptConfig::default()).unwrap();
    assert!(rows[1].eer.unwrap() < rows[0].eer.unwrap(), "{rows:?}");
}

#[test]
fn unlabeled_target_adapts_without_reports() {
    let (source, target) = synth_domain_pair(&SynthSpec {
        per_class_count: 40,
        ..SynthSpec::default()
    })
    .unwrap();
    let cfg = AdaptConfig {
        epochs: 2,
        pretrain_epochs: 2,
        batch_size: 32,
        ..AdaptConfig::default()
    };
    let run = run_adaptation(&source, &target.without_labels(), &cfg).unwrap();
    assert!(run.before.is_none() && run.after.is_none());
    assert!(!run.log.steps.is_empty());
}
