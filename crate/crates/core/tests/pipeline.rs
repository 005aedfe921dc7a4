//! End-to-end behaviour of training, evaluation and the sweep on small
//! synthetic data, plus optimizer and sampler oracles.

use proptest::prelude::*;

use smallvae::data::{sample_labeled_subset, synth_dataset, BatchPlan, SynthKind};
use smallvae::nn::{ArchParams, Classifier, LatentConfig, ParamGroup, ParamId, ParamStore, VaeModel};
use smallvae::optim::{adam_step, AdamConfig, AdamState, GradBuffer, PlateauConfig, PlateauScheduler};
use smallvae::pipeline::{
    accuracy, evaluate_classifier, finetune, format_g9, load_datasets, pretrain, reconstruct, sweep, test_rmse,
    DataSource, ExperimentConfig, SyntheticConfig,
};
use smallvae::rng::{stream_seed, SeededRng};
use smallvae::tensor::{Graph, Tensor};
use smallvae::vae::{elbo_loss, kl_standard_normal, reparameterize, Noise, ReconLikelihood};

fn toy(kind: SynthKind, epochs: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 4,
        latent: LatentConfig::new(4, 2),
        arch: ArchParams {
            image_size: 8,
            stem_channels: 8,
            growth_rate: 4,
            block_layers: 2,
            transition_channels: 8,
            ..ArchParams::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.pretrain.epochs = epochs;
    cfg.data.source = DataSource::Synthetic;
    cfg.data.synthetic = SyntheticConfig {
        kind,
        train: 40,
        test: 40,
        size: 8,
    };
    cfg
}

#[test]
fn rmse_matches_reconstruction_and_recon_term() {
    let cfg = toy(SynthKind::GradientPatterns, 1);
    let (_, test) = load_datasets(&cfg).unwrap();
    let model = VaeModel::<f64>::new(cfg.latent, cfg.arch, 1).unwrap();
    let rmse = test_rmse(&model, &test).unwrap();

    let recon = reconstruct(&model, &test).unwrap();
    let x = test.images().data();
    let sse: f64 = recon.data().iter().zip(x).map(|(r, &v)| (r - v as f64).powi(2)).sum();
    assert!((rmse - (sse / x.len() as f64).sqrt()).abs() < 1e-12);

    // With zero noise the Gaussian term is ½·SSE per image, so RMSE = sqrt(2·recon / pixels).
    let one = test.subset(&[0]);
    let mut g = Graph::inference();
    let p = model.bind(&mut g).unwrap();
    let xv = g.constant(one.batch_tensor::<f64>(&[0])).unwrap();
    let eps = Tensor::zeros(&[1, 4, 2, 2]);
    let elbo = elbo_loss(&mut g, &model, &p, xv, Noise::Fixed(eps), ReconLikelihood::Gaussian).unwrap();
    let r = elbo.terms(&g).recon;
    let single = test_rmse(&model, &one).unwrap();
    assert!((single - (2.0 * r / one.pixels_per_image() as f64).sqrt()).abs() < 1e-12);
}

#[test]
fn pretraining_lowers_test_elbo() {
    let cfg = {
        let mut c = toy(SynthKind::GradientPatterns, 4);
        c.pretrain.lr = 1e-3;
        c
    };
    let (train, test) = load_datasets(&cfg).unwrap();
    let (_, log) = pretrain::<f32>(&cfg, &train, &test).unwrap();
    let rows = log.rows();
    assert_eq!(rows.len(), 4);
    assert!(rows[3].test_total < rows[0].test_total, "{rows:?}");
    assert!(rows.iter().all(|r| r.lr == 1e-3));
}

#[test]
fn constant_images_train_but_cannot_be_finetuned() {
    let mut cfg = toy(SynthKind::Constant, 8);
    cfg.pretrain.lr = 1e-3;
    let (train, test) = load_datasets(&cfg).unwrap();
    assert!(train.labels().is_none());
    let (model, log) = pretrain::<f32>(&cfg, &train, &test).unwrap();
    let rows = log.rows();
    assert!(rows[1..].windows(2).all(|w| w[1].test_total < w[0].test_total), "{rows:?}");
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    assert!(last.train_kl < 0.1 * first.train_kl && last.test_rmse < 0.01, "{last:?}");
    assert!(sample_labeled_subset(&train, 1, 0).is_err());
    // Every reconstruction of identical inputs is identical.
    let recon = reconstruct(&model, &test).unwrap();
    let first = &recon.data()[..test.pixels_per_image()];
    assert!(recon.data().chunks(test.pixels_per_image()).all(|c| c == first));
}

#[test]
fn two_gaussians_head_separates_classes() {
    let mut cfg = toy(SynthKind::TwoGaussians, 3);
    cfg.pretrain.lr = 1e-3;
    cfg.finetune.epochs = 20;
    cfg.finetune.lr = 1e-2;
    cfg.finetune.labels_per_class = 100;
    cfg.data.synthetic.train = 400;
    cfg.data.synthetic.test = 100;
    let (train, test) = load_datasets(&cfg).unwrap();
    let (mut model, _) = pretrain::<f32>(&cfg, &train, &test).unwrap();
    let untrained = Classifier::<f32>::new(&cfg.latent, cfg.seed).unwrap();
    let before_acc = evaluate_classifier(&model, &untrained, &test).unwrap();
    let enc = model.params.checksum(ParamGroup::Encoder);
    let dec = model.params.checksum(ParamGroup::Decoder);

    let subset = sample_labeled_subset(&train, 100, stream_seed(cfg.seed, "labeled-subset")).unwrap();
    let out = finetune(&cfg, &mut model, &train, &subset, &test).unwrap();
    let acc = out.log.last().unwrap().test_accuracy;
    assert!(acc >= 0.95, "{:?}", out.log.rows());
    assert!(acc >= before_acc);
    assert_eq!(enc, model.params.checksum(ParamGroup::Encoder));
    assert_eq!(dec, model.params.checksum(ParamGroup::Decoder));
    assert_eq!(evaluate_classifier(&model, &out.classifier, &test).unwrap(), acc);
}

#[test]
fn accuracy_breaks_ties_towards_lowest_index() {
    let logits = Tensor::<f64>::from_f64(&[3, 3], &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 5.0, 5.0, 5.0]).unwrap();
    assert_eq!(accuracy(&logits, &[0, 1, 0]), 1.0);
    assert_eq!(accuracy(&logits, &[1, 2, 2]), 0.0);
}

#[test]
fn sweep_reports_every_arm_and_budget() {
    let mut cfg = toy(SynthKind::GradientPatterns, 1);
    cfg.finetune.epochs = 2;
    let (train, test) = load_datasets(&cfg).unwrap();
    let report = sweep::<f32>(&cfg, &[1, 2], &[1, 2], &train, &test, &|_, _| Ok(())).unwrap();
    let keys: Vec<(usize, usize, usize)> =
        report.rows.iter().map(|r| (r.spatial, r.flat_size, r.labels_per_class)).collect();
    assert_eq!(keys, vec![(1, 4, 1), (1, 4, 2), (2, 16, 1), (2, 16, 2)]);
    assert!(report.rows.iter().all(|r| r.error.is_none() && r.test_accuracy.is_finite()));
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("spatial,flat_size,labels_per_class,test_elbo,test_rmse,test_accuracy,status\n"));

    // One arm failing mid-training leaves the others intact.
    let fail = |s: usize, _: &_| match s {
        3 => Err(smallvae::pipeline::PipelineError::Config("injected".into())),
        _ => Ok(()),
    };
    let report = sweep::<f32>(&cfg, &[2, 3], &[1], &train, &test, &fail).unwrap();
    assert!(report.rows[0].error.is_none());
    assert!(report.rows[1].error.is_some(), "{:?}", report.rows[1]);
}

#[test]
fn default_sweep_flat_sizes() {
    let flat: Vec<usize> = [8, 10, 12].iter().map(|&s| LatentConfig::new(100, s).flat_size()).collect();
    assert_eq!(flat, vec![6400, 10000, 14400]);
    let cfg = ExperimentConfig::default();
    assert_eq!(cfg.latent, LatentConfig::new(100, 8));
}

#[test]
fn adam_matches_textbook_update() {
    let init = [0.5, -1.5, 2.0];
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::from_f64(&[3], &init).unwrap(), ParamGroup::Encoder, true);
    let cfg = AdamConfig {
        lr: 0.01,
        weight_decay: 0.1,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&store, &cfg);
    let grads = [[0.3, -0.2, 0.0], [0.1, 0.4, -1.0], [-0.5, 0.0, 0.25]];

    let (mut th, mut m, mut v) = (init.to_vec(), [0.0; 3], [0.0; 3]);
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        for i in 0..3 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            th[i] = th[i] - 0.01 * mh / (vh.sqrt() + 1e-8) - 0.01 * 0.1 * th[i];
        }
        let mut buf = GradBuffer::new(&store);
        buf.set(ParamId(0), g);
        adam_step(&mut state, &mut store, &buf, |_| true).unwrap();
    }
    for (a, b) in store.get(ParamId(0)).value.data().iter().zip(&th) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn reparameterized_samples_have_target_moments() {
    let mu = Tensor::<f64>::from_f64(&[1, 2], &[0.7, -1.2]).unwrap();
    let lv = Tensor::<f64>::from_f64(&[1, 2], &[0.4, -1.0]).unwrap();
    let mut rng = SeededRng::from_seed(6);
    let n = 100_000;
    let (mut s, mut s2) = ([0.0; 2], [0.0; 2]);
    for _ in 0..n {
        let mut g = Graph::inference();
        let m = g.constant(mu.clone()).unwrap();
        let l = g.constant(lv.clone()).unwrap();
        let z = reparameterize(&mut g, m, l, &mut rng).unwrap().z;
        for (i, &v) in g.value(z).data().iter().enumerate() {
            s[i] += v;
            s2[i] += v * v;
        }
    }
    for i in 0..2 {
        let mean = s[i] / n as f64;
        let var = s2[i] / n as f64 - mean * mean;
        let want_var = lv.data()[i].exp();
        assert!((mean - mu.data()[i]).abs() < 4.0 * (want_var / n as f64).sqrt() + 1e-3, "mean {mean}");
        assert!((var / want_var - 1.0).abs() < 0.02, "var {var} vs {want_var}");
    }
}

fn kl_of(mu: &[f64], lv: &[f64]) -> f64 {
    let mut g = Graph::<f64>::inference();
    let m = g.constant(Tensor::from_f64(&[1, mu.len()], mu).unwrap()).unwrap();
    let l = g.constant(Tensor::from_f64(&[1, lv.len()], lv).unwrap()).unwrap();
    let k = kl_standard_normal(&mut g, m, l).unwrap();
    g.value(k).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_non_negative(v in prop::collection::vec((-3.0f64..3.0, -4.0f64..4.0), 1..8)) {
        let (mu, lv): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        prop_assert!(kl_of(&mu, &lv) >= -1e-12);
    }

    #[test]
    fn kl_sums_over_dimensions(a in (-2.0f64..2.0, -2.0f64..2.0), b in (-2.0f64..2.0, -2.0f64..2.0)) {
        let joint = kl_of(&[a.0, b.0], &[a.1, b.1]);
        let split = kl_of(&[a.0], &[a.1]) + kl_of(&[b.0], &[b.1]);
        prop_assert!((joint - split).abs() < 1e-12);
    }

    #[test]
    fn g9_round_trips_to_nine_digits(v in prop::num::f64::NORMAL) {
        let s = format_g9(v);
        let back: f64 = s.parse().unwrap();
        prop_assert!(((back - v) / v).abs() <= 5e-9, "{v} -> {s}");
    }

    #[test]
    fn plateau_lr_never_increases(metrics in prop::collection::vec(0.01f64..10.0, 1..40)) {
        let cfg = PlateauConfig { patience: 2, ..PlateauConfig::default() };
        let mut s = PlateauScheduler::new(cfg, 1e-3);
        let mut prev = s.lr;
        for m in metrics {
            let lr = s.step(m).unwrap();
            prop_assert!(lr <= prev && lr >= cfg.min_lr);
            prev = lr;
        }
    }

    #[test]
    fn batch_plan_covers_each_index_once(n in 1usize..200, bs in 1usize..40, seed in any::<u64>(), epoch in 0u64..5) {
        let plan = BatchPlan::new(bs, seed);
        let batches = plan.index_batches(n, epoch);
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(plan.index_batches(n, epoch), batches);
    }

    #[test]
    fn labeled_subset_is_balanced(per_class in 1usize..4, seed in any::<u64>()) {
        let ds = synth_dataset(SynthKind::TwoGaussians, 30, 4, 2);
        let sub = sample_labeled_subset(&ds, per_class, seed).unwrap();
        let labels = ds.labels().unwrap();
        for class in 0..2u8 {
            let count = sub.indices.iter().filter(|&&i| labels[i] == class).count();
            prop_assert_eq!(count, per_class);
        }
        prop_assert_eq!(sample_labeled_subset(&ds, per_class, seed).unwrap().indices, sub.indices);
    }
}
