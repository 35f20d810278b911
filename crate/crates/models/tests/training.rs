use maskfree_core::seg_losses::LossWeights;
use maskfree_models::reason_seg::{
    continue_training, encode_samples, ReasonSegConfig, ReasonSegModel, SegTrainConfig, TrainingData,
};
use maskfree_models::synth::{generate_synthetic_corpus, holdout_hole, inpainting_images, CorpusConfig};
use maskfree_models::vae::{masked_mse, train_inpainter, InpaintConfig, InpaintModel, TrainConfig};
use maskfree_models::vocab::Vocabulary;
use ndarray::Array2;

fn small_inpainter(hypergraph: bool) -> InpaintConfig {
    InpaintConfig {
        image_size: 16,
        widths: [4, 6, 8],
        latent_dim: 12,
        hypergraph,
        ..InpaintConfig::default()
    }
}

fn small_segmenter() -> ReasonSegConfig {
    ReasonSegConfig {
        image_size: 16,
        d_model: 16,
        layers: 1,
        attention_heads: 2,
        widths: [4, 6, 8],
        fusion_dim: 4,
        heads: 2,
        ..ReasonSegConfig::default()
    }
}

#[test]
fn inpainter_training_is_deterministic_and_learns() {
    let train = TrainConfig {
        steps: 60,
        batch_size: 4,
        lr: 3e-3,
        seed: 5,
        dataset_size: 32,
    };
    let (model, log) = train_inpainter(small_inpainter(true), &train).unwrap();
    let (_, again) = train_inpainter(small_inpainter(true), &train).unwrap();
    assert_eq!(log, again);
    let head: f64 = log[..10].iter().map(|r| r.recon_loss).sum();
    let tail: f64 = log[log.len() - 10..].iter().map(|r| r.recon_loss).sum();
    assert!(tail < head, "{head} -> {tail}");

    let images = inpainting_images(99, 4, 16);
    let holes: Vec<Array2<bool>> = (0..4).map(|i| holdout_hole(99, i, 16)).collect();
    let out: Vec<_> = images.iter().zip(&holes).map(|(im, h)| model.generate(im.view(), h.view(), 1, 0).unwrap()).collect();
    assert!(out.iter().all(|o| o.iter().all(|v| (0.0..=1.0).contains(v))));
    assert!(masked_mse(&out, &images, &holes).is_finite());
}

#[test]
fn decoder_is_continuous_in_the_latent() {
    let model = InpaintModel::<f64>::new(small_inpainter(false), 2).unwrap();
    let z: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let base = model.decode(&z).unwrap();
    let mut prev = f64::INFINITY;
    for eps in [1e-2, 1e-3, 1e-4] {
        let nudged: Vec<f64> = z.iter().map(|v| v + eps).collect();
        let d = (&model.decode(&nudged).unwrap() - &base).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(d < prev, "{eps}: {d}");
        prev = d;
    }
    assert!(prev < 1e-2);
}

#[test]
fn encoder_hypergraph_covers_the_middle_grid() {
    let model = InpaintModel::<f64>::new(small_inpainter(true), 4).unwrap();
    let image = &inpainting_images(3, 1, 16)[0];
    let hole = holdout_hole(3, 0, 16);
    let hg = model.encoder_hypergraph(image.view(), hole.view(), None).unwrap();
    assert_eq!(hg.num_nodes(), 16);
    for i in 0..hg.num_nodes() {
        assert!(hg.edge(i).contains(&i));
    }
    assert!(hg.edges().iter().any(|e| e.len() > 1));
    let tight = model.encoder_hypergraph(image.view(), hole.view(), Some(1e-9)).unwrap();
    assert!(tight.edges().iter().all(|e| e.len() == 1));
}

#[test]
fn text_only_training_skips_the_mask_loss() {
    let corpus = CorpusConfig {
        image_size: 16,
        ..CorpusConfig::default()
    };
    let vocab = Vocabulary::default();
    let examples = encode_samples(&vocab, &generate_synthetic_corpus(1, 16, &corpus).unwrap()).unwrap();
    let train = SegTrainConfig {
        steps: 5,
        batch_size: 4,
        weights: LossWeights {
            lambda_mask: 0.0,
            ..LossWeights::default()
        },
        ..SegTrainConfig::default()
    };
    let model = ReasonSegModel::<f32>::new(small_segmenter(), vocab.clone(), 0).unwrap();
    let (_, log) = continue_training(model, &train, TrainingData::Fixed(&examples), |_, _| {}).unwrap();
    assert!(log.iter().all(|r| r.mask_loss.is_nan() && r.total == r.text_loss));

    let streamed = ReasonSegModel::<f32>::new(small_segmenter(), vocab, 0).unwrap();
    let data = TrainingData::Stream { seed: 3, corpus: &corpus };
    let (_, log) = continue_training(streamed, &SegTrainConfig { steps: 3, batch_size: 2, ..train }, data, |_, _| {}).unwrap();
    assert_eq!(log.len(), 3);
}
