use segmote_core::encoder::{init_frozen, EncoderConfig};
use segmote_core::harness::data::Prepared;
use segmote_core::harness::train;
use segmote_core::synth::{Corpus, CorpusSpec};
use segmote_core::{DType, Tensor, TrainConfig};

fn cfg() -> EncoderConfig {
    EncoderConfig { channels: 1, image_size: 16, stride: 4, dim: 16, heads: 2 }
}

#[test]
fn every_encoder_tensor_is_frozen() {
    let enc = init_frozen::<f32>(cfg(), 3).unwrap();
    assert!(!enc.store.is_empty());
    assert!(enc.store.entries().iter().all(|e| !e.trainable));
}

#[test]
fn encoder_is_a_pure_function_of_its_seed() {
    let a = init_frozen::<f32>(cfg(), 3).unwrap();
    let b = init_frozen::<f32>(cfg(), 3).unwrap();
    let c = init_frozen::<f32>(cfg(), 4).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
    let img = Tensor::<f32>::full([1, 16, 16], 0.25);
    let ea = a.encode(&img).unwrap();
    assert_eq!(ea, b.encode(&img).unwrap());
    assert_eq!(ea.tokens.shape(), &[16, 16]);
    assert_eq!((ea.h, ea.w), (4, 4));
    assert!(ea.tokens.is_finite());
    // batch and single-image paths agree
    let img2 = Tensor::<f32>::full([1, 16, 16], 0.75);
    let both = a.encode_batch(&[&img, &img2]).unwrap();
    assert_eq!(both[0], ea);
    assert_eq!(both[1], a.encode(&img2).unwrap());
}

#[test]
fn bad_inputs_are_rejected() {
    let a = init_frozen::<f32>(cfg(), 0).unwrap();
    assert!(a.encode(&Tensor::<f32>::zeros([1, 12, 12])).is_err());
    assert!(a.encode(&Tensor::<f32>::zeros([2, 16, 16])).is_err());
}

#[test]
fn training_leaves_the_encoder_untouched() {
    let config = TrainConfig {
        dtype: DType::F32,
        dim: 16,
        heads: 2,
        cross_dim: 8,
        stride: 4,
        epochs: 2,
        lr_halve_epochs: vec![1],
        batch: 4,
        corpus: CorpusSpec { modalities: 2, samples_per_modality: 5, split_ratio: 0.8, image_size: 16, ..CorpusSpec::default() },
        ..TrainConfig::default()
    };
    let corpus = Corpus::generate(config.corpus.clone()).unwrap();
    let (model, report) = train::<f32>(config, &corpus, |_| {}).unwrap();
    assert_eq!(report.encoder_checksum_before, report.encoder_checksum_after);
    let fresh = init_frozen::<f32>(model.encoder.config, model.config.encoder_seed).unwrap();
    assert_eq!(fresh.checksum(), model.encoder.checksum());
    // cached embeddings equal a fresh encode
    let prep = Prepared::new(&model, &corpus).unwrap();
    assert_eq!(prep.embeddings[3], fresh.encode(&corpus.samples[3].image).unwrap());
}
