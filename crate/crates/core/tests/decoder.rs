use segmote_core::decoder::{expert_attention_maps, mask_logits, predict_mask, PromptInput, TokenLayout, TokenSequence};
use segmote_core::harness::data::{eval_batch, Prepared};
use segmote_core::harness::{BatchInput, SegMote};
use segmote_core::nn::{Ctx, Init};
use segmote_core::synth::{Corpus, CorpusSpec, PromptKind};
use segmote_core::{DType, Tape, Tensor, TrainConfig};

fn small_config() -> TrainConfig {
    TrainConfig {
        dtype: DType::F64,
        dim: 32,
        heads: 4,
        cross_dim: 16,
        stride: 4,
        corpus: CorpusSpec { modalities: 2, samples_per_modality: 4, split_ratio: 0.5, image_size: 16, ..CorpusSpec::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn only_the_winner_expert_token_reaches_the_mask() {
    let model = SegMote::<f64>::new(small_config()).unwrap();
    let d = 32;
    let layout = TokenLayout::new(4, 1, 0, 4);
    let mut init = Init::new(11);
    let tokens: Tensor<f64> = init.gaussian_std(&[3, layout.len(), d], 1.0);
    let image: Tensor<f64> = init.gaussian_std(&[3, 16, d], 1.0);
    let winner = [0usize, 2, 3];

    let run = |tokens: Tensor<f64>| {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.store, false);
        let t = ctx.tape.constant(tokens);
        let im = ctx.tape.constant(image.clone());
        let pe = model.decoder.image_pe(ctx.tape, 3).unwrap();
        let seq = TokenSequence { tokens: t, layout: layout.clone() };
        let p = predict_mask(&mut ctx, &seq, im, pe, &winner, &model.decoder).unwrap();
        tape.value(p.logits).clone()
    };
    let full = run(tokens.clone());

    let mut zeroed = tokens.clone();
    let l = layout.len();
    for (b, &w) in winner.iter().enumerate() {
        for tok in layout.expert.clone() {
            if tok - layout.expert.start != w {
                zeroed.data_mut()[(b * l + tok) * d..(b * l + tok + 1) * d].fill(0.0);
            }
        }
    }
    assert_eq!(run(zeroed).data(), full.data());

    // the winner itself does matter
    let mut moved = tokens;
    let row = layout.expert.start + winner[1];
    moved.data_mut()[(l + row) * d] += 1.0;
    assert_ne!(run(moved).data(), full.data());
}

#[test]
fn mask_logits_are_bilinear() {
    let mut init = Init::new(3);
    let w: Tensor<f64> = init.gaussian_std(&[2, 8], 1.0);
    let img: Tensor<f64> = init.gaussian_std(&[2, 9, 8], 1.0);
    let mut tape = Tape::<f64>::new();
    let wv = tape.constant(w.clone());
    let iv = tape.constant(img.clone());
    let base = mask_logits(&mut tape, wv, iv, 3, 12).unwrap();
    let base = tape.value(base).clone();
    let i2 = tape.constant(Tensor::new(img.shape().to_vec(), img.data().iter().map(|x| 2.0 * x).collect()).unwrap());
    let doubled = mask_logits(&mut tape, wv, i2, 3, 12).unwrap();
    let w3 = tape.constant(Tensor::new(w.shape().to_vec(), w.data().iter().map(|x| -3.0 * x).collect()).unwrap());
    let tripled = mask_logits(&mut tape, w3, iv, 3, 12).unwrap();
    for ((a, b), c) in base.data().iter().zip(tape.value(doubled).data()).zip(tape.value(tripled).data()) {
        assert!((2.0 * a - b).abs() < 1e-12 * (1.0 + a.abs()));
        assert!((-3.0 * a - c).abs() < 1e-12 * (1.0 + a.abs()));
    }
    let w0 = tape.constant(Tensor::zeros([2, 8]));
    let z = mask_logits(&mut tape, w0, iv, 3, 12).unwrap();
    assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
}

fn small_model() -> (SegMote<f64>, Corpus) {
    let cfg = small_config();
    let corpus = Corpus::generate(cfg.corpus.clone()).unwrap();
    (SegMote::<f64>::new(cfg).unwrap(), corpus)
}

#[test]
fn attention_maps_are_distributions_and_flat_at_init() {
    let (model, corpus) = small_model();
    let prep = Prepared::new(&model, &corpus).unwrap();
    let idx: Vec<usize> = (0..corpus.samples.len()).collect();
    let input = eval_batch(&model, &corpus, &prep, &idx, PromptKind::Box).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &model.store, false);
    let out = model.forward(&mut ctx, &input, None).unwrap();
    let att = tape.value(out.attention).clone();
    for row in att.data().chunks(att.last_dim()) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    for s in 0..idx.len() {
        for map in expert_attention_maps(&att, model.config.heads, &out.layout, s) {
            assert_eq!(map.len(), 16);
            assert!((map.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let (lo, hi) = map.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
            assert!(lo > 0.0 && hi / lo < 10.0, "ratio {}", hi / lo);
        }
    }
}

#[test]
fn batch_order_does_not_leak_between_samples() {
    let (model, corpus) = small_model();
    let prep = Prepared::new(&model, &corpus).unwrap();
    let idx: Vec<usize> = (0..corpus.samples.len()).collect();
    let input = eval_batch(&model, &corpus, &prep, &idx, PromptKind::Point).unwrap();
    let rev = BatchInput {
        embeddings: input.embeddings.iter().rev().copied().collect(),
        prompts: input.prompts.as_ref().map(|p| p.iter().rev().copied().collect::<Vec<PromptInput>>()),
        priors: None,
    };
    let logits = |inp: &BatchInput<'_, f64>| {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &model.store, false);
        let out = model.forward(&mut ctx, inp, None).unwrap();
        (tape.value(out.logits).clone(), out.winner)
    };
    let (a, wa) = logits(&input);
    let (b, wb) = logits(&rev);
    let per = 16 * 16;
    let n = idx.len();
    for (i, &w) in wa.iter().enumerate() {
        let j = n - 1 - i;
        assert_eq!(w, wb[j]);
        for (x, y) in a.data()[i * per..(i + 1) * per].iter().zip(&b.data()[j * per..(j + 1) * per]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
