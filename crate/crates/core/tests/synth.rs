use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segmote_core::synth::{
    build_manifest, default_modalities, downsample_mask, generate_sample, read_sample, sample_prompt, tight_bbox, write_sample, Corpus,
    CorpusSpec, PromptKind,
};

#[test]
fn same_seed_gives_the_same_sample() {
    for m in default_modalities() {
        let a = generate_sample(&m, 2, 64, false, 99).unwrap();
        let b = generate_sample(&m, 2, 64, false, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(&m, 2, 64, false, 100).unwrap();
        assert_ne!(a.labels, c.labels);
    }
}

#[test]
fn modalities_are_pairwise_distinct() {
    let mods = default_modalities();
    for (i, a) in mods.iter().enumerate() {
        for b in &mods[i + 1..] {
            let same = a.gamma == b.gamma
                && a.gain == b.gain
                && a.bias == b.bias
                && a.noise == b.noise
                && a.noise_strength == b.noise_strength
                && a.texture_freq == b.texture_freq
                && a.background == b.background;
            assert!(!same, "{} and {}", a.name, b.name);
        }
    }
}

/// Mean image intensity of one underlying mask rendered in two regimes: the
/// average gap must exceed the spread of the per-image gap.
#[test]
fn mean_intensity_separates_modalities() {
    let mods = default_modalities();
    for (i, a) in mods.iter().enumerate() {
        for b in &mods[i + 1..] {
            let gaps: Vec<f64> = (0..1000u64)
                .map(|seed| {
                    let sa = generate_sample(a, (seed % 3) as usize, 32, false, seed).unwrap();
                    let sb = generate_sample(b, (seed % 3) as usize, 32, false, seed).unwrap();
                    assert_eq!(sa.labels, sb.labels);
                    let mean = |s: &segmote_core::synth::SegmentationSample| s.image.data().iter().map(|&v| v as f64).sum::<f64>() / 1024.0;
                    mean(&sa) - mean(&sb)
                })
                .collect();
            let mu = gaps.iter().sum::<f64>() / gaps.len() as f64;
            let sd = (gaps.iter().map(|g| (g - mu).powi(2)).sum::<f64>() / gaps.len() as f64).sqrt();
            let noise = a.noise_strength.max(b.noise_strength);
            assert!(mu.abs() > noise, "{} vs {}: margin {mu} noise {noise}", a.name, b.name);
            assert!(mu.abs() > sd, "{} vs {}: margin {mu} spread {sd}", a.name, b.name);
        }
    }
}

#[test]
fn nine_to_one_split() {
    let spec = CorpusSpec::default();
    let entries = build_manifest(&spec).unwrap();
    assert_eq!(entries.len(), 2000);
    for m in 0..4 {
        let train = entries.iter().filter(|e| e.modality == m && e.train).count();
        let test = entries.iter().filter(|e| e.modality == m && !e.train).count();
        assert_eq!((train, test), (450, 50));
    }
    let mut ids: Vec<u64> = entries.iter().map(|e| e.id).collect();
    ids.dedup();
    assert_eq!(ids.len(), entries.len());
    assert!(build_manifest(&CorpusSpec { split_ratio: 1.0, ..spec }).is_err());
}

#[test]
fn corpus_round_trips_through_disk() {
    let spec = CorpusSpec { samples_per_modality: 5, image_size: 32, ..CorpusSpec::default() };
    let corpus = Corpus::generate(spec.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.write(dir.path()).unwrap();
    let back = Corpus::read(dir.path()).unwrap();
    assert_eq!(back.spec, corpus.spec);
    assert_eq!(back.entries, corpus.entries);
    assert_eq!(back.samples, corpus.samples);
    assert_eq!(Corpus::generate(spec).unwrap().samples, corpus.samples);
}

#[test]
fn corrupt_sample_files_are_rejected() {
    let m = &default_modalities()[0];
    let s = generate_sample(m, 0, 16, false, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.bin");
    write_sample(&path, &s).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(read_sample(&path).is_err());
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'S';
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(read_sample(&path).is_err());
}

#[test]
fn prompt_examples() {
    let m = &default_modalities()[1];
    let s = generate_sample(m, 1, 64, false, 5).unwrap();
    let mask = s.binary_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tight = tight_bbox(&mask, 64).unwrap();
    let b = sample_prompt(&s, PromptKind::Box, 8, 0.0, &mut rng).bbox.unwrap();
    assert_eq!(b, tight.map(|v| v as f64));
    assert!(sample_prompt(&s, PromptKind::None, 8, 0.1, &mut rng).point.is_none());
    let low = sample_prompt(&s, PromptKind::Mask, 8, 0.1, &mut rng).lowres_mask;
    assert_eq!(low, downsample_mask(&mask, 64, 8));
    let mut r1 = ChaCha8Rng::seed_from_u64(3);
    let mut r2 = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(sample_prompt(&s, PromptKind::Point, 8, 0.1, &mut r1), sample_prompt(&s, PromptKind::Point, 8, 0.1, &mut r2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn samples_and_prompts_respect_their_invariants(seed in any::<u64>(), modality in 0usize..4, class in 0usize..3, jitter in 0.0f64..0.1) {
        let m = &default_modalities()[modality];
        let s = generate_sample(m, class, 64, false, seed).unwrap();
        let mask = s.binary_mask();
        prop_assert!(s.foreground() > 0);
        prop_assert!(s.image.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = sample_prompt(&s, PromptKind::Point, 8, jitter, &mut rng).point.unwrap();
        prop_assert_eq!(mask[y * 64 + x], 1);
        let [x0, y0, x1, y1] = sample_prompt(&s, PromptKind::Box, 8, jitter, &mut rng).bbox.unwrap();
        let fg = mask.len() - mask.iter().filter(|&&v| v == 0).count();
        let inside = (0..mask.len())
            .filter(|&i| mask[i] != 0)
            .filter(|&i| {
                let (px, py) = ((i % 64) as f64, (i / 64) as f64);
                px >= x0 && px <= x1 && py >= y0 && py <= y1
            })
            .count();
        prop_assert!(inside as f64 >= 0.9 * fg as f64);
    }
}
