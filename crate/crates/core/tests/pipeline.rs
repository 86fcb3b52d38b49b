use screendelta::analytics::{budget_report, measure_corpus};
use screendelta::features::FeatureSpec;
use screendelta::raster::Raster;
use screendelta::rts::{self, generate_labels, match_regions, AnnotationSet, TrainConfig};
use screendelta::selectors::SelectorConfig;
use screendelta::sequence::{self, assemble, build_window, token_totals, WhitespaceCounter};
use screendelta::synthgen::{self, RegionStyle, SynthSpec};

fn spec(seed: u64) -> SynthSpec {
    SynthSpec {
        width: 120,
        height: 90,
        patch_size: 15,
        n_steps: 6,
        change_fraction: 0.3,
        region_style: RegionStyle::RectBlocks,
        seed,
        ..SynthSpec::default()
    }
}

#[test]
fn disk_round_trip_matches_in_memory() {
    let dir = tempfile::tempdir().unwrap();
    let synth = synthgen::generate(&spec(4)).unwrap();
    synth.write_to_dir(dir.path()).unwrap();

    let loaded = sequence::load_episode(&dir.path().join("manifest.json"), &FeatureSpec::PixelStats, &|p| Raster::load(p)).unwrap();
    let memory = synth.episode(&FeatureSpec::PixelStats).unwrap();
    let sel = SelectorConfig::Pixel { tolerance: 2 };
    for t in 1..=memory.len() {
        let w = build_window(&memory.trajectory, t, 4).unwrap();
        let a = assemble(&memory, &w, &sel, None, &WhitespaceCounter).unwrap();
        let b = assemble(&loaded, &w, &sel, None, &WhitespaceCounter).unwrap();
        assert_eq!(a, b);
    }
    let rep = measure_corpus(&[loaded], &sel, None).unwrap();
    assert_eq!(rep.aggregate.avg_redundant_per_image, 48.0 - 14.0);
}

#[test]
fn labels_from_disk_annotations_train_a_working_selector() {
    let dir = tempfile::tempdir().unwrap();
    let mut samples = Vec::new();
    for seed in 0..6 {
        let synth = synthgen::generate(&spec(seed)).unwrap();
        let sub = dir.path().join(seed.to_string());
        synth.write_to_dir(&sub).unwrap();
        let ann = AnnotationSet::load(sub.join("regions.txt")).unwrap();
        let ep = sequence::load_episode(&sub.join("manifest.json"), &FeatureSpec::PixelStats, &|p| Raster::load(p)).unwrap();
        for t in 2..=ep.len() {
            let (prev, cur) = (ep.observation(t - 1), ep.observation(t));
            let m = match_regions(ann.get(&(t - 1).to_string()).unwrap(), ann.get(&t.to_string()).unwrap(), 0.5);
            let labels = generate_labels(&prev.grid, &cur.grid, &m, 0.5, 2).unwrap();
            samples.extend(rts::samples_from_labels(&prev.features, &cur.features, &labels).unwrap());
        }
    }
    let out = rts::train(&samples, &TrainConfig { seed: 3, ..TrainConfig::default() }).unwrap();

    let held = synthgen::generate(&spec(99)).unwrap();
    let ep = held.episode(&FeatureSpec::PixelStats).unwrap();
    let sel = SelectorConfig::Rts { threshold: 0.5 };
    let (mut agree, mut total) = (0, 0);
    for t in 2..=ep.len() {
        let mask = sel.select(&ep.pair(t), Some(&out.model)).unwrap();
        let changed = &held.ground_truth.changed[t - 1];
        for j in 0..mask.len() {
            agree += (mask.is_retained(j) == changed.contains(&j)) as usize;
            total += 1;
        }
    }
    assert!(agree as f64 >= 0.95 * total as f64, "{agree}/{total}");
}

#[test]
fn budget_totals_match_assembled_windows_on_loaded_corpus() {
    let corpus: Vec<_> = (0..3).map(|s| synthgen::generate(&spec(s)).unwrap().episode(&FeatureSpec::PixelStats).unwrap()).collect();
    let sel = SelectorConfig::Cosine { threshold: 0.999 };
    let r = budget_report(&corpus, &sel, &[2, 5], 10_000, None, &WhitespaceCounter).unwrap();
    let mut sum = 0usize;
    let mut n = 0usize;
    for ep in &corpus {
        for t in 5..=ep.len() {
            let w = build_window(&ep.trajectory, t, 5).unwrap();
            sum += token_totals(&assemble(ep, &w, &sel, None, &WhitespaceCounter).unwrap()).total;
            n += 1;
        }
    }
    assert_eq!(r.per_k[1].avg_tokens_per_step, sum as f64 / n as f64);
    assert_eq!(r.max_images_within_budget, 5);
}
