use super::*;

fn small() -> SplitConfig {
    SplitConfig {
        train_identities: 3,
        samples_per_identity: 4,
        val_identities: 2,
        test_identities: 2,
        ..SplitConfig::default()
    }
}

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64 - ma, y as f64 - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn render_is_deterministic_and_bounded() {
    let id = IdentitySpec::new(3, 99);
    assert_eq!(id, IdentitySpec::new(3, 99));
    let a = render_sample(&id, 5);
    assert_eq!(a, render_sample(&id, 5));
    assert_eq!(a.len(), PIXELS);
    assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_ne!(a, render_sample(&id, 6));
    assert_ne!(IdentitySpec::new(3, 99), IdentitySpec::new(3, 100));
}

#[test]
fn same_identity_correlates_more_than_different_identities() {
    let (mut same, mut diff) = (0.0, 0.0);
    for t in 0..100u64 {
        let a = IdentitySpec::new(2 * t, 17);
        let b = IdentitySpec::new(2 * t + 1, 17);
        let x = render_sample(&a, 1000 + t);
        same += pearson(&x, &render_sample(&a, 5000 + t));
        diff += pearson(&x, &render_sample(&b, 5000 + t));
    }
    assert!(same / 100.0 > diff / 100.0, "same {same} vs diff {diff}");
}

#[test]
fn mask_overwrites_bottom_rows_only() {
    let image = render_sample(&IdentitySpec::new(0, 1), 0);
    for mask_type in MaskType::ALL {
        let spec = MaskSpec {
            mask_type,
            color_intensity: 0.3,
            coverage: 0.5,
        };
        spec.validate().unwrap();
        let masked = apply_mask(&image, &spec);
        assert_eq!(masked[..16 * SIDE], image[..16 * SIDE]);
        assert_eq!(apply_mask(&masked, &spec), masked);
        assert!(masked.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    let spec = MaskSpec {
        mask_type: MaskType::Surgical,
        color_intensity: 0.0,
        coverage: 0.6,
    };
    assert!(spec.validate().unwrap_err().to_string().contains("coverage"));
}

#[test]
fn mask_geometries_differ() {
    let image = vec![0.0f32; PIXELS];
    let masks: Vec<Image> = MaskType::ALL
        .iter()
        .map(|&mask_type| {
            apply_mask(
                &image,
                &MaskSpec {
                    mask_type,
                    color_intensity: 0.2,
                    coverage: 0.5,
                },
            )
        })
        .collect();
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(masks[i], masks[j], "{i} vs {j}");
        }
    }
}

#[test]
fn occlusion_changes_pixels_substantially() {
    let (mut total, mut count) = (0.0, 0usize);
    for id in 0..20u64 {
        let identity = IdentitySpec::new(id, 5);
        for s in 0..10u64 {
            let plain = render_sample(&identity, s);
            let spec = MaskSpec::sample(derive_seed(identity.base_seed, &[s]));
            spec.validate().unwrap();
            let masked = apply_mask(&plain, &spec);
            let first = SIDE - spec.occluded_rows();
            for i in first * SIDE..PIXELS {
                total += (masked[i] - plain[i]).abs() as f64;
                count += 1;
            }
        }
    }
    assert!(total / count as f64 > 0.1, "{}", total / count as f64);
}

#[test]
fn pairs_share_the_unmasked_region() {
    let id = IdentitySpec::new(4, 2);
    let p = make_pair(&id, 9, Selection::Original, false);
    // Coverage never exceeds 0.55, so the top 14 rows are always visible.
    assert_eq!(p.unmasked[..14 * SIDE], p.masked[..14 * SIDE]);
    assert_eq!(p.masked, masked_sample(&id, 9));

    let differ = (0..100u64)
        .filter(|&s| {
            let p = make_pair(&id, s, Selection::Random, false);
            p.unmasked[..14 * SIDE] != p.masked[..14 * SIDE]
        })
        .count();
    assert!(differ >= 90, "{differ}");
}

#[test]
fn flip_mirrors_both_members() {
    let id = IdentitySpec::new(1, 8);
    for sel in [Selection::Original, Selection::Random] {
        let plain = make_pair(&id, 3, sel, false);
        let flipped = make_pair(&id, 3, sel, true);
        assert!(flipped.flipped && !plain.flipped);
        assert_eq!(flipped.unmasked, flip_horizontal(&plain.unmasked));
        assert_eq!(flipped.masked, flip_horizontal(&plain.masked));
        assert_eq!(flip_horizontal(&flipped.unmasked), plain.unmasked);
        assert_eq!(flipped.unmasked[0], plain.unmasked[SIDE - 1]);
    }
}

#[test]
fn default_split_structure() {
    let cfg = SplitConfig::default();
    let s = build_splits(&cfg, 11).unwrap();
    assert_eq!(s.train.samples.len(), 20 * 64);
    assert_eq!(s.train.num_classes, 20);
    for set in [&s.val, &s.test] {
        let ids = match set.split {
            Split::Val => 5,
            _ => 8,
        };
        let ru = set.count(Role::Reference, false);
        let rm = set.count(Role::Reference, true);
        let pu = set.count(Role::Probe, false);
        let pm = set.count(Role::Probe, true);
        assert_eq!((ru, rm, pu, pm), (2 * ids, 4 * ids, 4 * ids, 8 * ids));
        // Masked to unmasked is 2:1 for references and for probes.
        assert_eq!(rm, 2 * ru);
        assert_eq!(pm, 2 * pu);
        assert!(set.images.iter().all(|i| match i.role {
            Role::Reference => i.session == 1,
            _ => i.session == 2 || i.session == 3,
        }));
    }
    let train_ids: std::collections::BTreeSet<u64> = s.train.samples.iter().map(|t| t.identity_id).collect();
    let val_ids: std::collections::BTreeSet<u64> = s.val.images.iter().map(|i| i.identity_id).collect();
    let test_ids: std::collections::BTreeSet<u64> = s.test.images.iter().map(|i| i.identity_id).collect();
    assert_eq!((train_ids.len(), val_ids.len(), test_ids.len()), (20, 5, 8));
    assert!(val_ids.is_subset(&train_ids) && test_ids.is_subset(&train_ids));
    // Shared identities, never shared variation seeds.
    let train_images: std::collections::BTreeSet<Vec<u32>> = s
        .train
        .samples
        .iter()
        .flat_map(|t| [&t.unmasked, &t.masked])
        .map(|im| im.iter().map(|v| v.to_bits()).collect())
        .collect();
    for im in s.val.images.iter().chain(&s.test.images) {
        assert!(!train_images.contains(&im.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>()));
    }
}

#[test]
fn splits_are_deterministic_and_thread_independent() {
    let a = build_splits(&small(), 3).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| build_splits(&small(), 3).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, build_splits(&small(), 4).unwrap());
}

#[test]
fn split_validation() {
    let cfg = SplitConfig {
        train_identities: 1,
        ..small()
    };
    assert!(build_splits(&cfg, 0).unwrap_err().to_string().contains("train_identities"));
    let cfg = SplitConfig {
        test_identities: 4,
        ..small()
    };
    assert!(build_splits(&cfg, 0).unwrap_err().to_string().contains("test_identities"));
    let cfg = SplitConfig {
        fixed_coverage: Some(0.7),
        ..small()
    };
    assert!(build_splits(&cfg, 0).unwrap_err().to_string().contains("coverage"));
}

#[test]
fn random_partner_never_is_the_anchor() {
    let s = build_splits(&small(), 1).unwrap();
    for (i, anchor) in s.train.samples.iter().enumerate() {
        for partner in 0..10 {
            let p = s.train.pair(i, Selection::Random, partner, false);
            assert_ne!(p.masked, anchor.masked);
            let owner = s.train.samples.iter().find(|t| t.masked == p.masked).unwrap();
            assert_eq!(owner.label, anchor.label);
        }
        let p = s.train.pair(i, Selection::Original, 0, false);
        assert_eq!(p.masked, anchor.masked);
        assert_eq!(p.unmasked, anchor.unmasked);
    }
}

#[test]
fn training_masks_match_make_pair() {
    let s = build_splits(&small(), 21).unwrap();
    let t = &s.train.samples[5];
    let p = make_pair(&IdentitySpec::new(t.identity_id, 21), t.sample as u64, Selection::Original, false);
    assert_eq!(p.unmasked, t.unmasked);
    assert_eq!(p.masked, t.masked);
}

#[test]
fn pair_batch_labels() {
    let s = build_splits(&small(), 2).unwrap();
    let pairs: Vec<Pair> = (0..3).map(|i| s.train.pair(i * 4, Selection::Original, 0, i == 1)).collect();
    let b: PairBatch<f64> = PairBatch::from_pairs(&pairs, &[0, 1, 2]).unwrap();
    assert_eq!(b.unmasked.shape(), &[3, 1, 32, 32]);
    assert_eq!(b.unmasked_mask_labels, vec![0; 3]);
    assert_eq!(b.masked_mask_labels, vec![1; 3]);
    assert_eq!(b.flip_flags, vec![false, true, false]);
    assert!(PairBatch::<f64>::from_pairs(&pairs, &[0]).is_err());
}

#[test]
fn corpus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = build_splits(&small(), 8).unwrap();
    let records = write_corpus(&s, dir.path()).unwrap();
    assert_eq!(records.len(), 2 * 12 + 2 * 18 + 2 * 18);
    let manifest = std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back, s);

    let dir2 = tempfile::tempdir().unwrap();
    write_corpus(&build_splits(&small(), 8).unwrap(), dir2.path()).unwrap();
    assert_eq!(std::fs::read(dir2.path().join(MANIFEST_FILE)).unwrap(), manifest);

    std::fs::write(dir.path().join(&records[0].path), [0u8; 8]).unwrap();
    assert!(load_corpus(dir.path()).unwrap_err().to_string().contains(&records[0].path));
}
