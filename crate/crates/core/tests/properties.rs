mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ctx_rerank::analysis::{compare_all, t_test, TestKind};
use ctx_rerank::context::{time_of_day, Condition, ContextDimension};
use ctx_rerank::evaluation::{average_precision_at_k, map_at_k, precision_at_k};
use ctx_rerank::feature_space::{FeatureMask, FeatureVector, NormalizedEuclidean, FEATURE_COUNT};
use ctx_rerank::ingestion::{filter_dataset, read_events, Catalog, Dataset, FilterOptions, PlaylistCorpus, Song};
use ctx_rerank::preference::{GlobalModel, PersonalizedModel, PreferenceLookup};
use ctx_rerank::recommenders::{sort_entries, BprHyper, BprModel, ListEntry, RecommendationList};
use ctx_rerank::rerank::{RerankConfig, RerankMode, Reranker};

use common::{event, uniform_catalog};

fn catalog(n: usize, seed: u64) -> Arc<Catalog> {
    Arc::new(uniform_catalog(n, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Events as (user, song, hour) index triples over `users` users and `songs` songs.
fn arb_events(users: usize, songs: usize, max: usize) -> impl Strategy<Value = Vec<(usize, usize, u32)>> {
    prop::collection::vec((0..users, 0..songs, 0u32..24), 1..max)
}

fn dataset(catalog: &Arc<Catalog>, events: &[(usize, usize, u32)]) -> Dataset {
    let events = events
        .iter()
        .enumerate()
        .map(|(i, &(u, s, h))| event(&format!("u{u}"), &format!("s{s:03}"), i as u32, h))
        .collect();
    Dataset::new(events, catalog.clone()).unwrap()
}

fn list(catalog: &Catalog, picks: &[usize], scores: &[f64]) -> RecommendationList {
    let ids: Vec<&str> = catalog.songs().map(|s| s.id.as_str()).collect();
    let chosen: BTreeSet<usize> = picks.iter().map(|p| p % ids.len()).collect();
    let mut entries: Vec<ListEntry> = chosen
        .iter()
        .zip(scores.iter().cycle())
        .map(|(&i, &score)| ListEntry {
            song_id: ids[i].to_string(),
            score,
        })
        .collect();
    sort_entries(&mut entries);
    RecommendationList {
        user_id: "u".into(),
        condition: Condition::new("morning"),
        entries,
        source: "test".into(),
    }
}

struct Target(FeatureVector);

impl PreferenceLookup for Target {
    fn lookup(&self, _: Option<&str>, _: &Condition) -> ctx_rerank::Result<FeatureVector> {
        Ok(self.0)
    }
}

fn arb_unit_vector() -> impl Strategy<Value = FeatureVector> {
    prop::array::uniform9(0.0..=1.0f64).prop_map(|v| FeatureVector::new(v).unwrap())
}

fn brute_ap(list: &[String], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let denom = relevant.len().min(k);
    if denom == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 1..=k.min(list.len()) {
        if relevant.contains(&list[i - 1]) {
            let hits = list[..i].iter().filter(|s| relevant.contains(*s)).count();
            total += hits as f64 / i as f64;
        }
    }
    total / denom as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fixpoint_filter_is_idempotent_and_respects_thresholds(
        events in arb_events(8, 30, 300),
        min_song in 1usize..6,
        min_user in 1usize..30,
    ) {
        let cat = catalog(30, 1);
        let d = dataset(&cat, &events);
        let opts = FilterOptions { min_song_plays: min_song, min_user_events: min_user, fixpoint: true };
        let once = filter_dataset(&d, opts);
        let twice = filter_dataset(&once, opts);
        prop_assert_eq!(once.events(), twice.events());
        for (_, n) in once.song_plays() {
            prop_assert!(n >= min_song);
        }
        for (_, n) in once.user_events() {
            prop_assert!(n >= min_user);
        }
    }

    #[test]
    fn single_pass_filter_thresholds_hold_at_removal_time(
        events in arb_events(8, 30, 300),
        min_song in 1usize..6,
        min_user in 1usize..30,
    ) {
        let cat = catalog(30, 1);
        let d = dataset(&cat, &events);
        let opts = FilterOptions { min_song_plays: min_song, min_user_events: min_user, fixpoint: false };
        let out = filter_dataset(&d, opts);
        let plays = d.song_plays();
        for s in out.songs() {
            prop_assert!(plays[s] >= min_song);
        }
        for (_, n) in out.user_events() {
            prop_assert!(n >= min_user);
        }
        let rec = out.provenance.filters.last().unwrap();
        prop_assert_eq!(rec.events_after, out.len());
        prop_assert!(out.events().iter().all(|e| !rec.songs_removed.contains(&e.song_id) && !rec.users_removed.contains(&e.user_id)));
    }

    #[test]
    fn load_events_accounts_for_every_row(rows in prop::collection::vec((0usize..5, 0usize..40, 0u32..24), 0..80)) {
        let cat = catalog(30, 2);
        let mut text = String::from("user_id,song_id,timestamp_local_iso8601\n");
        for (u, s, h) in &rows {
            text.push_str(&format!("u{u},s{s:03},2021-05-01T{h:02}:15:00\n"));
        }
        let d = read_events(text.as_bytes(), "mem", cat, &ContextDimension::time_of_day()).unwrap();
        prop_assert_eq!(d.len() + d.provenance.dropped_unknown_song, rows.len());
        prop_assert_eq!(d.provenance.source_rows, rows.len());
        prop_assert_eq!(d.provenance.dropped_unknown_song, rows.iter().filter(|r| r.1 >= 30).count());
    }

    #[test]
    fn centroids_stay_within_contributing_songs(events in arb_events(4, 30, 120)) {
        let cat = catalog(30, 3);
        let d = dataset(&cat, &events);
        let global = Arc::new(GlobalModel::build(&d).unwrap());
        let personal = PersonalizedModel::build(&d, global.clone()).unwrap();
        let bounds = |filter: &dyn Fn(&str, &Condition) -> bool| {
            let mut lo = [f64::INFINITY; FEATURE_COUNT];
            let mut hi = [f64::NEG_INFINITY; FEATURE_COUNT];
            for e in d.events().iter().filter(|e| filter(&e.user_id, &e.condition)) {
                let v = cat.features(&e.song_id).unwrap().values();
                for f in 0..FEATURE_COUNT {
                    lo[f] = lo[f].min(v[f]);
                    hi[f] = hi[f].max(v[f]);
                }
            }
            (lo, hi)
        };
        for (c, v) in global.conditions() {
            let (lo, hi) = bounds(&|_, ec| ec == c);
            for f in 0..FEATURE_COUNT {
                let x = v.values()[f];
                prop_assert!((0.0..=1.0).contains(&x) && lo[f] - 1e-12 <= x && x <= hi[f] + 1e-12);
            }
        }
        for ((u, c), v) in personal.entries() {
            let (lo, hi) = bounds(&|eu, ec| eu == u && ec == c);
            for f in 0..FEATURE_COUNT {
                let x = v.values()[f];
                prop_assert!((0.0..=1.0).contains(&x) && lo[f] - 1e-12 <= x && x <= hi[f] + 1e-12);
            }
        }
    }

    #[test]
    fn top_n_respects_exclusions_and_matches_score(
        events in arb_events(5, 25, 100),
        excluded in prop::collection::btree_set(0usize..25, 0..10),
        n in 1usize..30,
    ) {
        let cat = catalog(25, 4);
        let d = dataset(&cat, &events);
        let model = BprModel::train(&d, &BprHyper { epochs: 3, factors: 4, ..BprHyper::default() }, 9).unwrap();
        let exclude_ids: Vec<String> = excluded.iter().map(|i| format!("s{i:03}")).collect();
        let exclude: BTreeSet<&str> = exclude_ids.iter().map(String::as_str).collect();
        let cond = time_of_day(9).unwrap();
        for user in ["u0", "u3", "ghost"] {
            let out = model.recommend_top_n(user, &cond, n, &exclude, "BPR").unwrap();
            prop_assert!(out.is_sorted());
            let ids: BTreeSet<&str> = out.song_ids().into_iter().collect();
            prop_assert_eq!(ids.len(), out.len());
            prop_assert!(ids.is_disjoint(&exclude));
            for e in &out.entries {
                prop_assert_eq!(e.score, model.score(user, &e.song_id).unwrap());
            }
        }
    }

    #[test]
    fn rerank_is_a_permutation_with_bounded_scores(
        picks in prop::collection::vec(0usize..200, 1..40),
        scores in prop::collection::vec(-5.0..5.0f64, 1..40),
        target in arb_unit_vector(),
        lambda in 0.0..=1.0f64,
    ) {
        let cat = catalog(200, 5);
        let metric = NormalizedEuclidean::new(FeatureMask::all());
        let model = Target(target);
        let r = Reranker::new(&cat, &model, &metric);
        let input = list(&cat, &picks, &scores);
        let regular = r.rerank(&input, RerankConfig::new(lambda, RerankMode::Regular).unwrap()).unwrap();
        let opposite = r.rerank(&input, RerankConfig::new(lambda, RerankMode::Opposite).unwrap()).unwrap();
        let mut a = input.song_ids();
        a.sort();
        for out in [&regular, &opposite] {
            let mut b = out.song_ids();
            b.sort();
            prop_assert_eq!(&a, &b);
            prop_assert!(out.entries.iter().all(|e| (0.0..=1.0).contains(&e.new_score)));
        }
        for e in &regular.entries {
            let o = opposite.entries.iter().find(|x| x.song_id == e.song_id).unwrap();
            let expected = lambda + 2.0 * (1.0 - lambda) * e.normalized_rec;
            prop_assert!((e.new_score + o.new_score - expected).abs() <= 1e-12);
        }
        let r0 = r.rerank(&input, RerankConfig::new(0.0, RerankMode::Regular).unwrap()).unwrap();
        let o0 = r.rerank(&input, RerankConfig::new(0.0, RerankMode::Opposite).unwrap()).unwrap();
        prop_assert_eq!(r0.song_ids(), input.song_ids());
        prop_assert_eq!(o0.song_ids(), input.song_ids());
    }

    #[test]
    fn average_precision_matches_brute_force(
        order in Just((0..15).collect::<Vec<usize>>()).prop_shuffle(),
        len in 0usize..=12,
        relevant in prop::collection::btree_set(0usize..15, 0..8),
        k in 1usize..=12,
    ) {
        let list: Vec<String> = order[..len].iter().map(|i| format!("s{i}")).collect();
        let relevant: BTreeSet<String> = relevant.iter().map(|i| format!("s{i}")).collect();
        let ap = average_precision_at_k(&list, &relevant, k).unwrap();
        prop_assert!((ap - brute_ap(&list, &relevant, k)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ap));
        let need = relevant.len().min(k);
        if !relevant.is_empty() && relevant.len() <= list.len() {
            let perfect = list[..need].iter().all(|s| relevant.contains(s));
            prop_assert_eq!(ap == 1.0, perfect);
        }
    }

    #[test]
    fn precision_grows_with_relevant_hits(
        len in 1usize..=12,
        k in 1usize..=12,
        mut relevant in prop::collection::btree_set(0usize..12, 0..12),
        extra in 0usize..12,
    ) {
        let list: Vec<String> = (0..len).map(|i| format!("s{i}")).collect();
        let as_set = |r: &BTreeSet<usize>| r.iter().map(|i| format!("s{i}")).collect::<BTreeSet<String>>();
        let before = precision_at_k(&list, &as_set(&relevant), k).unwrap();
        relevant.insert(extra);
        let after = precision_at_k(&list, &as_set(&relevant), k).unwrap();
        prop_assert!(after >= before);
    }

    #[test]
    fn map_is_the_weighted_mean_of_any_partition(
        aps in prop::collection::vec(0.0..=1.0f64, 2..50),
        cut in 1usize..49,
    ) {
        let cut = cut.min(aps.len() - 1);
        let (a, b) = aps.split_at(cut);
        let whole = map_at_k(&aps).unwrap();
        let parts = (map_at_k(a).unwrap() * a.len() as f64 + map_at_k(b).unwrap() * b.len() as f64) / aps.len() as f64;
        prop_assert!((whole - parts).abs() <= 1e-12);
    }

    #[test]
    fn t_test_is_antisymmetric_and_shift_invariant(
        a in prop::collection::vec(0.0..1.0f64, 2..20),
        b in prop::collection::vec(0.0..1.0f64, 2..20),
        shift in -10.0..10.0f64,
    ) {
        for kind in [TestKind::Welch, TestKind::Student] {
            let ab = t_test(&a, &b, kind).unwrap();
            let ba = t_test(&b, &a, kind).unwrap();
            if ab.t.is_finite() {
                prop_assert!((ab.t + ba.t).abs() <= 1e-9 * ab.t.abs().max(1.0));
            } else {
                prop_assert_eq!(ab.t, -ba.t);
            }
            prop_assert!((ab.p - ba.p).abs() <= 1e-12);
            let sa: Vec<f64> = a.iter().map(|x| x + shift).collect();
            let sb: Vec<f64> = b.iter().map(|x| x + shift).collect();
            let shifted = t_test(&sa, &sb, kind).unwrap();
            if ab.t.is_finite() && !ab.degenerate {
                prop_assert!((shifted.t - ab.t).abs() <= 1e-6 * ab.t.abs().max(1.0));
                prop_assert!((shifted.p - ab.p).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn test_count_and_alpha_monotonicity(
        sizes in prop::collection::vec(2usize..5, 1..4),
        alpha_lo in 0.001..0.05f64,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut corpora = Vec::new();
        for (d, &n) in sizes.iter().enumerate() {
            for c in 0..n {
                corpora.push(PlaylistCorpus {
                    dimension: format!("d{d}"),
                    condition: Condition::new(&format!("c{d}_{c}")),
                    songs: uniform_catalog(12, &mut rng).songs().cloned().collect::<Vec<Song>>(),
                    playlists: BTreeSet::new(),
                    total_followers: 0,
                    unresolved: 0,
                });
            }
        }
        let expected: usize = sizes.iter().map(|n| n * (n - 1) / 2 * 9).sum();
        let lo = compare_all(&corpora, alpha_lo, TestKind::Welch).unwrap();
        let hi = compare_all(&corpora, alpha_lo * 2.0, TestKind::Welch).unwrap();
        prop_assert_eq!(lo.tests, expected);
        for (a, b) in lo.results.iter().zip(&hi.results) {
            prop_assert!(!a.significant || b.significant);
        }
    }
}
