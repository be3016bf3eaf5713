#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ctx_rerank::context::time_of_day;
use ctx_rerank::feature_space::{FeatureVector, FEATURE_COUNT};
use ctx_rerank::ingestion::{Catalog, Dataset, ListeningEvent, Song};

pub const FEATURE_HEADER: &str =
    "song_id,acousticness,danceability,energy,instrumentalness,liveness,loudness,speechiness,valence,tempo";

pub fn event(user: &str, song: &str, day: u32, hour: u32) -> ListeningEvent {
    ListeningEvent {
        user_id: user.into(),
        song_id: song.into(),
        timestamp: NaiveDate::from_ymd_opt(2020, 1, 1 + day % 28)
            .unwrap()
            .and_hms_opt(hour, 0, 0)
            .unwrap(),
        condition: time_of_day(hour).unwrap(),
    }
}

pub fn uniform_catalog(n: usize, rng: &mut impl Rng) -> Catalog {
    Catalog::from_songs((0..n).map(|i| Song {
        id: format!("s{i:03}"),
        features: FeatureVector::new(std::array::from_fn(|_| rng.random::<f64>())).unwrap(),
    }))
}

/// Synthetic listening data where every (user, time of day) pair draws its
/// songs from its own feature cluster.
pub struct Synthetic {
    pub users: usize,
    pub songs: usize,
    pub songs_per_pair: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

/// Features that separate clusters; the rest sit at 0.5.
pub const ACTIVE: [usize; 4] = [0, 1, 2, 7];
pub const LOW: f64 = 0.25;
pub const HIGH: f64 = 0.75;
pub const CLUSTERS: usize = 1 << ACTIVE.len();
const HOURS: [(&str, u32); 4] = [("night", 0), ("morning", 6), ("afternoon", 12), ("evening", 18)];

impl Default for Synthetic {
    fn default() -> Self {
        Synthetic {
            users: 40,
            songs: 400,
            songs_per_pair: 20,
            noise_sd: 0.05,
            seed: 7,
        }
    }
}

impl Synthetic {
    pub fn cluster_mean(c: usize) -> [f64; FEATURE_COUNT] {
        let mut m = [0.5; FEATURE_COUNT];
        for (bit, &f) in ACTIVE.iter().enumerate() {
            m[f] = if c >> bit & 1 == 1 { HIGH } else { LOW };
        }
        m
    }

    /// Writes `catalog.csv`, `events.csv` and `config.toml` into `dir` and
    /// returns the config path. `extra` is appended to the config.
    pub fn write(&self, dir: &Path, extra: &str) -> PathBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_sd).unwrap();
        let mut members: Vec<Vec<String>> = vec![Vec::new(); CLUSTERS];
        let mut catalog = String::from(FEATURE_HEADER);
        catalog.push('\n');
        for i in 0..self.songs {
            let c = i % CLUSTERS;
            let id = format!("s{i:03}");
            let mean = Self::cluster_mean(c);
            // csv columns follow the canonical feature order
            let values: Vec<String> = mean
                .iter()
                .map(|m| format!("{:.6}", (m + noise.sample(&mut rng)).clamp(0.0, 1.0)))
                .collect();
            let _ = writeln!(catalog, "{id},{}", values.join(","));
            members[c].push(id);
        }
        let mut events = String::from("user_id,song_id,timestamp_local_iso8601\n");
        for u in 0..self.users {
            let user = format!("u{u:02}");
            let mut clusters: Vec<usize> = (0..CLUSTERS).collect();
            clusters.shuffle(&mut rng);
            for (&(_, start), &c) in HOURS.iter().zip(&clusters) {
                let mut songs = members[c].clone();
                songs.shuffle(&mut rng);
                for song in songs.iter().take(self.songs_per_pair) {
                    let day = rng.random_range(1..=28);
                    let hour = start + rng.random_range(0..6);
                    let minute = rng.random_range(0..60);
                    let _ = writeln!(events, "{user},{song},2020-03-{day:02}T{hour:02}:{minute:02}:00");
                }
            }
        }
        fs::write(dir.join("catalog.csv"), catalog).unwrap();
        fs::write(dir.join("events.csv"), events).unwrap();
        let config = format!(
            "seed = 42\n\n[data]\ncatalog = \"catalog.csv\"\ncatalog_normalized = true\nevents = \"events.csv\"\n\n\
             [filter]\nmin_song_plays = 1\nmin_user_events = 1\n\n{extra}"
        );
        let path = dir.join("config.toml");
        fs::write(&path, config).unwrap();
        path
    }
}

/// 1,000 events built so that filtering with (5, 20) has a known outcome.
pub struct FilterFixture {
    pub dataset: Dataset,
    pub removed_songs: BTreeSet<String>,
    pub removed_users: BTreeSet<String>,
    pub events_after: usize,
}

pub fn filter_fixture() -> FilterFixture {
    let mut events = Vec::new();
    let mut day = 0;
    let mut play = |events: &mut Vec<ListeningEvent>, user: &str, song: &str| {
        day += 1;
        events.push(event(user, song, day, 10));
    };
    let hot = |i: usize| format!("h{:02}", i % 20);
    for u in 0..30 {
        let user = format!("hv{u:02}");
        for j in 0..30 {
            play(&mut events, &user, &hot(u + j));
        }
    }
    for j in 0..20 {
        play(&mut events, "edge20", &hot(j));
    }
    for j in 0..19 {
        play(&mut events, "edge19", &hot(j));
    }
    for j in 0..18 {
        play(&mut events, "drop_after", &hot(j));
    }
    for s in ["r0", "r1", "r2", "r3"] {
        play(&mut events, "drop_after", s);
    }
    for j in 0..5 {
        play(&mut events, "light1", &hot(j));
    }
    for j in 0..3 {
        play(&mut events, "light2", &hot(j));
    }
    play(&mut events, "light2", "r4");
    // songs at and around the play threshold, all played by heavy users
    let extra: [(&str, std::ops::Range<usize>); 5] =
        [("b5", 0..5), ("b4", 5..9), ("r0", 9..12), ("c6", 12..18), ("c10", 20..30)];
    for (song, users) in extra {
        for u in users {
            play(&mut events, &format!("hv{u:02}"), song);
        }
    }
    play(&mut events, "hv18", "r5");
    play(&mut events, "hv19", "r5");
    assert_eq!(events.len(), 1000);

    let songs: BTreeSet<String> = events.iter().map(|e| e.song_id.clone()).collect();
    let catalog = Catalog::from_songs(songs.into_iter().map(|id| Song {
        id,
        features: FeatureVector::splat(0.5).unwrap(),
    }));
    FilterFixture {
        dataset: Dataset::new(events, Arc::new(catalog)).unwrap(),
        removed_songs: ["r0", "r1", "r2", "r3", "r4", "r5", "b4"].map(String::from).into(),
        removed_users: ["edge19", "drop_after", "light1", "light2"].map(String::from).into(),
        events_after: 941,
    }
}
