//! Seeded interaction logs with a persistent long-term genre preference.
//!
//! Every item belongs to one genre and its title is drawn from that genre's
//! word list. Each user owns a long-term mode (a few favourite genres) and a
//! short-term interest state that drifts: with probability `drift_rate` per
//! step the user's current interest jumps to a random genre, and the interest
//! state moves a `drift_rate` fraction of the way toward it. Items are drawn
//! from `mode_weight * mode + (1 - mode_weight) * interest`, so the oldest
//! interactions still carry information about the mode that a short window
//! estimates poorly.

use super::{Catalog, Interaction, Item};
use crate::error::{Error, Result};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub interactions_per_user: usize,
    pub genres: usize,
    pub drift_rate: f64,
    pub seed: u64,
    /// Genres in each user's long-term mode.
    pub genres_per_user: usize,
    /// Weight of the long-term mode in the sampling mixture.
    pub mode_weight: f64,
    pub words_per_genre: usize,
    pub min_title_words: usize,
    pub max_title_words: usize,
    /// Zipf exponent for item popularity inside a genre.
    pub popularity_exponent: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 500,
            items: 200,
            interactions_per_user: 60,
            genres: 20,
            drift_rate: 0.05,
            seed: 7,
            genres_per_user: 2,
            mode_weight: 0.6,
            words_per_genre: 12,
            min_title_words: 2,
            max_title_words: 4,
            popularity_exponent: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub catalog: Catalog,
    pub interactions: Vec<Interaction>,
    /// Genre of each item, indexed like the catalog.
    pub item_genres: Vec<usize>,
}

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ren", "sa", "tor", "vu", "el", "dan", "bri", "osk", "fel", "ga", "hul",
    "ix", "jor", "ne", "pa", "qui", "ro", "sel", "ta", "um", "zo",
];

/// Distinct pronounceable word for (genre, index).
fn word(genre: usize, index: usize, words_per_genre: usize) -> String {
    let mut n = genre * words_per_genre + index;
    let mut w = String::new();
    loop {
        w.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
        if n == 0 {
            break;
        }
        n -= 1;
    }
    w
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic: {m}")));
        if self.users == 0 || self.items == 0 || self.interactions_per_user == 0 {
            return bad("users, items and interactions_per_user must be positive");
        }
        if self.genres < 2 {
            return bad("need at least 2 genres");
        }
        if self.genres_per_user == 0 || self.genres_per_user > self.genres {
            return bad("genres_per_user must be in 1..=genres");
        }
        if !(0.0..=1.0).contains(&self.drift_rate) || !(0.0..=1.0).contains(&self.mode_weight) {
            return bad("drift_rate and mode_weight must lie in [0, 1]");
        }
        if self.min_title_words < 1
            || self.min_title_words > self.max_title_words
            || self.max_title_words > self.words_per_genre
        {
            return bad("title word bounds must satisfy 1 <= min <= max <= words_per_genre");
        }
        if self.items < self.genres {
            return bad("need at least one item per genre");
        }
        Ok(())
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut items = Vec::with_capacity(cfg.items);
    let mut item_genres = Vec::with_capacity(cfg.items);
    let mut by_genre: Vec<Vec<usize>> = vec![Vec::new(); cfg.genres];
    for i in 0..cfg.items {
        let g = i % cfg.genres;
        let n_words = rng.gen_range(cfg.min_title_words..=cfg.max_title_words);
        let mut idx: Vec<usize> = (0..cfg.words_per_genre).collect();
        idx.shuffle(&mut rng);
        let title = idx[..n_words]
            .iter()
            .map(|&w| {
                let s = word(g, w, cfg.words_per_genre);
                let mut c = s.chars();
                let first = c.next().expect("non-empty word").to_ascii_uppercase();
                std::iter::once(first).chain(c).collect::<String>()
            })
            .collect::<Vec<_>>()
            .join(" ");
        items.push(Item {
            item_id: i as u64 + 1,
            title,
        });
        item_genres.push(g);
        by_genre[g].push(i);
    }
    let popularity: Vec<WeightedIndex<f64>> = by_genre
        .iter()
        .map(|members| {
            WeightedIndex::new(
                (0..members.len()).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_exponent)),
            )
            .expect("non-empty genre")
        })
        .collect();

    let span: i64 = 100_000_000;
    let mut interactions = Vec::with_capacity(cfg.users * cfg.interactions_per_user);
    for u in 0..cfg.users {
        let mut genres: Vec<usize> = (0..cfg.genres).collect();
        genres.shuffle(&mut rng);
        let mut mode = vec![0.0; cfg.genres];
        for &g in &genres[..cfg.genres_per_user] {
            mode[g] = 1.0 / cfg.genres_per_user as f64;
        }
        let mut interest_state = mode.clone();
        let mut current = genres[0];

        let mut times: Vec<i64> = (0..cfg.interactions_per_user)
            .map(|_| rng.gen_range(0..span))
            .collect();
        times.sort_unstable();
        for k in 1..times.len() {
            if times[k] <= times[k - 1] {
                times[k] = times[k - 1] + 1;
            }
        }

        for &ts in &times {
            let mixture: Vec<f64> = mode
                .iter()
                .zip(&interest_state)
                .map(|(m, c)| cfg.mode_weight * m + (1.0 - cfg.mode_weight) * c)
                .collect();
            let g = WeightedIndex::new(&mixture)
                .expect("mixture has mass")
                .sample(&mut rng);
            let item = by_genre[g][popularity[g].sample(&mut rng)];
            interactions.push(Interaction {
                user_id: u as u64 + 1,
                item_id: item as u64 + 1,
                rating: rng.gen_range(3..=5),
                timestamp: ts,
            });
            if cfg.drift_rate > 0.0 {
                if rng.gen::<f64>() < cfg.drift_rate {
                    current = rng.gen_range(0..cfg.genres);
                }
                for (j, c) in interest_state.iter_mut().enumerate() {
                    let target = if j == current { 1.0 } else { 0.0 };
                    *c += cfg.drift_rate * (target - *c);
                }
            }
        }
    }

    Ok(SyntheticData {
        catalog: Catalog::new(items)?,
        interactions,
        item_genres,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            users: 40,
            items: 60,
            interactions_per_user: 30,
            genres: 6,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        assert_eq!(generate_synthetic(&small()).unwrap(), generate_synthetic(&small()).unwrap());
        let other = SyntheticConfig { seed: 8, ..small() };
        assert_ne!(generate_synthetic(&small()).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn degenerate_configs_rejected() {
        for bad in [
            SyntheticConfig { users: 0, ..small() },
            SyntheticConfig { items: 0, ..small() },
            SyntheticConfig { genres: 1, ..small() },
        ] {
            assert!(generate_synthetic(&bad).is_err());
        }
    }

    #[test]
    fn titles_are_multi_word() {
        let d = generate_synthetic(&small()).unwrap();
        for item in d.catalog.items() {
            let n = item.title.split(' ').count();
            assert!((2..=6).contains(&n), "{}", item.title);
        }
    }

    #[test]
    fn no_drift_keeps_users_in_their_mode() {
        let cfg = SyntheticConfig {
            drift_rate: 0.0,
            genres_per_user: 2,
            ..small()
        };
        let d = generate_synthetic(&cfg).unwrap();
        let mut seen: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
        for x in &d.interactions {
            seen.entry(x.user_id)
                .or_default()
                .insert(d.item_genres[x.item_id as usize - 1]);
        }
        assert!(seen.values().all(|g| g.len() <= 2));
    }

    #[test]
    fn frequency_counter_beats_chance_without_drift() {
        let cfg = SyntheticConfig {
            drift_rate: 0.0,
            genres_per_user: 1,
            users: 200,
            ..small()
        };
        let d = generate_synthetic(&cfg).unwrap();
        let mut by_user: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for x in &d.interactions {
            by_user.entry(x.user_id).or_default().push(x.item_id);
        }
        let (mut hits, mut total) = (0usize, 0usize);
        for seq in by_user.values() {
            let (history, next) = seq.split_at(seq.len() - 1);
            let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
            for &i in history {
                *counts.entry(i).or_insert(0) += 1;
            }
            let best = counts
                .iter()
                .max_by_key(|(&id, &c)| (c, std::cmp::Reverse(id)))
                .map(|(&id, _)| id)
                .unwrap();
            hits += usize::from(best == next[0]);
            total += 1;
        }
        let hr1 = hits as f64 / total as f64;
        assert!(hr1 > 10.0 / cfg.items as f64, "HR@1 {hr1}");
    }
}
