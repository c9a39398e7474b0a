//! Interaction log parsing, tri-level skip classification, deduplication
//! and per-user train/validation/test splits.

use std::collections::HashMap;
use std::io::Read;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INTERACTIONS_HEADER: [&str; 5] =
    ["user_id", "video_id", "playing_time", "duration", "timestamp"];

/// One raw user-video event from the interaction log.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user_id: String,
    pub video_id: String,
    /// Seconds actually played, >= 0.
    pub playing_time: f64,
    /// Video length in seconds, > 0.
    pub duration: f64,
    /// Epoch milliseconds; retained but unused by the method.
    pub timestamp: i64,
}

/// The three interaction levels refined out of skip behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InteractionClass {
    HighlyPositive,
    LessPositive,
    Negative,
}

impl InteractionClass {
    pub fn as_str(self) -> &'static str {
        match self {
            InteractionClass::HighlyPositive => "highly_positive",
            InteractionClass::LessPositive => "less_positive",
            InteractionClass::Negative => "negative",
        }
    }
}

/// A deduplicated, class-labeled (user, video) pair over dense indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub user_index: usize,
    pub video_index: usize,
    pub class: InteractionClass,
    /// 1 iff the pair is highly positive, 0 otherwise.
    pub y: u8,
}

impl LabeledPair {
    pub fn new(user_index: usize, video_index: usize, class: InteractionClass) -> Self {
        let y = u8::from(class == InteractionClass::HighlyPositive);
        LabeledPair {
            user_index,
            video_index,
            class,
            y,
        }
    }
}

/// Per-user class counts over labeled pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserInteractionProfile {
    pub n_highly: usize,
    pub n_less: usize,
    pub n_negative: usize,
}

/// Bijective maps between external string ids and dense indices,
/// assigned in first-appearance order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub videos: Vec<String>,
    #[serde(skip)]
    user_index: HashMap<String, usize>,
    #[serde(skip)]
    video_index: HashMap<String, usize>,
}

impl IdMaps {
    pub fn from_interactions(interactions: &[Interaction]) -> Self {
        let mut maps = IdMaps::default();
        for it in interactions {
            maps.intern_user(&it.user_id);
            maps.intern_video(&it.video_id);
        }
        maps
    }

    /// Rebuild the lookup tables after deserialization.
    pub fn from_lists(users: Vec<String>, videos: Vec<String>) -> Self {
        let user_index = users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i))
            .collect();
        let video_index = videos
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), i))
            .collect();
        IdMaps {
            users,
            videos,
            user_index,
            video_index,
        }
    }

    fn intern_user(&mut self, id: &str) -> usize {
        if let Some(&i) = self.user_index.get(id) {
            return i;
        }
        let i = self.users.len();
        self.users.push(id.to_string());
        self.user_index.insert(id.to_string(), i);
        i
    }

    fn intern_video(&mut self, id: &str) -> usize {
        if let Some(&i) = self.video_index.get(id) {
            return i;
        }
        let i = self.videos.len();
        self.videos.push(id.to_string());
        self.video_index.insert(id.to_string(), i);
        i
    }

    pub fn user(&self, id: &str) -> Result<usize> {
        self.user_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownId {
                kind: "user",
                id: id.to_string(),
            })
    }

    pub fn video(&self, id: &str) -> Result<usize> {
        self.video_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownId {
                kind: "video",
                id: id.to_string(),
            })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_videos(&self) -> usize {
        self.videos.len()
    }
}

/// Per-user 6:2:2 partition of the labeled pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<LabeledPair>,
    pub validation: Vec<LabeledPair>,
    pub test: Vec<LabeledPair>,
    pub split_seed: u64,
}

/// Dense |V| x d matrix; row i holds the initial embedding of the video
/// with dense index i.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub matrix: Array2<f64>,
}

impl FeatureTable {
    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn n_videos(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Parse the interaction log CSV (`user_id,video_id,playing_time,duration,timestamp`).
pub fn parse_interactions<R: Read>(reader: R) -> Result<Vec<Interaction>> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = csv_reader.headers()?.clone();
    if headers.iter().ne(INTERACTIONS_HEADER) {
        return Err(Error::MalformedRow {
            line: 1,
            reason: format!(
                "expected header {:?}, got {:?}",
                INTERACTIONS_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut interactions = Vec::new();
    for record in csv_reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 5 {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected 5 fields, got {}", record.len()),
            });
        }
        let playing_time = parse_field::<f64>(&record, 2, "playing_time", line)?;
        let duration = parse_field::<f64>(&record, 3, "duration", line)?;
        let timestamp = parse_field::<i64>(&record, 4, "timestamp", line)?;
        if !playing_time.is_finite() || playing_time < 0.0 {
            return Err(Error::InvalidField {
                line,
                field: "playing_time".into(),
                reason: format!("must be a non-negative real, got {playing_time}"),
            });
        }
        if !duration.is_finite() || duration <= 0.0 {
            return Err(Error::InvalidField {
                line,
                field: "duration".into(),
                reason: format!("must be a positive real, got {duration}"),
            });
        }
        interactions.push(Interaction {
            user_id: record[0].to_string(),
            video_id: record[1].to_string(),
            playing_time,
            duration,
            timestamp,
        });
    }
    Ok(interactions)
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    field: &str,
    line: usize,
) -> Result<T> {
    record[idx].parse::<T>().map_err(|_| Error::InvalidField {
        line,
        field: field.to_string(),
        reason: format!("cannot parse {:?}", &record[idx]),
    })
}

/// Classify one event: complete views are highly positive, skips within
/// `threshold` seconds are negative, later skips are less positive.
///
/// The completeness check runs first so that short fully-watched videos
/// (duration <= threshold) still count as highly positive.
pub fn classify(interaction: &Interaction, threshold: f64) -> InteractionClass {
    if interaction.playing_time >= interaction.duration {
        InteractionClass::HighlyPositive
    } else if interaction.playing_time <= threshold {
        InteractionClass::Negative
    } else {
        InteractionClass::LessPositive
    }
}

/// Collapse raw events into one labeled pair per distinct (user, video).
///
/// Pairs observed in two or more events are highly positive regardless of
/// the per-event classes; single-event pairs carry `classify()` of that
/// event. Output is sorted by (user_index, video_index), so the result is
/// independent of input order.
pub fn deduplicate_and_label(
    interactions: &[Interaction],
    id_maps: &IdMaps,
    threshold: f64,
) -> Result<Vec<LabeledPair>> {
    let mut seen: HashMap<(usize, usize), (usize, InteractionClass)> = HashMap::new();
    for it in interactions {
        let u = id_maps.user(&it.user_id)?;
        let v = id_maps.video(&it.video_id)?;
        let class = classify(it, threshold);
        seen.entry((u, v))
            .and_modify(|(count, _)| *count += 1)
            .or_insert((1, class));
    }
    let mut pairs: Vec<LabeledPair> = seen
        .into_iter()
        .map(|((u, v), (count, class))| {
            let class = if count >= 2 {
                InteractionClass::HighlyPositive
            } else {
                class
            };
            LabeledPair::new(u, v, class)
        })
        .collect();
    pairs.sort_unstable_by_key(|p| (p.user_index, p.video_index));
    Ok(pairs)
}

/// Class counts per user over labeled pairs.
pub fn user_profiles(pairs: &[LabeledPair], n_users: usize) -> Vec<UserInteractionProfile> {
    let mut profiles = vec![UserInteractionProfile::default(); n_users];
    for p in pairs {
        let profile = &mut profiles[p.user_index];
        match p.class {
            InteractionClass::HighlyPositive => profile.n_highly += 1,
            InteractionClass::LessPositive => profile.n_less += 1,
            InteractionClass::Negative => profile.n_negative += 1,
        }
    }
    profiles
}

/// Floor-rule slice sizes: n_train = floor(r_train*n), n_val = floor(r_val*n),
/// n_test takes the remainder. The tiny epsilon compensates binary ratio
/// representation (0.6 * 10 must floor to 6, not 5).
pub fn split_counts(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let n_train = (ratios.0 * n as f64 + 1e-9).floor() as usize;
    let n_val = (ratios.1 * n as f64 + 1e-9).floor() as usize;
    (n_train, n_val, n - n_train - n_val)
}

/// Per-user random partition of the labeled pairs into train/validation/test.
///
/// Each user's pairs are shuffled on an independent seeded substream, so the
/// assignment of one user never depends on another user's data.
pub fn split_per_user(
    pairs: &[LabeledPair],
    ratios: (f64, f64, f64),
    seed: u64,
) -> DatasetSplit {
    let mut per_user: HashMap<usize, Vec<LabeledPair>> = HashMap::new();
    for p in pairs {
        per_user.entry(p.user_index).or_default().push(*p);
    }
    let mut user_ids: Vec<usize> = per_user.keys().copied().collect();
    user_ids.sort_unstable();

    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        split_seed: seed,
    };
    for u in user_ids {
        let mut user_pairs = per_user.remove(&u).unwrap();
        user_pairs.sort_unstable_by_key(|p| p.video_index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u as u64 + 1);
        user_pairs.shuffle(&mut rng);
        let (n_train, n_val, _) = split_counts(user_pairs.len(), ratios);
        for (i, p) in user_pairs.into_iter().enumerate() {
            if i < n_train {
                split.train.push(p);
            } else if i < n_train + n_val {
                split.validation.push(p);
            } else {
                split.test.push(p);
            }
        }
    }
    split
}

/// Load the feature CSV (`video_id,f0,...,f{d-1}`, header optional) into a
/// matrix ordered by dense video index. Every video in `id_maps` must have
/// a row; rows for unknown videos are ignored.
pub fn load_features<R: Read>(reader: R, id_maps: &IdMaps) -> Result<FeatureTable> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut dim: Option<usize> = None;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; id_maps.n_videos()];
    for (row_idx, record) in csv_reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if row_idx == 0 && record.get(0) == Some("video_id") {
            continue; // header row
        }
        let video_id = record
            .get(0)
            .ok_or(Error::MalformedRow {
                line,
                reason: "empty row".into(),
            })?
            .to_string();
        let values: Vec<f64> = record
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>().map_err(|_| Error::InvalidField {
                    line,
                    field: "feature".into(),
                    reason: format!("cannot parse {s:?}"),
                })
            })
            .collect::<Result<_>>()?;
        let d = *dim.get_or_insert(values.len());
        if values.len() != d {
            return Err(Error::DimMismatch {
                video: video_id,
                got: values.len(),
                expected: d,
            });
        }
        if let Ok(v) = id_maps.video(&video_id) {
            rows[v] = Some(values);
        }
    }

    let d = dim.unwrap_or(0);
    let mut matrix = Array2::zeros((id_maps.n_videos(), d));
    for (v, row) in rows.into_iter().enumerate() {
        let row = row.ok_or_else(|| Error::MissingFeature {
            video: id_maps.videos[v].clone(),
        })?;
        for (j, x) in row.into_iter().enumerate() {
            matrix[(v, j)] = x;
        }
    }
    Ok(FeatureTable { matrix })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn event(user: &str, video: &str, playing: f64, duration: f64) -> Interaction {
        Interaction {
            user_id: user.into(),
            video_id: video.into(),
            playing_time: playing,
            duration,
            timestamp: 0,
        }
    }

    #[test]
    fn parse_maps_fields_directly() {
        let csv = "user_id,video_id,playing_time,duration,timestamp\n\
                   u1,v3,30.0,30.0,0\n\
                   u2,v5,3.2,45.0,0\n";
        let got = parse_interactions(csv.as_bytes()).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0], event("u1", "v3", 30.0, 30.0));
        assert_eq!(got[1], event("u2", "v5", 3.2, 45.0));
    }

    #[test]
    fn parse_rejects_negative_playing_time_with_line() {
        let csv = "user_id,video_id,playing_time,duration,timestamp\n\
                   u1,v3,30.0,30.0,0\n\
                   u2,v5,-1,45.0,0\n";
        match parse_interactions(csv.as_bytes()) {
            Err(Error::InvalidField { line, field, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(field, "playing_time");
            }
            other => panic!("expected InvalidField, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_non_positive_duration() {
        let csv = "user_id,video_id,playing_time,duration,timestamp\nu1,v1,1.0,0.0,0\n";
        assert!(matches!(
            parse_interactions(csv.as_bytes()),
            Err(Error::InvalidField { .. })
        ));
    }

    #[test]
    fn parse_rejects_wrong_header() {
        let csv = "user,video,play,dur,ts\nu1,v1,1.0,2.0,0\n";
        assert!(matches!(
            parse_interactions(csv.as_bytes()),
            Err(Error::MalformedRow { line: 1, .. })
        ));
    }

    #[test]
    fn classify_matches_threshold_rules() {
        assert_eq!(
            classify(&event("u", "v", 30.0, 30.0), 5.0),
            InteractionClass::HighlyPositive
        );
        assert_eq!(
            classify(&event("u", "v", 3.0, 30.0), 5.0),
            InteractionClass::Negative
        );
        assert_eq!(
            classify(&event("u", "v", 12.0, 30.0), 5.0),
            InteractionClass::LessPositive
        );
        // boundary: playing_time == threshold is still a quick skip
        assert_eq!(
            classify(&event("u", "v", 5.0, 30.0), 5.0),
            InteractionClass::Negative
        );
        // short video fully watched: the completeness rule wins
        assert_eq!(
            classify(&event("u", "v", 4.0, 4.0), 5.0),
            InteractionClass::HighlyPositive
        );
    }

    #[test]
    fn duplicates_become_highly_positive() {
        let events = vec![
            event("u1", "v1", 2.0, 30.0),
            event("u1", "v1", 30.0, 30.0),
        ];
        let maps = IdMaps::from_interactions(&events);
        let pairs = deduplicate_and_label(&events, &maps, 5.0).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].class, InteractionClass::HighlyPositive);
        assert_eq!(pairs[0].y, 1);
    }

    #[test]
    fn duplicate_rule_applies_even_to_all_quick_skips() {
        let events = vec![event("u1", "v1", 2.0, 30.0), event("u1", "v1", 3.0, 30.0)];
        let maps = IdMaps::from_interactions(&events);
        let pairs = deduplicate_and_label(&events, &maps, 5.0).unwrap();
        assert_eq!(pairs[0].class, InteractionClass::HighlyPositive);
    }

    #[test]
    fn single_event_pair_uses_classify() {
        let events = vec![event("u1", "v1", 12.0, 30.0)];
        let maps = IdMaps::from_interactions(&events);
        let pairs = deduplicate_and_label(&events, &maps, 5.0).unwrap();
        assert_eq!(pairs[0].class, InteractionClass::LessPositive);
        assert_eq!(pairs[0].y, 0);
    }

    #[test]
    fn dedup_rejects_unknown_ids() {
        let known = vec![event("u1", "v1", 1.0, 2.0)];
        let maps = IdMaps::from_interactions(&known);
        let events = vec![event("u2", "v1", 1.0, 2.0)];
        assert!(matches!(
            deduplicate_and_label(&events, &maps, 5.0),
            Err(Error::UnknownId { kind: "user", .. })
        ));
    }

    #[test]
    fn split_counts_follow_floor_rule() {
        assert_eq!(split_counts(10, (0.6, 0.2, 0.2)), (6, 2, 2));
        assert_eq!(split_counts(1, (0.6, 0.2, 0.2)), (0, 0, 1));
        assert_eq!(split_counts(5, (0.6, 0.2, 0.2)), (3, 1, 1));
        assert_eq!(split_counts(7, (0.6, 0.2, 0.2)), (4, 1, 2));
    }

    #[test]
    fn split_is_deterministic_and_partitions_per_user() {
        let pairs: Vec<LabeledPair> = (0..10)
            .map(|v| LabeledPair::new(0, v, InteractionClass::LessPositive))
            .collect();
        let a = split_per_user(&pairs, (0.6, 0.2, 0.2), 7);
        let b = split_per_user(&pairs, (0.6, 0.2, 0.2), 7);
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);
        assert_eq!(a.test, b.test);
        assert_eq!(a.train.len(), 6);
        assert_eq!(a.validation.len(), 2);
        assert_eq!(a.test.len(), 2);

        let mut all: Vec<usize> = a
            .train
            .iter()
            .chain(&a.validation)
            .chain(&a.test)
            .map(|p| p.video_index)
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn single_pair_user_follows_floor_remainder_rule() {
        // floor(0.6*1) = 0 train, floor(0.2*1) = 0 val, remainder -> test.
        let pairs = vec![LabeledPair::new(0, 0, InteractionClass::HighlyPositive)];
        let split = split_per_user(&pairs, (0.6, 0.2, 0.2), 1);
        assert_eq!(split.train.len(), 0);
        assert_eq!(split.validation.len(), 0);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn load_features_shapes_and_errors() {
        let events = vec![
            event("u1", "a", 1.0, 2.0),
            event("u1", "b", 1.0, 2.0),
            event("u1", "c", 1.0, 2.0),
        ];
        let maps = IdMaps::from_interactions(&events);

        let csv = "video_id,f0,f1,f2,f3\na,1,2,3,4\nb,5,6,7,8\nc,9,10,11,12\n";
        let table = load_features(csv.as_bytes(), &maps).unwrap();
        assert_eq!(table.matrix.shape(), &[3, 4]);
        assert_eq!(table.matrix[(1, 2)], 7.0);

        let short = "a,1,2,3,4\nb,5,6,7\nc,9,10,11,12\n";
        assert!(matches!(
            load_features(short.as_bytes(), &maps),
            Err(Error::DimMismatch { got: 3, expected: 4, .. })
        ));

        let missing = "a,1,2,3,4\nb,5,6,7,8\n";
        assert!(matches!(
            load_features(missing.as_bytes(), &maps),
            Err(Error::MissingFeature { .. })
        ));
    }

    #[test]
    fn corpus_without_complete_views_has_no_single_event_highly_positive() {
        let mut events = Vec::new();
        for v in 0..20 {
            events.push(event("u1", &format!("v{v}"), 0.3 * v as f64, 30.0));
        }
        let maps = IdMaps::from_interactions(&events);
        let pairs = deduplicate_and_label(&events, &maps, 5.0).unwrap();
        assert!(pairs
            .iter()
            .all(|p| p.class != InteractionClass::HighlyPositive));
    }

    proptest! {
        #[test]
        fn classify_is_a_total_partition(playing in 0.0f64..100.0, duration in 0.01f64..100.0, threshold in 0.01f64..20.0) {
            let it = event("u", "v", playing, duration);
            let class = classify(&it, threshold);
            let highly = playing >= duration;
            let negative = !highly && playing <= threshold;
            let less = !highly && !negative;
            let expected = match (highly, less, negative) {
                (true, false, false) => InteractionClass::HighlyPositive,
                (false, true, false) => InteractionClass::LessPositive,
                (false, false, true) => InteractionClass::Negative,
                _ => unreachable!("branches must be exclusive"),
            };
            prop_assert_eq!(class, expected);
        }

        #[test]
        fn dedup_is_order_independent(mut order in proptest::sample::subsequence((0usize..12).collect::<Vec<_>>(), 12)) {
            let base: Vec<Interaction> = (0..12)
                .map(|k| event(&format!("u{}", k % 3), &format!("v{}", k % 4), (k as f64) * 1.5, 10.0))
                .collect();
            let maps = IdMaps::from_interactions(&base);
            let forward = deduplicate_and_label(&base, &maps, 5.0).unwrap();

            order.reverse();
            let shuffled: Vec<Interaction> = order.iter().map(|&k| base[k].clone())
                .chain(base.iter().filter(|it| !order.iter().any(|&k| base[k] == **it)).cloned())
                .collect();
            // keep only permutations of the full list
            if shuffled.len() == base.len() {
                let reordered = deduplicate_and_label(&shuffled, &maps, 5.0).unwrap();
                prop_assert_eq!(forward, reordered);
            }
        }
    }
}
