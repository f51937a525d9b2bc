//! Interaction data, per-modality feature stores, train/test splits and the
//! planted-model synthetic generator.

mod features;
mod ratings;
mod split;
mod synthetic;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use features::{parse_feature_file, FeatureEncoding, FeatureSet, FeatureStore};
pub use ratings::{parse_ratings, write_ratings, RatingsFormat};
pub use split::{cold_item_split, kfold, random_split, SplitKind, SplitPlan};
pub use synthetic::{generate_synthetic, item_id, user_id, PlantedTruth, SyntheticData, SyntheticSpec};

pub const RATING_MIN: f64 = 1.0;
pub const RATING_MAX: f64 = 5.0;

/// Which feature block a [`FeatureStore`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    ItemText,
    ItemImage,
    UserProfile,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::UserProfile, Modality::ItemText, Modality::ItemImage];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::ItemText => "item_text",
            Modality::ItemImage => "item_image",
            Modality::UserProfile => "user_profile",
        }
    }

    /// Whether entity ids in this modality are user ids (otherwise item ids).
    pub fn keyed_by_user(self) -> bool {
        matches!(self, Modality::UserProfile)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "item_text" => Ok(Modality::ItemText),
            "item_image" => Ok(Modality::ItemImage),
            "user_profile" => Ok(Modality::UserProfile),
            other => Err(Error::InvalidArgument(format!("unknown modality {other:?}"))),
        }
    }
}

/// Dense, contiguous index over opaque string ids, assigned in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdIndex {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdIndex {
    pub fn new() -> Self {
        IdIndex::default()
    }

    pub fn from_ids<I: IntoIterator<Item = String>>(ids: I) -> Result<Self, Error> {
        let mut out = IdIndex::new();
        for id in ids {
            if out.index.contains_key(&id) {
                return Err(Error::InvalidArgument(format!("duplicate id {id:?} in index")));
            }
            out.insert(&id);
        }
        Ok(out)
    }

    pub fn insert(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
    /// Dense indices into the owning set's user/item index.
    pub user: usize,
    pub item: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InteractionSet {
    records: Vec<InteractionRecord>,
    users: IdIndex,
    items: IdIndex,
    pairs: HashSet<(usize, usize)>,
}

impl InteractionSet {
    pub fn new() -> Self {
        InteractionSet::default()
    }

    /// Appends a record, rejecting out-of-range ratings, empty ids and
    /// duplicate (user, item) pairs. `line` is only used in error messages.
    pub fn push(
        &mut self,
        user_id: &str,
        item_id: &str,
        rating: f64,
        timestamp: Option<i64>,
        line: usize,
    ) -> Result<(), Error> {
        if user_id.is_empty() || item_id.is_empty() {
            return Err(Error::Parse {
                line,
                text: format!("{user_id},{item_id}"),
                message: "empty user or item id".into(),
            });
        }
        if !(RATING_MIN..=RATING_MAX).contains(&rating) {
            return Err(Error::RatingOutOfRange { line, rating });
        }
        if let (Some(u), Some(i)) = (self.users.get(user_id), self.items.get(item_id)) {
            if self.pairs.contains(&(u, i)) {
                return Err(Error::DuplicatePair {
                    line,
                    user: user_id.to_owned(),
                    item: item_id.to_owned(),
                });
            }
        }
        let user = self.users.insert(user_id);
        let item = self.items.insert(item_id);
        self.pairs.insert((user, item));
        self.records.push(InteractionRecord {
            user_id: user_id.to_owned(),
            item_id: item_id.to_owned(),
            rating,
            timestamp,
            user,
            item,
        });
        Ok(())
    }

    pub fn records(&self) -> &[InteractionRecord] {
        &self.records
    }

    pub fn users(&self) -> &IdIndex {
        &self.users
    }

    pub fn items(&self) -> &IdIndex {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
