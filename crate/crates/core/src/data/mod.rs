//! Event data model, segmentation into streams, synthetic generation and the
//! text event-log format.

pub mod io;
pub mod segment;
pub mod synth;

use std::collections::BTreeMap;

use crate::error::{GemsError, Result};

pub use segment::{segment, StreamBundle};
pub use synth::{generate_synthetic, PlantSpec, SynthConfig};

/// One watched item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionEvent {
    pub vid: u64,
    pub aid: u64,
    pub tag: u32,
    /// Seconds since the epoch.
    pub ts: i64,
    /// Playtime in seconds.
    pub pt: f32,
    /// Video duration in seconds.
    pub dur: f32,
    /// 0 = skip, 1 = like, 2 = follow, 3 = share.
    pub label: u8,
}

/// Playtime may exceed the duration (replays), up to this factor.
pub const PLAYTIME_CAP: f32 = 4.0;

impl InteractionEvent {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.dur > 0.0) || !self.dur.is_finite() {
            return Err(GemsError::Data(format!("vid {}: duration must be positive", self.vid)));
        }
        if !(self.pt >= 0.0) || self.pt > PLAYTIME_CAP * self.dur {
            return Err(GemsError::Data(format!(
                "vid {}: playtime {} outside [0, {} x duration]",
                self.vid, self.pt, PLAYTIME_CAP
            )));
        }
        Ok(())
    }
}

/// Events of one user, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct UserHistory {
    pub user_id: u64,
    pub events: Vec<InteractionEvent>,
}

impl UserHistory {
    /// Checks non-emptiness and strictly increasing timestamps.
    pub fn new(user_id: u64, events: Vec<InteractionEvent>) -> Result<Self> {
        if events.is_empty() {
            return Err(GemsError::Data(format!("user {user_id} has no events")));
        }
        for (i, w) in events.windows(2).enumerate() {
            if w[1].ts <= w[0].ts {
                return Err(GemsError::NonMonotone { user_id, index: i + 1 });
            }
        }
        Ok(UserHistory { user_id, events })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Leave-one-out split: everything before the last event, and the last event.
    pub fn split_target(&self) -> (&[InteractionEvent], &InteractionEvent) {
        let (last, rest) = self.events.split_last().expect("non-empty history");
        (rest, last)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogItem {
    pub vid: u64,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

/// Which stream a user's held-out target was planted in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Plant {
    Recent,
    Mid,
    Long,
}

impl Plant {
    pub fn as_str(self) -> &'static str {
        match self {
            Plant::Recent => "recent",
            Plant::Mid => "mid",
            Plant::Long => "long",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "recent" => Some(Plant::Recent),
            "mid" => Some(Plant::Mid),
            "long" => Some(Plant::Long),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserMeta {
    pub split: Split,
    pub plant: Plant,
}

/// Users sorted by id, the item catalog, and per-user split/plant metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub users: Vec<UserHistory>,
    pub catalog: Vec<CatalogItem>,
    pub meta: BTreeMap<u64, UserMeta>,
}

impl Dataset {
    pub fn new(
        mut users: Vec<UserHistory>,
        catalog: Vec<CatalogItem>,
        meta: BTreeMap<u64, UserMeta>,
    ) -> Result<Self> {
        users.sort_by_key(|u| u.user_id);
        if users.windows(2).any(|w| w[0].user_id == w[1].user_id) {
            return Err(GemsError::Data("duplicate user id".into()));
        }
        Ok(Dataset { users, catalog, meta })
    }

    pub fn meta_of(&self, user_id: u64) -> UserMeta {
        self.meta.get(&user_id).copied().unwrap_or(UserMeta {
            split: default_split(user_id),
            plant: Plant::Recent,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&UserHistory> {
        self.users
            .iter()
            .filter(|u| self.meta_of(u.user_id).split == split)
            .collect()
    }

    pub fn catalog_dim(&self) -> usize {
        self.catalog.first().map_or(0, |c| c.vector.len())
    }

    /// Largest author id and tag seen, used to size embedding tables.
    pub fn id_ranges(&self) -> (u64, u32) {
        let mut aid = 0;
        let mut tag = 0;
        for u in &self.users {
            for e in &u.events {
                aid = aid.max(e.aid);
                tag = tag.max(e.tag);
            }
        }
        (aid, tag)
    }
}

/// Split for users without explicit metadata: every tenth id is held out.
pub fn default_split(user_id: u64) -> Split {
    if user_id.is_multiple_of(10) {
        Split::Test
    } else {
        Split::Train
    }
}
