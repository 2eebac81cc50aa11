use std::collections::HashMap;

use super::Interaction;

/// Bijection between raw item keys and contiguous ids `1..=m`; id 0 is the pad.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    keys: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from keys listed in id order (`keys[0]` gets id 1).
    pub fn from_keys(keys: Vec<String>) -> Self {
        let ids = keys.iter().enumerate().map(|(i, k)| (k.clone(), i + 1)).collect();
        Self { keys, ids }
    }

    fn intern(&mut self, key: &str) -> usize {
        if let Some(&id) = self.ids.get(key) {
            return id;
        }
        self.keys.push(key.to_string());
        let id = self.keys.len();
        self.ids.insert(key.to_string(), id);
        id
    }

    /// Number of real items `m`.
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn id(&self, key: &str) -> Option<usize> {
        self.ids.get(key).copied()
    }

    pub fn key(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.keys.get(i)).map(String::as_str)
    }

    /// `(raw key, id)` pairs in id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.keys.iter().enumerate().map(|(i, k)| (k.as_str(), i + 1))
    }
}

/// One user's chronologically ordered item ids.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSequence {
    pub user: usize,
    pub raw_user: String,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Vocabulary plus per-user sequences ordered by user id.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceData {
    pub vocab: Vocab,
    pub users: Vec<UserSequence>,
}

impl SequenceData {
    pub fn num_items(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(UserSequence::len).sum()
    }
}

/// Orders the stream by timestamp (stable, so ties keep file order), assigns
/// user and item ids by first appearance in that order, and groups events
/// per user. Users with fewer than two events are dropped.
pub fn build_sequences(interactions: &[Interaction]) -> SequenceData {
    let mut order: Vec<usize> = (0..interactions.len()).collect();
    order.sort_by_key(|&i| interactions[i].timestamp);

    let mut vocab = Vocab::default();
    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut users: Vec<UserSequence> = Vec::new();
    for &i in &order {
        let e = &interactions[i];
        let item = vocab.intern(&e.item);
        let next = users.len();
        let u = *user_ids.entry(e.user.as_str()).or_insert(next);
        if u == next {
            users.push(UserSequence {
                user: u,
                raw_user: e.user.clone(),
                items: Vec::new(),
                timestamps: Vec::new(),
            });
        }
        users[u].items.push(item);
        users[u].timestamps.push(e.timestamp);
    }
    users.retain(|s| s.len() > 1);
    for (i, s) in users.iter_mut().enumerate() {
        s.user = i;
    }
    SequenceData { vocab, users }
}
