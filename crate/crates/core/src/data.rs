//! Raw list corpora: parsing, filtering, truncation, the train/validation/test
//! partition and the padded training instances fed to the model.
//!
//! Raw interactions are one per line, `user<TAB>list<TAB>item<TAB>position`.
//! Inside the model every item is addressed by an [`ItemId`]; id 0 is the
//! reserved padding item and real items start at 1.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub type ItemId = u32;

/// Reserved id of the padding item. Never part of the catalog.
pub const PADDING: ItemId = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemList {
    pub id: String,
    pub owner: String,
    /// Items in curation order.
    pub items: Vec<String>,
}

/// Users, items and the ordered lists that connect them.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub users: BTreeSet<String>,
    pub items: BTreeSet<String>,
    /// Sorted by list id.
    pub lists: Vec<ItemList>,
}

impl Corpus {
    /// Builds a corpus whose user and item sets are exactly those referenced by `lists`.
    pub fn from_lists(mut lists: Vec<ItemList>) -> Self {
        lists.sort_by(|a, b| a.id.cmp(&b.id));
        let users = lists.iter().map(|l| l.owner.clone()).collect();
        let items = lists.iter().flat_map(|l| l.items.iter().cloned()).collect();
        Corpus { users, items, lists }
    }

    pub fn interactions(&self) -> usize {
        self.lists.iter().map(|l| l.items.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }
}

/// Reads interaction lines. Blank lines and `#` comments are skipped; lines may
/// arrive in any order and each list is rebuilt by ascending position.
pub fn parse_interactions<R: BufRead>(source: R) -> Result<Corpus> {
    struct Pending {
        owner: String,
        entries: Vec<(u64, String)>,
    }

    let mut lists: BTreeMap<String, Pending> = BTreeMap::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let [user, list, item, position] = [fields[0], fields[1], fields[2], fields[3]];
        if user.is_empty() || list.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty identifier".into(),
            });
        }
        let position: u64 = position.trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("position {position:?} is not a non-negative integer"),
        })?;

        let pending = lists.entry(list.to_string()).or_insert_with(|| Pending {
            owner: user.to_string(),
            entries: Vec::new(),
        });
        if pending.owner != user {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "list {list} already owned by {}, found owner {user}",
                    pending.owner
                ),
            });
        }
        pending.entries.push((position, item.to_string()));
    }

    let mut out = Vec::with_capacity(lists.len());
    for (id, mut pending) in lists {
        // Stable: equal positions keep input order (they are rejected below anyway).
        pending.entries.sort_by_key(|(pos, _)| *pos);
        if let Some(w) = pending.entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicatePosition {
                list: id,
                position: w[0].0,
            });
        }
        out.push(ItemList {
            id,
            owner: pending.owner,
            items: pending.entries.into_iter().map(|(_, item)| item).collect(),
        });
    }
    Ok(Corpus::from_lists(out))
}

/// Writes the corpus in the interaction format, positions renumbered from 0.
pub fn write_interactions<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    for list in &corpus.lists {
        for (pos, item) in list.items.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}\t{}", list.owner, list.id, item, pos)?;
        }
    }
    Ok(())
}

/// One pass dropping rare items, then one pass dropping short lists.
/// Not iterated to a fixpoint.
pub fn filter_corpus(corpus: &Corpus, min_item_count: usize, min_list_len: usize) -> Corpus {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for list in &corpus.lists {
        for item in &list.items {
            *counts.entry(item.as_str()).or_default() += 1;
        }
    }
    let lists = corpus
        .lists
        .iter()
        .map(|l| ItemList {
            id: l.id.clone(),
            owner: l.owner.clone(),
            items: l
                .items
                .iter()
                .filter(|item| counts[item.as_str()] >= min_item_count)
                .cloned()
                .collect(),
        })
        .filter(|l| l.items.len() >= min_list_len)
        .collect();
    Corpus::from_lists(lists)
}

/// Keeps the first `max_len` (earliest curated) items of every list.
pub fn truncate_lists(corpus: &Corpus, max_len: usize) -> Corpus {
    let lists = corpus
        .lists
        .iter()
        .map(|l| ItemList {
            id: l.id.clone(),
            owner: l.owner.clone(),
            items: l.items.iter().take(max_len).cloned().collect(),
        })
        .collect();
    Corpus::from_lists(lists)
}

/// Bidirectional name/index map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<I: IntoIterator<Item = String>>(names: I) -> Self {
        let names: Vec<String> = names.into_iter().collect();
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Vocab { names, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One list after the leave-one-out partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitList {
    pub id: String,
    pub user: usize,
    pub train: Vec<ItemId>,
    pub validation: ItemId,
    pub test: ItemId,
}

impl SplitList {
    /// Input sequence at test time: the training items followed by the validation item.
    pub fn test_input(&self) -> Vec<ItemId> {
        let mut input = self.train.clone();
        input.push(self.validation);
        input
    }

    /// Every item of the original list, in order.
    pub fn all_items(&self) -> Vec<ItemId> {
        let mut items = self.test_input();
        items.push(self.test);
        items
    }
}

/// A training example: predict `train[end]` from the items before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub list: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitCorpus {
    /// Catalog; the item at vocabulary index `i` has [`ItemId`] `i + 1`.
    pub items: Vocab,
    pub users: Vocab,
    pub lists: Vec<SplitList>,
}

impl SplitCorpus {
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn item_id(&self, name: &str) -> Option<ItemId> {
        self.items.get(name).map(|i| i as ItemId + 1)
    }

    pub fn item_name(&self, id: ItemId) -> &str {
        self.items.name(id as usize - 1)
    }

    /// All (list, position) training instances, starting from the second training item.
    pub fn training_instances(&self) -> Vec<TrainingInstance> {
        self.lists
            .iter()
            .enumerate()
            .flat_map(|(list, l)| (1..l.train.len()).map(move |end| TrainingInstance { list, end }))
            .collect()
    }

    /// The most recent `max_len` items before the instance target, unpadded.
    pub fn instance_prefix(&self, inst: TrainingInstance, max_len: usize) -> &[ItemId] {
        let train = &self.lists[inst.list].train;
        &train[inst.end.saturating_sub(max_len)..inst.end]
    }

    pub fn instance_target(&self, inst: TrainingInstance) -> ItemId {
        self.lists[inst.list].train[inst.end]
    }
}

/// Leave-one-out partition: last item to test, second to last to validation.
pub fn split_corpus(corpus: &Corpus) -> Result<SplitCorpus> {
    let items = Vocab::new(corpus.items.iter().cloned());
    let users = Vocab::new(corpus.users.iter().cloned());
    let mut lists = Vec::with_capacity(corpus.lists.len());
    for list in &corpus.lists {
        let n = list.items.len();
        if n < 3 {
            return Err(Error::ListTooShort {
                list: list.id.clone(),
                len: n,
                min: 3,
            });
        }
        let ids: Vec<ItemId> = list
            .items
            .iter()
            .map(|name| {
                items
                    .get(name)
                    .map(|i| i as ItemId + 1)
                    .ok_or_else(|| Error::MissingEmbedding(name.clone()))
            })
            .collect::<Result<_>>()?;
        let user = users
            .get(&list.owner)
            .ok_or_else(|| Error::UnknownUser(list.owner.clone()))?;
        lists.push(SplitList {
            id: list.id.clone(),
            user,
            train: ids[..n - 2].to_vec(),
            validation: ids[n - 2],
            test: ids[n - 1],
        });
    }
    Ok(SplitCorpus { items, users, lists })
}

/// Left-pads (or truncates to the most recent items) a sequence to exactly `n` positions.
pub fn pad_prefix(items: &[ItemId], n: usize) -> Vec<ItemId> {
    let recent = &items[items.len().saturating_sub(n)..];
    let mut out = vec![PADDING; n - recent.len()];
    out.extend_from_slice(recent);
    out
}

/// Every (padded prefix, target) pair of a sequence, starting from its second item.
pub fn make_training_instances(sequence: &[ItemId], n: usize) -> Vec<(Vec<ItemId>, ItemId)> {
    (1..sequence.len())
        .map(|k| (pad_prefix(&sequence[..k], n), sequence[k]))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CorpusStats {
    pub users: usize,
    pub lists: usize,
    pub items: usize,
    pub interactions: usize,
    pub lists_per_user: f64,
    pub items_per_list: f64,
    pub density: f64,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let users = corpus.users.len();
    let lists = corpus.lists.len();
    let items = corpus.items.len();
    let interactions = corpus.interactions();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    CorpusStats {
        users,
        lists,
        items,
        interactions,
        lists_per_user: ratio(lists, users),
        items_per_list: ratio(interactions, lists),
        density: ratio(interactions, lists * items),
    }
}

impl CorpusStats {
    pub const CSV_HEADER: &'static str =
        "users,lists,items,interactions,lists_per_user,items_per_list,density";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.users,
            self.lists,
            self.items,
            self.interactions,
            self.lists_per_user,
            self.items_per_list,
            self.density
        )
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "users={}", self.users)?;
        writeln!(f, "lists={}", self.lists)?;
        writeln!(f, "items={}", self.items)?;
        writeln!(f, "interactions={}", self.interactions)?;
        writeln!(f, "lists_per_user={:.4}", self.lists_per_user)?;
        writeln!(f, "items_per_list={:.4}", self.items_per_list)?;
        write!(f, "density={:.6}", self.density)
    }
}
