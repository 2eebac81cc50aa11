use super::SequenceData;

/// One user's leave-one-out partition.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSplit {
    pub user: usize,
    pub train: Vec<usize>,
    /// Second-to-last item; absent when the user has only two events.
    pub val: Option<usize>,
    pub test: usize,
    /// Sorted, deduplicated ids of every item in the full sequence.
    pub consumed: Vec<usize>,
}

impl UserSplit {
    /// Reassembles `train ++ [val] ++ [test]`.
    pub fn sequence(&self) -> Vec<usize> {
        let mut s = self.train.clone();
        s.extend(self.val);
        s.push(self.test);
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Val,
    Test,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Val => "val",
            Phase::Test => "test",
        })
    }
}

/// Held-out prediction: the model sees `input` and must rank `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub user: usize,
    pub input: Vec<usize>,
    pub target: usize,
    /// Items never offered as negatives (the user's full history).
    pub exclude: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainUser {
    pub user: usize,
    pub items: Vec<usize>,
    /// Sorted, deduplicated train-prefix items.
    pub consumed: Vec<usize>,
}

/// Everything training may touch. Built from train prefixes only, so held-out
/// targets cannot leak into batches.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainView {
    pub num_items: usize,
    pub users: Vec<TrainUser>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub num_items: usize,
    pub users: Vec<UserSplit>,
}

fn sorted_set(items: &[usize]) -> Vec<usize> {
    let mut v = items.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

pub fn leave_one_out_split(data: &SequenceData) -> SplitDataset {
    let users = data
        .users
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| {
            let n = s.items.len();
            let (train, val) = if n >= 3 {
                (s.items[..n - 2].to_vec(), Some(s.items[n - 2]))
            } else {
                (s.items[..1].to_vec(), None)
            };
            UserSplit {
                user: s.user,
                train,
                val,
                test: s.items[n - 1],
                consumed: sorted_set(&s.items),
            }
        })
        .collect();
    SplitDataset {
        num_items: data.num_items(),
        users,
    }
}

impl SplitDataset {
    pub fn train_view(&self) -> TrainView {
        TrainView {
            num_items: self.num_items,
            users: self
                .users
                .iter()
                .map(|u| TrainUser {
                    user: u.user,
                    items: u.train.clone(),
                    consumed: sorted_set(&u.train),
                })
                .collect(),
        }
    }

    /// Validation input is the train prefix; test input appends the
    /// validation item when present.
    pub fn eval_pairs(&self, phase: Phase) -> Vec<EvalPair> {
        self.users
            .iter()
            .filter_map(|u| {
                let (input, target) = match phase {
                    Phase::Val => (u.train.clone(), u.val?),
                    Phase::Test => {
                        let mut input = u.train.clone();
                        input.extend(u.val);
                        (input, u.test)
                    }
                };
                Some(EvalPair {
                    user: u.user,
                    input,
                    target,
                    exclude: u.consumed.clone(),
                })
            })
            .collect()
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(|u| u.train.len() + usize::from(u.val.is_some()) + 1).sum()
    }
}
