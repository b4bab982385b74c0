//! Train/val/test and k-fold assignments.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Train,
    Val,
    Test,
    Fold(usize),
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Train => f.write_str("train"),
            Role::Val => f.write_str("val"),
            Role::Test => f.write_str("test"),
            Role::Fold(k) => write!(f, "fold-{k}"),
        }
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            _ => s
                .strip_prefix("fold-")
                .and_then(|k| k.parse().ok())
                .map(Role::Fold)
                .ok_or_else(|| format!("unknown role `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    /// 80/10/10: validation and test each get `floor(n/10)`, train the rest.
    Table1,
    Kfold(usize),
}

/// Assignment of every id to one role, ordered by id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub seed: u64,
    pub assignments: Vec<(String, Role)>,
}

/// Seeded shuffle of the sorted ids, then contiguous train/val/test blocks or
/// round-robin fold assignment.
pub fn make_splits<S: AsRef<str>>(ids: &[S], kind: SplitKind, seed: u64) -> Result<SplitPlan> {
    let mut sorted: Vec<String> = ids.iter().map(|s| s.as_ref().to_string()).collect();
    if sorted.is_empty() {
        return Err(DataError::InvalidArgument("no ids to split".into()));
    }
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(DataError::InvalidArgument(format!("duplicate id `{}`", w[0])));
    }
    let n = sorted.len();
    if let SplitKind::Kfold(k) = kind {
        if k == 0 || k > n {
            return Err(DataError::TooFewIds { k, n });
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut roles = vec![Role::Train; n];
    match kind {
        SplitKind::Table1 => {
            let held = n / 10;
            let n_train = n - 2 * held;
            for (pos, &i) in order.iter().enumerate() {
                roles[i] = if pos < n_train {
                    Role::Train
                } else if pos < n_train + held {
                    Role::Val
                } else {
                    Role::Test
                };
            }
        }
        SplitKind::Kfold(k) => {
            for (pos, &i) in order.iter().enumerate() {
                roles[i] = Role::Fold(pos % k);
            }
        }
    }
    Ok(SplitPlan {
        seed,
        assignments: sorted.into_iter().zip(roles).collect(),
    })
}

impl SplitPlan {
    pub fn ids(&self, role: Role) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, r)| *r == role)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn count(&self, role: Role) -> usize {
        self.assignments.iter().filter(|(_, r)| *r == role).count()
    }

    pub fn role_of(&self, id: &str) -> Option<Role> {
        self.assignments
            .binary_search_by(|(i, _)| i.as_str().cmp(id))
            .ok()
            .map(|k| self.assignments[k].1)
    }

    /// Number of folds, or 0 for a train/val/test plan.
    pub fn fold_count(&self) -> usize {
        self.assignments
            .iter()
            .filter_map(|(_, r)| match r {
                Role::Fold(k) => Some(k + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// `# seed <seed>` followed by one `id<TAB>role` line per sample.
    pub fn to_text(&self) -> String {
        let mut s = format!("# seed {}\n", self.seed);
        for (id, role) in &self.assignments {
            s.push_str(&format!("{id}\t{role}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut seed = 0;
        let mut assignments = Vec::new();
        let mut seen = BTreeSet::new();
        for (k, line) in text.lines().enumerate() {
            let line_no = k + 1;
            let err = |msg: String| DataError::SplitFile { line: line_no, msg };
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("seed") {
                    seed = v.trim().parse().map_err(|_| err(format!("bad seed `{}`", v.trim())))?;
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (id, role) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `id<TAB>role`".into()))?;
            let role = role.trim().parse().map_err(err)?;
            if !seen.insert(id.to_string()) {
                return Err(err(format!("duplicate id `{id}`")));
            }
            assignments.push((id.to_string(), role));
        }
        assignments.sort();
        Ok(Self { seed, assignments })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| DataError::io(path, e))?)
    }
}
