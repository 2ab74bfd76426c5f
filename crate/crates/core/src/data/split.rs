use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stream_rng;

/// Users assigned to one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub fold_index: usize,
    pub train_users: Vec<String>,
    pub val_users: Vec<String>,
    pub test_users: Vec<String>,
}

impl UserSplit {
    /// Training plus validation users: the labeled source domain of the fold.
    pub fn source_users(&self) -> Vec<String> {
        let mut v = self.train_users.clone();
        v.extend(self.val_users.iter().cloned());
        v.sort();
        v
    }
}

/// Shuffles users once and deals them into `num_folds` test groups. The
/// remaining users of each fold are split 8:1 into train and validation,
/// taking validation users from the groups that follow the test group.
pub fn make_cross_user_splits(user_ids: &[String], num_folds: usize, seed: u64) -> Result<Vec<UserSplit>> {
    if num_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {num_folds}")));
    }
    let mut users = user_ids.to_vec();
    users.sort();
    users.dedup();
    if users.len() != user_ids.len() {
        return Err(Error::Config("duplicate user ids".into()));
    }
    if users.len() < num_folds {
        return Err(Error::Config(format!(
            "{} users cannot fill {num_folds} folds",
            users.len()
        )));
    }
    users.shuffle(&mut stream_rng(seed, "splits"));

    let n = users.len();
    let base = n / num_folds;
    let extra = n % num_folds;
    let mut bounds = Vec::with_capacity(num_folds + 1);
    bounds.push(0);
    for f in 0..num_folds {
        bounds.push(bounds[f] + base + usize::from(f < extra));
    }

    let mut out = Vec::with_capacity(num_folds);
    for f in 0..num_folds {
        let (lo, hi) = (bounds[f], bounds[f + 1]);
        let test: Vec<String> = users[lo..hi].to_vec();
        // remaining users in rotation order starting right after the test group
        let rest: Vec<String> = (0..n - test.len())
            .map(|i| users[(hi + i) % n].clone())
            .collect();
        // a lone remaining user trains; validation is then empty
        let n_val = match rest.len() {
            1 => 0,
            r => ((r as f64 / 9.0).round() as usize).clamp(1, r - 1),
        };
        let mut val = rest[..n_val].to_vec();
        let mut train = rest[n_val..].to_vec();
        let mut test = test;
        val.sort();
        train.sort();
        test.sort();
        out.push(UserSplit {
            fold_index: f,
            train_users: train,
            val_users: val,
            test_users: test,
        });
    }
    Ok(out)
}
