use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Manifest, ManifestError};

/// Where an image sits in the split scheme. Fold indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Holdout,
    Train(usize),
    Val(usize),
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Holdout => f.write_str("holdout"),
            Role::Train(k) => write!(f, "train_{k}"),
            Role::Val(k) => write!(f, "val_{k}"),
        }
    }
}

impl FromStr for Role {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ManifestError::UnknownRole(s.to_string());
        if s == "holdout" {
            return Ok(Role::Holdout);
        }
        let (kind, k) = s.split_once('_').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match kind {
            "train" => Ok(Role::Train(k)),
            "val" => Ok(Role::Val(k)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitParams {
    pub seed: u64,
    pub holdout_frac: f64,
    pub n_folds: usize,
    pub val_frac: f64,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            seed: 0,
            holdout_frac: 0.10,
            n_folds: 5,
            val_frac: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Fold {
    train: Vec<String>,
    val: Vec<String>,
}

/// Holdout set plus `n_folds` independent train/validation partitions of
/// the remaining pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    seed: u64,
    holdout: Vec<String>,
    folds: Vec<Fold>,
    achieved_holdout_frac: f64,
}

pub fn make_splits(m: &Manifest, params: SplitParams) -> Result<Splits, ManifestError> {
    let SplitParams {
        seed,
        holdout_frac,
        n_folds,
        val_frac,
    } = params;
    for (name, v) in [("holdout_frac", holdout_frac), ("val_frac", val_frac)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(ManifestError::BadParam(format!("{name}={v} must be in (0, 1)")));
        }
    }
    if n_folds == 0 {
        return Err(ManifestError::BadParam("n_folds must be at least 1".into()));
    }

    // groups in first-appearance order, members in manifest order
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
    for (i, r) in m.records().iter().enumerate() {
        let g = *index.entry(r.group_id.as_str()).or_insert_with(|| {
            groups.push((r.group_id.as_str(), Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(i);
    }

    let all: Vec<usize> = (0..groups.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (holdout_groups, pool_groups) = greedy_take(&groups, &all, holdout_frac, &mut rng, "holdout")?;

    let ids = |gs: &[usize]| -> Vec<String> {
        let mut idx: Vec<usize> = gs.iter().flat_map(|&g| groups[g].1.iter().copied()).collect();
        idx.sort_unstable();
        idx.into_iter().map(|i| m.records()[i].image_id.clone()).collect()
    };

    let mut folds = Vec::with_capacity(n_folds);
    for k in 1..=n_folds {
        let mut frng = ChaCha8Rng::seed_from_u64(seed);
        frng.set_stream(k as u64);
        let (val, train) = greedy_take(&groups, &pool_groups, val_frac, &mut frng, &format!("val_{k}"))?;
        folds.push(Fold {
            train: ids(&train),
            val: ids(&val),
        });
    }

    let holdout = ids(&holdout_groups);
    let achieved_holdout_frac = if m.is_empty() {
        0.0
    } else {
        holdout.len() as f64 / m.len() as f64
    };
    let mut s = Splits {
        seed,
        holdout,
        folds,
        achieved_holdout_frac,
    };
    s.canonicalize();
    Ok(s)
}

/// Shuffles `candidates` and takes whole groups until the image target is
/// reached. Returns (taken, rest), both in shuffled order.
fn greedy_take(
    groups: &[(&str, Vec<usize>)],
    candidates: &[usize],
    frac: f64,
    rng: &mut ChaCha8Rng,
    stage: &str,
) -> Result<(Vec<usize>, Vec<usize>), ManifestError> {
    let total: usize = candidates.iter().map(|&g| groups[g].1.len()).sum();
    if total == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let target = ((frac * total as f64).round() as usize).max(1);
    if let Some(&g) = candidates.iter().find(|&&g| groups[g].1.len() > target) {
        return Err(ManifestError::GroupTooLarge {
            group: groups[g].0.to_string(),
            size: groups[g].1.len(),
            target,
            stage: stage.to_string(),
        });
    }
    let mut order = candidates.to_vec();
    order.shuffle(rng);
    let mut taken = 0;
    let mut cut = 0;
    while taken < target && cut < order.len() {
        taken += groups[order[cut]].1.len();
        cut += 1;
    }
    let rest = order.split_off(cut);
    Ok((order, rest))
}

impl Splits {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_folds(&self) -> usize {
        self.folds.len()
    }

    pub fn achieved_holdout_frac(&self) -> f64 {
        self.achieved_holdout_frac
    }

    pub fn achieved_val_frac(&self, k: usize) -> Option<f64> {
        let f = self.folds.get(k.checked_sub(1)?)?;
        let pool = f.train.len() + f.val.len();
        Some(if pool == 0 { 0.0 } else { f.val.len() as f64 / pool as f64 })
    }

    pub fn holdout(&self) -> &[String] {
        &self.holdout
    }

    /// Pool images (everything outside the holdout), sorted by id.
    pub fn pool(&self) -> Vec<&str> {
        match self.folds.first() {
            None => Vec::new(),
            Some(f) => {
                let mut v: Vec<&str> = f.train.iter().chain(&f.val).map(String::as_str).collect();
                v.sort_unstable();
                v
            }
        }
    }

    pub fn members(&self, role: Role) -> Result<Vec<&str>, ManifestError> {
        let fold = |k: usize| {
            k.checked_sub(1)
                .and_then(|i| self.folds.get(i))
                .ok_or_else(|| ManifestError::UnknownRole(role.to_string()))
        };
        let v = match role {
            Role::Holdout => &self.holdout,
            Role::Train(k) => &fold(k)?.train,
            Role::Val(k) => &fold(k)?.val,
        };
        Ok(v.iter().map(String::as_str).collect())
    }

    /// Role of an image in fold `k`: `Holdout`, `Train(k)` or `Val(k)`.
    pub fn role_of(&self, image_id: &str, k: usize) -> Option<Role> {
        if self.holdout.iter().any(|id| id == image_id) {
            return Some(Role::Holdout);
        }
        let f = self.folds.get(k.checked_sub(1)?)?;
        if f.train.iter().any(|id| id == image_id) {
            Some(Role::Train(k))
        } else if f.val.iter().any(|id| id == image_id) {
            Some(Role::Val(k))
        } else {
            None
        }
    }

    /// Writes the `image_id,role` CSV preceded by `# key=value` comments.
    /// `extra` comments (e.g. a config hash) follow the standard ones.
    pub fn write<W: Write>(&self, mut w: W, extra: &[(&str, String)]) -> std::io::Result<()> {
        writeln!(w, "# seed={}", self.seed)?;
        writeln!(w, "# achieved_holdout_frac={}", self.achieved_holdout_frac)?;
        writeln!(w, "# n_folds={}", self.folds.len())?;
        for (k, v) in extra {
            writeln!(w, "# {k}={v}")?;
        }
        writeln!(w, "image_id,role")?;
        let mut rows: Vec<(&str, Role)> = self.holdout.iter().map(|id| (id.as_str(), Role::Holdout)).collect();
        for (i, f) in self.folds.iter().enumerate() {
            rows.extend(f.train.iter().map(|id| (id.as_str(), Role::Train(i + 1))));
            rows.extend(f.val.iter().map(|id| (id.as_str(), Role::Val(i + 1))));
        }
        rows.sort();
        for (id, role) in rows {
            writeln!(w, "{id},{role}")?;
        }
        Ok(())
    }

    pub fn write_file(&self, path: &Path, extra: &[(&str, String)]) -> Result<(), ManifestError> {
        let io = |source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w, extra).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, ManifestError> {
        let bad = |msg: String| ManifestError::SplitFormat(msg);
        let mut meta = BTreeMap::new();
        let mut holdout = Vec::new();
        let mut folds: BTreeMap<usize, Fold> = BTreeMap::new();
        let mut header_seen = false;
        for line in r.lines() {
            let line = line.map_err(|e| bad(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if let Some((k, v)) = c.trim().split_once('=') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            if !header_seen {
                if line != "image_id,role" {
                    return Err(bad(format!("expected header `image_id,role`, found `{line}`")));
                }
                header_seen = true;
                continue;
            }
            let (id, role) = line
                .split_once(',')
                .ok_or_else(|| bad(format!("malformed row `{line}`")))?;
            let empty = || Fold {
                train: Vec::new(),
                val: Vec::new(),
            };
            match role.parse::<Role>()? {
                Role::Holdout => holdout.push(id.to_string()),
                Role::Train(k) => folds.entry(k).or_insert_with(empty).train.push(id.to_string()),
                Role::Val(k) => folds.entry(k).or_insert_with(empty).val.push(id.to_string()),
            }
        }
        let seed = meta
            .get("seed")
            .ok_or_else(|| bad("missing `# seed=` line".into()))?
            .parse()
            .map_err(|_| bad("seed is not an integer".into()))?;
        let achieved_holdout_frac = meta
            .get("achieved_holdout_frac")
            .ok_or_else(|| bad("missing `# achieved_holdout_frac=` line".into()))?
            .parse()
            .map_err(|_| bad("achieved_holdout_frac is not a number".into()))?;
        if folds.keys().copied().ne(1..=folds.len()) {
            return Err(bad("fold indices are not contiguous from 1".into()));
        }
        let folds: Vec<Fold> = folds.into_values().collect();
        let mut s = Splits {
            seed,
            holdout,
            folds,
            achieved_holdout_frac,
        };
        s.canonicalize();
        Ok(s)
    }

    pub fn read_file(path: &Path) -> Result<Self, ManifestError> {
        let file = std::fs::File::open(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read(std::io::BufReader::new(file))
    }

    /// Lists are kept sorted by image id so that reloaded and freshly made
    /// splits compare equal.
    fn canonicalize(&mut self) {
        self.holdout.sort();
        for f in &mut self.folds {
            f.train.sort();
            f.val.sort();
        }
    }
}
