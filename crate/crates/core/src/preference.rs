//! Preference dataset: pairs sampled from the behavior policy, labeled by the
//! gold reward, with the behavior log-densities stored alongside.
//!
//! File format (UTF-8, comma separated):
//!
//! ```text
//! # ocrm-dataset v1
//! # seed=7 snapshot=1f2e3d4c5b6a7988 action=vector rows=2
//! state,action_w,action_l,logp1_w,logp1_l,gold_w,gold_l
//! 0,0.1;-0.4,1.2;0.3,-1.9,-2.4,1.37,0.21
//! 0,...
//! ```
//!
//! Vector actions join their components with `;`; discrete actions are plain
//! indices. The `rows` count guards against truncated files.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::{ActionDistribution, Policy, PolicySnapshot};
use crate::tasks::Task;

pub const HEADER_MAGIC: &str = "# ocrm-dataset v1";
pub const COLUMNS: &str = "state,action_w,action_l,logp1_w,logp1_l,gold_w,gold_l";

/// Text encoding for actions in dataset files.
pub trait ActionCodec: Sized {
    const KIND: &'static str;
    fn encode(&self, out: &mut String);
    fn decode(raw: &str) -> std::result::Result<Self, String>;
}

impl ActionCodec for Vec<f64> {
    const KIND: &'static str = "vector";

    fn encode(&self, out: &mut String) {
        for (i, v) in self.iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            let _ = write!(out, "{v:?}");
        }
    }

    fn decode(raw: &str) -> std::result::Result<Self, String> {
        raw.split(';')
            .map(|p| p.parse::<f64>().map_err(|e| format!("bad action component `{p}`: {e}")))
            .collect()
    }
}

impl ActionCodec for usize {
    const KIND: &'static str = "discrete";

    fn encode(&self, out: &mut String) {
        let _ = write!(out, "{self}");
    }

    fn decode(raw: &str) -> std::result::Result<Self, String> {
        raw.parse().map_err(|e| format!("bad action index `{raw}`: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair<A> {
    pub state: usize,
    pub action_w: A,
    pub action_l: A,
    /// `log pi^1(action_w | state)` recorded at generation time.
    pub logp1_w: f64,
    pub logp1_l: f64,
    pub gold_w: f64,
    pub gold_l: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset<A> {
    pub pairs: Vec<PreferencePair<A>>,
    pub snapshot_id: String,
    pub seed: u64,
}

impl<A> PreferenceDataset<A> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Samples `n_pairs` labeled pairs from `sft`. Pairs whose gold rewards tie
/// are redrawn so every row satisfies `gold_w > gold_l`.
pub fn generate_dataset<T, P, R>(
    sft: &PolicySnapshot<P>,
    task: &T,
    n_pairs: usize,
    seed: u64,
    rng: &mut R,
) -> Result<PreferenceDataset<T::Action>>
where
    T: Task,
    P: Policy<Action = T::Action>,
    R: Rng + ?Sized,
{
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be positive"));
    }
    let max_attempts = 1000usize.saturating_mul(n_pairs).max(10_000);
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut attempts = 0;
    let features: Vec<Vec<f64>> = (0..task.n_states()).map(|s| task.state_features(s)).collect();
    let dists = features
        .iter()
        .map(|f| sft.distribution(f))
        .collect::<Result<Vec<_>>>()?;
    while pairs.len() < n_pairs {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::invalid(format!(
                "gave up after {max_attempts} draws: the policy keeps producing tied pairs"
            )));
        }
        let s = task.sample_state(rng);
        let dist = &dists[s];
        let a0 = dist.sample(rng);
        let a1 = dist.sample(rng);
        let g0 = task.gold_reward(s, &a0)?;
        let g1 = task.gold_reward(s, &a1)?;
        if g0 == g1 {
            continue;
        }
        let lp0 = dist.log_prob(&a0);
        let lp1 = dist.log_prob(&a1);
        let pair = if g0 > g1 {
            PreferencePair {
                state: s,
                action_w: a0,
                action_l: a1,
                logp1_w: lp0,
                logp1_l: lp1,
                gold_w: g0,
                gold_l: g1,
            }
        } else {
            PreferencePair {
                state: s,
                action_w: a1,
                action_l: a0,
                logp1_w: lp1,
                logp1_l: lp0,
                gold_w: g1,
                gold_l: g0,
            }
        };
        pairs.push(pair);
    }
    Ok(PreferenceDataset {
        pairs,
        snapshot_id: sft.id().to_string(),
        seed,
    })
}

impl<A: ActionCodec> PreferenceDataset<A> {
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(64 * self.pairs.len() + 128);
        let _ = writeln!(out, "{HEADER_MAGIC}");
        let _ = writeln!(
            out,
            "# seed={} snapshot={} action={} rows={}",
            self.seed,
            self.snapshot_id,
            A::KIND,
            self.pairs.len()
        );
        let _ = writeln!(out, "{COLUMNS}");
        for p in &self.pairs {
            let _ = write!(out, "{},", p.state);
            p.action_w.encode(&mut out);
            out.push(',');
            p.action_l.encode(&mut out);
            let _ = writeln!(
                out,
                ",{:?},{:?},{:?},{:?}",
                p.logp1_w, p.logp1_l, p.gold_w, p.gold_l
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse { line, message };
        match lines.next() {
            Some((_, l)) if l.trim() == HEADER_MAGIC => {}
            _ => return Err(parse_err(1, format!("expected `{HEADER_MAGIC}`"))),
        }
        let (_, meta) = lines.next().ok_or_else(|| parse_err(2, "missing metadata line".into()))?;
        let meta = meta
            .strip_prefix('#')
            .ok_or_else(|| parse_err(2, "metadata line must start with `#`".into()))?;
        let (mut seed, mut snapshot, mut kind, mut rows) = (None, None, None, None);
        for field in meta.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| parse_err(2, format!("malformed metadata field `{field}`")))?;
            match k {
                "seed" => seed = Some(v.parse::<u64>().map_err(|e| parse_err(2, format!("seed: {e}")))?),
                "snapshot" => snapshot = Some(v.to_string()),
                "action" => kind = Some(v.to_string()),
                "rows" => rows = Some(v.parse::<usize>().map_err(|e| parse_err(2, format!("rows: {e}")))?),
                other => return Err(parse_err(2, format!("unknown metadata key `{other}`"))),
            }
        }
        let missing = |k: &str| parse_err(2, format!("metadata is missing `{k}`"));
        let seed = seed.ok_or_else(|| missing("seed"))?;
        let snapshot_id = snapshot.ok_or_else(|| missing("snapshot"))?;
        let kind = kind.ok_or_else(|| missing("action"))?;
        let rows = rows.ok_or_else(|| missing("rows"))?;
        if kind != A::KIND {
            return Err(parse_err(2, format!("dataset holds `{kind}` actions, expected `{}`", A::KIND)));
        }
        match lines.next() {
            Some((_, l)) if l.trim() == COLUMNS => {}
            _ => return Err(parse_err(3, format!("expected column header `{COLUMNS}`"))),
        }
        let mut pairs = Vec::with_capacity(rows);
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 7 {
                return Err(parse_err(line_no, format!("expected 7 columns, found {}", cols.len())));
            }
            let num = |j: usize| -> Result<f64> {
                cols[j]
                    .parse::<f64>()
                    .map_err(|e| parse_err(line_no, format!("column {j}: {e}")))
            };
            let pair = PreferencePair {
                state: cols[0]
                    .parse()
                    .map_err(|e| parse_err(line_no, format!("state: {e}")))?,
                action_w: A::decode(cols[1]).map_err(|e| parse_err(line_no, e))?,
                action_l: A::decode(cols[2]).map_err(|e| parse_err(line_no, e))?,
                logp1_w: num(3)?,
                logp1_l: num(4)?,
                gold_w: num(5)?,
                gold_l: num(6)?,
            };
            if !(pair.logp1_w.is_finite() && pair.logp1_l.is_finite()) {
                return Err(parse_err(line_no, "behavior log-densities must be finite".into()));
            }
            if pair.gold_w <= pair.gold_l {
                return Err(parse_err(line_no, "winner gold reward must exceed loser".into()));
            }
            pairs.push(pair);
        }
        if pairs.len() != rows {
            return Err(parse_err(
                text.lines().count(),
                format!("header declares {rows} rows but {} were found", pairs.len()),
            ));
        }
        Ok(PreferenceDataset {
            pairs,
            snapshot_id,
            seed,
        })
    }
}

pub fn save_dataset<A: ActionCodec>(ds: &PreferenceDataset<A>, path: &Path) -> Result<()> {
    std::fs::write(path, ds.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset<A: ActionCodec>(path: &Path) -> Result<PreferenceDataset<A>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PreferenceDataset::from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{CategoricalPolicy, GaussianPolicy};
    use crate::tasks::{make_discrete_task, ContinuousTask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sft() -> PolicySnapshot<GaussianPolicy> {
        PolicySnapshot::new(&GaussianPolicy::direct(vec![0.0, 0.0], vec![0.5 * 0.7f64.ln(); 2]).unwrap())
    }

    #[test]
    fn rows_are_ordered_and_densities_consistent() {
        let snap = sft();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = generate_dataset(&snap, &ContinuousTask, 2000, 1, &mut rng).unwrap();
        assert_eq!(ds.len(), 2000);
        assert_eq!(ds.snapshot_id, snap.id());
        for p in &ds.pairs {
            assert!(p.gold_w > p.gold_l);
            assert_eq!(p.logp1_w, snap.log_prob(&[1.0], &p.action_w).unwrap());
            assert_eq!(p.logp1_l, snap.log_prob(&[1.0], &p.action_l).unwrap());
            assert_eq!(p.gold_w, ContinuousTask.gold_reward(0, &p.action_w).unwrap());
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let snap = sft();
        let a = generate_dataset(&snap, &ContinuousTask, 100, 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = generate_dataset(&snap, &ContinuousTask, 100, 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ties_are_redrawn_for_peaked_policies() {
        let task = make_discrete_task(2, 2, 8, 2).unwrap();
        // Nearly deterministic policy: most draws pick the same action twice.
        let mut logits = vec![vec![0.0; 8]; 2];
        logits[0][3] = 6.0;
        logits[1][5] = 6.0;
        let snap = PolicySnapshot::new(&CategoricalPolicy::from_logits(&logits).unwrap());
        let ds = generate_dataset(&snap, &task, 300, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(ds.pairs.iter().all(|p| p.action_w != p.action_l && p.gold_w > p.gold_l));
    }

    #[test]
    fn point_mass_policy_gives_up() {
        let task = make_discrete_task(2, 1, 8, 2).unwrap();
        let mut logits = vec![vec![-1e4; 8]];
        logits[0][0] = 0.0;
        let snap = PolicySnapshot::new(&CategoricalPolicy::from_logits(&logits).unwrap());
        assert!(generate_dataset(&snap, &task, 1, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn zero_pairs_rejected() {
        assert!(generate_dataset(&sft(), &ContinuousTask, 0, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn round_trip_and_truncation() {
        let snap = sft();
        let ds = generate_dataset(&snap, &ContinuousTask, 50, 9, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let text = ds.to_text();
        assert_eq!(PreferenceDataset::<Vec<f64>>::from_text(&text).unwrap(), ds);

        let truncated: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            PreferenceDataset::<Vec<f64>>::from_text(&truncated),
            Err(Error::Parse { .. })
        ));
        // A row cut mid-way names its line.
        let mut lines: Vec<&str> = text.lines().collect();
        let damaged = lines[10].split(',').take(4).collect::<Vec<_>>().join(",");
        lines[10] = &damaged;
        match PreferenceDataset::<Vec<f64>>::from_text(&lines.join("\n")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 11),
            other => panic!("unexpected {other:?}"),
        }
        assert!(PreferenceDataset::<usize>::from_text(&text).is_err());
    }

    #[test]
    fn discrete_round_trip() {
        let task = make_discrete_task(4, 3, 10, 3).unwrap();
        let snap = PolicySnapshot::new(&CategoricalPolicy::uniform(3, 10).unwrap());
        let ds = generate_dataset(&snap, &task, 40, 4, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(PreferenceDataset::<usize>::from_text(&ds.to_text()).unwrap(), ds);
    }
}
