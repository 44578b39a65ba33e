//! Episodes, logged datasets and their text serialization.
//!
//! A dataset file starts with one metadata line
//!
//! ```text
//! #picmdp-dataset v1 seed=<u64> scm=<hex digest> nodes=<n> dims=<d>
//! ```
//!
//! followed by a CSV table with columns
//! `episode,step,state,action,next,reward,propensity,bins,raw,outcome`.
//! Bitmaps are hex (see [`Bitmap::to_hex`]); `bins` and `raw` are
//! `;`-separated. Each episode contributes one row per transition and a
//! closing row holding the final bitmap in `state`, the outcome tag, and empty
//! `action`, `next`, `reward`, `propensity` fields. Floats use Rust's
//! shortest round-trip formatting, so a written dataset reads back bit-exact.

use std::io::{BufRead, Write};

use crate::bitmap::Bitmap;
use crate::error::{Error, Result};
use crate::seed::{rng_for, SimRng};

use super::policy::{EpsilonTopological, Policy};
use super::{reward, Context, Scm, ViolationState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Success,
    HorizonExhausted,
    CascadeFailure,
}

impl Outcome {
    pub fn tag(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::HorizonExhausted => "horizon-exhausted",
            Outcome::CascadeFailure => "cascade-failure",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "success" => Ok(Outcome::Success),
            "horizon-exhausted" => Ok(Outcome::HorizonExhausted),
            "cascade-failure" => Ok(Outcome::CascadeFailure),
            _ => Err(Error::Parse(format!("unknown outcome '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub step: usize,
    pub state: Bitmap,
    pub action: usize,
    pub next: Bitmap,
    pub reward: f64,
    /// Probability the acting policy chose `action`; `None` for policies
    /// without an explicit action distribution.
    pub propensity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: usize,
    pub context: Context,
    pub initial: Bitmap,
    pub transitions: Vec<Transition>,
    pub outcome: Outcome,
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.transitions.len()
    }

    pub fn final_bitmap(&self) -> Bitmap {
        self.transitions.last().map(|t| t.next).unwrap_or(self.initial)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub scm_hash: String,
    pub num_nodes: usize,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.transitions.len()).sum()
    }

    /// Every transition with the context cell of its episode.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, &Transition)> + '_ {
        self.episodes
            .iter()
            .flat_map(|e| e.transitions.iter().map(move |t| (e.context.cell, t)))
    }

    pub fn subset(&self, ids: &[usize]) -> Dataset {
        Dataset {
            seed: self.seed,
            scm_hash: self.scm_hash.clone(),
            num_nodes: self.num_nodes,
            episodes: ids.iter().map(|&i| self.episodes[i].clone()).collect(),
        }
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        let dims = self.episodes.first().map(|e| e.context.raw.len()).unwrap_or(0);
        writeln!(
            out,
            "#picmdp-dataset v1 seed={} scm={} nodes={} dims={}",
            self.seed, self.scm_hash, self.num_nodes, dims
        )?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "episode", "step", "state", "action", "next", "reward", "propensity", "bins", "raw",
            "outcome",
        ])?;
        for e in &self.episodes {
            let bins = join(e.context.bins.iter());
            let raw = join(e.context.raw.iter());
            for t in &e.transitions {
                w.write_record([
                    e.id.to_string(),
                    t.step.to_string(),
                    t.state.to_hex(),
                    t.action.to_string(),
                    t.next.to_hex(),
                    t.reward.to_string(),
                    t.propensity.map(|p| p.to_string()).unwrap_or_default(),
                    bins.clone(),
                    raw.clone(),
                    String::new(),
                ])?;
            }
            w.write_record([
                e.id.to_string(),
                e.transitions.len().to_string(),
                e.final_bitmap().to_hex(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                bins.clone(),
                raw.clone(),
                e.outcome.tag().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dataset; `scm` supplies the context layout for cell indices.
    pub fn read<R: BufRead>(mut input: R, scm: &Scm) -> Result<Dataset> {
        let mut header = String::new();
        input.read_line(&mut header)?;
        let header = header.trim_end();
        let rest = header
            .strip_prefix("#picmdp-dataset v1 ")
            .ok_or_else(|| Error::Parse("missing dataset header line".into()))?;
        let mut seed = None;
        let mut scm_hash = None;
        let mut nodes = None;
        for kv in rest.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header field '{kv}'")))?;
            match k {
                "seed" => seed = Some(parse_num::<u64>(v)?),
                "scm" => scm_hash = Some(v.to_string()),
                "nodes" => nodes = Some(parse_num::<usize>(v)?),
                "dims" => {}
                _ => return Err(Error::Parse(format!("unknown header field '{k}'"))),
            }
        }
        let n = nodes.ok_or_else(|| Error::Parse("header lacks nodes".into()))?;
        let mut episodes: Vec<Episode> = Vec::new();
        let mut open: Option<Episode> = None;
        let mut rdr = csv::Reader::from_reader(input);
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 10 {
                return Err(Error::Parse(format!("expected 10 fields, got {}", rec.len())));
            }
            let id = parse_num::<usize>(&rec[0])?;
            let state = Bitmap::from_hex(n, &rec[2])?;
            if open.as_ref().map(|e| e.id) != Some(id) {
                if open.is_some() {
                    return Err(Error::Parse(format!("episode {id} starts before previous closed")));
                }
                let bins: Vec<usize> = split_nums(&rec[7])?;
                let raw: Vec<f64> = split_nums(&rec[8])?;
                let context = Context {
                    cell: scm.context_spec().cell_of(&bins),
                    bins,
                    raw,
                };
                open = Some(Episode {
                    id,
                    context,
                    initial: state,
                    transitions: Vec::new(),
                    outcome: Outcome::HorizonExhausted,
                });
            }
            let ep = open.as_mut().expect("episode open");
            if !rec[9].is_empty() {
                ep.outcome = Outcome::parse(&rec[9])?;
                episodes.push(open.take().expect("episode open"));
                continue;
            }
            let propensity = if rec[6].is_empty() {
                None
            } else {
                Some(parse_num::<f64>(&rec[6])?)
            };
            ep.transitions.push(Transition {
                step: parse_num(&rec[1])?,
                state,
                action: parse_num(&rec[3])?,
                next: Bitmap::from_hex(n, &rec[4])?,
                reward: parse_num(&rec[5])?,
                propensity,
            });
        }
        if open.is_some() {
            return Err(Error::Parse("last episode has no closing row".into()));
        }
        Ok(Dataset {
            seed: seed.ok_or_else(|| Error::Parse("header lacks seed".into()))?,
            scm_hash: scm_hash.ok_or_else(|| Error::Parse("header lacks scm".into()))?,
            num_nodes: n,
            episodes,
        })
    }
}

fn join<T: ToString>(it: impl Iterator<Item = T>) -> String {
    it.map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse::<T>()
        .map_err(|_| Error::Parse(format!("cannot parse '{s}'")))
}

fn split_nums<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(vec![]);
    }
    s.split(';').map(parse_num).collect()
}

/// Runs `policy` from `start` until success, cascade failure or `horizon`
/// steps. Environment and policy draw from separate streams.
pub fn rollout_from<P: Policy + ?Sized>(
    scm: &Scm,
    start: ViolationState,
    policy: &mut P,
    horizon: usize,
    env_rng: &mut SimRng,
    policy_rng: &mut SimRng,
    id: usize,
) -> Result<Episode> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    policy.reset(&start);
    let rule = scm.cascade();
    let initial = start.bitmap;
    let init_count = initial.count_ones();
    let mut transitions = Vec::new();
    let mut s = start;
    let mut outcome = Outcome::HorizonExhausted;
    let mut rising = 0usize;
    if initial.none() {
        outcome = Outcome::Success;
    } else {
        for _ in 0..horizon {
            let (a, propensity) = policy.choose(&s, policy_rng)?;
            if a >= s.bitmap.len() || !s.bitmap.get(a) {
                return Err(Error::ActionNotViolated(a));
            }
            let (next, r) = scm.step(&s, a, env_rng)?;
            policy.observe(&s, a, &next);
            let before = s.bitmap.count_ones();
            let after = next.bitmap.count_ones();
            transitions.push(Transition {
                step: s.step,
                state: s.bitmap,
                action: a,
                next: next.bitmap,
                reward: r,
                propensity,
            });
            s = next;
            if after == 0 {
                outcome = Outcome::Success;
                break;
            }
            rising = if after > before { rising + 1 } else { 0 };
            if rising >= rule.consecutive_increases
                || after as f64 > rule.growth_factor * init_count as f64
            {
                outcome = Outcome::CascadeFailure;
                break;
            }
        }
    }
    debug_assert!(transitions.iter().all(|t| t.reward == reward(&t.next)));
    Ok(Episode {
        id,
        context: s.context,
        initial,
        transitions,
        outcome,
    })
}

/// Samples an initial state and rolls out `policy`.
pub fn rollout_episode<P: Policy + ?Sized>(
    scm: &Scm,
    policy: &mut P,
    horizon: usize,
    env_rng: &mut SimRng,
    policy_rng: &mut SimRng,
    id: usize,
) -> Result<Episode> {
    let start = scm.sample_initial(env_rng);
    rollout_from(scm, start, policy, horizon, env_rng, policy_rng, id)
}

/// Logs `episodes` episodes under the ε-topological policy. Episode `i` uses
/// streams `("env", i)` and `("policy", i)` of `seed`.
pub fn generate_dataset(
    scm: &Scm,
    epsilon: f64,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must lie in (0, 1], got {epsilon}"
        )));
    }
    let mut policy = EpsilonTopological {
        graph: scm.graph(),
        epsilon,
    };
    generate_dataset_with(scm, &mut policy, episodes, horizon, seed)
}

pub fn generate_dataset_with<P: Policy + ?Sized>(
    scm: &Scm,
    policy: &mut P,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut out = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut env = rng_for(seed, "env", i as u64);
        let mut pol = rng_for(seed, "policy", i as u64);
        out.push(rollout_episode(scm, policy, horizon, &mut env, &mut pol, i)?);
    }
    Ok(Dataset {
        seed,
        scm_hash: scm.descriptor_hash(),
        num_nodes: scm.num_nodes(),
        episodes: out,
    })
}
