//! Episode storage with uniform segment sampling and a JSON-lines file format.
//!
//! The first line of a file is `{"format":"rpop-traj","version":1,"K":64}`; each
//! following line is one episode. Rewards are written as decimal strings in
//! shortest round-trip form so they load back bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world_model::{Block, TokenTrajectory};

pub const FORMAT_NAME: &str = "rpop-traj";
pub const FORMAT_VERSION: u32 = 1;
pub const FILE_EXTENSION: &str = ".traj.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub id: u64,
    pub blocks: TokenTrajectory,
    /// Seed of the generator that produced the episode, if known.
    pub seed: Option<u64>,
}

/// A segment drawn from the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub episode_id: u64,
    pub start: usize,
    pub blocks: TokenTrajectory,
}

/// Unbounded episode store. Episodes are validated before insertion, so a
/// failed append leaves the store untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStore {
    tokens_per_obs: usize,
    episodes: Vec<EpisodeRecord>,
    next_id: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(rename = "K")]
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct BlockLine {
    z: Vec<u32>,
    a: u32,
    r: String,
    d: u8,
}

#[derive(Serialize, Deserialize)]
struct EpisodeLine {
    id: u64,
    #[serde(rename = "K")]
    k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    blocks: Vec<BlockLine>,
}

impl TrajectoryStore {
    pub fn new(tokens_per_obs: usize) -> Self {
        Self { tokens_per_obs, episodes: Vec::new(), next_id: 0 }
    }

    pub fn tokens_per_obs(&self) -> usize {
        self.tokens_per_obs
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn episodes(&self) -> &[EpisodeRecord] {
        &self.episodes
    }

    fn validate(&self, blocks: &TokenTrajectory) -> Result<()> {
        if blocks.is_empty() {
            return Err(Error::InvalidEpisode("episode has no blocks".into()));
        }
        for (b, block) in blocks.blocks.iter().enumerate() {
            if block.obs.len() != self.tokens_per_obs {
                return Err(Error::InvalidEpisode(format!(
                    "block {b} has {} observation tokens, expected {}",
                    block.obs.len(),
                    self.tokens_per_obs
                )));
            }
            if !block.reward.is_finite() {
                return Err(Error::InvalidEpisode(format!("block {b} has a non-finite reward")));
            }
            if block.done && b + 1 != blocks.len() {
                return Err(Error::InvalidEpisode(format!("termination flag on block {b} before the end")));
            }
        }
        Ok(())
    }

    /// Stores an episode and returns its id; ids increase monotonically.
    pub fn append_episode(&mut self, blocks: TokenTrajectory, seed: Option<u64>) -> Result<u64> {
        self.validate(&blocks)?;
        let id = self.next_id;
        self.next_id += 1;
        self.episodes.push(EpisodeRecord { id, blocks, seed });
        Ok(id)
    }

    pub fn get(&self, id: u64) -> Result<&EpisodeRecord> {
        // ids are assigned in insertion order
        self.episodes
            .binary_search_by_key(&id, |e| e.id)
            .map(|i| &self.episodes[i])
            .map_err(|_| Error::UnknownEpisode(id))
    }

    /// Number of valid `(episode, start)` pairs for segments of `length` blocks.
    pub fn segment_count(&self, length: usize) -> usize {
        self.episodes
            .iter()
            .map(|e| (e.blocks.len() + 1).saturating_sub(length))
            .sum()
    }

    /// A segment of `length` blocks inside one episode, uniform over all valid
    /// `(episode, start)` pairs. Shorter episodes are never chosen.
    pub fn sample_segment<R: Rng + ?Sized>(&self, length: usize, rng: &mut R) -> Result<Segment> {
        if length == 0 {
            return Err(Error::InvalidArgument("segment length must be positive".into()));
        }
        let total = self.segment_count(length);
        if total == 0 {
            return Err(Error::NoEligibleSegment(length));
        }
        let mut pick = rng.random_range(0..total);
        for e in &self.episodes {
            let starts = (e.blocks.len() + 1).saturating_sub(length);
            if pick < starts {
                return Ok(Segment {
                    episode_id: e.id,
                    start: pick,
                    blocks: e.blocks.segment(pick, length)?,
                });
            }
            pick -= starts;
        }
        unreachable!("pick < total")
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header { format: FORMAT_NAME.into(), version: FORMAT_VERSION, k: self.tokens_per_obs };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for e in &self.episodes {
            let line = EpisodeLine {
                id: e.id,
                k: self.tokens_per_obs,
                seed: e.seed,
                blocks: e
                    .blocks
                    .blocks
                    .iter()
                    .map(|b| BlockLine {
                        z: b.obs.clone(),
                        a: b.action,
                        r: b.reward.to_string(),
                        d: b.done as u8,
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a whole file; nothing is returned unless every line is valid.
    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| Error::Format("empty trajectory file".into()))??;
        let header: Header = serde_json::from_str(&first)
            .map_err(|_| Error::Format("missing trajectory file header".into()))?;
        if header.format != FORMAT_NAME {
            return Err(Error::Format(format!("unexpected format '{}'", header.format)));
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", header.version)));
        }
        let mut s = TrajectoryStore::new(header.k);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ep: EpisodeLine = serde_json::from_str(&line)
                .map_err(|e| Error::Malformed(format!("line {}: {e}", n + 2)))?;
            if ep.k != s.tokens_per_obs {
                return Err(Error::Malformed(format!("line {}: K={} differs from K={}", n + 2, ep.k, s.tokens_per_obs)));
            }
            if s.episodes.last().is_some_and(|last| last.id >= ep.id) {
                return Err(Error::Malformed(format!("line {}: episode ids must increase", n + 2)));
            }
            let blocks = ep
                .blocks
                .into_iter()
                .map(|b| {
                    let reward: f64 = b
                        .r
                        .parse()
                        .map_err(|_| Error::Malformed(format!("line {}: bad reward '{}'", n + 2, b.r)))?;
                    if b.d > 1 {
                        return Err(Error::Malformed(format!("line {}: done flag {}", n + 2, b.d)));
                    }
                    Ok(Block { obs: b.z, action: b.a, reward, done: b.d == 1 })
                })
                .collect::<Result<Vec<_>>>()?;
            let blocks = TokenTrajectory::new(blocks);
            s.validate(&blocks).map_err(|e| Error::Malformed(format!("line {}: {e}", n + 2)))?;
            s.episodes.push(EpisodeRecord { id: ep.id, blocks, seed: ep.seed });
            s.next_id = ep.id + 1;
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode(len: usize, k: usize, tag: u32) -> TokenTrajectory {
        TokenTrajectory::new(
            (0..len)
                .map(|i| Block {
                    obs: vec![tag + i as u32; k],
                    action: i as u32 % 3,
                    reward: 0.1 * i as f64,
                    done: i + 1 == len,
                })
                .collect(),
        )
    }

    #[test]
    fn append_and_fetch() {
        let mut s = TrajectoryStore::new(2);
        let a = s.append_episode(episode(3, 2, 0), Some(9)).unwrap();
        let b = s.append_episode(episode(4, 2, 10), None).unwrap();
        assert!(b > a);
        assert_eq!(s.get(a).unwrap().blocks, episode(3, 2, 0));
        assert!(matches!(s.get(7), Err(Error::UnknownEpisode(7))));
        assert!(s.append_episode(episode(2, 3, 0), None).is_err());
        let mut early = episode(3, 2, 0);
        early.blocks[0].done = true;
        assert!(s.append_episode(early, None).is_err());
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn sampling_respects_episode_bounds() {
        let mut s = TrajectoryStore::new(1);
        s.append_episode(episode(2, 1, 0), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(s.sample_segment(3, &mut rng), Err(Error::NoEligibleSegment(3))));
        s.append_episode(episode(3, 1, 100), None).unwrap();
        for _ in 0..20 {
            let seg = s.sample_segment(3, &mut rng).unwrap();
            assert_eq!((seg.episode_id, seg.start), (1, 0));
        }
    }

    #[test]
    fn file_round_trip_and_header() {
        let mut s = TrajectoryStore::new(2);
        s.append_episode(episode(3, 2, 0), Some(1)).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"format\":\"rpop-traj\",\"version\":1,\"K\":2}\n"));
        assert_eq!(TrajectoryStore::read_from(buf.as_slice()).unwrap(), s);
        let bad = text.replacen("rpop-traj", "rpop-trax", 1);
        assert!(matches!(TrajectoryStore::read_from(bad.as_bytes()), Err(Error::Format(_))));
        let v2 = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(TrajectoryStore::read_from(v2.as_bytes()), Err(Error::Format(_))));
    }
}
