//! Raft-style consortium chain among edge servers: randomized-timeout leader
//! election, leader-only block creation and a SHA-256 hash-linked ledger
//! replicated to every live edge.
//!
//! Log replication and heartbeats beyond the election are not modelled; each
//! global round commits exactly one block.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::hieavg::Status;

pub type Digest = [u8; 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaftNode {
    pub id: usize,
    pub role: Role,
    pub term: u64,
    pub voted_for: Option<usize>,
}

impl RaftNode {
    pub fn new(id: usize) -> Self {
        Self {
            id,
            role: Role::Follower,
            term: 0,
            voted_for: None,
        }
    }

    fn observe_term(&mut self, term: u64) {
        if term > self.term {
            self.term = term;
            self.role = Role::Follower;
            self.voted_for = None;
        }
    }
}

/// Election timing in simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElectionConfig {
    pub timeout_min: f64,
    pub timeout_max: f64,
    /// One-way edge-to-edge message latency.
    pub message_latency: f64,
    /// Give up after this many terms without a winner.
    pub max_terms: u64,
}

impl Default for ElectionConfig {
    fn default() -> Self {
        Self {
            timeout_min: 0.15,
            timeout_max: 0.30,
            message_latency: 0.05,
            max_terms: 1000,
        }
    }
}

impl ElectionConfig {
    // negated comparisons so that NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_min > 0.0 && self.timeout_max > self.timeout_min) {
            return Err(Error::config("chain.election", "need 0 < timeout_min < timeout_max"));
        }
        if !(self.message_latency >= 0.0) {
            return Err(Error::config("chain.election.message_latency", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElectionOutcome {
    pub leader: usize,
    pub term: u64,
    /// Simulated seconds until every live node follows the leader.
    pub latency: f64,
    /// Terms started during this election.
    pub terms_started: u64,
    pub votes: usize,
    /// Every node that ever became leader, by term.
    pub leaders_by_term: BTreeMap<u64, Vec<usize>>,
}

pub fn quorum(n: usize) -> usize {
    n / 2 + 1
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Event {
    Timeout {
        node: usize,
        epoch: u64,
    },
    VoteRequest {
        from: usize,
        to: usize,
        term: u64,
    },
    VoteReply {
        from: usize,
        to: usize,
        term: u64,
        granted: bool,
    },
    Heartbeat {
        to: usize,
        term: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scheduled {
    at: f64,
    seq: u64,
    event: Event,
}

impl Eq for Scheduled {}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (time, sequence)
        other.at.total_cmp(&self.at).then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Queue {
    heap: BinaryHeap<Scheduled>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, at: f64, event: Event) {
        self.seq += 1;
        self.heap.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
    }
}

/// Runs one randomized-timeout election among the `live` nodes.
///
/// Quorum is a majority of all `nodes`; absent nodes neither vote nor
/// campaign. Deterministic in `seed`.
pub fn elect_leader(
    nodes: &mut [RaftNode],
    live: &BTreeSet<usize>,
    config: &ElectionConfig,
    seed: u64,
) -> Result<ElectionOutcome> {
    let total = nodes.len();
    let needed = quorum(total);
    if let Some(&bad) = live.iter().find(|&&i| i >= total) {
        return Err(Error::UnknownParticipant(crate::model::ParticipantId::edge(bad)));
    }
    if live.len() < needed {
        return Err(Error::ElectionFailure {
            live: live.len(),
            total,
            needed,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| rng.random_range(config.timeout_min..config.timeout_max);
    let lat = config.message_latency;
    let mut queue = Queue {
        heap: BinaryHeap::new(),
        seq: 0,
    };
    let mut epoch = vec![0u64; total];
    for &i in live {
        nodes[i].role = Role::Follower;
        queue.push(draw(&mut rng), Event::Timeout { node: i, epoch: 0 });
    }
    let start_term = live.iter().map(|&i| nodes[i].term).max().unwrap_or(0);
    let mut votes: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); total];
    let mut leaders_by_term: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut terms_started = 0u64;
    let mut winner: Option<(usize, u64, f64)> = None;
    let mut pending_heartbeats = 0usize;

    while let Some(Scheduled { at, event, .. }) = queue.heap.pop() {
        match event {
            Event::Timeout { node, epoch: e } => {
                if e != epoch[node] || nodes[node].role == Role::Leader || winner.is_some() {
                    continue;
                }
                terms_started += 1;
                if terms_started > config.max_terms {
                    return Err(Error::ElectionFailure {
                        live: live.len(),
                        total,
                        needed,
                    });
                }
                let n = &mut nodes[node];
                n.term += 1;
                n.role = Role::Candidate;
                n.voted_for = Some(node);
                let term = n.term;
                votes[node] = BTreeSet::from([node]);
                epoch[node] += 1;
                queue.push(
                    at + draw(&mut rng),
                    Event::Timeout {
                        node,
                        epoch: epoch[node],
                    },
                );
                if votes[node].len() >= needed {
                    nodes[node].role = Role::Leader;
                    leaders_by_term.entry(term).or_default().push(node);
                    winner = Some((node, term, at));
                    break;
                }
                for &peer in live.iter().filter(|&&p| p != node) {
                    queue.push(
                        at + lat,
                        Event::VoteRequest {
                            from: node,
                            to: peer,
                            term,
                        },
                    );
                }
            }
            Event::VoteRequest { from, to, term } => {
                let v = &mut nodes[to];
                v.observe_term(term);
                let granted = term == v.term && v.voted_for.is_none_or(|c| c == from);
                if granted {
                    v.voted_for = Some(from);
                    epoch[to] += 1;
                    if winner.is_none() {
                        queue.push(
                            at + draw(&mut rng),
                            Event::Timeout {
                                node: to,
                                epoch: epoch[to],
                            },
                        );
                    }
                }
                queue.push(
                    at + lat,
                    Event::VoteReply {
                        from: to,
                        to: from,
                        term,
                        granted,
                    },
                );
            }
            Event::VoteReply {
                from,
                to,
                term,
                granted,
            } => {
                let c = &mut nodes[to];
                c.observe_term(term);
                if !(granted && c.role == Role::Candidate && c.term == term) {
                    continue;
                }
                votes[to].insert(from);
                if votes[to].len() >= needed {
                    c.role = Role::Leader;
                    leaders_by_term.entry(term).or_default().push(to);
                    winner = Some((to, term, at));
                    epoch[to] += 1;
                    for &peer in live.iter().filter(|&&p| p != to) {
                        queue.push(at + lat, Event::Heartbeat { to: peer, term });
                        pending_heartbeats += 1;
                    }
                    if pending_heartbeats == 0 {
                        break;
                    }
                }
            }
            Event::Heartbeat { to, term } => {
                let f = &mut nodes[to];
                f.observe_term(term);
                if f.term == term {
                    f.role = Role::Follower;
                }
                epoch[to] += 1;
                pending_heartbeats -= 1;
                if pending_heartbeats == 0 {
                    let (leader, lterm, _) = winner.expect("heartbeats follow a win");
                    if nodes[leader].role == Role::Leader && nodes[leader].term == lterm {
                        break;
                    }
                }
            }
        }
    }

    let (leader, term, elected_at) = winner.ok_or(Error::ElectionFailure {
        live: live.len(),
        total,
        needed,
    })?;
    debug_assert!(term > start_term);
    let latency = if live.len() > 1 { elected_at + lat } else { elected_at };
    Ok(ElectionOutcome {
        leader,
        term,
        latency,
        terms_started,
        votes: votes[leader].len(),
        leaders_by_term,
    })
}

/// `L_bc = election + n * per_message + broadcast`.
pub fn consensus_latency(election: f64, submissions: usize, per_message: f64, broadcast: f64) -> f64 {
    election + submissions as f64 * per_message + broadcast
}

/// One edge model as recorded in a block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub edge: usize,
    pub status: Status,
    pub coefficient: f64,
    /// Submitted or estimated edge model; `None` when excluded.
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPayload {
    pub leader: usize,
    pub term: u64,
    pub edges: Vec<EdgeRecord>,
    pub global_model: Vec<f64>,
    pub mass: f64,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    put_u64(buf, vs.len() as u64);
    for v in vs {
        buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.u64().map(f64::from_bits)
    }

    fn f64s(&mut self) -> Option<Vec<f64>> {
        let n = usize::try_from(self.u64()?).ok()?;
        if n > self.bytes.len() / 8 {
            return None;
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

fn status_code(s: Status) -> u8 {
    match s {
        Status::Timely => 0,
        Status::Estimated => 1,
        Status::Excluded => 2,
    }
}

impl BlockPayload {
    /// Canonical length-prefixed little-endian encoding.
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        put_u64(&mut buf, self.leader as u64);
        put_u64(&mut buf, self.term);
        put_u64(&mut buf, self.edges.len() as u64);
        for e in &self.edges {
            put_u64(&mut buf, e.edge as u64);
            buf.push(status_code(e.status));
            buf.extend_from_slice(&e.coefficient.to_bits().to_le_bytes());
            match &e.weights {
                Some(w) => {
                    buf.push(1);
                    put_f64s(&mut buf, w);
                }
                None => buf.push(0),
            }
        }
        put_f64s(&mut buf, &self.global_model);
        buf.extend_from_slice(&self.mass.to_bits().to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let leader = usize::try_from(r.u64()?).ok()?;
        let term = r.u64()?;
        let n = usize::try_from(r.u64()?).ok()?;
        if n > bytes.len() {
            return None;
        }
        let mut edges = Vec::with_capacity(n);
        for _ in 0..n {
            let edge = usize::try_from(r.u64()?).ok()?;
            let status = match r.u8()? {
                0 => Status::Timely,
                1 => Status::Estimated,
                2 => Status::Excluded,
                _ => return None,
            };
            let coefficient = r.f64()?;
            let weights = match r.u8()? {
                0 => None,
                1 => Some(r.f64s()?),
                _ => return None,
            };
            edges.push(EdgeRecord {
                edge,
                status,
                coefficient,
                weights,
            });
        }
        let global_model = r.f64s()?;
        let mass = r.f64()?;
        (r.pos == bytes.len()).then_some(Self {
            leader,
            term,
            edges,
            global_model,
            mass,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub round: u64,
    pub prev_hash: Digest,
    /// Canonical payload bytes, see [`BlockPayload::encode`].
    pub payload: Vec<u8>,
    pub hash: Digest,
}

impl Block {
    pub fn compute_hash(height: u64, round: u64, prev_hash: &Digest, payload: &[u8]) -> Digest {
        let mut h = Sha256::new();
        h.update(b"bhfl-block-v1");
        h.update(height.to_le_bytes());
        h.update(round.to_le_bytes());
        h.update(prev_hash);
        h.update((payload.len() as u64).to_le_bytes());
        h.update(payload);
        h.finalize().into()
    }

    pub fn payload(&self) -> Option<BlockPayload> {
        BlockPayload::decode(&self.payload)
    }

    fn seal(height: u64, round: u64, prev_hash: Digest, payload: Vec<u8>) -> Self {
        let hash = Self::compute_hash(height, round, &prev_hash, &payload);
        Self {
            height,
            round,
            prev_hash,
            payload,
            hash,
        }
    }
}

/// Result of [`Ledger::verify_chain`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainCheck {
    Ok,
    BadHeight(u64),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    blocks: Vec<Block>,
}

#[derive(Serialize, Deserialize)]
struct BlockRecord {
    height: u64,
    round: u64,
    prev_hash: String,
    hash: String,
    payload: BlockPayload,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tip(&self) -> Option<&Block> {
        self.blocks.last()
    }

    pub fn tip_hash(&self) -> Digest {
        self.tip().map(|b| b.hash).unwrap_or([0; 32])
    }

    /// Test and audit access; mutating blocks breaks verification.
    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    fn push_payload(&mut self, round: u64, payload: &BlockPayload) -> &Block {
        let block = Block::seal(self.blocks.len() as u64, round, self.tip_hash(), payload.encode());
        self.blocks.push(block);
        self.blocks.last().expect("just pushed")
    }

    /// Recomputes every hash and link; reports the first inconsistent height.
    pub fn verify_chain(&self) -> ChainCheck {
        let mut prev = [0u8; 32];
        for (i, b) in self.blocks.iter().enumerate() {
            let recomputed = Block::compute_hash(b.height, b.round, &b.prev_hash, &b.payload);
            if b.height != i as u64 || b.prev_hash != prev || recomputed != b.hash {
                return ChainCheck::BadHeight(i as u64);
            }
            prev = b.hash;
        }
        ChainCheck::Ok
    }

    /// One JSON record per block with hex-encoded hashes and a structured payload.
    pub fn export<W: Write>(&self, mut out: W) -> Result<()> {
        for b in &self.blocks {
            let payload = b.payload().ok_or_else(|| Error::LedgerFormat {
                line: b.height as usize + 1,
                message: "payload does not decode".into(),
            })?;
            let rec = BlockRecord {
                height: b.height,
                round: b.round,
                prev_hash: hex::encode(b.prev_hash),
                hash: hex::encode(b.hash),
                payload,
            };
            serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Parses an export without verifying it; run [`Ledger::verify_chain`] afterwards.
    pub fn import<R: BufRead>(input: R) -> Result<Self> {
        let mut blocks = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::LedgerFormat { line: n + 1, message };
            let rec: BlockRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let digest = |s: &str| -> Result<Digest> {
                hex::decode(s)
                    .ok()
                    .and_then(|v| v.try_into().ok())
                    .ok_or_else(|| bad(format!("bad digest `{s}`")))
            };
            blocks.push(Block {
                height: rec.height,
                round: rec.round,
                prev_hash: digest(&rec.prev_hash)?,
                hash: digest(&rec.hash)?,
                payload: rec.payload.encode(),
            });
        }
        Ok(Self { blocks })
    }
}

/// Ledger replicas held by every edge server plus the current leadership.
#[derive(Debug, Clone)]
pub struct ChainNetwork {
    replicas: Vec<Ledger>,
    nodes: Vec<RaftNode>,
    leader: Option<(usize, u64)>,
}

impl ChainNetwork {
    pub fn new(n_edges: usize) -> Self {
        Self {
            replicas: vec![Ledger::new(); n_edges],
            nodes: (0..n_edges).map(RaftNode::new).collect(),
            leader: None,
        }
    }

    pub fn nodes(&self) -> &[RaftNode] {
        &self.nodes
    }

    pub fn leader(&self) -> Option<(usize, u64)> {
        self.leader
    }

    pub fn replica(&self, edge: usize) -> &Ledger {
        &self.replicas[edge]
    }

    pub fn elect(&mut self, live: &BTreeSet<usize>, config: &ElectionConfig, seed: u64) -> Result<ElectionOutcome> {
        let out = elect_leader(&mut self.nodes, live, config, seed)?;
        self.leader = Some((out.leader, out.term));
        Ok(out)
    }

    /// Leader-only block creation followed by broadcast to the `live` replicas.
    /// Returning replicas catch up on every block they missed.
    pub fn append_block(
        &mut self,
        caller: usize,
        term: u64,
        round: u64,
        payload: &BlockPayload,
        live: &BTreeSet<usize>,
    ) -> Result<Block> {
        match self.leader {
            Some((l, t)) if l == caller && t == term && self.nodes[l].role == Role::Leader => {}
            _ => return Err(Error::Authority { node: caller, term }),
        }
        self.sync(caller);
        let block = self.replicas[caller].push_payload(round, payload).clone();
        for &edge in live {
            self.sync(edge);
        }
        Ok(block)
    }

    /// Copies the blocks `edge` is missing from the longest replica.
    pub fn sync(&mut self, edge: usize) {
        let source = (0..self.replicas.len())
            .max_by_key(|&e| self.replicas[e].len())
            .expect("at least one edge");
        let have = self.replicas[edge].len();
        if source == edge || self.replicas[source].len() <= have {
            return;
        }
        let missing: Vec<Block> = self.replicas[source].blocks[have..].to_vec();
        self.replicas[edge].blocks.extend(missing);
    }

    pub fn tips_agree(&self, edges: &BTreeSet<usize>) -> bool {
        let mut tips = edges.iter().map(|&e| self.replicas[e].tip_hash());
        match tips.next() {
            Some(first) => tips.all(|t| t == first),
            None => true,
        }
    }

    /// Longest replica; every replica is a prefix of it.
    pub fn canonical(&self) -> &Ledger {
        self.replicas.iter().max_by_key(|l| l.len()).expect("at least one edge")
    }
}
