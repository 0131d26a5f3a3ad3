//! Point-to-point messaging contract and the collectives built on it.
//!
//! A [`Communicator`] is one worker's endpoint. `send` is buffered and never
//! blocks; `recv` blocks until the matching `(src, tag)` message is available,
//! and messages with the same `(src, tag)` arrive in FIFO order. Because send
//! returns immediately, a worker can post a send, run local compute and then
//! wait on a receive, which keeps one send, one receive and one kernel in
//! flight at the same time.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Tag = u64;

/// Tags at or above this value are reserved for collectives.
pub const COLLECTIVE_TAG_BASE: Tag = 1 << 48;

/// Row-range metadata carried by rotated blocks. Framing only: not counted
/// as payload bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMeta {
    pub owner: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Message {
    pub meta: Option<BlockMeta>,
    pub tensors: Vec<Tensor>,
}

impl Message {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { meta: None, tensors }
    }

    pub fn with_meta(meta: BlockMeta, tensors: Vec<Tensor>) -> Self {
        Self { meta: Some(meta), tensors }
    }

    /// Σ element count × dtype size over the carried tensors.
    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(Tensor::byte_size).sum()
    }
}

pub trait Communicator {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    fn send(&mut self, dst: usize, tag: Tag, msg: Message) -> Result<()>;
    fn recv(&mut self, src: usize, tag: Tag) -> Result<Message>;
    /// Tag for the next collective call. Workers must enter collectives in
    /// the same order so their counters stay aligned.
    fn next_collective_tag(&mut self) -> Tag;

    fn successor(&self) -> usize {
        (self.rank() + 1) % self.size()
    }

    fn predecessor(&self) -> usize {
        (self.rank() + self.size() - 1) % self.size()
    }
}

/// A ring shift whose send is already posted; [`PendingShift::finish`] waits
/// for the predecessor's message.
#[must_use]
#[derive(Debug)]
pub struct PendingShift {
    src: usize,
    tag: Tag,
}

impl PendingShift {
    pub fn finish<C: Communicator + ?Sized>(self, comm: &mut C) -> Result<Message> {
        comm.recv(self.src, self.tag)
    }
}

/// Posts `msg` to the successor and returns a handle for the matching receive.
pub fn ring_start<C: Communicator + ?Sized>(comm: &mut C, msg: Message) -> Result<PendingShift> {
    let tag = comm.next_collective_tag();
    let dst = comm.successor();
    comm.send(dst, tag, msg)?;
    Ok(PendingShift { src: comm.predecessor(), tag })
}

/// Worker `i` receives the message of worker `(i - 1) mod n`.
pub fn ring_shift<C: Communicator + ?Sized>(comm: &mut C, msg: Message) -> Result<Message> {
    ring_start(comm, msg)?.finish(comm)
}

/// Worker `i` sends `chunks[k]` to worker `k` and returns the chunks
/// addressed to it, ordered by source. The self chunk never touches the
/// transport.
pub fn all_to_all<C: Communicator + ?Sized>(comm: &mut C, chunks: Vec<Message>) -> Result<Vec<Message>> {
    let n = comm.size();
    if chunks.len() != n {
        return Err(Error::ChunkCount { expected: n, got: chunks.len() });
    }
    let tag = comm.next_collective_tag();
    let me = comm.rank();
    let mut own = None;
    for (dst, chunk) in chunks.into_iter().enumerate() {
        if dst == me {
            own = Some(chunk);
        } else {
            comm.send(dst, tag, chunk)?;
        }
    }
    let mut own = own;
    (0..n)
        .map(|src| if src == me { Ok(own.take().expect("self chunk")) } else { comm.recv(src, tag) })
        .collect()
}

/// Single-worker communicator: every message loops back to worker 0.
#[derive(Debug, Default)]
pub struct SoloComm {
    queues: BTreeMap<Tag, VecDeque<Message>>,
    next_tag: Tag,
}

impl SoloComm {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Communicator for SoloComm {
    fn rank(&self) -> usize {
        0
    }

    fn size(&self) -> usize {
        1
    }

    fn send(&mut self, dst: usize, tag: Tag, msg: Message) -> Result<()> {
        if dst != 0 {
            return Err(Error::NoSuchWorker(dst));
        }
        self.queues.entry(tag).or_default().push_back(msg);
        Ok(())
    }

    fn recv(&mut self, src: usize, tag: Tag) -> Result<Message> {
        if src != 0 {
            return Err(Error::NoSuchWorker(src));
        }
        self.queues
            .get_mut(&tag)
            .and_then(VecDeque::pop_front)
            .ok_or(Error::Timeout { src, tag })
    }

    fn next_collective_tag(&mut self) -> Tag {
        let t = COLLECTIVE_TAG_BASE + self.next_tag;
        self.next_tag += 1;
        t
    }
}
