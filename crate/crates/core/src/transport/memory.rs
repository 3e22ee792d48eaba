//! In-process backend: a map of blobs and an append-only message log behind
//! mutexes. The reference backend for simulated federations and tests.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::error::{Error, Result};

use super::{Backend, BlobKey, MessageFilter, SyncMessage};

#[derive(Default)]
pub struct InMemoryBackend {
    blobs: Mutex<HashMap<BlobKey, Vec<u8>>>,
    board: Mutex<Vec<SyncMessage>>,
}

impl Backend for InMemoryBackend {
    fn blob_put(&self, key: &BlobKey, bytes: &[u8]) -> Result<()> {
        self.blobs.lock().unwrap().insert(*key, bytes.to_vec());
        Ok(())
    }

    fn blob_get(&self, key: &BlobKey) -> Result<Vec<u8>> {
        self.blobs
            .lock()
            .unwrap()
            .get(key)
            .cloned()
            .ok_or_else(|| Error::BlobNotFound(key.to_string()))
    }

    fn board_post(&self, msg: &SyncMessage) -> Result<()> {
        let mut board = self.board.lock().unwrap();
        if !board.iter().any(|m| m.dedup_key() == msg.dedup_key()) {
            board.push(*msg);
        }
        Ok(())
    }

    fn board_poll(&self, filter: &MessageFilter) -> Result<Vec<SyncMessage>> {
        Ok(self
            .board
            .lock()
            .unwrap()
            .iter()
            .filter(|m| filter.matches(m))
            .copied()
            .collect())
    }
}
