//! Filesystem backend: one file per blob key under `<root>/blobs/`, the
//! board as an append-only file of fixed-width records. Good enough for
//! multiple processes on one host sharing a directory; writers go through
//! a write-then-rename so readers never see a partial blob.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::wire::{decode_message, encode_message, MESSAGE_WIRE_BYTES};
use super::{Backend, BlobKey, MessageFilter, SyncMessage};

pub struct FilesystemBackend {
    blob_dir: PathBuf,
    board_file: PathBuf,
}

impl FilesystemBackend {
    pub fn new<P: AsRef<Path>>(root: P) -> Result<FilesystemBackend> {
        let root = root.as_ref();
        let blob_dir = root.join("blobs");
        fs::create_dir_all(&blob_dir)?;
        let board_file = root.join("board.log");
        if !board_file.exists() {
            File::create(&board_file)?;
        }
        Ok(FilesystemBackend {
            blob_dir,
            board_file,
        })
    }

    fn blob_path(&self, key: &BlobKey) -> PathBuf {
        self.blob_dir.join(format!("{key}.bin"))
    }

    fn read_board(&self) -> Result<Vec<SyncMessage>> {
        let mut bytes = Vec::new();
        File::open(&self.board_file)?.read_to_end(&mut bytes)?;
        bytes
            .chunks_exact(MESSAGE_WIRE_BYTES as usize)
            .map(decode_message)
            .collect()
    }
}

impl Backend for FilesystemBackend {
    fn blob_put(&self, key: &BlobKey, bytes: &[u8]) -> Result<()> {
        let path = self.blob_path(key);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn blob_get(&self, key: &BlobKey) -> Result<Vec<u8>> {
        match fs::read(self.blob_path(key)) {
            Ok(bytes) => Ok(bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(Error::BlobNotFound(key.to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn board_post(&self, msg: &SyncMessage) -> Result<()> {
        let existing = self.read_board()?;
        if existing.iter().any(|m| m.dedup_key() == msg.dedup_key()) {
            return Ok(());
        }
        let mut file = OpenOptions::new().append(true).open(&self.board_file)?;
        file.write_all(&encode_message(msg))?;
        file.flush()?;
        Ok(())
    }

    fn board_poll(&self, filter: &MessageFilter) -> Result<Vec<SyncMessage>> {
        Ok(self
            .read_board()?
            .into_iter()
            .filter(|m| filter.matches(m))
            .collect())
    }
}
