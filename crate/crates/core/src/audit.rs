//! Process-wide log of artifact reads, used to check which files a stage
//! touched. Off unless [`enable`] has been called.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    /// A pipeline stage started writing under this directory.
    Stage { out_dir: PathBuf, stage: String },
    Read(PathBuf),
}

static ENABLED: AtomicBool = AtomicBool::new(false);
static LOG: Mutex<Vec<Event>> = Mutex::new(Vec::new());

pub fn enable() {
    ENABLED.store(true, Ordering::SeqCst);
}

pub fn is_enabled() -> bool {
    ENABLED.load(Ordering::SeqCst)
}

fn push(event: Event) {
    if is_enabled() {
        LOG.lock().unwrap_or_else(|e| e.into_inner()).push(event);
    }
}

pub fn record_read(path: &Path) {
    if is_enabled() {
        push(Event::Read(path.to_path_buf()));
    }
}

pub fn record_stage(out_dir: &Path, stage: &str) {
    push(Event::Stage {
        out_dir: out_dir.to_path_buf(),
        stage: stage.to_string(),
    });
}

/// Events so far that concern `dir`, in order. Other runs in the same
/// process are filtered out.
pub fn events_under(dir: &Path) -> Vec<Event> {
    LOG.lock()
        .unwrap_or_else(|e| e.into_inner())
        .iter()
        .filter(|e| match e {
            Event::Stage { out_dir, .. } => out_dir.starts_with(dir),
            Event::Read(p) => p.starts_with(dir),
        })
        .cloned()
        .collect()
}
