//! Logger that keeps warnings for the report instead of printing them.

use std::sync::Mutex;

use log::{Level, LevelFilter, Log, Metadata, Record};

static CAPTURED: Mutex<Vec<String>> = Mutex::new(Vec::new());

struct Capture;

impl Log for Capture {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= Level::Warn
    }

    fn log(&self, record: &Record) {
        if self.enabled(record.metadata()) {
            CAPTURED.lock().unwrap().push(record.args().to_string());
        }
    }

    fn flush(&self) {}
}

static LOGGER: Capture = Capture;

pub fn install() {
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(LevelFilter::Warn);
    }
}

/// Captured warnings, sorted and deduplicated so that parallel emission
/// order does not leak into reports.
pub fn drain() -> Vec<String> {
    let mut all = std::mem::take(&mut *CAPTURED.lock().unwrap());
    all.sort();
    all.dedup();
    all
}

pub fn push(message: impl Into<String>) {
    CAPTURED.lock().unwrap().push(message.into());
}
