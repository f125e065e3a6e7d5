//! Shared machinery handed to every pipeline stage.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::provider::ProviderRouter;
use crate::store::RunStore;
use crate::template::TemplateSet;

/// Everything a stage needs besides its own inputs: the record store, the
/// provider router, the template set, a concurrency budget for fanning out
/// tasks, and a cancellation flag checked between tasks so an interrupt
/// drains in-flight work instead of abandoning it.
#[derive(Clone)]
pub struct RunContext {
    pub store: Arc<RunStore>,
    pub provider: Arc<ProviderRouter>,
    pub templates: Arc<TemplateSet>,
    pub concurrency: usize,
    cancel: Arc<AtomicBool>,
}

impl RunContext {
    pub fn new(
        store: Arc<RunStore>,
        provider: Arc<ProviderRouter>,
        templates: Arc<TemplateSet>,
        concurrency: usize,
    ) -> Self {
        RunContext {
            store,
            provider,
            templates,
            concurrency: concurrency.max(1),
            cancel: Arc::new(AtomicBool::new(false)),
        }
    }

    /// Handle that interrupt listeners can trip.
    pub fn cancel_flag(&self) -> Arc<AtomicBool> {
        self.cancel.clone()
    }

    pub fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::Relaxed)
    }
}
