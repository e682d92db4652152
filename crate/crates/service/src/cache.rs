//! Lazily computed attribution bundles, cached per (patient, class) in
//! memory and on disk under a directory named by the artifact digest.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use diag_core::cohort::DiagnosisLabel;
use diag_core::explain::AttributionBundle;
use sha2::{Digest, Sha256};
use tokio::sync::OnceCell;

use crate::pipeline::hex;

type Slot = Arc<OnceCell<Arc<AttributionBundle>>>;

pub struct AttributionCache {
    dir: PathBuf,
    slots: Mutex<HashMap<(String, DiagnosisLabel), Slot>>,
}

impl AttributionCache {
    /// `root/<digest>` holds this artifact set's bundles.
    pub fn new(root: PathBuf, digest: &str) -> Self {
        Self {
            dir: root.join(digest),
            slots: Mutex::new(HashMap::new()),
        }
    }

    fn file(&self, card_id: &str, class: DiagnosisLabel) -> PathBuf {
        let id = hex(&Sha256::digest(card_id.as_bytes()));
        self.dir
            .join(format!("{}-{}.json", &id[..24], class.code()))
    }

    /// Returns the cached bundle, reading it from disk or computing it with
    /// `compute` on a blocking thread. Concurrent callers for the same key
    /// wait for the first one.
    pub async fn get_or_compute<E, F>(
        &self,
        card_id: &str,
        class: DiagnosisLabel,
        compute: F,
    ) -> Result<Arc<AttributionBundle>, E>
    where
        F: FnOnce() -> Result<AttributionBundle, E> + Send + 'static,
        E: Send + 'static,
    {
        let slot = {
            let mut slots = self.slots.lock().expect("cache lock");
            slots
                .entry((card_id.to_string(), class))
                .or_default()
                .clone()
        };
        let path = self.file(card_id, class);
        slot.get_or_try_init(|| async move {
            let disk = path.clone();
            let cached = tokio::task::spawn_blocking(move || {
                fs::read(&disk)
                    .ok()
                    .and_then(|b| serde_json::from_slice::<AttributionBundle>(&b).ok())
            })
            .await
            .expect("cache read task");
            if let Some(b) = cached {
                return Ok(Arc::new(b));
            }
            let bundle = tokio::task::spawn_blocking(move || {
                let b = compute()?;
                // a failed cache write only costs a recomputation later
                if let Some(dir) = path.parent() {
                    let _ = fs::create_dir_all(dir);
                }
                let tmp = path.with_extension("tmp");
                if fs::write(&tmp, serde_json::to_vec(&b).expect("bundle serializes")).is_ok() {
                    let _ = fs::rename(&tmp, &path);
                }
                Ok(b)
            })
            .await
            .expect("attribution task")?;
            Ok(Arc::new(bundle))
        })
        .await
        .cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use diag_core::cohort::ModalityMask;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn bundle(id: &str) -> AttributionBundle {
        AttributionBundle {
            card_id: id.into(),
            target_class: DiagnosisLabel::Normal,
            mask: ModalityMask::ALL_PRESENT,
            indicator: None,
            text: None,
            image: None,
        }
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn first_caller_computes_others_wait() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(AttributionCache::new(dir.path().into(), "d"));
        let calls = Arc::new(AtomicUsize::new(0));
        let mut handles = Vec::new();
        for _ in 0..8 {
            let (cache, calls) = (cache.clone(), calls.clone());
            handles.push(tokio::spawn(async move {
                cache
                    .get_or_compute::<(), _>("P1", DiagnosisLabel::Normal, move || {
                        calls.fetch_add(1, Ordering::SeqCst);
                        std::thread::sleep(std::time::Duration::from_millis(50));
                        Ok(bundle("P1"))
                    })
                    .await
                    .unwrap()
            }));
        }
        for h in handles {
            assert_eq!(h.await.unwrap().card_id, "P1");
        }
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[tokio::test]
    async fn disk_copy_is_reused_across_instances() {
        let dir = tempfile::tempdir().unwrap();
        let a = AttributionCache::new(dir.path().into(), "d");
        a.get_or_compute::<(), _>("P1", DiagnosisLabel::Normal, || Ok(bundle("P1")))
            .await
            .unwrap();
        let b = AttributionCache::new(dir.path().into(), "d");
        let got = b
            .get_or_compute::<(), _>("P1", DiagnosisLabel::Normal, || {
                panic!("should read from disk")
            })
            .await
            .unwrap();
        assert_eq!(*got, bundle("P1"));
        // a different digest is a different artifact set
        let c = AttributionCache::new(dir.path().into(), "e");
        let err = c
            .get_or_compute("P1", DiagnosisLabel::Normal, || Err("recomputed"))
            .await
            .unwrap_err();
        assert_eq!(err, "recomputed");
    }
}
