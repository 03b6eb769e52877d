//! Volume registry, session store and optional on-disk persistence.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use mois_core::banks::ExemplarBank;
use mois_core::inference::{ExemplarFeature, PostprocConfig, PreparedVolume, Session};
use mois_core::io::{load_volume, normalize_percentile, save_volume};
use mois_core::model::{Model, ModelError};
use mois_core::snapshot::{read_snapshot, write_snapshot};
use mois_core::volume::{Mask, Volume};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::error::{ApiError, StartupError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub id: String,
    pub volume_id: String,
    pub model_id: String,
    pub revision: u64,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarRow {
    pub lesion_id: usize,
    pub slice: usize,
    pub prompted: bool,
    pub recency_rank: usize,
}

pub fn exemplar_rows(bank: &ExemplarBank<ExemplarFeature>) -> Vec<ExemplarRow> {
    bank.entries()
        .iter()
        .map(|e| ExemplarRow {
            lesion_id: e.lesion,
            slice: e.slice,
            prompted: e.prompted,
            recency_rank: bank.recency_rank(e),
        })
        .collect()
}

/// Everything a read endpoint can return, captured at the last committed revision.
#[derive(Debug, Clone)]
pub struct CommittedView {
    pub revision: u64,
    pub lesions: Vec<Mask>,
    pub instance: Mask,
    pub semantic: Mask,
    pub final_mask: Mask,
    pub exemplar_capacity: usize,
    pub exemplars: Vec<ExemplarRow>,
}

impl CommittedView {
    fn capture(s: &Session, postproc: &PostprocConfig) -> Self {
        let e = s.volume().extents;
        Self {
            revision: s.revision(),
            lesions: s.lesions().iter().map(|l| l.mask.clone()).collect(),
            instance: s.instance_union(),
            semantic: s.semantic().map(|m| m.mask.clone()).unwrap_or_else(|| Mask::empty(e)),
            final_mask: s.final_mask(postproc).mask,
            exemplar_capacity: s.exemplars.capacity(),
            exemplars: exemplar_rows(&s.exemplars),
        }
    }
}

pub struct SessionEntry {
    pub handle: SessionHandle,
    /// Mutations queue on this lock.
    session: Arc<tokio::sync::Mutex<Session>>,
    view: RwLock<Arc<CommittedView>>,
    last_used: Mutex<Instant>,
}

impl SessionEntry {
    fn new(handle: SessionHandle, session: Session, postproc: &PostprocConfig) -> Self {
        let view = CommittedView::capture(&session, postproc);
        Self {
            handle,
            session: Arc::new(tokio::sync::Mutex::new(session)),
            view: RwLock::new(Arc::new(view)),
            last_used: Mutex::new(Instant::now()),
        }
    }

    pub fn view(&self) -> Arc<CommittedView> {
        self.touch();
        Arc::clone(&self.view.read().expect("view lock"))
    }

    pub fn handle(&self) -> SessionHandle {
        SessionHandle {
            revision: self.view().revision,
            ..self.handle.clone()
        }
    }

    fn touch(&self) {
        *self.last_used.lock().expect("clock lock") = Instant::now();
    }

    fn idle(&self) -> Duration {
        self.last_used.lock().expect("clock lock").elapsed()
    }
}

pub struct VolumeEntry {
    pub volume: Arc<Volume>,
    /// Percentile-windowed 8-bit copy for display.
    pub display: Vec<u8>,
    prepared: Mutex<Option<Arc<PreparedVolume>>>,
}

impl VolumeEntry {
    fn new(volume: Volume) -> Self {
        let display = normalize_percentile(&volume, 0.5, 99.5)
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        Self {
            volume: Arc::new(volume),
            display,
            prepared: Mutex::new(None),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SessionRecord {
    handle: SessionHandle,
}

pub struct AppState {
    pub config: ServiceConfig,
    model_id: String,
    model: Arc<Model>,
    volumes: RwLock<HashMap<String, Arc<VolumeEntry>>>,
    sessions: RwLock<HashMap<String, Arc<SessionEntry>>>,
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn new_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

impl AppState {
    pub fn new(config: ServiceConfig, model: Model) -> Self {
        Self {
            model_id: config.model_id.clone(),
            config,
            model: Arc::new(model),
            volumes: RwLock::new(HashMap::new()),
            sessions: RwLock::new(HashMap::new()),
        }
    }

    /// Loads the model named in the config and restores persisted state.
    pub fn from_config(config: ServiceConfig) -> Result<Self, StartupError> {
        let path = config.model_checkpoint.clone();
        let model = std::fs::File::open(&path)
            .map_err(|e| StartupError::Model {
                path: path.clone(),
                source: ModelError::Checkpoint(e.to_string()),
            })
            .and_then(|f| {
                Model::load(&mut std::io::BufReader::new(f)).map_err(|source| StartupError::Model { path, source })
            })?;
        let state = Self::new(config, model);
        state.restore()?;
        Ok(state)
    }

    fn dir(&self, sub: &str) -> Option<PathBuf> {
        self.config.persistence().map(|d| d.join(sub))
    }

    fn model(&self, id: &str) -> Result<Arc<Model>, ApiError> {
        if id == self.model_id {
            Ok(Arc::clone(&self.model))
        } else {
            Err(ApiError::NotFound(format!("model {id}")))
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn add_volume(&self, volume: Volume) -> Result<String, ApiError> {
        let id = new_id();
        if let Some(dir) = self.dir("volumes") {
            std::fs::create_dir_all(&dir).map_err(|e| ApiError::Internal(e.to_string()))?;
            save_volume(&volume, &dir.join(&id))?;
        }
        self.volumes
            .write()
            .expect("volume lock")
            .insert(id.clone(), Arc::new(VolumeEntry::new(volume)));
        Ok(id)
    }

    pub fn volume(&self, id: &str) -> Result<Arc<VolumeEntry>, ApiError> {
        self.volumes
            .read()
            .expect("volume lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("volume {id}")))
    }

    /// Slice embeddings are computed once per volume and shared by its sessions.
    fn prepared(&self, v: &VolumeEntry) -> Result<Arc<PreparedVolume>, ApiError> {
        let mut slot = v.prepared.lock().expect("prepared lock");
        if let Some(p) = slot.as_ref() {
            return Ok(Arc::clone(p));
        }
        let p = Arc::new(PreparedVolume::new(&self.model, Arc::clone(&v.volume))?);
        *slot = Some(Arc::clone(&p));
        Ok(p)
    }

    pub fn session(&self, id: &str) -> Result<Arc<SessionEntry>, ApiError> {
        self.sessions
            .read()
            .expect("session lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("session {id}")))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session lock").len()
    }

    /// Blocking: may encode every slice of the volume.
    pub fn create_session(&self, volume_id: &str, model_id: &str) -> Result<SessionHandle, ApiError> {
        let model = self.model(model_id)?;
        let v = self.volume(volume_id)?;
        self.expire();
        if self.session_count() >= self.config.max_sessions {
            return Err(ApiError::Unavailable(format!(
                "session limit of {} reached",
                self.config.max_sessions
            )));
        }
        let prepared = self.prepared(&v)?;
        let handle = SessionHandle {
            id: new_id(),
            volume_id: volume_id.to_string(),
            model_id: model_id.to_string(),
            revision: 0,
            created_at: now_secs(),
        };
        let session = Session::with_prepared(model, prepared);
        let entry = Arc::new(SessionEntry::new(handle.clone(), session, &self.config.postproc));
        self.persist_session(&entry, &entry.session.try_lock().expect("fresh session"))?;
        self.sessions
            .write()
            .expect("session lock")
            .insert(handle.id.clone(), entry);
        Ok(handle)
    }

    pub fn delete_session(&self, id: &str) -> Result<(), ApiError> {
        self.sessions
            .write()
            .expect("session lock")
            .remove(id)
            .ok_or_else(|| ApiError::NotFound(format!("session {id}")))?;
        self.forget_session(id);
        Ok(())
    }

    fn forget_session(&self, id: &str) {
        if let Some(dir) = self.dir("sessions") {
            let _ = std::fs::remove_file(dir.join(format!("{id}.snap")));
            let _ = std::fs::remove_file(dir.join(format!("{id}.json")));
        }
    }

    /// Drops sessions idle for longer than the configured TTL.
    pub fn expire(&self) -> usize {
        let ttl = Duration::from_secs(self.config.session_ttl_secs);
        let stale: Vec<String> = self
            .sessions
            .read()
            .expect("session lock")
            .iter()
            .filter(|(_, e)| e.idle() > ttl)
            .map(|(k, _)| k.clone())
            .collect();
        let mut map = self.sessions.write().expect("session lock");
        for id in &stale {
            map.remove(id);
        }
        drop(map);
        for id in &stale {
            self.forget_session(id);
        }
        stale.len()
    }

    /// Runs `f` on the session after every earlier mutation has finished.
    ///
    /// `expected` is the revision the client last saw; a mismatch is a conflict.
    /// The committed view is replaced only when `f` succeeds.
    pub async fn mutate<R, F>(self: &Arc<Self>, id: &str, expected: Option<u64>, f: F) -> Result<R, ApiError>
    where
        R: Send + 'static,
        F: FnOnce(&mut Session) -> Result<R, ApiError> + Send + 'static,
    {
        let entry = self.session(id)?;
        entry.touch();
        let mut guard = Arc::clone(&entry.session).lock_owned().await;
        let state = Arc::clone(self);
        tokio::task::spawn_blocking(move || {
            let current = guard.revision();
            if let Some(supplied) = expected.filter(|&r| r != current) {
                return Err(ApiError::Conflict { current, supplied });
            }
            let out = f(&mut guard)?;
            let view = CommittedView::capture(&guard, &state.config.postproc);
            *entry.view.write().expect("view lock") = Arc::new(view);
            state.persist_session(&entry, &guard)?;
            Ok(out)
        })
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
    }

    fn persist_session(&self, entry: &SessionEntry, session: &Session) -> Result<(), ApiError> {
        let Some(dir) = self.dir("sessions") else { return Ok(()) };
        let io = |e: std::io::Error| ApiError::Internal(e.to_string());
        std::fs::create_dir_all(&dir).map_err(io)?;
        let id = &entry.handle.id;
        let mut buf = Vec::new();
        write_snapshot(session, &mut buf)?;
        write_atomic(&dir.join(format!("{id}.snap")), &buf).map_err(io)?;
        let record = serde_json::to_vec_pretty(&SessionRecord {
            handle: entry.handle.clone(),
        })
        .map_err(|e| ApiError::Internal(e.to_string()))?;
        write_atomic(&dir.join(format!("{id}.json")), &record).map_err(io)
    }

    fn restore(&self) -> Result<(), StartupError> {
        let (Some(vdir), Some(sdir)) = (self.dir("volumes"), self.dir("sessions")) else {
            return Ok(());
        };
        let fail = |what: &Path, e: &dyn std::fmt::Display| StartupError::Restore(format!("{}: {e}", what.display()));
        if vdir.is_dir() {
            for f in std::fs::read_dir(&vdir)? {
                let path = f?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                let v = load_volume(&path).map_err(|e| fail(&path, &e))?;
                self.volumes
                    .write()
                    .expect("volume lock")
                    .insert(id, Arc::new(VolumeEntry::new(v)));
            }
        }
        if sdir.is_dir() {
            for f in std::fs::read_dir(&sdir)? {
                let path = f?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                let text = std::fs::read(&path)?;
                let record: SessionRecord = serde_json::from_slice(&text).map_err(|e| fail(&path, &e))?;
                let model = self.model(&record.handle.model_id).map_err(|e| fail(&path, &e))?;
                let v = self.volume(&record.handle.volume_id).map_err(|e| fail(&path, &e))?;
                let prepared = self.prepared(&v).map_err(|e| fail(&path, &e))?;
                let snap = path.with_extension("snap");
                let bytes = std::fs::read(&snap)?;
                let session = read_snapshot(model, prepared, &mut bytes.as_slice()).map_err(|e| fail(&snap, &e))?;
                let entry = SessionEntry::new(record.handle.clone(), session, &self.config.postproc);
                self.sessions
                    .write()
                    .expect("session lock")
                    .insert(record.handle.id, Arc::new(entry));
            }
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}
