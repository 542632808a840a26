//! Hash-addressed static content bundles, the sound catalog, the education
//! chapter graph, and verified asset fetching.
//!
//! Static media (HTML chapters, images, audio, the about page) lives in
//! immutable bundles whose files are stored by SHA-256. Questionnaires and
//! quizzes are never bundled; they travel through the API as artifacts.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::activity::{ActionPayload, InterventionAction};
use crate::canonical::Digest;
use crate::study::{Module, StudyArm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    TineduChapter,
    SoundAsset,
    AboutPage,
}

impl BundleKind {
    /// Module whose participants may download bundles of this kind.
    pub fn module(self) -> Module {
        match self {
            BundleKind::TineduChapter => Module::TinEdu,
            BundleKind::SoundAsset => Module::ShadesOfNoise,
            BundleKind::AboutPage => Module::AboutUs,
        }
    }

    pub fn visible_to(self, arm: StudyArm) -> bool {
        arm.has_module(self.module())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub size: u64,
    pub digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentBundle {
    pub id: String,
    pub kind: BundleKind,
    pub version: u32,
    /// Sorted by path.
    pub files: Vec<FileEntry>,
    pub digest: Digest,
}

impl ContentBundle {
    /// True when the stored bundle digest matches its entries.
    pub fn verify(&self) -> bool {
        bundle_digest(&self.files) == self.digest
    }

    pub fn entry(&self, path: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.path == path)
    }
}

/// SHA-256 over the file digests, sorted bytewise and concatenated.
pub fn bundle_digest(files: &[FileEntry]) -> Digest {
    let mut digests: Vec<&Digest> = files.iter().map(|f| &f.digest).collect();
    digests.sort();
    let mut hasher = Sha256::new();
    for d in digests {
        hasher.update(d.as_bytes());
    }
    Digest::from_bytes(hasher.finalize().into())
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContentError {
    #[error("bundle has no files")]
    Empty,
    #[error("invalid path {0:?}: must be relative without traversal")]
    InvalidPath(String),
    #[error("duplicate path {0}")]
    DuplicatePath(String),
    #[error("invalid bundle id {0:?}")]
    InvalidId(String),
    #[error("sound bundles need exactly one audio file plus metadata, found {audio} audio and {other} other files")]
    SoundLayout { audio: usize, other: usize },
    #[error("{0} is a questionnaire or quiz artifact; dynamic artifacts go through the API")]
    DynamicArtifact(String),
    #[error("bundle {id} version {version} already published with different content")]
    VersionConflict { id: String, version: u32 },
}

/// Accepts `a/b.html`-style paths: relative, forward slashes, no `.`/`..`
/// components, no empty segments.
pub fn validate_path(path: &str) -> Result<(), ContentError> {
    let bad = path.is_empty()
        || path.starts_with('/')
        || path.contains('\\')
        || path.contains('\0')
        || path.contains(':')
        || path.split('/').any(|seg| seg.is_empty() || seg == "." || seg == "..");
    if bad {
        Err(ContentError::InvalidPath(path.to_owned()))
    } else {
        Ok(())
    }
}

const AUDIO_EXTENSIONS: [&str; 7] = ["wav", "mp3", "ogg", "oga", "m4a", "flac", "aac"];
const METADATA_EXTENSIONS: [&str; 3] = ["json", "txt", "md"];

fn extension(path: &str) -> String {
    Path::new(path)
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Compiled questionnaires, quizzes and rule sets are JSON objects tagged
/// with `artifact`, or carry `pages` + `questions`.
pub fn is_dynamic_artifact(bytes: &[u8]) -> bool {
    let Ok(serde_json::Value::Object(map)) = serde_json::from_slice::<serde_json::Value>(bytes) else {
        return false;
    };
    map.contains_key("artifact") || (map.contains_key("pages") && map.contains_key("questions"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleFile {
    pub path: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedBundle {
    pub bundle: ContentBundle,
    pub blobs: Vec<(Digest, Vec<u8>)>,
}

/// Hashes and checks a file set. Nothing is stored; callers persist
/// `blobs` and the bundle record.
pub fn publish_bundle(id: &str, kind: BundleKind, version: u32, files: Vec<BundleFile>) -> Result<PreparedBundle, ContentError> {
    if id.is_empty() || !id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'.') {
        return Err(ContentError::InvalidId(id.to_owned()));
    }
    if files.is_empty() {
        return Err(ContentError::Empty);
    }
    let mut entries = Vec::with_capacity(files.len());
    let mut blobs = Vec::with_capacity(files.len());
    let mut seen = BTreeSet::new();
    for file in files {
        validate_path(&file.path)?;
        if !seen.insert(file.path.clone()) {
            return Err(ContentError::DuplicatePath(file.path));
        }
        if is_dynamic_artifact(&file.bytes) {
            return Err(ContentError::DynamicArtifact(file.path));
        }
        let digest = Digest::of(&file.bytes);
        entries.push(FileEntry { path: file.path, size: file.bytes.len() as u64, digest });
        blobs.push((digest, file.bytes));
    }
    if kind == BundleKind::SoundAsset {
        let audio = entries.iter().filter(|e| AUDIO_EXTENSIONS.contains(&extension(&e.path).as_str())).count();
        let meta = entries.iter().filter(|e| METADATA_EXTENSIONS.contains(&extension(&e.path).as_str())).count();
        if audio != 1 || audio + meta != entries.len() {
            return Err(ContentError::SoundLayout { audio, other: entries.len() - audio });
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let digest = bundle_digest(&entries);
    Ok(PreparedBundle {
        bundle: ContentBundle { id: id.to_owned(), kind, version, files: entries, digest },
        blobs,
    })
}

/// Reads every regular file below `root` as a bundle file set.
pub fn read_bundle_dir(root: &Path) -> io::Result<Vec<BundleFile>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let path = entry.path();
            let ty = entry.file_type()?;
            if ty.is_dir() {
                stack.push(path);
            } else if ty.is_file() {
                let rel = path
                    .strip_prefix(root)
                    .map_err(io::Error::other)?
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join("/");
                out.push(BundleFile { path: rel, bytes: fs::read(&path)? });
            }
        }
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundCatalogEntry {
    pub sound_id: String,
    pub name: crate::schema::Localized,
    pub bundle_id: String,
    pub duration_seconds: f64,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub section_id: String,
    pub bundle_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EducationChapter {
    pub chapter_id: String,
    pub sections: Vec<Section>,
    /// Quiz artifact id, served through the API.
    pub quiz_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recap_bundle_id: Option<String>,
    #[serde(default)]
    pub prerequisites: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContentCatalog {
    #[serde(default)]
    pub sounds: Vec<SoundCatalogEntry>,
    #[serde(default)]
    pub chapters: Vec<EducationChapter>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CatalogError {
    #[error("sound {sound}: {reason}")]
    Sound { sound: String, reason: String },
    #[error("chapter {chapter}: {reason}")]
    Chapter { chapter: String, reason: String },
    #[error("chapter prerequisites form a cycle through {0}")]
    Cycle(String),
}

impl ContentCatalog {
    /// Checks references against published bundles and seeded quiz ids.
    pub fn validate(&self, bundles: &[ContentBundle], quiz_ids: &BTreeSet<String>) -> Result<(), CatalogError> {
        let kinds: HashMap<&str, BundleKind> = bundles.iter().map(|b| (b.id.as_str(), b.kind)).collect();
        let mut sound_ids = BTreeSet::new();
        for s in &self.sounds {
            let err = |reason: String| CatalogError::Sound { sound: s.sound_id.clone(), reason };
            if !sound_ids.insert(&s.sound_id) {
                return Err(err("duplicate sound id".into()));
            }
            if !(s.duration_seconds.is_finite() && s.duration_seconds > 0.0) {
                return Err(err(format!("duration {} must be > 0", s.duration_seconds)));
            }
            match kinds.get(s.bundle_id.as_str()) {
                Some(BundleKind::SoundAsset) => {}
                Some(other) => return Err(err(format!("bundle {} is {other:?}, not a sound asset", s.bundle_id))),
                None => return Err(err(format!("unknown bundle {}", s.bundle_id))),
            }
        }
        let chapter_ids: BTreeSet<&str> = self.chapters.iter().map(|c| c.chapter_id.as_str()).collect();
        if chapter_ids.len() != self.chapters.len() {
            return Err(CatalogError::Chapter { chapter: "*".into(), reason: "duplicate chapter id".into() });
        }
        for c in &self.chapters {
            let err = |reason: String| CatalogError::Chapter { chapter: c.chapter_id.clone(), reason };
            if c.sections.is_empty() {
                return Err(err("no sections".into()));
            }
            let bundle_refs = c.sections.iter().map(|s| &s.bundle_id).chain(c.recap_bundle_id.as_ref());
            for bundle in bundle_refs {
                if kinds.get(bundle.as_str()) != Some(&BundleKind::TineduChapter) {
                    return Err(err(format!("bundle {bundle} is not a published tinedu chapter")));
                }
            }
            if !quiz_ids.contains(&c.quiz_id) {
                return Err(err(format!("quiz {} is not seeded", c.quiz_id)));
            }
            for p in &c.prerequisites {
                if !chapter_ids.contains(p.as_str()) {
                    return Err(err(format!("unknown prerequisite {p}")));
                }
            }
        }
        topological_order(&self.chapters).map(|_| ())
    }
}

/// Kahn's algorithm over the prerequisite graph.
pub fn topological_order(chapters: &[EducationChapter]) -> Result<Vec<String>, CatalogError> {
    let mut indegree: BTreeMap<&str, usize> = chapters.iter().map(|c| (c.chapter_id.as_str(), 0)).collect();
    let mut dependents: HashMap<&str, Vec<&str>> = HashMap::new();
    for c in chapters {
        for p in &c.prerequisites {
            if indegree.contains_key(p.as_str()) {
                *indegree.entry(c.chapter_id.as_str()).or_default() += 1;
                dependents.entry(p.as_str()).or_default().push(c.chapter_id.as_str());
            }
        }
    }
    let mut ready: VecDeque<&str> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&c, _)| c).collect();
    let mut order = Vec::with_capacity(chapters.len());
    while let Some(c) = ready.pop_front() {
        order.push(c.to_owned());
        for &d in dependents.get(c).map(Vec::as_slice).unwrap_or_default() {
            let n = indegree.get_mut(d).expect("known chapter");
            *n -= 1;
            if *n == 0 {
                ready.push_back(d);
            }
        }
    }
    if order.len() < indegree.len() {
        let stuck = indegree.iter().find(|(c, &d)| d > 0 && !order.iter().any(|o| o == *c)).map(|(c, _)| c.to_string());
        return Err(CatalogError::Cycle(stuck.unwrap_or_default()));
    }
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentManifest {
    pub arm: StudyArm,
    pub bundles: Vec<ContentBundle>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sounds: Vec<SoundCatalogEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chapters: Vec<EducationChapter>,
}

/// Latest version of each bundle id.
pub fn latest_bundles(bundles: &[ContentBundle]) -> Vec<ContentBundle> {
    let mut latest: BTreeMap<&str, &ContentBundle> = BTreeMap::new();
    for b in bundles {
        match latest.get(b.id.as_str()) {
            Some(cur) if cur.version >= b.version => {}
            _ => {
                latest.insert(b.id.as_str(), b);
            }
        }
    }
    latest.into_values().cloned().collect()
}

/// Bundles (and catalog entries) visible to `arm`, sorted by bundle id.
pub fn get_manifest(arm: StudyArm, bundles: &[ContentBundle], catalog: &ContentCatalog) -> ContentManifest {
    let bundles: Vec<ContentBundle> = latest_bundles(bundles).into_iter().filter(|b| b.kind.visible_to(arm)).collect();
    ContentManifest {
        arm,
        bundles,
        sounds: if arm.has_module(Module::ShadesOfNoise) { catalog.sounds.clone() } else { Vec::new() },
        chapters: if arm.has_module(Module::TinEdu) { catalog.chapters.clone() } else { Vec::new() },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChapterState {
    Locked,
    Available,
    Completed,
}

/// Education progress extracted from a user's actions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChapterProgress {
    pub sections_done: BTreeMap<String, BTreeSet<String>>,
    pub quizzes_done: BTreeSet<String>,
}

impl ChapterProgress {
    pub fn from_actions<'a>(actions: impl IntoIterator<Item = &'a InterventionAction>) -> Self {
        let mut progress = ChapterProgress::default();
        for a in actions {
            progress.record(&a.payload);
        }
        progress
    }

    pub fn record(&mut self, payload: &ActionPayload) {
        match payload {
            ActionPayload::EducationStepCompleted { chapter_id, section_id } => {
                self.sections_done.entry(chapter_id.clone()).or_default().insert(section_id.clone());
            }
            ActionPayload::QuizCompleted { quiz_id, .. } => {
                self.quizzes_done.insert(quiz_id.clone());
            }
            _ => {}
        }
    }

    /// Every section viewed and the chapter quiz completed.
    pub fn is_completed(&self, chapter: &EducationChapter) -> bool {
        let done = self.sections_done.get(&chapter.chapter_id);
        chapter
            .sections
            .iter()
            .all(|s| done.is_some_and(|d| d.contains(&s.section_id)))
            && self.quizzes_done.contains(&chapter.quiz_id)
    }
}

/// Completed beats available beats locked; a chapter is available once all
/// its prerequisites are completed.
pub fn chapter_unlock_state(progress: &ChapterProgress, chapters: &[EducationChapter]) -> BTreeMap<String, ChapterState> {
    let completed: BTreeSet<&str> = chapters
        .iter()
        .filter(|c| progress.is_completed(c))
        .map(|c| c.chapter_id.as_str())
        .collect();
    chapters
        .iter()
        .map(|c| {
            let state = if completed.contains(c.chapter_id.as_str()) {
                ChapterState::Completed
            } else if c.prerequisites.iter().all(|p| completed.contains(p.as_str())) {
                ChapterState::Available
            } else {
                ChapterState::Locked
            };
            (c.chapter_id.clone(), state)
        })
        .collect()
}

/// A single `Range: bytes=...` request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteRange {
    /// `bytes=a-b` (inclusive) or `bytes=a-`.
    From { start: u64, end: Option<u64> },
    /// `bytes=-n`: the last n bytes.
    Suffix(u64),
}

impl ByteRange {
    pub fn parse(header: &str) -> Option<ByteRange> {
        let spec = header.trim().strip_prefix("bytes=")?;
        if spec.contains(',') {
            return None;
        }
        let (a, b) = spec.split_once('-')?;
        let (a, b) = (a.trim(), b.trim());
        if a.is_empty() {
            return b.parse().ok().filter(|&n| n > 0).map(ByteRange::Suffix);
        }
        let start = a.parse().ok()?;
        let end = if b.is_empty() { None } else { Some(b.parse().ok()?) };
        if end.is_some_and(|e| e < start) {
            return None;
        }
        Some(ByteRange::From { start, end })
    }

    /// Inclusive `(first, last)` byte offsets for a body of `len` bytes, or
    /// `None` when unsatisfiable.
    pub fn resolve(self, len: u64) -> Option<(u64, u64)> {
        if len == 0 {
            return None;
        }
        match self {
            ByteRange::From { start, end } => {
                if start >= len {
                    return None;
                }
                Some((start, end.map_or(len - 1, |e| e.min(len - 1))))
            }
            ByteRange::Suffix(n) => Some((len.saturating_sub(n), len - 1)),
        }
    }
}

/// Content-addressed blob storage.
pub trait BlobStore: Send + Sync {
    fn put(&self, digest: &Digest, bytes: &[u8]) -> io::Result<()>;
    fn get(&self, digest: &Digest) -> io::Result<Option<Vec<u8>>>;
    fn contains(&self, digest: &Digest) -> io::Result<bool> {
        Ok(self.get(digest)?.is_some())
    }
}

#[derive(Debug, Default)]
pub struct MemoryBlobStore {
    blobs: RwLock<HashMap<Digest, Vec<u8>>>,
}

impl MemoryBlobStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Overwrites stored bytes without re-hashing. Test hook for corruption.
    pub fn overwrite_raw(&self, digest: &Digest, bytes: Vec<u8>) {
        self.blobs.write().insert(*digest, bytes);
    }
}

impl BlobStore for MemoryBlobStore {
    fn put(&self, digest: &Digest, bytes: &[u8]) -> io::Result<()> {
        self.blobs.write().entry(*digest).or_insert_with(|| bytes.to_vec());
        Ok(())
    }

    fn get(&self, digest: &Digest) -> io::Result<Option<Vec<u8>>> {
        Ok(self.blobs.read().get(digest).cloned())
    }
}

/// Blobs under `root/ab/abcdef...`.
#[derive(Debug, Clone)]
pub struct FsBlobStore {
    root: PathBuf,
}

impl FsBlobStore {
    pub fn new(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(FsBlobStore { root })
    }

    pub fn path_for(&self, digest: &Digest) -> PathBuf {
        let hex = digest.to_hex();
        self.root.join(&hex[..2]).join(hex)
    }
}

impl BlobStore for FsBlobStore {
    fn put(&self, digest: &Digest, bytes: &[u8]) -> io::Result<()> {
        let path = self.path_for(digest);
        if path.exists() {
            return Ok(());
        }
        let dir = path.parent().expect("blob path has a parent");
        fs::create_dir_all(dir)?;
        let mut tmp = tempfile_in(dir)?;
        tmp.1.write_all(bytes)?;
        tmp.1.sync_all()?;
        drop(tmp.1);
        fs::rename(&tmp.0, &path)
    }

    fn get(&self, digest: &Digest) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.path_for(digest)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn contains(&self, digest: &Digest) -> io::Result<bool> {
        Ok(self.path_for(digest).exists())
    }
}

fn tempfile_in(dir: &Path) -> io::Result<(PathBuf, fs::File)> {
    for attempt in 0u32..100 {
        let name = format!(".tmp-{}-{attempt}-{}", std::process::id(), uuid::Uuid::new_v4().simple());
        let path = dir.join(name);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => return Ok((path, f)),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    Err(io::Error::other("could not create temporary blob file"))
}

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    #[error("unknown asset {0}")]
    NotFound(Digest),
    #[error("stored bytes for {0} fail verification")]
    Corrupt(Digest),
    #[error("range not satisfiable for {len} bytes")]
    RangeNotSatisfiable { len: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fetched {
    pub bytes: Vec<u8>,
    pub total_len: u64,
    /// Inclusive offsets when a range was served.
    pub range: Option<(u64, u64)>,
}

/// Reads a blob and re-hashes it before returning any byte of it.
pub fn fetch_asset(store: &dyn BlobStore, digest: &Digest, range: Option<ByteRange>) -> Result<Fetched, FetchError> {
    let bytes = store.get(digest)?.ok_or(FetchError::NotFound(*digest))?;
    if Digest::of(&bytes) != *digest {
        return Err(FetchError::Corrupt(*digest));
    }
    let total_len = bytes.len() as u64;
    match range {
        None => Ok(Fetched { bytes, total_len, range: None }),
        Some(r) => {
            let (first, last) = r.resolve(total_len).ok_or(FetchError::RangeNotSatisfiable { len: total_len })?;
            Ok(Fetched {
                bytes: bytes[first as usize..=last as usize].to_vec(),
                total_len,
                range: Some((first, last)),
            })
        }
    }
}
