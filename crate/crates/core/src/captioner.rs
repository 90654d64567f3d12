//! Caption generation: class-name template captions, prompt selection for a
//! remote vision-language captioning service, and an offline stub.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use std::path::Path;

use crate::manifest::{CaptionKind, CaptionRecord, DatasetManifest, ImageRecord, ImageSource};
use crate::rng::{fnv1a, mix64};

pub const PLAIN_PROMPT: &str = "Describe this image";

pub const CUTMIX_PROMPT: &str = "Describe this image. Consider all the objects in the picture. \
Describe them, describe their position and their relation. Do not consider the image as a \
composite of images. The image is a single scene image";

pub const ENDPOINT_ENV: &str = "T2I_FORGE_CAPTION_URL";

pub const MAX_RETRIES_LIMIT: u32 = 10;

/// `"An image of <class_name>"`.
pub fn aio_caption(class_name: &str) -> Result<String> {
    if class_name.is_empty() {
        return Err(Error::Argument("class name must be non-empty".into()));
    }
    Ok(format!("An image of {class_name}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptTarget {
    Plain,
    Cutmix,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionPrompt {
    text: &'static str,
    target: PromptTarget,
}

impl CaptionPrompt {
    pub fn new(target: PromptTarget) -> Self {
        let text = match target {
            PromptTarget::Plain => PLAIN_PROMPT,
            PromptTarget::Cutmix => CUTMIX_PROMPT,
        };
        Self { text, target }
    }

    pub fn text(&self) -> &str {
        self.text
    }

    pub fn target(&self) -> PromptTarget {
        self.target
    }
}

/// Crops are normally not re-captioned (they keep the base caption behind a
/// crop-token prefix); when they are, they get the plain prompt.
pub fn prompt_for(source: ImageSource) -> CaptionPrompt {
    match source {
        ImageSource::Cutmix => CaptionPrompt::new(PromptTarget::Cutmix),
        ImageSource::Original | ImageSource::Crop => CaptionPrompt::new(PromptTarget::Plain),
    }
}

pub const COLORS: [&str; 16] = [
    "red", "orange", "yellow", "green", "teal", "blue", "purple", "pink", "brown", "black",
    "white", "gray", "golden", "silver", "beige", "crimson",
];

pub const RELATIONS: [&str; 16] = [
    "next to", "behind", "in front of", "above", "below", "beside", "near", "under",
    "on top of", "left of", "right of", "facing", "across from", "against", "around",
    "far from",
];

/// Word indices picked for `(id, seed)`: (color, relation, background color).
pub fn stub_word_indices(id: &str, seed: u64) -> (usize, usize, usize) {
    let h = mix64(fnv1a(id.as_bytes()) ^ mix64(seed));
    ((h & 15) as usize, ((h >> 4) & 15) as usize, ((h >> 8) & 15) as usize)
}

/// Deterministic offline stand-in for a descriptive caption. A pure function
/// of `(record.id, seed)` and the labels stored on the record.
pub fn stub_caption(record: &ImageRecord, seed: u64) -> Result<String> {
    let (c, r, bg) = stub_word_indices(&record.id, seed);
    let (color, relation, background) = (COLORS[c], RELATIONS[r], COLORS[bg]);
    match (&record.class_label, &record.provenance) {
        (None, None) => Err(Error::Argument(format!(
            "record `{}` has neither class label nor provenance",
            record.id
        ))),
        (label, Some(p)) if record.source == ImageSource::Cutmix => {
            let base = label.as_deref().unwrap_or(p.base_id.as_str());
            let donor = p
                .donor_label
                .as_deref()
                .or(p.donor_id.as_deref())
                .unwrap_or("object");
            Ok(format!("A {color} {base} {relation} a {donor}, in a single {background} scene"))
        }
        (Some(label), _) => Ok(format!(
            "A {color} {label} {relation} a {background} background"
        )),
        (None, Some(p)) => Ok(format!(
            "A {color} scene derived from {} {relation} a {background} background",
            p.base_id
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionerEndpoint {
    base_url: String,
    timeout: Duration,
    max_retries: u32,
    /// First retry delay; doubles on every further attempt.
    backoff: Duration,
}

impl CaptionerEndpoint {
    pub fn new(base_url: impl Into<String>, timeout: Duration, max_retries: u32) -> Result<Self> {
        if max_retries > MAX_RETRIES_LIMIT {
            return Err(Error::Argument(format!(
                "max_retries {max_retries} exceeds {MAX_RETRIES_LIMIT}"
            )));
        }
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            timeout,
            max_retries,
            backoff: Duration::from_millis(250),
        })
    }

    /// Endpoint from `T2I_FORGE_CAPTION_URL` if set, otherwise `fallback`.
    pub fn from_env_or(fallback: Option<&str>, timeout: Duration, max_retries: u32) -> Result<Option<Self>> {
        match std::env::var(ENDPOINT_ENV).ok().as_deref().or(fallback) {
            Some(url) if !url.is_empty() => Self::new(url, timeout, max_retries).map(Some),
            _ => Ok(None),
        }
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn max_retries(&self) -> u32 {
        self.max_retries
    }
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    image_b64: String,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

enum Attempt {
    Done(String),
    /// Worth retrying; carries the error to report if attempts run out.
    Transient(Error),
    Fatal(Error),
}

/// Sends `image` to `{base_url}/caption` with `prompt` and returns the
/// caption. Connection failures and 5xx responses are retried up to
/// `max_retries` times with exponential backoff.
pub fn remote_caption(endpoint: &CaptionerEndpoint, image: &[u8], prompt: &CaptionPrompt) -> Result<String> {
    if image.is_empty() {
        return Err(Error::Argument("image bytes are empty".into()));
    }
    let body = serde_json::to_string(&CaptionRequest {
        image_b64: base64::engine::general_purpose::STANDARD.encode(image),
        prompt: prompt.text(),
    })?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(endpoint.timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let url = format!("{}/caption", endpoint.base_url);

    let mut delay = endpoint.backoff;
    let mut attempt = 0;
    loop {
        match attempt_once(&agent, &url, &body) {
            Attempt::Done(caption) => return Ok(caption),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Transient(e) if attempt >= endpoint.max_retries => return Err(e),
            Attempt::Transient(_) => {
                std::thread::sleep(delay);
                delay = delay.saturating_mul(2);
                attempt += 1;
            }
        }
    }
}

fn attempt_once(agent: &ureq::Agent, url: &str, body: &str) -> Attempt {
    let response = match agent
        .post(url)
        .header("Content-Type", "application/json")
        .send(body)
    {
        Ok(r) => r,
        Err(e) => return Attempt::Transient(Error::Transport(e.to_string())),
    };
    let status = response.status().as_u16();
    let text = match response.into_body().read_to_string() {
        Ok(t) => t,
        Err(e) => return Attempt::Transient(Error::Transport(e.to_string())),
    };
    if !(200..300).contains(&status) {
        let err = Error::Endpoint {
            status,
            message: text,
        };
        return if status >= 500 || status == 429 {
            Attempt::Transient(err)
        } else {
            Attempt::Fatal(err)
        };
    }
    match serde_json::from_str::<CaptionResponse>(&text) {
        Ok(r) => Attempt::Done(r.caption),
        Err(e) => Attempt::Fatal(Error::Endpoint {
            status,
            message: format!("malformed response: {e}"),
        }),
    }
}

/// Where descriptive captions come from.
#[derive(Debug, Clone, PartialEq)]
pub enum CaptionBackend {
    Stub { seed: u64 },
    Remote(CaptionerEndpoint),
}

impl CaptionBackend {
    pub fn generator(&self) -> &'static str {
        match self {
            CaptionBackend::Stub { .. } => "stub",
            CaptionBackend::Remote(_) => "remote",
        }
    }
}

/// Caption kind a descriptive caption of `source` is stored under.
pub fn ta_kind(source: ImageSource) -> CaptionKind {
    match source {
        ImageSource::Original => CaptionKind::Ta,
        ImageSource::Cutmix => CaptionKind::CutmixTa,
        ImageSource::Crop => CaptionKind::CropTa,
    }
}

pub fn caption_record(backend: &CaptionBackend, record: &ImageRecord, images_root: &Path) -> Result<CaptionRecord> {
    let text = match backend {
        CaptionBackend::Stub { seed } => stub_caption(record, *seed)?,
        CaptionBackend::Remote(endpoint) => {
            let path = images_root.join(&record.path);
            let bytes = std::fs::read(&path).map_err(|e| Error::io_at(&path, e))?;
            remote_caption(endpoint, &bytes, &prompt_for(record.source))?
        }
    };
    Ok(CaptionRecord {
        image_id: record.id.clone(),
        text,
        kind: ta_kind(record.source),
        generator: backend.generator().into(),
    })
}

/// Adds a descriptive caption to every record that has none of its kind yet.
/// Stub captions are computed in parallel; remote requests go one at a time.
pub fn caption_manifest(
    manifest: &DatasetManifest,
    images_root: &Path,
    backend: &CaptionBackend,
) -> Result<(DatasetManifest, usize)> {
    let have: std::collections::HashSet<(&str, CaptionKind)> = manifest
        .captions
        .iter()
        .map(|c| (c.image_id.as_str(), c.kind))
        .collect();
    let pending: Vec<&ImageRecord> = manifest
        .records
        .iter()
        .filter(|r| !have.contains(&(r.id.as_str(), ta_kind(r.source))))
        .collect();
    let new = match backend {
        CaptionBackend::Stub { .. } => crate::par::try_map_range(pending.len(), |i| {
            caption_record(backend, pending[i], images_root)
        })?,
        CaptionBackend::Remote(_) => pending
            .iter()
            .map(|r| caption_record(backend, r, images_root))
            .collect::<Result<_>>()?,
    };
    let added = new.len();
    let mut out = manifest.clone();
    out.captions.extend(new);
    out.canonicalize();
    Ok((out, added))
}
