//! Concurrent caption generation and the HTTP annotation client.

use std::io::Cursor;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use mf2_core::annotation::{
    annotate_one, AnnotateError, AnnotationClient, AnnotationOutcome, CaptionBudgets, CaptionType,
    ClientError, PromptBundle,
};
use mf2_core::data::{Image, ManifestRecord};
use mf2_core::encoders::Tokenizer;
use serde::Deserialize;

/// Annotates every `(sample, type)` pair with up to `workers` requests in
/// flight. Records and failures are ordered by sample id, then caption
/// type, whatever order the requests complete in.
///
/// # Errors
/// The first transport error stops the remaining requests and is returned.
pub fn annotate_concurrent<C, F>(
    samples: &[ManifestRecord],
    client: &C,
    caption_types: &[CaptionType],
    tokenizer: &Tokenizer,
    budgets: &CaptionBudgets,
    workers: usize,
    image_for: F,
) -> Result<AnnotationOutcome, AnnotateError>
where
    C: AnnotationClient + Sync + ?Sized,
    F: Fn(&ManifestRecord) -> Result<Image, ClientError> + Sync,
{
    let mut order: Vec<&ManifestRecord> = samples.iter().collect();
    order.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut types = caption_types.to_vec();
    types.sort();
    types.dedup();
    let jobs: Vec<(usize, CaptionType)> = (0..order.len())
        .flat_map(|i| types.iter().map(move |&t| (i, t)))
        .collect();
    let results: Vec<Mutex<Option<_>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let error: Mutex<Option<AnnotateError>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                if j >= jobs.len() || stop.load(Ordering::Relaxed) {
                    break;
                }
                let (i, t) = jobs[j];
                let sample = order[i];
                let outcome = image_for(sample)
                    .map_err(AnnotateError::Client)
                    .and_then(|image| annotate_one(client, sample, &image, t, tokenizer, budgets));
                match outcome {
                    Ok(r) => *results[j].lock().expect("result slot") = Some(r),
                    Err(e) => {
                        stop.store(true, Ordering::Relaxed);
                        error.lock().expect("error slot").get_or_insert(e);
                    }
                }
            });
        }
    });

    if let Some(e) = error.into_inner().expect("error slot") {
        return Err(e);
    }
    let mut out = AnnotationOutcome::default();
    for slot in results {
        match slot
            .into_inner()
            .expect("result slot")
            .expect("every job ran")
        {
            Ok(r) => out.records.push(r),
            Err(f) => out.failures.push(f),
        }
    }
    Ok(out)
}

/// Client for an HTTP caption service.
///
/// Each request is a JSON `POST` of `{"caption_type", "prompt",
/// "image_png_base64"}`; the reply must be `{"text": "..."}`. A 4xx status
/// counts as a rejection of that prompt (retried once); anything else that
/// fails is a transport error.
#[derive(Debug)]
pub struct RemoteClient {
    endpoint: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct Reply {
    text: String,
}

impl RemoteClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(120))
                .build(),
        }
    }

    /// Reads the endpoint URL from the environment variable `var`.
    pub fn from_env(var: &str) -> Result<Self, ClientError> {
        match std::env::var(var) {
            Ok(url) if !url.trim().is_empty() => Ok(Self::new(url.trim())),
            _ => Err(ClientError::Transport(format!(
                "environment variable {var} is not set"
            ))),
        }
    }
}

fn png_base64(image: &Image) -> Result<String, ClientError> {
    let buf =
        image::RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
            .expect("buffer length matches dimensions");
    let mut bytes = Vec::new();
    buf.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| ClientError::Transport(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

impl AnnotationClient for RemoteClient {
    fn generate(&self, image: &Image, prompt: &PromptBundle) -> Result<String, ClientError> {
        let body = serde_json::json!({
            "caption_type": prompt.caption_type,
            "prompt": prompt.render(),
            "image_png_base64": png_base64(image)?,
        });
        match self.agent.post(&self.endpoint).send_json(body) {
            Ok(resp) => resp
                .into_json::<Reply>()
                .map(|r| r.text)
                .map_err(|e| ClientError::Transport(format!("bad reply: {e}"))),
            Err(ureq::Error::Status(code, resp)) if (400..500).contains(&code) => {
                Err(ClientError::Rejected(format!(
                    "HTTP {code}: {}",
                    resp.into_string().unwrap_or_default()
                )))
            }
            Err(e) => Err(ClientError::Transport(e.to_string())),
        }
    }
}
