//! Optional remote perception provider over HTTP.
//!
//! Off by default and never used by the test suites; any transport or schema
//! failure falls back to the deterministic heuristic provider with a warning.
//! Endpoint and auth token come from `HDRCYCLE_PROVIDER_URL` and
//! `HDRCYCLE_PROVIDER_TOKEN`.

use std::io::Cursor;
use std::time::Duration;

use base64::Engine;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

use super::{HeuristicProvider, PerceptionProvider, PerceptionReport, PixelCounts, Role};

pub const ENDPOINT_ENV: &str = "HDRCYCLE_PROVIDER_URL";
pub const TOKEN_ENV: &str = "HDRCYCLE_PROVIDER_TOKEN";

/// Fixed query prompt sent with every image.
pub const PROMPT: &str = "Tell me if there are any synthesis artifacts in the given scene or not. \
Must response with 1) Yes or No only, 2) If Yes, can you get me the saliency maps of the \
artifacts (in red), overexposed (in blue) and underexposed (in yellow) areas of this image?";

#[derive(Serialize)]
struct RemoteRequest<'a> {
    prompt: &'a str,
    image_png: String,
}

#[derive(Deserialize)]
struct RemoteSaliency {
    artifact: Option<String>,
    over: Option<String>,
    under: Option<String>,
}

#[derive(Deserialize)]
struct RemoteReply {
    has_artifacts: bool,
    saliency: Option<RemoteSaliency>,
}

/// HTTP-backed provider with heuristic fallback.
pub struct RemoteProvider {
    endpoint: String,
    token: Option<String>,
    timeout: Duration,
    fallback: HeuristicProvider,
}

impl RemoteProvider {
    /// Build from environment variables; errors if the endpoint is unset.
    pub fn from_env(fallback: HeuristicProvider) -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| CoreError::Provider(format!("{ENDPOINT_ENV} is not set")))?;
        Ok(RemoteProvider {
            endpoint,
            token: std::env::var(TOKEN_ENV).ok(),
            timeout: Duration::from_secs(30),
            fallback,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn try_remote(&self, pixels: &Array3<f32>, role: Role) -> Result<PerceptionReport> {
        let png = encode_png(pixels)?;
        let body = RemoteRequest {
            prompt: PROMPT,
            image_png: base64::engine::general_purpose::STANDARD.encode(png),
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| CoreError::Provider(e.to_string()))?;
        let mut req = client.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let reply: RemoteReply = req
            .send()
            .map_err(|e| CoreError::Provider(format!("request failed: {e}")))?
            .error_for_status()
            .map_err(|e| CoreError::Provider(format!("provider status: {e}")))?
            .json()
            .map_err(|e| CoreError::Provider(format!("malformed reply: {e}")))?;
        let (_, h, w) = pixels.dim();
        let heuristic = self.fallback.query(pixels, role)?;
        let decode = |field: &Option<String>| -> Result<Option<Array2<f32>>> {
            match field {
                Some(b64) => Ok(Some(decode_gray_png(b64, h, w)?)),
                None => Ok(None),
            }
        };
        let saliency = match &reply.saliency {
            Some(s) => {
                let mut sal = heuristic.saliency.clone();
                if let Some(m) = decode(&s.artifact)? {
                    sal.artifact = m;
                }
                if role == Role::HdrOutput {
                    if let Some(m) = decode(&s.over)? {
                        sal.over = m;
                    }
                    if let Some(m) = decode(&s.under)? {
                        sal.under = m;
                    }
                }
                sal
            }
            None => heuristic.saliency.clone(),
        };
        let counts = PixelCounts {
            artifact: saliency.artifact.iter().filter(|&&v| v >= 0.5).count() as u64,
            over: saliency.over.iter().filter(|&&v| v >= 0.5).count() as u64,
            under: saliency.under.iter().filter(|&&v| v >= 0.5).count() as u64,
            total: (h * w) as u64,
        };
        Ok(PerceptionReport {
            has_artifacts: reply.has_artifacts,
            saliency,
            counts,
            provider_id: "remote".to_string(),
        })
    }
}

impl PerceptionProvider for RemoteProvider {
    fn id(&self) -> &str {
        "remote"
    }

    fn query(&self, pixels: &Array3<f32>, role: Role) -> Result<PerceptionReport> {
        match self.try_remote(pixels, role) {
            Ok(report) => Ok(report),
            Err(e) => {
                log::warn!("remote perception provider failed ({e}); using heuristic fallback");
                self.fallback.query(pixels, role)
            }
        }
    }
}

fn encode_png(pixels: &Array3<f32>) -> Result<Vec<u8>> {
    let (_, h, w) = pixels.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            p.0[c] = (pixels[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let mut buf = Cursor::new(Vec::new());
    image::DynamicImage::ImageRgb8(img)
        .write_to(&mut buf, image::ImageOutputFormat::Png)
        .map_err(|e| CoreError::Provider(e.to_string()))?;
    Ok(buf.into_inner())
}

fn decode_gray_png(b64: &str, height: usize, width: usize) -> Result<Array2<f32>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64)
        .map_err(|e| CoreError::Provider(format!("bad base64: {e}")))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| CoreError::Provider(format!("bad saliency PNG: {e}")))?
        .to_luma8();
    if (img.width() as usize, img.height() as usize) != (width, height) {
        return Err(CoreError::Provider("saliency size mismatch".into()));
    }
    let mut out = Array2::zeros((height, width));
    for (x, y, p) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0] as f32 / 255.0;
    }
    Ok(out)
}
