//! Pluggable transcription clients: an HTTP client posting WAV bytes to an
//! external ASR service, and a file-backed fake for tests.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use crate::dsp::wav::{wav_bytes_i16, Waveform};
use crate::error::{LsError, Result};
use crate::eval::wer::{split_syllables, syllable_tokens};

/// Parsed transcription with aligned token views.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub raw: String,
    pub words: Vec<String>,
    pub phonemes: Vec<String>,
    pub styles: Vec<String>,
}

impl Transcript {
    /// Tokenize tone-numbered pinyin text. An empty transcript yields empty
    /// token lists and scores as all-deletions downstream.
    pub fn parse(text: &str) -> Result<Transcript> {
        let raw = text.trim().to_string();
        if raw.is_empty() {
            return Ok(Transcript {
                raw,
                words: Vec::new(),
                phonemes: Vec::new(),
                styles: Vec::new(),
            });
        }
        let (phonemes, styles) = split_syllables(&raw)?;
        Ok(Transcript {
            words: syllable_tokens(&raw),
            raw,
            phonemes,
            styles,
        })
    }
}

pub trait TranscriptionClient {
    /// Transcribe one clip; `id` identifies the clip for file-backed fakes.
    fn transcribe(&self, id: &str, audio: &Waveform) -> Result<String>;
}

/// Transcribe a batch, preserving input order.
pub fn transcribe_batch(
    client: &dyn TranscriptionClient,
    clips: &[(String, Waveform)],
) -> Result<Vec<Transcript>> {
    clips
        .iter()
        .map(|(id, wave)| Transcript::parse(&client.transcribe(id, wave)?))
        .collect()
}

/// POSTs WAV bytes and reads a UTF-8 text body, retrying failed requests
/// with exponential backoff.
pub struct HttpAsrClient {
    pub url: String,
    pub token: Option<String>,
    pub retries: u32,
    pub timeout: Duration,
    /// Base delay doubled per retry; short in tests.
    pub backoff: Duration,
}

impl HttpAsrClient {
    pub fn from_env() -> Result<Self> {
        let url = std::env::var("LS_ASR_URL")
            .map_err(|_| LsError::Config("LS_ASR_URL is not set".into()))?;
        Ok(HttpAsrClient {
            url,
            token: std::env::var("LS_ASR_TOKEN").ok(),
            retries: 3,
            timeout: Duration::from_secs(30),
            backoff: Duration::from_millis(250),
        })
    }
}

impl TranscriptionClient for HttpAsrClient {
    fn transcribe(&self, _id: &str, audio: &Waveform) -> Result<String> {
        let body = wav_bytes_i16(audio)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| LsError::Transport {
                retries: 0,
                message: e.to_string(),
            })?;
        let mut last = String::new();
        for attempt in 0..self.retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            let mut req = client
                .post(&self.url)
                .header("content-type", "audio/wav")
                .body(body.clone());
            if let Some(token) = &self.token {
                req = req.bearer_auth(token);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp.text().map_err(|e| LsError::Transport {
                        retries: attempt,
                        message: e.to_string(),
                    });
                }
                Ok(resp) => last = format!("http status {}", resp.status()),
                Err(e) => last = e.to_string(),
            }
        }
        Err(LsError::Transport {
            retries: self.retries,
            message: last,
        })
    }
}

/// Fixed `clip id -> transcript` mapping loaded from a JSON object; ships
/// for evaluation without a live ASR service.
pub struct FakeAsrClient {
    map: HashMap<String, String>,
}

impl FakeAsrClient {
    pub fn new(map: HashMap<String, String>) -> Self {
        FakeAsrClient { map }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let map: HashMap<String, String> = serde_json::from_str(&text)?;
        Ok(FakeAsrClient { map })
    }
}

impl TranscriptionClient for FakeAsrClient {
    fn transcribe(&self, id: &str, _audio: &Waveform) -> Result<String> {
        self.map
            .get(id)
            .cloned()
            .ok_or_else(|| LsError::Input(format!("fake ASR has no transcript for clip {id:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::wer::edit_distance_rate;

    fn silent(n: usize) -> Waveform {
        Waveform::new(vec![0.0; n], 48000)
    }

    #[test]
    fn fake_client_roundtrip_scores_zero_wer() {
        let mut map = HashMap::new();
        map.insert("c1".to_string(), "ni3 hao3".to_string());
        let client = FakeAsrClient::new(map);
        let t = Transcript::parse(&client.transcribe("c1", &silent(100)).unwrap()).unwrap();
        let reference = Transcript::parse("ni3 hao3").unwrap();
        assert_eq!(edit_distance_rate(&reference.words, &t.words).unwrap(), 0.0);
    }

    #[test]
    fn batch_preserves_order() {
        let mut map = HashMap::new();
        map.insert("a".to_string(), "yi1".to_string());
        map.insert("b".to_string(), "er4".to_string());
        let client = FakeAsrClient::new(map);
        let clips = vec![("a".to_string(), silent(10)), ("b".to_string(), silent(10))];
        let out = transcribe_batch(&client, &clips).unwrap();
        assert_eq!(out[0].raw, "yi1");
        assert_eq!(out[1].raw, "er4");
    }

    #[test]
    fn empty_transcript_has_empty_tokens() {
        let t = Transcript::parse("  ").unwrap();
        assert!(t.words.is_empty() && t.phonemes.is_empty() && t.styles.is_empty());
    }

    #[test]
    fn phoneme_and_style_lists_stay_aligned() {
        let t = Transcript::parse("zhong1 guo2 ren2").unwrap();
        assert_eq!(t.styles.len(), t.words.len());
        assert!(t.phonemes.len() >= t.words.len());
    }
}
