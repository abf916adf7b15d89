//! JSON-over-HTTP with bounded retries and an in-flight cap.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryConfig {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    /// Per-request timeout.
    pub timeout_s: f64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        RetryConfig { max_retries: 3, initial_backoff_ms: 500, max_backoff_ms: 8_000, timeout_s: 120.0 }
    }
}

impl RetryConfig {
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self.initial_backoff_ms.saturating_mul(1u64 << retry.min(20)).min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }

    /// Worst-case time spent in one call.
    pub fn worst_case(&self) -> Duration {
        let attempts = self.max_retries + 1;
        let backoff: Duration = (0..self.max_retries).map(|r| self.backoff(r)).sum();
        Duration::from_secs_f64(self.timeout_s) * attempts + backoff
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HttpError {
    #[error("request failed after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    /// Non-retryable status with the response body.
    #[error("HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a InFlight);

impl InFlight {
    pub fn new(limit: usize) -> Self {
        InFlight { limit: limit.max(1), used: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        Permit(self)
    }

    pub fn in_use(&self) -> usize {
        *self.used.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

fn retryable(status: u16) -> bool {
    status == 408 || status == 409 || status == 429 || status >= 500
}

pub struct JsonClient {
    agent: ureq::Agent,
    retry: RetryConfig,
    in_flight: InFlight,
}

impl JsonClient {
    pub fn new(retry: RetryConfig, max_in_flight: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(retry.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        JsonClient { agent, retry, in_flight: InFlight::new(max_in_flight) }
    }

    pub fn retry(&self) -> &RetryConfig {
        &self.retry
    }

    pub fn in_flight(&self) -> &InFlight {
        &self.in_flight
    }

    /// POSTs `body`, retrying transport errors and retryable statuses with
    /// capped exponential backoff.
    pub fn post(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, HttpError> {
        let _permit = self.in_flight.acquire();
        let attempts = self.retry.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.retry.backoff(attempt - 1));
            }
            let mut req = self.agent.post(url).header("Content-Type", "application/json");
            if let Some(token) = bearer {
                req = req.header("Authorization", format!("Bearer {token}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if (200..300).contains(&status) {
                        match serde_json::from_str(&text) {
                            Ok(v) => return Ok(v),
                            Err(e) => last = format!("invalid JSON response: {e}"),
                        }
                    } else if status == 401 || status == 403 {
                        return Err(HttpError::Auth(status));
                    } else if retryable(status) {
                        last = format!("HTTP {status}");
                    } else {
                        return Err(HttpError::Rejected { status, body: text });
                    }
                }
                Err(e) => last = e.to_string(),
            }
            log::debug!("attempt {} of {attempts} to {url} failed: {last}", attempt + 1);
        }
        Err(HttpError::Exhausted { attempts, last })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn backoff_is_capped() {
        let r = RetryConfig { max_retries: 6, initial_backoff_ms: 100, max_backoff_ms: 1000, timeout_s: 1.0 };
        let b: Vec<u64> = (0..6).map(|i| r.backoff(i).as_millis() as u64).collect();
        assert_eq!(b, vec![100, 200, 400, 800, 1000, 1000]);
        assert_eq!(r.worst_case(), Duration::from_millis(7000 + 3500));
    }

    #[test]
    fn in_flight_bounds_concurrency() {
        let sem = Arc::new(InFlight::new(2));
        let peak = Arc::new(Mutex::new(0usize));
        let handles: Vec<_> = (0..6)
            .map(|_| {
                let (sem, peak) = (sem.clone(), peak.clone());
                thread::spawn(move || {
                    let _p = sem.acquire();
                    let now = sem.in_use();
                    let mut pk = peak.lock().unwrap();
                    *pk = (*pk).max(now);
                    drop(pk);
                    thread::sleep(Duration::from_millis(20));
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(*peak.lock().unwrap() <= 2);
        assert_eq!(sem.in_use(), 0);
    }
}
