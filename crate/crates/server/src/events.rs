//! Per-chat event log with replay for reconnecting subscribers.

use std::collections::VecDeque;
use std::sync::{Arc, Weak};

use parking_lot::Mutex;
use serde::Serialize;
use tokio::sync::Notify;
use troupe_core::ChatMessage;

/// Events kept for replay, and the per-subscriber backlog before the
/// oldest events are dropped.
pub const EVENT_BUFFER: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredEvent {
    pub id: u64,
    /// `message`, `question`, `excerpt`, `quote`, `error` or `done`.
    pub name: &'static str,
    /// JSON payload.
    pub data: String,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct ErrorPayload<'a> {
    message: &'a str,
    conversation_id: &'a str,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct DonePayload<'a> {
    conversation_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pending_conversation_id: Option<&'a str>,
}

#[derive(Debug)]
pub struct EventLog {
    inner: Mutex<Inner>,
}

#[derive(Debug)]
struct Inner {
    next_id: u64,
    recent: VecDeque<StoredEvent>,
    subscribers: Vec<Weak<Subscriber>>,
}

#[derive(Debug, Default)]
struct Subscriber {
    queue: Mutex<Queue>,
    notify: Notify,
}

#[derive(Debug, Default)]
struct Queue {
    events: VecDeque<StoredEvent>,
    dropped: u64,
}

/// Live events for one subscriber, oldest dropped once it falls
/// [`EVENT_BUFFER`] behind.
#[derive(Debug)]
pub struct Receiver(Arc<Subscriber>);

impl Receiver {
    pub async fn recv(&self) -> StoredEvent {
        loop {
            if let Some(e) = self.0.queue.lock().events.pop_front() {
                return e;
            }
            self.0.notify.notified().await;
        }
    }

    /// Events dropped so far because this subscriber lagged.
    pub fn dropped(&self) -> u64 {
        self.0.queue.lock().dropped
    }
}

impl Default for EventLog {
    fn default() -> Self {
        Self {
            inner: Mutex::new(Inner {
                next_id: 1,
                recent: VecDeque::with_capacity(EVENT_BUFFER),
                subscribers: Vec::new(),
            }),
        }
    }
}

impl EventLog {
    fn publish(&self, name: &'static str, data: String) {
        let mut inner = self.inner.lock();
        let event = StoredEvent {
            id: inner.next_id,
            name,
            data,
        };
        inner.next_id += 1;
        if inner.recent.len() == EVENT_BUFFER {
            inner.recent.pop_front();
        }
        inner.recent.push_back(event.clone());
        // fanned out under the lock so live order matches replay order
        inner.subscribers.retain(|w| match w.upgrade() {
            Some(sub) => {
                let mut q = sub.queue.lock();
                if q.events.len() == EVENT_BUFFER {
                    q.events.pop_front();
                    q.dropped += 1;
                }
                q.events.push_back(event.clone());
                drop(q);
                sub.notify.notify_one();
                true
            }
            None => false,
        });
    }

    pub fn message(&self, message: &ChatMessage) {
        let data = serde_json::to_string(message).expect("messages serialize");
        self.publish(message.kind.as_str(), data);
    }

    pub fn error(&self, message: &str, conversation_id: &str) {
        let data = serde_json::to_string(&ErrorPayload {
            message,
            conversation_id,
        })
        .expect("errors serialize");
        self.publish("error", data);
    }

    pub fn done(&self, conversation_id: &str, pending: Option<&str>) {
        let data = serde_json::to_string(&DonePayload {
            conversation_id,
            pending_conversation_id: pending,
        })
        .expect("done serializes");
        self.publish("done", data);
    }

    /// Retained events after `after`, plus a receiver for everything newer.
    pub fn subscribe(&self, after: u64) -> (Vec<StoredEvent>, Receiver) {
        let mut inner = self.inner.lock();
        let backlog = inner
            .recent
            .iter()
            .filter(|e| e.id > after)
            .cloned()
            .collect();
        let sub = Arc::new(Subscriber::default());
        inner.subscribers.push(Arc::downgrade(&sub));
        (backlog, Receiver(sub))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_keeps_the_newest_thousand() {
        let log = EventLog::default();
        for i in 0..1005 {
            log.error(&i.to_string(), "c");
        }
        let (backlog, _) = log.subscribe(0);
        assert_eq!(backlog.len(), EVENT_BUFFER);
        assert_eq!(backlog[0].id, 6);
        let (backlog, _) = log.subscribe(1000);
        assert_eq!(
            backlog.iter().map(|e| e.id).collect::<Vec<_>>(),
            vec![1001, 1002, 1003, 1004, 1005]
        );
    }

    #[tokio::test]
    async fn slow_subscribers_lose_the_oldest() {
        let log = EventLog::default();
        let (_, rx) = log.subscribe(0);
        for i in 0..1010 {
            log.error(&i.to_string(), "c");
        }
        assert_eq!(rx.dropped(), 10);
        assert_eq!(rx.recv().await.id, 11);
        drop(rx);
        log.error("after", "c");
        assert!(log.inner.lock().subscribers.is_empty());
    }

    #[tokio::test]
    async fn live_events_wake_a_waiting_subscriber() {
        let log = Arc::new(EventLog::default());
        let (backlog, rx) = log.subscribe(0);
        assert!(backlog.is_empty());
        let writer = log.clone();
        tokio::spawn(async move {
            tokio::time::sleep(std::time::Duration::from_millis(20)).await;
            writer.error("late", "c");
        });
        let e = tokio::time::timeout(std::time::Duration::from_secs(2), rx.recv())
            .await
            .unwrap();
        assert_eq!(e.name, "error");
    }
}
