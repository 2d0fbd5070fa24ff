//! Topic-keyed, one-to-many event distribution between in-process components.
//!
//! Every [`Consumer`] owns a bounded FIFO queue. [`Producer::emit`] appends the
//! item to the queue of every consumer subscribed to the topic at that moment
//! and blocks while any of those queues is full. Emissions on one topic are
//! serialized, so all consumers of a topic observe the same order.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, Weak};
use std::time::{Duration, Instant};

use thiserror::Error;

pub const DEFAULT_QUEUE_CAPACITY: usize = 4096;

/// Topic names used by the assemblies.
pub mod topics {
    /// Sensor driver → control logic.
    pub const SENSOR_RESPONSE: &str = "sensor.response";
    /// Control logic → sensor driver.
    pub const CTL_COMMAND: &str = "ctl.command";
    /// Transmitter driver → control logic.
    pub const TX_COMMAND: &str = "tx.command";
    /// Control logic → transmitter driver.
    pub const CTL_RESPONSE: &str = "ctl.response";
    pub const DT_STATUS: &str = "dt.status";
    pub const DT_MEASUREMENT: &str = "dt.measurement";
    pub const DT_ANALYSIS: &str = "dt.analysis";
    pub const DT_PLAN: &str = "dt.plan";
    pub const DT_EXECUTE: &str = "dt.execute";
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("event bus closed")]
    BusClosed,
    #[error("topic names must be non-empty")]
    EmptyTopic,
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Topic(Arc<str>);

impl Topic {
    pub fn new(name: &str) -> Result<Self, BusError> {
        if name.is_empty() {
            return Err(BusError::EmptyTopic);
        }
        Ok(Self(name.into()))
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Topic({})", self.0)
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

struct Queue<T> {
    items: Mutex<VecDeque<T>>,
    not_empty: Condvar,
    not_full: Condvar,
    capacity: usize,
    detached: AtomicBool,
}

impl<T> Queue<T> {
    fn lock(&self) -> MutexGuard<'_, VecDeque<T>> {
        self.items.lock().unwrap_or_else(|e| e.into_inner())
    }
}

struct TopicEntry<T> {
    subscribers: Vec<Weak<Queue<T>>>,
    emit_lock: Arc<Mutex<()>>,
}

struct BusInner<T> {
    topics: Mutex<HashMap<Topic, TopicEntry<T>>>,
    closed: AtomicBool,
    capacity: usize,
    emitted: AtomicU64,
}

impl<T> BusInner<T> {
    fn topics(&self) -> MutexGuard<'_, HashMap<Topic, TopicEntry<T>>> {
        self.topics.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct EventBus<T> {
    inner: Arc<BusInner<T>>,
}

impl<T> Clone for EventBus<T> {
    fn clone(&self) -> Self {
        Self { inner: Arc::clone(&self.inner) }
    }
}

impl<T: Clone + Send> EventBus<T> {
    pub fn new() -> Self {
        Self::with_capacity(DEFAULT_QUEUE_CAPACITY)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            inner: Arc::new(BusInner {
                topics: Mutex::new(HashMap::new()),
                closed: AtomicBool::new(false),
                capacity: capacity.max(1),
                emitted: AtomicU64::new(0),
            }),
        }
    }

    pub fn producer(&self, topic: &Topic) -> Producer<T> {
        let emit_lock = {
            let mut topics = self.inner.topics();
            let entry = topics.entry(topic.clone()).or_insert_with(|| TopicEntry {
                subscribers: Vec::new(),
                emit_lock: Arc::new(Mutex::new(())),
            });
            Arc::clone(&entry.emit_lock)
        };
        Producer { topic: topic.clone(), bus: Arc::clone(&self.inner), emit_lock }
    }

    /// Registers a new consumer. It only sees items emitted after this call.
    pub fn subscribe(&self, topic: &Topic) -> Consumer<T> {
        let queue = Arc::new(Queue {
            items: Mutex::new(VecDeque::new()),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
            capacity: self.inner.capacity,
            detached: AtomicBool::new(false),
        });
        let mut topics = self.inner.topics();
        let entry = topics.entry(topic.clone()).or_insert_with(|| TopicEntry {
            subscribers: Vec::new(),
            emit_lock: Arc::new(Mutex::new(())),
        });
        // Take the emit lock so a subscription never lands mid-emission.
        let emit_lock = Arc::clone(&entry.emit_lock);
        drop(topics);
        let _guard = emit_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut topics = self.inner.topics();
        if let Some(entry) = topics.get_mut(topic) {
            entry.subscribers.retain(|w| w.strong_count() > 0);
            entry.subscribers.push(Arc::downgrade(&queue));
        }
        Consumer { topic: topic.clone(), queue, bus: Arc::clone(&self.inner) }
    }

    /// Closes the bus: blocked consumers wake up and drain, then see `BusClosed`.
    pub fn shutdown(&self) {
        self.inner.closed.store(true, Ordering::SeqCst);
        let topics = self.inner.topics();
        for entry in topics.values() {
            for q in entry.subscribers.iter().filter_map(Weak::upgrade) {
                let _g = q.lock();
                q.not_empty.notify_all();
                q.not_full.notify_all();
            }
        }
    }

    pub fn is_closed(&self) -> bool {
        self.inner.closed.load(Ordering::SeqCst)
    }

    pub fn subscriber_count(&self, topic: &Topic) -> usize {
        self.inner
            .topics()
            .get(topic)
            .map(|e| e.subscribers.iter().filter(|w| w.strong_count() > 0).count())
            .unwrap_or(0)
    }

    /// Total number of deliveries made on this bus.
    pub fn deliveries(&self) -> u64 {
        self.inner.emitted.load(Ordering::SeqCst)
    }
}

impl<T: Clone + Send> Default for EventBus<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Producer<T> {
    topic: Topic,
    bus: Arc<BusInner<T>>,
    emit_lock: Arc<Mutex<()>>,
}

impl<T> Clone for Producer<T> {
    fn clone(&self) -> Self {
        Self {
            topic: self.topic.clone(),
            bus: Arc::clone(&self.bus),
            emit_lock: Arc::clone(&self.emit_lock),
        }
    }
}

impl<T: Clone + Send> Producer<T> {
    pub fn topic(&self) -> &Topic {
        &self.topic
    }

    /// Delivers `item` to every current subscriber and returns how many were
    /// reached. With no subscribers the item is dropped.
    pub fn emit(&self, item: T) -> usize {
        if self.bus.closed.load(Ordering::SeqCst) {
            return 0;
        }
        let _guard = self.emit_lock.lock().unwrap_or_else(|e| e.into_inner());
        let targets: Vec<Arc<Queue<T>>> = {
            let topics = self.bus.topics();
            topics
                .get(&self.topic)
                .map(|e| e.subscribers.iter().filter_map(Weak::upgrade).collect())
                .unwrap_or_default()
        };
        let mut delivered = 0;
        for queue in targets {
            if queue.detached.load(Ordering::SeqCst) {
                continue;
            }
            let mut items = queue.lock();
            while items.len() >= queue.capacity
                && !self.bus.closed.load(Ordering::SeqCst)
                && !queue.detached.load(Ordering::SeqCst)
            {
                items = queue.not_full.wait(items).unwrap_or_else(|e| e.into_inner());
            }
            if self.bus.closed.load(Ordering::SeqCst) || queue.detached.load(Ordering::SeqCst) {
                continue;
            }
            items.push_back(item.clone());
            queue.not_empty.notify_one();
            delivered += 1;
        }
        self.bus.emitted.fetch_add(delivered as u64, Ordering::SeqCst);
        delivered
    }

    /// Whether every current subscriber has room for one more item.
    pub fn can_emit(&self) -> bool {
        let topics = self.bus.topics();
        topics
            .get(&self.topic)
            .map(|e| {
                e.subscribers
                    .iter()
                    .filter_map(Weak::upgrade)
                    .all(|q| q.lock().len() < q.capacity)
            })
            .unwrap_or(true)
    }
}

pub struct Consumer<T> {
    topic: Topic,
    queue: Arc<Queue<T>>,
    bus: Arc<BusInner<T>>,
}

impl<T: Clone + Send> Consumer<T> {
    pub fn topic(&self) -> &Topic {
        &self.topic
    }

    /// Removes and returns the queue head, waiting for one if necessary.
    pub fn consume(&self) -> Result<T, BusError> {
        self.consume_deadline(None).map(|item| item.expect("no deadline"))
    }

    pub fn consume_timeout(&self, timeout: Duration) -> Result<Option<T>, BusError> {
        self.consume_deadline(Some(Instant::now() + timeout))
    }

    pub fn try_consume(&self) -> Result<Option<T>, BusError> {
        let mut items = self.queue.lock();
        match items.pop_front() {
            Some(item) => {
                self.queue.not_full.notify_all();
                Ok(Some(item))
            }
            None if self.bus.closed.load(Ordering::SeqCst) => Err(BusError::BusClosed),
            None => Ok(None),
        }
    }

    fn consume_deadline(&self, deadline: Option<Instant>) -> Result<Option<T>, BusError> {
        let mut items = self.queue.lock();
        loop {
            if let Some(item) = items.pop_front() {
                self.queue.not_full.notify_all();
                return Ok(Some(item));
            }
            if self.bus.closed.load(Ordering::SeqCst) {
                return Err(BusError::BusClosed);
            }
            items = match deadline {
                None => self.queue.not_empty.wait(items).unwrap_or_else(|e| e.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Ok(None);
                    }
                    self.queue
                        .not_empty
                        .wait_timeout(items, d - now)
                        .unwrap_or_else(|e| e.into_inner())
                        .0
                }
            };
        }
    }

    pub fn len(&self) -> usize {
        self.queue.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stops receiving; queued items are discarded.
    pub fn unsubscribe(self) {
        drop(self);
    }
}

impl<T> Drop for Consumer<T> {
    fn drop(&mut self) {
        self.queue.detached.store(true, Ordering::SeqCst);
        let _g = self.queue.items.lock().unwrap_or_else(|e| e.into_inner());
        self.queue.not_full.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn topic(name: &str) -> Topic {
        Topic::new(name).unwrap()
    }

    #[test]
    fn topics_are_non_empty() {
        assert_eq!(Topic::new(""), Err(BusError::EmptyTopic));
        assert_eq!(topic("a"), topic("a"));
    }

    #[test]
    fn emit_without_subscribers_is_dropped() {
        let bus = EventBus::<u32>::new();
        assert_eq!(bus.producer(&topic("t")).emit(1), 0);
    }

    #[test]
    fn fan_out_to_every_subscriber() {
        let bus = EventBus::new();
        let t = topic("t");
        let consumers: Vec<_> = (0..3).map(|_| bus.subscribe(&t)).collect();
        assert_eq!(bus.producer(&t).emit("x"), 3);
        for c in &consumers {
            assert_eq!(c.try_consume(), Ok(Some("x")));
        }
    }

    #[test]
    fn per_topic_order() {
        let bus = EventBus::new();
        let t = topic("t");
        let (c1, c2) = (bus.subscribe(&t), bus.subscribe(&t));
        let p = bus.producer(&t);
        p.emit('x');
        p.emit('y');
        for c in [&c1, &c2] {
            assert_eq!(c.consume(), Ok('x'));
            assert_eq!(c.consume(), Ok('y'));
        }
    }

    #[test]
    fn no_history_replay() {
        let bus = EventBus::new();
        let t = topic("t");
        let p = bus.producer(&t);
        p.emit(1);
        let c = bus.subscribe(&t);
        assert_eq!(c.try_consume(), Ok(None));
        p.emit(2);
        assert_eq!(c.try_consume(), Ok(Some(2)));
    }

    #[test]
    fn topics_are_isolated() {
        let bus = EventBus::new();
        let c2 = bus.subscribe(&topic("t2"));
        bus.producer(&topic("t1")).emit(1);
        assert!(c2.is_empty());
    }

    #[test]
    fn consume_waits_for_emit() {
        let bus = EventBus::new();
        let t = topic("t");
        let c = bus.subscribe(&t);
        let p = bus.producer(&t);
        let h = thread::spawn(move || c.consume());
        thread::sleep(Duration::from_millis(10));
        p.emit(5);
        assert_eq!(h.join().unwrap(), Ok(5));
    }

    #[test]
    fn shutdown_drains_then_closes() {
        let bus = EventBus::new();
        let t = topic("t");
        let c = bus.subscribe(&t);
        bus.producer(&t).emit(1);
        bus.shutdown();
        assert_eq!(c.consume(), Ok(1));
        assert_eq!(c.consume(), Err(BusError::BusClosed));
        assert_eq!(bus.producer(&t).emit(2), 0);
    }

    #[test]
    fn shutdown_wakes_blocked_consumer() {
        let bus = EventBus::<u8>::new();
        let c = bus.subscribe(&topic("t"));
        let h = thread::spawn(move || c.consume());
        thread::sleep(Duration::from_millis(10));
        bus.shutdown();
        assert_eq!(h.join().unwrap(), Err(BusError::BusClosed));
    }

    #[test]
    fn duplicates_are_kept() {
        let bus = EventBus::new();
        let t = topic("t");
        let c = bus.subscribe(&t);
        let p = bus.producer(&t);
        p.emit(7);
        p.emit(7);
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn emit_blocks_on_full_queue() {
        let bus = EventBus::with_capacity(2);
        let t = topic("t");
        let c = bus.subscribe(&t);
        let p = bus.producer(&t);
        p.emit(1);
        p.emit(2);
        assert!(!p.can_emit());
        let h = thread::spawn(move || p.emit(3));
        thread::sleep(Duration::from_millis(20));
        assert!(!h.is_finished());
        assert_eq!(c.consume(), Ok(1));
        assert_eq!(h.join().unwrap(), 1);
        assert_eq!(c.consume(), Ok(2));
        assert_eq!(c.consume(), Ok(3));
    }

    #[test]
    fn unsubscribe_stops_delivery() {
        let bus = EventBus::new();
        let t = topic("t");
        let c = bus.subscribe(&t);
        let keep = bus.subscribe(&t);
        c.unsubscribe();
        assert_eq!(bus.producer(&t).emit(1), 1);
        assert_eq!(bus.subscriber_count(&t), 1);
        drop(keep);
    }

    #[test]
    fn fan_out_completeness_across_threads() {
        let bus = EventBus::new();
        let t = topic("t");
        let consumers: Vec<_> = (0..4).map(|_| bus.subscribe(&t)).collect();
        let producer = bus.producer(&t);
        let emitter = thread::spawn(move || {
            for i in 0..500u32 {
                producer.emit(i);
            }
        });
        let readers: Vec<_> = consumers
            .into_iter()
            .map(|c| thread::spawn(move || (0..500).map(|_| c.consume().unwrap()).collect::<Vec<_>>()))
            .collect();
        emitter.join().unwrap();
        for r in readers {
            assert_eq!(r.join().unwrap(), (0..500).collect::<Vec<_>>());
        }
    }
}
