//! Virtual clock and priority event queue.
//!
//! Events are ordered by `(fire_time, sequence)`; the sequence number is
//! assigned at scheduling time so events sharing a fire time are delivered
//! in FIFO order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("cannot schedule at t={at} s, clock is already at {clock} s")]
    SchedulingInPast { at: f64, clock: f64 },
}

/// Handle returned by [`EventQueue::schedule`]. Equal to the event's sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug, Clone)]
pub struct SimEvent<E> {
    pub fire_time: f64,
    pub sequence: u64,
    pub payload: E,
}

impl<E> PartialEq for SimEvent<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for SimEvent<E> {}

impl<E> PartialOrd for SimEvent<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for SimEvent<E> {
    // Reversed so that BinaryHeap (a max-heap) pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_time
            .total_cmp(&self.fire_time)
            .then_with(|| other.sequence.cmp(&self.sequence))
    }
}

#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<SimEvent<E>>,
    clock: f64,
    next_sequence: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            clock: 0.0,
            next_sequence: 1,
        }
    }

    /// Current virtual time in seconds.
    pub fn now(&self) -> f64 {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, at: f64, payload: E) -> Result<EventId, SimError> {
        // `!(at >= clock)` also rejects NaN.
        if at.is_nan() || at < self.clock {
            return Err(SimError::SchedulingInPast {
                at,
                clock: self.clock,
            });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.heap.push(SimEvent {
            fire_time: at,
            sequence,
            payload,
        });
        Ok(EventId(sequence))
    }

    /// Schedules `delay` seconds from now. Negative or NaN delays are errors.
    pub fn schedule_in(&mut self, delay: f64, payload: E) -> Result<EventId, SimError> {
        let at = self.clock + delay;
        if delay.is_nan() || delay < 0.0 {
            return Err(SimError::SchedulingInPast {
                at,
                clock: self.clock,
            });
        }
        self.schedule(at, payload)
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.fire_time)
    }

    /// Removes the earliest event and advances the clock to its fire time.
    pub fn pop(&mut self) -> Option<SimEvent<E>> {
        let event = self.heap.pop()?;
        debug_assert!(event.fire_time >= self.clock);
        self.clock = event.fire_time;
        Some(event)
    }

    fn advance_to(&mut self, t: f64) {
        if t > self.clock {
            self.clock = t;
        }
    }
}

/// Something that reacts to events and may schedule more of them.
pub trait Model {
    type Event;

    fn handle(&mut self, event: Self::Event, queue: &mut EventQueue<Self::Event>);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunStats {
    pub events_processed: u64,
    pub clock: f64,
}

pub struct SimEngine<M: Model> {
    pub queue: EventQueue<M::Event>,
    pub model: M,
    events_processed: u64,
}

impl<M: Model> SimEngine<M> {
    pub fn new(model: M) -> Self {
        Self {
            queue: EventQueue::new(),
            model,
            events_processed: 0,
        }
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    /// Processes every event with `fire_time <= t_end` in order, then leaves
    /// the clock at `t_end`. Events beyond `t_end` stay queued.
    pub fn run_until(&mut self, t_end: f64) -> RunStats {
        while let Some(t) = self.queue.peek_time() {
            if t > t_end {
                break;
            }
            let event = self.queue.pop().expect("peeked");
            self.events_processed += 1;
            self.model.handle(event.payload, &mut self.queue);
        }
        self.queue.advance_to(t_end);
        RunStats {
            events_processed: self.events_processed,
            clock: self.queue.now(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default)]
    struct Recorder {
        seen: Vec<(f64, char)>,
    }

    impl Model for Recorder {
        type Event = char;

        fn handle(&mut self, event: char, queue: &mut EventQueue<char>) {
            self.seen.push((queue.now(), event));
            if event == 'r' {
                queue.schedule_in(1.0, 's').unwrap();
            }
        }
    }

    #[test]
    fn first_event_at_clock_gets_id_one() {
        let mut q = EventQueue::new();
        assert_eq!(q.schedule(0.0, ()).unwrap(), EventId(1));
    }

    #[test]
    fn equal_fire_times_dequeue_fifo() {
        let mut q = EventQueue::new();
        q.schedule(5.0, 'A').unwrap();
        q.schedule(5.0, 'B').unwrap();
        q.schedule(1.0, 'C').unwrap();
        let order: Vec<char> = std::iter::from_fn(|| q.pop().map(|e| e.payload)).collect();
        assert_eq!(order, vec!['C', 'A', 'B']);
    }

    #[test]
    fn scheduling_in_past_is_rejected() {
        let mut q = EventQueue::new();
        q.schedule(5.0, 'x').unwrap();
        q.pop();
        assert_eq!(
            q.schedule(4.9, 'y'),
            Err(SimError::SchedulingInPast {
                at: 4.9,
                clock: 5.0
            })
        );
        assert!(q.schedule(f64::NAN, 'z').is_err());
        assert!(q.schedule_in(-0.1, 'z').is_err());
    }

    #[test]
    fn empty_run_advances_clock_to_end() {
        let mut engine = SimEngine::new(Recorder::default());
        let stats = engine.run_until(10.0);
        assert_eq!(stats.events_processed, 0);
        assert_eq!(stats.clock, 10.0);
    }

    #[test]
    fn single_event_is_processed_once() {
        let mut engine = SimEngine::new(Recorder::default());
        engine.queue.schedule(3.0, 'a').unwrap();
        let stats = engine.run_until(10.0);
        assert_eq!(stats.events_processed, 1);
        assert_eq!(engine.model.seen, vec![(3.0, 'a')]);
    }

    #[test]
    fn events_past_horizon_stay_queued() {
        let mut engine = SimEngine::new(Recorder::default());
        engine.queue.schedule(2.0, 'r').unwrap();
        engine.queue.schedule(20.0, 'l').unwrap();
        let stats = engine.run_until(2.5);
        assert_eq!(stats.events_processed, 1);
        assert_eq!(engine.queue.len(), 2);
        let stats = engine.run_until(3.0);
        assert_eq!(stats.events_processed, 2);
        assert_eq!(engine.model.seen.last(), Some(&(3.0, 's')));
    }

    proptest::proptest! {
        #[test]
        fn pops_are_sorted_by_time_then_sequence(times in proptest::collection::vec(0u8..20, 1..60)) {
            let mut q = EventQueue::new();
            for (i, t) in times.iter().enumerate() {
                q.schedule(*t as f64, i).unwrap();
            }
            let mut last = (f64::NEG_INFINITY, 0u64);
            while let Some(e) = q.pop() {
                proptest::prop_assert!(e.fire_time > last.0 || (e.fire_time == last.0 && e.sequence > last.1));
                last = (e.fire_time, e.sequence);
            }
        }
    }
}
