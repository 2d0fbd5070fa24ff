use proptest::prelude::*;

use twinloop::bus::{EventBus, Topic};
use twinloop::digital_thread::{tap_channel, Direction, ThreadLog, ThreadRecorder};
use twinloop::machine::{process_event, StateMachineDef, TwinState};
use twinloop::model::{decode_message, encode_message, BitPayload, Message, OperatingState, Protocol};
use twinloop::sched::{Clock, LockstepScheduler};
use twinloop::transport::{encode_frame, open_emulated_link, pipe_pair, Connection, FrameDecoder, TunnelKind};

fn any_message() -> impl Strategy<Value = Message> {
    prop_oneof![
        any::<i16>().prop_map(Message::Command),
        any::<i32>().prop_map(Message::Measurement),
        (0u8..3).prop_map(|c| Message::Status(OperatingState::from_code(c).unwrap())),
    ]
}

fn any_response() -> impl Strategy<Value = Message> {
    any_message().prop_filter("PT to DT carries responses", Message::is_response)
}

fn any_state() -> impl Strategy<Value = OperatingState> {
    (0u8..3).prop_map(|c| OperatingState::from_code(c).unwrap())
}

fn drain(conn: &mut dyn Connection) -> Vec<BitPayload> {
    let mut out = Vec::new();
    while let Some(f) = conn.try_read_frame().unwrap() {
        out.push(f);
    }
    out
}

proptest! {
    #[test]
    fn framing_survives_any_chunking(
        payloads in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..40), 0..30),
        cuts in prop::collection::vec(1usize..17, 1..64),
    ) {
        let payloads: Vec<BitPayload> = payloads.into_iter().map(BitPayload::new).collect();
        let mut wire = Vec::new();
        for p in &payloads {
            wire.extend(encode_frame(p).unwrap());
        }
        let mut dec = FrameDecoder::new();
        let mut out = Vec::new();
        let (mut pos, mut i) = (0, 0);
        while pos < wire.len() {
            let n = cuts[i % cuts.len()].min(wire.len() - pos);
            dec.push(&wire[pos..pos + n]);
            pos += n;
            i += 1;
            while let Some(f) = dec.next_frame().unwrap() {
                out.push(f);
            }
        }
        prop_assert_eq!(out, payloads);
        prop_assert_eq!(dec.buffered(), 0);
    }

    #[test]
    fn codec_round_trips(m in any_message()) {
        prop_assert_eq!(decode_message(&encode_message(&m)), Ok(m));
    }

    #[test]
    fn bus_is_fifo_per_subscriber(items in prop::collection::vec(any::<u32>(), 0..200), subs in 1usize..5) {
        let bus = EventBus::with_capacity(256);
        let topic = Topic::new("t").unwrap();
        let consumers: Vec<_> = (0..subs).map(|_| bus.subscribe(&topic)).collect();
        let producer = bus.producer(&topic);
        for &x in &items {
            prop_assert_eq!(producer.emit(x), subs);
        }
        for c in &consumers {
            let mut got = Vec::new();
            while let Some(x) = c.try_consume().unwrap() {
                got.push(x);
            }
            prop_assert_eq!(&got, &items);
        }
    }

    #[test]
    fn transition_depends_only_on_sign(q in any_state(), a in any::<i16>(), b in any::<i16>()) {
        let def = StateMachineDef::builtin();
        if a.signum() == b.signum() {
            prop_assert_eq!(def.transition(q, a), def.transition(q, b));
        }
        let expected = match (q, a.signum()) {
            (OperatingState::Off, _) => OperatingState::Off,
            (_, 1) => OperatingState::Active,
            (_, 0) => OperatingState::Standby,
            _ => OperatingState::Off,
        };
        prop_assert_eq!(def.transition(q, a), expected);
    }

    #[test]
    fn off_absorbs_every_command_sequence(cmds in prop::collection::vec(any::<i16>(), 0..50)) {
        let mut s = TwinState { current: OperatingState::Off, period: -1 };
        for c in cmds {
            s = process_event(s, &Message::Command(c)).unwrap();
            prop_assert_eq!(s.current, OperatingState::Off);
            prop_assert_eq!(s.period, c);
        }
    }

    #[test]
    fn tap_is_transparent(msgs in prop::collection::vec(any_response(), 0..60)) {
        let recorder = ThreadRecorder::new(ThreadLog::in_memory(), Clock::logical());
        let (a, mut b) = pipe_pair(Protocol::Tcp, "a", "b", 128);
        let mut tapped = tap_channel(a, Direction::PtToDt, &recorder);
        let frames: Vec<BitPayload> = msgs.iter().map(encode_message).collect();
        for f in &frames {
            tapped.write_frame(f).unwrap();
        }
        prop_assert_eq!(drain(&mut b), frames);
        prop_assert_eq!(recorder.count(Direction::PtToDt), msgs.len() as u64);
        let recorded: Vec<Message> = recorder.records().iter().filter_map(|r| r.message().copied()).collect();
        prop_assert_eq!(recorded, msgs);
    }

    #[test]
    fn emulated_bridge_is_transparent(
        down in prop::collection::vec(any_message(), 0..20),
        up in prop::collection::vec(any_message(), 0..20),
        seed in any::<u64>(),
    ) {
        let (mut link, bridge) = open_emulated_link("prop", "dev", "drv", TunnelKind::Memory).unwrap();
        let mut sched = LockstepScheduler::new(Clock::logical(), seed);
        for t in bridge.into_tasks() {
            sched.spawn(t);
        }
        let down: Vec<BitPayload> = down.iter().map(encode_message).collect();
        let up: Vec<BitPayload> = up.iter().map(encode_message).collect();
        for f in &down {
            link.driver.write_frame(f).unwrap();
        }
        for f in &up {
            link.device.write_frame(f).unwrap();
        }
        sched.run_tick(0).unwrap();
        prop_assert_eq!(drain(&mut link.device), down);
        prop_assert_eq!(drain(&mut link.driver), up);
        prop_assert_eq!(link.device.protocol(), Protocol::Rs232);
    }
}
