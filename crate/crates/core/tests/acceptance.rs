// SPDX-License-Identifier: Apache-2.0

//! Acceptance criteria. Runs without the libtest harness so that the
//! allocation counter sees only this thread's work; prints one PASS/FAIL
//! line per criterion and exits non-zero if any fails.

use std::alloc::{GlobalAlloc, Layout, System};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use qlink::config::{derive_timing, load_scenario_path, Scenario};
use qlink::engine::{DeviceId, SimTime};
use qlink::harness::{emit_report, run_scenario, ReportFormat, Simulation};
use qlink::mhp::*;
use qlink::pipeline::{
    Device, Disposition, NoExterns, Packet, PipelineProgram, RecordingExterns, Trap,
};

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let live = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(live, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

// Pinned tolerances and budgets.
const NODE_PATH_BUDGET: Duration = Duration::from_secs(1);
const STATION_BUDGET: Duration = Duration::from_secs(1);
const IDEAL_BUDGET: Duration = Duration::from_secs(1);
const HERALD_RATE_BUDGET: Duration = Duration::from_secs(10);
const LATENCY_BUDGET: Duration = Duration::from_secs(1);
const DETERMINISM_BUDGET: Duration = Duration::from_secs(5);
const INTERPRETER_BUDGET: Duration = Duration::from_secs(1);
const SCALE_BUDGET: Duration = Duration::from_secs(10);

const HERALD_CYCLES: u32 = 20_000;
const HERALD_SEEDS: [u64; 5] = [11, 22, 33, 44, 55];
const HERALD_P: f64 = 0.8 * 0.8 * 0.5;
/// Three standard deviations of a binomial fraction.
const HERALD_SIGMAS: f64 = 3.0;

const SCALE_CYCLES: u32 = 100_000;
const SCALE_BASELINE_CYCLES: u32 = 10_000;
/// Allowed rise in peak heap between the baseline and the full run.
/// Retaining even 8 bytes per extra cycle would need over 700 KiB.
const SCALE_HEAP_GROWTH_BYTES: usize = 16 * 1024;

type Outcome = Result<String, String>;

fn example(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("examples")
        .join(name);
    load_scenario_path(&path).expect("shipped scenario")
}

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn node_path() -> Outcome {
    for (ports, pair) in [
        (NodePorts::single(1, 1), PortPair { qport: 1, cport: 1 }),
        (
            NodePorts {
                pairs: vec![
                    PortPair { qport: 1, cport: 5 },
                    PortPair { qport: 2, cport: 6 },
                ],
            },
            PortPair { qport: 2, cport: 6 },
        ),
    ] {
        let mut d = Device::new(DeviceId(0));
        d.load_program(&build_node_program(&ports))
            .map_err(|e| e.to_string())?;
        for (cycle, slot, params) in [(0u32, 0u16, 0u16), (5, 0, 2), (u32::MAX, 3, 0xFFFF)] {
            d.install_entry(
                GEN_TBL,
                &[cycle as u64],
                &gen_call(pair.qport, pair.cport, slot, params),
            )
            .map_err(|e| e.to_string())?;
            let mut ext = RecordingExterns::default();
            let timer = WireMessage::Timer { cycle }.encode();
            let out = d
                .execute(&Packet::new(timer, CPU_PORT, 0), &mut ext)
                .map_err(|e| e.to_string())?;
            let expected_call = (
                EXTERN_EMIT_PHOTON.to_string(),
                vec![pair.qport as u64, slot as u64, cycle as u64, params as u64],
            );
            check(
                ext.calls == vec![expected_call],
                format!("extern calls {:?}", ext.calls),
            )?;
            let gen = WireMessage::Gen {
                cycle,
                qubit_slot: slot,
                attempt_params: params,
            }
            .encode();
            check(
                out == Disposition::Deliver(vec![(pair.cport, gen)]),
                format!("cycle {cycle}: {out:?}"),
            )?;
        }
    }
    Ok("one emit_photon and one GEN per hit, fields match".into())
}

fn station() -> Result<Device, String> {
    let mut d = Device::new(DeviceId(2));
    d.load_program(&build_midpoint_program(300_000))
        .map_err(|e| e.to_string())?;
    d.install_entry(MP_TBL, &[1], &set_peer_call(2, 1, 0))
        .and_then(|_| d.install_entry(MP_TBL, &[2], &set_peer_call(1, 1, 0)))
        .and_then(|_| d.install_entry(DET_TBL, &[0], &set_pair_call(1, 2, 1)))
        .map_err(|e| e.to_string())?;
    d.create_mcast_group(1, &[1, 2])
        .map_err(|e| e.to_string())?;
    Ok(d)
}

fn station_orders() -> Outcome {
    const ORDERS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let gen = |cycle, params| {
        WireMessage::Gen {
            cycle,
            qubit_slot: 0,
            attempt_params: params,
        }
        .encode()
    };
    for (params_b, outcome) in [(0u16, ReplyOutcome::Success), (9, ReplyOutcome::Error)] {
        for order in ORDERS {
            let frames = [
                (1u16, gen(3, 0)),
                (2, gen(3, params_b)),
                (
                    CPU_PORT,
                    WireMessage::Detector {
                        outcome: 1,
                        det_id: 0,
                        bin: 3,
                    }
                    .encode(),
                ),
            ];
            let mut d = station()?;
            let mut replies = Vec::new();
            for i in order {
                let (port, bytes) = &frames[i];
                let t = if *port == CPU_PORT {
                    1_200_000
                } else {
                    1_025_100
                };
                match d.execute(&Packet::new(bytes.clone(), *port, t), &mut NoExterns) {
                    Ok(Disposition::Deliver(copies)) => replies.push(copies),
                    Ok(Disposition::Dropped) => {}
                    Err(e) => return Err(format!("trap {e}")),
                }
            }
            let reply = WireMessage::MpReply(MpReply {
                outcome,
                cycle: 3,
                pair_seq: (outcome == ReplyOutcome::Success) as u32,
            })
            .encode();
            check(
                replies == vec![vec![(1, reply.clone()), (2, reply)]],
                format!("{outcome:?} order {order:?}: {replies:?}"),
            )?;
        }
    }
    Ok("6/6 orders give one multicast reply; mismatch gives ERROR in 6/6".into())
}

fn ideal_link() -> Outcome {
    let s = example("ideal.toml");
    check(
        s.run.max_cycles == Some(1000)
            && s.clock.period_ns == 300_000
            && s.midpoint.detector.p_bsm == 1.0
            && s.midpoint
                .arms
                .iter()
                .all(|a| a.length_m == 25_000 && a.p_arrive == Some(1.0)),
        "ideal scenario parameters",
    )?;
    let r = run_scenario(&s, 1).map_err(|e| e.to_string())?;
    for n in &r.nodes {
        check(
            n.successes == 1000,
            format!("node {} successes {}", n.node, n.successes),
        )?;
    }
    check(
        r.pair_seq_final == 1000,
        format!("pair_seq_final {}", r.pair_seq_final),
    )?;
    check(r.agreement, "agreement")?;
    check(r.traps == 0, format!("traps {}", r.traps))?;
    Ok("1000/1000 SUCCESS at both nodes, pair_seq_final 1000, zero traps".into())
}

fn herald_rate() -> Outcome {
    let s = example("lossy.toml");
    check(s.run.max_cycles == Some(HERALD_CYCLES), "lossy cycle count")?;
    let band = HERALD_SIGMAS * (HERALD_P * (1.0 - HERALD_P) / HERALD_CYCLES as f64).sqrt();
    let mut seen = Vec::new();
    for seed in HERALD_SEEDS {
        let r = run_scenario(&s, seed).map_err(|e| e.to_string())?;
        check(
            r.agreement && r.traps == 0,
            format!("seed {seed} agreement/traps"),
        )?;
        let f = r.success_fraction;
        check(
            (f - HERALD_P).abs() <= band,
            format!("seed {seed}: fraction {f:.5} outside {HERALD_P:.2} +/- {band:.5}"),
        )?;
        seen.push(format!("{f:.4}"));
    }
    Ok(format!(
        "fractions [{}] within {HERALD_P:.2} +/- {band:.4}",
        seen.join(", ")
    ))
}

fn latency_oracle() -> Outcome {
    let mut asym = example("asymmetric.toml");
    for arm in &mut asym.midpoint.arms {
        arm.attenuation_db_per_km = None;
        arm.p_arrive = Some(1.0);
    }
    let mut checked = 0;
    for s in [example("ideal.toml"), asym] {
        let plan = derive_timing(&s);
        let mut sim = Simulation::new(&s, 3).map_err(|e| e.to_string())?;
        sim.run_until(SimTime(u64::MAX));
        for k in 0..2 {
            let log = sim.log(k);
            check(
                log.len() == 1000,
                format!("node {k} saw {} replies", log.len()),
            )?;
            for (c, e) in log.iter().enumerate() {
                let want = plan.reply(k, c as u32);
                check(
                    e.cycle == c as u32 && e.reply_time.ns() == want,
                    format!("node {k} cycle {c}: got {} want {want}", e.reply_time),
                )?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} reply times equal the closed-form plan"))
}

fn determinism() -> Outcome {
    let mut runs = 0;
    for name in ["ideal.toml", "lossy.toml", "asymmetric.toml"] {
        let s = example(name);
        for seed in [1, 2, 3] {
            let a = run_scenario(&s, seed).map_err(|e| e.to_string())?;
            let b = run_scenario(&s, seed).map_err(|e| e.to_string())?;
            for format in [ReportFormat::Json, ReportFormat::CsvSummary] {
                check(
                    emit_report(&a, format) == emit_report(&b, format),
                    format!("{name} seed {seed} differs"),
                )?;
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} scenario/seed pairs byte-identical"))
}

fn interpreter_device(apply: &str) -> Result<Device, String> {
    let doc = format!(
        r#"{{
  "headers": [
    {{ "name": "h", "fields": [{{ "name": "a", "width": 8 }}, {{ "name": "b", "width": 8 }}] }},
    {{ "name": "t", "fields": [{{ "name": "x", "width": 16 }}] }}
  ],
  "metadata": [{{ "name": "m", "width": 8 }}],
  "parser": [{{ "name": "start", "extract": ["h"], "transition": "accept" }}],
  "actions": [
    {{ "name": "set_b", "params": [{{ "name": "v", "width": 8 }}],
      "body": [{{ "op": "set_field", "field": "h.b", "value": {{ "param": "v" }} }}] }},
    {{ "name": "miss",
      "body": [{{ "op": "set_field", "field": "h.b", "value": {{ "const": 238 }} }}] }}
  ],
  "tables": [{{ "name": "tbl", "keys": ["h.a"], "actions": ["set_b", "miss"],
               "default_action": {{ "action": "miss" }} }}],
  "registers": [{{ "name": "r", "width": 8, "count": 4 }}],
  "externs": [],
  "apply": {apply}
}}"#
    );
    let program = PipelineProgram::from_json(&doc).map_err(|e| e.to_string())?;
    let mut d = Device::new(DeviceId(0));
    d.load_program(&program).map_err(|e| e.to_string())?;
    Ok(d)
}

fn run1(d: &mut Device, bytes: &[u8]) -> Result<Disposition, Trap> {
    d.execute(&Packet::new(bytes.to_vec(), 0, 0), &mut NoExterns)
}

fn unicast(port: u16, bytes: &[u8]) -> Result<Disposition, Trap> {
    Ok(Disposition::Deliver(vec![(port, bytes.to_vec())]))
}

fn interpreter() -> Outcome {
    // Miss runs the default action.
    let mut d = interpreter_device(
        r#"[{ "op": "apply", "table": "tbl" }, { "op": "forward", "port": { "const": 1 } }]"#,
    )?;
    d.install_entry(
        "tbl",
        &[1],
        &qlink::pipeline::ActionCall::new("set_b", &[0x11]),
    )
    .map_err(|e| e.to_string())?;
    check(run1(&mut d, &[1, 0]) == unicast(1, &[1, 0x11]), "table hit")?;
    check(
        run1(&mut d, &[2, 0]) == unicast(1, &[2, 238]),
        "miss -> default",
    )?;

    // Register read after write, across packets.
    let mut d = interpreter_device(
        r#"[{ "op": "if", "cond": { "eq": [{ "field": "h.a" }, { "const": 0 }] },
              "then": [{ "op": "reg_write", "register": "r", "index": { "const": 1 }, "value": { "field": "h.b" } },
                       { "op": "drop" }],
              "else": [{ "op": "reg_read", "register": "r", "index": { "const": 1 }, "dest": "meta.m" },
                       { "op": "set_field", "field": "h.b", "value": { "field": "meta.m" } },
                       { "op": "forward", "port": { "const": 1 } }] }]"#,
    )?;
    check(
        run1(&mut d, &[0, 0x5a]) == Ok(Disposition::Dropped),
        "write packet",
    )?;
    check(
        run1(&mut d, &[1, 0]) == unicast(1, &[1, 0x5a]),
        "read after write",
    )?;

    // Multicast produces one copy per group member.
    let mut d = interpreter_device(r#"[{ "op": "multicast", "group": { "const": 3 } }]"#)?;
    d.create_mcast_group(3, &[1, 2, 4])
        .map_err(|e| e.to_string())?;
    let copies = vec![(1, vec![7, 8]), (2, vec![7, 8]), (4, vec![7, 8])];
    check(
        run1(&mut d, &[7, 8]) == Ok(Disposition::Deliver(copies)),
        "multicast copies",
    )?;

    // Header add/remove: deparse valid headers in order, then the payload.
    let mut d = interpreter_device(
        r#"[{ "op": "add_header", "header": "t" },
            { "op": "set_field", "field": "t.x", "value": { "const": 48879 } },
            { "op": "remove_header", "header": "h" },
            { "op": "forward", "port": { "const": 2 } }]"#,
    )?;
    check(
        run1(&mut d, &[1, 2, 9, 9]) == unicast(2, &[0xbe, 0xef, 9, 9]),
        "header layout",
    )?;

    // 8-bit arithmetic wraps.
    let mut d = interpreter_device(
        r#"[{ "op": "set_field", "field": "h.b", "value": { "add": [{ "field": "h.b" }, { "const": 1 }] } },
            { "op": "forward", "port": { "const": 1 } }]"#,
    )?;
    check(
        run1(&mut d, &[0, 255]) == unicast(1, &[0, 0]),
        "255 + 1 at 8 bits",
    )?;

    // Out-of-range register index traps.
    let mut d = interpreter_device(
        r#"[{ "op": "reg_read", "register": "r", "index": { "const": 4 }, "dest": "meta.m" },
            { "op": "forward", "port": { "const": 1 } }]"#,
    )?;
    check(
        matches!(
            run1(&mut d, &[0, 0]),
            Err(Trap::RegisterIndex {
                index: 4,
                count: 4,
                ..
            })
        ),
        "register index trap",
    )?;
    check(d.stats().traps == 1, "trap counted")?;
    Ok("miss/default, read-after-write, multicast, add/remove, wraparound, index trap".into())
}

/// Peak heap above the level at entry while running `cycles` lossy cycles.
fn scale_run(cycles: u32) -> Result<(usize, Duration, u64), String> {
    let mut s = example("lossy.toml");
    s.run.max_cycles = Some(cycles);
    let start = Instant::now();
    let base = LIVE.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let mut sim = Simulation::new(&s, 8).map_err(|e| e.to_string())?;
    sim.set_retain_history(false);
    sim.run_until(SimTime(u64::MAX));
    let peak = PEAK.load(Ordering::Relaxed) - base;
    let report = sim.report();
    check(
        report.agreement && report.traps == 0,
        "scale run agreement/traps",
    )?;
    check(
        report.nodes[0].attempts == cycles as u64,
        "scale run attempts",
    )?;
    Ok((peak, start.elapsed(), report.nodes[0].successes))
}

fn scale() -> Outcome {
    let (small, _, _) = scale_run(SCALE_BASELINE_CYCLES)?;
    let (large, elapsed, successes) = scale_run(SCALE_CYCLES)?;
    check(
        elapsed < SCALE_BUDGET,
        format!("{SCALE_CYCLES} cycles took {elapsed:?}"),
    )?;
    check(
        large <= small + SCALE_HEAP_GROWTH_BYTES,
        format!(
            "peak heap {small} B at {SCALE_BASELINE_CYCLES} cycles, {large} B at {SCALE_CYCLES}"
        ),
    )?;
    Ok(format!(
        "{SCALE_CYCLES} cycles in {elapsed:.2?}, {successes} pairs, peak heap {large} B (vs {small} B at {SCALE_BASELINE_CYCLES})"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 8] = [
        ("1 node path conformance", node_path, NODE_PATH_BUDGET),
        (
            "2 station conformance under all orders",
            station_orders,
            STATION_BUDGET,
        ),
        ("3 ideal-link exactness", ideal_link, IDEAL_BUDGET),
        ("4 statistical herald rate", herald_rate, HERALD_RATE_BUDGET),
        ("5 latency oracle", latency_oracle, LATENCY_BUDGET),
        ("6 determinism", determinism, DETERMINISM_BUDGET),
        ("7 interpreter conformance", interpreter, INTERPRETER_BUDGET),
        ("8 scale", scale, SCALE_BUDGET),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => {
                Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}"))
            }
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} ({elapsed:.2?})"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} ({elapsed:.2?})");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
