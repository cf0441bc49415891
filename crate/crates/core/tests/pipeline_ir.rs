// SPDX-License-Identifier: Apache-2.0

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Zero};
use proptest::prelude::*;

use qlink::engine::DeviceId;
use qlink::pipeline::*;

fn fs(name: &str, width: u8) -> FieldSpec {
    FieldSpec {
        name: name.to_string(),
        width,
    }
}

/// Two headers `h` (a:8, b:8) and `t` (x:16), a counter register and a
/// single exact-match table keyed on `h.a`.
fn test_program(apply: Vec<Instruction>) -> PipelineProgram {
    PipelineProgram {
        headers: vec![
            HeaderSpec {
                name: "h".into(),
                fields: vec![fs("a", 8), fs("b", 8)],
            },
            HeaderSpec {
                name: "t".into(),
                fields: vec![fs("x", 16)],
            },
        ],
        metadata: vec![fs("m", 8), fs("wide", 64)],
        parser: vec![ParserState {
            name: "start".into(),
            extract: vec!["h".into()],
            transition: Transition::Accept,
        }],
        actions: vec![
            ActionSpec {
                name: "mark".into(),
                params: vec![fs("v", 8)],
                body: vec![
                    Instruction::set("h.b", Expr::param("v")),
                    Instruction::Forward {
                        port: Expr::Const(1),
                    },
                ],
            },
            ActionSpec {
                name: "miss".into(),
                params: vec![],
                body: vec![
                    Instruction::set("h.b", Expr::Const(0xEE)),
                    Instruction::Forward {
                        port: Expr::Const(2),
                    },
                ],
            },
            ActionSpec {
                name: "drop".into(),
                params: vec![],
                body: vec![Instruction::Drop],
            },
        ],
        tables: vec![TableSpec {
            name: "tbl".into(),
            keys: vec!["h.a".parse().unwrap()],
            actions: vec!["mark".into(), "miss".into(), "drop".into()],
            default_action: ActionCall::new("miss", &[]),
        }],
        registers: vec![RegisterSpec {
            name: "r".into(),
            width: 8,
            count: 4,
        }],
        externs: vec!["ping".into()],
        apply,
    }
}

fn device(apply: Vec<Instruction>) -> Device {
    let mut d = Device::new(DeviceId(7));
    d.load_program(&test_program(apply)).unwrap();
    d
}

fn run(d: &mut Device, bytes: &[u8]) -> Result<Disposition, Trap> {
    d.execute(&Packet::new(bytes.to_vec(), 3, 1234), &mut NoExterns)
}

fn unicast(port: u16, bytes: &[u8]) -> Disposition {
    Disposition::Deliver(vec![(port, bytes.to_vec())])
}

#[test]
fn table_hit_and_miss() {
    let mut d = device(vec![Instruction::apply("tbl")]);
    d.install_entry("tbl", &[5], &ActionCall::new("mark", &[0x42]))
        .unwrap();
    assert_eq!(run(&mut d, &[5, 0]), Ok(unicast(1, &[5, 0x42])));
    // Miss runs the declared default action.
    assert_eq!(run(&mut d, &[6, 0]), Ok(unicast(2, &[6, 0xEE])));
}

#[test]
fn default_action_override() {
    let mut d = device(vec![Instruction::apply("tbl")]);
    d.set_default_action("tbl", &ActionCall::new("mark", &[9]))
        .unwrap();
    assert_eq!(run(&mut d, &[1, 0]), Ok(unicast(1, &[1, 9])));
    d.set_default_action("tbl", &ActionCall::new("drop", &[]))
        .unwrap();
    assert_eq!(run(&mut d, &[1, 0]), Ok(Disposition::Dropped));
    assert_eq!(
        d.set_default_action("tbl", &ActionCall::new("nope", &[])),
        Err(TableError::BadAction {
            table: "tbl".into(),
            action: "nope".into()
        })
    );
}

#[test]
fn install_entry_errors() {
    let mut d = device(vec![]);
    let call = ActionCall::new("mark", &[1]);
    d.install_entry("tbl", &[5], &call).unwrap();
    assert!(matches!(
        d.install_entry("tbl", &[5], &call),
        Err(TableError::Duplicate { .. })
    ));
    assert!(matches!(
        d.install_entry("nope", &[5], &call),
        Err(TableError::UnknownTable(_))
    ));
    assert!(matches!(
        d.install_entry("tbl", &[6], &ActionCall::new("mark", &[256])),
        Err(TableError::WidthMismatch { .. })
    ));
    assert!(matches!(
        d.install_entry("tbl", &[256], &call),
        Err(TableError::WidthMismatch { .. })
    ));
    assert!(matches!(
        d.install_entry("tbl", &[7], &ActionCall::new("mark", &[])),
        Err(TableError::WidthMismatch { .. })
    ));
    assert_eq!(d.entry_count("tbl"), Some(1));

    d.modify_entry("tbl", &[5], &ActionCall::new("drop", &[]))
        .unwrap();
    d.delete_entry("tbl", &[5]).unwrap();
    assert!(matches!(
        d.delete_entry("tbl", &[5]),
        Err(TableError::Missing { .. })
    ));
}

#[test]
fn register_read_after_write() {
    let mut d = device(vec![
        Instruction::reg_write("r", Expr::Const(3), Expr::Const(7)),
        Instruction::reg_read("r", Expr::Const(3), "h.b"),
        Instruction::Forward {
            port: Expr::Const(1),
        },
    ]);
    assert_eq!(run(&mut d, &[0, 0]), Ok(unicast(1, &[0, 7])));
    assert_eq!(d.register_read("r", 3), Ok(7));
}

#[test]
fn register_index_out_of_range_traps() {
    let mut d = device(vec![
        Instruction::reg_write("r", Expr::Const(0), Expr::Const(1)),
        Instruction::reg_write("r", Expr::Const(4), Expr::Const(7)),
        Instruction::Forward {
            port: Expr::Const(1),
        },
    ]);
    assert_eq!(
        run(&mut d, &[0, 0]),
        Err(Trap::RegisterIndex {
            register: "r".into(),
            index: 4,
            count: 4
        })
    );
    assert_eq!(d.stats().traps, 1);
    assert_eq!(d.stats().dropped, 1);
    // Writes before the trap stand.
    assert_eq!(d.register_read("r", 0), Ok(1));
}

#[test]
fn control_plane_register_access() {
    let mut d = device(vec![
        Instruction::reg_read("r", Expr::Const(2), "h.b"),
        Instruction::Forward {
            port: Expr::Const(1),
        },
    ]);
    d.register_write("r", 2, 0x5A).unwrap();
    assert_eq!(run(&mut d, &[0, 0]), Ok(unicast(1, &[0, 0x5A])));
    assert!(matches!(
        d.register_read("r", 4),
        Err(RegisterError::OutOfRange {
            index: 4,
            count: 4,
            ..
        })
    ));
    assert!(matches!(
        d.register_read("nope", 0),
        Err(RegisterError::Unknown(_))
    ));
    // Truncated to the 8-bit cell.
    d.register_write("r", 1, 0x1FF).unwrap();
    assert_eq!(d.register_read("r", 1), Ok(0xFF));
}

#[test]
fn eight_bit_wraparound() {
    let mut d = device(vec![
        Instruction::set("h.a", Expr::add(Expr::field("h.a"), Expr::Const(1))),
        Instruction::Forward {
            port: Expr::Const(1),
        },
    ]);
    assert_eq!(run(&mut d, &[255, 9]), Ok(unicast(1, &[0, 9])));
}

#[test]
fn multicast_copies() {
    let mut d = device(vec![Instruction::Multicast {
        group: Expr::Const(1),
    }]);
    d.create_mcast_group(1, &[1, 2, 5]).unwrap();
    let out = run(&mut d, &[1, 2, 3]).unwrap();
    let Disposition::Deliver(copies) = out else {
        panic!("expected delivery")
    };
    assert_eq!(copies.len(), 3);
    assert_eq!(
        copies.iter().map(|c| c.0).collect::<Vec<_>>(),
        vec![1, 2, 5]
    );
    assert!(copies.iter().all(|c| c.1 == [1, 2, 3]));
    assert_eq!(d.stats().multicast_copies, 3);
}

#[test]
fn multicast_to_missing_group_traps() {
    let mut d = device(vec![Instruction::Multicast {
        group: Expr::Const(9),
    }]);
    assert_eq!(run(&mut d, &[1, 2]), Err(Trap::UnknownGroup(9)));
}

#[test]
fn header_add_remove_layout() {
    // Adding `t` after `h` in declaration order places it after `h`; the
    // unparsed payload follows the headers.
    let mut d = device(vec![
        Instruction::add_header("t"),
        Instruction::set("t.x", Expr::Const(0xBEEF)),
        Instruction::Forward {
            port: Expr::Const(1),
        },
    ]);
    assert_eq!(
        run(&mut d, &[1, 2, 0xAA]),
        Ok(unicast(1, &[1, 2, 0xBE, 0xEF, 0xAA]))
    );

    let mut d = device(vec![
        Instruction::remove_header("h"),
        Instruction::Forward {
            port: Expr::Const(1),
        },
    ]);
    assert_eq!(run(&mut d, &[1, 2, 0xAA]), Ok(unicast(1, &[0xAA])));
}

#[test]
fn short_packet_traps() {
    let mut d = device(vec![Instruction::Forward {
        port: Expr::Const(1),
    }]);
    assert!(matches!(run(&mut d, &[1]), Err(Trap::ShortPacket { .. })));
}

#[test]
fn last_disposition_wins_and_no_decision_drops() {
    let mut d = device(vec![
        Instruction::Drop,
        Instruction::Multicast {
            group: Expr::Const(1),
        },
        Instruction::Forward {
            port: Expr::Const(4),
        },
    ]);
    d.create_mcast_group(1, &[1, 2]).unwrap();
    assert_eq!(run(&mut d, &[0, 0]), Ok(unicast(4, &[0, 0])));

    let mut d = device(vec![]);
    assert_eq!(run(&mut d, &[0, 0]), Ok(Disposition::Dropped));
}

#[test]
fn externs_are_invoked_synchronously() {
    let mut d = device(vec![
        Instruction::Extern {
            name: "ping".into(),
            args: vec![Expr::field("meta.ingress_port"), Expr::field("h.a")],
        },
        Instruction::Forward {
            port: Expr::Const(1),
        },
    ]);
    let mut rec = RecordingExterns::default();
    d.execute(&Packet::new(vec![9, 0], 3, 0), &mut rec).unwrap();
    assert_eq!(rec.calls, vec![("ping".to_string(), vec![3, 9])]);
    assert!(matches!(
        d.execute(&Packet::new(vec![9, 0], 3, 0), &mut NoExterns),
        Err(Trap::Extern { .. })
    ));
}

#[test]
fn interpreter_is_pure() {
    let apply = vec![
        Instruction::reg_read("r", Expr::Const(0), "meta.m"),
        Instruction::reg_write(
            "r",
            Expr::Const(0),
            Expr::add(Expr::field("meta.m"), Expr::field("h.a")),
        ),
        Instruction::apply("tbl"),
    ];
    let mut a = device(apply.clone());
    let mut b = device(apply);
    for d in [&mut a, &mut b] {
        d.install_entry("tbl", &[3], &ActionCall::new("mark", &[1]))
            .unwrap();
    }
    for pkt in [[3u8, 0], [4, 1], [3, 7], [200, 0]] {
        assert_eq!(run(&mut a, &pkt), run(&mut b, &pkt));
        assert_eq!(a.register_read("r", 0), b.register_read("r", 0));
    }
    assert_eq!(a.register_read("r", 0), Ok((3 + 4 + 3 + 200) % 256));
}

// ---- static validation: one curated mutant per rule ----

fn expect_err(p: PipelineProgram, pred: impl Fn(&ProgramErrorKind) -> bool) {
    match compile(&p) {
        Ok(_) => panic!("mutant accepted"),
        Err(e) => assert!(pred(&e.kind), "unexpected error: {e}"),
    }
}

#[test]
fn rejects_unresolved_register() {
    let p = test_program(vec![Instruction::reg_write(
        "missing",
        Expr::Const(0),
        Expr::Const(0),
    )]);
    let err = compile(&p).unwrap_err();
    assert_eq!(err.location, "apply[0]");
    assert_eq!(
        err.kind,
        ProgramErrorKind::Unresolved {
            what: "register",
            name: "missing".into()
        }
    );
}

#[test]
fn rejects_unresolved_names_of_every_kind() {
    expect_err(test_program(vec![Instruction::apply("nope")]), |k| {
        matches!(k, ProgramErrorKind::Unresolved { what: "table", .. })
    });
    expect_err(
        test_program(vec![Instruction::set("h.zz", Expr::Const(0))]),
        |k| matches!(k, ProgramErrorKind::Unresolved { what: "field", .. }),
    );
    expect_err(test_program(vec![Instruction::add_header("q")]), |k| {
        matches!(k, ProgramErrorKind::Unresolved { what: "header", .. })
    });
    expect_err(
        test_program(vec![Instruction::Extern {
            name: "nope".into(),
            args: vec![],
        }]),
        |k| matches!(k, ProgramErrorKind::Unresolved { what: "extern", .. }),
    );
    expect_err(
        test_program(vec![Instruction::set("h.a", Expr::param("v"))]),
        |k| {
            matches!(
                k,
                ProgramErrorKind::Unresolved {
                    what: "action parameter",
                    ..
                }
            )
        },
    );
    let mut p = test_program(vec![]);
    p.tables[0].actions.push("ghost".into());
    expect_err(p, |k| {
        matches!(k, ProgramErrorKind::Unresolved { what: "action", .. })
    });
    let mut p = test_program(vec![]);
    p.parser[0].transition = Transition::Goto("elsewhere".into());
    expect_err(p, |k| {
        matches!(
            k,
            ProgramErrorKind::Unresolved {
                what: "parser state",
                ..
            }
        )
    });
}

#[test]
fn rejects_parser_cycle() {
    let mut p = test_program(vec![]);
    p.parser = vec![
        ParserState {
            name: "start".into(),
            extract: vec!["h".into()],
            transition: Transition::Goto("loop".into()),
        },
        ParserState {
            name: "loop".into(),
            extract: vec![],
            transition: Transition::Select {
                field: "h.a".parse().unwrap(),
                cases: vec![SelectCase {
                    value: 1,
                    next: "start".into(),
                }],
                default: "accept".into(),
            },
        },
    ];
    expect_err(p, |k| matches!(k, ProgramErrorKind::ParserCycle { .. }));
}

#[test]
fn rejects_missing_start_state() {
    let mut p = test_program(vec![]);
    p.parser[0].name = "begin".into();
    expect_err(p, |k| *k == ProgramErrorKind::NoStartState);
}

#[test]
fn rejects_duplicates() {
    let mut p = test_program(vec![]);
    p.registers.push(p.registers[0].clone());
    expect_err(p, |k| {
        matches!(
            k,
            ProgramErrorKind::Duplicate {
                what: "register",
                ..
            }
        )
    });
    let mut p = test_program(vec![]);
    p.metadata.push(fs("ingress_port", 16));
    expect_err(p, |k| matches!(k, ProgramErrorKind::Duplicate { .. }));
}

#[test]
fn rejects_bad_widths() {
    let mut p = test_program(vec![]);
    p.headers[0].fields[0].width = 65;
    expect_err(p, |k| matches!(k, ProgramErrorKind::BadWidth { width: 65 }));
    let mut p = test_program(vec![]);
    p.headers[1].fields[0].width = 12;
    expect_err(p, |k| matches!(k, ProgramErrorKind::UnalignedHeader { .. }));
    let mut p = test_program(vec![]);
    p.registers[0].count = 0;
    expect_err(p, |k| matches!(k, ProgramErrorKind::EmptyRegister { .. }));
}

#[test]
fn rejects_narrowing_assignment() {
    expect_err(
        test_program(vec![Instruction::set("h.a", Expr::field("meta.wide"))]),
        |k| matches!(k, ProgramErrorKind::WidthMismatch { .. }),
    );
    expect_err(
        test_program(vec![Instruction::set("h.a", Expr::Const(256))]),
        |k| matches!(k, ProgramErrorKind::WidthMismatch { .. }),
    );
    expect_err(
        test_program(vec![Instruction::reg_write(
            "r",
            Expr::Const(0),
            Expr::field("t.x"),
        )]),
        |k| matches!(k, ProgramErrorKind::WidthMismatch { .. }),
    );
}

#[test]
fn rejects_default_action_not_permitted() {
    let mut p = test_program(vec![]);
    p.tables[0].actions = vec!["mark".into()];
    expect_err(p, |k| {
        matches!(k, ProgramErrorKind::ActionNotPermitted { .. })
    });
    let mut p = test_program(vec![]);
    p.tables[0].default_action = ActionCall::new("mark", &[]);
    expect_err(p, |k| matches!(k, ProgramErrorKind::Arity { .. }));
}

#[test]
fn rejects_apply_inside_action() {
    let mut p = test_program(vec![]);
    p.actions[0].body.push(Instruction::apply("tbl"));
    expect_err(p, |k| matches!(k, ProgramErrorKind::ApplyInAction { .. }));
}

#[test]
fn document_parse_errors() {
    let text = test_program(vec![Instruction::Drop]).to_json();
    let truncated = &text[..text.len() / 2];
    let err = PipelineProgram::from_json(truncated).unwrap_err();
    assert!(err.line > 0);
    let unknown = text.replace("\"drop\"", "\"teleport\"");
    assert!(PipelineProgram::from_json(&unknown).is_err());
}

// ---- modulo-width arithmetic against a big-integer oracle ----

#[derive(Debug, Clone)]
enum Tree {
    Leaf(u64),
    Add(Box<Tree>, Box<Tree>),
    Sub(Box<Tree>, Box<Tree>),
    Mul(Box<Tree>, Box<Tree>),
    And(Box<Tree>, Box<Tree>),
    Or(Box<Tree>, Box<Tree>),
    Xor(Box<Tree>, Box<Tree>),
}

fn tree(width: u8) -> impl Strategy<Value = Tree> {
    let max = if width == 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    };
    let leaf = (0..=max).prop_map(Tree::Leaf);
    leaf.prop_recursive(4, 24, 2, |inner| {
        (0u8..6, inner.clone(), inner).prop_map(|(op, a, b)| {
            let (a, b) = (Box::new(a), Box::new(b));
            match op {
                0 => Tree::Add(a, b),
                1 => Tree::Sub(a, b),
                2 => Tree::Mul(a, b),
                3 => Tree::And(a, b),
                4 => Tree::Or(a, b),
                _ => Tree::Xor(a, b),
            }
        })
    })
}

fn to_expr(t: &Tree) -> Expr {
    let b = |a: &Tree, c: &Tree| (Box::new(to_expr(a)), Box::new(to_expr(c)));
    match t {
        Tree::Leaf(v) => Expr::Const(*v),
        Tree::Add(a, c) => {
            let (x, y) = b(a, c);
            Expr::Add(x, y)
        }
        Tree::Sub(a, c) => {
            let (x, y) = b(a, c);
            Expr::Sub(x, y)
        }
        Tree::Mul(a, c) => {
            let (x, y) = b(a, c);
            Expr::Mul(x, y)
        }
        Tree::And(a, c) => {
            let (x, y) = b(a, c);
            Expr::And(x, y)
        }
        Tree::Or(a, c) => {
            let (x, y) = b(a, c);
            Expr::Or(x, y)
        }
        Tree::Xor(a, c) => {
            let (x, y) = b(a, c);
            Expr::Xor(x, y)
        }
    }
}

/// Exact value over the integers (two's complement for bitwise ops on
/// negatives), with no intermediate truncation.
fn exact(t: &Tree) -> BigInt {
    match t {
        Tree::Leaf(v) => BigInt::from(*v),
        Tree::Add(a, b) => exact(a) + exact(b),
        Tree::Sub(a, b) => exact(a) - exact(b),
        Tree::Mul(a, b) => exact(a) * exact(b),
        Tree::And(a, b) => exact(a) & exact(b),
        Tree::Or(a, b) => exact(a) | exact(b),
        Tree::Xor(a, b) => exact(a) ^ exact(b),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]
    #[test]
    fn arithmetic_wraps_modulo_destination_width(
        (width, t) in (1u8..=64).prop_flat_map(|w| (Just(w), tree(w)))
    ) {
        let program = PipelineProgram {
            headers: vec![HeaderSpec { name: "h".into(), fields: vec![fs("a", 8)] }],
            metadata: vec![fs("dst", width)],
            parser: vec![ParserState { name: "start".into(), extract: vec![], transition: Transition::Accept }],
            actions: vec![],
            tables: vec![],
            registers: vec![RegisterSpec { name: "out".into(), width: 64, count: 1 }],
            externs: vec![],
            apply: vec![
                Instruction::set("meta.dst", to_expr(&t)),
                Instruction::reg_write("out", Expr::Const(0), Expr::field("meta.dst")),
            ],
        };
        let mut d = Device::new(DeviceId(0));
        d.load_program(&program).unwrap();
        d.execute(&Packet::new(vec![], 0, 0), &mut NoExterns).unwrap();
        let got = BigInt::from(d.register_read("out", 0).unwrap());

        let modulus = BigInt::one() << width as usize;
        let expected = exact(&t).mod_floor(&modulus);
        prop_assert!(expected >= BigInt::zero());
        prop_assert_eq!(got, expected);
    }
}
