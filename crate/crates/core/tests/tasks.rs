use pppo::tasks::*;
use proptest::prelude::*;

fn out(tokens: &[Token]) -> Vec<Token> {
    tokens.to_vec()
}

#[test]
fn generation_is_seeded() {
    let spec = TaskSpec { family: TaskFamily::BranchingArithmetic, count: 3, difficulty: 1..=3, seed: 7 };
    let a = generate_dataset(&spec).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a, generate_dataset(&spec).unwrap());
}

#[test]
fn arithmetic_answers_match_an_integer_oracle() {
    let spec = TaskSpec { family: TaskFamily::BranchingArithmetic, count: 200, difficulty: 2..=2, seed: 1 };
    for inst in generate_dataset(&spec).unwrap() {
        // Prompt: Q x0 o1 x1 o2 x2 =, folded left to right.
        let p = &inst.prompt;
        assert_eq!((p[0], *p.last().unwrap()), (sym::QUESTION, sym::EQUALS));
        let mut acc = i64::from(p[1].0);
        for pair in p[2..p.len() - 1].chunks(2) {
            let v = i64::from(pair[1].0);
            acc = match pair[0] {
                sym::PLUS => acc + v,
                sym::MINUS => acc - v,
                sym::TIMES => acc * v,
                other => panic!("unexpected operator {other:?}"),
            };
        }
        assert_eq!(inst.answer, vec![sym::digit(acc as u8)]);
        assert_eq!(inst.difficulty, 2);
    }
}

#[test]
fn copy_chain_answer_is_the_payload() {
    let spec = TaskSpec { family: TaskFamily::CopyChain, count: 20, difficulty: 1..=1, seed: 3 };
    for inst in generate_dataset(&spec).unwrap() {
        let payload: Vec<Token> = inst.prompt.iter().copied().filter(|t| t.0 < 10).collect();
        assert_eq!(inst.answer, payload);
    }
}

#[test]
fn extraction_examples() {
    let v = Vocab::standard();
    let d = sym::ANSWER;
    let one = sym::digit(1);
    let four = sym::digit(4);
    assert_eq!(extract_answer(&v, &out(&[sym::SEP, d, one, four, sym::EOS])), Some(&[one, four][..]));
    assert_eq!(extract_answer(&v, &out(&[sym::SEP, sym::EOS])), None);
    assert_eq!(extract_answer(&v, &out(&[d, sym::digit(7), d, sym::digit(9), sym::EOS])), Some(&[sym::digit(9)][..]));
}

#[test]
fn verification_examples() {
    let v = Vocab::standard();
    let inst =
        TaskInstance { id: 0, prompt: vec![sym::QUESTION], answer: vec![sym::digit(1), sym::digit(4)], difficulty: 1 };
    let d = sym::ANSWER;
    assert!(verify_correct(&v, &[d, sym::digit(1), sym::digit(4), sym::EOS], &inst));
    assert!(!verify_correct(&v, &[d, sym::digit(1), sym::digit(5), sym::EOS], &inst));
    assert!(!verify_correct(&v, &[sym::digit(1), sym::digit(4), sym::EOS], &inst));

    let rule = FormatRule::default();
    assert!(verify_format(&v, &[sym::SEP, d, sym::digit(3), sym::EOS], &rule));
    assert!(!verify_format(&v, &[sym::SEP, d, sym::digit(3)], &rule));
    assert!(!verify_format(&v, &[d, sym::digit(2), d, sym::digit(3), sym::EOS], &rule));
    assert!(verify_format(&v, &[d, sym::digit(2), d, sym::digit(3), sym::EOS], &FormatRule::LastDelimiterEos));
}

#[test]
fn jsonl_and_vocab_round_trip() {
    let spec = TaskSpec { family: TaskFamily::BranchingArithmetic, count: 10, difficulty: 1..=2, seed: 5 };
    let data = generate_dataset(&spec).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &data).unwrap();
    assert_eq!(read_jsonl(buf.as_slice()).unwrap(), data);
    let v = Vocab::standard();
    let json = serde_json::to_string(&v).unwrap();
    assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
}

#[test]
fn demonstrations_are_correct_and_well_formed() {
    let v = Vocab::standard();
    let spec = TaskSpec { family: TaskFamily::BranchingArithmetic, count: 50, difficulty: 1..=3, seed: 9 };
    for inst in generate_dataset(&spec).unwrap() {
        let demos = demonstrations(&inst);
        assert_eq!(demos.len(), 2);
        for (_, d) in demos {
            assert!(verify_correct(&v, &d, &inst));
            assert!(verify_format(&v, &d, &FormatRule::default()));
        }
    }
}

proptest! {
    #[test]
    fn expressions_evaluate_to_single_digits(seed in any::<u64>(), steps in 1usize..5) {
        let mut rng = pppo::SeedStream::new(seed).rng();
        let e = Expression::sample(steps, &mut rng);
        prop_assert!(e.running_values().iter().all(|v| (0..=9).contains(v)));
        prop_assert_eq!(Expression::parse(&e.prompt()), Some(e.clone()));
    }
}
