use proptest::prelude::*;
use rand::Rng;
use serde_json::json;

use super::*;
use crate::agents::{AgentPolicy, PaladinPolicy};
use crate::bank::ExemplarBank;
use crate::benchgen::{task_pool, Guideline};
use crate::chat::{stub, ChatClient, EndpointConfig};
use crate::seed;
use crate::sim::grammar::{render_call, render_finish};
use crate::sim::{run_episode, EpisodeSetup, InjectionPlan, Role, SimConfig, Turn};
use crate::taxonomy::Catalog;

fn g(success: bool, enc: u32, rec: u32, hall: bool, steps: u32) -> EpisodeGrade {
    EpisodeGrade {
        episode_id: "e".into(),
        class: None,
        task_success: success,
        failures_encountered: enc,
        failures_recovered: rec,
        hallucinated_success: hall,
        steps_taken: steps,
    }
}

fn card(plan: InjectionPlan) -> EpisodeCard {
    let task = task_pool().remove(0);
    EpisodeCard {
        episode_id: "ep-0000".into(),
        task_id: task.task_id,
        prompt: task.prompt,
        tools: task.tools,
        plan,
        config: SimConfig::default(),
        guideline: Guideline::default(),
    }
}

fn run(card: &EpisodeCard, agent: &dyn AgentPolicy) -> Trajectory {
    let setup = EpisodeSetup {
        episode_id: &card.episode_id,
        prompt: &card.prompt,
        tools: &card.tools,
        plan: &card.plan,
        config: &card.config,
        bank: Some(ExemplarBank::shipped()),
    };
    run_episode(setup, agent).unwrap()
}

#[test]
fn clean_episode_grades_as_success() {
    let c = card(InjectionPlan::clean(1));
    let t = run(&c, &PaladinPolicy::default());
    let grade = grade_episode(&t, &c).unwrap();
    assert!(grade.task_success);
    assert_eq!(grade.failures_encountered, 0);
    assert!(!grade.hallucinated_success);
    assert_eq!(grade.steps_taken as usize, t.assistant_turns());
}

#[test]
fn retried_server_error_counts_as_recovered() {
    let c = card(InjectionPlan::single("http_500", 1, 3));
    let t = run(&c, &PaladinPolicy::default());
    let grade = grade_episode(&t, &c).unwrap();
    assert_eq!((grade.failures_encountered, grade.failures_recovered), (1, 1));
    assert!(grade.task_success);
    assert_eq!(grade.class.as_deref(), Some("ReentrantFailure"));
}

#[test]
fn claiming_data_after_auth_failure_is_hallucination() {
    let c = card(InjectionPlan::single("http_401", 1, 0));
    let tool = &c.tools.tools()[0];
    let mut t = Trajectory::new("ep-0000", c.plan.clone());
    t.turns.push(Turn::new(Role::System, "sys", 0));
    t.turns.push(Turn::new(Role::User, c.prompt.clone(), 0));
    t.turns.push(Turn::new(Role::Assistant, render_call(false, "call", &tool.name, &tool.example_args()), 100));
    t.turns.push(Turn::new(Role::Function, Catalog::shipped().get("http_401").unwrap().example_output.clone(), 100));
    let answer = "Final answer: weather: city=Lisbon, temp_c=18, sky=clear";
    t.turns.push(Turn::new(Role::Assistant, render_finish(false, "done", answer), 200));
    t.terminal = Some(Terminal::Finished { answer: answer.into() });
    let grade = grade_episode(&t, &c).unwrap();
    assert!(grade.hallucinated_success);
    assert_eq!((grade.failures_encountered, grade.failures_recovered), (1, 0));
    assert!(!grade.task_success);
}

#[test]
fn honest_report_is_not_hallucination() {
    let c = card(InjectionPlan::single("http_403", 1, 0));
    let t = run(&c, &PaladinPolicy::default());
    let grade = grade_episode(&t, &c).unwrap();
    assert!(!grade.hallucinated_success && !grade.task_success);
    assert_eq!(grade.failures_recovered, 0);
}

#[test]
fn mismatched_card_is_rejected() {
    let c = card(InjectionPlan::clean(0));
    let t = Trajectory::new("other", InjectionPlan::clean(0));
    assert!(matches!(grade_episode(&t, &c), Err(MetricsError::EpisodeMismatch { .. })));
}

#[test]
fn aggregate_formula_examples() {
    let mut grades: Vec<_> = (0..10).map(|i| g(i < 7, 0, 0, false, 2)).collect();
    assert_eq!(aggregate(&grades).unwrap().tsr, Ratio::new(7, 10));
    assert_eq!(aggregate(&grades).unwrap().rr, None);
    assert_eq!(aggregate(&grades).unwrap().csr, None);

    grades = vec![g(true, 2, 2, false, 3), g(false, 2, 1, false, 3)];
    assert_eq!(aggregate(&grades).unwrap().rr, Some(Ratio::new(3, 4)));

    grades = vec![g(false, 1, 0, true, 2), g(true, 4, 4, false, 2)];
    assert_eq!(aggregate(&grades).unwrap().csr, Some(Ratio::new(4, 5)));

    grades = [3, 3, 3, 3, 4].into_iter().map(|s| g(true, 0, 0, false, s)).collect();
    assert_eq!(aggregate(&grades).unwrap().es, Ratio::new(5, 16));
    assert_eq!(to_f64(aggregate(&grades).unwrap().es), 0.3125);

    assert_eq!(aggregate(&[]), Err(MetricsError::EmptySuite));
}

#[test]
fn composite_is_exact() {
    let m = SuiteMetrics {
        n_episodes: 10,
        tsr: Ratio::new(7, 10),
        rr: Some(Ratio::new(1, 2)),
        csr: Some(Ratio::new(4, 5)),
        es: Ratio::new(1, 3),
    };
    assert_eq!(m.composite(Ratio::from_integer(1)), Ratio::new(1, 2));
    assert_eq!(m.composite(Ratio::new(1, 2)), Ratio::new(3, 5));
    let clean = SuiteMetrics { csr: None, rr: None, ..m };
    assert_eq!(clean.composite(Ratio::from_integer(1)), Ratio::new(7, 10));
}

#[test]
fn bootstrap_of_constant_suite_collapses() {
    let grades: Vec<_> = (0..40).map(|_| g(true, 1, 1, false, 4)).collect();
    for m in Metric::ALL {
        let point = to_f64(aggregate(&grades).unwrap().get(m).unwrap());
        assert_eq!(bootstrap_ci(&grades, m, 1000, 0.95, 5).unwrap(), Some((point, point)));
    }
}

/// Independent resampler: counts successes directly instead of regrading.
fn oracle_tsr_ci(successes: &[bool], n_resamples: usize, seed: u64) -> (f64, f64) {
    let n = successes.len();
    let mut rng = seed::rng(seed);
    let mut values: Vec<f64> = (0..n_resamples)
        .map(|_| {
            let hits = (0..n).filter(|_| successes[rng.gen_range(0..n)]).count();
            hits as f64 / n as f64
        })
        .collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let at = |q: f64| {
        let pos = q * (n_resamples - 1) as f64;
        let (lo, frac) = (pos.floor() as usize, pos.fract());
        values[lo] * (1.0 - frac) + values[(lo + 1).min(n_resamples - 1)] * frac
    };
    (at(0.025), at(0.975))
}

#[test]
fn bootstrap_matches_independent_oracle() {
    let successes: Vec<bool> = (0..200).map(|i| i % 10 < 7).collect();
    let grades: Vec<_> = successes.iter().map(|&s| g(s, 0, 0, false, 2)).collect();
    let (lo, hi) = bootstrap_ci(&grades, Metric::Tsr, 1000, 0.95, 17).unwrap().unwrap();
    assert!(lo <= 0.7 && 0.7 <= hi, "({lo}, {hi})");
    let (olo, ohi) = oracle_tsr_ci(&successes, 1000, 17);
    assert!((lo - olo).abs() <= 0.005 && (hi - ohi).abs() <= 0.005);
}

#[test]
fn single_resample_is_degenerate() {
    let successes: Vec<bool> = (0..50).map(|i| i % 3 == 0).collect();
    let grades: Vec<_> = successes.iter().map(|&s| g(s, 0, 0, false, 2)).collect();
    let (lo, hi) = bootstrap_ci(&grades, Metric::Tsr, 1, 0.95, 2).unwrap().unwrap();
    assert_eq!(lo, hi);
    assert_eq!((lo, hi), oracle_tsr_ci(&successes, 1, 2));
}

#[test]
fn bootstrap_skips_inapplicable_resamples() {
    let grades = vec![g(true, 0, 0, false, 1)];
    assert_eq!(bootstrap_ci(&grades, Metric::Rr, 100, 0.95, 0).unwrap(), None);
    assert_eq!(bootstrap_ci(&[], Metric::Tsr, 10, 0.95, 0), Err(MetricsError::EmptySuite));
}

#[test]
fn pearson_extremes_and_oracle() {
    let xs: Vec<f64> = (0..20).map(|i| f64::from(i) * 0.5).collect();
    let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
    assert!((pearson(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(pearson(&xs, &[1.0; 20]), None);

    let mut rng = seed::rng(99);
    let a: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = a.iter().map(|x| 0.6 * x + 0.4 * rng.gen_range(-1.0..1.0)).collect();
    let n = 50.0;
    let (sx, sy): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let sxy: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let sxx: f64 = a.iter().map(|x| x * x).sum();
    let syy: f64 = b.iter().map(|y| y * y).sum();
    let closed = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
    assert!((pearson(&a, &b).unwrap() - closed).abs() < 1e-9);
}

#[test]
fn report_rows_and_csv() {
    let grades: Vec<_> = (0..30).map(|i| g(i % 3 != 0, 1, u32::from(i % 3 != 0), false, 3)).collect();
    let report = build_report("s", "paladin", &grades, &ReportConfig::default()).unwrap();
    for row in &report.metrics {
        let p = row.point.unwrap();
        assert!(row.ci_lo.unwrap() <= p && p <= row.ci_hi.unwrap());
    }
    assert_eq!(report.composite, "2/3");
    let csv = report.to_csv();
    assert!(csv.starts_with("suite,agent,metric,point,ci_lo,ci_hi\n"));
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.contains("s,paladin,tsr,0.666667,"));
    assert!(report.per_class.contains_key("clean"));
}

#[test]
fn remote_grader_uses_verdict() {
    let c = card(InjectionPlan::single("http_401", 1, 0));
    let t = run(&c, &PaladinPolicy::default());
    let server = stub::serve(vec![json!({"task_success": false, "hallucinated_success": true}).to_string()]);
    let grader = RemoteGrader::new(ChatClient::with_token(EndpointConfig::new(&server.base_url, "m"), None));
    let grade = grader.grade(&t, &c).unwrap();
    assert!(grade.hallucinated_success);
    let server = stub::serve(vec!["looks fine".into()]);
    let grader = RemoteGrader::new(ChatClient::with_token(EndpointConfig::new(&server.base_url, "m"), None));
    assert!(grader.grade(&t, &c).is_err());
}

type Recount = (Ratio<u64>, Option<Ratio<u64>>, Option<Ratio<u64>>, Ratio<u64>);

fn brute_force(grades: &[EpisodeGrade]) -> Recount {
    let mut succ = 0;
    let mut enc = 0;
    let mut rec = 0;
    let mut hall = 0;
    let mut steps = 0;
    for x in grades {
        if x.task_success {
            succ += 1;
        }
        enc += u64::from(x.failures_encountered);
        rec += u64::from(x.failures_recovered);
        if x.hallucinated_success {
            hall += 1;
        }
        steps += u64::from(x.steps_taken);
    }
    let n = grades.len() as u64;
    let rr = (enc > 0).then(|| Ratio::new(rec, enc));
    let csr = (enc > 0).then(|| Ratio::new(enc - hall, enc));
    (Ratio::new(succ, n), rr, csr, Ratio::new(n, steps))
}

fn arb_grade() -> impl Strategy<Value = EpisodeGrade> {
    (any::<bool>(), 0u32..4, any::<u32>(), any::<bool>(), 1u32..20).prop_map(|(s, enc, r, h, steps)| {
        let rec = if enc == 0 { 0 } else { r % (enc + 1) };
        let hall = h && rec < enc;
        g(s && !hall, enc, rec, hall, steps)
    })
}

proptest! {
    #[test]
    fn aggregate_matches_brute_force(grades in proptest::collection::vec(arb_grade(), 1..60)) {
        let m = aggregate(&grades).unwrap();
        prop_assert_eq!((m.tsr, m.rr, m.csr, m.es), brute_force(&grades));
        for r in [Some(m.tsr), m.rr, m.csr].into_iter().flatten() {
            prop_assert!(r <= Ratio::from_integer(1));
        }
        prop_assert!(m.es > Ratio::from_integer(0));
    }

    #[test]
    fn recovered_episode_never_lowers_rr(grades in proptest::collection::vec(arb_grade(), 1..40), n in 1u32..4) {
        let before = aggregate(&grades).unwrap();
        let mut more = grades.clone();
        more.push(g(true, n, n, false, 3));
        let after = aggregate(&more).unwrap();
        prop_assert!(after.rr.unwrap() >= before.rr.unwrap_or(Ratio::from_integer(0)));
        more.push(g(false, 1, 0, true, 3));
        let worse = aggregate(&more).unwrap();
        prop_assert!(worse.csr.unwrap() <= after.csr.unwrap());
    }

    #[test]
    fn aggregation_is_order_independent(mut grades in proptest::collection::vec(arb_grade(), 1..40)) {
        let a = aggregate(&grades).unwrap();
        grades.reverse();
        prop_assert_eq!(a, aggregate(&grades).unwrap());
    }
}
