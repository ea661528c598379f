mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{database, fixture};
use lithe_core::db::{Engine, PgDatabase};
use lithe_core::equiv::{
    adjust_constants, check_equivalence, correlated_sample, drop_sample,
    inject_outer_join_witnesses, orphan_count, remove_witnesses, CheckDepth, EquivConfig,
    EquivalenceOracle, EquivalenceStatus, Evidence, Prover, ProverAnswer, SampledChecker, Stage,
};
use lithe_core::sql::{parse, SqlQuery};

const T: Duration = Duration::from_secs(30);

fn q(rel: &str) -> SqlQuery {
    parse(&fixture(rel)).unwrap()
}

fn blog() -> Option<Arc<PgDatabase>> {
    database("equiv_blog", &["blog/setup.sql"]).map(Arc::new)
}

fn count(db: &PgDatabase, sql: &str) -> i64 {
    match &db.query_raw(sql, T).unwrap().rows[0][0] {
        lithe_core::db::Value::Int(n) => *n,
        other => panic!("{other:?}"),
    }
}

fn one_seed(seed: u64) -> EquivConfig {
    EquivConfig {
        seeds: vec![seed],
        ..EquivConfig::default()
    }
}

#[test]
fn nested_and_lean_blog_queries_agree_on_every_seed() {
    let Some(db) = blog() else { return };
    let started = Instant::now();
    let checker = SampledChecker::new(db.clone(), EquivConfig::default()).unwrap();
    let v = checker.check(&q("blog/nested.sql"), &q("blog/lean.sql"), CheckDepth::Full);
    assert_eq!(v.status, EquivalenceStatus::LikelyEquivalent, "{v:?}");
    assert_eq!(
        v.evidence,
        Evidence::Samples {
            seeds_passed: 3,
            full_database: false
        }
    );
    assert_eq!(v.stages_run, vec![Stage::Sampling]);
    let catalog = db.fetch_schema(None).unwrap();
    for seed in [1, 2, 3] {
        let s = checker.sample(seed).unwrap();
        assert_eq!(orphan_count(db.as_ref(), &s, &catalog).unwrap(), 0);
        assert!(
            s.row_fractions["blogs"] < 1.0,
            "seed {seed} sampled every blog"
        );
    }
    assert!(started.elapsed() < Duration::from_secs(30));
}

#[test]
fn left_join_mutant_is_caught_on_every_seed() {
    let Some(db) = blog() else { return };
    // On the full database every blog has posts, so only witnesses expose it.
    let full_a = db.execute(&q("blog/lean.sql"), T).unwrap();
    let full_b = db.execute(&q("blog/left_mutant.sql"), T).unwrap();
    assert_eq!(full_a.rows.len(), full_b.rows.len());
    for seed in [1, 2, 3] {
        let v = check_equivalence(
            db.clone(),
            &q("blog/lean.sql"),
            &q("blog/left_mutant.sql"),
            &one_seed(seed),
        )
        .unwrap();
        assert_eq!(
            v.status,
            EquivalenceStatus::NotEquivalent,
            "seed {seed}: {v:?}"
        );
        match v.evidence {
            Evidence::Counterexample(c) => assert_eq!(c.seed, Some(seed)),
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn self_comparison_and_full_database_stage() {
    let Some(db) = blog() else { return };
    let lean = q("blog/lean.sql");
    let cfg = EquivConfig {
        full_db: true,
        ..EquivConfig::default()
    };
    let v = check_equivalence(db.clone(), &lean, &lean, &cfg).unwrap();
    assert_eq!(v.status, EquivalenceStatus::LikelyEquivalent);
    assert_eq!(v.stages_run, vec![Stage::Sampling, Stage::FullDatabase]);
    assert_eq!(
        v.evidence,
        Evidence::Samples {
            seeds_passed: 3,
            full_database: true
        }
    );
}

#[test]
fn samples_are_seeded_and_complete_at_fraction_one() {
    let Some(db) = blog() else { return };
    let catalog = db.fetch_schema(None).unwrap();
    let full = correlated_sample(db.as_ref(), &catalog, 1.0, 10_000, 7, "eq_full").unwrap();
    assert_eq!(count(&db, "SELECT count(*) FROM eq_full.posts"), 6000);
    assert_eq!(count(&db, "SELECT count(*) FROM eq_full.blogs"), 300);
    assert!(full.row_fractions.values().all(|f| *f == 1.0));

    let a = correlated_sample(db.as_ref(), &catalog, 0.5, 10_000, 11, "eq_a").unwrap();
    let b = correlated_sample(db.as_ref(), &catalog, 0.5, 10_000, 11, "eq_b").unwrap();
    assert_eq!(a.row_fractions, b.row_fractions);
    let ids = |s: &str| {
        db.query_raw(&format!("SELECT postid FROM {s}.posts ORDER BY postid"), T)
            .unwrap()
            .rows
    };
    assert_eq!(ids("eq_a"), ids("eq_b"));
    assert_eq!(orphan_count(db.as_ref(), &a, &catalog).unwrap(), 0);
    let blogs = count(&db, "SELECT count(*) FROM eq_a.blogs");
    assert!(blogs > 90 && blogs < 210, "{blogs}");
    for s in [&full, &a, &b] {
        drop_sample(db.as_ref(), s).unwrap();
    }
}

#[test]
fn witnesses_split_inner_from_left_joins() {
    let Some(db) = blog() else { return };
    let catalog = db.fetch_schema(None).unwrap();
    let mut s = correlated_sample(db.as_ref(), &catalog, 0.5, 10_000, 3, "eq_w").unwrap();
    let inner = parse("SELECT b.blogid, p.postid FROM blogs b JOIN posts p ON p.blogid = b.blogid")
        .unwrap();
    let left =
        parse("SELECT b.blogid, p.postid FROM blogs b LEFT JOIN posts p ON p.blogid = b.blogid")
            .unwrap();
    let rows = |q: &SqlQuery| db.execute_in(q, Some("eq_w"), T).unwrap().rows.len();
    assert_eq!(rows(&inner), rows(&left));
    let max_before = count(&db, "SELECT max(blogid) FROM blogs");
    let w = inject_outer_join_witnesses(db.as_ref(), &mut s, &catalog, &[]).unwrap();
    assert!(s.witness_rows_injected);
    assert_eq!(
        w.len(),
        1,
        "posts.blogid is NOT NULL, so only a parent witness"
    );
    assert_eq!(
        w[0].key,
        vec![("blogid".to_string(), (max_before + 1).to_string())]
    );
    assert_eq!(rows(&left), rows(&inner) + 1);
    // Integrity of the sample itself is untouched by a childless parent.
    assert_eq!(orphan_count(db.as_ref(), &s, &catalog).unwrap(), 0);
    remove_witnesses(db.as_ref(), &mut s, &w).unwrap();
    assert_eq!(rows(&inner), rows(&left));
    drop_sample(db.as_ref(), &s).unwrap();
}

#[test]
fn cycles_self_references_and_nullable_keys() {
    let Some(db) = database("equiv_adjust", &["equiv/adjust.sql"]).map(Arc::new) else {
        return;
    };
    let catalog = db.fetch_schema(None).unwrap();
    let mut s = correlated_sample(db.as_ref(), &catalog, 0.5, 10_000, 5, "eq_c").unwrap();
    let mut whole = s.whole_copies.clone();
    whole.sort();
    assert_eq!(whole, ["emp", "ping", "pong"]);
    assert_eq!(orphan_count(db.as_ref(), &s, &catalog).unwrap(), 0);
    let w = inject_outer_join_witnesses(db.as_ref(), &mut s, &catalog, &[]).unwrap();
    let tables: Vec<&str> = w.iter().map(|r| r.table.as_str()).collect();
    assert!(
        tables.contains(&"t") && tables.contains(&"note"),
        "{tables:?}"
    );
    assert_eq!(
        count(&db, "SELECT count(*) FROM eq_c.note WHERE t_id IS NULL"),
        1
    );
    remove_witnesses(db.as_ref(), &mut s, &w).unwrap();
    assert_eq!(
        count(&db, "SELECT count(*) FROM eq_c.note WHERE t_id IS NULL"),
        0
    );
    drop_sample(db.as_ref(), &s).unwrap();
}

#[test]
fn constants_move_into_the_sample() {
    let Some(db) = database("equiv_adjust", &["equiv/adjust.sql"]).map(Arc::new) else {
        return;
    };
    let catalog = db.fetch_schema(None).unwrap();
    let s = correlated_sample(db.as_ref(), &catalog, 1.0, 10_000, 1, "eq_k").unwrap();
    let eq = parse("SELECT id FROM t WHERE x = 'zzz'").unwrap();
    let a = adjust_constants(db.as_ref(), &s, &catalog, &eq, &eq);
    assert_eq!(a.q1.text(), "SELECT id FROM t WHERE x = 'a'");
    assert_eq!(a.q1, a.q2);

    let range = parse("SELECT id FROM t WHERE y > 1000000000").unwrap();
    let other = parse("SELECT t.id FROM t WHERE t.y > 1000000000 AND true").unwrap();
    let a = adjust_constants(db.as_ref(), &s, &catalog, &range, &other);
    assert_eq!(a.q1.text(), "SELECT id FROM t WHERE y > 50");
    assert_eq!(a.q2.text(), "SELECT t.id FROM t WHERE t.y > 50 AND true");

    let present = parse("SELECT id FROM t WHERE x = 'b' AND y < 60").unwrap();
    let a = adjust_constants(db.as_ref(), &s, &catalog, &present, &present);
    assert!(a.substitutions.is_empty());
    assert_eq!(a.q1.text(), present.text());

    // A constant the rewrite spells differently is left alone in both.
    let spelled = parse("SELECT id FROM t WHERE y >= 1000000001").unwrap();
    let a = adjust_constants(db.as_ref(), &s, &catalog, &range, &spelled);
    assert_eq!((a.q1.text(), a.q2.text()), (range.text(), spelled.text()));
    assert_eq!(a.warnings.len(), 1);
    drop_sample(db.as_ref(), &s).unwrap();
}

#[test]
fn adjusted_constants_keep_results_non_empty() {
    let Some(db) = database("equiv_adjust", &["equiv/adjust.sql"]).map(Arc::new) else {
        return;
    };
    let a = parse("SELECT id FROM t WHERE y > 1000000000 ORDER BY id").unwrap();
    let b = parse("SELECT id FROM t WHERE y > 1000000000 AND y > 0 ORDER BY id").unwrap();
    // Without adjustment both are empty and trivially agree; with it the
    // redundant-looking extra predicate is still harmless.
    let v = check_equivalence(db.clone(), &a, &b, &EquivConfig::default()).unwrap();
    assert_eq!(v.status, EquivalenceStatus::LikelyEquivalent, "{v:?}");
    let c = parse("SELECT id FROM t WHERE y > 1000000000 AND y > 70 ORDER BY id").unwrap();
    let v = check_equivalence(db.clone(), &a, &c, &EquivConfig::default()).unwrap();
    assert_eq!(v.status, EquivalenceStatus::NotEquivalent, "{v:?}");
}

struct AcceptAll;

impl Prover for AcceptAll {
    fn name(&self) -> &str {
        "stub"
    }
    fn prove(&self, q1: &str, q2: &str, schema: &str) -> ProverAnswer {
        assert!(schema.contains("CREATE TABLE element"));
        assert!(q1.contains(" in (") && q2.contains("exists("));
        ProverAnswer::Equivalent
    }
}

#[test]
fn prover_short_circuits_sampling() {
    let Some(db) = database("equiv_r5", &["r5/setup.sql"]).map(Arc::new) else {
        return;
    };
    let checker = SampledChecker::new(db.clone(), EquivConfig::default())
        .unwrap()
        .with_prover(Arc::new(AcceptAll));
    let v = checker.check(&q("r5/in.sql"), &q("r5/exists.sql"), CheckDepth::Full);
    assert_eq!(v.status, EquivalenceStatus::Proven);
    assert_eq!(v.evidence, Evidence::Prover("stub".into()));
    assert_eq!(v.stages_run, vec![Stage::Prover]);

    let plain = SampledChecker::new(db.clone(), EquivConfig::default()).unwrap();
    let v = plain.check(&q("r5/in.sql"), &q("r5/exists.sql"), CheckDepth::Quick);
    assert_eq!(v.status, EquivalenceStatus::LikelyEquivalent);
    assert_eq!(
        v.evidence,
        Evidence::Samples {
            seeds_passed: 1,
            full_database: false
        }
    );
}

#[test]
fn samples_are_dropped_with_the_checker() {
    let Some(db) = blog() else { return };
    let schema = {
        let checker = SampledChecker::new(db.clone(), one_seed(9)).unwrap();
        checker.sample(9).unwrap();
        checker.scratch_schema(9)
    };
    let left = count(
        &db,
        &format!("SELECT count(*) FROM pg_namespace WHERE nspname = '{schema}'"),
    );
    assert_eq!(left, 0);
}
