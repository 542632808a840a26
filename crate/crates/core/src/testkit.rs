//! Seeded generators for workbooks, fuzzed tables and activity logs.
//! Enabled with the `testkit` feature; used by property and acceptance
//! tests.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use chrono::{DateTime, Duration, FixedOffset, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use uuid::Uuid;

use crate::activity::{ActionPayload, InterventionAction};
use crate::compiler::workbook::{TableFiles, FEEDBACK_RULES, LANGUAGES, METADATA, OPTIONS, PAGES, QUESTIONS, QUIZZES, TABLES};
use crate::feedback::Metric;
use crate::schema::WidgetKind;

pub const LANGUAGE_POOL: [&str; 6] = ["en", "de", "es", "nl", "it", "fr"];

const WORDS: [&str; 12] = ["noise", "Ohr", "ruido", "geluid", "sueño", "loud", "calm", "Stress", "día", "focus", "müde", "zzz"];

/// Shape parameters for [`generate_workbook`].
#[derive(Debug, Clone)]
pub struct WorkbookShape {
    pub questions: usize,
    pub languages: usize,
    pub quizzes: usize,
    pub rules: usize,
    pub version: u32,
}

impl WorkbookShape {
    pub fn random(rng: &mut impl Rng) -> Self {
        WorkbookShape {
            questions: rng.random_range(0..=40),
            languages: rng.random_range(1..=LANGUAGE_POOL.len()),
            quizzes: rng.random_range(0..=3),
            rules: rng.random_range(0..=6),
            version: rng.random_range(1..=9),
        }
    }
}

fn text(rng: &mut impl Rng, lang: &str, tag: &str) -> String {
    let n = rng.random_range(1..=4);
    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).expect("non-empty")).collect();
    format!("{tag} {} ({lang})", words.join(" "))
}

fn translations(rng: &mut impl Rng, langs: &[&str], tag: &str) -> String {
    langs.iter().map(|l| text(rng, l, tag)).collect::<Vec<_>>().join("\t")
}

fn columns(prefix: &str, langs: &[&str]) -> String {
    langs.iter().map(|l| format!("{prefix}:{l}")).collect::<Vec<_>>().join("\t")
}

/// A workbook that parses and compiles without errors.
pub fn generate_workbook(rng: &mut impl Rng, shape: &WorkbookShape) -> TableFiles {
    let langs: Vec<&str> = LANGUAGE_POOL[..shape.languages.clamp(1, LANGUAGE_POOL.len())].to_vec();
    let page_count = if shape.questions == 0 { rng.random_range(0..=2) } else { shape.questions.div_ceil(5).max(1) };
    let chapters: Vec<String> = (1..=shape.quizzes.max(1)).map(|i| format!("ch{i}")).collect();

    let mut metadata = format!("key\tvalue\nstudy_id\tstudy-{}\nschema_id\tdiary\nversion\t{}\n", rng.random_range(0..1000), shape.version);
    let _ = writeln!(metadata, "chapters\t{}", chapters.join(","));

    let mut languages = String::from("code\tname\n");
    for l in &langs {
        let _ = writeln!(languages, "{l}\tLanguage {l}");
    }

    let mut pages = format!("page\t{}\n", columns("title", &langs));
    for p in 1..=page_count {
        let _ = writeln!(pages, "{p}\t{}", translations(rng, &langs, &format!("Page {p}")));
    }

    let mut questions = format!("question_id\tpage\twidget\trequired\tmin\tmax\tstep\t{}\n", columns("label", &langs));
    let mut options = format!("question_id\tvalue\t{}\n", columns("label", &langs));
    for i in 0..shape.questions {
        let id = format!("q{i:03}");
        let page = if i < page_count { i + 1 } else { rng.random_range(1..=page_count) };
        let widget = *WidgetKind::ALL.choose(rng).expect("non-empty");
        let required = widget != WidgetKind::Info && rng.random_bool(0.5);
        let bounds = match widget {
            WidgetKind::Slider => Some(true),
            WidgetKind::Number => Some(rng.random_bool(0.5)),
            _ => None,
        };
        let (min, max, step) = match bounds {
            Some(true) => {
                let min = rng.random_range(-10..10);
                let max = min + rng.random_range(1..100);
                (min.to_string(), max.to_string(), ["1", "0.5", "2"].choose(rng).expect("non-empty").to_string())
            }
            _ => (String::new(), String::new(), String::new()),
        };
        let _ = writeln!(
            questions,
            "{id}\t{page}\t{widget}\t{}\t{min}\t{max}\t{step}\t{}",
            if required { "yes" } else { "no" },
            translations(rng, &langs, &id)
        );
        if widget.is_choice() {
            for o in 0..rng.random_range(2..=5) {
                let _ = writeln!(options, "{id}\topt{o}\t{}", translations(rng, &langs, &format!("Option {o}")));
            }
        }
    }

    let mut quizzes = format!("quiz_id\tchapter_id\tquestion_id\twidget\tcorrect\t{}\n", columns("prompt", &langs));
    for k in 0..shape.quizzes {
        for j in 0..rng.random_range(1..=3) {
            let qid = format!("quiz{k}_q{j}");
            let widget = if rng.random_bool(0.5) { WidgetKind::Radio } else { WidgetKind::Multiselect };
            let n_opts = rng.random_range(2..=4);
            let correct = if widget == WidgetKind::Radio {
                format!("a{}", rng.random_range(0..n_opts))
            } else {
                let mut picks: Vec<String> = (0..n_opts).filter(|_| rng.random_bool(0.5)).map(|o| format!("a{o}")).collect();
                if picks.is_empty() {
                    picks.push("a0".into());
                }
                picks.join("|")
            };
            let _ = writeln!(quizzes, "quiz{k}\t{}\t{qid}\t{widget}\t{correct}\t{}", chapters[k], translations(rng, &langs, &qid));
            for o in 0..n_opts {
                let _ = writeln!(options, "{qid}\ta{o}\t{}", translations(rng, &langs, &format!("Answer {o}")));
            }
        }
    }

    let mut rules = format!("rule_id\tmetric\tcomparator\tthreshold\tpriority\t{}\n", columns("message", &langs));
    let mut priorities: Vec<i64> = (-20..20).collect();
    priorities.shuffle(rng);
    for r in 0..shape.rules {
        let metric = *Metric::ALL.choose(rng).expect("non-empty");
        let cmp = ["<", "<=", "=", ">=", ">"].choose(rng).expect("non-empty");
        let threshold = (rng.random_range(0.0..10.0f64) * 4.0).round() / 4.0;
        let _ = writeln!(rules, "rule{r}\t{}\t{cmp}\t{threshold}\t{}\t{}", metric.as_str(), priorities[r], translations(rng, &langs, &format!("Rule {r}")));
    }

    [
        (METADATA, metadata),
        (LANGUAGES, languages),
        (PAGES, pages),
        (QUESTIONS, questions),
        (OPTIONS, options),
        (QUIZZES, quizzes),
        (FEEDBACK_RULES, rules),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v.into_bytes()))
    .collect()
}

/// Applies one random corruption to one table of `files`.
pub fn fuzz_tables(rng: &mut impl Rng, files: &TableFiles) -> TableFiles {
    let mut out = files.clone();
    let table = *TABLES.choose(rng).expect("non-empty");
    let mut bytes = out.remove(table).unwrap_or_default();
    match rng.random_range(0..9) {
        0 => bytes = (0..rng.random_range(0..256)).map(|_| rng.random()).collect(),
        1 => {
            for _ in 0..rng.random_range(1..8) {
                if !bytes.is_empty() {
                    let i = rng.random_range(0..bytes.len());
                    bytes[i] = rng.random();
                }
            }
        }
        2 => {
            let cut = rng.random_range(0..=bytes.len());
            bytes.truncate(cut);
        }
        3 => {
            for _ in 0..rng.random_range(1..6) {
                let i = rng.random_range(0..=bytes.len());
                let junk: &[u8] = [b"\t".as_slice(), b"\n", b"\r\n", b"\xef\xbb\xbf", b"\xff", b"..", b"-1", b"1e999", b"NaN"].choose(rng).expect("non-empty");
                bytes.splice(i..i, junk.iter().copied());
            }
        }
        4 => {
            // duplicate a line
            let text = String::from_utf8_lossy(&bytes).into_owned();
            let mut lines: Vec<&str> = text.lines().collect();
            if !lines.is_empty() {
                let l = lines[rng.random_range(0..lines.len())];
                lines.insert(rng.random_range(0..=lines.len()), l);
            }
            bytes = lines.join("\n").into_bytes();
        }
        5 => {
            // delete a line
            let text = String::from_utf8_lossy(&bytes).into_owned();
            let mut lines: Vec<&str> = text.lines().collect();
            if !lines.is_empty() {
                lines.remove(rng.random_range(0..lines.len()));
            }
            bytes = lines.join("\n").into_bytes();
        }
        6 => bytes.clear(),
        7 => {
            // drop the table entirely
            return out;
        }
        _ => {
            // swap two cells on some row
            let text = String::from_utf8_lossy(&bytes).into_owned();
            let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
            if !lines.is_empty() {
                let i = rng.random_range(0..lines.len());
                let mut cells: Vec<&str> = lines[i].split('\t').collect();
                if cells.len() > 1 {
                    let a = rng.random_range(0..cells.len());
                    let b = rng.random_range(0..cells.len());
                    cells.swap(a, b);
                }
                lines[i] = cells.join("\t");
            }
            bytes = lines.join("\n").into_bytes();
        }
    }
    out.insert(table.to_owned(), bytes);
    out
}

/// Writes `files` as `<table>.tsv` under `dir`.
pub fn write_tables(dir: &std::path::Path, files: &TableFiles) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        std::fs::write(dir.join(format!("{name}.tsv")), bytes)?;
    }
    Ok(())
}

/// Random UTC offset in whole quarter hours within the accepted range.
pub fn random_offset(rng: &mut impl Rng) -> FixedOffset {
    let quarters = rng.random_range(-48..=56);
    FixedOffset::east_opt(quarters * 900).expect("within range")
}

fn random_payload(rng: &mut impl Rng) -> ActionPayload {
    match rng.random_range(0..5) {
        0 => ActionPayload::EducationStepCompleted {
            chapter_id: format!("ch{}", rng.random_range(1..4)),
            section_id: format!("s{}", rng.random_range(1..4)),
        },
        1 => ActionPayload::QuizCompleted { quiz_id: format!("quiz{}", rng.random_range(0..3)), score: rng.random_range(0.0..=1.0) },
        2 => ActionPayload::SoundSession { sound_id: format!("snd{}", rng.random_range(0..5)), duration_seconds: rng.random_range(0.0..1800.0) },
        3 => ActionPayload::SoundRating { sound_id: format!("snd{}", rng.random_range(0..5)), rating: rng.random_range(1..=5) },
        _ => ActionPayload::FeedbackViewed { rule_ids: vec![] },
    }
}

/// One action for `user` at a random local time within `days` of `start`.
pub fn random_action(rng: &mut impl Rng, user: &str, center: &str, start: DateTime<Utc>, days: i64) -> InterventionAction {
    let payload = random_payload(rng);
    let offset = random_offset(rng);
    let at = start + Duration::seconds(rng.random_range(0..days.max(1) * 86_400));
    InterventionAction {
        action_id: 0,
        user_id: user.to_owned(),
        center_id: center.to_owned(),
        module: payload.kind().module(),
        payload,
        client_time: at.with_timezone(&offset),
        dedup_id: Uuid::from_u128(rng.random()),
        received_at: at,
    }
}

/// Random log over `users` users and `centers` centers.
pub fn random_log(rng: &mut impl Rng, len: usize, users: usize, centers: usize) -> Vec<InterventionAction> {
    let start = Utc.with_ymd_and_hms(2021, 4, 1, 0, 0, 0).single().expect("valid date");
    (0..len)
        .map(|i| {
            let u = rng.random_range(0..users.max(1));
            let c = u % centers.max(1);
            let mut a = random_action(rng, &format!("user{u:04}"), &format!("C{}", c + 1), start, 84);
            a.action_id = i as i64 + 1;
            a
        })
        .collect()
}

/// Per-user action counts summing to `total`, with exactly one user at
/// `max` and every other user in `1..max`.
pub fn adherence_counts(rng: &mut impl Rng, total: u64, users: u64, max: u64) -> Vec<u64> {
    assert!(users >= 1 && max >= 1 && total >= max + (users - 1) && total <= max + (users - 1) * (max - 1));
    let mut counts = vec![1u64; users as usize];
    counts[0] = max;
    let mut remaining = total - max - (users - 1);
    while remaining > 0 {
        let i = rng.random_range(1..users as usize);
        if counts[i] < max - 1 {
            counts[i] += 1;
            remaining -= 1;
        }
    }
    counts.shuffle(rng);
    counts
}

/// Actions for users `user0000..`, one per count, spread across five
/// centers and the full window.
pub fn adherence_log(rng: &mut impl Rng, counts: &[u64]) -> Vec<InterventionAction> {
    let start = Utc.with_ymd_and_hms(2021, 4, 1, 0, 0, 0).single().expect("valid date");
    let mut log = Vec::new();
    for (u, &n) in counts.iter().enumerate() {
        let user = format!("user{u:04}");
        let center = format!("C{}", u % 5 + 1);
        for _ in 0..n {
            log.push(random_action(rng, &user, &center, start, 84));
        }
    }
    log.shuffle(rng);
    for (i, a) in log.iter_mut().enumerate() {
        a.action_id = i as i64 + 1;
    }
    log
}

/// Newline-delimited JSON, one action per line.
pub fn to_ndjson(log: &[InterventionAction]) -> String {
    let mut out = String::new();
    for a in log {
        out.push_str(&serde_json::to_string(a).expect("action serializes"));
        out.push('\n');
    }
    out
}

/// Random day set within `span` days before and including `today`.
pub fn random_calendar(rng: &mut impl Rng, span: i64) -> (BTreeSet<chrono::NaiveDate>, chrono::NaiveDate, chrono::NaiveDate) {
    let today = chrono::NaiveDate::from_ymd_opt(2021, 6, 1).expect("valid date") + Duration::days(rng.random_range(0..200));
    let enrolled = today - Duration::days(rng.random_range(0..span));
    let density = rng.random_range(0.0..=1.0);
    let days = (0..span + 5)
        .map(|d| today + Duration::days(2) - Duration::days(d))
        .filter(|_| rng.random_bool(density))
        .collect();
    (days, enrolled, today)
}

/// Rule set with unique priorities and thresholds on a coarse grid, so `=`
/// rules fire regularly against [`random_metrics`].
pub fn random_rule_set(rng: &mut impl Rng, rules: usize, languages: usize) -> crate::feedback::FeedbackRuleSet {
    use crate::feedback::{Comparator, FeedbackRule, FeedbackRuleSet};
    use crate::schema::Localized;
    let langs: Vec<String> = LANGUAGE_POOL[..languages.clamp(1, LANGUAGE_POOL.len())].iter().map(|s| s.to_string()).collect();
    let mut priorities: Vec<i64> = (-1000..1000).collect();
    priorities.shuffle(rng);
    let rules = (0..rules)
        .map(|i| FeedbackRule {
            id: format!("r{i:02}"),
            metric: *Metric::ALL.choose(rng).expect("non-empty"),
            comparator: *Comparator::ALL.choose(rng).expect("non-empty"),
            threshold: rng.random_range(0..=8) as f64 / 2.0,
            message: langs.iter().fold(Localized::new(), |m, l| m.with(l, &format!("r{i:02} in {l}"))),
            priority: priorities[i],
        })
        .collect();
    FeedbackRuleSet { id: "random".into(), version: 1, languages: langs, rules, digest: crate::canonical::Digest::zero() }.seal()
}

pub fn random_metrics(rng: &mut impl Rng) -> crate::feedback::UserMetrics {
    let mut grid = || rng.random_range(0..=8) as f64 / 2.0;
    crate::feedback::UserMetrics {
        quiz_score_latest: grid() / 4.0,
        quiz_score_mean: grid() / 4.0,
        chapters_completed: grid().floor(),
        diary_streak_days: grid().floor(),
        sound_sessions_count: grid().floor(),
    }
}
