//! The two synthetic worlds: documents, what a careless extractor reads
//! out of them, the true facts, and the questions asked.

use serde_json::{json, Value};

use docstruct_core::discovery::SchemaEdit;
use docstruct_core::model::{AttrRef, AttributeDef, Constraint, ConstraintKind, DataType, JoinLink, Schema, TableDef};

pub struct Row {
    pub table: &'static str,
    pub values: Value,
    /// A misreading: served by the extractor but not a true fact.
    pub planted: bool,
}

pub struct Doc {
    pub id: &'static str,
    pub title: &'static str,
    pub text: &'static str,
    pub rows: Vec<Row>,
}

pub struct Question {
    pub id: &'static str,
    pub category: &'static str,
    pub text: &'static str,
    pub gold: Value,
    pub schema: Schema,
    pub concepts: Vec<&'static str>,
    pub sql: &'static str,
    /// Served when `sql` does not fit the schema the pipeline ended up with.
    pub fallback_sql: Option<&'static str>,
}

pub struct Mode {
    pub name: &'static str,
    pub no_clear: bool,
    pub passive: bool,
    pub expected_correct: usize,
}

pub struct World {
    pub name: &'static str,
    pub docs: Vec<Doc>,
    /// True facts no document row states correctly.
    pub corrections: Vec<Row>,
    pub constraints: Vec<Constraint>,
    pub questions: Vec<Question>,
    /// Edits that settle a missing relationship, by target concept.
    pub link_edits: Vec<(&'static str, Vec<SchemaEdit>)>,
    pub modes: Vec<Mode>,
}

impl World {
    /// The merged true row for an entity, or null.
    pub fn truth(&self, table: &str, name: &str) -> Value {
        let mut out = serde_json::Map::new();
        let rows = self
            .docs
            .iter()
            .flat_map(|d| d.rows.iter())
            .filter(|r| !r.planted)
            .chain(self.corrections.iter());
        for r in rows {
            if r.table != table || !r.values["name"].as_str().is_some_and(|n| n.eq_ignore_ascii_case(name)) {
                continue;
            }
            for (k, v) in r.values.as_object().expect("rows are objects") {
                out.insert(k.clone(), v.clone());
            }
        }
        if out.is_empty() {
            Value::Null
        } else {
            Value::Object(out)
        }
    }

    pub fn question(&self, text: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.text == text)
    }
}

fn row(table: &'static str, values: Value) -> Row {
    Row {
        table,
        values,
        planted: false,
    }
}

fn planted(table: &'static str, values: Value) -> Row {
    Row {
        table,
        values,
        planted: true,
    }
}

fn table(name: &str, attrs: &[(&str, DataType)]) -> TableDef {
    let attributes = attrs
        .iter()
        .map(|(a, t)| {
            if *a == "name" {
                AttributeDef::required(*a, *t)
            } else {
                AttributeDef::new(*a, *t)
            }
        })
        .collect();
    TableDef::new(name, attributes).with_key(&["name"])
}

fn link(from: (&str, &str), to: (&str, &str)) -> JoinLink {
    JoinLink::new(AttrRef::new(from.0, from.1), AttrRef::new(to.0, to.1))
}

fn range(id: &str, table: &str, attribute: &str, min: f64, max: f64) -> Constraint {
    Constraint::new(
        id,
        ConstraintKind::NumericRange {
            table: table.into(),
            attribute: attribute.into(),
            min,
            max,
        },
    )
}

fn fd(id: &str, table: &str, dependent: &str) -> Constraint {
    Constraint::new(
        id,
        ConstraintKind::FunctionalDependency {
            table: table.into(),
            determinant: vec!["name".into()],
            dependent: dependent.into(),
        },
    )
}

pub fn e2e() -> World {
    use DataType::*;
    let company = table("Company", &[("name", Text), ("ticker", Identifier), ("founded_year", Integer), ("city", Text)]);
    let university = table("University", &[("name", Text), ("city", Text), ("founded_year", Integer)]);
    let person = table(
        "Person",
        &[("name", Text), ("birth_year", Integer), ("role", Text), ("company", Identifier), ("university", Text)],
    );
    let schema = Schema::new(
        vec![company, person, university],
        vec![
            link(("Person", "company"), ("Company", "ticker")),
            link(("Person", "university"), ("University", "name")),
        ],
    );
    let concepts = vec!["Company", "Person", "University"];
    let q = |id, text, gold: Value, sql| Question {
        id,
        category: "general",
        text,
        gold,
        schema: schema.clone(),
        concepts: concepts.clone(),
        sql,
        fallback_sql: None,
    };
    let docs = vec![
        Doc {
            id: "d1",
            title: "Acme Robotics",
            text: "Acme Robotics (ACMR) is a company that builds warehouse robots. It was founded in 1998 \
                   and keeps its headquarters in the city of Boston. The firm sells picking arms and \
                   autonomous carts to logistics operators across North America.",
            rows: vec![row(
                "Company",
                json!({"name": "Acme Robotics", "ticker": "ACMR", "founded_year": 1998, "city": "Boston"}),
            )],
        },
        Doc {
            id: "d2",
            title: "Borealis Energy",
            text: "Borealis Energy (BORE) is a company that develops wind and storage projects. It was \
                   founded in 2004 and is headquartered in the city of Denver. Most of its capacity sits \
                   in the mountain states.",
            rows: vec![row(
                "Company",
                json!({"name": "Borealis Energy", "ticker": "BORE", "founded_year": 2004, "city": "Denver"}),
            )],
        },
        Doc {
            id: "d3",
            title: "Cobalt Health",
            text: "Cobalt Health (CBLT) is a company that runs outpatient clinics. It was founded in 2010 \
                   with headquarters in the city of Austin, and now operates in four states.",
            rows: vec![row(
                "Company",
                json!({"name": "Cobalt Health", "ticker": "CBLT", "founded_year": 2010, "city": "Austin"}),
            )],
        },
        Doc {
            id: "d4",
            title: "Universities",
            text: "Northbridge University is a private university in the city of Boston, founded in 1852. \
                   Westlake Institute is a technical university in the city of Denver, founded in 1921.",
            rows: vec![
                row(
                    "University",
                    json!({"name": "Northbridge University", "city": "Boston", "founded_year": 1852}),
                ),
                row(
                    "University",
                    json!({"name": "Westlake Institute", "city": "Denver", "founded_year": 1921}),
                ),
            ],
        },
        Doc {
            id: "d5",
            title: "Executives, part one",
            text: "Alice Moreno (birth year 1971) is the CEO of the company Acme Robotics (ACMR) and a graduate \
                   of Northbridge University. Brian Okafor (birth year 1983) is the CTO of Acme Robotics (ACMR) \
                   after studying at Westlake Institute. Chen Wei (birth year 1965) is the CEO of Borealis \
                   Energy (BORE) and studied at Northbridge University.",
            rows: vec![
                row(
                    "Person",
                    json!({"name": "Alice Moreno", "birth_year": 1971, "role": "CEO", "company": "ACMR", "university": "Northbridge University"}),
                ),
                row(
                    "Person",
                    json!({"name": "Brian Okafor", "birth_year": 1983, "role": "CTO", "company": "ACMR", "university": "Westlake Institute"}),
                ),
                row(
                    "Person",
                    json!({"name": "Chen Wei", "birth_year": 1965, "role": "CEO", "company": "BORE", "university": "Northbridge University"}),
                ),
            ],
        },
        Doc {
            id: "d6",
            title: "Executives, part two",
            text: "Dara Singh (birth year 1979) is the CEO of the company Cobalt Health (CBLT) and holds a \
                   degree from Westlake Institute. Emil Novak (birth year 1988) is the CFO of Borealis Energy \
                   (BORE) and a graduate of Northbridge University.",
            rows: vec![
                row(
                    "Person",
                    json!({"name": "Dara Singh", "birth_year": 1979, "role": "CEO", "company": "CBLT", "university": "Westlake Institute"}),
                ),
                row(
                    "Person",
                    json!({"name": "Emil Novak", "birth_year": 1988, "role": "CFO", "company": "BORE", "university": "Northbridge University"}),
                ),
            ],
        },
    ];
    let questions = vec![
        q("e2e-01", "How many companies are in the collection?", json!(3), "SELECT COUNT(*) AS n FROM Company"),
        q(
            "e2e-02",
            "Which company was founded most recently?",
            json!("Cobalt Health"),
            "SELECT name FROM Company ORDER BY founded_year DESC LIMIT 1",
        ),
        q(
            "e2e-03",
            "How many companies were founded after 2000?",
            json!(2),
            "SELECT COUNT(*) AS n FROM Company WHERE founded_year > 2000",
        ),
        q(
            "e2e-04",
            "In which city is Borealis Energy headquartered?",
            json!("Denver"),
            "SELECT city FROM Company WHERE name = 'Borealis Energy'",
        ),
        q(
            "e2e-05",
            "What is the stock ticker of Acme Robotics?",
            json!("ACMR"),
            "SELECT ticker FROM Company WHERE name = 'Acme Robotics'",
        ),
        q(
            "e2e-06",
            "Who is the CEO of Cobalt Health?",
            json!("Dara Singh"),
            "SELECT Person.name FROM Person JOIN Company ON Person.company = Company.ticker \
             WHERE Company.name = 'Cobalt Health' AND Person.role = 'CEO'",
        ),
        q(
            "e2e-07",
            "How many people work at Borealis Energy?",
            json!(2),
            "SELECT COUNT(*) AS n FROM Person JOIN Company ON Person.company = Company.ticker \
             WHERE Company.name = 'Borealis Energy'",
        ),
        q(
            "e2e-08",
            "Which people graduated from Northbridge University?",
            json!(["Alice Moreno", "Chen Wei", "Emil Novak"]),
            "SELECT name FROM Person WHERE university = 'Northbridge University'",
        ),
        q(
            "e2e-09",
            "When was Westlake Institute founded?",
            json!(1921),
            "SELECT founded_year FROM University WHERE name = 'Westlake Institute'",
        ),
        q(
            "e2e-10",
            "What is the average founding year of the companies?",
            json!(2004),
            "SELECT AVG(founded_year) AS avg_year FROM Company",
        ),
        q(
            "e2e-11",
            "Who is the oldest person?",
            json!("Chen Wei"),
            "SELECT name FROM Person ORDER BY birth_year ASC LIMIT 1",
        ),
        q(
            "e2e-12",
            "How many people were born before 1975?",
            json!(2),
            "SELECT COUNT(*) AS n FROM Person WHERE birth_year < 1975",
        ),
        q(
            "e2e-13",
            "Which company does Brian Okafor work for?",
            json!("Acme Robotics"),
            "SELECT Company.name FROM Person JOIN Company ON Person.company = Company.ticker \
             WHERE Person.name = 'Brian Okafor'",
        ),
        q(
            "e2e-14",
            "Which university did Dara Singh attend?",
            json!("Westlake Institute"),
            "SELECT university FROM Person WHERE name = 'Dara Singh'",
        ),
        q(
            "e2e-15",
            "In which city is the university that Alice Moreno attended?",
            json!("Boston"),
            "SELECT University.city FROM Person JOIN University ON Person.university = University.name \
             WHERE Person.name = 'Alice Moreno'",
        ),
        q(
            "e2e-16",
            "How many CEOs studied at Westlake Institute?",
            json!(1),
            "SELECT COUNT(*) AS n FROM Person WHERE role = 'CEO' AND university = 'Westlake Institute'",
        ),
        q(
            "e2e-17",
            "What is the earliest founding year among the universities?",
            json!(1852),
            "SELECT MIN(founded_year) AS earliest FROM University",
        ),
        q(
            "e2e-18",
            "Which companies are based in the same city as Northbridge University?",
            json!("Acme Robotics"),
            "SELECT Company.name FROM Company JOIN University ON Company.city = University.city \
             WHERE University.name = 'Northbridge University'",
        ),
        q(
            "e2e-19",
            "How many people work at companies founded before 2005?",
            json!(4),
            "SELECT COUNT(*) AS n FROM Person JOIN Company ON Person.company = Company.ticker \
             WHERE Company.founded_year < 2005",
        ),
        q("e2e-20", "Who is the CFO?", json!("Emil Novak"), "SELECT name FROM Person WHERE role = 'CFO'"),
    ];
    World {
        name: "e2e",
        docs,
        corrections: Vec::new(),
        constraints: vec![
            Constraint::new(
                "person_company",
                ConstraintKind::ForeignKey {
                    child: AttrRef::new("Person", "company"),
                    parent: AttrRef::new("Company", "ticker"),
                },
            ),
            range("birth_year_range", "Person", "birth_year", 1900.0, 2010.0),
        ],
        questions,
        link_edits: Vec::new(),
        modes: vec![Mode {
            name: "full",
            no_clear: false,
            passive: false,
            expected_correct: 20,
        }],
    }
}

pub fn adversarial() -> World {
    use DataType::*;
    let docs = vec![
        Doc {
            id: "a1",
            title: "Ivan Petrov",
            text: "Ivan Petrov (date of birth 1980-03-12) holds the role of founder at Quanta Foods, the employer \
                   named in the company register. Ivan Petrov graduated from Eastmoor University, the alma mater \
                   the register lists, before starting the company.",
            rows: vec![row(
                "Person",
                json!({"name": "Ivan Petrov", "birth_date": "1980-03-12", "role": "founder",
                       "employer": "Quanta Foods", "alma_mater": "Eastmoor University"}),
            )],
        },
        Doc {
            id: "a2",
            title: "Quanta Foods",
            text: "Quanta Foods is a company founded in 2003 with headquarters in the city of Port Ellis. \
                   The profile of Ivan Petrov mentions a father, Pavel Petrov, whose date of birth is 1951-06-30.",
            rows: vec![
                row(
                    "Company",
                    json!({"name": "Quanta Foods", "founded_year": 2003, "city": "Port Ellis"}),
                ),
                planted("Person", json!({"name": "Ivan Petrov", "birth_date": "1951-06-30"})),
            ],
        },
        Doc {
            id: "a3",
            title: "Helix Labs staff, part one",
            text: "Helix Labs staff register. Marta Lind, lab technician, employer Helix Labs, age 18 (entered as \
                   18O on the intake form). Jonas Falk, analyst, employer Helix Labs, age 41 (492 months).",
            rows: vec![
                planted(
                    "Person",
                    json!({"name": "Marta Lind", "role": "lab technician", "employer": "Helix Labs", "age": 180}),
                ),
                planted(
                    "Person",
                    json!({"name": "Jonas Falk", "role": "analyst", "employer": "Helix Labs", "age": 492}),
                ),
            ],
        },
        Doc {
            id: "a4",
            title: "Helix Labs staff, part two",
            text: "Helix Labs staff register, continued. Sofia Reyes, chemist, employer Helix Labs, age 35. \
                   Petra Holm, lab director, employer Helix Labs, age 52. Lukas Berg, engineer, employer \
                   Helix Labs, age 29.",
            rows: vec![
                row(
                    "Person",
                    json!({"name": "Sofia Reyes", "role": "chemist", "employer": "Helix Labs", "age": 35}),
                ),
                row(
                    "Person",
                    json!({"name": "Petra Holm", "role": "lab director", "employer": "Helix Labs", "age": 52}),
                ),
                row(
                    "Person",
                    json!({"name": "Lukas Berg", "role": "engineer", "employer": "Helix Labs", "age": 29}),
                ),
            ],
        },
        Doc {
            id: "a5",
            title: "Universities of the coast",
            text: "Eastmoor University is a university in the city of Kestrel Bay. Pinecrest College is a \
                   university in the city of Ashford.",
            rows: vec![
                row("University", json!({"name": "Eastmoor University", "city": "Kestrel Bay"})),
                row("University", json!({"name": "Pinecrest College", "city": "Ashford"})),
            ],
        },
        Doc {
            id: "a6",
            title: "Market listings",
            text: "Quanta Foods, the company behind the Harbor snack line, listed its shares on the Port Ellis \
                   exchange in 2011.",
            rows: vec![planted("Company", json!({"name": "Quanta Foods", "founded_year": 2011}))],
        },
    ];
    let corrections = vec![
        row("Person", json!({"name": "Marta Lind", "role": "lab technician", "employer": "Helix Labs", "age": 18})),
        row("Person", json!({"name": "Jonas Falk", "role": "analyst", "employer": "Helix Labs", "age": 41})),
    ];
    let birth = Schema::new(vec![table("Person", &[("name", Text), ("birth_date", Date)])], Vec::new());
    let founded = Schema::new(
        vec![table("Company", &[("name", Text), ("founded_year", Integer), ("city", Text)])],
        Vec::new(),
    );
    let staff = Schema::new(
        vec![table("Person", &[("name", Text), ("age", Integer), ("employer", Text)])],
        Vec::new(),
    );
    let founder = Schema::new(
        vec![
            table("Person", &[("name", Text), ("role", Text), ("employer", Text)]),
            table("Company", &[("name", Text), ("city", Text)]),
        ],
        vec![link(("Person", "employer"), ("Company", "name"))],
    );
    let questions = vec![
        Question {
            id: "adv-01",
            category: "conflict",
            text: "What is the date of birth of Ivan Petrov?",
            gold: json!("1980-03-12"),
            schema: birth,
            concepts: vec!["Person"],
            sql: "SELECT birth_date FROM Person WHERE name = 'Ivan Petrov'",
            fallback_sql: None,
        },
        Question {
            id: "adv-02",
            category: "conflict",
            text: "In what year was Quanta Foods founded?",
            gold: json!(2003),
            schema: founded,
            concepts: vec!["Company"],
            sql: "SELECT founded_year FROM Company WHERE name = 'Quanta Foods'",
            fallback_sql: None,
        },
        Question {
            id: "adv-03",
            category: "anomaly",
            text: "What is the average age of the Helix Labs staff?",
            gold: json!(35),
            schema: staff.clone(),
            concepts: vec!["Person"],
            sql: "SELECT AVG(age) AS avg_age FROM Person WHERE employer = 'Helix Labs'",
            fallback_sql: None,
        },
        Question {
            id: "adv-04",
            category: "anomaly",
            text: "Who is the oldest member of the Helix Labs staff?",
            gold: json!("Petra Holm"),
            schema: staff.clone(),
            concepts: vec!["Person"],
            sql: "SELECT name FROM Person WHERE employer = 'Helix Labs' ORDER BY age DESC LIMIT 1",
            fallback_sql: None,
        },
        Question {
            id: "adv-05",
            category: "anomaly",
            text: "How many Helix Labs staff members are older than 30?",
            gold: json!(3),
            schema: staff,
            concepts: vec!["Person"],
            sql: "SELECT COUNT(*) AS n FROM Person WHERE employer = 'Helix Labs' AND age > 30",
            fallback_sql: None,
        },
        Question {
            id: "adv-06",
            category: "multi-hop",
            text: "In which city is the university attended by the founder of Quanta Foods?",
            gold: json!("Kestrel Bay"),
            schema: founder,
            concepts: vec!["Person", "Company", "University"],
            sql: "SELECT University.city FROM Person JOIN Company ON Person.employer = Company.name \
                  JOIN University ON Person.alma_mater = University.name \
                  WHERE Company.name = 'Quanta Foods' AND Person.role = 'founder'",
            fallback_sql: Some("SELECT city FROM Company WHERE name = 'Quanta Foods'"),
        },
    ];
    let university_edits = vec![
        SchemaEdit::AddTable {
            table: table("University", &[("name", Text), ("city", Text)]),
        },
        SchemaEdit::AddAttribute {
            table: "Person".into(),
            attribute: AttributeDef::new("alma_mater", Text),
        },
        SchemaEdit::AddLink {
            from: AttrRef::new("Person", "alma_mater"),
            to: AttrRef::new("University", "name"),
        },
    ];
    World {
        name: "adversarial",
        docs,
        corrections,
        constraints: vec![
            fd("fd_birth_date", "Person", "birth_date"),
            fd("fd_founded_year", "Company", "founded_year"),
            range("age_range", "Person", "age", 0.0, 120.0),
        ],
        questions,
        link_edits: vec![("University", university_edits)],
        modes: vec![
            Mode {
                name: "full",
                no_clear: false,
                passive: false,
                expected_correct: 6,
            },
            Mode {
                name: "no-clear",
                no_clear: true,
                passive: false,
                expected_correct: 1,
            },
            Mode {
                name: "passive",
                no_clear: false,
                passive: true,
                expected_correct: 5,
            },
        ],
    }
}
